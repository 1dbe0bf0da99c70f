//! Signal conditioning: raw tri-axial acceleration → wavelet-packet tensors.
//!
//! The chain is high-pass → DFT321 axis fusion → 512-sample segmentation with
//! per-segment max-abs normalization → wavelet packet decomposition.

pub mod filter;
pub mod wavelet;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use wavelet::Wavelet;

/// Samples per segment.
pub const SEGMENT_LEN: usize = 512;
/// Butterworth order of the high-pass (before forward-backward doubling).
pub const HIGHPASS_ORDER: usize = 4;

/// Tri-axial recording of `nodes` sensors, stored `[node][axis][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub nodes: usize,
    pub len: usize,
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
}

impl RawRecording {
    pub fn new(nodes: usize, len: usize, sample_rate_hz: f64, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != nodes * 3 * len {
            return Err(Error::Shape(format!(
                "expected {}×3×{} samples, got {}",
                nodes,
                len,
                samples.len()
            )));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        let rec = Self {
            nodes,
            len,
            sample_rate_hz,
            samples,
        };
        rec.check_finite()?;
        Ok(rec)
    }

    pub fn axis(&self, node: usize, axis: usize) -> &[f64] {
        let off = (node * 3 + axis) * self.len;
        &self.samples[off..off + self.len]
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.samples.iter().position(|v| !v.is_finite()) {
            let (node, rest) = (pos / (3 * self.len), pos % (3 * self.len));
            return Err(Error::NonFinite(format!(
                "recording at node {node}, axis {}, sample {}",
                rest / self.len,
                rest % self.len
            )));
        }
        Ok(())
    }
}

/// One normalized single-axis segment, `N×512`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSegment {
    pub samples: Mat,
    pub segment_index: usize,
    /// Divisor applied during normalization (1 for degenerate segments).
    pub scale: f64,
    /// All-zero segment; normalization was skipped.
    pub degenerate: bool,
}

/// Wavelet-packet coefficients: one `F×T` block per node.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroTemporalTensor {
    pub coeffs: Vec<Mat>,
    pub wavelet: Wavelet,
    pub depth: usize,
}

impl SpectroTemporalTensor {
    pub fn nodes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn bands(&self) -> usize {
        1 << self.depth
    }

    pub fn steps(&self) -> usize {
        self.coeffs.first().map_or(0, |m| m.cols)
    }

    pub fn energy(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|m| m.data.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Zero-phase 4th-order Butterworth high-pass applied to every axis.
pub fn highpass_filter(rec: &RawRecording, cutoff_hz: f64) -> Result<RawRecording> {
    rec.check_finite()?;
    let nyquist = rec.sample_rate_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::InvalidInput(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    let sections = filter::butterworth_highpass(HIGHPASS_ORDER, cutoff_hz, rec.sample_rate_hz);
    let padlen = (3.0 * rec.sample_rate_hz / cutoff_hz).ceil() as usize;
    let mut out = Vec::with_capacity(rec.samples.len());
    for node in 0..rec.nodes {
        for axis in 0..3 {
            out.extend(filter::filtfilt(&sections, rec.axis(node, axis), padlen));
        }
    }
    Ok(RawRecording {
        samples: out,
        ..rec.clone()
    })
}

/// DFT321 axis fusion of three equal-length axes.
///
/// Each output bin has magnitude `sqrt(|X|² + |Y|² + |Z|²)` and the phase of
/// `X + Y + Z`; the upper half of the spectrum is mirrored from the lower half
/// so the inverse transform is real.
pub fn dft321_axes(x: &[f64], y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if y.len() != n || z.len() != n {
        return Err(Error::Shape(format!(
            "axis lengths differ: {}, {}, {}",
            x.len(),
            y.len(),
            z.len()
        )));
    }
    Ok(fuse_axes(&mut FftPlanner::new(), x, y, z))
}

/// [`dft321_axes`] on checked inputs; `planner` caches plans across calls.
fn fuse_axes(planner: &mut FftPlanner<f64>, x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let fwd = planner.plan_fft_forward(n);
    let spectrum = |s: &[f64]| {
        let mut buf: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fwd.process(&mut buf);
        buf
    };
    let (sx, sy, sz) = (spectrum(x), spectrum(y), spectrum(z));
    let mut fused = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..=n / 2 {
        let mag = (sx[k].norm_sqr() + sy[k].norm_sqr() + sz[k].norm_sqr()).sqrt();
        let phase = if k == 0 || (n % 2 == 0 && k == n / 2) {
            // bins that must be real: keep the sign of the real sum
            if (sx[k] + sy[k] + sz[k]).re < 0.0 {
                std::f64::consts::PI
            } else {
                0.0
            }
        } else {
            (sx[k] + sy[k] + sz[k]).arg()
        };
        fused[k] = Complex64::from_polar(mag, phase);
        if k != 0 && k != n - k {
            fused[n - k] = fused[k].conj();
        }
    }
    let inv = planner.plan_fft_inverse(n);
    inv.process(&mut fused);
    fused.iter().map(|c| c.re / n as f64).collect()
}

/// DFT321 for every node; output is `N×T_raw`.
pub fn dft321(rec: &RawRecording) -> Result<Mat> {
    let mut data = Vec::with_capacity(rec.nodes * rec.len);
    let mut planner = FftPlanner::new();
    for node in 0..rec.nodes {
        data.extend(fuse_axes(
            &mut planner,
            rec.axis(node, 0),
            rec.axis(node, 1),
            rec.axis(node, 2),
        ));
    }
    Ok(Mat::from_vec(rec.nodes, rec.len, data))
}

/// Cut `N×T_raw` into non-overlapping 512-sample segments and divide each by
/// its largest absolute value across all channels. The trailing remainder is
/// dropped; an all-zero segment keeps divisor 1 and is flagged degenerate.
pub fn segment_and_normalize(series: &Mat) -> Result<Vec<SignalSegment>> {
    if series.cols < SEGMENT_LEN {
        return Err(Error::InvalidInput(format!(
            "need at least {SEGMENT_LEN} samples, got {}",
            series.cols
        )));
    }
    if !series.is_finite() {
        return Err(Error::NonFinite("series".into()));
    }
    let count = series.cols / SEGMENT_LEN;
    Ok((0..count)
        .map(|s| {
            let start = s * SEGMENT_LEN;
            let mut seg = Mat::from_fn(series.rows, SEGMENT_LEN, |r, c| {
                series.get(r, start + c)
            });
            let peak = seg.max_abs();
            let degenerate = peak == 0.0;
            let scale = if degenerate { 1.0 } else { peak };
            seg.scale_in_place(1.0 / scale);
            SignalSegment {
                samples: seg,
                segment_index: s,
                scale,
                degenerate,
            }
        })
        .collect())
}

fn check_depth(len: usize, depth: usize) -> Result<()> {
    if depth == 0 || depth >= usize::BITS as usize || len % (1 << depth) != 0 {
        return Err(Error::InvalidInput(format!(
            "depth {depth}: 2^depth must divide segment length {len}"
        )));
    }
    Ok(())
}

/// Full wavelet packet tree of every node to `depth` levels.
pub fn wpt_decompose(
    seg: &SignalSegment,
    depth: usize,
    wavelet: Wavelet,
) -> Result<SpectroTemporalTensor> {
    check_depth(seg.samples.cols, depth)?;
    let coeffs = (0..seg.samples.rows)
        .map(|r| wavelet::packet_decompose(seg.samples.row(r), depth, wavelet))
        .collect();
    Ok(SpectroTemporalTensor {
        coeffs,
        wavelet,
        depth,
    })
}

/// Inverse of [`wpt_decompose`].
pub fn wpt_reconstruct(x: &SpectroTemporalTensor) -> Result<SignalSegment> {
    let bands = x.bands();
    let steps = x.steps();
    check_depth(bands * steps, x.depth)?;
    let mut data = Vec::with_capacity(x.nodes() * bands * steps);
    for (i, m) in x.coeffs.iter().enumerate() {
        if m.shape() != (bands, steps) {
            return Err(Error::Shape(format!(
                "node {i} has {}×{} coefficients; depth {} requires {bands}×{steps}",
                m.rows, m.cols, x.depth
            )));
        }
        data.extend(wavelet::packet_reconstruct(m, x.depth, x.wavelet));
    }
    Ok(SignalSegment {
        samples: Mat::from_vec(x.nodes(), bands * steps, data),
        segment_index: 0,
        scale: 1.0,
        degenerate: false,
    })
}

/// Result of running the whole conditioning chain on one recording.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub tensors: Vec<SpectroTemporalTensor>,
    pub scales: Vec<f64>,
    pub degenerate: Vec<bool>,
}

pub fn preprocess_recording(
    rec: &RawRecording,
    cutoff_hz: f64,
    wavelet: Wavelet,
    depth: usize,
) -> Result<Preprocessed> {
    let filtered = highpass_filter(rec, cutoff_hz)?;
    let fused = dft321(&filtered)?;
    let segments = segment_and_normalize(&fused)?;
    let mut out = Preprocessed {
        tensors: Vec::with_capacity(segments.len()),
        scales: Vec::with_capacity(segments.len()),
        degenerate: Vec::with_capacity(segments.len()),
    };
    for seg in &segments {
        out.tensors.push(wpt_decompose(seg, depth, wavelet)?);
        out.scales.push(seg.scale);
        out.degenerate.push(seg.degenerate);
    }
    Ok(out)
}
