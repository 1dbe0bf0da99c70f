//! Orthogonal wavelet packet transform with periodic extension.
//!
//! Bands come out in natural (Paley) order: at every split the low-pass child
//! precedes the high-pass child, so band `f` is the path whose binary digits
//! (most significant first) select high-pass at each level. This is *not*
//! ascending frequency order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wavelet {
    Haar,
    Db2,
    Db4,
}

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

// Daubechies scaling filters, normalized so that Σh = √2 and Σh² = 1.
const DB4: [f64; 8] = [
    0.230_377_813_308_896_500_863_3,
    0.714_846_570_552_915_647_089_9,
    0.630_880_767_929_858_907_881_7,
    -0.027_983_769_416_859_854_211_41,
    -0.187_034_811_719_093_084_079_6,
    0.030_841_381_835_560_763_627_22,
    0.032_883_011_666_885_199_735_41,
    -0.010_597_401_785_069_032_104_88,
];

impl Wavelet {
    pub fn name(self) -> &'static str {
        match self {
            Wavelet::Haar => "haar",
            Wavelet::Db2 => "db2",
            Wavelet::Db4 => "db4",
        }
    }

    /// Low-pass (scaling) filter taps.
    pub fn lowpass(self) -> Vec<f64> {
        match self {
            Wavelet::Haar => vec![SQRT_HALF, SQRT_HALF],
            Wavelet::Db2 => {
                let s3 = 3.0_f64.sqrt();
                let d = 4.0 * std::f64::consts::SQRT_2;
                vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d]
            }
            Wavelet::Db4 => DB4.to_vec(),
        }
    }

    /// High-pass (wavelet) filter: the alternating flip of the low-pass taps.
    pub fn highpass(self) -> Vec<f64> {
        let h = self.lowpass();
        let k = h.len();
        (0..k)
            .map(|n| if n % 2 == 0 { h[k - 1 - n] } else { -h[k - 1 - n] })
            .collect()
    }
}

impl fmt::Display for Wavelet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Wavelet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Wavelet::Haar),
            "db2" => Ok(Wavelet::Db2),
            "db4" => Ok(Wavelet::Db4),
            _ => Err(Error::UnknownWavelet(s.to_string())),
        }
    }
}

/// One level of periodized analysis: `x` of even length `L` → (approx, detail)
/// each of length `L/2`.
pub fn analysis_step(x: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let len = x.len();
    let half = len / 2;
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    for k in 0..half {
        let (mut sa, mut sd) = (0.0, 0.0);
        for n in 0..lo.len() {
            let i = 2 * k + n;
            let v = x[if i < len { i } else { i % len }];
            sa += lo[n] * v;
            sd += hi[n] * v;
        }
        a[k] = sa;
        d[k] = sd;
    }
    (a, d)
}

/// Adjoint of [`analysis_step`]; inverts it for orthonormal filters.
pub fn synthesis_step(a: &[f64], d: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let half = a.len();
    let len = 2 * half;
    let mut x = vec![0.0; len];
    for k in 0..half {
        for n in 0..lo.len() {
            x[(2 * k + n) % len] += lo[n] * a[k] + hi[n] * d[k];
        }
    }
    x
}

/// Full packet tree of one channel to `depth` levels; returns a `2^depth × len/2^depth`
/// matrix with bands in Paley order.
pub fn packet_decompose(signal: &[f64], depth: usize, wavelet: Wavelet) -> Mat {
    let (lo, hi) = (wavelet.lowpass(), wavelet.highpass());
    let mut nodes = vec![signal.to_vec()];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for node in &nodes {
            let (a, d) = analysis_step(node, &lo, &hi);
            next.push(a);
            next.push(d);
        }
        nodes = next;
    }
    let cols = nodes[0].len();
    Mat::from_vec(nodes.len(), cols, nodes.concat())
}

/// Inverse of [`packet_decompose`].
pub fn packet_reconstruct(bands: &Mat, depth: usize, wavelet: Wavelet) -> Vec<f64> {
    let (lo, hi) = (wavelet.lowpass(), wavelet.highpass());
    let mut nodes: Vec<Vec<f64>> = (0..bands.rows).map(|r| bands.row(r).to_vec()).collect();
    for _ in 0..depth {
        nodes = nodes
            .chunks(2)
            .map(|pair| synthesis_step(&pair[0], &pair[1], &lo, &hi))
            .collect();
    }
    nodes.pop().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_are_orthonormal() {
        for w in [Wavelet::Haar, Wavelet::Db2, Wavelet::Db4] {
            let h = w.lowpass();
            let g = w.highpass();
            let energy: f64 = h.iter().map(|v| v * v).sum();
            assert!((energy - 1.0).abs() < 1e-15, "{w}: {energy}");
            let dc: f64 = h.iter().sum();
            assert!((dc - std::f64::consts::SQRT_2).abs() < 1e-14);
            for shift in (2..h.len()).step_by(2) {
                let c: f64 = (0..h.len() - shift).map(|n| h[n] * h[n + shift]).sum();
                assert!(c.abs() < 1e-15, "{w} shift {shift}: {c}");
            }
            let cross: f64 = h.iter().zip(&g).map(|(a, b)| a * b).sum();
            assert!(cross.abs() < 1e-15);
        }
    }

    #[test]
    fn haar_impulse_single_level() {
        let mut x = vec![0.0; 512];
        x[0] = 1.0;
        let m = packet_decompose(&x, 1, Wavelet::Haar);
        assert_eq!(m.shape(), (2, 256));
        assert!((m.get(0, 0) - SQRT_HALF).abs() < 1e-15);
        assert!((m.get(1, 0).abs() - SQRT_HALF).abs() < 1e-15);
        let energy: f64 = m.data.iter().map(|v| v * v).sum();
        assert!((energy - 1.0).abs() < 1e-15);
        assert_eq!(m.data.iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(matches!("sym8".parse::<Wavelet>(), Err(Error::UnknownWavelet(_))));
        assert_eq!("DB4".parse::<Wavelet>().unwrap(), Wavelet::Db4);
    }
}
