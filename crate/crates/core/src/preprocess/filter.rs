//! Zero-phase Butterworth high-pass filtering.

/// One direct-form-II-transposed biquad, `a0` normalized to 1.
#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// State that makes a constant unit input an equilibrium.
    fn steady_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        [y - self.b[0], self.b[2] - self.a[2] * y]
    }

    /// Magnitude of the response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz;
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -(c[1] * w.sin() + c[2] * (2.0 * w).sin());
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }
}

/// Butterworth high-pass of even `order` as cascaded biquads, via the
/// bilinear transform with frequency prewarping.
pub fn butterworth_highpass(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Vec<Biquad> {
    assert!(order >= 2 && order % 2 == 0, "order must be even");
    let k = (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();
    (0..order / 2)
        .map(|i| {
            let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * order) as f64;
            let q = 1.0 / (2.0 * theta.cos());
            let norm = 1.0 / (1.0 + k / q + k * k);
            Biquad {
                b: [norm, -2.0 * norm, norm],
                a: [1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
            }
        })
        .collect()
}

/// Combined magnitude of a cascade applied forward and backward.
pub fn zero_phase_magnitude(sections: &[Biquad], freq_hz: f64, sample_rate_hz: f64) -> f64 {
    sections
        .iter()
        .map(|s| s.magnitude(freq_hz, sample_rate_hz))
        .product::<f64>()
        .powi(2)
}

fn run_cascade(sections: &[Biquad], x: &mut [f64]) {
    // all sections advance together so their recurrences overlap
    let mut level = x.first().copied().unwrap_or(0.0);
    let mut state: Vec<[f64; 2]> = sections
        .iter()
        .map(|s| {
            let ss = s.steady_state();
            let z = [ss[0] * level, ss[1] * level];
            level *= s.dc_gain();
            z
        })
        .collect();
    for v in x.iter_mut() {
        let mut input = *v;
        for (s, z) in sections.iter().zip(state.iter_mut()) {
            let y = s.b[0] * input + z[0];
            z[0] = s.b[1] * input - s.a[1] * y + z[1];
            z[1] = s.b[2] * input - s.a[2] * y;
            input = y;
        }
        *v = input;
    }
}

/// Forward-backward filtering with odd-reflection padding and steady-state
/// initial conditions, so constants and slow trends produce no start-up
/// transient. Output length equals input length.
pub fn filtfilt(sections: &[Biquad], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    run_cascade(sections, &mut ext);
    ext.reverse();
    run_cascade(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourth_order_response_matches_butterworth_shape() {
        let fs = 2000.0;
        let sos = butterworth_highpass(4, 10.0, fs);
        let single = |f: f64| sos.iter().map(|s| s.magnitude(f, fs)).product::<f64>();
        // -3 dB at the cutoff.
        assert!((single(10.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(single(1e-9) < 1e-20);
        assert!((single(999.0) - 1.0).abs() < 1e-6);
    }
}
