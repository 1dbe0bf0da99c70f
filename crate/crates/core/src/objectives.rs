//! Classification, reconstruction and sparsity losses.
//!
//! Each loss has a plain version on values and a tape version that records
//! the same arithmetic for differentiation.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Probability clamp for the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Added under the square root of each norm in the cosine term.
pub const NORM_EPS: f64 = 1e-24;
/// Exponent of the norm ratio in the sparsity loss.
pub const SPARSE_P: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub sparse: f64,
    pub cos: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            sparse: 0.1,
            cos: 1.0,
            mse: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_ce: f64,
    /// `None` when the SSL branch is disabled.
    pub l_rec: Option<f64>,
    pub l_sparse: Option<f64>,
    pub weights: LossWeights,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.l_ce.is_finite() && self.l_rec.map_or(true, f64::is_finite) && self.l_sparse.map_or(true, f64::is_finite)
    }
}

/// `(main_loss, ssl_loss)`; the SSL loss is zero when its parts are absent.
pub fn total_objective(bundle: &LossBundle) -> (f64, f64) {
    let w = &bundle.weights;
    let ssl = w.rec * bundle.l_rec.unwrap_or(0.0) + w.sparse * bundle.l_sparse.unwrap_or(0.0);
    (bundle.l_ce, ssl)
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`.
pub fn bce_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    check_labels(labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Tape version of [`bce_loss`]; `scores` is `N×1`.
pub fn bce_tape(t: &mut Tape, scores: Var, labels: &[u8]) -> Result<Var> {
    let n = t.value(scores).len();
    if n != labels.len() || n == 0 {
        return Err(Error::Shape(format!("{n} scores for {} labels", labels.len())));
    }
    if t.value(scores).data.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    check_labels(labels)?;
    let shape = t.value(scores).shape();
    let y = Arc::new(Mat::from_vec(shape.0, shape.1, labels.iter().map(|&v| v as f64).collect()));
    let not_y = Arc::new(y.map(|v| 1.0 - v));
    let p = t.clamp(scores, BCE_EPS, 1.0 - BCE_EPS);
    let lp = t.log(p);
    let q = t.affine(p, -1.0, 1.0);
    let lq = t.log(q);
    let a = t.mul_const(lp, y);
    let c = t.mul_const(lq, not_y);
    let s = t.add(a, c);
    let s = t.sum(s);
    Ok(t.scale(s, -1.0 / n as f64))
}

fn check_pairs(a: &[Mat], b: &[Mat]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::Shape("reconstruction and target shapes differ".into()));
    }
    Ok(())
}

/// `w.mse·mean((x̂−x)²) + w.cos·mean_i(1 − cos(x̂_i, x_i))`.
///
/// With `select`, only entries where the selector is 1 enter either term
/// (masked-only mode passes `1 − M`). Nodes whose selected target has zero
/// norm are left out of the cosine mean.
pub fn recon_loss(xhat: &[Mat], x: &[Mat], w: &LossWeights, select: Option<&[Mat]>) -> Result<f64> {
    check_pairs(xhat, x)?;
    if let Some(s) = select {
        check_pairs(s, x)?;
    }
    let sel = |i: usize, k: usize| select.map_or(1.0, |s| s[i].data[k]);
    let (mut sq, mut count) = (0.0, 0.0);
    let (mut cos_sum, mut cos_n) = (0.0, 0usize);
    for i in 0..x.len() {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for k in 0..x[i].len() {
            let m = sel(i, k);
            let (a, b) = (m * xhat[i].data[k], m * x[i].data[k]);
            sq += (a - b) * (a - b);
            count += m;
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if nb > 0.0 {
            cos_sum += 1.0 - dot / ((na + NORM_EPS).sqrt() * (nb + NORM_EPS).sqrt());
            cos_n += 1;
        }
    }
    let mse = if count > 0.0 { sq / count } else { 0.0 };
    let cos = if cos_n > 0 { cos_sum / cos_n as f64 } else { 0.0 };
    Ok(w.mse * mse + w.cos * cos)
}

/// Tape version of [`recon_loss`]; the target and selector are constants.
pub fn recon_tape(t: &mut Tape, xhat: &[Var], x: &[Mat], w: &LossWeights, select: Option<&[Mat]>) -> Result<Var> {
    let shapes: Vec<Mat> = xhat.iter().map(|&v| Mat::zeros(t.value(v).rows, t.value(v).cols)).collect();
    check_pairs(&shapes, x)?;
    if let Some(s) = select {
        check_pairs(s, x)?;
    }
    let count: f64 = match select {
        Some(s) => s.iter().map(Mat::sum).sum(),
        None => x.iter().map(|m| m.len() as f64).sum(),
    };
    let mut sq_terms = Vec::new();
    let mut cos_terms = Vec::new();
    for i in 0..x.len() {
        let (a, b) = match select {
            Some(s) => {
                let s = Arc::new(s[i].clone());
                let a = t.mul_const(xhat[i], s.clone());
                (a, x[i].zip_map(&s, |v, m| v * m))
            }
            None => (xhat[i], x[i].clone()),
        };
        let nb: f64 = b.data.iter().map(|v| v * v).sum();
        let bc = t.constant(b.clone());
        let d = t.sub(a, bc);
        let d2 = t.mul(d, d);
        sq_terms.push(t.sum(d2));
        if nb > 0.0 {
            let dot = t.mul_const(a, Arc::new(b));
            let dot = t.sum(dot);
            let a2 = t.mul(a, a);
            let na = t.sum(a2);
            let na = t.affine(na, 1.0, NORM_EPS);
            let na = t.pow_const(na, 0.5);
            let cos = t.scale(na, (nb + NORM_EPS).sqrt());
            let cos = t.div(dot, cos);
            cos_terms.push(t.affine(cos, -1.0, 1.0));
        }
    }
    let zero = t.constant(Mat::scalar(0.0));
    let mse = if count > 0.0 {
        let s = sum_vars(t, &sq_terms);
        t.scale(s, w.mse / count)
    } else {
        zero
    };
    let cos = if cos_terms.is_empty() {
        zero
    } else {
        let s = sum_vars(t, &cos_terms);
        t.scale(s, w.cos / cos_terms.len() as f64)
    };
    Ok(t.add(mse, cos))
}

fn sum_vars(t: &mut Tape, vs: &[Var]) -> Var {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = t.add(acc, v);
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseValue {
    pub value: f64,
    /// Set when the input was all zero and the lower bound was returned.
    pub degenerate: bool,
}

/// `n^(1/p − 1) · ‖h‖₁ / ‖h‖_p`, in `[n^(1/p − 1), 1]`.
pub fn sparse_loss(h: &[Mat], p: f64) -> Result<SparseValue> {
    if p < 2.0 {
        return Err(Error::InvalidInput(format!("sparse exponent {p} below 2")));
    }
    let n: usize = h.iter().map(Mat::len).sum();
    if n == 0 {
        return Err(Error::InvalidInput("empty latent".into()));
    }
    let lower = (n as f64).powf(1.0 / p - 1.0);
    let peak = h.iter().map(Mat::max_abs).fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(SparseValue {
            value: lower,
            degenerate: true,
        });
    }
    // Dividing by the peak first keeps |v|^p representable for any scale.
    let (mut l1, mut lp) = (0.0, 0.0);
    for v in h.iter().flat_map(|m| m.data.iter()) {
        let a = v.abs() / peak;
        l1 += a;
        lp += a.powf(p);
    }
    let value = lower * l1 / lp.powf(1.0 / p);
    Ok(SparseValue {
        value,
        degenerate: false,
    })
}

/// Tape version of [`sparse_loss`]; an all-zero input gives a constant.
pub fn sparse_tape(t: &mut Tape, h: &[Var], p: f64) -> Result<(Var, bool)> {
    let vals: Vec<Mat> = h.iter().map(|&v| t.value(v).clone()).collect();
    let plain = sparse_loss(&vals, p)?;
    if plain.degenerate {
        return Ok((t.constant(Mat::scalar(plain.value)), true));
    }
    let n: usize = vals.iter().map(Mat::len).sum();
    let peak = vals.iter().map(Mat::max_abs).fold(0.0, f64::max);
    let mut l1 = Vec::with_capacity(h.len());
    let mut lp = Vec::with_capacity(h.len());
    for &v in h {
        // the peak is treated as a constant: the ratio is scale-invariant
        let a = t.abs(v);
        let a = t.scale(a, 1.0 / peak);
        l1.push(t.sum(a));
        let ap = t.pow_const(a, p);
        lp.push(t.sum(ap));
    }
    let l1 = sum_vars(t, &l1);
    let lp = sum_vars(t, &lp);
    let lp = t.pow_const(lp, 1.0 / p);
    let r = t.div(l1, lp);
    Ok((t.scale(r, (n as f64).powf(1.0 / p - 1.0)), false))
}
