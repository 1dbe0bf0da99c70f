//! Temporal-spectral mask-passing attention and global spatial attention.
//!
//! Mask-passing treats each node as a receiver of "masking" influence from its
//! in-neighbors. For a receiver `i` and sender `j` (both `F×T`), per head:
//!
//! ```text
//! F_i = x_i·W_QF   F_j = x_j·W_KF            (F×T; W_QF lower, W_KF upper triangular)
//! T_i = x_iᵀ·W_QT  T_j = x_jᵀ·W_KT           (T×F)
//! α_F = softmax_rows(F_i·W_F·F_jᵀ / √T)      (F×F; W_F lower triangular)
//! α_T = softmax_past(T_j·W_T·T_iᵀ / √F)      (T×T; column t normalized over t' ≤ t)
//! contribution = α_F · (x_j ⊙ W_V) · α_T     (F×T)
//! ```
//!
//! Head maps are summed over neighbors, fused by a 1×1 convolution across
//! heads, and squashed by the logistic function into a gate in (0, 1) that
//! multiplies the receiver's features.
//!
//! Note that `α_F` contracts over all time steps, so a layer's output at step
//! `t` is not independent of inputs after `t`; only the `α_T` path is causal.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Axis, SoftmaxMask, Var};
use crate::error::{Error, Result};
use crate::graph::TactileGraph;
use crate::params::{Binder, Group, ParamId, ParamStore, Support};
use crate::tensor::Mat;

/// Weights of one mask-passing head.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_qf: ParamId,
    pub w_kf: ParamId,
    pub w_qt: ParamId,
    pub w_kt: ParamId,
    pub w_f: ParamId,
    pub w_t: ParamId,
    pub w_v: ParamId,
}

/// All learnable weights of one mask-passing layer.
#[derive(Clone, Debug)]
pub struct TsmpLayerParams {
    pub bands: usize,
    pub steps: usize,
    pub heads: Vec<HeadParams>,
    /// `1×K` fusion kernel over stacked heads.
    pub fusion_w: ParamId,
    /// `1×1` fusion bias.
    pub fusion_b: ParamId,
}

impl TsmpLayerParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        bands: usize,
        steps: usize,
        heads: usize,
        group: Group,
    ) -> Self {
        assert!(heads >= 1, "need at least one head");
        let bt = 1.0 / (steps as f64).sqrt();
        let bf = 1.0 / (bands as f64).sqrt();
        let heads = (0..heads)
            .map(|k| {
                let mut add = |name: &str, shape, bound, support| {
                    store.add_uniform(rng, format!("{prefix}.head{k}.{name}"), shape, bound, group, support)
                };
                HeadParams {
                    w_qf: add("w_qf", (steps, steps), bt, Support::Lower),
                    w_kf: add("w_kf", (steps, steps), bt, Support::Upper),
                    w_qt: add("w_qt", (bands, bands), bf, Support::Full),
                    w_kt: add("w_kt", (bands, bands), bf, Support::Full),
                    w_f: add("w_f", (steps, steps), bt, Support::Lower),
                    w_t: add("w_t", (bands, bands), bf, Support::Full),
                    w_v: add("w_v", (bands, steps), 1.0, Support::Full),
                }
            })
            .collect::<Vec<_>>();
        let k = heads.len();
        let fusion_w = store.add_uniform(
            rng,
            format!("{prefix}.fusion_w"),
            (1, k),
            1.0 / (k as f64).sqrt(),
            group,
            Support::Full,
        );
        let fusion_b = store.add(format!("{prefix}.fusion_b"), Mat::zeros(1, 1), group, Support::Full);
        Self {
            bands,
            steps,
            heads,
            fusion_w,
            fusion_b,
        }
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}

/// Per-node quantities of one head that do not depend on the partner node.
#[derive(Clone, Copy, Debug)]
pub struct NodeProjections {
    /// `x·W_QF` (F×T)
    pub q_f: Var,
    /// `x·W_KF` (F×T)
    pub k_f: Var,
    /// `xᵀ·W_QT` (T×F)
    pub q_t: Var,
    /// `xᵀ·W_KT` (T×F)
    pub k_t: Var,
}

pub fn node_projections(b: &mut Binder<'_>, x: Var, head: &HeadParams) -> NodeProjections {
    let (w_qf, w_kf, w_qt, w_kt) = (
        b.param(head.w_qf),
        b.param(head.w_kf),
        b.param(head.w_qt),
        b.param(head.w_kt),
    );
    let t = &mut b.tape;
    NodeProjections {
        q_f: t.matmul(x, w_qf),
        k_f: t.matmul(x, w_kf),
        q_t: t.matmul_tn(x, w_qt),
        k_t: t.matmul_tn(x, w_kt),
    }
}

/// `(F_i, F_j, T_i, T_j)` for receiver `x_i` and sender `x_j`.
pub fn spectral_temporal_projections(
    b: &mut Binder<'_>,
    x_i: Var,
    x_j: Var,
    head: &HeadParams,
) -> Result<(Var, Var, Var, Var)> {
    let (fi, fj) = (b.tape.value(x_i).shape(), b.tape.value(x_j).shape());
    let want = b.store().get(head.w_v).shape();
    if fi != want || fj != want {
        return Err(Error::Shape(format!(
            "node features {fi:?}/{fj:?} do not match layer shape {want:?}"
        )));
    }
    let pi = node_projections(b, x_i, head);
    let pj = node_projections(b, x_j, head);
    Ok((pi.q_f, pj.k_f, pi.q_t, pj.k_t))
}

/// `(α_F, α_T)` from the four projections.
pub fn tsmp_coefficients(
    b: &mut Binder<'_>,
    f_i: Var,
    f_j: Var,
    t_i: Var,
    t_j: Var,
    head: &HeadParams,
) -> (Var, Var) {
    let (w_f, w_t) = (b.param(head.w_f), b.param(head.w_t));
    let (bands, steps) = b.tape.value(f_i).shape();
    let t = &mut b.tape;
    let fw = t.matmul(f_i, w_f);
    let fw = t.scale(fw, 1.0 / (steps as f64).sqrt());
    let tw = t.matmul(t_j, w_t);
    let tw = t.scale(tw, 1.0 / (bands as f64).sqrt());
    spectral_temporal_attention(b, fw, f_j, tw, t_i)
}

/// Softmaxes from pre-scaled left factors `F_i·W_F/√T` and `T_j·W_T/√F`.
fn spectral_temporal_attention(b: &mut Binder<'_>, fw_i: Var, f_j: Var, tw_j: Var, t_i: Var) -> (Var, Var) {
    let t = &mut b.tape;
    let logits_f = t.matmul_nt(fw_i, f_j);
    let alpha_f = t.softmax(logits_f, Axis::Rows, SoftmaxMask::None);
    // rows index the sender's time t', columns the receiver's time t
    let logits_t = t.matmul_nt(tw_j, t_i);
    let alpha_t = t.softmax(logits_t, Axis::Cols, SoftmaxMask::UpperIncl);
    (alpha_f, alpha_t)
}

/// Output of one mask-passing aggregation.
#[derive(Clone, Debug, Default)]
pub struct MaskPassingOutput {
    /// Per-node gate in (0, 1), `F×T`.
    pub gate: Vec<Var>,
    /// Fused pre-activation per node (before the logistic).
    pub pre_activation: Vec<Var>,
    /// `(head, sender, receiver, α_F, α_T)`; filled only when requested.
    pub coefficients: Vec<(usize, usize, usize, Var, Var)>,
}

/// Mask-passing over every node of `g`. Nodes with no in-neighbors get a
/// pre-activation equal to the fusion bias.
pub fn mask_passing_aggregate(
    b: &mut Binder<'_>,
    x: &[Var],
    g: &TactileGraph,
    p: &TsmpLayerParams,
    record_coefficients: bool,
) -> Result<MaskPassingOutput> {
    let n = g.node_count();
    if x.len() != n {
        return Err(Error::Shape(format!("{} node features for {n} graph nodes", x.len())));
    }
    for (i, &xi) in x.iter().enumerate() {
        if b.tape.value(xi).shape() != (p.bands, p.steps) {
            return Err(Error::Shape(format!(
                "node {i}: features {:?}, layer expects {}×{}",
                b.tape.value(xi).shape(),
                p.bands,
                p.steps
            )));
        }
    }
    let mut out = MaskPassingOutput::default();
    let fusion_w = b.param(p.fusion_w);
    let fusion_b = b.param(p.fusion_b);
    let inv_sqrt_t = 1.0 / (p.steps as f64).sqrt();
    let inv_sqrt_f = 1.0 / (p.bands as f64).sqrt();

    // head_maps[i][k]: summed contribution of i's neighbors for head k
    let mut head_maps: Vec<Vec<Option<Var>>> = vec![vec![None; p.head_count()]; n];
    for (k, head) in p.heads.iter().enumerate() {
        let w_f = b.param(head.w_f);
        let w_t = b.param(head.w_t);
        let w_v = b.param(head.w_v);
        let proj: Vec<NodeProjections> = x.iter().map(|&xn| node_projections(b, xn, head)).collect();
        let mut fw = Vec::with_capacity(n);
        let mut tw = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for (node, pr) in proj.iter().enumerate() {
            let t = &mut b.tape;
            let a = t.matmul(pr.q_f, w_f);
            fw.push(t.scale(a, inv_sqrt_t));
            let c = t.matmul(pr.k_t, w_t);
            tw.push(t.scale(c, inv_sqrt_f));
            values.push(t.mul(x[node], w_v));
        }
        for i in 0..n {
            for &j in g.in_neighbors(i) {
                let (alpha_f, alpha_t) = spectral_temporal_attention(b, fw[i], proj[j].k_f, tw[j], proj[i].q_t);
                let t = &mut b.tape;
                let left = t.matmul(alpha_f, values[j]);
                let contrib = t.matmul(left, alpha_t);
                head_maps[i][k] = Some(match head_maps[i][k] {
                    Some(acc) => t.add(acc, contrib),
                    None => contrib,
                });
                if record_coefficients {
                    out.coefficients.push((k, j, i, alpha_f, alpha_t));
                }
            }
        }
    }

    for maps in head_maps.iter() {
        let t = &mut b.tape;
        let pre = if maps.iter().all(Option::is_none) {
            let zero = t.constant(Mat::zeros(p.bands, p.steps));
            t.add_scalar(zero, fusion_b)
        } else {
            let mut acc: Option<Var> = None;
            for (k, m) in maps.iter().enumerate() {
                let m = m.expect("all heads see the same neighbors");
                let wk = t.element(fusion_w, 0, k);
                let term = t.scalar_mul(wk, m);
                acc = Some(match acc {
                    Some(a) => t.add(a, term),
                    None => term,
                });
            }
            t.add_scalar(acc.expect("at least one head"), fusion_b)
        };
        out.pre_activation.push(pre);
        out.gate.push(t.sigmoid(pre));
    }
    Ok(out)
}

/// `x'_i = x_i ⊙ gate_i`
pub fn apply_gate(b: &mut Binder<'_>, x: &[Var], out: &MaskPassingOutput) -> Vec<Var> {
    x.iter()
        .zip(&out.gate)
        .map(|(&xi, &gi)| b.tape.mul(xi, gi))
        .collect()
}

/// Global spatial attention weights of one decoder block.
#[derive(Clone, Debug)]
pub struct GsaParams {
    pub nodes: usize,
    pub channels: usize,
    pub steps: usize,
    pub v_s: ParamId,
    pub b_s: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub u1: ParamId,
    pub u2: ParamId,
    pub u3: ParamId,
}

impl GsaParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        nodes: usize,
        channels: usize,
        steps: usize,
        group: Group,
    ) -> Self {
        let bt = 1.0 / (steps as f64).sqrt();
        let bc = 1.0 / (channels as f64).sqrt();
        let mut add = |name: &str, shape, bound| {
            store.add_uniform(rng, format!("{prefix}.{name}"), shape, bound, group, Support::Full)
        };
        Self {
            nodes,
            channels,
            steps,
            v_s: add("v_s", (nodes, nodes), 0.0),
            b_s: add("b_s", (nodes, nodes), 0.0),
            w1: add("w1", (steps, 1), bt),
            w2: add("w2", (channels, steps), bc),
            w3: add("w3", (channels, 1), bc),
            u1: add("u1", (channels, 1), bc),
            u2: add("u2", (steps, channels), bt),
            u3: add("u3", (steps, 1), bt),
        }
    }
}

/// Row-stochastic `N×N` spatial attention from block input `x` (per node `C×T`).
///
/// ```text
/// S  = V_s · σ( (X·W1)·W2·(W3ᵀX)ᵀ + (Xᵀ·U1)·U2·(X·U3) + b_s )
/// S' = softmax_rows(S)
/// ```
/// where `X·W1` contracts time (→ N×C), `W3ᵀX` contracts channels (→ N×T),
/// `Xᵀ·U1` contracts channels (→ N×T) and `X·U3` contracts time (→ N×C).
pub fn global_spatial_attention(b: &mut Binder<'_>, x: &[Var], p: &GsaParams) -> Result<Var> {
    if x.len() != p.nodes {
        return Err(Error::Shape(format!("{} nodes, GSA expects {}", x.len(), p.nodes)));
    }
    for &xn in x {
        if b.tape.value(xn).shape() != (p.channels, p.steps) {
            return Err(Error::Shape(format!(
                "GSA input {:?}, expects {}×{}",
                b.tape.value(xn).shape(),
                p.channels,
                p.steps
            )));
        }
    }
    let ids = [p.v_s, p.b_s, p.w1, p.w2, p.w3, p.u1, p.u2, p.u3];
    let [v_s, b_s, w1, w2, w3, u1, u2, u3] = ids.map(|id| b.param(id));
    let t = &mut b.tape;
    let a: Vec<Var> = x.iter().map(|&xn| t.matmul(xn, w1)).collect(); // C×1
    let bb: Vec<Var> = x.iter().map(|&xn| t.matmul_tn(xn, w3)).collect(); // T×1
    let c: Vec<Var> = x.iter().map(|&xn| t.matmul_tn(xn, u1)).collect(); // T×1
    let d: Vec<Var> = x.iter().map(|&xn| t.matmul(xn, u3)).collect(); // C×1
    let a = t.concat_cols(&a); // C×N
    let bb = t.concat_cols(&bb); // T×N
    let c = t.concat_cols(&c); // T×N
    let d = t.concat_cols(&d); // C×N
    let left1 = t.matmul_tn(a, w2); // N×T
    let term1 = t.matmul(left1, bb); // N×N
    let left2 = t.matmul_tn(c, u2); // N×C
    let term2 = t.matmul(left2, d); // N×N
    let sum = t.add(term1, term2);
    let sum = t.add(sum, b_s);
    let act = t.sigmoid(sum);
    let s = t.matmul(v_s, act);
    Ok(t.softmax(s, Axis::Rows, SoftmaxMask::None))
}

/// Support masks used by the layer, exposed for invariant checks.
pub fn triangular_supports(steps: usize) -> (Arc<Mat>, Arc<Mat>) {
    (
        Support::Lower.mask(steps, steps).expect("lower"),
        Support::Upper.mask(steps, steps).expect("upper"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, logistic, Tape};
    use crate::graph::{build_graph, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(bands: usize, steps: usize, heads: usize, seed: u64) -> (ParamStore, TsmpLayerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TsmpLayerParams::init(&mut store, &mut rng, "l", bands, steps, heads, Group::Shared);
        (store, p)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_sender_gives_zero_projections() {
        let (store, p) = layer(4, 6, 1, 1);
        let mut b = Binder::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xi = b.tape.constant(rand_mat(&mut rng, 4, 6));
        let xj = b.tape.constant(Mat::zeros(4, 6));
        let (_, fj, _, tj) = spectral_temporal_projections(&mut b, xi, xj, &p.heads[0]).unwrap();
        assert_eq!(b.tape.value(fj).max_abs(), 0.0);
        assert_eq!(b.tape.value(tj).max_abs(), 0.0);
        let bad = b.tape.constant(Mat::zeros(3, 6));
        assert!(spectral_temporal_projections(&mut b, xi, bad, &p.heads[0]).is_err());
    }

    #[test]
    fn identity_key_weight_passes_sender_through() {
        let (mut store, p) = layer(4, 6, 1, 1);
        store.set(p.heads[0].w_kf, Mat::identity(6));
        let mut b = Binder::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xj_val = rand_mat(&mut rng, 4, 6);
        let xi = b.tape.constant(rand_mat(&mut rng, 4, 6));
        let xj = b.tape.constant(xj_val.clone());
        let (_, fj, _, _) = spectral_temporal_projections(&mut b, xi, xj, &p.heads[0]).unwrap();
        assert_eq!(b.tape.value(fj), &xj_val);
    }

    #[test]
    fn key_projection_is_causal() {
        let (store, p) = layer(4, 8, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = rand_mat(&mut rng, 4, 8);
        let mut perturbed = base.clone();
        for f in 0..4 {
            perturbed.set(f, 7, perturbed.get(f, 7) + 3.0);
        }
        let run = |xj: &Mat| {
            let mut b = Binder::new(&store);
            let xi = b.tape.constant(base.clone());
            let xj = b.tape.constant(xj.clone());
            let (_, fj, _, _) = spectral_temporal_projections(&mut b, xi, xj, &p.heads[0]).unwrap();
            b.tape.value(fj).clone()
        };
        let (a, c) = (run(&base), run(&perturbed));
        for f in 0..4 {
            for t in 0..7 {
                assert_eq!(a.get(f, t), c.get(f, t));
            }
        }
    }

    #[test]
    fn zero_logits_give_uniform_coefficients() {
        let (mut store, p) = layer(3, 5, 1, 6);
        store.set(p.heads[0].w_f, Mat::zeros(5, 5));
        store.set(p.heads[0].w_t, Mat::zeros(3, 3));
        let mut b = Binder::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xi = b.tape.constant(rand_mat(&mut rng, 3, 5));
        let xj = b.tape.constant(rand_mat(&mut rng, 3, 5));
        let (fi, fj, ti, tj) = spectral_temporal_projections(&mut b, xi, xj, &p.heads[0]).unwrap();
        let (af, at) = tsmp_coefficients(&mut b, fi, fj, ti, tj, &p.heads[0]);
        let af = b.tape.value(af);
        assert!(af.data.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let at = b.tape.value(at);
        for t in 0..5 {
            for s in 0..5 {
                let expect = if s <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                assert!((at.get(s, t) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scalar_shapes_give_unit_coefficients() {
        let (store, p) = layer(1, 1, 1, 8);
        let mut b = Binder::new(&store);
        let xi = b.tape.constant(Mat::scalar(0.7));
        let xj = b.tape.constant(Mat::scalar(-1.3));
        let (fi, fj, ti, tj) = spectral_temporal_projections(&mut b, xi, xj, &p.heads[0]).unwrap();
        let (af, at) = tsmp_coefficients(&mut b, fi, fj, ti, tj, &p.heads[0]);
        assert_eq!(b.tape.value(af).data, vec![1.0]);
        assert_eq!(b.tape.value(at).data, vec![1.0]);
    }

    #[test]
    fn two_step_temporal_softmax_by_hand() {
        // logits [[a, b], [c, d]] → column 0 = [1, 0], column 1 = softmax(b, d)
        let (a, bl, c, d) = (0.3, -0.4, 1.1, 0.9);
        let mut t = Tape::new();
        let l = t.constant(Mat::from_vec(2, 2, vec![a, bl, c, d]));
        let s = t.softmax(l, Axis::Cols, SoftmaxMask::UpperIncl);
        let v = t.value(s);
        let z = bl.exp() + d.exp();
        assert_eq!((v.get(0, 0), v.get(1, 0)), (1.0, 0.0));
        assert!((v.get(0, 1) - bl.exp() / z).abs() < 1e-15);
        assert!((v.get(1, 1) - d.exp() / z).abs() < 1e-15);
        let _ = c;
    }

    fn two_nodes() -> TactileGraph {
        TactileGraph::from_edges(vec![[0.0, 0.0], [1.0, 0.0]], &[(1, 0)]).unwrap()
    }

    #[test]
    fn scalar_mask_passing_by_hand() {
        let (mut store, p) = layer(1, 1, 1, 9);
        store.set(p.heads[0].w_v, Mat::scalar(3.0));
        store.set(p.fusion_w, Mat::scalar(1.0));
        store.set(p.fusion_b, Mat::scalar(0.0));
        let mut b = Binder::new(&store);
        let x = [b.tape.constant(Mat::scalar(0.5)), b.tape.constant(Mat::scalar(2.0))];
        let out = mask_passing_aggregate(&mut b, &x, &two_nodes(), &p, false).unwrap();
        assert!((b.tape.scalar_value(out.pre_activation[0]) - 6.0).abs() < 1e-15);
        assert!((b.tape.scalar_value(out.gate[0]) - logistic(6.0)).abs() < 1e-15);
        // node 1 has no in-neighbors: bias only
        assert_eq!(b.tape.scalar_value(out.gate[1]), 0.5);
    }

    #[test]
    fn zero_sender_gate_is_sigmoid_of_bias() {
        let (mut store, p) = layer(3, 4, 2, 10);
        store.set(p.fusion_b, Mat::scalar(0.0));
        let mut b = Binder::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = [b.tape.constant(rand_mat(&mut rng, 3, 4)), b.tape.constant(Mat::zeros(3, 4))];
        let out = mask_passing_aggregate(&mut b, &x, &two_nodes(), &p, false).unwrap();
        assert_eq!(b.tape.value(out.pre_activation[0]).max_abs(), 0.0);
        assert!(b.tape.value(out.gate[0]).data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_heads_with_averaging_fusion_match_single_head() {
        let (store1, p1) = layer(3, 4, 1, 12);
        let mut store2 = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p2 = TsmpLayerParams::init(&mut store2, &mut rng, "l", 3, 4, 2, Group::Shared);
        let src = &p1.heads[0];
        for h in &p2.heads {
            for (dst, s) in [
                (h.w_qf, src.w_qf),
                (h.w_kf, src.w_kf),
                (h.w_qt, src.w_qt),
                (h.w_kt, src.w_kt),
                (h.w_f, src.w_f),
                (h.w_t, src.w_t),
                (h.w_v, src.w_v),
            ] {
                store2.set(dst, store1.get(s).clone());
            }
        }
        let mut store1 = store1;
        store1.set(p1.fusion_w, Mat::scalar(1.0));
        store2.set(p2.fusion_w, Mat::from_vec(1, 2, vec![0.5, 0.5]));
        let g = build_graph(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]], Strategy::Full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 3, 4)).collect();
        let run = |store: &ParamStore, p: &TsmpLayerParams| {
            let mut b = Binder::new(store);
            let x: Vec<Var> = xs.iter().map(|m| b.tape.constant(m.clone())).collect();
            let out = mask_passing_aggregate(&mut b, &x, &g, p, false).unwrap();
            out.gate.iter().map(|&v| b.tape.value(v).clone()).collect::<Vec<_>>()
        };
        for (a, c) in run(&store1, &p1).iter().zip(run(&store2, &p2)) {
            assert!(a.zip_map(&c, |x, y| x - y).max_abs() < 1e-14);
        }
    }

    #[test]
    fn gate_shrinks_features() {
        let (store, p) = layer(4, 8, 2, 14);
        let g = build_graph(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]], Strategy::Full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut b = Binder::new(&store);
        let vals: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 4, 8)).collect();
        let x: Vec<Var> = vals.iter().map(|m| b.tape.constant(m.clone())).collect();
        let out = mask_passing_aggregate(&mut b, &x, &g, &p, false).unwrap();
        let y = apply_gate(&mut b, &x, &out);
        for (i, &yi) in y.iter().enumerate() {
            let yv = b.tape.value(yi);
            for e in 0..yv.len() {
                assert!(yv.data[e].abs() < vals[i].data[e].abs());
            }
        }
        let half = b.tape.constant(Mat::filled(4, 8, 0.5));
        let fake = MaskPassingOutput {
            gate: vec![half; 3],
            ..Default::default()
        };
        let y = apply_gate(&mut b, &x, &fake);
        assert_eq!(b.tape.value(y[0]), &vals[0].map(|v| v / 2.0));
    }

    fn gsa(nodes: usize, channels: usize, steps: usize, seed: u64) -> (ParamStore, GsaParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GsaParams::init(&mut store, &mut rng, "g", nodes, channels, steps, Group::Main);
        (store, p)
    }

    #[test]
    fn gsa_zero_init_is_uniform() {
        let (store, p) = gsa(4, 3, 5, 1);
        let mut b = Binder::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Var> = (0..4).map(|_| b.tape.constant(rand_mat(&mut rng, 3, 5))).collect();
        let s = global_spatial_attention(&mut b, &x, &p).unwrap();
        assert!(b.tape.value(s).data.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let (store1, p1) = gsa(1, 3, 5, 1);
        let mut b1 = Binder::new(&store1);
        let x1 = [b1.tape.constant(rand_mat(&mut rng, 3, 5))];
        let s1 = global_spatial_attention(&mut b1, &x1, &p1).unwrap();
        assert_eq!(b1.tape.value(s1).data, vec![1.0]);
        assert!(global_spatial_attention(&mut b, &x[..3], &p).is_err());
    }

    #[test]
    fn gsa_scalar_case_by_hand() {
        let (mut store, p) = gsa(2, 1, 1, 3);
        let vals = [
            (p.v_s, Mat::from_vec(2, 2, vec![1.0, -0.5, 0.25, 2.0])),
            (p.b_s, Mat::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.0])),
            (p.w1, Mat::scalar(0.5)),
            (p.w2, Mat::scalar(2.0)),
            (p.w3, Mat::scalar(-1.0)),
            (p.u1, Mat::scalar(1.5)),
            (p.u2, Mat::scalar(0.3)),
            (p.u3, Mat::scalar(0.7)),
        ];
        for (id, v) in vals.iter() {
            store.set(*id, v.clone());
        }
        let xs = [0.8, -1.2];
        let mut b = Binder::new(&store);
        let x: Vec<Var> = xs.iter().map(|&v| b.tape.constant(Mat::scalar(v))).collect();
        let s = global_spatial_attention(&mut b, &x, &p).unwrap();
        // scalar expansion: inner[n][m] = x_n·w1·w2·w3·x_m + x_n·u1·u2·u3·x_m + b_s[n][m]
        let k = 0.5 * 2.0 * -1.0 + 1.5 * 0.3 * 0.7;
        let bs = [[0.1, 0.2], [-0.3, 0.0]];
        let vs = [[1.0, -0.5], [0.25, 2.0]];
        let sig = |n: usize, m: usize| logistic(k * xs[n] * xs[m] + bs[n][m]);
        let raw: Vec<Vec<f64>> = (0..2)
            .map(|n| (0..2).map(|m| vs[n][0] * sig(0, m) + vs[n][1] * sig(1, m)).collect())
            .collect();
        let sv = b.tape.value(s);
        for n in 0..2 {
            let z: f64 = raw[n].iter().map(|v| v.exp()).sum();
            for m in 0..2 {
                assert!((sv.get(n, m) - raw[n][m].exp() / z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn operations_match_finite_differences() {
        // N=3, F=4, T=8, K=2; gradient w.r.t. every parameter and input.
        let (store, p) = layer(4, 8, 2, 21);
        let g = build_graph(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]], Strategy::Full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let xs: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 4, 8)).collect();
        let weights: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 4, 8)).collect();
        let mut inputs: Vec<Mat> = store.entries().iter().map(|e| e.value.clone()).collect();
        let np = inputs.len();
        inputs.extend(xs.iter().cloned());

        let build = |t: &mut Tape, leaves: &[Var], which: usize| -> Var {
            let mut b = Binder::new(&store);
            std::mem::swap(&mut b.tape, t);
            let xv: Vec<Var> = leaves[np..].to_vec();
            let pv: Vec<Var> = leaves[..np].to_vec();
            b.bind_external(&pv);
            let root = match which {
                0 => {
                    let (fi, fj, ti, tj) = spectral_temporal_projections(&mut b, xv[0], xv[1], &p.heads[1]).unwrap();
                    let parts = [fi, fj, ti, tj];
                    let mut acc = None;
                    for (k, v) in parts.iter().enumerate() {
                        let w = Arc::new(rand_like(b.tape.value(*v), k as u64));
                        let m = b.tape.mul_const(*v, w);
                        let s = b.tape.sum(m);
                        acc = Some(match acc { Some(a) => b.tape.add(a, s), None => s });
                    }
                    acc.unwrap()
                }
                1 => {
                    let (fi, fj, ti, tj) = spectral_temporal_projections(&mut b, xv[2], xv[0], &p.heads[0]).unwrap();
                    let (af, at) = tsmp_coefficients(&mut b, fi, fj, ti, tj, &p.heads[0]);
                    let w1 = Arc::new(rand_like(b.tape.value(af), 5));
                    let w2 = Arc::new(rand_like(b.tape.value(at), 6));
                    let m1 = b.tape.mul_const(af, w1);
                    let m2 = b.tape.mul_const(at, w2);
                    let s1 = b.tape.sum(m1);
                    let s2 = b.tape.sum(m2);
                    b.tape.add(s1, s2)
                }
                _ => {
                    let out = mask_passing_aggregate(&mut b, &xv, &g, &p, false).unwrap();
                    let y = if which == 2 { out.gate.clone() } else { apply_gate(&mut b, &xv, &out) };
                    let mut acc = None;
                    for (i, v) in y.iter().enumerate() {
                        let m = b.tape.mul_const(*v, Arc::new(weights[i].clone()));
                        let s = b.tape.sum(m);
                        acc = Some(match acc { Some(a) => b.tape.add(a, s), None => s });
                    }
                    acc.unwrap()
                }
            };
            std::mem::swap(&mut b.tape, t);
            root
        };
        for which in 0..4 {
            let err = gradient_check(&inputs, 1e-6, |t, leaves| build(t, leaves, which));
            assert!(err < 1e-4, "op {which}: rel err {err:e}");
        }
    }

    #[test]
    fn gsa_matches_finite_differences() {
        let (mut store, p) = gsa(3, 4, 8, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        store.set(p.v_s, rand_mat(&mut rng, 3, 3));
        store.set(p.b_s, rand_mat(&mut rng, 3, 3));
        let mut inputs: Vec<Mat> = store.entries().iter().map(|e| e.value.clone()).collect();
        let np = inputs.len();
        inputs.extend((0..3).map(|_| rand_mat(&mut rng, 4, 8)));
        let err = gradient_check(&inputs, 1e-6, |t, leaves| {
            let mut b = Binder::new(&store);
            std::mem::swap(&mut b.tape, t);
            b.bind_external(&leaves[..np]);
            let s = global_spatial_attention(&mut b, &leaves[np..], &p).unwrap();
            let w = Arc::new(rand_like(b.tape.value(s), 3));
            let m = b.tape.mul_const(s, w);
            let root = b.tape.sum(m);
            std::mem::swap(&mut b.tape, t);
            root
        });
        assert!(err < 1e-4, "{err:e}");
    }

    fn rand_like(m: &Mat, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        Mat::from_fn(m.rows, m.cols, |_, _| rng.gen_range(-1.0..1.0))
    }
}
