//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Tape::backward`] walks the tape in reverse and returns
//! the gradient of a scalar root with respect to every node that requires one.
//! Nodes created from constants never receive gradients and cut the sweep.

use std::sync::Arc;

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries take part in a softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxMask {
    None,
    /// Entry `(r, c)` is kept iff `r <= c`.
    UpperIncl,
    /// Entry `(r, c)` is kept iff `c <= r`.
    LowerIncl,
}

impl SoftmaxMask {
    #[inline]
    fn allows(self, r: usize, c: usize) -> bool {
        match self {
            SoftmaxMask::None => true,
            SoftmaxMask::UpperIncl => r <= c,
            SoftmaxMask::LowerIncl => c <= r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalize along each row.
    Rows,
    /// Normalize along each column.
    Cols,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Arc<Mat>),
    ScalarMul(Var, Var),
    AddScalar(Var, Var),
    AddRowBcast(Var, Var),
    AddColBcast(Var, Var),
    MulRowBcast(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Abs(Var),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var, Axis),
    Sum(Var),
    RowMeans(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Element(Var, usize, usize),
    SelectRow(Var, usize),
    CausalConv {
        x: Var,
        w: Var,
        kernel: usize,
        dilation: usize,
    },
    DepthwiseCausalConv {
        x: Var,
        w: Var,
        dilation: usize,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf (a parameter or a probed input).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_tn(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulTn(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Element-wise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Element-wise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, k: Arc<Mat>) -> Var {
        let v = self.value(a).zip_map(&k, |x, y| x * y);
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, k), ng)
    }

    /// `s · a` with `s` a `1×1` node.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.value(a).map(|x| sv * x);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::ScalarMul(s, a), ng)
    }

    /// `a + s` with `s` a `1×1` node broadcast to every entry.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.value(a).map(|x| x + sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::AddScalar(a, s), ng)
    }

    /// `a[r, c] + b[0, c]`
    pub fn add_row_bcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((1, av.cols), bv.shape(), "row broadcast shape mismatch");
        let v = Mat::from_fn(av.rows, av.cols, |r, c| av.get(r, c) + bv.data[c]);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRowBcast(a, b), ng)
    }

    /// `a[r, c] + b[r, 0]`
    pub fn add_col_bcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, 1), bv.shape(), "column broadcast shape mismatch");
        let v = Mat::from_fn(av.rows, av.cols, |r, c| av.get(r, c) + bv.data[r]);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddColBcast(a, b), ng)
    }

    /// `a[r, c] · b[0, c]`
    pub fn mul_row_bcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((1, av.cols), bv.shape(), "row broadcast shape mismatch");
        let v = Mat::from_fn(av.rows, av.cols, |r, c| av.get(r, c) * bv.data[c]);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MulRowBcast(a, b), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(logistic);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Log(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        let ng = self.ng(a);
        self.push(v, Op::PowConst(a, p), ng)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// Softmax along `axis`; masked-out entries are exactly zero.
    pub fn softmax(&mut self, a: Var, axis: Axis, mask: SoftmaxMask) -> Var {
        let v = softmax_value(self.value(a), axis, mask);
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a, axis), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over columns: `m×n → m×1`.
    pub fn row_means(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols as f64;
        let v = Mat::from_fn(av.rows, 1, |r, _| av.row(r).iter().sum::<f64>() / n);
        let ng = self.ng(a);
        self.push(v, Op::RowMeans(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Mat::scalar(self.value(a).get(r, c));
        let ng = self.ng(a);
        self.push(v, Op::Element(a, r, c), ng)
    }

    pub fn select_row(&mut self, a: Var, r: usize) -> Var {
        let av = self.value(a);
        let v = Mat::from_vec(1, av.cols, av.row(r).to_vec());
        let ng = self.ng(a);
        self.push(v, Op::SelectRow(a, r), ng)
    }

    /// Causal dilated 1-D convolution over the column (time) axis.
    ///
    /// `x` is `C_in×T`, `w` is `C_out×(C_in·kernel)` with tap `m` of input
    /// channel `c` at column `c·kernel + m`. Output column `t` reads input
    /// columns `t − m·dilation` for `m < kernel`; anything before column 0 is
    /// zero padding.
    pub fn causal_conv(&mut self, x: Var, w: Var, kernel: usize, dilation: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.cols, xv.rows * kernel, "conv weight shape mismatch");
        let (cin, t_len, cout) = (xv.rows, xv.cols, wv.rows);
        let mut out = Mat::zeros(cout, t_len);
        for o in 0..cout {
            let orow = &mut out.data[o * t_len..(o + 1) * t_len];
            for c in 0..cin {
                let xrow = xv.row(c);
                for m in 0..kernel {
                    let wt = wv.data[o * wv.cols + c * kernel + m];
                    if wt == 0.0 {
                        continue;
                    }
                    let shift = m * dilation;
                    for t in shift..t_len {
                        orow[t] += wt * xrow[t - shift];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(
            out,
            Op::CausalConv {
                x,
                w,
                kernel,
                dilation,
            },
            ng,
        )
    }

    /// Per-channel causal convolution: `x` is `C×T`, `w` is `C×k`.
    pub fn depthwise_causal_conv(&mut self, x: Var, w: Var, dilation: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.rows, xv.rows, "depthwise weight shape mismatch");
        let (ch, t_len, k) = (xv.rows, xv.cols, wv.cols);
        let mut out = Mat::zeros(ch, t_len);
        for c in 0..ch {
            let xrow = xv.row(c);
            for m in 0..k {
                let wt = wv.get(c, m);
                let shift = m * dilation;
                for t in shift..t_len {
                    out.data[c * t_len + t] += wt * xrow[t - shift];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::DepthwiseCausalConv { x, w, dilation }, ng)
    }

    /// Gradient of the `1×1` node `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, grad: Mat| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], grad);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.matmul_nt(val(*b)));
                }
                if self.ng(*b) {
                    send(*b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    send(*a, g.matmul(val(*b)));
                }
                if self.ng(*b) {
                    send(*b, g.matmul_tn(val(*a)));
                }
            }
            Op::MatMulTn(a, b) => {
                if self.ng(*a) {
                    send(*a, val(*b).matmul_nt(g));
                }
                if self.ng(*b) {
                    send(*b, val(*a).matmul(g));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.ng(*a) {
                    send(*a, g.zip_map(bv, |x, y| x / y));
                }
                if self.ng(*b) {
                    let av = val(*a);
                    let gb = Mat::from_fn(g.rows, g.cols, |r, c| {
                        -g.get(r, c) * av.get(r, c) / (bv.get(r, c) * bv.get(r, c))
                    });
                    send(*b, gb);
                }
            }
            Op::Affine(a, s) => send(*a, g.map(|x| x * s)),
            Op::MulConst(a, k) => send(*a, g.zip_map(k, |x, y| x * y)),
            Op::ScalarMul(s, a) => {
                let sv = val(*s).data[0];
                if self.ng(*a) {
                    send(*a, g.map(|x| x * sv));
                }
                if self.ng(*s) {
                    let d: f64 = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).sum();
                    send(*s, Mat::scalar(d));
                }
            }
            Op::AddScalar(a, s) => {
                send(*a, g.clone());
                send(*s, Mat::scalar(g.sum()));
            }
            Op::AddRowBcast(a, b) => {
                send(*a, g.clone());
                if self.ng(*b) {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.get(r, c);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::AddColBcast(a, b) => {
                send(*a, g.clone());
                if self.ng(*b) {
                    let gb = Mat::from_fn(g.rows, 1, |r, _| g.row(r).iter().sum());
                    send(*b, gb);
                }
            }
            Op::MulRowBcast(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.ng(*a) {
                    send(*a, Mat::from_fn(g.rows, g.cols, |r, c| g.get(r, c) * bv.data[c]));
                }
                if self.ng(*b) {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.get(r, c) * av.get(r, c);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                send(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { s * x }))
            }
            Op::Log(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Abs(a) => send(
                *a,
                g.zip_map(val(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            Op::PowConst(a, p) => {
                let p = *p;
                send(*a, g.zip_map(val(*a), |x, y| x * p * y.powf(p - 1.0)))
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *a,
                    g.zip_map(val(*a), |x, y| if y > lo && y < hi { x } else { 0.0 }),
                )
            }
            Op::Softmax(a, axis) => send(*a, softmax_backward(&node.value, g, *axis)),
            Op::Sum(a) => {
                let av = val(*a);
                send(*a, Mat::filled(av.rows, av.cols, g.data[0]));
            }
            Op::RowMeans(a) => {
                let av = val(*a);
                let n = av.cols as f64;
                send(*a, Mat::from_fn(av.rows, av.cols, |r, _| g.data[r] / n));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.len();
                    if self.ng(p) {
                        let slice = g.data[off..off + len].to_vec();
                        send(p, Mat::from_vec(pv.rows, pv.cols, slice));
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    if self.ng(p) {
                        let gp = Mat::from_fn(pv.rows, pv.cols, |r, c| g.get(r, off + c));
                        send(p, gp);
                    }
                    off += pv.cols;
                }
            }
            Op::Element(a, r, c) => {
                let av = val(*a);
                let mut ga = Mat::zeros(av.rows, av.cols);
                ga.set(*r, *c, g.data[0]);
                send(*a, ga);
            }
            Op::SelectRow(a, r) => {
                let av = val(*a);
                let mut ga = Mat::zeros(av.rows, av.cols);
                ga.data[r * av.cols..(r + 1) * av.cols].copy_from_slice(&g.data);
                send(*a, ga);
            }
            Op::CausalConv {
                x,
                w,
                kernel,
                dilation,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, t_len, cout) = (xv.rows, xv.cols, wv.rows);
                let (k, d) = (*kernel, *dilation);
                if self.ng(*x) {
                    let mut gx = Mat::zeros(cin, t_len);
                    for o in 0..cout {
                        let grow = g.row(o);
                        for c in 0..cin {
                            for m in 0..k {
                                let wt = wv.data[o * wv.cols + c * k + m];
                                let shift = m * d;
                                for t in shift..t_len {
                                    gx.data[c * t_len + t - shift] += wt * grow[t];
                                }
                            }
                        }
                    }
                    send(*x, gx);
                }
                if self.ng(*w) {
                    let mut gw = Mat::zeros(wv.rows, wv.cols);
                    for o in 0..cout {
                        let grow = g.row(o);
                        for c in 0..cin {
                            let xrow = xv.row(c);
                            for m in 0..k {
                                let shift = m * d;
                                let mut acc = 0.0;
                                for t in shift..t_len {
                                    acc += grow[t] * xrow[t - shift];
                                }
                                gw.data[o * wv.cols + c * k + m] = acc;
                            }
                        }
                    }
                    send(*w, gw);
                }
            }
            Op::DepthwiseCausalConv { x, w, dilation } => {
                let (xv, wv) = (val(*x), val(*w));
                let (ch, t_len, k) = (xv.rows, xv.cols, wv.cols);
                let d = *dilation;
                if self.ng(*x) {
                    let mut gx = Mat::zeros(ch, t_len);
                    for c in 0..ch {
                        for m in 0..k {
                            let wt = wv.get(c, m);
                            let shift = m * d;
                            for t in shift..t_len {
                                gx.data[c * t_len + t - shift] += wt * g.get(c, t);
                            }
                        }
                    }
                    send(*x, gx);
                }
                if self.ng(*w) {
                    let mut gw = Mat::zeros(ch, k);
                    for c in 0..ch {
                        for m in 0..k {
                            let shift = m * d;
                            let mut acc = 0.0;
                            for t in shift..t_len {
                                acc += g.get(c, t) * xv.get(c, t - shift);
                            }
                            gw.set(c, m, acc);
                        }
                    }
                    send(*w, gw);
                }
            }
        }
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_value(a: &Mat, axis: Axis, mask: SoftmaxMask) -> Mat {
    let mut out = Mat::zeros(a.rows, a.cols);
    let (outer, inner) = match axis {
        Axis::Rows => (a.rows, a.cols),
        Axis::Cols => (a.cols, a.rows),
    };
    let coord = |o: usize, i: usize| match axis {
        Axis::Rows => (o, i),
        Axis::Cols => (i, o),
    };
    for o in 0..outer {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..inner {
            let (r, c) = coord(o, i);
            if mask.allows(r, c) {
                mx = mx.max(a.get(r, c));
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for i in 0..inner {
            let (r, c) = coord(o, i);
            if mask.allows(r, c) {
                let e = (a.get(r, c) - mx).exp();
                out.set(r, c, e);
                z += e;
            }
        }
        for i in 0..inner {
            let (r, c) = coord(o, i);
            if mask.allows(r, c) {
                out.set(r, c, out.get(r, c) / z);
            }
        }
    }
    out
}

fn softmax_backward(y: &Mat, g: &Mat, axis: Axis) -> Mat {
    let mut out = Mat::zeros(y.rows, y.cols);
    match axis {
        Axis::Rows => {
            for r in 0..y.rows {
                let dot: f64 = (0..y.cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
                for c in 0..y.cols {
                    out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                }
            }
        }
        Axis::Cols => {
            for c in 0..y.cols {
                let dot: f64 = (0..y.rows).map(|r| g.get(r, c) * y.get(r, c)).sum();
                for r in 0..y.rows {
                    out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                }
            }
        }
    }
    out
}

/// Central finite-difference check of a scalar function of several matrix
/// inputs. `f` rebuilds the computation on a fresh tape from the given leaf
/// values and returns the tape and root. Returns the worst relative error
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)` over all entries.
pub fn gradient_check<F>(inputs: &[Mat], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |vals: &[Mat]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = f(&mut tape, &leaves);
        (tape, leaves, root)
    };
    let (tape, leaves, root) = run(inputs);
    let grads = tape.backward(root);
    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(inputs[k].rows, inputs[k].cols));
        for e in 0..inputs[k].len() {
            let orig = probe[k].data[e];
            probe[k].data[e] = orig + step;
            let (tp, _, rp) = run(&probe);
            let fp = tp.scalar_value(rp);
            probe[k].data[e] = orig - step;
            let (tm, _, rm) = run(&probe);
            let fm = tm.scalar_value(rm);
            probe[k].data[e] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data[e];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}
