//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in evaluation order. Parameters are
//! borrowed from their owning store for the lifetime of the graph, so
//! building a forward pass never copies weights. [`Graph::backward`] walks
//! the tape once in reverse and returns a gradient for every node that
//! depends on a trainable leaf.
//!
//! Several operations are fused (attention, normalizations, rotary
//! embedding) with hand-written adjoints; each one is covered by a finite
//! difference test at the bottom of this file.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source row for [`Graph::gather`]; `RowRef::ZERO` produces a zero row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowRef {
    pub input: u32,
    pub row: u32,
}

impl RowRef {
    pub const ZERO: RowRef = RowRef { input: u32::MAX, row: 0 };

    pub fn new(input: usize, row: usize) -> Self {
        Self { input: input as u32, row: row as u32 }
    }

    fn is_zero(self) -> bool {
        self.input == u32::MAX
    }
}

/// Precomputed rotary angles for every row of a `rows × heads·head_dim`
/// operand. Only the first `rotate_dims` of each head are rotated.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub heads: usize,
    pub head_dim: usize,
    pub rotate_dims: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(positions: &[usize], heads: usize, head_dim: usize, rotate_dims: usize, base: f64) -> Self {
        assert!(rotate_dims % 2 == 0 && rotate_dims <= head_dim, "rotate_dims must be even and ≤ head_dim");
        let half = rotate_dims / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = num_traits::Float::powf(base, -((2 * i) as f64) / rotate_dims as f64);
                let angle = p as f64 * freq;
                cos.push(T::of(num_traits::Float::cos(angle)));
                sin.push(T::of(num_traits::Float::sin(angle)));
            }
        }
        Self { heads, head_dim, rotate_dims, cos, sin }
    }

    pub fn rows(&self) -> usize {
        if self.rotate_dims == 0 {
            usize::MAX
        } else {
            self.cos.len() / (self.rotate_dims / 2)
        }
    }
}

/// Shape bookkeeping for the fused multi-head attention.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub head_dim: usize,
    pub v_dim: usize,
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Silu,
    Sigmoid,
    Softplus,
    LeakyRelu(T),
    Square,
    Sqrt,
    Exp,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary<T>),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { inputs: Vec<Var>, index: Rc<Vec<RowRef>> },
    RmsNorm { x: Var, gamma: Var, seg: usize, inv: Vec<T> },
    Rope { x: Var, table: Rc<RopeTable<T>> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, scale: T, probs: Vec<T> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, len: usize, valid: Rc<Vec<usize>>, mean: Vec<T>, rstd: Vec<T> },
    Im2Col3 { x: Var, len: usize },
    SegmentTMatMul { x: Var, w: Rc<Tensor<T>>, segments: usize },
    WeightedSum { x: Var, w: Rc<Vec<T>> },
    RowSum(Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Geodesic { a: Var, b: Var },
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. `'p` is the lifetime of borrowed parameter tensors.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients returned by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(rows, cols));
    }
    slot.as_mut().unwrap()
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    #[inline]
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A borrowed leaf; gradients are tracked iff `trainable`.
    pub fn leaf(&mut self, t: &'p Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(t), op: Op::Leaf, needs_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    /// An owned leaf that receives gradients (used for input sensitivities).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Value of `v` copied into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (Tensor<T>, bool) {
        let out = self.value(a).zip_map(self.value(b), f);
        (out, self.needs_grad(a) || self.needs_grad(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (out, ng) = self.binary(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (out, ng) = self.binary(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (out, ng) = self.binary(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (out, ng) = self.binary(a, b, |x, y| x / y);
        self.push(out, Op::Div(a, b), ng)
    }

    /// `a[m×n] + b[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "add_row operand shape");
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for r in 0..m {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bv) {
                *o += x;
            }
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    /// `a[m×n] ⊙ b[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "mul_row operand shape");
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for r in 0..m {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bv) {
                *o *= x;
            }
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, Op::MulRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs_grad(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.needs_grad(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, u: Unary<T>) -> Var {
        let out = self.value(a).map(|x| match u {
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::LeakyRelu(s) => {
                if x >= T::zero() {
                    x
                } else {
                    s * x
                }
            }
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
        });
        let ng = self.needs_grad(a);
        self.push(out, Op::Unary(a, u), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.needs_grad(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(src.rows(), len, |i, j| src.get(i, start + j));
        let ng = self.needs_grad(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Assemble rows from several inputs of equal width.
    pub fn gather(&mut self, inputs: &[Var], index: Rc<Vec<RowRef>>) -> Var {
        let cols = self.shape(inputs[0]).1;
        for &i in inputs {
            assert_eq!(self.shape(i).1, cols, "gather width mismatch");
        }
        let mut out = Tensor::zeros(index.len(), cols);
        for (r, rr) in index.iter().enumerate() {
            if !rr.is_zero() {
                let src = self.value(inputs[rr.input as usize]);
                out.row_mut(r).copy_from_slice(src.row(rr.row as usize));
            }
        }
        let ng = inputs.iter().any(|&p| self.needs_grad(p));
        self.push(out, Op::Gather { inputs: inputs.to_vec(), index }, ng)
    }

    /// RMS normalization over contiguous segments of `seg` columns, scaled by
    /// `gamma[1×seg]`. `seg == cols` is the usual per-row RMSNorm; smaller
    /// segments give per-head normalization.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, seg: usize, eps: T) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        assert!(n % seg == 0, "rms_norm segment must divide width");
        assert_eq!(self.shape(gamma), (1, seg), "rms_norm gamma shape");
        let g = self.value(gamma).data();
        let segs = m * n / seg;
        let mut inv = Vec::with_capacity(segs);
        let mut out = Tensor::zeros(m, n);
        let segf = T::of(seg as f64);
        for s in 0..segs {
            let xs = &xv.data()[s * seg..(s + 1) * seg];
            let ms = xs.iter().fold(T::zero(), |a, &v| a + v * v) / segf;
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            let os = &mut out.data_mut()[s * seg..(s + 1) * seg];
            for j in 0..seg {
                os[j] = xs[j] * r * g[j];
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(gamma);
        self.push(out, Op::RmsNorm { x, gamma, seg, inv }, ng)
    }

    pub fn rope(&mut self, x: Var, table: Rc<RopeTable<T>>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.cols(), table.heads * table.head_dim, "rope width");
        assert!(table.rotate_dims == 0 || table.rows() == out.rows(), "rope table rows");
        rope_apply(&mut out, &table, false);
        let ng = self.needs_grad(x);
        self.push(out, Op::Rope { x, table }, ng)
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch·q_len) × (heads·head_dim)`, `k` likewise with `k_len`,
    /// `v` is `(batch·k_len) × (heads·v_dim)`. `key_valid`, when given, has
    /// one flag per key row; invalid keys get zero weight and a query with no
    /// valid key produces a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape, key_valid: Option<&[bool]>) -> Var {
        let AttnShape { batch, heads, q_len, k_len, head_dim, v_dim } = shape;
        assert_eq!(self.shape(q), (batch * q_len, heads * head_dim), "attention q shape");
        assert_eq!(self.shape(k), (batch * k_len, heads * head_dim), "attention k shape");
        assert_eq!(self.shape(v), (batch * k_len, heads * v_dim), "attention v shape");
        if let Some(m) = key_valid {
            assert_eq!(m.len(), batch * k_len, "attention mask length");
        }
        let scale = T::one() / T::of(head_dim as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = Tensor::zeros(batch * q_len, heads * v_dim);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let qw = heads * head_dim;
        let vw = heads * v_dim;
        for b in 0..batch {
            let valid = key_valid.map(|m| &m[b * k_len..(b + 1) * k_len]);
            for h in 0..heads {
                let pi = (b * heads + h) * q_len * k_len;
                let p = &mut probs[pi..pi + q_len * k_len];
                let qv = MatRef { offset: b * q_len * qw + h * head_dim, rows: q_len, cols: head_dim, row_stride: qw, col_stride: 1 };
                let kv = MatRef { offset: b * k_len * qw + h * head_dim, rows: k_len, cols: head_dim, row_stride: qw, col_stride: 1 };
                gemm(scale, qd, qv, kd, kv.t(), T::zero(), p, MatRef::dense(q_len, k_len));
                for i in 0..q_len {
                    let row = &mut p[i * k_len..(i + 1) * k_len];
                    masked_softmax(row, valid);
                }
                let vv = MatRef { offset: b * k_len * vw + h * v_dim, rows: k_len, cols: v_dim, row_stride: vw, col_stride: 1 };
                let ov = MatRef { offset: b * q_len * vw + h * v_dim, rows: q_len, cols: v_dim, row_stride: vw, col_stride: 1 };
                gemm(T::one(), p, MatRef::dense(q_len, k_len), vd, vv, T::zero(), out.data_mut(), ov);
            }
        }
        let ng = self.needs_grad(q) || self.needs_grad(k) || self.needs_grad(v);
        self.push(out, Op::Attention { q, k, v, shape, scale, probs }, ng)
    }

    /// Group normalization over `(len rows × channels/groups)` blocks of each
    /// item, with statistics taken over the first `valid[item]` rows only.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, len: usize, valid: Rc<Vec<usize>>, eps: T) -> Var {
        let xv = self.value(x);
        let (m, ch) = xv.shape();
        assert!(ch % groups == 0, "group_norm channels must divide into groups");
        assert_eq!(m, valid.len() * len, "group_norm rows");
        let gs = ch / groups;
        let items = valid.len();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut mean = vec![T::zero(); items * groups];
        let mut rstd = vec![T::one(); items * groups];
        let mut out = Tensor::zeros(m, ch);
        for b in 0..items {
            let nv = valid[b].min(len);
            for g in 0..groups {
                let idx = b * groups + g;
                if nv > 0 {
                    let cnt = T::of((nv * gs) as f64);
                    let mut s = T::zero();
                    for t in 0..nv {
                        let row = xv.row(b * len + t);
                        for c in g * gs..(g + 1) * gs {
                            s += row[c];
                        }
                    }
                    let mu = s / cnt;
                    let mut ss = T::zero();
                    for t in 0..nv {
                        let row = xv.row(b * len + t);
                        for c in g * gs..(g + 1) * gs {
                            let d = row[c] - mu;
                            ss += d * d;
                        }
                    }
                    mean[idx] = mu;
                    rstd[idx] = T::one() / (ss / cnt + eps).sqrt();
                }
                for t in 0..len {
                    let r = b * len + t;
                    for c in g * gs..(g + 1) * gs {
                        let xh = (xv.get(r, c) - mean[idx]) * rstd[idx];
                        out.set(r, c, xh * gam[c] + bet[c]);
                    }
                }
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, len, valid, mean, rstd }, ng)
    }

    /// Kernel-3 im2col with zero padding at item boundaries: row `(b, t)`
    /// becomes `[x(b,t−1) | x(b,t) | x(b,t+1)]`.
    pub fn im2col3(&mut self, x: Var, len: usize) -> Var {
        let xv = self.value(x);
        let (m, c) = xv.shape();
        assert!(len > 0 && m % len == 0, "im2col3 rows must be a multiple of len");
        let mut out = Tensor::zeros(m, 3 * c);
        for r in 0..m {
            let t = r % len;
            let dst = out.row_mut(r);
            if t > 0 {
                dst[..c].copy_from_slice(xv.row(r - 1));
            }
            dst[c..2 * c].copy_from_slice(xv.row(r));
            if t + 1 < len {
                dst[2 * c..].copy_from_slice(xv.row(r + 1));
            }
        }
        let ng = self.needs_grad(x);
        self.push(out, Op::Im2Col3 { x, len }, ng)
    }

    /// Per-segment `X_sᵀ · W_s` for `x[(S·len)×K]` and a constant
    /// `w[(S·len)×Q]`; result is `(S·K) × Q`.
    pub fn segment_tmatmul(&mut self, x: Var, w: Rc<Tensor<T>>, segments: usize) -> Var {
        let xv = self.value(x);
        let (m, k) = xv.shape();
        assert_eq!(w.rows(), m, "segment_tmatmul rows");
        assert!(segments > 0 && m % segments == 0, "segment_tmatmul segments");
        let len = m / segments;
        let q = w.cols();
        let mut out = Tensor::zeros(segments * k, q);
        for s in 0..segments {
            let xs = MatRef { offset: s * len * k, rows: len, cols: k, row_stride: k, col_stride: 1 };
            let ws = MatRef { offset: s * len * q, rows: len, cols: q, row_stride: q, col_stride: 1 };
            let os = MatRef { offset: s * k * q, rows: k, cols: q, row_stride: q, col_stride: 1 };
            gemm(T::one(), xv.data(), xs.t(), w.data(), ws, T::zero(), out.data_mut(), os);
        }
        let ng = self.needs_grad(x);
        self.push(out, Op::SegmentTMatMul { x, w, segments }, ng)
    }

    /// `Σ w_i x_i` as a 1×1 tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Rc<Vec<T>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), w.len(), "weighted_sum length");
        let s = xv.data().iter().zip(w.iter()).fold(T::zero(), |a, (&x, &w)| a + x * w);
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let w = Rc::new(vec![T::one() / T::of(n as f64); n]);
        self.weighted_sum(x, w)
    }

    /// Sum over columns: `m×n → m×1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.rows(), 1, |i, _| xv.row(i).iter().fold(T::zero(), |a, &b| a + b));
        let ng = self.needs_grad(x);
        self.push(out, Op::RowSum(x), ng)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let floor = T::of(1e-12);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(floor);
            norms.push(n);
            for o in out.row_mut(r) {
                *o = *o / n;
            }
        }
        let ng = self.needs_grad(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Row-wise squared geodesic distance `2·asin²(‖a−b‖/2)` between unit
    /// vectors; `m×n, m×n → m×1`.
    pub fn geodesic(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "geodesic shape");
        let out = Tensor::from_fn(av.rows(), 1, |i, _| {
            let u = row_dist(av.row(i), bv.row(i));
            let s = (u * T::of(0.5)).min(T::one());
            let th = s.asin();
            T::of(2.0) * th * th
        });
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, Op::Geodesic { a, b }, ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = self.value(Var(i));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.needs_grad(*a) {
                    let ga = grad_buf(grads, *a, m, k);
                    gemm(T::one(), g.data(), MatRef::dense(m, n), bv.data(), MatRef::dense(k, n).t(), T::one(), ga.data_mut(), MatRef::dense(m, k));
                }
                if self.needs_grad(*b) {
                    let gb = grad_buf(grads, *b, k, n);
                    gemm(T::one(), av.data(), MatRef::dense(m, k).t(), g.data(), MatRef::dense(m, n), T::one(), gb.data_mut(), MatRef::dense(k, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                let (m, n) = g.shape();
                if self.needs_grad(*a) {
                    grad_buf(grads, *a, m, n).add_assign(g);
                }
                if self.needs_grad(*b) {
                    let gb = grad_buf(grads, *b, m, n);
                    for (d, &s) in gb.data_mut().iter_mut().zip(g.data()) {
                        if neg {
                            *d -= s;
                        } else {
                            *d += s;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (m, n) = g.shape();
                if self.needs_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = grad_buf(grads, *a, m, n);
                    for ((d, &s), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += s * y;
                    }
                }
                if self.needs_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = grad_buf(grads, *b, m, n);
                    for ((d, &s), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (m, n) = g.shape();
                let bv = self.value(*b).data();
                if self.needs_grad(*a) {
                    let ga = grad_buf(grads, *a, m, n);
                    for ((d, &s), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += s / y;
                    }
                }
                if self.needs_grad(*b) {
                    let ov = out.data();
                    let gb = grad_buf(grads, *b, m, n);
                    for (((d, &s), &y), &o) in gb.data_mut().iter_mut().zip(g.data()).zip(bv).zip(ov) {
                        *d -= s * o / y;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let (m, n) = g.shape();
                if self.needs_grad(*a) {
                    grad_buf(grads, *a, m, n).add_assign(g);
                }
                if self.needs_grad(*b) {
                    let gb = grad_buf(grads, *b, 1, n);
                    for r in 0..m {
                        for (d, &s) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (m, n) = g.shape();
                if self.needs_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = grad_buf(grads, *a, m, n);
                    for r in 0..m {
                        for ((d, &s), &y) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(bv) {
                            *d += s * y;
                        }
                    }
                }
                if self.needs_grad(*b) {
                    let av = self.value(*a);
                    let gb = grad_buf(grads, *b, 1, n);
                    for r in 0..m {
                        for ((d, &s), &x) in gb.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let (m, n) = g.shape();
                let ga = grad_buf(grads, *a, m, n);
                for (d, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d += v * *s;
                }
            }
            Op::AddScalar(a) => {
                let (m, n) = g.shape();
                grad_buf(grads, *a, m, n).add_assign(g);
            }
            Op::Unary(a, u) => {
                let (m, n) = g.shape();
                let xv = self.value(*a).data();
                let ov = out.data();
                let ga = grad_buf(grads, *a, m, n);
                for (((d, &s), &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(xv).zip(ov) {
                    let dydx = match u {
                        Unary::Silu => {
                            let sg = sigmoid(x);
                            sg * (T::one() + x * (T::one() - sg))
                        }
                        Unary::Sigmoid => y * (T::one() - y),
                        Unary::Softplus => sigmoid(x),
                        Unary::LeakyRelu(sl) => {
                            if x >= T::zero() {
                                T::one()
                            } else {
                                *sl
                            }
                        }
                        Unary::Square => T::of(2.0) * x,
                        Unary::Sqrt => {
                            if y > T::zero() {
                                T::of(0.5) / y
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => y,
                    };
                    *d += s * dydx;
                }
            }
            Op::Reshape(a) => {
                let (m, n) = self.shape(*a);
                let ga = grad_buf(grads, *a, m, n);
                for (d, &s) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.shape(*x);
                let w = g.cols();
                let gx = grad_buf(grads, *x, m, n);
                for r in 0..m {
                    for (d, &s) in gx.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (m, n) = self.shape(p);
                    if self.needs_grad(p) {
                        let gp = grad_buf(grads, p, m, n);
                        for r in 0..m {
                            for (d, &s) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + n]) {
                                *d += s;
                            }
                        }
                    }
                    off += n;
                }
            }
            Op::Gather { inputs, index } => {
                for (r, rr) in index.iter().enumerate() {
                    if rr.is_zero() {
                        continue;
                    }
                    let src = inputs[rr.input as usize];
                    if !self.needs_grad(src) {
                        continue;
                    }
                    let (m, n) = self.shape(src);
                    let gs = grad_buf(grads, src, m, n);
                    for (d, &s) in gs.row_mut(rr.row as usize).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::RmsNorm { x, gamma, seg, inv } => {
                let seg = *seg;
                let xv = self.value(*x);
                let (m, n) = xv.shape();
                let gam = self.value(*gamma).data();
                let segf = T::of(seg as f64);
                if self.needs_grad(*x) {
                    let gx = grad_buf(grads, *x, m, n);
                    for (s, &r) in inv.iter().enumerate() {
                        let xs = &xv.data()[s * seg..(s + 1) * seg];
                        let gs = &g.data()[s * seg..(s + 1) * seg];
                        let mut dot = T::zero();
                        for j in 0..seg {
                            dot += gs[j] * gam[j] * xs[j];
                        }
                        let c = r * r * r * dot / segf;
                        let dst = &mut gx.data_mut()[s * seg..(s + 1) * seg];
                        for j in 0..seg {
                            dst[j] += r * gs[j] * gam[j] - xs[j] * c;
                        }
                    }
                }
                if self.needs_grad(*gamma) {
                    let gg = grad_buf(grads, *gamma, 1, seg);
                    for (s, &r) in inv.iter().enumerate() {
                        let xs = &xv.data()[s * seg..(s + 1) * seg];
                        let gs = &g.data()[s * seg..(s + 1) * seg];
                        for j in 0..seg {
                            gg.data_mut()[j] += gs[j] * xs[j] * r;
                        }
                    }
                }
            }
            Op::Rope { x, table } => {
                let mut back = g.clone();
                rope_apply(&mut back, table, true);
                let (m, n) = self.shape(*x);
                grad_buf(grads, *x, m, n).add_assign(&back);
            }
            Op::Attention { q, k, v, shape, scale, probs } => {
                self.attention_backward(*q, *k, *v, *shape, *scale, probs, g, grads);
            }
            Op::GroupNorm { x, gamma, beta, groups, len, valid, mean, rstd } => {
                let xv = self.value(*x);
                let (m, ch) = xv.shape();
                let gs = ch / groups;
                let gam = self.value(*gamma).data();
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = vec![T::zero(); ch];
                    let mut db = vec![T::zero(); ch];
                    for r in 0..m {
                        let b = r / len;
                        for c in 0..ch {
                            let idx = b * groups + c / gs;
                            let xh = (xv.get(r, c) - mean[idx]) * rstd[idx];
                            dg[c] += g.get(r, c) * xh;
                            db[c] += g.get(r, c);
                        }
                    }
                    if self.needs_grad(*gamma) {
                        let t = grad_buf(grads, *gamma, 1, ch);
                        for (d, s) in t.data_mut().iter_mut().zip(dg) {
                            *d += s;
                        }
                    }
                    if self.needs_grad(*beta) {
                        let t = grad_buf(grads, *beta, 1, ch);
                        for (d, s) in t.data_mut().iter_mut().zip(db) {
                            *d += s;
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let gx = grad_buf(grads, *x, m, ch);
                    for b in 0..valid.len() {
                        let nv = valid[b].min(*len);
                        for grp in 0..*groups {
                            let idx = b * groups + grp;
                            let (mu, r) = (mean[idx], rstd[idx]);
                            let mut dmu_acc = T::zero();
                            let mut dr_acc = T::zero();
                            for t in 0..*len {
                                let row = b * len + t;
                                for c in grp * gs..(grp + 1) * gs {
                                    let dxh = g.get(row, c) * gam[c];
                                    dmu_acc += dxh;
                                    dr_acc += dxh * (xv.get(row, c) - mu);
                                    let cur = gx.get(row, c);
                                    gx.set(row, c, cur + dxh * r);
                                }
                            }
                            if nv == 0 {
                                continue;
                            }
                            let cnt = T::of((nv * gs) as f64);
                            let dmu = -r * dmu_acc;
                            let dvar = -dr_acc * r * r * r * T::of(0.5);
                            for t in 0..nv {
                                let row = b * len + t;
                                for c in grp * gs..(grp + 1) * gs {
                                    let add = dmu / cnt + dvar * T::of(2.0) * (xv.get(row, c) - mu) / cnt;
                                    let cur = gx.get(row, c);
                                    gx.set(row, c, cur + add);
                                }
                            }
                        }
                    }
                }
            }
            Op::Im2Col3 { x, len } => {
                let (m, c) = self.shape(*x);
                let gx = grad_buf(grads, *x, m, c);
                for r in 0..m {
                    let t = r % len;
                    let src = g.row(r);
                    if t > 0 {
                        for (d, &s) in gx.row_mut(r - 1).iter_mut().zip(&src[..c]) {
                            *d += s;
                        }
                    }
                    for (d, &s) in gx.row_mut(r).iter_mut().zip(&src[c..2 * c]) {
                        *d += s;
                    }
                    if t + 1 < *len {
                        for (d, &s) in gx.row_mut(r + 1).iter_mut().zip(&src[2 * c..]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SegmentTMatMul { x, w, segments } => {
                let (m, k) = self.shape(*x);
                let len = m / segments;
                let q = w.cols();
                let gx = grad_buf(grads, *x, m, k);
                for s in 0..*segments {
                    let ws = MatRef { offset: s * len * q, rows: len, cols: q, row_stride: q, col_stride: 1 };
                    let gs = MatRef { offset: s * k * q, rows: k, cols: q, row_stride: q, col_stride: 1 };
                    let xs = MatRef { offset: s * len * k, rows: len, cols: k, row_stride: k, col_stride: 1 };
                    gemm(T::one(), w.data(), ws, g.data(), gs.t(), T::one(), gx.data_mut(), xs);
                }
            }
            Op::WeightedSum { x, w } => {
                let (m, n) = self.shape(*x);
                let s = g.get(0, 0);
                let gx = grad_buf(grads, *x, m, n);
                for (d, &wi) in gx.data_mut().iter_mut().zip(w.iter()) {
                    *d += s * wi;
                }
            }
            Op::RowSum(x) => {
                let (m, n) = self.shape(*x);
                let gx = grad_buf(grads, *x, m, n);
                for r in 0..m {
                    let s = g.get(r, 0);
                    for d in gx.row_mut(r) {
                        *d += s;
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, n) = self.shape(*x);
                let gx = grad_buf(grads, *x, m, n);
                for r in 0..m {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot = y.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for ((d, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *d += (gv - yv * dot) / norms[r];
                    }
                }
            }
            Op::Geodesic { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = av.shape();
                let mut coef = vec![T::zero(); m];
                for r in 0..m {
                    let u = row_dist(av.row(r), bv.row(r));
                    let s = clamp_half_chord(u);
                    let c = if u > T::zero() {
                        T::of(2.0) * s.asin() / (T::one() - s * s).sqrt() / u
                    } else {
                        T::one()
                    };
                    coef[r] = c * g.get(r, 0);
                }
                for (var, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if !self.needs_grad(var) {
                        continue;
                    }
                    let gv = grad_buf(grads, var, m, n);
                    for r in 0..m {
                        for ((d, &x), &y) in gv.row_mut(r).iter_mut().zip(av.row(r)).zip(bv.row(r)) {
                            *d += sign * coef[r] * (x - y);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        scale: T,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let AttnShape { batch, heads, q_len, k_len, head_dim, v_dim } = shape;
        let qw = heads * head_dim;
        let vw = heads * v_dim;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (nq, nk, nv) = (self.needs_grad(q), self.needs_grad(k), self.needs_grad(v));
        let mut gq = if nq { Some(grads[q.0].take().unwrap_or_else(|| Tensor::zeros(batch * q_len, qw))) } else { None };
        let mut gk = if nk { Some(grads[k.0].take().unwrap_or_else(|| Tensor::zeros(batch * k_len, qw))) } else { None };
        let mut gv = if nv { Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(batch * k_len, vw))) } else { None };
        let mut dp = vec![T::zero(); q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                let pi = (b * heads + h) * q_len * k_len;
                let p = &probs[pi..pi + q_len * k_len];
                let pv = MatRef::dense(q_len, k_len);
                let go = MatRef { offset: b * q_len * vw + h * v_dim, rows: q_len, cols: v_dim, row_stride: vw, col_stride: 1 };
                let vv = MatRef { offset: b * k_len * vw + h * v_dim, rows: k_len, cols: v_dim, row_stride: vw, col_stride: 1 };
                if let Some(gv) = gv.as_mut() {
                    gemm(T::one(), p, pv.t(), g.data(), go, T::one(), gv.data_mut(), vv);
                }
                if !(nq || nk) {
                    continue;
                }
                gemm(T::one(), g.data(), go, vd, vv.t(), T::zero(), &mut dp, pv);
                for i in 0..q_len {
                    let pr = &p[i * k_len..(i + 1) * k_len];
                    let dr = &mut dp[i * k_len..(i + 1) * k_len];
                    let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - dot);
                    }
                }
                let qv = MatRef { offset: b * q_len * qw + h * head_dim, rows: q_len, cols: head_dim, row_stride: qw, col_stride: 1 };
                let kv = MatRef { offset: b * k_len * qw + h * head_dim, rows: k_len, cols: head_dim, row_stride: qw, col_stride: 1 };
                if let Some(gq) = gq.as_mut() {
                    gemm(scale, &dp, pv, kd, kv, T::one(), gq.data_mut(), qv);
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(scale, &dp, pv.t(), qd, qv, T::one(), gk.data_mut(), kv);
                }
            }
        }
        // q, k, v may be the same node; merge rather than overwrite.
        for (var, t) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(t) = t {
                match grads[var.0].as_mut() {
                    Some(existing) => existing.add_assign(&t),
                    None => grads[var.0] = Some(t),
                }
            }
        }
    }
}

fn masked_softmax<T: Scalar>(row: &mut [T], valid: Option<&[bool]>) {
    let ok = |j: usize| valid.map_or(true, |m| m[j]);
    let mut mx = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if ok(j) && x > mx {
            mx = x;
        }
    }
    if mx == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if ok(j) {
            *x = (*x - mx).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn rope_apply<T: Scalar>(x: &mut Tensor<T>, table: &RopeTable<T>, inverse: bool) {
    let half = table.rotate_dims / 2;
    if half == 0 {
        return;
    }
    for r in 0..x.rows() {
        let cs = &table.cos[r * half..(r + 1) * half];
        let sn = &table.sin[r * half..(r + 1) * half];
        let row = x.row_mut(r);
        for h in 0..table.heads {
            let base = h * table.head_dim;
            for i in 0..half {
                let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                let a = row[base + 2 * i];
                let b = row[base + 2 * i + 1];
                row[base + 2 * i] = a * c - b * s;
                row[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}

fn row_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y)).sqrt()
}

/// Half chord kept strictly below 1 so the derivative stays finite at antipodes.
fn clamp_half_chord<T: Scalar>(u: T) -> T {
    let limit = T::one() - T::epsilon() * T::of(4.0);
    (u * T::of(0.5)).min(limit)
}
