//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D array. Spatial maps are stored as
//! `(H*W) x C` matrices with row index `h * W + w`, so convolutions reduce to
//! an `im2col` gather followed by a matmul. Backward passes walk the tape in
//! reverse insertion order, which is a valid topological order because a node
//! can only reference earlier nodes.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Scalar types the tape can run on. Training uses `f32`; gradient checks use `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + Send
    + Sync
    + Debug
    + Sum
    + Default
    + 'static
{
    fn c(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn c(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution gather.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source row in the input for output position `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some(y as usize * self.in_w + x as usize)
        }
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    /// `b` is either the same shape as `a` or a `1 x n` row broadcast over rows.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    MeanRows(Var),
    Im2col(Var, ConvGeometry),
    L1 {
        x: Var,
        target: Array2<T>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_row_broadcast<T>(a: &Array2<T>, b: &Array2<T>) -> bool {
    b.nrows() == 1 && a.nrows() != 1 && b.ncols() == a.ncols()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable input identified by `id`; its gradient is reported under that id.
    pub fn param(&mut self, id: usize, value: Array2<T>) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.dim() == vb.dim() || is_row_broadcast(va, vb),
            "add: incompatible shapes {:?} and {:?}",
            va.dim(),
            vb.dim()
        );
        let value = va + vb;
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.dim() == vb.dim() || is_row_broadcast(va, vb),
            "mul: incompatible shapes {:?} and {:?}",
            va.dim(),
            vb.dim()
        );
        let value = va * vb;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(Float::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::c(x.ncols() as f64);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm { x: a, inv_std })
    }

    /// Column means, producing a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    pub fn im2col(&mut self, a: Var, g: ConvGeometry) -> Var {
        let x = self.value(a);
        assert_eq!(
            x.dim(),
            (g.in_h * g.in_w, g.channels),
            "im2col: input shape"
        );
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut value = Array2::<T>::zeros((oh * ow, g.patch_len()));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut dst = value.row_mut(oy * ow + ox);
                let dst = dst.as_slice_mut().expect("contiguous row");
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some(src) = g.source(oy, ox, ky, kx) {
                            let off = (ky * g.kernel + kx) * g.channels;
                            for c in 0..g.channels {
                                dst[off + c] = x[[src, c]];
                            }
                        }
                    }
                }
            }
        }
        self.push(value, Op::Im2col(a, g))
    }

    /// Mean absolute difference against a constant target, as a `1 x 1` node.
    pub fn l1_loss(&mut self, a: Var, target: Array2<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim(), "l1_loss: shape mismatch");
        let n = T::c(x.len() as f64);
        let total = Zip::from(x)
            .and(&target)
            .fold(T::zero(), |acc, &p, &q| acc + (p - q).abs());
        self.push(
            Array2::from_elem((1, 1), total / n),
            Op::L1 { x: a, target },
        )
    }

    /// `-log softmax(logits)[label]` for a `1 x n` logits row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), 1, "cross_entropy expects a single row");
        assert!(label < z.ncols(), "cross_entropy: label out of range");
        let max = z.fold(T::neg_infinity(), |m, &x| m.max(x));
        let exps: Vec<T> = z.iter().map(|&x| (x - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let loss = sum.ln() + max - z[[0, label]];
        let probs = exps.into_iter().map(|e| e / sum).collect();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        )
    }

    /// Linear layer `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add(h, b)
    }

    /// Reverse pass. Each seed is an upstream gradient for one node; seeds for
    /// the same node accumulate.
    pub fn backward(&self, seeds: &[(Var, Array2<T>)]) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(*v).dim(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut params: BTreeMap<usize, Array2<T>> = BTreeMap::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    match params.get_mut(id) {
                        Some(acc) => *acc += &g,
                        None => {
                            params.insert(*id, g.clone());
                        }
                    }
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    let gb = if is_row_broadcast(self.value(*a), self.value(*b)) {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    } else {
                        g.clone()
                    };
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = &g * vb;
                    let gb = if is_row_broadcast(va, vb) {
                        (&g * va).sum_axis(Axis(0)).insert_axis(Axis(0))
                    } else {
                        &g * va
                    };
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g * *s),
                Op::AddConst(a) => accumulate(&mut grads[a.0], g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|d, &y| {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &y| *d = *d * (T::one() - y * y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut dr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = dr.iter().zip(yr.iter()).map(|(&d, &p)| d * p).sum::<T>();
                        Zip::from(&mut dr)
                            .and(&yr)
                            .for_each(|d, &p| *d = p * (*d - dot));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = T::c(y.ncols() as f64);
                    let mut ga = g;
                    for ((mut dr, yr), &is) in
                        ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std.iter())
                    {
                        let sum_d = dr.sum();
                        let sum_dy = dr.iter().zip(yr.iter()).map(|(&d, &v)| d * v).sum::<T>();
                        Zip::from(&mut dr).and(&yr).for_each(|d, &v| {
                            *d = is / n * (n * *d - sum_d - v * sum_dy);
                        });
                    }
                    accumulate(&mut grads[x.0], ga);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let row = g.row(0).mapv(|d| d / T::c(rows as f64));
                    let ga = row.broadcast((rows, row.len())).unwrap().to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Im2col(a, geo) => {
                    let mut ga = Array2::<T>::zeros((geo.in_h * geo.in_w, geo.channels));
                    let ow = geo.out_w();
                    for oy in 0..geo.out_h() {
                        for ox in 0..ow {
                            let src_row = g.row(oy * ow + ox);
                            for ky in 0..geo.kernel {
                                for kx in 0..geo.kernel {
                                    if let Some(dst) = geo.source(oy, ox, ky, kx) {
                                        let off = (ky * geo.kernel + kx) * geo.channels;
                                        for c in 0..geo.channels {
                                            ga[[dst, c]] += src_row[off + c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::L1 { x, target } => {
                    let up = g[[0, 0]];
                    let xv = self.value(*x);
                    let scale = up / T::c(xv.len() as f64);
                    let mut ga = Array2::<T>::zeros(xv.dim());
                    Zip::from(&mut ga)
                        .and(xv)
                        .and(target)
                        .for_each(|d, &p, &q| {
                            let diff = p - q;
                            *d = if diff > T::zero() {
                                scale
                            } else if diff < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            };
                        });
                    accumulate(&mut grads[x.0], ga);
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let up = g[[0, 0]];
                    let mut ga = Array2::<T>::zeros((1, probs.len()));
                    for (j, &p) in probs.iter().enumerate() {
                        let target = if j == *label { T::one() } else { T::zero() };
                        ga[[0, j]] = up * (p - target);
                    }
                    accumulate(&mut grads[logits.0], ga);
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: BTreeMap<usize, Array2<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient reaching a leaf or parameter node, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }

    /// Parameter gradients keyed by parameter id.
    pub fn params(&self) -> &BTreeMap<usize, Array2<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<usize, Array2<T>> {
        self.params
    }
}
