use std::cell::RefCell;
use std::collections::HashMap;

use super::{AutodiffError, NodeId, Tensor};
use crate::scalar::Scalar;

/// Guard added under the square root of every L2 norm.
pub const NORM_EPS: f64 = 1e-12;
/// Smallest magnitude accepted as a divisor.
pub const DIV_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulCol,
    DivCol,
    Scale(T),
    Sum,
    SumAxis { outer: usize, axis: usize, inner: usize },
    MeanAxis { outer: usize, axis: usize, inner: usize },
    L2Norm,
    Sqrt,
    Gelu { tanh: Vec<T> },
    Relu,
    Softmax,
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Gather { indices: Vec<usize> },
    Concat { axis: usize, widths: Vec<usize> },
    Slice { axis: usize, start: usize },
    MaskedMean { mask: Vec<bool>, count: usize },
    SegmentAttention { spans: Vec<(usize, usize)>, heads: usize, scale: T, weights: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddRow => "add_row",
            Op::MulCol => "mul_col",
            Op::DivCol => "div_col",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::L2Norm => "l2_norm",
            Op::Sqrt => "sqrt",
            Op::Gelu { .. } => "gelu",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MaskedMean { .. } => "masked_mean",
            Op::SegmentAttention { .. } => "segment_attention",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
}

/// Define-by-run record of tensor operations.
///
/// Build a fresh tape for every forward pass. Register trainable tensors
/// with [`Tape::leaf`]; any tensor without a node id is a constant.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every reachable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf. Leaves the root does not depend on get zeros.
    pub fn get(&self, leaf: &Tensor<T>) -> Tensor<T> {
        leaf.node()
            .and_then(|id| self.grads.get(&id).cloned())
            .unwrap_or_else(|| Tensor::from_parts(leaf.shape().to_vec(), vec![T::zero(); leaf.len()]))
    }

    pub fn by_node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_of_rank_reduced(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// `tanh` through a single `exp`; absolute error stays at rounding level.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    if u.abs() > T::lit(20.0) {
        return u.signum();
    }
    T::one() - two / ((two * u).exp() + T::one())
}

fn transpose_buf<T: Copy>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A tape that evaluates ops without recording anything. Tensors it
    /// returns never carry node ids.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers `value` as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor<T>) -> Tensor<T> {
        let out = value.detach();
        if !self.recording {
            return out;
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), output: out.clone() });
        out.with_node(id)
    }

    fn record(
        &self,
        op: Op<T>,
        inputs: &[&Tensor<T>],
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> Result<Tensor<T>, AutodiffError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let out = Tensor::from_parts(shape, data);
        if !self.recording || inputs.iter().all(|t| t.node().is_none()) {
            return Ok(out);
        }
        let mut nodes = self.nodes.borrow_mut();
        for t in inputs {
            if let Some(id) = t.node() {
                if id >= nodes.len() {
                    return Err(AutodiffError::ForeignTensor { op: op.name(), node: id });
                }
            }
        }
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            output: out.clone(),
        });
        Ok(out.with_node(id))
    }

    fn same_shape(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), AutodiffError> {
        if a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn require_2d(op: &'static str, a: &Tensor<T>) -> Result<(usize, usize), AutodiffError> {
        match a.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(AutodiffError::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "expected a matrix".into(),
            }),
        }
    }

    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (m, k) = Self::require_2d("matmul", a)?;
        let (k2, n) = Self::require_2d("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), b.data(), &mut out);
        self.record(Op::MatMul, &[a, b], vec![m, n], out)
    }

    pub fn transpose(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (r, c) = Self::require_2d("transpose", a)?;
        self.record(Op::Transpose, &[a], vec![c, r], transpose_buf(r, c, a.data()))
    }

    pub fn reshape(&self, a: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>, AutodiffError> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != a.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                left: a.shape().to_vec(),
                right: shape,
            });
        }
        self.record(Op::Reshape, &[a], shape, a.to_vec())
    }

    fn zip_with(
        &self,
        op: Op<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, AutodiffError> {
        Self::same_shape(op.name(), a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.record(op, &[a, b], a.shape().to_vec(), data)
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.zip_with(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.zip_with(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.zip_with(Op::Mul, a, b, |x, y| x * y)
    }

    /// Elementwise quotient; every divisor must satisfy `|b| >= DIV_EPS`.
    pub fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        Self::same_shape("div", a, b)?;
        if b.data().iter().any(|v| v.abs() < T::lit(DIV_EPS)) {
            return Err(AutodiffError::DivisorTooSmall { op: "div" });
        }
        self.zip_with(Op::Div, a, b, |x, y| x / y)
    }

    /// `x + bias` with `bias` of shape `(cols)` broadcast over rows.
    pub fn add_row(&self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (rows, cols) = x.rows_cols();
        if bias.len() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: x.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let mut data = x.to_vec();
        for r in 0..rows {
            for (v, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(bias.data()) {
                *v = *v + b;
            }
        }
        self.record(Op::AddRow, &[x, bias], x.shape().to_vec(), data)
    }

    /// Scales row `r` of `x` by `col[r]`.
    pub fn mul_col(&self, x: &Tensor<T>, col: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (rows, cols) = x.rows_cols();
        if col.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_col",
                left: x.shape().to_vec(),
                right: col.shape().to_vec(),
            });
        }
        let mut data = x.to_vec();
        for r in 0..rows {
            let s = col.data()[r];
            data[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = *v * s);
        }
        self.record(Op::MulCol, &[x, col], x.shape().to_vec(), data)
    }

    /// Divides row `r` of `x` by `col[r]`; divisors must be at least `DIV_EPS`.
    pub fn div_col(&self, x: &Tensor<T>, col: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (rows, cols) = x.rows_cols();
        if col.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "div_col",
                left: x.shape().to_vec(),
                right: col.shape().to_vec(),
            });
        }
        if col.data().iter().any(|v| v.abs() < T::lit(DIV_EPS)) {
            return Err(AutodiffError::DivisorTooSmall { op: "div_col" });
        }
        let mut data = x.to_vec();
        for r in 0..rows {
            let s = col.data()[r];
            data[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = *v / s);
        }
        self.record(Op::DivCol, &[x, col], x.shape().to_vec(), data)
    }

    pub fn scale(&self, x: &Tensor<T>, s: T) -> Result<Tensor<T>, AutodiffError> {
        let data = x.data().iter().map(|&v| v * s).collect();
        self.record(Op::Scale(s), &[x], x.shape().to_vec(), data)
    }

    pub fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let total = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.record(Op::Sum, &[x], vec![1], vec![total])
    }

    fn axis_split(op: &'static str, x: &Tensor<T>, axis: usize) -> Result<(usize, usize, usize), AutodiffError> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    fn reduce_axis(x: &Tensor<T>, outer: usize, ax: usize, inner: usize) -> Vec<T> {
        let mut out = vec![T::zero(); outer * inner];
        let d = x.data();
        for o in 0..outer {
            for a in 0..ax {
                let base = (o * ax + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        out
    }

    pub fn sum_axis(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, AutodiffError> {
        let (outer, ax, inner) = Self::axis_split("sum_axis", x, axis)?;
        let out = Self::reduce_axis(x, outer, ax, inner);
        self.record(Op::SumAxis { outer, axis: ax, inner }, &[x], shape_of_rank_reduced(x.shape(), axis), out)
    }

    pub fn mean_axis(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, AutodiffError> {
        let (outer, ax, inner) = Self::axis_split("mean_axis", x, axis)?;
        let n = T::from_usize(ax).expect("extent fits");
        let out = Self::reduce_axis(x, outer, ax, inner).into_iter().map(|v| v / n).collect();
        self.record(Op::MeanAxis { outer, axis: ax, inner }, &[x], shape_of_rank_reduced(x.shape(), axis), out)
    }

    /// `sqrt(sum(x^2) + NORM_EPS)` over the last axis.
    pub fn l2_norm(&self, x: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (rows, _) = x.rows_cols();
        let eps = T::lit(NORM_EPS);
        let out = (0..rows)
            .map(|r| (x.row(r).iter().fold(T::zero(), |acc, &v| acc + v * v) + eps).sqrt())
            .collect();
        let rank = x.shape().len();
        self.record(Op::L2Norm, &[x], shape_of_rank_reduced(x.shape(), rank - 1), out)
    }

    pub fn sqrt(&self, x: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        if x.data().iter().any(|v| *v < T::zero()) {
            return Err(AutodiffError::NonFinite { op: "sqrt" });
        }
        let out = x.data().iter().map(|v| v.sqrt()).collect();
        self.record(Op::Sqrt, &[x], x.shape().to_vec(), out)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (half, c, a) = (T::lit(0.5), T::lit(GELU_C), T::lit(GELU_A));
        let tanh: Vec<T> = x.data().iter().map(|&v| fast_tanh(c * (v + a * v * v * v))).collect();
        let out = x.data().iter().zip(&tanh).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        self.record(Op::Gelu { tanh }, &[x], x.shape().to_vec(), out)
    }

    pub fn relu(&self, x: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        self.record(Op::Relu, &[x], x.shape().to_vec(), out)
    }

    pub fn softmax(&self, x: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (rows, cols) = x.rows_cols();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = x.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                z = z + e;
                out.push(e);
            }
            out[start..start + cols].iter_mut().for_each(|v| *v = *v / z);
        }
        self.record(Op::Softmax, &[x], x.shape().to_vec(), out)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column `gain` and `bias`.
    pub fn layer_norm(
        &self,
        x: &Tensor<T>,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>, AutodiffError> {
        let (rows, cols) = x.rows_cols();
        if gain.len() != cols || bias.len() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gain.shape().to_vec(),
            });
        }
        let n = T::from_usize(cols).expect("extent fits");
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gain.data()[j] + bias.data()[j]);
            }
        }
        self.record(Op::LayerNorm { xhat, inv_std }, &[x, gain, bias], x.shape().to_vec(), out)
    }

    /// Selects rows (along the first axis) by index; indices may repeat.
    pub fn gather(&self, table: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>, AutodiffError> {
        let n_rows = table.shape()[0];
        let width = table.len() / n_rows;
        if indices.is_empty() {
            return Err(AutodiffError::InvalidShape {
                op: "gather",
                shape: table.shape().to_vec(),
                reason: "no indices".into(),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= n_rows {
                return Err(AutodiffError::IndexOutOfRange { op: "gather", index: i, bound: n_rows });
            }
            out.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
        }
        let mut shape = table.shape().to_vec();
        shape[0] = indices.len();
        self.record(Op::Gather { indices: indices.to_vec() }, &[table], shape, out)
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(&self, table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>, AutodiffError> {
        self.gather(table, ids)
    }

    /// Concatenates along axis 0 (any rank, equal trailing extents) or
    /// axis 1 (matrices with equal row counts).
    pub fn concat(&self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, AutodiffError> {
        let first = parts.first().ok_or_else(|| AutodiffError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        match axis {
            0 => {
                let tail = &first.shape()[1..];
                let mut widths = Vec::with_capacity(parts.len());
                let mut data = Vec::new();
                for p in parts {
                    if &p.shape()[1..] != tail {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "concat",
                            left: first.shape().to_vec(),
                            right: p.shape().to_vec(),
                        });
                    }
                    widths.push(p.shape()[0]);
                    data.extend_from_slice(p.data());
                }
                let mut shape = first.shape().to_vec();
                shape[0] = widths.iter().sum();
                self.record(Op::Concat { axis: 0, widths }, parts, shape, data)
            }
            1 => {
                let (rows, _) = Self::require_2d("concat", first)?;
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = Self::require_2d("concat", p)?;
                    if r != rows {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "concat",
                            left: first.shape().to_vec(),
                            right: p.shape().to_vec(),
                        });
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(p.row(r));
                    }
                }
                self.record(Op::Concat { axis: 1, widths }, parts, vec![rows, total], data)
            }
            _ => Err(AutodiffError::InvalidShape {
                op: "concat",
                shape: first.shape().to_vec(),
                reason: format!("unsupported axis {axis}"),
            }),
        }
    }

    /// Contiguous range `start..start + len` along axis 0 (any rank) or
    /// axis 1 (matrices).
    pub fn slice(&self, x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>, AutodiffError> {
        let extent = *x.shape().get(axis).ok_or_else(|| AutodiffError::InvalidShape {
            op: "slice",
            shape: x.shape().to_vec(),
            reason: format!("axis {axis} out of range"),
        })?;
        if len == 0 || start + len > extent {
            return Err(AutodiffError::IndexOutOfRange { op: "slice", index: start + len, bound: extent });
        }
        match axis {
            0 => {
                let width = x.len() / extent;
                let data = x.data()[start * width..(start + len) * width].to_vec();
                let mut shape = x.shape().to_vec();
                shape[0] = len;
                self.record(Op::Slice { axis: 0, start }, &[x], shape, data)
            }
            1 => {
                let (rows, cols) = Self::require_2d("slice", x)?;
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
                }
                self.record(Op::Slice { axis: 1, start }, &[x], vec![rows, len], data)
            }
            _ => Err(AutodiffError::InvalidShape {
                op: "slice",
                shape: x.shape().to_vec(),
                reason: format!("unsupported axis {axis}"),
            }),
        }
    }

    /// Mean of the entries whose mask flag is set. The mask runs over the
    /// flat payload.
    pub fn masked_mean(&self, x: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>, AutodiffError> {
        if mask.len() != x.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_mean",
                left: x.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::EmptyReduction { op: "masked_mean" });
        }
        let total = x
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .fold(T::zero(), |acc, (&v, _)| acc + v);
        let value = total / T::from_usize(count).expect("count fits");
        self.record(Op::MaskedMean { mask: mask.to_vec(), count }, &[x], vec![1], vec![value])
    }

    /// Scaled dot-product attention confined to row segments.
    ///
    /// `q`, `k`, `v` are `(S, d)` matrices whose columns split into `heads`
    /// equal slices. Rows of each `(start, len)` span attend only to rows of
    /// the same span; rows outside every span come out zero. Spans must not
    /// overlap.
    pub fn segment_attention(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        spans: &[(usize, usize)],
        heads: usize,
    ) -> Result<Tensor<T>, AutodiffError> {
        const OP: &str = "segment_attention";
        let (rows, d) = Self::require_2d(OP, q)?;
        Self::same_shape(OP, q, k)?;
        Self::same_shape(OP, q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(AutodiffError::InvalidShape {
                op: OP,
                shape: q.shape().to_vec(),
                reason: format!("{d} columns do not split into {heads} heads"),
            });
        }
        let mut sorted = spans.to_vec();
        sorted.sort_unstable();
        let mut covered = 0;
        for &(start, len) in &sorted {
            if len == 0 || start < covered || start + len > rows {
                return Err(AutodiffError::IndexOutOfRange { op: OP, index: start + len, bound: rows });
            }
            covered = start + len;
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("extent fits").sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![T::zero(); rows * d];
        let mut weights = Vec::with_capacity(spans.iter().map(|&(_, l)| l * l * heads).sum());
        let mut row_w = Vec::new();
        for &(start, len) in spans {
            for h in 0..heads {
                let col = |r: usize| (start + r) * d + h * dh;
                for i in 0..len {
                    let qi = &qd[col(i)..col(i) + dh];
                    row_w.clear();
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        let kj = &kd[col(j)..col(j) + dh];
                        let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                        mx = mx.max(s);
                        row_w.push(s);
                    }
                    let mut z = T::zero();
                    for w in row_w.iter_mut() {
                        *w = (*w - mx).exp();
                        z = z + *w;
                    }
                    let oi = col(i);
                    for (j, w) in row_w.iter_mut().enumerate() {
                        *w = *w / z;
                        let vj = &vd[col(j)..col(j) + dh];
                        for (o, &x) in out[oi..oi + dh].iter_mut().zip(vj) {
                            *o = *o + *w * x;
                        }
                    }
                    weights.extend_from_slice(&row_w);
                }
            }
        }
        let op = Op::SegmentAttention { spans: spans.to_vec(), heads, scale, weights };
        self.record(op, &[q, k, v], vec![rows, d], out)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Tensor<T>) -> Result<Gradients<T>, AutodiffError> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        if !root.is_scalar() {
            return Err(AutodiffError::NonScalarRoot { shape: root.shape().to_vec() });
        }
        let root_id = root.node().ok_or(AutodiffError::UntrackedRoot)?;
        if root_id >= nodes.len() {
            return Err(AutodiffError::ForeignTensor { op: "backward", node: root_id });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root_id + 1];
        grads[root_id] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFinite { op: "backward" });
                }
                out.insert(id, Tensor::from_parts(node.output.shape().to_vec(), g));
                continue;
            }
            let input_grads = local_backward(node, &g);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(in_id), Some(ig)) = (input.node(), ig) else { continue };
                match &mut grads[in_id] {
                    Some(acc) => acc.iter_mut().zip(ig).for_each(|(a, v)| *a = *a + v),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients for each input of `node` given the output gradient `g`.
/// Inputs without a node id get `None`.
fn local_backward<T: Scalar>(node: &Node<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let ins = &node.inputs;
    let want = |i: usize| ins[i].node().is_some();
    let y = node.output.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (a, b) = (&ins[0], &ins[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ga = want(0).then(|| {
                let bt = transpose_buf(k, n, b.data());
                let mut out = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, &bt, &mut out);
                out
            });
            let gb = want(1).then(|| {
                let at = transpose_buf(m, k, a.data());
                let mut out = vec![T::zero(); k * n];
                T::gemm(k, m, n, &at, g, &mut out);
                out
            });
            vec![ga, gb]
        }
        Op::Transpose => {
            let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            vec![Some(transpose_buf(c, r, g))]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.iter().map(|&v| -v).collect())],
        Op::Mul => {
            let (a, b) = (ins[0].data(), ins[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect()),
                want(1).then(|| g.iter().zip(a).map(|(&gv, &av)| gv * av).collect()),
            ]
        }
        Op::Div => {
            let (a, b) = (ins[0].data(), ins[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(&gv, &bv)| gv / bv).collect()),
                want(1).then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect()
                }),
            ]
        }
        Op::AddRow => {
            let cols = ins[1].len();
            let gb = want(1).then(|| {
                let mut acc = vec![T::zero(); cols];
                for row in g.chunks(cols) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                acc
            });
            vec![want(0).then(|| g.to_vec()), gb]
        }
        Op::MulCol | Op::DivCol => {
            let divide = matches!(node.op, Op::DivCol);
            let (x, c) = (ins[0].data(), ins[1].data());
            let cols = x.len() / c.len();
            let gx = want(0).then(|| {
                g.chunks(cols)
                    .zip(c)
                    .flat_map(|(row, &s)| row.iter().map(move |&v| if divide { v / s } else { v * s }))
                    .collect()
            });
            let gc = want(1).then(|| {
                g.chunks(cols)
                    .zip(x.chunks(cols))
                    .zip(c)
                    .map(|((grow, xrow), &s)| {
                        let dot = grow.iter().zip(xrow).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
                        if divide {
                            -dot / (s * s)
                        } else {
                            dot
                        }
                    })
                    .collect()
            });
            vec![gx, gc]
        }
        Op::Scale(s) => vec![Some(g.iter().map(|&v| v * *s).collect())],
        Op::Sum => vec![Some(vec![g[0]; ins[0].len()])],
        Op::SumAxis { outer, axis, inner } | Op::MeanAxis { outer, axis, inner } => {
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                T::one() / T::from_usize(*axis).expect("extent fits")
            } else {
                T::one()
            };
            let mut out = Vec::with_capacity(ins[0].len());
            for o in 0..*outer {
                for _ in 0..*axis {
                    out.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                }
            }
            vec![Some(out)]
        }
        Op::L2Norm => {
            let x = ins[0].data();
            let cols = x.len() / y.len();
            let out = x
                .chunks(cols)
                .zip(y.iter().zip(g))
                .flat_map(|(row, (&norm, &gv))| row.iter().map(move |&v| gv * v / norm))
                .collect();
            vec![Some(out)]
        }
        Op::Sqrt => vec![Some(g.iter().zip(y).map(|(&gv, &yv)| gv / (T::lit(2.0) * yv)).collect())],
        Op::Gelu { tanh } => {
            let (half, c, a) = (T::lit(0.5), T::lit(GELU_C), T::lit(GELU_A));
            let three = T::lit(3.0);
            let out = ins[0]
                .data()
                .iter()
                .zip(tanh)
                .zip(g)
                .map(|((&x, &t), &gv)| {
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
                    gv * d
                })
                .collect();
            vec![Some(out)]
        }
        Op::Relu => vec![Some(
            ins[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                .collect(),
        )],
        Op::Softmax => {
            let cols = *node.output.shape().last().expect("rank >= 1");
            let mut out = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
            }
            vec![Some(out)]
        }
        Op::LayerNorm { xhat, inv_std } => {
            let gain = ins[1].data();
            let cols = gain.len();
            let n = T::from_usize(cols).expect("extent fits");
            let gx = want(0).then(|| {
                let mut out = Vec::with_capacity(xhat.len());
                for ((hr, gr), &is) in xhat.chunks(cols).zip(g.chunks(cols)).zip(inv_std) {
                    let dh: Vec<T> = gr.iter().zip(gain).map(|(&gv, &w)| gv * w).collect();
                    let sum_dh = dh.iter().fold(T::zero(), |a, &v| a + v);
                    let sum_dh_h = dh.iter().zip(hr).fold(T::zero(), |a, (&d, &h)| a + d * h);
                    out.extend(
                        dh.iter()
                            .zip(hr)
                            .map(|(&d, &h)| is / n * (n * d - sum_dh - h * sum_dh_h)),
                    );
                }
                out
            });
            let ggain = want(1).then(|| {
                let mut acc = vec![T::zero(); cols];
                for (hr, gr) in xhat.chunks(cols).zip(g.chunks(cols)) {
                    for j in 0..cols {
                        acc[j] = acc[j] + gr[j] * hr[j];
                    }
                }
                acc
            });
            let gbias = want(2).then(|| {
                let mut acc = vec![T::zero(); cols];
                for gr in g.chunks(cols) {
                    acc.iter_mut().zip(gr).for_each(|(a, &v)| *a = *a + v);
                }
                acc
            });
            vec![gx, ggain, gbias]
        }
        Op::Gather { indices } => {
            let table = &ins[0];
            let width = table.len() / table.shape()[0];
            let mut out = vec![T::zero(); table.len()];
            for (k, &i) in indices.iter().enumerate() {
                for j in 0..width {
                    out[i * width + j] = out[i * width + j] + g[k * width + j];
                }
            }
            vec![Some(out)]
        }
        Op::Concat { axis: 0, widths } => {
            let mut offset = 0;
            ins.iter()
                .zip(widths)
                .map(|(t, _)| {
                    let len = t.len();
                    let part = g[offset..offset + len].to_vec();
                    offset += len;
                    t.node().is_some().then_some(part)
                })
                .collect()
        }
        Op::Concat { widths, .. } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            ins.iter()
                .zip(widths)
                .map(|(t, &w)| {
                    let start = offset;
                    offset += w;
                    t.node().is_some().then(|| {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        part
                    })
                })
                .collect()
        }
        Op::Slice { axis, start } => {
            let x = &ins[0];
            let mut out = vec![T::zero(); x.len()];
            if *axis == 0 {
                let width = x.len() / x.shape()[0];
                out[start * width..start * width + g.len()].copy_from_slice(g);
            } else {
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let len = g.len() / rows;
                for r in 0..rows {
                    out[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
            }
            vec![Some(out)]
        }
        Op::MaskedMean { mask, count } => {
            let share = g[0] / T::from_usize(*count).expect("count fits");
            vec![Some(mask.iter().map(|&m| if m { share } else { T::zero() }).collect())]
        }
        Op::SegmentAttention { spans, heads, scale, weights } => {
            let d = ins[0].shape()[1];
            let dh = d / heads;
            let (qd, kd, vd) = (ins[0].data(), ins[1].data(), ins[2].data());
            let (mut gq, mut gk, mut gv) = (vec![T::zero(); qd.len()], vec![T::zero(); qd.len()], vec![T::zero(); qd.len()]);
            let mut offset = 0;
            let mut dw = Vec::new();
            for &(start, len) in spans {
                for h in 0..*heads {
                    let col = |r: usize| (start + r) * d + h * dh;
                    for i in 0..len {
                        let w = &weights[offset..offset + len];
                        offset += len;
                        let gi = &g[col(i)..col(i) + dh];
                        dw.clear();
                        for (j, &wij) in w.iter().enumerate() {
                            let cj = col(j);
                            dw.push(gi.iter().zip(&vd[cj..cj + dh]).fold(T::zero(), |a, (&x, &y)| a + x * y));
                            for (acc, &x) in gv[cj..cj + dh].iter_mut().zip(gi) {
                                *acc = *acc + wij * x;
                            }
                        }
                        let dot = w.iter().zip(&dw).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        let ci = col(i);
                        for (j, (&wij, &dwij)) in w.iter().zip(&dw).enumerate() {
                            let ds = wij * (dwij - dot) * *scale;
                            let cj = col(j);
                            for t in 0..dh {
                                gq[ci + t] = gq[ci + t] + ds * kd[cj + t];
                                gk[cj + t] = gk[cj + t] + ds * qd[ci + t];
                            }
                        }
                    }
                }
            }
            vec![want(0).then_some(gq), want(1).then_some(gk), want(2).then_some(gv)]
        }
    }
}
