//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! Every model in this crate is expressed as a sequence of tape operations on
//! row-major tensors. A [`Tape`] lives for one forward/backward computation:
//! record the forward pass, call [`Tape::backward`] once on a scalar, read the
//! gradients, drop the tape.
//!
//! Binary elementwise ops broadcast their right-hand operand only: it must
//! either have the same shape as the left operand, hold a single element, or
//! (for rank-2 operands) have size 1 along the broadcast dimensions.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tensor shape {shape:?} does not match {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("finite difference: non-finite function value at coordinate {0}")]
    NonFiniteEvaluation(usize),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// (rows, cols) when the tensor is viewed as a matrix: leading dimensions
    /// are folded into rows.
    pub fn dims2(&self) -> (usize, usize) {
        as_2d(&self.shape)
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Independent ChaCha8 stream named `name` under a root `seed`.
///
/// The stream id is the 64-bit FNV-1a hash of the name, so a given
/// `(seed, name)` pair yields the same sequence on every platform.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// `c = alpha * op(a) * op(b) + beta * c` on strided row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in c.iter_mut().take(m * n) {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the caller guarantees the strides stay within the slices; the
    // asserts below check the extreme offsets.
    debug_assert!(
        ((m - 1) as isize * a_strides.0 + (k - 1) as isize * a_strides.1) < a.len() as isize
    );
    debug_assert!(
        ((k - 1) as isize * b_strides.0 + (n - 1) as isize * b_strides.1) < b.len() as isize
    );
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of two plain tensors, `a * b` or `a * b^T`.
pub fn matmul(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (br, bc) = b.dims2();
    let (kb, n, bs) = if transpose_b {
        (bc, br, (1isize, bc as isize))
    } else {
        (br, bc, (bc as isize, 1isize))
    };
    if k != kb || b.shape.len() > 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        bs,
        &mut out,
        0.0,
    );
    let mut shape = if a.shape.len() >= 2 {
        a.shape[..a.shape.len() - 1].to_vec()
    } else {
        vec![1]
    };
    shape.push(n);
    Tensor::new(shape, out)
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Broadcast layout of a binary op's right operand against the left one.
#[derive(Clone, Copy, Debug)]
struct Bcast {
    rows: usize,
    cols: usize,
    b_row_stride: usize,
    b_col_stride: usize,
}

enum Op {
    Constant,
    Param,
    Input,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanCols(Var),
    Silu(Var),
    Sigmoid(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    // source kept so the graph stays inspectable; no gradient flows through it
    #[allow(dead_code)]
    StopGradient(Var),
    Unfold {
        src: Var,
        patch: usize,
        stride: usize,
    },
    Expand {
        src: Var,
        width: usize,
        deriv: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations for one reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, with zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.push(value, op, requires_grad)
    }

    /// A value the loss is not differentiated against.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    /// A trainable parameter leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Param, true)
    }

    /// A differentiable non-parameter leaf (model inputs under attribution).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, true)
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Param)
    }

    fn bcast(&self, name: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (rows, cols) = as_2d(sa);
        let err = || NumericsError::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa == sb {
            return Ok(Bcast {
                rows,
                cols,
                b_row_stride: cols,
                b_col_stride: 1,
            });
        }
        let nb: usize = sb.iter().product();
        if nb == 1 {
            return Ok(Bcast {
                rows,
                cols,
                b_row_stride: 0,
                b_col_stride: 0,
            });
        }
        if sa.len() == 2 && sb.len() == 2 {
            let (br, bc) = (sb[0], sb[1]);
            if (br == rows || br == 1) && (bc == cols || bc == 1) {
                return Ok(Bcast {
                    rows,
                    cols,
                    b_row_stride: if br == 1 { 0 } else { bc },
                    b_col_stride: if bc == 1 { 0 } else { 1 },
                });
            }
        }
        Err(err())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(av.numel());
        for r in 0..bc.rows {
            let arow = &av.data[r * bc.cols..(r + 1) * bc.cols];
            let boff = r * bc.b_row_stride;
            if bc.b_col_stride == 1 {
                let brow = &bv.data[boff..boff + bc.cols];
                out.extend(arow.iter().zip(brow).map(|(&x, &y)| f(x, y)));
            } else {
                let y = bv.data[boff];
                out.extend(arow.iter().map(|&x| f(x, y)));
            }
        }
        let value = Tensor {
            shape: av.shape.clone(),
            data: out,
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(name, value, make(a, b, bc), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `a * b` (or `a * b^T`) for matrices; `a` may carry leading batch
    /// dimensions which are folded into rows.
    pub fn matmul_opt(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b), transpose_b)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul", value, Op::MatMul { a, b, transpose_b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, false)
    }

    /// `a * b^T`, the natural layout for `[out, in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, true)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push_checked(name, value, op, rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, silu, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x < 0.0) {
            return Err(NumericsError::InvalidArgument {
                op: "sqrt",
                msg: "negative input".into(),
            });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    /// Multiply by a fixed scalar.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * k, Op::Scale(a, k))
    }

    /// Add a fixed scalar.
    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("shift", a, |x| x + k, Op::Shift(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.requires_grad(a);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = v.data.iter().sum::<f64>() / v.numel() as f64;
        let rg = self.requires_grad(a);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_cols(&mut self, a: Var, mean: bool) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let div = if mean { cols as f64 } else { 1.0 };
        let data: Vec<f64> = v
            .data
            .chunks(cols.max(1))
            .take(rows)
            .map(|row| row.iter().sum::<f64>() / div)
            .collect();
        let value = Tensor {
            shape: vec![rows, 1],
            data,
        };
        let rg = self.requires_grad(a);
        let (name, op) = if mean {
            ("mean_cols", Op::MeanCols(a))
        } else {
            ("sum_cols", Op::SumCols(a))
        };
        self.push_checked(name, value, op, rg)
    }

    /// Row sums as an `[rows, 1]` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.reduce_cols(a, false)
    }

    /// Row means as an `[rows, 1]` column.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        self.reduce_cols(a, true)
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(NumericsError::InvalidArgument {
                op: "concat",
                msg: "need at least one part and axis 0 or 1".into(),
            });
        }
        let (r0, c0) = as_2d(self.shape(parts[0]));
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = as_2d(self.shape(p));
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            cols += c;
        }
        let data = if axis == 0 {
            let mut d = Vec::with_capacity(rows * c0);
            for &p in parts {
                d.extend_from_slice(&self.value(p).data);
            }
            cols = c0;
            d
        } else {
            rows = r0;
            let mut d = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    let (_, c) = as_2d(self.shape(p));
                    d.extend_from_slice(&self.value(p).data[r * c..(r + 1) * c]);
                }
            }
            d
        };
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        self.push_checked(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `len` rows (axis 0) or columns (axis 1) of a rank-2 tensor starting at
    /// `start`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_2d(self.shape(src));
        let bound = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > bound {
            return Err(NumericsError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {start}..{} out of bounds for axis {axis} of {:?}",
                    start + len,
                    self.shape(src)
                ),
            });
        }
        let v = &self.nodes[src.0].value.data;
        let (shape, data) = if axis == 0 {
            (
                vec![len, cols],
                v[start * cols..(start + len) * cols].to_vec(),
            )
        } else {
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
            }
            (vec![rows, len], d)
        };
        let rg = self.requires_grad(src);
        self.push(Tensor { shape, data }, Op::Slice { src, axis, start }, rg)
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(src).clone().reshaped(shape)?;
        let rg = self.requires_grad(src);
        self.push(value, Op::Reshape(src), rg)
    }

    /// Identity in the forward pass; blocks all gradient flow in backward.
    pub fn stop_gradient(&mut self, src: Var) -> Result<Var> {
        let value = self.value(src).clone();
        self.push(value, Op::StopGradient(src), false)
    }

    /// Overlapping windows over the columns of `[rows, len]`: returns
    /// `[rows * n, patch]` with `n = (len - patch) / stride + 1`, row-major by
    /// (source row, window).
    pub fn unfold(&mut self, src: Var, patch: usize, stride: usize) -> Result<Var> {
        let (rows, len) = as_2d(self.shape(src));
        if patch == 0 || stride == 0 || patch > len || (len - patch) % stride != 0 {
            return Err(NumericsError::InvalidArgument {
                op: "unfold",
                msg: format!("patch {patch} stride {stride} do not tile length {len}"),
            });
        }
        let n = (len - patch) / stride + 1;
        let v = &self.nodes[src.0].value.data;
        let mut data = Vec::with_capacity(rows * n * patch);
        for r in 0..rows {
            for p in 0..n {
                let off = r * len + p * stride;
                data.extend_from_slice(&v[off..off + patch]);
            }
        }
        let rg = self.requires_grad(src);
        self.push(
            Tensor {
                shape: vec![rows * n, patch],
                data,
            },
            Op::Unfold { src, patch, stride },
            rg,
        )
    }

    /// Expand every element of `[rows, cols]` into `width` features through
    /// `f(x, values, derivs)`, giving `[rows, cols * width]`. `f` writes the
    /// feature values and, when `derivs` is given, their derivatives with
    /// respect to `x`.
    pub fn expand(
        &mut self,
        src: Var,
        width: usize,
        mut f: impl FnMut(f64, &mut [f64], Option<&mut [f64]>),
    ) -> Result<Var> {
        let (rows, cols) = as_2d(self.shape(src));
        let rg = self.requires_grad(src);
        let v = &self.nodes[src.0].value.data;
        let mut data = vec![0.0; rows * cols * width];
        let mut deriv = if rg {
            vec![0.0; rows * cols * width]
        } else {
            Vec::new()
        };
        for (idx, &x) in v.iter().enumerate() {
            let out = &mut data[idx * width..(idx + 1) * width];
            if rg {
                f(x, out, Some(&mut deriv[idx * width..(idx + 1) * width]));
            } else {
                f(x, out, None);
            }
        }
        let value = Tensor {
            shape: vec![rows, cols * width],
            data,
        };
        self.push_checked("expand", value, Op::Expand { src, width, deriv }, rg)
    }

    /// Reverse pass from a scalar `loss`. The tape cannot record or run
    /// backward again afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(NumericsError::NotScalar(ls.to_vec()));
        }
        self.consumed = true;
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: shapes[loss.0].clone(),
            data: vec![1.0],
        });
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Constant | Op::Param | Op::Input | Op::StopGradient(_) => {}
            Op::Add(a, b, bc) => {
                if rg(*a) {
                    accumulate(grads, *a, &self.nodes[a.0].value.shape, |d| {
                        add_into(d, &g.data)
                    });
                }
                if rg(*b) {
                    let gb = reduce_bcast(&g.data, bc, self.value(*b).numel(), |x, _| x);
                    accumulate(grads, *b, &self.nodes[b.0].value.shape, |d| {
                        add_into(d, &gb)
                    });
                }
            }
            Op::Sub(a, b, bc) => {
                if rg(*a) {
                    accumulate(grads, *a, &self.nodes[a.0].value.shape, |d| {
                        add_into(d, &g.data)
                    });
                }
                if rg(*b) {
                    let gb = reduce_bcast(&g.data, bc, self.value(*b).numel(), |x, _| -x);
                    accumulate(grads, *b, &self.nodes[b.0].value.shape, |d| {
                        add_into(d, &gb)
                    });
                }
            }
            Op::Mul(a, b, bc) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if rg(*a) {
                    let ga = map_bcast(&g.data, bv, bc, |gi, bj| gi * bj);
                    accumulate(grads, *a, &self.nodes[a.0].value.shape, |d| {
                        add_into(d, &ga)
                    });
                }
                if rg(*b) {
                    let prod: Vec<f64> = g.data.iter().zip(av).map(|(x, y)| x * y).collect();
                    let gb = reduce_bcast(&prod, bc, bv.len(), |x, _| x);
                    accumulate(grads, *b, &self.nodes[b.0].value.shape, |d| {
                        add_into(d, &gb)
                    });
                }
            }
            Op::Div(a, b, bc) => {
                let bv = &self.value(*b).data;
                if rg(*a) {
                    let ga = map_bcast(&g.data, bv, bc, |gi, bj| gi / bj);
                    accumulate(grads, *a, &self.nodes[a.0].value.shape, |d| {
                        add_into(d, &ga)
                    });
                }
                if rg(*b) {
                    // d(a/b)/db = -out / b
                    let t: Vec<f64> = g.data.iter().zip(&out.data).map(|(x, o)| -x * o).collect();
                    let t = map_bcast(&t, bv, bc, |x, bj| x / bj);
                    let gb = reduce_bcast(&t, bc, bv.len(), |x, _| x);
                    accumulate(grads, *b, &self.nodes[b.0].value.shape, |d| {
                        add_into(d, &gb)
                    });
                }
            }
            Op::MatMul { a, b, transpose_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2();
                let n = out.dims2().1;
                let bc = bv.dims2().1;
                if rg(*a) {
                    // dA = G * B^T   (or G * B when the forward used B^T)
                    let bs = if *transpose_b {
                        (bc as isize, 1)
                    } else {
                        (1, bc as isize)
                    };
                    accumulate(grads, *a, &av.shape, |d| {
                        gemm(m, n, k, &g.data, (n as isize, 1), &bv.data, bs, d, 1.0)
                    });
                }
                if rg(*b) {
                    if *transpose_b {
                        // B is [n, k]: dB = G^T * A
                        accumulate(grads, *b, &bv.shape, |d| {
                            gemm(
                                n,
                                m,
                                k,
                                &g.data,
                                (1, n as isize),
                                &av.data,
                                (k as isize, 1),
                                d,
                                1.0,
                            )
                        });
                    } else {
                        // B is [k, n]: dB = A^T * G
                        accumulate(grads, *b, &bv.shape, |d| {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data,
                                (1, k as isize),
                                &g.data,
                                (n as isize, 1),
                                d,
                                1.0,
                            )
                        });
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.data[0];
                accumulate(grads, *a, &self.nodes[a.0].value.shape, |d| {
                    d.iter_mut().for_each(|x| *x += gv)
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let gv = g.data[0] / n;
                accumulate(grads, *a, &self.nodes[a.0].value.shape, |d| {
                    d.iter_mut().for_each(|x| *x += gv)
                });
            }
            Op::SumCols(a) | Op::MeanCols(a) => {
                let (_, cols) = self.value(*a).dims2();
                let div = if matches!(node.op, Op::MeanCols(_)) {
                    cols as f64
                } else {
                    1.0
                };
                accumulate(grads, *a, &self.nodes[a.0].value.shape, |d| {
                    for (r, row) in d.chunks_mut(cols.max(1)).enumerate() {
                        let gv = g.data[r] / div;
                        row.iter_mut().for_each(|x| *x += gv);
                    }
                });
            }
            Op::Silu(a) => self.unary_back(grads, *a, g, out, |x, _| silu_grad(x)),
            Op::Sigmoid(a) => self.unary_back(grads, *a, g, out, |_, y| y * (1.0 - y)),
            Op::Square(a) => self.unary_back(grads, *a, g, out, |x, _| 2.0 * x),
            Op::Abs(a) => self.unary_back(grads, *a, g, out, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Sqrt(a) => self.unary_back(grads, *a, g, out, |_, y| 0.5 / y),
            Op::Neg(a) => self.unary_back(grads, *a, g, out, |_, _| -1.0),
            Op::Scale(a, k) => {
                let k = *k;
                self.unary_back(grads, *a, g, out, move |_, _| k)
            }
            Op::Shift(a) | Op::Reshape(a) => {
                accumulate(grads, *a, &self.nodes[a.0].value.shape, |d| {
                    add_into(d, &g.data)
                });
            }
            Op::Concat { parts, axis } => {
                let (_, total_cols) = out.dims2();
                let mut row_off = 0;
                let mut col_off = 0;
                for &p in parts {
                    let (r, c) = as_2d(self.shape(p));
                    if rg(p) {
                        accumulate(grads, p, &self.nodes[p.0].value.shape, |d| {
                            if *axis == 0 {
                                add_into(d, &g.data[row_off * c..(row_off + r) * c]);
                            } else {
                                for rr in 0..r {
                                    let src = &g.data
                                        [rr * total_cols + col_off..rr * total_cols + col_off + c];
                                    add_into(&mut d[rr * c..(rr + 1) * c], src);
                                }
                            }
                        });
                    }
                    row_off += r;
                    col_off += c;
                }
            }
            Op::Slice { src, axis, start } => {
                let (_, cols) = as_2d(self.shape(*src));
                let (orows, ocols) = out.dims2();
                accumulate(grads, *src, &self.nodes[src.0].value.shape, |d| {
                    if *axis == 0 {
                        add_into(&mut d[start * cols..(start + orows) * cols], &g.data);
                    } else {
                        for r in 0..orows {
                            add_into(
                                &mut d[r * cols + start..r * cols + start + ocols],
                                &g.data[r * ocols..(r + 1) * ocols],
                            );
                        }
                    }
                });
            }
            Op::Unfold { src, patch, stride } => {
                let (rows, len) = as_2d(self.shape(*src));
                let n = (len - patch) / stride + 1;
                accumulate(grads, *src, &self.nodes[src.0].value.shape, |d| {
                    for r in 0..rows {
                        for p in 0..n {
                            let goff = (r * n + p) * patch;
                            let doff = r * len + p * stride;
                            add_into(&mut d[doff..doff + patch], &g.data[goff..goff + patch]);
                        }
                    }
                });
            }
            Op::Expand { src, width, deriv } => {
                let w = *width;
                accumulate(grads, *src, &self.nodes[src.0].value.shape, |d| {
                    for (idx, x) in d.iter_mut().enumerate() {
                        let gs = &g.data[idx * w..(idx + 1) * w];
                        let ds = &deriv[idx * w..(idx + 1) * w];
                        *x += gs.iter().zip(ds).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
        }
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        g: &Tensor,
        out: &Tensor,
        dfdx: impl Fn(f64, f64) -> f64,
    ) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let x = &self.value(a).data;
        let y = &out.data;
        accumulate(grads, a, &self.nodes[a.0].value.shape, |d| {
            for i in 0..d.len() {
                d[i] += g.data[i] * dfdx(x[i], y[i]);
            }
        });
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(&mut slot.as_mut().unwrap().data);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Elementwise `f(g[i], b[bcast(i)])` over the full (left-operand) shape.
fn map_bcast(g: &[f64], b: &[f64], bc: &Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len());
    for r in 0..bc.rows {
        for c in 0..bc.cols {
            let bj = b[r * bc.b_row_stride + c * bc.b_col_stride];
            out.push(f(g[r * bc.cols + c], bj));
        }
    }
    out
}

/// Sum a full-shape gradient down to the broadcast operand's shape.
fn reduce_bcast(g: &[f64], bc: &Bcast, nb: usize, f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    if bc.b_row_stride == bc.cols && bc.b_col_stride == 1 {
        return g.iter().enumerate().map(|(i, &x)| f(x, i)).collect();
    }
    let mut out = vec![0.0; nb];
    for r in 0..bc.rows {
        for c in 0..bc.cols {
            let j = r * bc.b_row_stride + c * bc.b_col_stride;
            out[j] += f(g[r * bc.cols + c], j);
        }
    }
    out
}

/// Identifies one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// Insertion order is the canonical order used by optimizers and by model
/// serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.id_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Record every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Tensor {
        let data = self
            .tensors
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect();
        Tensor::vector(data)
    }

    /// Bind every parameter as a reshaped slice of one flat vector laid out
    /// like [`ParamStore::flatten`].
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<Bound> {
        if tape.value(flat).numel() != self.num_values() {
            return Err(NumericsError::ShapeMismatch {
                op: "bind_flat",
                lhs: tape.value(flat).shape.clone(),
                rhs: vec![self.num_values()],
            });
        }
        let row = tape.reshape(flat, &[1, self.num_values()])?;
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let part = tape.slice(row, 1, offset, t.numel())?;
            vars.push(tape.reshape(part, &t.shape)?);
            offset += t.numel();
        }
        Ok(Bound { vars })
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Compare reverse-mode gradients of `f` at `point` with central differences
/// of step `h`. Returns the maximum over coordinates of
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.input(point.clone())?;
        let y = f(&mut tape, x)?;
        tape.backward(y)?.get_or_zeros(x)
    };
    let eval = |p: Tensor, coord: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p)?;
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFiniteEvaluation(coord))
        }
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data[i] += h;
        let mut minus = point.clone();
        minus.data[i] -= h;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let err = (analytic.data[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
