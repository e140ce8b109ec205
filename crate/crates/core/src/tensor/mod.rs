//! Minimal deterministic dense-tensor engine.
//!
//! Tensors are immutable row-major `f64` arrays with up to four axes. Image
//! data uses batch × channel × height × width. Every public operation rejects
//! non-finite results instead of propagating them.

pub(crate) mod kernels;
mod rng;

use thiserror::Error;

pub use kernels::ConvGeometry;
pub use rng::{Rng, RngState};

/// Maximum number of axes a tensor may carry.
pub const MAX_AXES: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects {expected} axes, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{0} axes requested, at most {MAX_AXES} are supported")]
    TooManyAxes(usize),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("convolution stride must be positive")]
    ZeroStride,
    #[error("convolution output is empty for input {input:?}, kernel {kernel:?}, stride {stride}, padding {padding}")]
    EmptyOutput {
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        padding: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking extent/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_AXES {
            return Err(TensorError::TooManyAxes(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        ensure_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels whose output shape is known correct.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    /// One-axis tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Two-axis tensor from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::LengthMismatch {
                    shape: vec![rows.len(), cols],
                    expected: rows.len() * cols,
                    actual: data.len() + row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.len() <= MAX_AXES, "too many axes");
        assert!(value.is_finite(), "fill value must be finite");
        Self::from_raw(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates; callers keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.len() > MAX_AXES {
            return Err(TensorError::TooManyAxes(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self::from_raw(shape.to_vec(), self.data.clone()))
    }

    /// Slice of rows `[start, end)` along the first axis.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        let Some(&outer) = self.shape.first() else {
            return Err(TensorError::Rank {
                op: "rows",
                expected: 1,
                shape: self.shape.clone(),
            });
        };
        if start > end || end > outer {
            return Err(TensorError::ShapeMismatch {
                op: "rows",
                left: self.shape.clone(),
                right: vec![start, end],
            });
        }
        let inner = self.data.len() / outer.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_raw(shape, self.data[start * inner..end * inner].to_vec()))
    }

    /// Gathers rows by index along the first axis.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let Some(&outer) = self.shape.first() else {
            return Err(TensorError::Rank {
                op: "select_rows",
                expected: 1,
                shape: self.shape.clone(),
            });
        };
        let inner = self.data.len() / outer.max(1);
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= outer {
                return Err(TensorError::ShapeMismatch {
                    op: "select_rows",
                    left: self.shape.clone(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self::from_raw(shape, data))
    }

    fn is_scalar_like(&self) -> bool {
        self.data.len() == 1
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_value(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::max)
    }

    pub fn min_value(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::min)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn check_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        unary(op, self)
    }

    pub fn abs(&self) -> Tensor {
        unary(UnaryOp::Abs, self).expect("abs of finite values is finite")
    }

    pub fn relu(&self) -> Tensor {
        unary(UnaryOp::Relu, self).expect("relu of finite values is finite")
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(UnaryOp::Sigmoid, self).expect("sigmoid of finite values is finite")
    }

    pub fn tanh(&self) -> Tensor {
        unary(UnaryOp::Tanh, self).expect("tanh of finite values is finite")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinaryOp::Mul, self, other)
    }

    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinaryOp::Max, self, other)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|v| v * factor).collect();
        ensure_finite("scale", &data)?;
        Ok(Self::from_raw(self.shape.clone(), data))
    }
}

/// Elementwise single-operand functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Abs,
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
}

/// Elementwise two-operand functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn unary(op: UnaryOp, x: &Tensor) -> Result<Tensor> {
    let f: fn(f64) -> f64 = match op {
        UnaryOp::Abs => f64::abs,
        UnaryOp::Neg => |v| -v,
        UnaryOp::Relu => |v| if v > 0.0 { v } else { 0.0 },
        UnaryOp::Sigmoid => sigmoid,
        UnaryOp::Tanh => f64::tanh,
        UnaryOp::Softplus => softplus,
        UnaryOp::Exp => f64::exp,
        UnaryOp::Log => {
            if let Some(bad) = x.data.iter().copied().find(|v| *v <= 0.0) {
                return Err(TensorError::LogDomain(bad));
            }
            f64::ln
        }
    };
    let data: Vec<f64> = x.data.iter().map(|&v| f(v)).collect();
    ensure_finite(op_name(op), &data)?;
    Ok(Tensor::from_raw(x.shape.clone(), data))
}

fn op_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Abs => "abs",
        UnaryOp::Neg => "neg",
        UnaryOp::Relu => "relu",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Tanh => "tanh",
        UnaryOp::Softplus => "softplus",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
    }
}

/// Elementwise binary op. Shapes must be equal, or one operand must hold a
/// single value, which is broadcast.
pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f: fn(f64, f64) -> f64 = match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
        BinaryOp::Max => f64::max,
    };
    let (shape, data): (Vec<usize>, Vec<f64>) = if a.shape == b.shape {
        (a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
    } else if b.is_scalar_like() {
        let y = b.data[0];
        (a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect())
    } else if a.is_scalar_like() {
        let x = a.data[0];
        (b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect())
    } else {
        return Err(TensorError::ShapeMismatch {
            op: "elementwise",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    };
    ensure_finite("elementwise", &data)?;
    Ok(Tensor::from_raw(shape, data))
}

/// Matrix product of `[m, k]` and `[k, n]`; each dot product is summed left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(TensorError::Rank {
            op: "matmul",
            expected: 2,
            shape: a.shape.clone(),
        });
    }
    if b.shape.len() != 2 {
        return Err(TensorError::Rank {
            op: "matmul",
            expected: 2,
            shape: b.shape.clone(),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, &a.data, &b.data, &mut out);
    ensure_finite("matmul", &out)?;
    Ok(Tensor::from_raw(vec![m, n], out))
}

/// Transpose of a two-axis tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(TensorError::Rank {
            op: "transpose",
            expected: 2,
            shape: a.shape.clone(),
        });
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    Ok(Tensor::from_raw(vec![c, r], kernels::transpose(r, c, &a.data)))
}

/// Output extent of a convolution along one axis, if non-empty.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Validates shapes for a convolution of `x` (N×C×H×W) with `w` (K×C×h×w).
pub fn conv_geometry(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    if x_shape.len() != 4 {
        return Err(TensorError::Rank {
            op: "conv2d",
            expected: 4,
            shape: x_shape.to_vec(),
        });
    }
    if w_shape.len() != 4 {
        return Err(TensorError::Rank {
            op: "conv2d",
            expected: 4,
            shape: w_shape.to_vec(),
        });
    }
    if x_shape[1] != w_shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: x_shape.to_vec(),
            right: w_shape.to_vec(),
        });
    }
    let empty = || TensorError::EmptyOutput {
        input: x_shape.to_vec(),
        kernel: w_shape.to_vec(),
        stride,
        padding,
    };
    let out_h = conv_output_extent(x_shape[2], w_shape[2], stride, padding).ok_or_else(empty)?;
    let out_w = conv_output_extent(x_shape[3], w_shape[3], stride, padding).ok_or_else(empty)?;
    Ok(ConvGeometry {
        batch: x_shape[0],
        in_channels: x_shape[1],
        in_h: x_shape[2],
        in_w: x_shape[3],
        out_channels: w_shape[0],
        kernel_h: w_shape[2],
        kernel_w: w_shape[3],
        stride,
        padding,
        out_h,
        out_w,
    })
}

/// Cross-correlation with zero padding plus a per-output-channel bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(&x.shape, &w.shape, stride, padding)?;
    if b.shape != [g.out_channels] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d bias",
            left: w.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let out = conv2d_raw(&g, &x.data, &w.data, Some(&b.data)).0;
    ensure_finite("conv2d", &out)?;
    Ok(Tensor::from_raw(vec![g.batch, g.out_channels, g.out_h, g.out_w], out))
}

/// Convolution on raw slices; also returns the unrolled patches for reuse
/// in the backward pass.
pub(crate) fn conv2d_raw(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let patches = kernels::im2col(g, x);
    let plen = g.patch_len();
    let wt = kernels::transpose(g.out_channels, plen, w);
    let mut pk = vec![0.0; g.positions() * g.out_channels];
    kernels::gemm(g.positions(), plen, g.out_channels, &patches, &wt, &mut pk);
    let mut out = kernels::positions_to_nchw(g, &pk);
    if let Some(bias) = bias {
        let hw = g.out_h * g.out_w;
        for (i, chunk) in out.chunks_exact_mut(hw).enumerate() {
            let bv = bias[i % g.out_channels];
            for v in chunk {
                *v += bv;
            }
        }
    }
    (out, patches)
}

/// Index of the largest value in each row of a `[rows, cols]` slice; the
/// lowest index wins ties.
pub fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    data.chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}
