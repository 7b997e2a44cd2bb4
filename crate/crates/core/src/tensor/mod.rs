//! Dense row-major tensors with explicit, hand-written backward kernels.
//!
//! There is no autograd tape: every operation that participates in training
//! comes as a `forward` / `*_backward` pair, and the training engine decides
//! what to save and what to recompute. All math runs in `f64`; the `F32` and
//! `F8E4M3` dtypes are emulated by rounding values onto the corresponding
//! representable set while keeping `f64` storage.

pub mod f8;
mod init;
mod ops;

pub use init::{init_param, init_param_region, token_stream_u64, ParamRng};
pub use ops::*;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element precision of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    /// 8-bit float (1 sign, 4 exponent, 3 mantissa bits), software emulated.
    F8E4M3,
}

impl DType {
    /// Storage size used when a tensor of this dtype is serialized or its
    /// communication volume is accounted.
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F8E4M3 => 1,
        }
    }

    /// Round a value onto this dtype's representable set.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::F64 => v,
            DType::F32 => v as f32 as f64,
            DType::F8E4M3 => f8::decode(f8::encode(v)),
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dtype mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DTypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadBuffer {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-D value: row-major contiguous `f64` buffer plus a shape and dtype tag.
///
/// Extents of zero are permitted (they show up as empty trailing shards of
/// unevenly sharded tensors); `numel` is then zero and the buffer is empty.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}<{:?}>", self.shape, self.dtype)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, ..]", &self.data[..8])
        }
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: vec![1.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            dtype: DType::F64,
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadBuffer {
                op: "from_vec",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data,
        })
    }

    pub fn from_vec_dtype(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Tensor> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.dtype = dtype;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bytes this tensor occupies when shipped or persisted at its dtype.
    pub fn byte_size(&self) -> u64 {
        (self.numel() * self.dtype.size_bytes()) as u64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret under a new shape with the same number of elements.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::BadBuffer {
                op: "reshape",
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        Ok(t)
    }

    /// Round all elements onto `dtype`'s representable set.
    pub fn cast(&self, dtype: DType) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data: self.data.iter().map(|&v| dtype.quantize(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Slice along `dim`, materializing a contiguous copy of `[start, end)`.
    pub fn narrow(&self, dim: usize, start: usize, end: usize) -> Result<Tensor> {
        if dim >= self.shape.len() || start > end || end > self.shape[dim] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "range {start}..{end} on dim {dim} of shape {:?}",
                    self.shape
                ),
            });
        }
        let outer: usize = self.shape[..dim].iter().product();
        let inner: usize = self.shape[dim + 1..].iter().product();
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        let stride = self.shape[dim] * inner;
        for o in 0..outer {
            let base = o * stride + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[dim] = len;
        let mut t = Tensor::from_vec(&shape, out)?;
        t.dtype = self.dtype;
        Ok(t)
    }

    /// Concatenate tensors along `dim`. Zero-extent inputs are skipped.
    pub fn cat(parts: &[Tensor], dim: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "cat",
            msg: "empty input list".into(),
        })?;
        let mut shape = first.shape.clone();
        if dim >= shape.len() {
            return Err(TensorError::Invalid {
                op: "cat",
                msg: format!("dim {dim} out of range for shape {shape:?}"),
            });
        }
        let mut total = 0usize;
        for p in parts {
            if p.shape.len() != shape.len()
                || p.shape
                    .iter()
                    .zip(&shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != dim && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "cat",
                    lhs: shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[dim];
        }
        shape[dim] = total;
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for p in parts {
            let len = p.shape[dim];
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                let src = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&p.data[src..src + len * inner]);
            }
            offset += len;
        }
        let mut t = Tensor::from_vec(&shape, data)?;
        t.dtype = first.dtype;
        Ok(t)
    }

    /// Split along `dim` into chunks of the given lengths (must sum to the extent).
    pub fn split(&self, dim: usize, lengths: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = lengths.iter().sum();
        if dim >= self.shape.len() || total != self.shape[dim] {
            return Err(TensorError::Invalid {
                op: "split",
                msg: format!("lengths {lengths:?} on dim {dim} of {:?}", self.shape),
            });
        }
        let mut out = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            out.push(self.narrow(dim, start, start + len)?);
            start += len;
        }
        Ok(out)
    }
}

/// Value/gradient pair for a trainable parameter.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl GradPair {
    pub fn new(value: Tensor) -> GradPair {
        GradPair { value, grad: None }
    }

    /// Add `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        debug_assert_eq!(g.shape(), self.value.shape());
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }
}

pub(crate) fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn narrow_and_cat_roundtrip() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(b.data(), &[3.0, 6.0]);
        let back = Tensor::cat(&[a, b], 1).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn empty_extent_is_allowed() {
        let t = Tensor::zeros(&[0, 4]);
        assert_eq!(t.numel(), 0);
        let full = Tensor::ones(&[2, 4]);
        let joined = Tensor::cat(&[t, full.clone()], 0).unwrap();
        assert_eq!(joined.data(), full.data());
    }

    #[test]
    fn split_matches_narrow() {
        let t = Tensor::from_vec(&[5, 2], (0..10).map(|v| v as f64).collect()).unwrap();
        let parts = t.split(0, &[2, 2, 1, 0]).unwrap();
        assert_eq!(parts[0].shape(), &[2, 2]);
        assert_eq!(parts[2].data(), &[8.0, 9.0]);
        assert_eq!(parts[3].numel(), 0);
    }

    #[test]
    fn cast_f32_rounds() {
        let t = Tensor::from_vec(&[1], vec![0.1]).unwrap();
        let c = t.cast(DType::F32);
        assert_eq!(c.data()[0], 0.1f32 as f64);
        assert_ne!(c.data()[0], 0.1f64);
    }
}
