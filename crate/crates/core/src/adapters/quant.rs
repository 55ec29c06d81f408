//! Symmetric per-tensor int8 quantization for adapter storage at inference.

use super::{DoraAdapter, DoraMode};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

/// int8 codes plus one scale: `value ≈ code · scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    pub scale: f64,
}

/// `scale = max|t| / 127` (1 for an all-zero tensor), codes rounded half-to-even.
pub fn quantize_tensor(t: &Tensor) -> Result<QTensor> {
    if !t.is_finite() {
        return Err(Error::param("cannot quantize non-finite values"));
    }
    let max = t.max_abs();
    let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
    let codes = t.data().iter().map(|&v| (v / scale).round_ties_even().clamp(-127.0, 127.0) as i8).collect();
    Ok(QTensor { shape: t.shape().to_vec(), codes, scale })
}

pub fn dequantize_tensor(q: &QTensor) -> Result<Tensor> {
    Tensor::new(q.shape.clone(), q.codes.iter().map(|&c| f64::from(c) * q.scale).collect())
}

/// DoRA adapter with int8 `A`, `B`, `M` (and merged scale, when present).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedAdapter {
    pub a: QTensor,
    pub b: QTensor,
    pub m: QTensor,
    pub merged_scale: Option<QTensor>,
    pub mode: DoraMode,
}

impl QuantizedAdapter {
    pub fn quantize(ad: &DoraAdapter) -> Result<Self> {
        Ok(Self {
            a: quantize_tensor(&ad.a)?,
            b: quantize_tensor(&ad.b)?,
            m: quantize_tensor(&ad.m)?,
            merged_scale: ad.merged_scale.as_ref().map(quantize_tensor).transpose()?,
            mode: ad.mode,
        })
    }

    pub fn dequantize(&self) -> Result<DoraAdapter> {
        let mut ad = DoraAdapter::new(
            dequantize_tensor(&self.a)?,
            dequantize_tensor(&self.b)?,
            dequantize_tensor(&self.m)?,
            self.mode,
        )?;
        ad.merged_scale = self.merged_scale.as_ref().map(dequantize_tensor).transpose()?;
        Ok(ad)
    }

    pub fn rank(&self) -> usize {
        self.a.shape[1]
    }

    pub fn num_params(&self) -> usize {
        self.a.codes.len() + self.b.codes.len() + self.m.codes.len()
    }
}
