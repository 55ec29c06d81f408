//! Low-rank adapters that sit beside a crossbar weight and live in digital
//! memory: LoRA (`Y = XW + (XA)B`) and DoRA, which adds a per-output-channel
//! magnitude vector `M`.

mod dora;
mod lora;
mod quant;

use std::borrow::Cow;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

pub(crate) use dora::strict_ratio as dora_strict_ratio;
pub use dora::{init_dora, DoraAdapter, DoraMode};
pub use lora::{init_lora, LoraAdapter};
pub use quant::{dequantize_tensor, quantize_tensor, QTensor, QuantizedAdapter};

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::rram::Crossbar;

/// Anything that can present an effective `d × k` weight matrix.
pub trait WeightSource {
    fn effective_weights(&self) -> Cow<'_, Tensor>;
}

impl WeightSource for Tensor {
    fn effective_weights(&self) -> Cow<'_, Tensor> {
        Cow::Borrowed(self)
    }
}

impl WeightSource for Crossbar {
    fn effective_weights(&self) -> Cow<'_, Tensor> {
        Cow::Owned(self.read_effective_weights())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Dora,
    Lora,
}

/// Adapter attached to one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    Dora(DoraAdapter),
    QuantizedDora(QuantizedAdapter),
}

impl Adapter {
    pub fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        match self {
            Adapter::Lora(a) => a.forward(x, w),
            Adapter::Dora(a) => a.forward(x, w),
            Adapter::QuantizedDora(q) => q.dequantize()?.forward(x, w),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.num_params(),
            Adapter::Dora(a) => a.num_params(),
            Adapter::QuantizedDora(q) => q.num_params(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.rank(),
            Adapter::Dora(a) => a.rank(),
            Adapter::QuantizedDora(q) => q.rank(),
        }
    }
}

pub(crate) fn check_rank(d: usize, k: usize, r: usize) -> Result<()> {
    if r == 0 || r > d.min(k) {
        return Err(Error::param(format!("rank {r} outside 1..={} for a {d}x{k} weight", d.min(k))));
    }
    Ok(())
}

/// Share of new parameters a DoRA adapter adds to a `d × k` weight:
/// `(d·r + r·k + k) / (d·k)`.
pub fn parameter_ratio(d: usize, k: usize, r: usize) -> f64 {
    let exact = parameter_ratio_exact(d, k, r);
    *exact.numer() as f64 / *exact.denom() as f64
}

/// [`parameter_ratio`] as a reduced fraction.
pub fn parameter_ratio_exact(d: usize, k: usize, r: usize) -> Ratio<u64> {
    assert!(d > 0 && k > 0 && r > 0, "parameter_ratio needs positive d, k, r");
    let (d, k, r) = (d as u64, k as u64, r as u64);
    Ratio::new(d * r + r * k + k, d * k)
}

/// Adapter parameters over original weight parameters, summed across layers.
/// Each entry is `(d, k, adapter_params)`.
pub fn aggregate_parameter_ratio(layers: &[(usize, usize, usize)]) -> Ratio<u64> {
    let (num, den) =
        layers.iter().fold((0u64, 0u64), |(n, d), &(rows, cols, p)| (n + p as u64, d + (rows * cols) as u64));
    assert!(den > 0, "no weighted layers");
    Ratio::new(num, den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_hand_arithmetic() {
        assert_eq!(parameter_ratio(16, 16, 1), 0.1875);
        assert_eq!(parameter_ratio_exact(64, 64, 2), Ratio::new(320, 4096));
        assert!((parameter_ratio(64, 64, 2) - 0.078125).abs() < 1e-15);
    }

    #[test]
    fn ratio_shrinks_with_layer_size() {
        // d + k fixed at 64: squarer layers have larger d·k and smaller overhead.
        let g1 = parameter_ratio(8, 56, 2);
        let g2 = parameter_ratio(16, 48, 2);
        let g3 = parameter_ratio(32, 32, 2);
        assert!(g1 > g2 && g2 > g3);
        for r in 1..8 {
            assert!(parameter_ratio(20, 30, r + 1) > parameter_ratio(20, 30, r));
        }
    }

    #[test]
    fn aggregate_reduces_to_single_layer() {
        let single = aggregate_parameter_ratio(&[(16, 16, 48)]);
        assert_eq!(single, parameter_ratio_exact(16, 16, 1));
        assert_eq!(aggregate_parameter_ratio(&[(16, 16, 48), (16, 16, 48)]), single);
    }
}
