//! Closed-form gradients of the adapter forward passes with respect to
//! `A`, `B` and `M`, given `g = ∂L/∂Y`.

use crate::adapters::{dora_strict_ratio, Adapter, DoraAdapter, DoraMode, LoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub da: Tensor,
    pub db: Tensor,
    /// Absent for LoRA.
    pub dm: Option<Tensor>,
}

/// `∂L/∂(A, B, M)` for an unmerged adapter applied to `x` with base weight `w`.
pub fn adapter_gradients(x: &Tensor, w: &Tensor, ad: &Adapter, g: &Tensor) -> Result<AdapterGrads> {
    match ad {
        Adapter::Lora(l) => lora_gradients(x, w, l, g),
        Adapter::Dora(d) => dora_gradients(x, w, d, g),
        Adapter::QuantizedDora(_) => Err(Error::State("quantized adapters are inference-only".into())),
    }
}

fn check_g(x: &Tensor, k: usize, g: &Tensor) -> Result<()> {
    if g.shape() != [x.rows(), k] {
        return Err(Error::Shape(format!("output gradient {:?} for {} rows x {k}", g.shape(), x.rows())));
    }
    Ok(())
}

fn lora_gradients(x: &Tensor, w: &Tensor, ad: &LoraAdapter, g: &Tensor) -> Result<AdapterGrads> {
    ad.check_weight(w)?;
    check_g(x, w.cols(), g)?;
    let xa = x.matmul(&ad.a)?;
    Ok(AdapterGrads { da: x.t_matmul(&g.matmul_t(&ad.b)?)?, db: xa.t_matmul(g)?, dm: None })
}

/// Per column `j` of `p` with norm `n_j`, given the upstream gradient `dz`
/// of `z = p ∘ (M/n)`:
/// `dp_j = (M_j/n_j)·dz_j − p_j (p_jᵀ dz_j) M_j / n_j³`, `dM_j = p_jᵀ dz_j / n_j`.
fn normalized_columns_backward(p: &Tensor, m: &[f64], dz: &Tensor) -> Result<(Tensor, Tensor)> {
    let (rows, k) = (p.rows(), p.cols());
    let norms = p.column_l2_norms()?;
    dora_strict_ratio(m, norms.data())?;
    let mut dot = vec![0.0; k];
    for (pr, dr) in p.data().chunks(k).zip(dz.data().chunks(k)) {
        for j in 0..k {
            dot[j] += pr[j] * dr[j];
        }
    }
    let n = norms.data();
    let mut dp = Tensor::zeros(&[rows, k]);
    for (i, out) in dp.data_mut().chunks_mut(k).enumerate() {
        for j in 0..k {
            let (pv, dv) = (p.data()[i * k + j], dz.data()[i * k + j]);
            out[j] = m[j] / n[j] * dv - pv * dot[j] * m[j] / (n[j] * n[j] * n[j]);
        }
    }
    let dm = Tensor::row_vector((0..k).map(|j| dot[j] / n[j]).collect())?;
    Ok((dp, dm))
}

fn dora_gradients(x: &Tensor, w: &Tensor, ad: &DoraAdapter, g: &Tensor) -> Result<AdapterGrads> {
    if ad.is_merged() {
        return Err(Error::State("cannot differentiate a merged adapter".into()));
    }
    check_g(x, w.cols(), g)?;
    match ad.mode {
        DoraMode::WeightNorm => {
            // Y = X·U with U = V ∘ M/‖V‖col.
            let v = ad.adapted_weight(w)?;
            let du = x.t_matmul(g)?;
            let (dv, dm) = normalized_columns_backward(&v, ad.m.data(), &du)?;
            Ok(AdapterGrads { da: dv.matmul_t(&ad.b)?, db: ad.a.t_matmul(&dv)?, dm: Some(dm) })
        }
        DoraMode::ActivationNorm => {
            let p = ad.adapted_output(x, w)?;
            let (dp, dm) = normalized_columns_backward(&p, ad.m.data(), g)?;
            let xa = x.matmul(&ad.a)?;
            Ok(AdapterGrads { da: x.t_matmul(&dp.matmul_t(&ad.b)?)?, db: xa.t_matmul(&dp)?, dm: Some(dm) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_dora;
    use crate::linalg::{gaussian, RngStream};

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = RngStream::new(0);
        let w = gaussian(&mut rng, 0.0, 1.0, &[4, 3]).unwrap();
        let x = gaussian(&mut rng, 0.0, 1.0, &[5, 4]).unwrap();
        for mode in [DoraMode::WeightNorm, DoraMode::ActivationNorm] {
            let ad = Adapter::Dora(init_dora(&w, 2, mode, &mut rng).unwrap());
            let gr = adapter_gradients(&x, &w, &ad, &Tensor::zeros(&[5, 3])).unwrap();
            assert!(gr.da.max_abs() == 0.0 && gr.db.max_abs() == 0.0 && gr.dm.unwrap().max_abs() == 0.0);
        }
    }

    #[test]
    fn magnitude_gradient_unit_vector_case() {
        // V = e₁ column, X = I, dY = e₁ ⇒ dM₁ = 1.
        let w = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let ad = DoraAdapter::new(
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[1, 1]),
            Tensor::row_vector(vec![1.0]).unwrap(),
            DoraMode::WeightNorm,
        )
        .unwrap();
        let g = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let gr = adapter_gradients(&Tensor::eye(2), &w, &Adapter::Dora(ad), &g).unwrap();
        assert_eq!(gr.dm.unwrap().data(), &[1.0]);
    }

    #[test]
    fn zero_norm_column_is_degenerate() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let ad = init_dora(&w, 1, DoraMode::WeightNorm, &mut RngStream::new(1)).unwrap();
        let r = adapter_gradients(&Tensor::eye(2), &w, &Adapter::Dora(ad), &Tensor::filled(&[2, 2], 1.0));
        assert!(matches!(r, Err(Error::DegenerateNorm { column: 1 })));
    }

    #[test]
    fn merged_adapter_rejected() {
        let w = Tensor::eye(2);
        let ad = init_dora(&w, 1, DoraMode::WeightNorm, &mut RngStream::new(1)).unwrap();
        let merged = ad.merge_for_inference(&w, None).unwrap();
        assert!(adapter_gradients(&w, &w, &Adapter::Dora(merged), &w).is_err());
    }
}
