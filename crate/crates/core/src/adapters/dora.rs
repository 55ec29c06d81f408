use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian, RngStream, Tensor};

/// Where the column normalization is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoraMode {
    /// Normalize the columns of `V = W + AB`:
    /// `Y = X · (V ∘ M/‖V‖col)`. Input-independent and exact identity at init.
    #[default]
    WeightNorm,
    /// Normalize the adapted output over the batch:
    /// `Y = M ∘ Adapt / ‖Adapt‖col` with `Adapt = XW + (XA)B`.
    ActivationNorm,
}

/// Weight-decomposed adapter: low-rank direction update `A·B` plus a
/// magnitude vector `M` (one entry per output channel).
#[derive(Debug, Clone, PartialEq)]
pub struct DoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub m: Tensor,
    pub mode: DoraMode,
    /// Per-channel output scale that replaces `M / ‖·‖` once merged.
    pub merged_scale: Option<Tensor>,
}

/// `A ~ N(0, 1/d)`, `B = 0`, `M = ‖w_r‖col`.
pub fn init_dora(w_r: &Tensor, r: usize, mode: DoraMode, rng: &mut RngStream) -> Result<DoraAdapter> {
    if !w_r.is_matrix() {
        return Err(Error::shape(format!("weight must be a matrix, got {:?}", w_r.shape())));
    }
    let (d, k) = (w_r.rows(), w_r.cols());
    super::check_rank(d, k, r)?;
    let a = gaussian(rng, 0.0, (1.0 / d as f64).sqrt(), &[d, r])?;
    Ok(DoraAdapter { a, b: Tensor::zeros(&[r, k]), m: w_r.column_l2_norms()?, mode, merged_scale: None })
}

/// `M_j / n_j`, with zero-norm columns mapped to zero (their output is zero anyway).
fn safe_ratio(m: &[f64], norms: &[f64]) -> Vec<f64> {
    m.iter().zip(norms).map(|(&m, &n)| if n > 0.0 { m / n } else { 0.0 }).collect()
}

pub(crate) fn strict_ratio(m: &[f64], norms: &[f64]) -> Result<Vec<f64>> {
    m.iter()
        .zip(norms)
        .enumerate()
        .map(|(j, (&m, &n))| if n > 0.0 { Ok(m / n) } else { Err(Error::DegenerateNorm { column: j }) })
        .collect()
}

impl DoraAdapter {
    pub fn new(a: Tensor, b: Tensor, m: Tensor, mode: DoraMode) -> Result<Self> {
        if !a.is_matrix() || !b.is_matrix() || b.rows() != a.cols() || m.shape() != [1, b.cols()] {
            return Err(Error::shape(format!("dora A {:?} / B {:?} / M {:?}", a.shape(), b.shape(), m.shape())));
        }
        super::check_rank(a.rows(), b.cols(), a.cols())?;
        Ok(Self { a, b, m, mode, merged_scale: None })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn is_merged(&self) -> bool {
        self.merged_scale.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len() + self.m.len()
    }

    pub(crate) fn check_weight(&self, w: &Tensor) -> Result<()> {
        if w.shape() != [self.a.rows(), self.b.cols()] {
            return Err(Error::shape(format!(
                "adapter expects a {}x{} weight, got {:?}",
                self.a.rows(),
                self.b.cols(),
                w.shape()
            )));
        }
        Ok(())
    }

    /// `V = W + A·B`.
    pub fn adapted_weight(&self, w: &Tensor) -> Result<Tensor> {
        self.check_weight(w)?;
        w.add(&self.a.matmul(&self.b)?)
    }

    /// `XW + (XA)B`.
    pub fn adapted_output(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.check_weight(w)?;
        let mut y = x.matmul(w)?;
        y.add_assign(&x.matmul(&self.a)?.matmul(&self.b)?)?;
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        if let Some(scale) = &self.merged_scale {
            return self.adapted_output(x, w)?.scale_columns(scale.data());
        }
        match self.mode {
            DoraMode::WeightNorm => {
                let v = self.adapted_weight(w)?;
                let s = safe_ratio(self.m.data(), v.column_l2_norms()?.data());
                x.matmul(&v.scale_columns(&s)?)
            }
            DoraMode::ActivationNorm => {
                let p = self.adapted_output(x, w)?;
                let s = strict_ratio(self.m.data(), p.column_l2_norms()?.data())?;
                p.scale_columns(&s)
            }
        }
    }

    /// Folds `M / ‖·‖` into a single per-channel scale. Activation-norm mode
    /// freezes the norms observed on `calib_x`.
    pub fn merge_for_inference(&self, w: &Tensor, calib_x: Option<&Tensor>) -> Result<DoraAdapter> {
        if self.is_merged() {
            return Err(Error::State("adapter is already merged".into()));
        }
        let norms = match self.mode {
            DoraMode::WeightNorm => self.adapted_weight(w)?.column_l2_norms()?,
            DoraMode::ActivationNorm => {
                let x = calib_x.ok_or_else(|| Error::param("activation-norm merge needs the calibration batch"))?;
                self.adapted_output(x, w)?.column_l2_norms()?
            }
        };
        let scale = strict_ratio(self.m.data(), norms.data())?;
        let mut merged = self.clone();
        merged.merged_scale = Some(Tensor::row_vector(scale)?);
        Ok(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        gaussian(&mut RngStream::new(seed), 0.0, 1.0, shape).unwrap()
    }

    #[test]
    fn init_magnitude_is_column_norm() {
        let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let ad = init_dora(&w, 1, DoraMode::WeightNorm, &mut RngStream::new(0)).unwrap();
        assert_eq!(ad.m.data(), &[5.0, 0.0]);
        assert!(ad.a.matmul(&ad.b).unwrap().data().iter().all(|&v| v == 0.0));
        let again = init_dora(&w, 1, DoraMode::WeightNorm, &mut RngStream::new(0)).unwrap();
        assert_eq!(ad.a, again.a);
        // Zero column stays zero through the forward pass.
        let x = rand(&[3, 2], 1);
        assert_eq!(ad.forward(&x, &w).unwrap(), x.matmul(&w).unwrap());
    }

    #[test]
    fn weight_norm_identity_at_init() {
        let w = rand(&[7, 5], 2);
        let x = rand(&[4, 7], 3);
        let ad = init_dora(&w, 3, DoraMode::WeightNorm, &mut RngStream::new(4)).unwrap();
        assert_eq!(ad.forward(&x, &w).unwrap(), x.matmul(&w).unwrap());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = rand(&[4, 3], 5);
        let ad = init_dora(&w, 2, DoraMode::WeightNorm, &mut RngStream::new(6)).unwrap();
        assert_eq!(ad.forward(&Tensor::zeros(&[2, 4]), &w).unwrap(), Tensor::zeros(&[2, 3]));
        // Activation mode divides by a zero column norm.
        let mut act = ad.clone();
        act.mode = DoraMode::ActivationNorm;
        assert!(matches!(act.forward(&Tensor::zeros(&[2, 4]), &w), Err(Error::DegenerateNorm { .. })));
    }

    #[test]
    fn weight_norm_matches_explicit_composition() {
        let w = rand(&[6, 5], 7);
        let x = rand(&[3, 6], 8);
        let ad =
            DoraAdapter::new(rand(&[6, 2], 9), rand(&[2, 5], 10), rand(&[1, 5], 11), DoraMode::WeightNorm).unwrap();
        // Build V, normalize each column explicitly, scale by M, multiply.
        let mut u = Tensor::zeros(&[6, 5]);
        for j in 0..5 {
            let col: Vec<f64> =
                (0..6).map(|i| w.at(i, j) + (0..2).map(|t| ad.a.at(i, t) * ad.b.at(t, j)).sum::<f64>()).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (i, v) in col.iter().enumerate() {
                u.set(i, j, ad.m.data()[j] * v / norm);
            }
        }
        let oracle = x.matmul(&u).unwrap();
        assert!(ad.forward(&x, &w).unwrap().max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn activation_norm_normalizes_over_batch() {
        let w = rand(&[4, 3], 12);
        let x = rand(&[5, 4], 13);
        let ad = DoraAdapter::new(rand(&[4, 2], 14), rand(&[2, 3], 15), rand(&[1, 3], 16), DoraMode::ActivationNorm)
            .unwrap();
        let y = ad.forward(&x, &w).unwrap();
        let norms = y.column_l2_norms().unwrap();
        for (n, m) in norms.data().iter().zip(ad.m.data()) {
            assert!((n - m.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_equivalence_both_modes() {
        let w = rand(&[6, 4], 17);
        let x = rand(&[8, 6], 18);
        for mode in [DoraMode::WeightNorm, DoraMode::ActivationNorm] {
            let ad = DoraAdapter::new(rand(&[6, 2], 19), rand(&[2, 4], 20), rand(&[1, 4], 21), mode).unwrap();
            let before = ad.forward(&x, &w).unwrap();
            let merged = ad.merge_for_inference(&w, Some(&x)).unwrap();
            assert!(merged.forward(&x, &w).unwrap().max_abs_diff(&before) <= 1e-10);
            assert!(matches!(merged.merge_for_inference(&w, Some(&x)), Err(Error::State(_))));
        }
    }

    #[test]
    fn fresh_merge_is_unit_scale() {
        let w = rand(&[5, 3], 22);
        let ad = init_dora(&w, 2, DoraMode::WeightNorm, &mut RngStream::new(23)).unwrap();
        let merged = ad.merge_for_inference(&w, None).unwrap();
        assert!(merged.merged_scale.as_ref().unwrap().data().iter().all(|&s| s == 1.0));
        let x = rand(&[2, 5], 24);
        assert_eq!(merged.forward(&x, &w).unwrap(), x.matmul(&w).unwrap());
    }

    #[test]
    fn merge_errors() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let ad = init_dora(&w, 1, DoraMode::WeightNorm, &mut RngStream::new(0)).unwrap();
        assert!(matches!(ad.merge_for_inference(&w, None), Err(Error::DegenerateNorm { column: 1 })));
        let mut act = init_dora(&rand(&[3, 3], 1), 1, DoraMode::ActivationNorm, &mut RngStream::new(0)).unwrap();
        act.mode = DoraMode::ActivationNorm;
        assert!(act.merge_for_inference(&rand(&[3, 3], 1), None).is_err());
    }
}
