use crate::error::{Error, Result};
use crate::linalg::{gaussian, RngStream, Tensor};

/// `Y = XW + (XA)B` with `A: d×r`, `B: r×k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
}

/// `A ~ N(0, 1/d)`, `B = 0`, so the adapter starts as the identity.
pub fn init_lora(d: usize, k: usize, r: usize, rng: &mut RngStream) -> Result<LoraAdapter> {
    super::check_rank(d, k, r)?;
    let a = gaussian(rng, 0.0, (1.0 / d as f64).sqrt(), &[d, r])?;
    Ok(LoraAdapter { a, b: Tensor::zeros(&[r, k]) })
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let (d, r) = (a.rows(), a.cols());
        if !a.is_matrix() || !b.is_matrix() || b.rows() != r {
            return Err(Error::shape(format!("lora A {:?} / B {:?}", a.shape(), b.shape())));
        }
        super::check_rank(d, b.cols(), r)?;
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
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

    pub fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.check_weight(w)?;
        let mut y = x.matmul(w)?;
        y.add_assign(&x.matmul(&self.a)?.matmul(&self.b)?)?;
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        gaussian(&mut RngStream::new(seed), 0.0, 1.0, shape).unwrap()
    }

    #[test]
    fn identity_when_b_or_a_zero() {
        let w = rand(&[5, 4], 1);
        let x = rand(&[3, 5], 2);
        let ad = init_lora(5, 4, 2, &mut RngStream::new(3)).unwrap();
        assert_eq!(ad.forward(&x, &w).unwrap(), x.matmul(&w).unwrap());
        let ad = LoraAdapter::new(Tensor::zeros(&[5, 2]), rand(&[2, 4], 4)).unwrap();
        assert_eq!(ad.forward(&x, &w).unwrap(), x.matmul(&w).unwrap());
    }

    #[test]
    fn matches_composition_oracle() {
        let w = rand(&[5, 4], 1);
        let x = rand(&[3, 5], 2);
        let ad = LoraAdapter::new(rand(&[5, 2], 3), rand(&[2, 4], 4)).unwrap();
        let oracle = x.matmul(&w.add(&ad.a.matmul(&ad.b).unwrap()).unwrap()).unwrap();
        assert!(ad.forward(&x, &w).unwrap().max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn shape_and_rank_errors() {
        assert!(init_lora(3, 4, 4, &mut RngStream::new(0)).is_err());
        assert!(init_lora(3, 4, 0, &mut RngStream::new(0)).is_err());
        let ad = init_lora(5, 4, 2, &mut RngStream::new(0)).unwrap();
        assert!(ad.forward(&rand(&[3, 5], 1), &rand(&[4, 4], 2)).is_err());
    }
}
