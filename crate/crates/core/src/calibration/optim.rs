use super::config::OptimizerKind;

/// First-order optimizer state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = vec![0.0; param.len()];
                    self.v = vec![0.0; param.len()];
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0, -2.0];
        Optimizer::new(OptimizerKind::Sgd, 0.5).step(&mut p, &[2.0, -2.0]);
        assert_eq!(p, vec![0.0, -1.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias correction makes the first step ±lr regardless of |g|.
        let mut p = vec![0.0, 0.0];
        Optimizer::new(OptimizerKind::default(), 1e-3).step(&mut p, &[5.0, -1e-3]);
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0];
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.05);
        for _ in 0..2000 {
            let g = [2.0 * p[0]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2, "{}", p[0]);
    }
}
