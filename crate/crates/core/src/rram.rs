//! Differential RRAM crossbar: programming with write-and-verify, Gaussian
//! conductance drift, effective-weight readback and write accounting.
//!
//! A weight `w` is encoded one-sided: `w ≥ 0` goes to the positive device at
//! `w · g_max / w_max`, a negative weight to the negative device, and the
//! partner device is left at zero. Readback is `(G⁺ − G⁻) · w_max / g_max`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{RngStream, Tensor};

/// Default full-scale conductance in µS.
pub const DEFAULT_G_MAX: f64 = 100.0;

/// RRAM write endurance in cycles.
pub const DEFAULT_RRAM_ENDURANCE: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[non_exhaustive]
pub enum Encoding {
    #[default]
    OneSided,
}

/// Relative conductance drift: each device with target `G_t > 0` moves by
/// `N(mu_rel · G_t, (rho · G_t)²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub rho: f64,
    #[serde(default)]
    pub mu_rel: f64,
    pub seed: u64,
}

impl DriftSpec {
    pub fn new(rho: f64, seed: u64) -> Self {
        Self { rho, mu_rel: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() || !self.mu_rel.is_finite() {
            return Err(Error::param(format!("drift rho={} mu_rel={}", self.rho, self.mu_rel)));
        }
        Ok(())
    }
}

/// Write-and-verify programming parameters (µS).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgramSpec {
    pub sigma_prog: f64,
    pub verify_tol: f64,
    pub max_attempts: u32,
}

impl Default for ProgramSpec {
    fn default() -> Self {
        Self { sigma_prog: 0.0, verify_tol: 1.0, max_attempts: 16 }
    }
}

impl ProgramSpec {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_prog >= 0.0) || !self.sigma_prog.is_finite() {
            return Err(Error::param(format!("sigma_prog = {}", self.sigma_prog)));
        }
        if self.sigma_prog > 0.0 && !(self.verify_tol > 0.0) {
            return Err(Error::param("verify_tol must be positive when sigma_prog > 0"));
        }
        if self.max_attempts == 0 {
            return Err(Error::param("max_attempts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteStats {
    pub total_writes: u64,
    pub max_cell_writes: u64,
    pub cells_at_limit: u64,
}

/// A `d × k` array of differential device pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossbar {
    g_plus: Tensor,
    g_minus: Tensor,
    target_plus: Tensor,
    target_minus: Tensor,
    g_max: f64,
    w_max: f64,
    write_counts: Vec<u64>,
    encoding: Encoding,
}

impl Crossbar {
    /// Maps `w` onto a fresh crossbar; every cell pair costs at least one write.
    pub fn program(w: &Tensor, g_max: f64, prog: &ProgramSpec, rng: &mut RngStream) -> Result<Self> {
        if !w.is_matrix() {
            return Err(Error::shape(format!("crossbar weights must be a matrix, got {:?}", w.shape())));
        }
        let shape = w.shape().to_vec();
        let n = w.len();
        let mut cb = Self {
            g_plus: Tensor::zeros(&shape),
            g_minus: Tensor::zeros(&shape),
            target_plus: Tensor::zeros(&shape),
            target_minus: Tensor::zeros(&shape),
            g_max,
            w_max: 1.0,
            write_counts: vec![0; n],
            encoding: Encoding::OneSided,
        };
        cb.reprogram(w, prog, rng)?;
        Ok(cb)
    }

    /// Rewrites every cell with new weights. `w_max` is recomputed from `w`.
    pub fn reprogram(&mut self, w: &Tensor, prog: &ProgramSpec, rng: &mut RngStream) -> Result<()> {
        if w.shape() != self.g_plus.shape() {
            return Err(Error::shape(format!(
                "reprogram: crossbar is {:?}, weights {:?}",
                self.g_plus.shape(),
                w.shape()
            )));
        }
        if !w.is_finite() {
            return Err(Error::param("non-finite weights"));
        }
        if !(self.g_max > 0.0) || !self.g_max.is_finite() {
            return Err(Error::param(format!("g_max = {}", self.g_max)));
        }
        prog.validate()?;

        let max = w.max_abs();
        self.w_max = if max > 0.0 { max } else { 1.0 };
        let gain = self.g_max / self.w_max;
        for (i, &v) in w.data().iter().enumerate() {
            let (tp, tm) = if v >= 0.0 { (v * gain, 0.0) } else { (0.0, -v * gain) };
            self.target_plus.data_mut()[i] = tp;
            self.target_minus.data_mut()[i] = tm;
            let (gp, gm, attempts) = self.write_verify(tp, tm, prog, rng);
            self.g_plus.data_mut()[i] = gp;
            self.g_minus.data_mut()[i] = gm;
            self.write_counts[i] += attempts;
        }
        Ok(())
    }

    fn write_verify(&self, tp: f64, tm: f64, prog: &ProgramSpec, rng: &mut RngStream) -> (f64, f64, u64) {
        if prog.sigma_prog == 0.0 {
            return (tp, tm, 1);
        }
        let mut attempts = 0;
        loop {
            attempts += 1;
            let gp = (tp + prog.sigma_prog * rng.standard_normal()).clamp(0.0, self.g_max);
            let gm = (tm + prog.sigma_prog * rng.standard_normal()).clamp(0.0, self.g_max);
            let ok = (gp - tp).abs() <= prog.verify_tol && (gm - tm).abs() <= prog.verify_tol;
            if ok || attempts >= prog.max_attempts as u64 {
                return (gp, gm, attempts);
            }
        }
    }

    /// One relaxation event. The spread is set by each device's target
    /// conductance; devices targeted at zero do not move. Not a write.
    pub fn apply_drift(&mut self, spec: &DriftSpec, rng: &mut RngStream) -> Result<()> {
        spec.validate()?;
        if spec.rho == 0.0 && spec.mu_rel == 0.0 {
            return Ok(());
        }
        let g_max = self.g_max;
        let drift = |g: &mut Tensor, t: &Tensor, rng: &mut RngStream| {
            for (gv, &tv) in g.data_mut().iter_mut().zip(t.data()) {
                if tv > 0.0 {
                    let delta = spec.mu_rel * tv + spec.rho * tv * rng.standard_normal();
                    *gv = (*gv + delta).clamp(0.0, g_max);
                }
            }
        };
        drift(&mut self.g_plus, &self.target_plus, rng);
        drift(&mut self.g_minus, &self.target_minus, rng);
        Ok(())
    }

    /// `W_r = (G⁺ − G⁻) · w_max / g_max`.
    pub fn read_effective_weights(&self) -> Tensor {
        let s = self.w_max / self.g_max;
        let mut w = self.g_plus.sub(&self.g_minus).expect("paired conductances share a shape");
        for v in w.data_mut() {
            *v *= s;
        }
        w
    }

    /// Analog matrix-vector product with ideal periphery: `x · W_r`.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.read_effective_weights())
    }

    pub fn write_stats(&self, endurance: u64) -> WriteStats {
        WriteStats {
            total_writes: self.write_counts.iter().sum(),
            max_cell_writes: self.write_counts.iter().copied().max().unwrap_or(0),
            cells_at_limit: self.write_counts.iter().filter(|&&c| c >= endurance).count() as u64,
        }
    }

    pub fn rows(&self) -> usize {
        self.g_plus.rows()
    }

    pub fn cols(&self) -> usize {
        self.g_plus.cols()
    }

    pub fn g_plus(&self) -> &Tensor {
        &self.g_plus
    }

    pub fn g_minus(&self) -> &Tensor {
        &self.g_minus
    }

    pub fn target_plus(&self) -> &Tensor {
        &self.target_plus
    }

    pub fn target_minus(&self) -> &Tensor {
        &self.target_minus
    }

    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn write_counts(&self) -> &[u64] {
        &self.write_counts
    }

    /// Reassembles a crossbar from stored state, checking its invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        g_plus: Tensor,
        g_minus: Tensor,
        target_plus: Tensor,
        target_minus: Tensor,
        g_max: f64,
        w_max: f64,
        write_counts: Vec<u64>,
    ) -> Result<Self> {
        let shape = g_plus.shape().to_vec();
        if shape.len() != 2
            || [&g_minus, &target_plus, &target_minus].iter().any(|t| t.shape() != shape.as_slice())
            || write_counts.len() != g_plus.len()
        {
            return Err(Error::shape("crossbar parts disagree in shape"));
        }
        if !(g_max > 0.0) || !(w_max > 0.0) {
            return Err(Error::param(format!("g_max={g_max}, w_max={w_max}")));
        }
        let in_range = |t: &Tensor| t.data().iter().all(|&g| (0.0..=g_max).contains(&g));
        if ![&g_plus, &g_minus, &target_plus, &target_minus].iter().all(|t| in_range(t)) {
            return Err(Error::param("conductance outside [0, g_max]"));
        }
        if target_plus.data().iter().zip(target_minus.data()).any(|(&p, &m)| p > 0.0 && m > 0.0) {
            return Err(Error::param("both devices of a pair have nonzero targets"));
        }
        Ok(Self {
            g_plus,
            g_minus,
            target_plus,
            target_minus,
            g_max,
            w_max,
            write_counts,
            encoding: Encoding::OneSided,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian;

    fn random_w(seed: u64, shape: &[usize]) -> Tensor {
        gaussian(&mut RngStream::new(seed), 0.0, 1.0, shape).unwrap()
    }

    #[test]
    fn zero_weights_program_to_zero() {
        let cb =
            Crossbar::program(&Tensor::zeros(&[3, 2]), DEFAULT_G_MAX, &ProgramSpec::ideal(), &mut RngStream::new(0))
                .unwrap();
        assert_eq!(cb.g_plus(), &Tensor::zeros(&[3, 2]));
        assert_eq!(cb.g_minus(), &Tensor::zeros(&[3, 2]));
        assert!(cb.write_counts().iter().all(|&c| c == 1));
        assert_eq!(cb.w_max(), 1.0);
        assert_eq!(cb.read_effective_weights(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn scale_endpoint() {
        let w = Tensor::from_rows(&[vec![0.7]]).unwrap();
        let cb = Crossbar::program(&w, 100.0, &ProgramSpec::ideal(), &mut RngStream::new(0)).unwrap();
        assert_eq!(cb.g_plus().data(), &[100.0]);
        assert_eq!(cb.g_minus().data(), &[0.0]);
        assert_eq!(cb.read_effective_weights().data(), &[0.7]);
    }

    #[test]
    fn negative_weights_use_minus_device() {
        let w = Tensor::from_rows(&[vec![-2.0, 1.0]]).unwrap();
        let cb = Crossbar::program(&w, 100.0, &ProgramSpec::ideal(), &mut RngStream::new(0)).unwrap();
        assert_eq!(cb.g_plus().data(), &[0.0, 50.0]);
        assert_eq!(cb.g_minus().data(), &[100.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Tensor::zeros(&[2, 2]);
        let mut rng = RngStream::new(0);
        assert!(matches!(Crossbar::program(&w, 0.0, &ProgramSpec::ideal(), &mut rng), Err(Error::Parameter(_))));
        let noisy = ProgramSpec { sigma_prog: 1.0, verify_tol: 0.0, max_attempts: 3 };
        assert!(Crossbar::program(&w, 100.0, &noisy, &mut rng).is_err());
    }

    #[test]
    fn round_trip_without_drift() {
        let w = random_w(1, &[4, 4]);
        let cb = Crossbar::program(&w, DEFAULT_G_MAX, &ProgramSpec::ideal(), &mut RngStream::new(0)).unwrap();
        assert!(cb.read_effective_weights().max_abs_diff(&w) <= 1e-12);
        for (p, m) in cb.target_plus().data().iter().zip(cb.target_minus().data()) {
            assert!(*p == 0.0 || *m == 0.0);
        }
    }

    #[test]
    fn zero_drift_is_identity() {
        let w = random_w(2, &[5, 3]);
        let mut cb = Crossbar::program(&w, DEFAULT_G_MAX, &ProgramSpec::ideal(), &mut RngStream::new(0)).unwrap();
        let before = cb.clone();
        cb.apply_drift(&DriftSpec::new(0.0, 1), &mut RngStream::new(1)).unwrap();
        assert_eq!(cb, before);
    }

    #[test]
    fn drift_std_matches_rho_times_target() {
        // One cell pinned at w_max so the rest sit at G_t = 50 µS.
        let n = 100_001;
        let mut data = vec![0.5; n];
        data[0] = 1.0;
        let w = Tensor::new(vec![1, n], data).unwrap();
        let mut cb = Crossbar::program(&w, 100.0, &ProgramSpec::ideal(), &mut RngStream::new(0)).unwrap();
        cb.apply_drift(&DriftSpec::new(0.2, 3), &mut RngStream::new(3)).unwrap();
        let dev: Vec<f64> = cb.g_plus().data()[1..].iter().map(|g| g - 50.0).collect();
        let m = dev.iter().sum::<f64>() / dev.len() as f64;
        let sd = (dev.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (dev.len() - 1) as f64).sqrt();
        assert!((sd - 10.0).abs() <= 0.2, "std {sd}");
        assert!(cb.g_minus().data().iter().all(|&g| g == 0.0));
        assert!(cb.write_counts().iter().all(|&c| c == 1));
    }

    #[test]
    fn drift_clips_to_device_range() {
        let w = random_w(4, &[20, 20]);
        let mut cb = Crossbar::program(&w, 100.0, &ProgramSpec::ideal(), &mut RngStream::new(0)).unwrap();
        cb.apply_drift(&DriftSpec { rho: 2.0, mu_rel: 0.5, seed: 0 }, &mut RngStream::new(9)).unwrap();
        for g in cb.g_plus().data().iter().chain(cb.g_minus().data()) {
            assert!((0.0..=100.0).contains(g));
        }
    }

    #[test]
    fn drifted_readback_relative_deviation() {
        // Keep |w| ≤ w_max/2 (plus one pinned max cell) so clipping at g_max is negligible.
        let mut rel = Vec::new();
        for seed in 0..20 {
            let mut w = gaussian(&mut RngStream::new(100 + seed), 0.0, 0.15, &[16, 16]).unwrap();
            for v in w.data_mut() {
                *v = v.clamp(-0.5, 0.5);
            }
            w.set(0, 0, 1.0);
            let mut cb = Crossbar::program(&w, 100.0, &ProgramSpec::ideal(), &mut RngStream::new(0)).unwrap();
            cb.apply_drift(&DriftSpec::new(0.2, seed), &mut RngStream::new(seed)).unwrap();
            let wr = cb.read_effective_weights();
            for (i, (&a, &b)) in w.data().iter().zip(wr.data()).enumerate() {
                if i > 0 && a.abs() > 1e-3 {
                    rel.push((b - a) / a.abs());
                }
            }
        }
        let m = rel.iter().sum::<f64>() / rel.len() as f64;
        let sd = (rel.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (rel.len() - 1) as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.01, "relative std {sd}");
        assert!(m.abs() < 0.01);
    }

    #[test]
    fn crossbar_matmul_matches_readback() {
        let w = random_w(5, &[6, 4]);
        let mut cb = Crossbar::program(&w, 100.0, &ProgramSpec::ideal(), &mut RngStream::new(0)).unwrap();
        cb.apply_drift(&DriftSpec::new(0.1, 1), &mut RngStream::new(1)).unwrap();
        let wr = cb.read_effective_weights();
        assert!(cb.matmul(&Tensor::eye(6)).unwrap().max_abs_diff(&wr) <= 1e-12);
        assert_eq!(cb.matmul(&Tensor::zeros(&[3, 6])).unwrap(), Tensor::zeros(&[3, 4]));
        let x = random_w(6, &[3, 6]);
        assert!(cb.matmul(&x).unwrap().max_abs_diff(&x.matmul(&wr).unwrap()) <= 1e-12);
        assert!(cb.matmul(&Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn write_counts_accumulate() {
        let w = random_w(7, &[4, 4]);
        let mut rng = RngStream::new(0);
        let mut cb = Crossbar::program(&w, 100.0, &ProgramSpec::ideal(), &mut rng).unwrap();
        assert_eq!(cb.write_stats(DEFAULT_RRAM_ENDURANCE).total_writes, 16);
        cb.reprogram(&w, &ProgramSpec::ideal(), &mut rng).unwrap();
        let s = cb.write_stats(2);
        assert_eq!(s.total_writes, 32);
        assert_eq!(s.max_cell_writes, 2);
        assert_eq!(s.cells_at_limit, 16);
        let _ = cb.read_effective_weights();
        assert_eq!(cb.write_stats(2).total_writes, 32);
    }

    #[test]
    fn noisy_programming_counts_every_attempt() {
        let w = random_w(8, &[8, 8]);
        let prog = ProgramSpec { sigma_prog: 2.0, verify_tol: 1.0, max_attempts: 20 };
        let cb = Crossbar::program(&w, 100.0, &prog, &mut RngStream::new(11)).unwrap();

        // Instrumented replay of the same write-and-verify loop.
        let mut rng = RngStream::new(11);
        let w_max = w.max_abs();
        let mut expected = 0u64;
        for &v in w.data() {
            let (tp, tm) = if v >= 0.0 { (v * 100.0 / w_max, 0.0) } else { (0.0, -v * 100.0 / w_max) };
            let mut n = 0;
            loop {
                n += 1;
                let gp = (tp + 2.0 * rng.standard_normal()).clamp(0.0, 100.0);
                let gm = (tm + 2.0 * rng.standard_normal()).clamp(0.0, 100.0);
                if ((gp - tp).abs() <= 1.0 && (gm - tm).abs() <= 1.0) || n >= 20 {
                    break;
                }
            }
            expected += n;
        }
        let stats = cb.write_stats(DEFAULT_RRAM_ENDURANCE);
        assert_eq!(stats.total_writes, expected);
        assert!(stats.total_writes > 64);
    }
}
