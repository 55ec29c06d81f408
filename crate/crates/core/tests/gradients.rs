use rimc_calib::adapters::{init_dora, init_lora, Adapter, DoraMode};
use rimc_calib::calibration::adapter_gradients;
use rimc_calib::linalg::gaussian;
use rimc_calib::{RngStream, Tensor};

/// Scalar test loss `Σ c ∘ Y` so that `∂L/∂Y = c`.
fn loss(ad: &Adapter, x: &Tensor, w: &Tensor, c: &Tensor) -> f64 {
    let y = ad.forward(x, w).unwrap();
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn param(ad: &mut Adapter, which: usize) -> &mut Tensor {
    match (ad, which) {
        (Adapter::Lora(l), 0) => &mut l.a,
        (Adapter::Lora(l), 1) => &mut l.b,
        (Adapter::Dora(d), 0) => &mut d.a,
        (Adapter::Dora(d), 1) => &mut d.b,
        (Adapter::Dora(d), 2) => &mut d.m,
        _ => unreachable!(),
    }
}

/// Largest elementwise relative error between analytic and central-difference
/// gradients, `|a − fd| / max(1, |fd|)`.
fn check(ad: &Adapter, x: &Tensor, w: &Tensor, c: &Tensor) -> f64 {
    let g = adapter_gradients(x, w, ad, c).unwrap();
    let mut analytic = vec![g.da, g.db];
    analytic.extend(g.dm);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (which, an) in analytic.iter().enumerate() {
        for idx in 0..an.len() {
            let mut p = ad.clone();
            let mut m = ad.clone();
            param(&mut p, which).data_mut()[idx] += h;
            param(&mut m, which).data_mut()[idx] -= h;
            let fd = (loss(&p, x, w, c) - loss(&m, x, w, c)) / (2.0 * h);
            worst = worst.max((an.data()[idx] - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

fn random_case(seed: u64) -> (usize, usize, usize, usize, RngStream) {
    let mut rng = RngStream::new(seed);
    let d = 2 + rng.below(11);
    let k = 2 + rng.below(11);
    let r = 1 + rng.below(4.min(d).min(k));
    let m = 3 + rng.below(6);
    (d, k, r, m, rng)
}

fn perturbed(mut ad: Adapter, rng: &mut RngStream) -> Adapter {
    // Move away from B = 0 so every term of the chain rule is exercised.
    let b = param(&mut ad, 1);
    *b = gaussian(rng, 0.0, 0.3, b.shape()).unwrap();
    ad
}

#[test]
fn dora_weight_norm_matches_finite_differences() {
    for seed in 0..25 {
        let (d, k, r, m, mut rng) = random_case(seed);
        let w = gaussian(&mut rng, 0.0, 1.0, &[d, k]).unwrap();
        let x = gaussian(&mut rng, 0.0, 1.0, &[m, d]).unwrap();
        let c = gaussian(&mut rng, 0.0, 1.0, &[m, k]).unwrap();
        let ad = perturbed(Adapter::Dora(init_dora(&w, r, DoraMode::WeightNorm, &mut rng).unwrap()), &mut rng);
        let err = check(&ad, &x, &w, &c);
        assert!(err <= 1e-4, "seed {seed} ({d},{k},{r}): {err}");
    }
}

#[test]
fn dora_activation_norm_matches_finite_differences() {
    for seed in 100..125 {
        let (d, k, r, m, mut rng) = random_case(seed);
        let w = gaussian(&mut rng, 0.0, 1.0, &[d, k]).unwrap();
        let x = gaussian(&mut rng, 0.0, 1.0, &[m, d]).unwrap();
        let c = gaussian(&mut rng, 0.0, 1.0, &[m, k]).unwrap();
        let ad = perturbed(Adapter::Dora(init_dora(&w, r, DoraMode::ActivationNorm, &mut rng).unwrap()), &mut rng);
        let err = check(&ad, &x, &w, &c);
        assert!(err <= 1e-4, "seed {seed} ({d},{k},{r}): {err}");
    }
}

#[test]
fn lora_matches_finite_differences() {
    for seed in 200..225 {
        let (d, k, r, m, mut rng) = random_case(seed);
        let w = gaussian(&mut rng, 0.0, 1.0, &[d, k]).unwrap();
        let x = gaussian(&mut rng, 0.0, 1.0, &[m, d]).unwrap();
        let c = gaussian(&mut rng, 0.0, 1.0, &[m, k]).unwrap();
        let ad = perturbed(Adapter::Lora(init_lora(d, k, r, &mut rng).unwrap()), &mut rng);
        let err = check(&ad, &x, &w, &c);
        assert!(err <= 1e-4, "seed {seed} ({d},{k},{r}): {err}");
    }
}

#[test]
fn fixed_shape_six_five_two() {
    let mut rng = RngStream::new(65);
    let w = gaussian(&mut rng, 0.0, 1.0, &[6, 5]).unwrap();
    let x = gaussian(&mut rng, 0.0, 1.0, &[4, 6]).unwrap();
    let c = gaussian(&mut rng, 0.0, 1.0, &[4, 5]).unwrap();
    for mode in [DoraMode::WeightNorm, DoraMode::ActivationNorm] {
        let ad = perturbed(Adapter::Dora(init_dora(&w, 2, mode, &mut rng).unwrap()), &mut rng);
        assert!(check(&ad, &x, &w, &c) <= 1e-4);
    }
}
