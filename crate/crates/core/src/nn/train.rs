//! Supervised teacher training: minibatch SGD with momentum on softmax
//! cross-entropy.

use serde::{Deserialize, Serialize};

use super::backward::{backward, forward_trace, softmax_cross_entropy, LayerGrad};
use super::layer::{Layer, Weight};
use super::network::{evaluate, Network};
use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, epochs: 10, batch: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Samples used to estimate frozen batch-norm statistics.
const BN_STAT_SAMPLES: usize = 1024;

/// Sets each batch-norm layer's mean/variance from its input on (a prefix of)
/// the training data, front to back.
pub fn estimate_batch_norm_stats(net: &mut Network, data: &Dataset) -> Result<()> {
    let n = data.len().min(BN_STAT_SAMPLES);
    let mut cur = data.inputs.slice_rows(0, n)?;
    for i in 0..net.layers.len() {
        if let Layer::BatchNorm(bn) = &mut net.layers[i] {
            let c = bn.channels();
            let inner = if cur.shape().len() == 4 { cur.shape()[2] * cur.shape()[3] } else { 1 };
            let count = (cur.len() / c) as f64;
            let mut sum = vec![0.0; c];
            let mut sq = vec![0.0; c];
            for (idx, &v) in cur.data().iter().enumerate() {
                let ch = (idx / inner) % c;
                sum[ch] += v;
                sq[ch] += v * v;
            }
            for ch in 0..c {
                let mean = sum[ch] / count;
                bn.mean[ch] = mean;
                bn.var[ch] = (sq[ch] / count - mean * mean).max(1e-6);
            }
        }
        cur = net.layers[i].forward(&cur, false).map_err(|e| e.at_layer(i))?.y;
    }
    Ok(())
}

struct Velocity(Vec<Vec<f64>>);

fn step(param: &mut [f64], grad: &[f64], vel: &mut Vec<f64>, lr: f64, momentum: f64) {
    if vel.is_empty() {
        vel.resize(param.len(), 0.0);
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Trains weights, biases and batch-norm affine parameters of a digital
/// network. Deterministic for a given seed.
pub fn train_teacher(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::param(format!("batch={} lr={}", cfg.batch, cfg.lr)));
    }
    if net.weighted().any(|(_, w)| !matches!(w.weight, Weight::Digital(_))) {
        return Err(Error::State("teacher weights must be digital".into()));
    }
    let mut net = net.clone();
    let mut losses = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        let acc = evaluate(&net, data)?;
        return Ok((net, TrainReport { epoch_losses: losses, train_accuracy: acc }));
    }
    estimate_batch_norm_stats(&mut net, data)?;

    // Two velocity slots per layer: (weight | bn scale), (bias | bn shift).
    let mut vel = Velocity(vec![Vec::new(); 2 * net.layers.len()]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        RngStream::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for (step_i, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch = data.subset(chunk)?;
            let trace = forward_trace(&net, &batch.inputs)?;
            let (loss, dl) = softmax_cross_entropy(&trace.logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, step: step_i, loss });
            }
            total += loss;
            batches += 1;
            let grads = backward(&net, &trace, &dl)?;
            apply(&mut net, &grads, &mut vel, cfg)?;
        }
        losses.push(total / batches as f64);
    }
    if !net.weighted().all(|(_, w)| w.weight.effective().is_finite()) {
        return Err(Error::Training { epoch: cfg.epochs, step: 0, loss: f64::NAN });
    }
    let acc = evaluate(&net, data)?;
    Ok((net, TrainReport { epoch_losses: losses, train_accuracy: acc }))
}

fn apply(net: &mut Network, grads: &[LayerGrad], vel: &mut Velocity, cfg: &TrainConfig) -> Result<()> {
    for (i, (layer, g)) in net.layers.iter_mut().zip(grads).enumerate() {
        let (v0, rest) = vel.0[2 * i..].split_at_mut(1);
        let (v0, v1) = (&mut v0[0], &mut rest[0]);
        match (layer, g) {
            (Layer::Dense { params, .. } | Layer::Conv2d { params, .. }, LayerGrad::Weighted { dw, db }) => {
                let Weight::Digital(w) = &mut params.weight else {
                    return Err(Error::State("teacher weights must be digital".into()));
                };
                step(w.data_mut(), dw.data(), v0, cfg.lr, cfg.momentum);
                if let (Some(b), Some(db)) = (params.bias.as_mut(), db) {
                    step(b.data_mut(), db.data(), v1, cfg.lr, cfg.momentum);
                }
            }
            (Layer::BatchNorm(bn), LayerGrad::BatchNorm { dscale, dshift }) => {
                step(&mut bn.scale, dscale, v0, cfg.lr, cfg.momentum);
                step(&mut bn.shift, dshift, v1, cfg.lr, cfg.momentum);
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean cross-entropy of `net` on `data`.
pub fn dataset_loss(net: &Network, data: &Dataset) -> Result<f64> {
    let logits = net.logits(&data.inputs)?;
    Ok(softmax_cross_entropy(&logits, &data.labels)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp, BlobsSpec};

    fn blobs() -> (Dataset, Dataset) {
        BlobsSpec {
            classes: 2,
            shape: vec![4],
            latent_dim: 4,
            separation: 4.0,
            ambient_noise: 0.0,
            offset: 0.0,
            n_train: 200,
            n_test: 100,
            seed: 1,
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let (train, test) = blobs();
        let net = mlp(4, &[8], 2, &mut RngStream::new(2)).unwrap();
        let cfg = TrainConfig { lr: 0.05, momentum: 0.9, epochs: 10, batch: 16, seed: 3 };
        let (trained, report) = train_teacher(&net, &train, &cfg).unwrap();
        assert!(report.train_accuracy >= 0.99, "{}", report.train_accuracy);
        assert_eq!(report.train_accuracy, evaluate(&trained, &train).unwrap());
        assert!(evaluate(&trained, &test).unwrap() >= 0.95);
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (train, _) = blobs();
        let net = mlp(4, &[8], 2, &mut RngStream::new(2)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert_eq!(train_teacher(&net, &train, &cfg).unwrap().0, net);
    }

    #[test]
    fn same_seed_bit_identical() {
        let (train, _) = blobs();
        let net = mlp(4, &[8], 2, &mut RngStream::new(2)).unwrap();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        assert_eq!(train_teacher(&net, &train, &cfg).unwrap().0, train_teacher(&net, &train, &cfg).unwrap().0);
    }

    #[test]
    fn divergence_is_reported() {
        let (train, _) = blobs();
        let net = mlp(4, &[8], 2, &mut RngStream::new(2)).unwrap();
        let cfg = TrainConfig { lr: 1e150, momentum: 0.0, epochs: 5, batch: 16, seed: 0 };
        assert!(matches!(train_teacher(&net, &train, &cfg), Err(Error::Training { .. }) | Err(Error::Parameter(_))));
    }
}
