//! Layer-wise feature matching: each student layer gets an adapter trained
//! so that, fed the teacher's input to that layer, it reproduces the
//! teacher's output feature.

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::CalibConfig;
use super::grads::adapter_gradients;
use super::optim::Optimizer;
use crate::adapters::{init_dora, init_lora, Adapter, AdapterKind};
use crate::error::{Error, Result};
use crate::linalg::{RngStream, Tensor};
use crate::nn::{Dataset, LayerCapture, Network};

/// Teacher activations around every weighted layer, from one forward pass
/// over the calibration samples.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub n_samples: usize,
    pub layers: Vec<LayerCapture>,
}

impl FeatureCache {
    pub fn get(&self, layer_index: usize) -> Option<&LayerCapture> {
        self.layers.iter().find(|c| c.layer_index == layer_index)
    }
}

pub fn extract_teacher_features(teacher: &Network, calib: &Dataset) -> Result<FeatureCache> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set is empty".into()));
    }
    let (_, caps) = teacher.forward(&calib.inputs, true)?;
    Ok(FeatureCache { n_samples: calib.len(), layers: caps.unwrap_or_default() })
}

/// Per-layer calibration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_index: usize,
    pub d: usize,
    pub k: usize,
    /// Rank actually used (the requested rank capped at `min(d, k)`).
    pub rank: usize,
    pub adapter_params: usize,
    pub initial_loss: f64,
    /// Full-set loss after each completed epoch.
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
    pub no_improvement: bool,
}

/// Outcome of calibrating one layer.
#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub adapter: Adapter,
    pub initial_loss: f64,
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    pub no_improvement: bool,
}

impl LayerOutcome {
    pub fn final_loss(&self) -> f64 {
        self.loss_curve.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Mean squared error of `ad` on `(x, f)` and its gradient w.r.t. the output.
fn loss_and_grad(x: &Tensor, w: &Tensor, ad: &Adapter, f: &Tensor) -> Result<(f64, Tensor)> {
    let y = ad.forward(x, w)?;
    let diff = y.sub(f)?;
    let n = diff.len() as f64;
    Ok((diff.sum_squares() / n, diff.scale(2.0 / n)))
}

fn trainable(ad: &mut Adapter) -> Result<Vec<&mut Tensor>> {
    match ad {
        Adapter::Lora(l) => Ok(vec![&mut l.a, &mut l.b]),
        Adapter::Dora(d) if !d.is_merged() => Ok(vec![&mut d.a, &mut d.b, &mut d.m]),
        _ => Err(Error::State("only unmerged floating-point adapters can be calibrated".into())),
    }
}

/// Trains `adapter` so that `adapter.forward(x, w) ≈ f`.
///
/// `x` holds `rows_per_sample` consecutive rows per calibration sample;
/// minibatches are drawn over samples. One optimizer step per minibatch;
/// the loop stops once the full-set loss reaches `cfg.loss_threshold` or
/// after `cfg.epochs` epochs. `w` is never modified.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_layer(
    w: &Tensor,
    mut adapter: Adapter,
    x: &Tensor,
    f: &Tensor,
    rows_per_sample: usize,
    cfg: &CalibConfig,
    layer: usize,
    rng: &mut RngStream,
) -> Result<LayerOutcome> {
    cfg.validate()?;
    if x.rows() != f.rows() || rows_per_sample == 0 || !x.rows().is_multiple_of(rows_per_sample) {
        return Err(Error::Shape(format!(
            "{} input rows, {} feature rows, {rows_per_sample} rows per sample",
            x.rows(),
            f.rows()
        ))
        .at_layer(layer));
    }
    let n_samples = x.rows() / rows_per_sample;
    let nan = |epoch, loss| Error::Calibration { layer, epoch, loss };
    let wrap = |e: Error| e.at_layer(layer);

    let initial_loss = loss_and_grad(x, w, &adapter, f).map_err(wrap)?.0;
    if !initial_loss.is_finite() {
        return Err(nan(0, initial_loss));
    }
    let mut opts: Vec<Optimizer> =
        (0..trainable(&mut adapter)?.len()).map(|_| Optimizer::new(cfg.optimizer, cfg.lr)).collect();
    let mut curve = Vec::new();
    let mut steps = 0;
    let mut order: Vec<usize> = (0..n_samples).collect();
    if initial_loss > cfg.loss_threshold {
        for epoch in 0..cfg.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch) {
                let rows: Vec<usize> =
                    chunk.iter().flat_map(|&s| s * rows_per_sample..(s + 1) * rows_per_sample).collect();
                let (xb, fb) = (x.select_rows(&rows)?, f.select_rows(&rows)?);
                let (loss, g) = loss_and_grad(&xb, w, &adapter, &fb).map_err(wrap)?;
                if !loss.is_finite() {
                    return Err(nan(epoch, loss));
                }
                let grads = adapter_gradients(&xb, w, &adapter, &g).map_err(wrap)?;
                let mut gs = vec![grads.da, grads.db];
                gs.extend(grads.dm);
                for ((p, gr), opt) in trainable(&mut adapter)?.into_iter().zip(&gs).zip(&mut opts) {
                    opt.step(p.data_mut(), gr.data());
                }
                steps += 1;
            }
            let loss = loss_and_grad(x, w, &adapter, f).map_err(wrap)?.0;
            if !loss.is_finite() {
                return Err(nan(epoch, loss));
            }
            curve.push(loss);
            if loss <= cfg.loss_threshold {
                break;
            }
        }
    }
    let final_loss = curve.last().copied().unwrap_or(initial_loss);
    Ok(LayerOutcome { adapter, initial_loss, loss_curve: curve, steps, no_improvement: final_loss > initial_loss })
}

/// Fresh adapter of the configured kind for a `d × k` weight.
pub fn init_adapter(w_r: &Tensor, cfg: &CalibConfig, rank: usize, rng: &mut RngStream) -> Result<Adapter> {
    Ok(match cfg.adapter_kind {
        AdapterKind::Dora => Adapter::Dora(init_dora(w_r, rank, cfg.mode, rng)?),
        AdapterKind::Lora => Adapter::Lora(init_lora(w_r.rows(), w_r.cols(), rank, rng)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub teacher: f64,
    pub drifted: f64,
    pub calibrated: f64,
}

/// Summary of one calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// `"dora"`, `"lora"` or `"backprop"`.
    pub method: String,
    pub layers: Vec<LayerReport>,
    /// Mean end-to-end loss per epoch (backprop baseline only).
    pub epoch_losses: Vec<f64>,
    pub accuracy: Option<Accuracies>,
    pub adapter_params: usize,
    pub weight_params: usize,
    /// Adapter parameters over weight parameters, as `"num/den"`.
    pub gamma_total: String,
    pub gamma_total_f64: f64,
    /// Crossbar writes performed by this run.
    pub rram_writes: u64,
    pub rram_max_cell_writes: u64,
    /// Crossbar reprogramming events (backprop baseline only).
    pub rram_updates: u64,
    /// Optimizer steps per layer, i.e. updates of each adapter's SRAM.
    pub sram_updates: u64,
    /// Adapter parameters written over the whole run.
    pub sram_cell_writes: u64,
    pub config: serde_json::Value,
    /// Wall-clock milliseconds; not serialized, so reports are reproducible.
    #[serde(skip)]
    pub wall_ms: u128,
}

impl CalibrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratio_fields(r: Ratio<u64>) -> (String, f64) {
    (format!("{}/{}", r.numer(), r.denom()), *r.numer() as f64 / *r.denom() as f64)
}

/// Attaches and trains an adapter on every weighted layer of `student`.
///
/// Layer `l` is fed the teacher's cached input to layer `l`, so layers are
/// independent; they run in parallel and each draws randomness from
/// `derive(cfg.seed, l)` only. Crossbars, biases and batch norm are not touched.
pub fn calibrate_network(
    student: &Network,
    cache: &FeatureCache,
    cfg: &CalibConfig,
) -> Result<(Network, CalibrationReport)> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let before = student.write_counts();
    let jobs: Vec<(usize, &LayerCapture)> = student
        .weighted_indices()
        .into_iter()
        .map(|li| {
            cache.get(li).map(|c| (li, c)).ok_or_else(|| Error::State(format!("no cached features for layer {li}")))
        })
        .collect::<Result<_>>()?;

    let outcomes: Vec<(usize, usize, usize, LayerOutcome)> = jobs
        .par_iter()
        .map(|&(li, cap)| {
            let params = student.layers[li].weighted().expect("weighted index");
            if params.adapter.is_some() {
                return Err(Error::State("layer already carries an adapter".into()).at_layer(li));
            }
            let w = params.weight.effective();
            let (d, k) = (w.rows(), w.cols());
            let rank = cfg.rank.min(d).min(k);
            let mut rng = RngStream::derive(cfg.seed, li as u64);
            let ad = init_adapter(&w, cfg, rank, &mut rng.child(0)).map_err(|e| e.at_layer(li))?;
            let out = calibrate_layer(&w, ad, &cap.input, &cap.output, cap.rows_per_sample, cfg, li, &mut rng)?;
            Ok((d, k, rank, out))
        })
        .collect::<Result<_>>()?;

    let mut net = student.clone();
    let mut layers = Vec::with_capacity(outcomes.len());
    let (mut sram_updates, mut sram_cell_writes) = (0u64, 0u64);
    for (&(li, _), (d, k, rank, out)) in jobs.iter().zip(outcomes) {
        let adapter_params = out.adapter.num_params();
        sram_updates = sram_updates.max(out.steps as u64);
        sram_cell_writes += (out.steps * adapter_params) as u64;
        layers.push(LayerReport {
            layer_index: li,
            d,
            k,
            rank,
            adapter_params,
            initial_loss: out.initial_loss,
            final_loss: out.final_loss(),
            loss_curve: out.loss_curve,
            steps: out.steps,
            no_improvement: out.no_improvement,
        });
        net.layers[li].weighted_mut().expect("weighted index").adapter = Some(out.adapter);
    }
    let after = net.write_counts();
    let rram_writes = after.iter().sum::<u64>() - before.iter().sum::<u64>();
    let (gamma_total, gamma_total_f64) = ratio_fields(net.adapter_parameter_ratio()?);
    let report = CalibrationReport {
        method: match cfg.adapter_kind {
            AdapterKind::Dora => "dora".into(),
            AdapterKind::Lora => "lora".into(),
        },
        layers,
        epoch_losses: Vec::new(),
        accuracy: None,
        adapter_params: net.adapter_params(),
        weight_params: net.weight_params(),
        gamma_total,
        gamma_total_f64,
        rram_writes,
        rram_max_cell_writes: before.iter().zip(&after).map(|(b, a)| a - b).max().unwrap_or(0),
        rram_updates: 0,
        sram_updates,
        sram_cell_writes,
        config: serde_json::to_value(cfg).expect("config serializes"),
        wall_ms: start.elapsed().as_millis(),
    };
    Ok((net, report))
}
