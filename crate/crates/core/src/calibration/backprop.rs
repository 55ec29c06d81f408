//! Full-backpropagation baseline: cross-entropy fine-tuning of the crossbar
//! weights themselves. Every update rewrites every cell.

use super::config::BackpropConfig;
use super::engine::CalibrationReport;
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::linalg::RngStream;
use crate::nn::{backward, forward_trace, softmax_cross_entropy, Dataset, LayerGrad, Network, Weight};
use crate::rram::ProgramSpec;

/// Stream index reserved for write-and-verify noise during reprogramming.
const PROGRAM_STREAM: u64 = u64::MAX;

/// Fine-tunes the crossbar weights of a deployed `student` on labelled
/// `calib` samples. Biases and batch norm stay frozen; each optimizer step is
/// followed by a full reprogram of every crossbar using `prog`.
pub fn backprop_baseline(
    student: &Network,
    calib: &Dataset,
    cfg: &BackpropConfig,
    prog: &ProgramSpec,
) -> Result<(Network, CalibrationReport)> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration set is empty".into()));
    }
    for (i, w) in student.weighted() {
        if w.weight.crossbar().is_none() || w.adapter.is_some() {
            return Err(Error::State("backprop baseline needs a deployed student without adapters".into()).at_layer(i));
        }
    }
    let start = std::time::Instant::now();
    let before = student.write_counts();
    let mut net = student.clone();
    let mut opts: Vec<Optimizer> = net.layers.iter().map(|_| Optimizer::new(cfg.optimizer, cfg.lr)).collect();
    let mut prog_rng = RngStream::derive(cfg.seed, PROGRAM_STREAM);
    let mut order: Vec<usize> = (0..calib.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;
    for epoch in 0..cfg.epochs {
        RngStream::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch = calib.subset(chunk)?;
            let trace = forward_trace(&net, &batch.inputs)?;
            let (loss, dl) = softmax_cross_entropy(&trace.logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, step, loss });
            }
            total += loss;
            batches += 1;
            let grads = backward(&net, &trace, &dl)?;
            for (i, (layer, g)) in net.layers.iter_mut().zip(&grads).enumerate() {
                let (Some(params), LayerGrad::Weighted { dw, .. }) = (layer.weighted_mut(), g) else { continue };
                let Weight::Crossbar(cb) = &mut params.weight else { unreachable!("checked above") };
                let mut w = cb.read_effective_weights();
                opts[i].step(w.data_mut(), dw.data());
                cb.reprogram(&w, prog, &mut prog_rng).map_err(|e| e.at_layer(i))?;
            }
            steps += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let after = net.write_counts();
    let weight_params = net.weight_params();
    let report = CalibrationReport {
        method: "backprop".into(),
        layers: Vec::new(),
        epoch_losses,
        accuracy: None,
        adapter_params: 0,
        weight_params,
        gamma_total: "1/1".into(),
        gamma_total_f64: 1.0,
        rram_writes: after.iter().sum::<u64>() - before.iter().sum::<u64>(),
        rram_max_cell_writes: before.iter().zip(&after).map(|(b, a)| a - b).max().unwrap_or(0),
        rram_updates: steps,
        sram_updates: 0,
        sram_cell_writes: 0,
        config: serde_json::to_value(cfg).expect("config serializes"),
        wall_ms: start.elapsed().as_millis(),
    };
    Ok((net, report))
}
