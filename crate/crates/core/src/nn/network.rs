use num_rational::Ratio;

use super::layer::{BatchNormFrozen, Layer, LayerCapture, Weight, Weighted};
use super::Dataset;
use crate::adapters::{aggregate_parameter_ratio, Adapter};
use crate::error::{Error, Result};
use crate::linalg::{gaussian, ConvGeometry, RngStream, Tensor};
use crate::rram::{Crossbar, DriftSpec, ProgramSpec, WriteStats};

/// Ordered feed-forward stack. `input_shape` excludes the batch dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Rows per chunk when evaluating large datasets.
const EVAL_CHUNK: usize = 512;

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let net = Self { input_shape, layers };
        net.validate()?;
        Ok(net)
    }

    /// Checks that layer shapes compose by pushing one zero sample through.
    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                bn.validate().map_err(|e| e.at_layer(i))?;
            }
            if let Some(p) = layer.weighted() {
                let (d, k) = p.weight.shape();
                let (ed, ek) = match layer {
                    Layer::Dense { d, k, .. } => (*d, *k),
                    Layer::Conv2d { c_in, c_out, geom, .. } => (c_in * geom.kh * geom.kw, *c_out),
                    _ => unreachable!(),
                };
                if (d, k) != (ed, ek) {
                    return Err(Error::shape(format!("weight is {d}x{k}, layer needs {ed}x{ek}")).at_layer(i));
                }
            }
        }
        let mut shape = vec![1];
        shape.extend(&self.input_shape);
        self.forward(&Tensor::zeros(&shape), false).map(|_| ())
    }

    pub fn forward(&self, x: &Tensor, capture: bool) -> Result<(Tensor, Option<Vec<LayerCapture>>)> {
        if x.shape().get(1..) != Some(&self.input_shape[..]) {
            return Err(Error::shape(format!(
                "network input {:?} does not match per-sample shape {:?}",
                x.shape(),
                self.input_shape
            ))
            .at_layer(0));
        }
        let mut caps = capture.then(Vec::new);
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&cur, capture).map_err(|e| e.at_layer(i))?;
            if let (Some(caps), Some((input, output, rows_per_sample))) = (caps.as_mut(), out.capture) {
                caps.push(LayerCapture { layer_index: i, input, output, rows_per_sample });
            }
            cur = out.y;
        }
        Ok((cur.flatten_batch(), caps))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, false)?.0)
    }

    /// Indices of Dense/Conv layers in order.
    pub fn weighted_indices(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.weighted().is_some()).map(|(i, _)| i).collect()
    }

    pub fn weighted(&self) -> impl Iterator<Item = (usize, &Weighted)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| l.weighted().map(|w| (i, w)))
    }

    /// Number of weight-matrix entries (biases excluded).
    pub fn weight_params(&self) -> usize {
        self.weighted().map(|(_, w)| w.weight.shape()).map(|(d, k)| d * k).sum()
    }

    /// All trainable digital parameters of a teacher: weights, biases, BN affine.
    pub fn total_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { params, .. } | Layer::Conv2d { params, .. } => {
                    let (d, k) = params.weight.shape();
                    d * k + params.bias.as_ref().map_or(0, Tensor::len)
                }
                Layer::BatchNorm(bn) => 2 * bn.channels(),
                _ => 0,
            })
            .sum()
    }

    /// Adapter parameters over original weight parameters across all weighted layers.
    pub fn adapter_parameter_ratio(&self) -> Result<Ratio<u64>> {
        let mut rows = Vec::new();
        for (i, w) in self.weighted() {
            let ad = w.adapter.as_ref().ok_or_else(|| Error::State(format!("layer {i} has no adapter")))?;
            let (d, k) = w.weight.shape();
            rows.push((d, k, ad.num_params()));
        }
        if rows.is_empty() {
            return Err(Error::State("network has no weighted layers".into()));
        }
        Ok(aggregate_parameter_ratio(&rows))
    }

    pub fn adapter_params(&self) -> usize {
        self.weighted().filter_map(|(_, w)| w.adapter.as_ref()).map(Adapter::num_params).sum()
    }

    /// Aggregated write counters over every crossbar in the network.
    pub fn write_stats(&self, endurance: u64) -> WriteStats {
        self.weighted().filter_map(|(_, w)| w.weight.crossbar()).map(|cb| cb.write_stats(endurance)).fold(
            WriteStats { total_writes: 0, max_cell_writes: 0, cells_at_limit: 0 },
            |a, s| WriteStats {
                total_writes: a.total_writes + s.total_writes,
                max_cell_writes: a.max_cell_writes.max(s.max_cell_writes),
                cells_at_limit: a.cells_at_limit + s.cells_at_limit,
            },
        )
    }

    /// Per-cell write counters of every crossbar, concatenated in layer order.
    pub fn write_counts(&self) -> Vec<u64> {
        self.weighted()
            .filter_map(|(_, w)| w.weight.crossbar())
            .flat_map(|cb| cb.write_counts().iter().copied())
            .collect()
    }

    /// Returns a copy with every adapter removed.
    pub fn without_adapters(&self) -> Network {
        let mut net = self.clone();
        for l in &mut net.layers {
            if let Some(w) = l.weighted_mut() {
                w.adapter = None;
            }
        }
        net
    }
}

/// Programs every weight matrix of `teacher` onto a fresh crossbar and
/// applies one drift event. Biases and batch-norm parameters stay digital.
/// Layer `j` (in weighted-layer order) draws programming noise from
/// `derive(seed, 2j)` and drift from `derive(seed, 2j + 1)`.
pub fn deploy_to_rimc(teacher: &Network, drift: &DriftSpec, prog: &ProgramSpec, g_max: f64) -> Result<Network> {
    drift.validate()?;
    prog.validate()?;
    let mut student = teacher.clone();
    let mut j = 0u64;
    for (i, layer) in student.layers.iter_mut().enumerate() {
        let Some(params) = layer.weighted_mut() else { continue };
        let w = match &params.weight {
            Weight::Digital(t) => t.clone(),
            Weight::Crossbar(_) => {
                return Err(Error::State("network is already deployed".into()).at_layer(i));
            }
        };
        let mut cb =
            Crossbar::program(&w, g_max, prog, &mut RngStream::derive(drift.seed, 2 * j)).map_err(|e| e.at_layer(i))?;
        cb.apply_drift(drift, &mut RngStream::derive(drift.seed, 2 * j + 1)).map_err(|e| e.at_layer(i))?;
        params.weight = Weight::Crossbar(cb);
        j += 1;
    }
    Ok(student)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    let preds = predict(net, &data.inputs)?;
    if preds.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty dataset".into()));
    }
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

pub fn predict(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.rows();
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let logits = net.logits(&inputs.slice_rows(start, end)?)?;
        preds.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
        start = end;
    }
    Ok(preds)
}

fn he_dense(d: usize, k: usize, rng: &mut RngStream) -> Result<Layer> {
    let w = gaussian(rng, 0.0, (2.0 / d as f64).sqrt(), &[d, k])?;
    Ok(Layer::Dense { d, k, params: Weighted::new(w, Some(Tensor::zeros(&[1, k]))) })
}

fn he_conv(c_in: usize, c_out: usize, geom: ConvGeometry, rng: &mut RngStream) -> Result<Layer> {
    let d = c_in * geom.kh * geom.kw;
    let w = gaussian(rng, 0.0, (2.0 / d as f64).sqrt(), &[d, c_out])?;
    Ok(Layer::Conv2d { c_in, c_out, geom, params: Weighted::new(w, Some(Tensor::zeros(&[1, c_out]))) })
}

/// Fully connected ReLU network `input → hidden… → classes`, He-initialized.
pub fn mlp(input: usize, hidden: &[usize], classes: usize, rng: &mut RngStream) -> Result<Network> {
    let mut layers = Vec::new();
    let mut d = input;
    for &h in hidden {
        layers.push(he_dense(d, h, rng)?);
        layers.push(Layer::Relu);
        d = h;
    }
    layers.push(he_dense(d, classes, rng)?);
    Network::new(vec![input], layers)
}

/// The reference MLP topology `input → 128 → 64 → classes`.
pub fn preset_mlp(input: usize, classes: usize, rng: &mut RngStream) -> Result<Network> {
    mlp(input, &[128, 64], classes, rng)
}

/// Two conv blocks (`Conv 3×3 → BN → ReLU → MaxPool 2`, 8 then 16 channels)
/// followed by a dense classifier. `input` is `[C, H, W]`.
pub fn preset_cnn(input: &[usize], classes: usize, rng: &mut RngStream) -> Result<Network> {
    let [c, h, w] = input[..] else {
        return Err(Error::shape(format!("cnn preset needs a [C, H, W] input, got {input:?}")));
    };
    let g = ConvGeometry::new(3, 3, 1, 1);
    let layers = vec![
        he_conv(c, 8, g, rng)?,
        Layer::BatchNorm(BatchNormFrozen::identity(8)),
        Layer::Relu,
        Layer::MaxPool { h: 2, w: 2 },
        he_conv(8, 16, g, rng)?,
        Layer::BatchNorm(BatchNormFrozen::identity(16)),
        Layer::Relu,
        Layer::MaxPool { h: 2, w: 2 },
        Layer::Flatten,
        he_dense(16 * (h / 4) * (w / 4), classes, rng)?,
    ];
    Network::new(input.to_vec(), layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_dense() {
        let layer = Layer::Dense { d: 2, k: 2, params: Weighted::new(Tensor::eye(2), Some(Tensor::zeros(&[1, 2]))) };
        let net = Network::new(vec![2], vec![layer]).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, 7.0]]).unwrap();
        assert_eq!(net.logits(&x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn relu_layer() {
        let net = Network::new(vec![2], vec![Layer::Relu]).unwrap();
        let x = Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(net.logits(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn capture_matches_layer_stepping() {
        let net = mlp(5, &[7, 6], 3, &mut RngStream::new(1)).unwrap();
        let x = gaussian(&mut RngStream::new(2), 0.0, 1.0, &[4, 5]).unwrap();
        let (logits, caps) = net.forward(&x, true).unwrap();
        let caps = caps.unwrap();
        assert_eq!(caps.len(), 3);

        let mut cur = x.clone();
        let mut c = 0;
        for (i, layer) in net.layers.iter().enumerate() {
            if let Layer::Dense { params, .. } = layer {
                let Weight::Digital(w) = &params.weight else { unreachable!() };
                let lin = cur.matmul(w).unwrap();
                assert_eq!(caps[c].layer_index, i);
                assert_eq!(caps[c].input, cur);
                assert_eq!(caps[c].output, lin);
                let mut y = lin;
                params.add_bias(&mut y).unwrap();
                cur = y;
                c += 1;
            } else {
                cur = cur.map(|v| v.max(0.0));
            }
        }
        assert_eq!(cur, logits);
    }

    #[test]
    fn shape_error_names_layer() {
        let layers = vec![
            Layer::Dense { d: 3, k: 4, params: Weighted::new(Tensor::zeros(&[3, 4]), None) },
            Layer::Dense { d: 5, k: 2, params: Weighted::new(Tensor::zeros(&[5, 2]), None) },
        ];
        let err = Network::new(vec![3], layers).unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 1, .. }), "{err}");
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn zero_logits_accuracy_is_class_zero_share() {
        let layer = Layer::Dense { d: 2, k: 2, params: Weighted::new(Tensor::zeros(&[2, 2]), None) };
        let net = Network::new(vec![2], vec![layer]).unwrap();
        let data = Dataset::new(Tensor::zeros(&[4, 2]), vec![0, 1, 0, 1], 2).unwrap();
        assert_eq!(evaluate(&net, &data).unwrap(), 0.5);
        let empty = Dataset::new(Tensor::zeros(&[0, 2]), vec![], 2).unwrap();
        assert!(matches!(evaluate(&net, &empty), Err(Error::Empty(_))));
    }

    #[test]
    fn presets_build() {
        let mut rng = RngStream::new(0);
        let m = preset_mlp(784, 10, &mut rng).unwrap();
        assert_eq!(m.weight_params(), 784 * 128 + 128 * 64 + 64 * 10);
        let c = preset_cnn(&[1, 12, 12], 4, &mut rng).unwrap();
        assert_eq!(c.weighted_indices(), vec![0, 4, 9]);
        let x = gaussian(&mut rng, 0.0, 1.0, &[2, 1, 12, 12]).unwrap();
        assert_eq!(c.logits(&x).unwrap().shape(), &[2, 4]);
    }

    #[test]
    fn drift_free_deployment_is_exact() {
        let mut rng = RngStream::new(3);
        let teacher = preset_cnn(&[1, 8, 8], 3, &mut rng).unwrap();
        let student = deploy_to_rimc(&teacher, &DriftSpec::new(0.0, 1), &ProgramSpec::ideal(), 100.0).unwrap();
        let x = gaussian(&mut rng, 0.0, 1.0, &[5, 1, 8, 8]).unwrap();
        let d = student.logits(&x).unwrap().max_abs_diff(&teacher.logits(&x).unwrap());
        assert!(d <= 1e-10, "{d}");
        assert!(student.weighted().all(|(_, w)| w.weight.crossbar().is_some()));
        assert!(teacher.weighted().all(|(_, w)| w.weight.crossbar().is_none()));
        assert_eq!(student.write_stats(u64::MAX).total_writes as usize, teacher.weight_params());
    }
}
