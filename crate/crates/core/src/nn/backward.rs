//! Reverse-mode gradients through the layer stack, using the dense rules
//! `∂L/∂a_i = ∂L/∂a_{i+1} · Wᵀ` and `∂L/∂W = a_iᵀ · ∂L/∂a_{i+1}` (conv via
//! the im2col matrix form).

use super::layer::{pool, Layer};
use super::network::Network;
use crate::error::{Error, Result};
use crate::linalg::{col2im, nchw_to_rows, Tensor};

/// Inputs of every layer from one forward pass.
pub struct Trace {
    pub inputs: Vec<Tensor>,
    pub logits: Tensor,
    /// Shape of the last layer's output before flattening to `[n, classes]`.
    pub output_shape: Vec<usize>,
}

pub fn forward_trace(net: &Network, x: &Tensor) -> Result<Trace> {
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut cur = x.clone();
    for (i, layer) in net.layers.iter().enumerate() {
        let y = layer.forward(&cur, false).map_err(|e| e.at_layer(i))?.y;
        inputs.push(std::mem::replace(&mut cur, y));
    }
    let output_shape = cur.shape().to_vec();
    Ok(Trace { inputs, logits: cur.flatten_batch(), output_shape })
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    None,
    Weighted { dw: Tensor, db: Option<Tensor> },
    BatchNorm { dscale: Vec<f64>, dshift: Vec<f64> },
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if n != labels.len() || n == 0 {
        return Err(Error::shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    let mut grad = Tensor::zeros(&[n, c]);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label] - max);
        for (j, e) in exps.iter().enumerate() {
            let t = if j == label { 1.0 } else { 0.0 };
            grad.set(i, j, (e / z - t) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

fn column_sums(m: &Tensor) -> Tensor {
    let k = m.cols();
    let mut s = vec![0.0; k];
    for row in m.data().chunks(k) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::new(vec![1, k], s).expect("finite sums")
}

/// Gradients for every layer given `∂L/∂logits`. Layers carrying adapters
/// are rejected: full backpropagation trains the weights themselves.
pub fn backward(net: &Network, trace: &Trace, dlogits: &Tensor) -> Result<Vec<LayerGrad>> {
    let mut grads = vec![LayerGrad::None; net.layers.len()];
    let mut dy = dlogits.clone().reshape(&trace.output_shape)?;
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let x = &trace.inputs[i];
        let (g, dx) = layer_backward(layer, x, &dy).map_err(|e| e.at_layer(i))?;
        grads[i] = g;
        dy = dx;
    }
    Ok(grads)
}

fn layer_backward(layer: &Layer, x: &Tensor, dy: &Tensor) -> Result<(LayerGrad, Tensor)> {
    match layer {
        Layer::Dense { params, .. } | Layer::Conv2d { params, .. } => {
            if params.adapter.is_some() {
                return Err(Error::State("backpropagation through an adapted layer".into()));
            }
            let w = params.weight.effective();
            let (xm, _) = layer.matrix_input(x)?;
            let dym = match layer {
                Layer::Conv2d { .. } => nchw_to_rows(dy)?,
                _ => dy.clone(),
            };
            let dw = xm.t_matmul(&dym)?;
            let db = params.bias.as_ref().map(|_| column_sums(&dym));
            let dxm = dym.matmul_t(&w)?;
            let dx = match layer {
                Layer::Conv2d { geom, .. } => col2im(&dxm, x.shape(), *geom)?,
                _ => dxm,
            };
            Ok((LayerGrad::Weighted { dw, db }, dx))
        }
        Layer::BatchNorm(bn) => {
            let c = bn.channels();
            let inner = if x.shape().len() == 4 { x.shape()[2] * x.shape()[3] } else { 1 };
            let mut dscale = vec![0.0; c];
            let mut dshift = vec![0.0; c];
            let inv: Vec<f64> = (0..c).map(|ch| 1.0 / (bn.var[ch] + bn.eps).sqrt()).collect();
            let mut dx = dy.clone();
            for (idx, (g, &xv)) in dx.data_mut().iter_mut().zip(x.data()).enumerate() {
                let ch = (idx / inner) % c;
                let xhat = (xv - bn.mean[ch]) * inv[ch];
                dscale[ch] += *g * xhat;
                dshift[ch] += *g;
                *g *= bn.scale[ch] * inv[ch];
            }
            Ok((LayerGrad::BatchNorm { dscale, dshift }, dx))
        }
        Layer::Relu => {
            let mut dx = dy.clone();
            for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                if xv <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok((LayerGrad::None, dx))
        }
        Layer::MaxPool { h, w } => {
            let (_, arg) = pool(x, *h, *w, true)?;
            let mut dx = Tensor::zeros(x.shape());
            for (&src, g) in arg.iter().zip(dy.data()) {
                dx.data_mut()[src] += g;
            }
            Ok((LayerGrad::None, dx))
        }
        Layer::AvgPool { h, w } => {
            let [n, c, ih, iw] = x.shape()[..] else { unreachable!("pool checked rank") };
            let (oh, ow) = (ih / h, iw / w);
            let mut dx = Tensor::zeros(x.shape());
            let share = 1.0 / (h * w) as f64;
            for plane in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy.data()[(plane * oh + oy) * ow + ox] * share;
                        for ky in 0..*h {
                            for kx in 0..*w {
                                dx.data_mut()[plane * ih * iw + (oy * h + ky) * iw + ox * w + kx] += g;
                            }
                        }
                    }
                }
            }
            Ok((LayerGrad::None, dx))
        }
        Layer::Flatten => Ok((LayerGrad::None, dy.clone().reshape(x.shape())?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian, RngStream};
    use crate::nn::layer::{BatchNormFrozen, Weight};
    use crate::nn::network::preset_cnn;

    fn loss(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
        softmax_cross_entropy(&net.logits(x).unwrap(), labels).unwrap().0
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngStream::new(11);
        let mut net = preset_cnn(&[1, 8, 8], 3, &mut rng).unwrap();
        // Non-trivial frozen statistics.
        for l in &mut net.layers {
            if let Layer::BatchNorm(bn) = l {
                let c = bn.channels();
                *bn = BatchNormFrozen {
                    scale: (0..c).map(|i| 0.8 + 0.05 * i as f64).collect(),
                    shift: (0..c).map(|i| 0.01 * i as f64).collect(),
                    mean: (0..c).map(|i| -0.02 * i as f64).collect(),
                    var: (0..c).map(|i| 0.5 + 0.1 * i as f64).collect(),
                    eps: 1e-5,
                };
            }
        }
        net.layers.insert(3, Layer::AvgPool { h: 1, w: 1 });
        let x = gaussian(&mut rng, 0.0, 1.0, &[2, 1, 8, 8]).unwrap();
        let labels = [0, 2];
        let trace = forward_trace(&net, &x).unwrap();
        let (_, dl) = softmax_cross_entropy(&trace.logits, &labels).unwrap();
        let grads = backward(&net, &trace, &dl).unwrap();

        let h = 1e-5;
        for &li in &net.weighted_indices() {
            let LayerGrad::Weighted { dw, db } = &grads[li] else { panic!() };
            for idx in [0, 7, dw.len() - 1] {
                let mut p = net.clone();
                let mut m = net.clone();
                for (n, s) in [(&mut p, h), (&mut m, -h)] {
                    if let Weight::Digital(w) = &mut n.layers[li].weighted_mut().unwrap().weight {
                        w.data_mut()[idx] += s;
                    }
                }
                let fd = (loss(&p, &x, &labels) - loss(&m, &x, &labels)) / (2.0 * h);
                assert!(
                    (fd - dw.data()[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "layer {li} w[{idx}]: {fd} vs {}",
                    dw.data()[idx]
                );
            }
            let db = db.as_ref().unwrap();
            let mut p = net.clone();
            let mut m = net.clone();
            p.layers[li].weighted_mut().unwrap().bias.as_mut().unwrap().data_mut()[0] += h;
            m.layers[li].weighted_mut().unwrap().bias.as_mut().unwrap().data_mut()[0] -= h;
            let fd = (loss(&p, &x, &labels) - loss(&m, &x, &labels)) / (2.0 * h);
            assert!((fd - db.data()[0]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
        let LayerGrad::BatchNorm { dscale, dshift } = &grads[1] else { panic!() };
        for (which, analytic) in [(0, dscale[2]), (1, dshift[2])] {
            let mut p = net.clone();
            let mut m = net.clone();
            for (n, s) in [(&mut p, h), (&mut m, -h)] {
                if let Layer::BatchNorm(bn) = &mut n.layers[1] {
                    if which == 0 {
                        bn.scale[2] += s
                    } else {
                        bn.shift[2] += s
                    }
                }
            }
            let fd = (loss(&p, &x, &labels) - loss(&m, &x, &labels)) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (l, g) = softmax_cross_entropy(&Tensor::zeros(&[2, 4]), &[1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g.at(0, 1) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    }
}
