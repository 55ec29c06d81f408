use std::borrow::Cow;

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::linalg::{im2col, rows_to_nchw, ConvGeometry, Tensor};
use crate::rram::Crossbar;

/// Backing store of a weight matrix: digital memory (teacher) or a crossbar
/// (deployed student).
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Digital(Tensor),
    Crossbar(Crossbar),
}

impl Weight {
    /// The matrix the layer actually multiplies by.
    pub fn effective(&self) -> Cow<'_, Tensor> {
        match self {
            Weight::Digital(t) => Cow::Borrowed(t),
            Weight::Crossbar(cb) => Cow::Owned(cb.read_effective_weights()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Weight::Digital(t) => (t.rows(), t.cols()),
            Weight::Crossbar(cb) => (cb.rows(), cb.cols()),
        }
    }

    pub fn crossbar(&self) -> Option<&Crossbar> {
        match self {
            Weight::Crossbar(cb) => Some(cb),
            Weight::Digital(_) => None,
        }
    }
}

/// Weight matrix `[d, k]`, digital bias `[1, k]` and an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighted {
    pub weight: Weight,
    pub bias: Option<Tensor>,
    pub adapter: Option<Adapter>,
}

impl Weighted {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight: Weight::Digital(weight), bias, adapter: None }
    }

    /// `x · W` (or the adapter's composition with `W`), without bias.
    pub fn linear(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.effective();
        match &self.adapter {
            Some(ad) => ad.forward(x, &w),
            None => x.matmul(&w),
        }
    }

    pub fn add_bias(&self, y: &mut Tensor) -> Result<()> {
        if let Some(b) = &self.bias {
            let k = y.cols();
            if b.len() != k {
                return Err(Error::shape(format!("bias of {} for {k} outputs", b.len())));
            }
            for row in y.data_mut().chunks_mut(k) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        Ok(())
    }
}

/// Inference-mode batch norm with stored statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormFrozen {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormFrozen {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.shift.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::shape("batch-norm parameter lengths differ"));
        }
        if self.var.iter().any(|&v| !(v > 0.0)) || !(self.eps >= 0.0) {
            return Err(Error::param("batch-norm variance must be positive"));
        }
        Ok(())
    }

    /// Per-channel `(gain, offset)` so that `y = gain·x + offset`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.var[c] + self.eps).sqrt();
                let g = self.scale[c] * inv;
                (g, self.shift[c] - g * self.mean[c])
            })
            .collect()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.channels();
        let (channels, inner) = match x.shape()[..] {
            [_, f] => (f, 1),
            [_, ch, h, w] => (ch, h * w),
            _ => return Err(Error::shape(format!("batch norm input {:?}", x.shape()))),
        };
        if channels != c {
            return Err(Error::shape(format!("batch norm over {c} channels, input has {channels}")));
        }
        let aff = self.affine();
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let (g, o) = aff[(i / inner) % c];
            *v = g * *v + o;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { d: usize, k: usize, params: Weighted },
    Conv2d { c_in: usize, c_out: usize, geom: ConvGeometry, params: Weighted },
    BatchNorm(BatchNormFrozen),
    Relu,
    MaxPool { h: usize, w: usize },
    AvgPool { h: usize, w: usize },
    Flatten,
}

/// Weighted-layer activations recorded during a capturing forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    /// Index into `Network::layers`.
    pub layer_index: usize,
    /// Input in matrix form (im2col-unrolled for conv), `[rows, d]`.
    pub input: Tensor,
    /// Weighted product before bias, `[rows, k]`.
    pub output: Tensor,
    /// Matrix rows contributed by each sample (1 for dense, `H'·W'` for conv).
    pub rows_per_sample: usize,
}

pub(crate) struct LayerOut {
    pub y: Tensor,
    pub capture: Option<(Tensor, Tensor, usize)>,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn weighted(&self) -> Option<&Weighted> {
        match self {
            Layer::Dense { params, .. } | Layer::Conv2d { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn weighted_mut(&mut self) -> Option<&mut Weighted> {
        match self {
            Layer::Dense { params, .. } | Layer::Conv2d { params, .. } => Some(params),
            _ => None,
        }
    }

    /// Matrix form of the layer input (`im2col` for conv).
    pub(crate) fn matrix_input(&self, x: &Tensor) -> Result<(Tensor, usize)> {
        match self {
            Layer::Dense { d, .. } => {
                if x.shape().len() != 2 || x.cols() != *d {
                    return Err(Error::shape(format!("dense expects [n, {d}], got {:?}", x.shape())));
                }
                Ok((x.clone(), 1))
            }
            Layer::Conv2d { c_in, geom, .. } => {
                if x.shape().len() != 4 || x.shape()[1] != *c_in {
                    return Err(Error::shape(format!("conv expects [n, {c_in}, H, W], got {:?}", x.shape())));
                }
                let (oh, ow) = geom.output_size(x.shape()[2], x.shape()[3])?;
                Ok((im2col(x, *geom)?, oh * ow))
            }
            _ => Err(Error::State(format!("{} has no weight matrix", self.name()))),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, capture: bool) -> Result<LayerOut> {
        match self {
            Layer::Dense { params, .. } => {
                let (xm, rps) = self.matrix_input(x)?;
                let lin = params.linear(&xm)?;
                let mut y = lin.clone();
                params.add_bias(&mut y)?;
                Ok(LayerOut { y, capture: capture.then_some((xm, lin, rps)) })
            }
            Layer::Conv2d { geom, .. } => {
                let params = self.weighted().expect("conv is weighted");
                let (xm, rps) = self.matrix_input(x)?;
                let lin = params.linear(&xm)?;
                let mut rows = lin.clone();
                params.add_bias(&mut rows)?;
                let (oh, ow) = geom.output_size(x.shape()[2], x.shape()[3])?;
                let y = rows_to_nchw(&rows, x.shape()[0], oh, ow)?;
                Ok(LayerOut { y, capture: capture.then_some((xm, lin, rps)) })
            }
            Layer::BatchNorm(bn) => Ok(LayerOut { y: bn.apply(x)?, capture: None }),
            Layer::Relu => Ok(LayerOut { y: x.map(|v| v.max(0.0)), capture: None }),
            Layer::MaxPool { h, w } => Ok(LayerOut { y: pool(x, *h, *w, true)?.0, capture: None }),
            Layer::AvgPool { h, w } => Ok(LayerOut { y: pool(x, *h, *w, false)?.0, capture: None }),
            Layer::Flatten => Ok(LayerOut { y: x.clone().flatten_batch(), capture: None }),
        }
    }
}

/// Non-overlapping `ph × pw` pooling. Returns the output and, for max pooling,
/// the flat input index chosen for each output (first maximum in scan order).
pub(crate) fn pool(x: &Tensor, ph: usize, pw: usize, max: bool) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = match x.shape()[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape(format!("pooling expects [n, C, H, W], got {:?}", x.shape()))),
    };
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::shape(format!("pool {ph}x{pw} on {h}x{w}")));
    }
    let (oh, ow) = (h / ph, w / pw);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                let mut sum = 0.0;
                for ky in 0..ph {
                    for kx in 0..pw {
                        let i = base + (oy * ph + ky) * w + ox * pw + kx;
                        sum += src[i];
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                if max {
                    out.push(best);
                    argmax.push(best_i);
                } else {
                    out.push(sum / (ph * pw) as f64);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}
