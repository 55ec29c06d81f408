//! Model file container.
//!
//! ```text
//! RIMC-MODEL <version>\n
//! <header byte length>\n
//! <JSON header>
//! <payload: raw little-endian tensors, back to back>
//! ```
//!
//! The header records the input shape and one entry per layer. Every tensor
//! in it is a reference `{dtype, shape, offset, len}` into the payload, with
//! `offset` counted from the first payload byte and `len` in bytes. Dtypes:
//! `f64`, `f32` (lossy storage of real tensors), `u64` (write counters) and
//! `i8` (quantized adapter codes, stored next to their `scale`).
//!
//! Layer entries are tagged by `kind`: `dense {d, k}`, `conv2d {c_in, c_out,
//! kh, kw, stride, pad}`, `batch_norm {eps, scale, shift, mean, var}`,
//! `relu`, `max_pool {h, w}`, `avg_pool {h, w}`, `flatten`. Weighted kinds
//! carry `weight` (`digital {tensor}` or `crossbar {g_max, w_max, g_plus,
//! g_minus, target_plus, target_minus, write_counts}`), optional `bias` and
//! optional `adapter` (`lora {a, b}`, `dora {mode, a, b, m, merged_scale}`,
//! `dora_int8` with the same fields as quantized tensors).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::{BatchNormFrozen, Layer, Weight, Weighted};
use super::network::Network;
use crate::adapters::{Adapter, DoraAdapter, DoraMode, LoraAdapter, QTensor, QuantizedAdapter};
use crate::error::{Error, Result};
use crate::linalg::{ConvGeometry, Tensor};
use crate::rram::Crossbar;

pub const MAGIC: &str = "RIMC-MODEL";
pub const FORMAT_VERSION: u32 = 1;

/// Element type used for real-valued tensors in the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageDtype {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Dtype {
    F64,
    F32,
    U64,
    I8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 | Dtype::U64 => 8,
            Dtype::F32 => 4,
            Dtype::I8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRef {
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QRef {
    scale: f64,
    codes: TensorRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
enum WeightEntry {
    Digital {
        tensor: TensorRef,
    },
    Crossbar {
        g_max: f64,
        w_max: f64,
        g_plus: TensorRef,
        g_minus: TensorRef,
        target_plus: TensorRef,
        target_minus: TensorRef,
        write_counts: TensorRef,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AdapterEntry {
    Lora { a: TensorRef, b: TensorRef },
    Dora { mode: DoraMode, a: TensorRef, b: TensorRef, m: TensorRef, merged_scale: Option<TensorRef> },
    DoraInt8 { mode: DoraMode, a: QRef, b: QRef, m: QRef, merged_scale: Option<QRef> },
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightedEntry {
    weight: WeightEntry,
    bias: Option<TensorRef>,
    adapter: Option<AdapterEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Dense {
        d: usize,
        k: usize,
        #[serde(flatten)]
        params: WeightedEntry,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        #[serde(flatten)]
        params: WeightedEntry,
    },
    BatchNorm {
        eps: f64,
        scale: TensorRef,
        shift: TensorRef,
        mean: TensorRef,
        var: TensorRef,
    },
    Relu,
    MaxPool {
        h: usize,
        w: usize,
    },
    AvgPool {
        h: usize,
        w: usize,
    },
    Flatten,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
}

struct Writer {
    real: StorageDtype,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) -> TensorRef {
        let offset = self.payload.len();
        let len = bytes.len();
        self.payload.extend(bytes);
        TensorRef { dtype, shape: shape.to_vec(), offset, len }
    }

    fn real(&mut self, shape: &[usize], data: &[f64]) -> TensorRef {
        match self.real {
            StorageDtype::F64 => self.push(Dtype::F64, shape, data.iter().flat_map(|v| v.to_le_bytes()).collect()),
            StorageDtype::F32 => {
                self.push(Dtype::F32, shape, data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect())
            }
        }
    }

    fn tensor(&mut self, t: &Tensor) -> TensorRef {
        self.real(t.shape(), t.data())
    }

    fn vector(&mut self, v: &[f64]) -> TensorRef {
        self.real(&[v.len()], v)
    }

    fn counts(&mut self, shape: &[usize], c: &[u64]) -> TensorRef {
        self.push(Dtype::U64, shape, c.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn qtensor(&mut self, q: &QTensor) -> QRef {
        let codes = self.push(Dtype::I8, &q.shape, q.codes.iter().map(|&c| c as u8).collect());
        QRef { scale: q.scale, codes }
    }

    fn weighted(&mut self, p: &Weighted) -> WeightedEntry {
        let weight = match &p.weight {
            Weight::Digital(t) => WeightEntry::Digital { tensor: self.tensor(t) },
            Weight::Crossbar(cb) => WeightEntry::Crossbar {
                g_max: cb.g_max(),
                w_max: cb.w_max(),
                g_plus: self.tensor(cb.g_plus()),
                g_minus: self.tensor(cb.g_minus()),
                target_plus: self.tensor(cb.target_plus()),
                target_minus: self.tensor(cb.target_minus()),
                write_counts: self.counts(cb.g_plus().shape(), cb.write_counts()),
            },
        };
        let bias = p.bias.as_ref().map(|b| self.tensor(b));
        let adapter = p.adapter.as_ref().map(|ad| match ad {
            Adapter::Lora(l) => AdapterEntry::Lora { a: self.tensor(&l.a), b: self.tensor(&l.b) },
            Adapter::Dora(d) => AdapterEntry::Dora {
                mode: d.mode,
                a: self.tensor(&d.a),
                b: self.tensor(&d.b),
                m: self.tensor(&d.m),
                merged_scale: d.merged_scale.as_ref().map(|s| self.tensor(s)),
            },
            Adapter::QuantizedDora(q) => AdapterEntry::DoraInt8 {
                mode: q.mode,
                a: self.qtensor(&q.a),
                b: self.qtensor(&q.b),
                m: self.qtensor(&q.m),
                merged_scale: q.merged_scale.as_ref().map(|s| self.qtensor(s)),
            },
        });
        WeightedEntry { weight, bias, adapter }
    }
}

/// Serializes `net` into the container format. Output is byte-stable.
pub fn to_bytes(net: &Network, dtype: StorageDtype) -> Result<Vec<u8>> {
    let mut w = Writer { real: dtype, payload: Vec::new() };
    let layers = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::Dense { d, k, params } => LayerEntry::Dense { d: *d, k: *k, params: w.weighted(params) },
            Layer::Conv2d { c_in, c_out, geom, params } => LayerEntry::Conv2d {
                c_in: *c_in,
                c_out: *c_out,
                kh: geom.kh,
                kw: geom.kw,
                stride: geom.stride,
                pad: geom.pad,
                params: w.weighted(params),
            },
            Layer::BatchNorm(bn) => LayerEntry::BatchNorm {
                eps: bn.eps,
                scale: w.vector(&bn.scale),
                shift: w.vector(&bn.shift),
                mean: w.vector(&bn.mean),
                var: w.vector(&bn.var),
            },
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool { h, w } => LayerEntry::MaxPool { h: *h, w: *w },
            Layer::AvgPool { h, w } => LayerEntry::AvgPool { h: *h, w: *w },
            Layer::Flatten => LayerEntry::Flatten,
        })
        .collect();
    let header = Header { format_version: FORMAT_VERSION, input_shape: net.input_shape.clone(), layers };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::State(e.to_string()))?;
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{}\n", json.len()).into_bytes();
    out.extend(json.as_bytes());
    out.extend(w.payload);
    Ok(out)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>, dtype: StorageDtype) -> Result<()> {
    fs::write(path, to_bytes(net, dtype)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    from_bytes(&fs::read(path)?)
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset: offset as u64, message: message.into() }
}

/// Reads one `\n`-terminated ASCII line starting at `pos`.
fn line(bytes: &[u8], pos: usize) -> Result<(&str, usize)> {
    let end = bytes[pos..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|i| pos + i)
        .ok_or_else(|| parse_err(bytes.len(), "unterminated preamble line"))?;
    let s =
        std::str::from_utf8(&bytes[pos..end]).map_err(|e| parse_err(pos + e.valid_up_to(), "preamble is not UTF-8"))?;
    Ok((s, end + 1))
}

struct Reader<'a> {
    payload: &'a [u8],
    base: usize,
}

impl Reader<'_> {
    fn slice(&self, r: &TensorRef, expect: &[Dtype]) -> Result<&[u8]> {
        if !expect.contains(&r.dtype) {
            return Err(parse_err(self.base + r.offset, format!("unexpected dtype {:?}", r.dtype)));
        }
        let n: usize = r.shape.iter().product();
        if n * r.dtype.size() != r.len {
            return Err(parse_err(self.base + r.offset, format!("shape {:?} does not match {} bytes", r.shape, r.len)));
        }
        let end = r.offset.checked_add(r.len).filter(|&e| e <= self.payload.len());
        match end {
            Some(end) => Ok(&self.payload[r.offset..end]),
            None => Err(parse_err(
                self.base + self.payload.len(),
                format!("truncated tensor at payload offset {}", r.offset),
            )),
        }
    }

    fn real(&self, r: &TensorRef) -> Result<Vec<f64>> {
        let raw = self.slice(r, &[Dtype::F64, Dtype::F32])?;
        Ok(match r.dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            _ => raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
        })
    }

    fn tensor(&self, r: &TensorRef) -> Result<Tensor> {
        Tensor::new(r.shape.clone(), self.real(r)?).map_err(|e| parse_err(self.base + r.offset, e.to_string()))
    }

    fn counts(&self, r: &TensorRef) -> Result<Vec<u64>> {
        let raw = self.slice(r, &[Dtype::U64])?;
        Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn qtensor(&self, q: &QRef) -> Result<QTensor> {
        let raw = self.slice(&q.codes, &[Dtype::I8])?;
        Ok(QTensor { shape: q.codes.shape.clone(), codes: raw.iter().map(|&b| b as i8).collect(), scale: q.scale })
    }

    fn weighted(&self, e: WeightedEntry) -> Result<Weighted> {
        let weight = match e.weight {
            WeightEntry::Digital { tensor } => Weight::Digital(self.tensor(&tensor)?),
            WeightEntry::Crossbar { g_max, w_max, g_plus, g_minus, target_plus, target_minus, write_counts } => {
                Weight::Crossbar(Crossbar::from_parts(
                    self.tensor(&g_plus)?,
                    self.tensor(&g_minus)?,
                    self.tensor(&target_plus)?,
                    self.tensor(&target_minus)?,
                    g_max,
                    w_max,
                    self.counts(&write_counts)?,
                )?)
            }
        };
        let bias = e.bias.as_ref().map(|b| self.tensor(b)).transpose()?;
        let adapter = match e.adapter {
            None => None,
            Some(AdapterEntry::Lora { a, b }) => {
                Some(Adapter::Lora(LoraAdapter::new(self.tensor(&a)?, self.tensor(&b)?)?))
            }
            Some(AdapterEntry::Dora { mode, a, b, m, merged_scale }) => {
                let mut ad = DoraAdapter::new(self.tensor(&a)?, self.tensor(&b)?, self.tensor(&m)?, mode)?;
                ad.merged_scale = merged_scale.as_ref().map(|s| self.tensor(s)).transpose()?;
                Some(Adapter::Dora(ad))
            }
            Some(AdapterEntry::DoraInt8 { mode, a, b, m, merged_scale }) => {
                let q = QuantizedAdapter {
                    a: self.qtensor(&a)?,
                    b: self.qtensor(&b)?,
                    m: self.qtensor(&m)?,
                    merged_scale: merged_scale.as_ref().map(|s| self.qtensor(s)).transpose()?,
                    mode,
                };
                q.dequantize()?;
                Some(Adapter::QuantizedDora(q))
            }
        };
        Ok(Weighted { weight, bias, adapter })
    }
}

/// Parses a container produced by [`to_bytes`]. Any inconsistency is an
/// error; no partially built network is returned.
pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let (first, pos) = line(bytes, 0)?;
    let version = match first.split_once(' ') {
        Some((MAGIC, v)) => v.parse::<u32>().map_err(|_| parse_err(MAGIC.len() + 1, format!("bad version {v:?}")))?,
        _ => return Err(parse_err(0, "missing RIMC-MODEL magic")),
    };
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let (len_line, header_start) = line(bytes, pos)?;
    let header_len: usize = len_line.parse().map_err(|_| parse_err(pos, format!("bad header length {len_line:?}")))?;
    let payload_start = header_start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err(bytes.len(), "truncated header"))?;
    let text = &bytes[header_start..payload_start];
    let header: Header = serde_json::from_slice(text).map_err(|e| {
        let at = text.split(|&b| b == b'\n').take(e.line().saturating_sub(1)).map(|l| l.len() + 1).sum::<usize>()
            + e.column().saturating_sub(1);
        parse_err(header_start + at, e.to_string())
    })?;
    if header.format_version != version {
        return Err(Error::Version { found: header.format_version, expected: FORMAT_VERSION });
    }
    let rd = Reader { payload: &bytes[payload_start..], base: payload_start };
    let layers = header
        .layers
        .into_iter()
        .map(|e| {
            let layer = match e {
                LayerEntry::Dense { d, k, params } => Layer::Dense { d, k, params: rd.weighted(params)? },
                LayerEntry::Conv2d { c_in, c_out, kh, kw, stride, pad, params } => Layer::Conv2d {
                    c_in,
                    c_out,
                    geom: ConvGeometry::new(kh, kw, stride, pad),
                    params: rd.weighted(params)?,
                },
                LayerEntry::BatchNorm { eps, scale, shift, mean, var } => Layer::BatchNorm(BatchNormFrozen {
                    scale: rd.real(&scale)?,
                    shift: rd.real(&shift)?,
                    mean: rd.real(&mean)?,
                    var: rd.real(&var)?,
                    eps,
                }),
                LayerEntry::Relu => Layer::Relu,
                LayerEntry::MaxPool { h, w } => Layer::MaxPool { h, w },
                LayerEntry::AvgPool { h, w } => Layer::AvgPool { h, w },
                LayerEntry::Flatten => Layer::Flatten,
            };
            Ok(layer)
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(header.input_shape, layers)
}
