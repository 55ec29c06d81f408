//! Labelled datasets: synthetic Gaussian blobs, IDX image/label files and a
//! `label,pixel…` CSV format.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Calib,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, …sample_shape]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.rows() != labels.len() {
            return Err(Error::shape(format!("{} labels for inputs {:?}", labels.len(), inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::param(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self { inputs, labels, num_classes, split: Split::Train })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            inputs: self.inputs.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }

    /// Draws `n` distinct samples for calibration. Only training data may
    /// feed calibration.
    pub fn calibration_subset(&self, n: usize, rng: &mut RngStream) -> Result<Dataset> {
        if self.split == Split::Test {
            return Err(Error::param("calibration samples must come from the training split"));
        }
        if n == 0 || n > self.len() {
            return Err(Error::param(format!("cannot draw {n} calibration samples from {}", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(n);
        Ok(self.subset(&idx)?.with_split(Split::Calib))
    }
}

/// Gaussian class clusters. Each class has a centre `~ N(0, separation²)` in
/// a `latent_dim`-dimensional space; samples add unit noise there and are
/// mapped into the feature space by a fixed random linear map, then receive
/// isotropic `ambient_noise` and a constant `offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub classes: usize,
    /// Per-sample shape, e.g. `[784]` or `[1, 28, 28]`.
    pub shape: Vec<usize>,
    /// Latent dimensionality; equal to the feature count means no projection.
    pub latent_dim: usize,
    pub separation: f64,
    #[serde(default)]
    pub ambient_noise: f64,
    /// Constant added to every feature, like the mean of non-negative pixels.
    #[serde(default)]
    pub offset: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl BlobsSpec {
    /// Returns `(train, test)`.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes == 0 || self.latent_dim == 0 || self.shape.is_empty() {
            return Err(Error::param("blobs need classes, latent_dim and shape to be non-empty"));
        }
        let features: usize = self.shape.iter().product();
        let root = RngStream::new(self.seed);
        let centres = gaussian(&mut root.child(0), 0.0, self.separation, &[self.classes, self.latent_dim])?;
        let proj = if self.latent_dim == features {
            None
        } else {
            Some(gaussian(
                &mut root.child(1),
                0.0,
                (1.0 / self.latent_dim as f64).sqrt(),
                &[self.latent_dim, features],
            )?)
        };
        let make = |n: usize, rng: &mut RngStream, split: Split| -> Result<Dataset> {
            let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
            rng.shuffle(&mut labels);
            let mut z = gaussian(rng, 0.0, 1.0, &[n, self.latent_dim])?;
            for (i, &l) in labels.iter().enumerate() {
                for j in 0..self.latent_dim {
                    let v = z.at(i, j) + centres.at(l, j);
                    z.set(i, j, v);
                }
            }
            let mut x = match &proj {
                Some(p) => z.matmul(p)?,
                None => z,
            };
            if self.ambient_noise > 0.0 {
                x.add_assign(&gaussian(rng, 0.0, self.ambient_noise, &[n, features])?)?;
            }
            if self.offset != 0.0 {
                x.data_mut().iter_mut().for_each(|v| *v += self.offset);
            }
            let mut shape = vec![n];
            shape.extend(&self.shape);
            Ok(Dataset::new(x.reshape(&shape)?, labels, self.classes)?.with_split(split))
        };
        let train = make(self.n_train, &mut root.child(2), Split::Train)?;
        let test = make(self.n_test, &mut root.child(3), Split::Test)?;
        Ok((train, test))
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse { offset: offset as u64, message: "unexpected end of IDX header".into() })
}

/// Reads an IDX unsigned-byte image file into `[n, 1, rows, cols]`, scaled to `[0, 1]`.
pub fn read_idx_images(mut r: impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse { offset: 0, message: format!("bad IDX image magic {magic:#010x}") });
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let rows = read_u32_be(&bytes, 8)? as usize;
    let cols = read_u32_be(&bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!("IDX image payload needs {need} bytes, found {}", body.len()),
        });
    }
    Tensor::new(vec![n, 1, rows, cols], body[..need].iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn read_idx_labels(mut r: impl Read) -> Result<Vec<usize>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse { offset: 0, message: format!("bad IDX label magic {magic:#010x}") });
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Parse { offset: bytes.len() as u64, message: format!("expected {n} labels") });
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

pub fn write_idx_images(mut w: impl Write, images: &[u8], n: u32, rows: u32, cols: u32) -> Result<()> {
    for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(images)?;
    Ok(())
}

pub fn write_idx_labels(mut w: impl Write, labels: &[u8]) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Reads `label,v1,v2,…` lines (no header). Values are reshaped to `sample_shape`.
pub fn read_csv(r: impl BufRead, sample_shape: &[usize], num_classes: usize) -> Result<Dataset> {
    let features: usize = sample_shape.iter().product();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut offset = 0u64;
    for line in r.lines() {
        let line = line?;
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let mut fields = trimmed.split(',');
            let parse_err = |m: String| Error::Parse { offset, message: m };
            let label: usize =
                fields.next().unwrap_or_default().trim().parse().map_err(|e| parse_err(format!("label: {e}")))?;
            let row: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>().map_err(|e| parse_err(format!("value: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != features {
                return Err(parse_err(format!("expected {features} values, found {}", row.len())));
            }
            labels.push(label);
            data.extend(row);
        }
        offset += line.len() as u64 + 1;
    }
    let mut shape = vec![labels.len()];
    shape.extend(sample_shape);
    Dataset::new(Tensor::new(shape, data)?, labels, num_classes)
}

pub fn write_csv(mut w: impl Write, data: &Dataset) -> Result<()> {
    for i in 0..data.len() {
        write!(w, "{}", data.labels[i])?;
        for v in data.inputs.row(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BlobsSpec {
        BlobsSpec {
            classes: 3,
            shape: vec![6],
            latent_dim: 4,
            separation: 3.0,
            ambient_noise: 0.1,
            offset: 0.0,
            n_train: 30,
            n_test: 12,
            seed: 5,
        }
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let (train, test) = spec().generate().unwrap();
        assert_eq!(train.inputs.shape(), &[30, 6]);
        assert_eq!(test.len(), 12);
        for c in 0..3 {
            assert_eq!(train.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert_eq!(spec().generate().unwrap().0, train);
        assert_eq!(test.split, Split::Test);
    }

    #[test]
    fn calibration_only_from_train() {
        let (train, test) = spec().generate().unwrap();
        let cal = train.calibration_subset(5, &mut RngStream::new(1)).unwrap();
        assert_eq!(cal.len(), 5);
        assert_eq!(cal.split, Split::Calib);
        assert!(test.calibration_subset(5, &mut RngStream::new(1)).is_err());
        assert!(train.calibration_subset(0, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn label_range_checked() {
        assert!(Dataset::new(Tensor::zeros(&[2, 1]), vec![0, 3], 3).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|v| (v * 20) as u8).collect();
        let mut img = Vec::new();
        write_idx_images(&mut img, &pixels, 2, 3, 2).unwrap();
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        let t = read_idx_images(&img[..]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 3, 2]);
        assert_eq!(t.data()[1], 20.0 / 255.0);
        let mut lab = Vec::new();
        write_idx_labels(&mut lab, &[4, 7]).unwrap();
        assert_eq!(read_idx_labels(&lab[..]).unwrap(), vec![4, 7]);
        assert!(matches!(read_idx_images(&lab[..]), Err(Error::Parse { offset: 0, .. })));
        assert!(read_idx_images(&img[..img.len() - 1]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (train, _) = spec().generate().unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &train).unwrap();
        let back = read_csv(&buf[..], &[6], 3).unwrap();
        assert_eq!(back, train);
        let err = read_csv("1,2,x\n".as_bytes(), &[2], 3).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
