//! Patch unrolling that turns a 2-D convolution into a matrix product.
//!
//! Rows are ordered `(batch, out_y, out_x)`; columns are ordered
//! channel-major, then kernel row, then kernel column. A conv weight in
//! matrix form is therefore `[(C_in·kh·kw), C_out]`.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        Self { kh, kw, stride, pad }
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(Error::param(format!("degenerate conv geometry {self:?}")));
        }
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.kh > ph || self.kw > pw {
            return Err(Error::shape(format!("kernel {}x{} larger than padded input {ph}x{pw}", self.kh, self.kw)));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match x.shape()[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!("expected [batch, C, H, W], got {:?}", x.shape()))),
    }
}

/// Unrolls every receptive field of `x` into one row.
pub fn im2col(x: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x)?;
    let (oh, ow) = g.output_size(h, w)?;
    let cols = c * g.kh * g.kw;
    let src = x.data();
    let mut out = vec![0.0; n * oh * ow * cols];
    let mut r = 0;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[r * cols..(r + 1) * cols];
                let mut col = 0;
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                row[col] = src[plane + iy as usize * w + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    Tensor::new(vec![n * oh * ow, cols], out)
}

/// Adjoint of [`im2col`]: scatters (sums) patch-row gradients back onto an
/// input of shape `input_shape`.
pub fn col2im(cols: &Tensor, input_shape: &[usize], g: ConvGeometry) -> Result<Tensor> {
    let (n, c, h, w) = match input_shape[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape(format!("col2im target {input_shape:?}"))),
    };
    let (oh, ow) = g.output_size(h, w)?;
    let width = c * g.kh * g.kw;
    if cols.shape() != [n * oh * ow, width] {
        return Err(Error::shape(format!("col2im: expected {:?}, got {:?}", [n * oh * ow, width], cols.shape())));
    }
    let src = cols.data();
    let mut out = vec![0.0; n * c * h * w];
    let mut r = 0;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &src[r * width..(r + 1) * width];
                let mut col = 0;
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                out[plane + iy as usize * w + ix as usize] += row[col];
                            }
                            col += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// `[(n·h·w), c]` conv-output rows to an NCHW tensor.
pub fn rows_to_nchw(rows: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = rows.cols();
    if rows.rows() != n * h * w {
        return Err(Error::shape(format!("rows_to_nchw: {} rows for {n}x{h}x{w}", rows.rows())));
    }
    let src = rows.data();
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for p in 0..h * w {
            let r = b * h * w + p;
            for ch in 0..c {
                out[(b * c + ch) * h * w + p] = src[r * c + ch];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Inverse of [`rows_to_nchw`].
pub fn nchw_to_rows(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x)?;
    let src = x.data();
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                out[(b * h * w + p) * c + ch] = src[(b * c + ch) * h * w + p];
            }
        }
    }
    Tensor::new(vec![n * h * w, c], out)
}
