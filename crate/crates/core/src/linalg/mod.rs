//! Dense linear algebra and seeded random sources.
//!
//! Everything here is single-threaded with a fixed accumulation order, so
//! results are bit-stable across runs.

mod im2col;
mod rng;
mod tensor;

pub use im2col::{col2im, im2col, nchw_to_rows, rows_to_nchw, ConvGeometry};
pub use rng::{gaussian, RngStream};
pub use tensor::Tensor;
