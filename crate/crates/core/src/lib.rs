#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Simulation of weight storage on drifting RRAM crossbars and layer-wise
//! feature-matching calibration with DoRA/LoRA adapters held in digital
//! memory.

pub mod adapters;
pub mod calibration;
pub mod cost;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod rram;

pub use error::{Error, Result};
pub use linalg::{RngStream, Tensor};
