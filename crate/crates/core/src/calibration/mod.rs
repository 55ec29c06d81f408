//! Feature-based, layer-wise adapter calibration of a drifted student and
//! the full-backpropagation baseline it is compared against.

mod backprop;
mod config;
mod engine;
mod grads;
mod optim;

pub use backprop::backprop_baseline;
pub use config::{BackpropConfig, CalibConfig, OptimizerKind};
pub use engine::{
    calibrate_layer, calibrate_network, extract_teacher_features, init_adapter, Accuracies, CalibrationReport,
    FeatureCache, LayerOutcome, LayerReport,
};
pub use grads::{adapter_gradients, AdapterGrads};
pub use optim::Optimizer;
