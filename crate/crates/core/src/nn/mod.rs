//! Feed-forward networks (teacher and crossbar-backed student), datasets,
//! teacher training and the model file format.

mod backward;
mod dataset;
pub mod io;
mod layer;
mod network;
mod train;

pub use backward::{backward, forward_trace, softmax_cross_entropy, LayerGrad, Trace};
pub use dataset::{
    read_csv, read_idx_images, read_idx_labels, write_csv, write_idx_images, write_idx_labels, BlobsSpec, Dataset,
    Split, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use io::{load_model, save_model, StorageDtype};
pub use layer::{BatchNormFrozen, Layer, LayerCapture, Weight, Weighted};
pub use network::{argmax, deploy_to_rimc, evaluate, mlp, predict, preset_cnn, preset_mlp, Network};
pub use train::{dataset_loss, estimate_batch_norm_stats, train_teacher, TrainConfig, TrainReport};
