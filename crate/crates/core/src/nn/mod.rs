//! The hierarchical point-cloud transformer: configuration, parameters,
//! forward pass, segmentation and classification heads, training.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod params;
pub mod session;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{NetworkConfig, Task, Variant};
pub use model::{backbone, forward, FeaturePyramid};
pub use params::{backbone_param_count, param_specs, ParamStore};
pub use session::{Geometry, Session};
pub use train::{evaluate, predict_logits, train_toy, Sample, TrainConfig, TrainResult};
