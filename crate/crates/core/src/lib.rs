//! Volumetric 3D CNN engine and CT nodule screening pipeline.
//!
//! The crate covers the whole path from MetaImage scans to thresholded
//! malignancy maps:
//!
//! - [`volume_io`]: `.mhd`/`.raw` scans, annotation tables, world/voxel mapping
//! - [`preprocess`]: resampling, HU windowing, labeled cube extraction, NPY cache
//! - [`nn`]: layer forward/backward math, loss and initialization
//! - [`network`], [`optim`], [`train`], [`checkpoint`]: the classifier and its training loop
//! - [`inference`]: sliding-window probability maps, thresholding, denoising, projections
//! - [`gradcheck`]: finite-difference verification of every layer kind
//! - [`synth`]: seeded synthetic scans for smoke tests

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume_io;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use metrics::{log_metrics, EpochRecord};
pub use network::{Activation, LayerSpec, Network, NetworkSpec, CANONICAL_PARAM_COUNT};
pub use optim::{nesterov_step, OptimizerState};
pub use preprocess::{CubeSample, SamplerConfig};
pub use tensor::{Real, Tensor};
pub use train::{evaluate, fit, train_epoch, TrainConfig};
pub use volume_io::{Annotation, ElementType, NoduleCategory, ScanMeta, Volume};
