//! Referring image segmentation with stage-divided vision and language
//! encoders, bidirectional early fusion and per-stage feature alignment,
//! trained from scratch on synthetic scenes.

pub mod alignment;
pub mod attention;
pub mod config;
pub mod decoder;
pub mod error;
pub mod graph;
pub mod harness;
pub mod language;
pub mod metrics;
pub mod params;
pub mod raster;
pub mod synthdata;
pub mod tensor;
pub mod vision;

pub use config::{AlignMode, AlignNorm, FusionDirection, ModelConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use metrics::EvalReport;
pub use params::{init_params, Manifest, ModelParams};
pub use synthdata::{Scene, Vocab};
pub use tensor::Mat;
