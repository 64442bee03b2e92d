//! Orchestration: forward pipeline, training, ablations and checkpoints.

pub mod ablation;
pub mod checkpoint;
pub mod optim;
pub mod pipeline;
pub mod train;

pub use ablation::{grid_cells, run_ablation_suite, AblationCell, AblationTable, Grid};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{poly_lr, AdamW};
pub use pipeline::{compute_losses, forward_pipeline, Batch, ForwardOutput, LossReport, Model, StageFeatures};
pub use train::{epoch_log_csv, evaluate_scenes, load_configs, predict_scenes, train, EpochLog, TrainConfig, TrainState};
