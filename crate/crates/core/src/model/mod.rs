//! Full network, toy data, training and the ablation harness.

pub mod ablate;
pub mod config;
pub mod data;
pub mod net;
pub mod train;

pub use ablate::{ablate, rows_tsv, summarize, summary_tsv, AblationCell, AblationGrid, AblationRow, CellSummary};
pub use config::{ModelConfig, OrderStrategy, Task, TransitionKind};
pub use data::{cube_faces, ToyKind, ToyTask, GROUP_RADIUS};
pub use net::{argmax_rows, derive_seed, BlockOrder, Geometry, Model};
pub use train::{
    accuracy, cosine_lr, overfit, sample_gradients, train_toy, AdamW, EpochMetrics, Optimizer, StepMetrics,
    TrainConfig, TrainReport,
};

#[cfg(test)]
mod tests;
