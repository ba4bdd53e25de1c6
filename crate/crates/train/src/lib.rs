//! Tiny transformer classifier built from integer layers, its training loop,
//! and the desk-scale experiments around it.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{load_dataset, Batch, Dataset, DatasetSource, DatasetSpec, Example, SyntheticTask};
pub use error::{DataError, Result, TrainError};
pub use model::{Model, Precision, TinyTransformerConfig};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{train, train_checkpointed, train_with, LogRecord, RunMetrics, TrainConfig};
