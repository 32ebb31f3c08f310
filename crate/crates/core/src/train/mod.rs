//! Losses, optimizer, metrics and experiment drivers.

pub mod adamax;
pub mod checkpoint;
pub mod landscape;
pub mod loss;
pub mod metrics;
pub mod runlog;
pub mod trainer;

pub use adamax::{AdamaxParams, AdamaxState};
pub use loss::{LossKind, LossSpec};
pub use metrics::{cosine_similarity, Cosine, CosineReport};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use runlog::{MinibatchRecord, RunLog, TrainObserver};
pub use trainer::{
    batch_gradients, compare_gradients, evaluate, train, CompareConfig, CompareRecord, DataSource, Engine,
    OnlineUpdate, TrainConfig, TrainMode, TrainOutcome,
};
