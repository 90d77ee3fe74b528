//! Optimizer, objectives, the training loop, sweeps and all-at-once training.

pub mod config;
pub mod objective;
pub mod optim;
pub mod sweep;
pub mod trainer;

pub use config::{OrderPolicy, TrainConfig};
pub use objective::{loss_cloze, loss_pooled, loss_token_level, Objective};
pub use optim::{lr_linear, AdamW};
pub use sweep::{sweep, SweepSpec, TrialRow};
pub use trainer::{train, train_aao, train_with_templates, TraceRow, TrainOutcome};
