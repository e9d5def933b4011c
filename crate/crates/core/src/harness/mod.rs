//! Training, evaluation and experiment plumbing.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod schedule;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use eval::{evaluate, EvalReport, Which};
pub use schedule::{lr_at, ParamGroup, TrainConfig};
pub use train::{LogLine, StepLog, Trainer};
