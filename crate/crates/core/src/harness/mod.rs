//! Experiment harness: configuration, data preparation, training,
//! evaluation, the fusion grid and feature ablation runners, and reports.

pub mod config;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod report;
pub mod train;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use data::{Dataset, Example};
pub use eval::{evaluate, evaluate_checkpoint, Decoder, EvalResult, InstanceLog, ModelDecoder, OracleDecoder};
pub use experiments::{ablation_run, fusion_grid, ExperimentReport, ExperimentRow};
pub use train::{train, EvalPoint, RunReport, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] crate::m4c::ModelError),
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] crate::params::CheckpointError),
    #[error("non-finite loss or gradient at update {step}; batch dump: {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Applies `f` to every item on up to `workers` threads and returns the
/// results in input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    };
    let workers = workers.min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
