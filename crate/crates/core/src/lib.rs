//! Unsupervised ranking of generative multimodal models from inference logs.
//!
//! Proxy scores are computed per (model, dataset) cell from token
//! log-probabilities, normalized entropies, or agreement between stochastic
//! resamples, then checked against ground-truth accuracy with rank statistics.

pub mod consistency;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod rankeval;
pub mod synth;
pub mod transfer;
pub mod uncertainty;

pub use error::{Error, Result};
pub use model::{
    method_direction, CellKey, Direction, EmbeddingSet, GenerationRecord, MethodKind,
    PerformanceTable, ResampleEvent, ScoreTable, TaskKind, TokenEvent,
};
