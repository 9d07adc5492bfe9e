//! Training/evaluation orchestration: configuration, synthetic and
//! BDD100K-format data ingestion, the assembled multi-task model, SGD
//! training with warmup + cosine schedule, checkpointing, metric
//! evaluation, threshold sweeps, and single-image inference.

pub mod bdd;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod infer;
pub mod model;
pub mod synth;
pub mod train;
