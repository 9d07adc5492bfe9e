//! Multi-task road perception: a shared encoder with gated task-specific
//! fusion, an adaptive multi-scale segmentation decoder, a query-based
//! detection decoder, and a fairness-corrected lane evaluation toolkit.

pub mod det_decoder;
pub mod encoder;
pub mod error;
pub mod gca;
pub mod grad_analysis;
pub mod lane_eval;
pub mod losses;
pub mod matching;
pub mod nn;
pub mod pipeline;
pub mod seg_decoder;
pub mod varstore;

pub use error::{Error, Result};
