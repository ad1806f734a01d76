//! Adaptive token merging for vision transformers.
//!
//! Tokens whose keys are similar enough are averaged together after each
//! block's attention, with per-layer thresholds and a merge count shared
//! across the batch. Also includes the analytic cost model, numerical checks
//! of the merging-error bounds and the file formats used by the CLI.

pub mod cost;
pub mod error;
pub mod io;
pub mod merging;
pub mod model;
pub mod numeric;
pub mod theory;

pub use error::{AtmError, Result};
pub use merging::{MergeSchedule, ThresholdParams};
pub use model::{forward, ForwardInput, ForwardOutput, ModelConfig, ModelWeights, TokenBatch, Trace};
