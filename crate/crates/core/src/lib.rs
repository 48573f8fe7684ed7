//! Higher-order (second and third order) power leakage analysis for masked
//! assembly kernels.
//!
//! The crate is organised along the processing chain:
//!
//! * [`tracestore`]: binary trace and component files, column streaming.
//! * [`stats`]: streaming moments, Welch's t-test, corrected thresholds, TOST.
//! * [`combiner`]: on-the-fly multivariate (mean-centred product) t-tests.
//! * [`emulator`]: a Thumb-subset interpreter that emits a component-wise
//!   power model for every executed instruction.
//! * [`rootcause`]: component elimination with a Monte-Carlo fallback.
//! * [`rewriter`]: barrier insertion and assembly re-emission.
//! * [`pipeline`]: the iterative detect, root-cause and fix loop plus reports.

pub mod combiner;
pub mod corpus;
pub mod emulator;
pub mod error;
pub mod pipeline;
pub mod rewriter;
pub mod rootcause;
pub mod stats;
pub mod tracestore;

pub use error::{Error, Result};
