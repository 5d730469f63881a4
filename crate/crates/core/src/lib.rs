//! Credit risk scoring engine.
//!
//! Trains a mean-field variational Bayesian MLP and a fairness-constrained
//! Newton-boosted tree ensemble on week-indexed tabular data, fuses the two
//! under a drift check, temperature-calibrates the fused probability and
//! audits the result for discrimination, calibration, stability and group
//! fairness.
//!
//! The modules mirror the stages of the scoring pipeline:
//!
//! * [`data`]: case rows, auxiliary tables, CSV ingestion, chronological
//!   split and the synthetic drift/bias generator.
//! * [`preprocess`]: train-only aggregation, imputation, frequency encoding
//!   and standardization.
//! * [`bnn`]: variational Bayesian network with Monte-Carlo prediction.
//! * [`gbdt`]: exact-greedy Newton boosting with group reweighting.
//! * [`shift`]: PSI/KS drift test and convex score fusion.
//! * [`calibration`]: temperature scaling.
//! * [`metrics`]: ranking, calibration, stability and fairness metrics.
//! * [`explain`]: path-dependent TreeSHAP and its brute-force oracle.
//! * [`pipeline`]: end-to-end orchestration, persistence and scoring.

// Negated float comparisons are used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bnn;
pub mod calibration;
pub mod data;
pub mod error;
pub mod explain;
pub mod gbdt;
pub mod math;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod shift;

pub use bnn::{BnnConfig, BnnModel, McPrediction};
pub use calibration::TemperatureModel;
pub use data::{AuxTable, CaseRow, Dataset, SynthConfig, TimeSplit, Value};
pub use error::{Error, ErrorKind, Result};
pub use explain::Attribution;
pub use gbdt::{GapMetric, GbdtModel, GbdtParams};
pub use metrics::{FairnessGaps, MetricBundle, StabilityReport};
pub use pipeline::{RunConfig, ScoreReport};
pub use preprocess::{AggregationPlan, Aggregator, PreprocessorState};
pub use shift::{DriftReport, FusionChoice};

/// Version stamped into every persisted artifact.
pub const SCHEMA_VERSION: u32 = 1;
