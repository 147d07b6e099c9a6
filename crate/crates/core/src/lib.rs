//! Conformal labeling: decide which AI-predicted labels can be accepted
//! without human review while keeping the false discovery rate (the
//! expected fraction of wrong labels among the accepted ones) below a
//! target level.
//!
//! The pipeline is
//!
//! 1. [`scores`]: turn model outputs into uncertainty scores (larger means
//!    more uncertain);
//! 2. [`conformal`]: compare each test score against the scores of the
//!    calibration instances the model got wrong, producing randomized
//!    conformal p-values;
//! 3. [`procedures`]: run a step-up rule over the p-values to pick the
//!    instances whose labels are trusted.
//!
//! [`metrics`] scores a selection against ground truth, [`tuning`] picks
//! hyperparameters for the adaptive baselines, [`regression`] extends the
//! method to real-valued targets with a loss tolerance, and [`montecarlo`]
//! checks the FDR guarantee on synthetic data.

#![forbid(unsafe_code)]

pub mod cli;
pub mod conformal;
pub mod error;
pub mod metrics;
pub mod montecarlo;
pub mod procedures;
pub mod regression;
pub mod rng;
pub mod scores;
pub mod tuning;

pub use conformal::{conformal_p_values, CalibrationSet, PValueSet};
pub use error::{Error, Result};
pub use metrics::{evaluate, EvaluationReport, GroundTruth};
pub use procedures::{
    adaptive_bh_select, bh_select, conformal_labeling_select, quantile_pi0, storey_pi0,
    ProcedureConfig, ProcedureKind, SelectionOutcome, Warning,
};
pub use scores::{LogitVector, ProbabilityVector, ScoreKind, UncertaintyScore};
