//! Conformal labeling for real-valued targets.
//!
//! An instance counts as mislabeled when its loss exceeds a tolerance
//! `epsilon`. With the zero-one loss and `epsilon = 0` this is exactly the
//! classification setting. The uncertainty score is supplied by the caller
//! (an interval width, a negated confidence, ...).

use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_p_values, CalibrationSet, PValueSet};
use crate::error::{Error, Result};
use crate::procedures::{conformal_labeling_select, SelectionOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    AbsoluteError,
    ZeroOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub loss_kind: LossKind,
    pub epsilon: f64,
}

impl LossSpec {
    pub fn new(loss_kind: LossKind, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::validation(format!(
                "epsilon must be finite and nonnegative, got {epsilon}"
            )));
        }
        Ok(Self { loss_kind, epsilon })
    }

    /// The classification null: zero-one loss with zero tolerance.
    pub fn classification() -> Self {
        Self {
            loss_kind: LossKind::ZeroOne,
            epsilon: 0.0,
        }
    }

    /// True when the prediction is within tolerance.
    pub fn is_correct(&self, y: f64, y_hat: f64) -> bool {
        loss(self.loss_kind, y, y_hat) <= self.epsilon
    }
}

pub fn loss(kind: LossKind, y: f64, y_hat: f64) -> f64 {
    match kind {
        LossKind::SquaredError => (y - y_hat).powi(2),
        LossKind::AbsoluteError => (y - y_hat).abs(),
        LossKind::ZeroOne => {
            if y == y_hat {
                0.0
            } else {
                1.0
            }
        }
    }
}

/// One labeled calibration instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionCalibrationRecord {
    pub truth: f64,
    pub prediction: f64,
    pub uncertainty: f64,
}

impl RegressionCalibrationRecord {
    /// From a prediction interval `[lower, upper]`: the prediction is the
    /// midpoint and the uncertainty the width.
    pub fn from_interval(truth: f64, lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower > upper {
            return Err(Error::validation(format!(
                "interval [{lower}, {upper}] is empty"
            )));
        }
        Ok(Self {
            truth,
            prediction: (lower + upper) / 2.0,
            uncertainty: upper - lower,
        })
    }
}

/// Builds the calibration set whose mislabeled subset is `loss > epsilon`.
pub fn build_regression_calibration(
    records: &[RegressionCalibrationRecord],
    spec: &LossSpec,
) -> Result<CalibrationSet> {
    if records.is_empty() {
        return Err(Error::validation("no calibration records"));
    }
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| {
        !(r.truth.is_finite() && r.prediction.is_finite() && r.uncertainty.is_finite())
    }) {
        return Err(Error::validation(format!(
            "calibration record {i} has a non-finite field: {r:?}"
        )));
    }
    CalibrationSet::new(
        records.iter().map(|r| r.uncertainty).collect(),
        records
            .iter()
            .map(|r| spec.is_correct(r.truth, r.prediction))
            .collect(),
    )
}

/// The result of [`regression_select`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSelection {
    pub spec: LossSpec,
    pub p_values: PValueSet,
    pub outcome: SelectionOutcome,
}

/// Calibration, conformal p-values and the conformal labeling step-up rule
/// in one call.
pub fn regression_select(
    records: &[RegressionCalibrationRecord],
    test_uncertainties: &[f64],
    spec: &LossSpec,
    alpha: f64,
    seed: u64,
) -> Result<RegressionSelection> {
    let cal = build_regression_calibration(records, spec)?;
    let p_values = conformal_p_values(&cal, test_uncertainties, seed)?;
    let outcome = conformal_labeling_select(&p_values, cal.n(), alpha)?;
    Ok(RegressionSelection {
        spec: *spec,
        p_values,
        outcome,
    })
}
