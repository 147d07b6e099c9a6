//! Uncertainty scores computed from model outputs.
//!
//! All scores follow one orientation: a larger value means the model is
//! less sure of its prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a probability vector's sum from 1. Loose enough for
/// float32 model exports.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;

/// Which function produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Msp,
    Energy,
    DoctorAlpha,
    External,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Energy => "energy",
            ScoreKind::DoctorAlpha => "doctor_alpha",
            ScoreKind::External => "external",
        }
    }

    /// True for scores computed from probabilities rather than logits.
    pub fn needs_probabilities(self) -> bool {
        matches!(self, ScoreKind::Msp | ScoreKind::DoctorAlpha)
    }
}

/// A scalar uncertainty score tagged with the function that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub value: f64,
    pub kind: ScoreKind,
}

impl UncertaintyScore {
    /// Wraps an externally computed score.
    pub fn external(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::validation(format!("score {value} is not finite")));
        }
        Ok(Self {
            value,
            kind: ScoreKind::External,
        })
    }

    /// Flips the orientation, for confidences where larger means more sure.
    pub fn negated(self) -> Self {
        Self {
            value: -self.value,
            kind: self.kind,
        }
    }
}

/// Per-class probabilities for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::validation(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::validation(format!(
                "probability entry {i} is {v}, outside [0, 1]"
            )));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(Error::validation(format!(
                "probabilities sum to {total}, expected 1 within {PROBABILITY_SUM_TOLERANCE}"
            )));
        }
        Ok(Self(values))
    }

    pub fn class_count(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Per-class logits for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("logit vector is empty"));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::validation(format!("logit entry {i} is {v}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Maximum softmax probability score, `1 - max_y p_y`.
pub fn msp_score(p: &ProbabilityVector) -> UncertaintyScore {
    let top = p.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    UncertaintyScore {
        value: 1.0 - top,
        kind: ScoreKind::Msp,
    }
}

/// Energy score, `log sum_y exp(z_y)`, evaluated with the maximum logit
/// factored out so no intermediate overflows.
pub fn energy_score(z: &LogitVector) -> UncertaintyScore {
    let top = z.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail: f64 = z.0.iter().map(|v| (v - top).exp()).sum();
    UncertaintyScore {
        value: top + tail.ln(),
        kind: ScoreKind::Energy,
    }
}

/// DOCTOR-alpha score in Gini-impurity form, `1 - sum_y p_y^2`.
///
/// The squares are summed in ascending order so the result does not depend
/// on the class order.
pub fn doctor_alpha_score(p: &ProbabilityVector) -> UncertaintyScore {
    let mut squares: Vec<f64> = p.0.iter().map(|v| v * v).collect();
    squares.sort_by(f64::total_cmp);
    let concentration: f64 = squares.iter().sum();
    UncertaintyScore {
        value: 1.0 - concentration,
        kind: ScoreKind::DoctorAlpha,
    }
}
