//! Randomized conformal p-values against the mislabeled calibration subset.
//!
//! For a test score `s`, with `L` calibration null scores strictly below `s`
//! and `E` equal to it,
//!
//! ```text
//! p = (L + (1 + E) * U) / (n0 + 1),    U ~ Uniform(0, 1]
//! ```
//!
//! A small p-value means the test instance looks less uncertain than the
//! instances the model is known to get wrong.

use rand::distr::OpenClosed01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::procedures::Warning;
use crate::rng::{self, Purpose};

/// Labeled calibration data: one score per instance and whether the model's
/// prediction for it was right.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    scores: Vec<f64>,
    correct: Vec<bool>,
}

impl CalibrationSet {
    pub fn new(scores: Vec<f64>, correct: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::validation("calibration set is empty"));
        }
        if scores.len() != correct.len() {
            return Err(Error::validation(format!(
                "calibration has {} scores but {} correctness flags",
                scores.len(),
                correct.len()
            )));
        }
        if let Some((i, s)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
            return Err(Error::validation(format!(
                "calibration score {i} is not finite ({s})"
            )));
        }
        Ok(Self { scores, correct })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn correct(&self) -> &[bool] {
        &self.correct
    }

    /// Total calibration size.
    pub fn n(&self) -> usize {
        self.scores.len()
    }

    /// Number of mispredicted calibration instances.
    pub fn n0(&self) -> usize {
        self.correct.iter().filter(|c| !**c).count()
    }

    /// Scores of the mispredicted instances in ascending order.
    pub fn null_reference(&self) -> NullReference {
        let mut sorted: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.correct)
            .filter(|(_, c)| !**c)
            .map(|(s, _)| *s)
            .collect();
        sorted.sort_by(f64::total_cmp);
        NullReference { sorted }
    }
}

/// Sorted null calibration scores, ready for rank queries.
#[derive(Debug, Clone, PartialEq)]
pub struct NullReference {
    sorted: Vec<f64>,
}

impl NullReference {
    pub fn n0(&self) -> usize {
        self.sorted.len()
    }

    /// `(L, E)`: counts strictly below and exactly equal to `score`.
    pub fn rank(&self, score: f64) -> (usize, usize) {
        let below = self.sorted.partition_point(|&s| s < score);
        let through = self.sorted.partition_point(|&s| s <= score);
        (below, through - below)
    }

    /// The conformal p-value of `score` given the tie-break draw `u`.
    pub fn p_value(&self, score: f64, u: f64) -> f64 {
        let (below, equal) = self.rank(score);
        (below as f64 + (1 + equal) as f64 * u) / (self.n0() + 1) as f64
    }
}

/// Conformal p-values for a test batch together with everything needed to
/// replay them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueSet {
    pub p_values: Vec<f64>,
    pub tie_uniforms: Vec<f64>,
    pub n0_used: usize,
    pub seed: u64,
}

impl PValueSet {
    pub fn len(&self) -> usize {
        self.p_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.p_values
    }

    /// With no mispredicted calibration instances every p-value is just its
    /// tie-break draw and carries no information.
    pub fn warnings(&self) -> Vec<Warning> {
        if self.n0_used == 0 {
            vec![Warning::EmptyNullCalibration]
        } else {
            Vec::new()
        }
    }
}

/// The tie-break uniform for test instance `index`, drawn from `(0, 1]`.
///
/// Keyed by `(seed, index)` alone, so adding or removing other test
/// instances leaves it unchanged.
pub fn tie_uniform(seed: u64, index: usize) -> f64 {
    rng::stream(seed, Purpose::TieBreak, index as u64).sample(OpenClosed01)
}

/// Computes conformal p-values for `test_scores` with seeded tie-breaking.
pub fn conformal_p_values(
    cal: &CalibrationSet,
    test_scores: &[f64],
    seed: u64,
) -> Result<PValueSet> {
    let uniforms: Vec<f64> = (0..test_scores.len())
        .map(|j| tie_uniform(seed, j))
        .collect();
    let mut set = p_values_with_uniforms(cal, test_scores, &uniforms)?;
    set.seed = seed;
    Ok(set)
}

/// Computes conformal p-values with caller-supplied tie-break draws. The
/// returned set has `seed = 0`.
pub fn p_values_with_uniforms(
    cal: &CalibrationSet,
    test_scores: &[f64],
    uniforms: &[f64],
) -> Result<PValueSet> {
    if test_scores.is_empty() {
        return Err(Error::validation("test batch is empty"));
    }
    if uniforms.len() != test_scores.len() {
        return Err(Error::validation(format!(
            "{} tie-break draws for {} test scores",
            uniforms.len(),
            test_scores.len()
        )));
    }
    if let Some((j, s)) = test_scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::validation(format!("test score {j} is not finite ({s})")));
    }
    if let Some((j, u)) = uniforms
        .iter()
        .enumerate()
        .find(|(_, u)| !(0.0..=1.0).contains(*u))
    {
        return Err(Error::validation(format!(
            "tie-break draw {j} is {u}, outside [0, 1]"
        )));
    }
    let reference = cal.null_reference();
    let p_values = test_scores
        .iter()
        .zip(uniforms)
        .map(|(&s, &u)| reference.p_value(s, u))
        .collect();
    Ok(PValueSet {
        p_values,
        tie_uniforms: uniforms.to_vec(),
        n0_used: reference.n0(),
        seed: 0,
    })
}
