//! Scoring a selection against ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::procedures::SelectionOutcome;

/// Per test instance: was the AI label right?
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub correct: Vec<bool>,
}

impl GroundTruth {
    pub fn new(correct: Vec<bool>) -> Self {
        Self { correct }
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// False discovery proportion, `false / max(selected, 1)`.
    pub fdp: f64,
    /// Share of the correctly labeled test instances that were selected.
    pub power: f64,
    /// Selected count over calibration plus test size.
    pub ai_labeled_ratio: f64,
    pub selected_count: usize,
    pub false_count: usize,
}

/// Evaluates `outcome` against `truth`. `n` and `m` are the calibration and
/// test sizes.
pub fn evaluate(
    outcome: &SelectionOutcome,
    truth: &GroundTruth,
    n: usize,
    m: usize,
) -> Result<EvaluationReport> {
    evaluate_indices(&outcome.selected, truth, n, m)
}

/// [`evaluate`] on a bare list of selected test indices.
pub fn evaluate_indices(
    selected: &[usize],
    truth: &GroundTruth,
    n: usize,
    m: usize,
) -> Result<EvaluationReport> {
    if truth.len() != m {
        return Err(Error::validation(format!(
            "ground truth has {} entries for {m} test instances",
            truth.len()
        )));
    }
    if let Some(j) = selected.iter().find(|&&j| j >= m) {
        return Err(Error::validation(format!(
            "selected index {j} out of range for {m} test instances"
        )));
    }
    let false_count = selected.iter().filter(|&&j| !truth.correct[j]).count();
    let true_count = selected.len() - false_count;
    let alternatives = truth.correct.iter().filter(|c| **c).count();
    Ok(EvaluationReport {
        fdp: false_count as f64 / selected.len().max(1) as f64,
        power: true_count as f64 / alternatives.max(1) as f64,
        ai_labeled_ratio: selected.len() as f64 / (n + m) as f64,
        selected_count: selected.len(),
        false_count,
    })
}
