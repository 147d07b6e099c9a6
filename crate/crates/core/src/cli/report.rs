//! The JSON report written by `select` and read back by `evaluate`.

use serde::{Deserialize, Serialize};

use super::config::ResolvedConfig;
use super::io::InputDigest;
use crate::metrics::EvaluationReport;
use crate::procedures::SelectionOutcome;
use crate::tuning::Hyperparameter;

pub const SELECTION_SCHEMA_VERSION: u32 = 1;

/// Everything needed to audit and replay one `select` run. The report holds
/// no timestamps, so the same inputs and seed give a byte-identical file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub schema_version: u32,
    pub inputs: Vec<InputDigest>,
    pub config: ResolvedConfig,
    /// Calibration size.
    pub n: usize,
    /// Mispredicted calibration instances.
    pub n0: usize,
    /// Test size.
    pub m: usize,
    pub outcome: SelectionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuned_hyperparameter: Option<Hyperparameter>,
    pub warnings: Vec<String>,
    pub instances: Vec<InstanceRecord>,
    /// Present when the test file carried ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvaluationReport>,
}

/// One test instance, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub score: f64,
    pub p_value: f64,
    pub tie_uniform: f64,
    pub selected: bool,
}

impl SelectionReport {
    pub fn selected_indices(&self) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, r)| r.selected)
            .map(|(i, _)| i)
            .collect()
    }
}
