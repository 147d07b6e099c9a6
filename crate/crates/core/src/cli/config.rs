//! Run configuration: command-line flags over a JSON config file over the
//! `CONFLAB_SEED` environment variable over built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::io::read_bytes;
use super::CliError;
use crate::procedures::ProcedureKind;
use crate::regression::{LossKind, LossSpec};
use crate::scores::ScoreKind;
use crate::tuning::DEFAULT_BOOTSTRAP_REPLICATES;

/// Environment variable that supplies the seed when neither a flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "CONFLAB_SEED";

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_SEED: u64 = 0;

/// One layer of settings. Absent fields fall through to the layer below.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: Option<f64>,
    pub procedure: Option<ProcedureKind>,
    pub lambda: Option<f64>,
    pub k0: Option<usize>,
    pub seed: Option<u64>,
    pub score_kind: Option<ScoreKind>,
    pub negate_score: Option<bool>,
    pub loss: Option<LossKind>,
    pub epsilon: Option<f64>,
    pub bootstrap_replicates: Option<usize>,
    pub split_fraction: Option<f64>,
    pub split_seed: Option<u64>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let bytes = read_bytes(path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Parse {
            file: path.to_path_buf(),
            line: e.line() as u64,
            column: None,
            message: e.to_string(),
        })
    }

    /// `self` with every field that `over` sets replaced.
    pub fn overlay(self, over: RunConfig) -> RunConfig {
        RunConfig {
            alpha: over.alpha.or(self.alpha),
            procedure: over.procedure.or(self.procedure),
            lambda: over.lambda.or(self.lambda),
            k0: over.k0.or(self.k0),
            seed: over.seed.or(self.seed),
            score_kind: over.score_kind.or(self.score_kind),
            negate_score: over.negate_score.or(self.negate_score),
            loss: over.loss.or(self.loss),
            epsilon: over.epsilon.or(self.epsilon),
            bootstrap_replicates: over.bootstrap_replicates.or(self.bootstrap_replicates),
            split_fraction: over.split_fraction.or(self.split_fraction),
            split_seed: over.split_seed.or(self.split_seed),
        }
    }

    /// Merges `file` and `flags` and fills the remaining gaps from the
    /// environment and the defaults.
    pub fn resolve(
        file: Option<RunConfig>,
        flags: RunConfig,
        env_seed: Option<&str>,
    ) -> Result<ResolvedConfig, CliError> {
        let merged = file.unwrap_or_default().overlay(flags);
        let seed = match (merged.seed, env_seed) {
            (Some(s), _) => s,
            (None, Some(raw)) => raw.trim().parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}=`{raw}` is not an unsigned 64-bit integer"))
            })?,
            (None, None) => DEFAULT_SEED,
        };
        let loss = match (merged.loss, merged.epsilon) {
            (Some(kind), eps) => Some(
                LossSpec::new(kind, eps.unwrap_or(0.0)).map_err(|e| CliError::Usage(e.to_string()))?,
            ),
            (None, Some(_)) => {
                return Err(CliError::Usage("--epsilon requires --loss".into()));
            }
            (None, None) => None,
        };
        let resolved = ResolvedConfig {
            alpha: merged.alpha.unwrap_or(DEFAULT_ALPHA),
            procedure: merged.procedure.unwrap_or(ProcedureKind::ConformalLabeling),
            lambda: merged.lambda,
            k0: merged.k0,
            seed,
            score_kind: merged.score_kind,
            negate_score: merged.negate_score.unwrap_or(false),
            loss,
            bootstrap_replicates: merged
                .bootstrap_replicates
                .unwrap_or(DEFAULT_BOOTSTRAP_REPLICATES),
            split_fraction: merged.split_fraction,
            split_seed: merged.split_seed,
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

/// Settings after layering; echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub alpha: f64,
    pub procedure: ProcedureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k0: Option<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_kind: Option<ScoreKind>,
    pub negate_score: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    pub bootstrap_replicates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

impl ResolvedConfig {
    fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return usage(format!("alpha must lie strictly inside (0, 1), got {}", self.alpha));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l < 1.0) {
                return usage(format!("lambda must lie strictly inside (0, 1), got {l}"));
            }
            if self.procedure != ProcedureKind::StoreyBh {
                return usage("lambda only applies to storey_bh".into());
            }
        }
        if self.k0.is_some() && self.procedure != ProcedureKind::QuantileBh {
            return usage("k0 only applies to quantile_bh".into());
        }
        if self.bootstrap_replicates == 0 {
            return usage("bootstrap replicates must be at least 1".into());
        }
        if let Some(f) = self.split_fraction {
            if !(f > 0.0 && f < 1.0) {
                return usage(format!("split fraction must lie strictly inside (0, 1), got {f}"));
            }
        }
        Ok(())
    }
}

/// Parses a CLI enum value through its serde name, accepting `-` for `_`.
pub fn parse_enum<T: DeserializeOwned>(raw: &str) -> Result<T, String> {
    let normalized = raw.trim().to_ascii_lowercase().replace('-', "_");
    serde_json::from_value(serde_json::Value::String(normalized))
        .map_err(|_| format!("unrecognized value `{raw}`"))
}
