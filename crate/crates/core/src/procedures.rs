//! Step-up selection rules over p-values.
//!
//! Every procedure here is the same step-up search with a different overall
//! level `c`: find the largest rank `j` with `p_(j) <= c * j / m` and select
//! the `j` smallest p-values.
//!
//! | procedure          | level `c`                     |
//! |--------------------|-------------------------------|
//! | conformal labeling | `alpha * (n + 1) / (n0 + 1)`  |
//! | BH                 | `alpha`                       |
//! | Storey-BH          | `alpha / pi0_storey(lambda)`  |
//! | Quantile-BH        | `alpha / pi0_quantile(k0)`    |

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conformal::PValueSet;
use crate::error::{check_level, Error, Result};

/// Ceiling for the adaptive procedures' effective level.
pub const MAX_ADAPTIVE_LEVEL: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcedureKind {
    ConformalLabeling,
    Bh,
    StoreyBh,
    QuantileBh,
}

impl ProcedureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProcedureKind::ConformalLabeling => "conformal_labeling",
            ProcedureKind::Bh => "bh",
            ProcedureKind::StoreyBh => "storey_bh",
            ProcedureKind::QuantileBh => "quantile_bh",
        }
    }
}

impl fmt::Display for ProcedureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A procedure and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcedureConfig {
    pub alpha: f64,
    pub kind: ProcedureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<usize>,
}

impl ProcedureConfig {
    pub fn conformal_labeling(alpha: f64) -> Self {
        Self {
            alpha,
            kind: ProcedureKind::ConformalLabeling,
            lambda: None,
            k0: None,
        }
    }

    pub fn bh(alpha: f64) -> Self {
        Self {
            alpha,
            kind: ProcedureKind::Bh,
            lambda: None,
            k0: None,
        }
    }

    pub fn storey_bh(alpha: f64, lambda: f64) -> Self {
        Self {
            alpha,
            kind: ProcedureKind::StoreyBh,
            lambda: Some(lambda),
            k0: None,
        }
    }

    pub fn quantile_bh(alpha: f64, k0: usize) -> Self {
        Self {
            alpha,
            kind: ProcedureKind::QuantileBh,
            lambda: None,
            k0: Some(k0),
        }
    }

    /// Checks the level and that exactly the hyperparameters the kind needs
    /// are present.
    pub fn validate(&self, m: usize) -> Result<()> {
        check_level("alpha", self.alpha)?;
        match (self.kind, self.lambda, self.k0) {
            (ProcedureKind::ConformalLabeling | ProcedureKind::Bh, None, None) => Ok(()),
            (ProcedureKind::StoreyBh, Some(lambda), None) => check_level("lambda", lambda),
            (ProcedureKind::QuantileBh, None, Some(k0)) => check_rank(k0, m),
            (kind, lambda, k0) => Err(Error::validation(format!(
                "{kind} does not accept lambda={lambda:?}, k0={k0:?}"
            ))),
        }
    }
}

/// Non-fatal conditions worth surfacing in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum Warning {
    /// The calibration set has no mispredicted instances, so every
    /// conformal p-value is pure noise.
    EmptyNullCalibration,
    /// An adaptive level `alpha / pi0` reached 1 and was capped.
    LevelCapped { requested: f64 },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::EmptyNullCalibration => f.write_str(
                "calibration set contains no mispredicted instances (n0 = 0); \
                 p-values equal their tie-break draws",
            ),
            Warning::LevelCapped { requested } => write!(
                f,
                "effective level {requested} capped at {MAX_ADAPTIVE_LEVEL}"
            ),
        }
    }
}

/// The result of running a procedure over a batch of p-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    /// Selected test indices, ascending.
    pub selected: Vec<usize>,
    /// The step-up cutoff rank `j*`; 0 when nothing passes.
    pub cutoff_index: usize,
    /// `p_(j*)`, or 0 when nothing is selected.
    pub realized_threshold: f64,
    /// The level `c` of the per-rank threshold `c * j / m`.
    pub effective_level: f64,
    pub config: ProcedureConfig,
    pub n_used: Option<usize>,
    pub n0_used: Option<usize>,
    pub pi0_estimate: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<Warning>,
}

impl SelectionOutcome {
    pub fn selected_count(&self) -> usize {
        self.selected.len()
    }

    fn from_step_up(p: &[f64], level: f64, config: ProcedureConfig) -> Self {
        let (cutoff_index, realized_threshold) = step_up(p, level);
        let selected = if cutoff_index == 0 {
            Vec::new()
        } else {
            p.iter()
                .enumerate()
                .filter(|(_, v)| **v <= realized_threshold)
                .map(|(j, _)| j)
                .collect()
        };
        debug_assert_eq!(selected.len(), cutoff_index);
        Self {
            selected,
            cutoff_index,
            realized_threshold,
            effective_level: level,
            config,
            n_used: None,
            n0_used: None,
            pi0_estimate: None,
            warnings: Vec::new(),
        }
    }
}

/// Largest `j` with `p_(j) <= level * j / m`, and `p_(j)` itself; `(0, 0.0)`
/// when no rank passes.
pub fn step_up(p: &[f64], level: f64) -> (usize, f64) {
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .rev()
        .find(|(i, v)| **v <= rank_threshold(level, i + 1, m))
        .map_or((0, 0.0), |(i, v)| (i + 1, *v))
}

/// Per-rank threshold `level * rank / m`.
#[inline]
pub fn rank_threshold(level: f64, rank: usize, m: f64) -> f64 {
    level * rank as f64 / m
}

fn check_p_values(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::validation("no p-values supplied"));
    }
    match p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        Some((j, v)) => Err(Error::validation(format!(
            "p-value {j} is {v}, outside [0, 1]"
        ))),
        None => Ok(()),
    }
}

fn check_rank(k0: usize, m: usize) -> Result<()> {
    if (1..=m).contains(&k0) {
        Ok(())
    } else {
        Err(Error::validation(format!("k0 = {k0} outside [1, {m}]")))
    }
}

/// The conformal labeling step-up rule with per-rank threshold
/// `alpha * j * (n + 1) / (m * (n0 + 1))`.
pub fn conformal_labeling_select(
    pvals: &PValueSet,
    n: usize,
    alpha: f64,
) -> Result<SelectionOutcome> {
    check_level("alpha", alpha)?;
    check_p_values(pvals.values())?;
    if n < pvals.n0_used {
        return Err(Error::validation(format!(
            "calibration size n = {n} is smaller than n0 = {}",
            pvals.n0_used
        )));
    }
    let level = conformal_labeling_level(alpha, n, pvals.n0_used);
    let mut outcome = SelectionOutcome::from_step_up(
        pvals.values(),
        level,
        ProcedureConfig::conformal_labeling(alpha),
    );
    outcome.n_used = Some(n);
    outcome.n0_used = Some(pvals.n0_used);
    outcome.warnings = pvals.warnings();
    Ok(outcome)
}

/// `alpha * (n + 1) / (n0 + 1)`: the BH level conformal labeling runs at.
pub fn conformal_labeling_level(alpha: f64, n: usize, n0: usize) -> f64 {
    alpha * (n + 1) as f64 / (n0 + 1) as f64
}

/// Benjamini-Hochberg at level `alpha`.
pub fn bh_select(p: &[f64], alpha: f64) -> Result<SelectionOutcome> {
    check_level("alpha", alpha)?;
    check_p_values(p)?;
    Ok(SelectionOutcome::from_step_up(p, alpha, ProcedureConfig::bh(alpha)))
}

/// Storey's null-proportion estimate `(1 + #{p >= lambda}) / (m (1 - lambda))`,
/// clipped into `[1/m, 1]`.
pub fn storey_pi0(p: &[f64], lambda: f64) -> Result<f64> {
    check_level("lambda", lambda)?;
    check_p_values(p)?;
    let tail = p.iter().filter(|&&v| v >= lambda).count();
    Ok(storey_pi0_from_tail(tail, p.len(), lambda))
}

/// Storey estimate given the count of p-values at or above `lambda`.
pub(crate) fn storey_pi0_from_tail(tail: usize, m: usize, lambda: f64) -> f64 {
    clip_pi0((1 + tail) as f64 / (m as f64 * (1.0 - lambda)), m)
}

/// Quantile null-proportion estimate `(m - k0 + 1) / (m (1 - p_(k0)))`,
/// clipped into `[1/m, 1]`. Undefined when `p_(k0) = 1`.
pub fn quantile_pi0(p: &[f64], k0: usize) -> Result<f64> {
    check_p_values(p)?;
    check_rank(k0, p.len())?;
    let mut scratch = p.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k0 - 1, f64::total_cmp);
    quantile_pi0_from_order_stat(*kth, k0, p.len())
}

/// Quantile estimate given the already-located order statistic `p_(k0)`.
pub(crate) fn quantile_pi0_from_order_stat(kth: f64, k0: usize, m: usize) -> Result<f64> {
    if kth >= 1.0 {
        return Err(Error::Degenerate(format!(
            "quantile estimator undefined: p_({k0}) = {kth}"
        )));
    }
    let raw = (m - k0 + 1) as f64 / (m as f64 * (1.0 - kth));
    Ok(clip_pi0(raw, m))
}

fn clip_pi0(raw: f64, m: usize) -> f64 {
    raw.clamp(1.0 / m as f64, 1.0)
}

/// BH at level `alpha / pi0`, capped at [`MAX_ADAPTIVE_LEVEL`].
pub fn adaptive_bh_select(p: &[f64], alpha: f64, pi0: f64) -> Result<SelectionOutcome> {
    check_level("alpha", alpha)?;
    check_p_values(p)?;
    if !(pi0 > 0.0 && pi0 <= 1.0) {
        return Err(Error::validation(format!("pi0 = {pi0} outside (0, 1]")));
    }
    let requested = alpha / pi0;
    let (level, warnings) = if requested >= MAX_ADAPTIVE_LEVEL {
        (MAX_ADAPTIVE_LEVEL, vec![Warning::LevelCapped { requested }])
    } else {
        (requested, Vec::new())
    };
    let mut outcome = SelectionOutcome::from_step_up(p, level, ProcedureConfig::bh(alpha));
    outcome.pi0_estimate = Some(pi0);
    outcome.warnings = warnings;
    Ok(outcome)
}

/// Storey-BH: adaptive BH with the Storey estimate at `lambda`.
pub fn storey_bh_select(p: &[f64], alpha: f64, lambda: f64) -> Result<SelectionOutcome> {
    let pi0 = storey_pi0(p, lambda)?;
    let mut outcome = adaptive_bh_select(p, alpha, pi0)?;
    outcome.config = ProcedureConfig::storey_bh(alpha, lambda);
    Ok(outcome)
}

/// Quantile-BH: adaptive BH with the quantile estimate at rank `k0`.
pub fn quantile_bh_select(p: &[f64], alpha: f64, k0: usize) -> Result<SelectionOutcome> {
    let pi0 = quantile_pi0(p, k0)?;
    let mut outcome = adaptive_bh_select(p, alpha, pi0)?;
    outcome.config = ProcedureConfig::quantile_bh(alpha, k0);
    Ok(outcome)
}

/// Runs the procedure described by `config`. `n` is the calibration size,
/// used only by conformal labeling.
pub fn run_procedure(
    pvals: &PValueSet,
    n: usize,
    config: &ProcedureConfig,
) -> Result<SelectionOutcome> {
    config.validate(pvals.len())?;
    let mut outcome = match config.kind {
        ProcedureKind::ConformalLabeling => return conformal_labeling_select(pvals, n, config.alpha),
        ProcedureKind::Bh => bh_select(pvals.values(), config.alpha)?,
        ProcedureKind::StoreyBh => {
            storey_bh_select(pvals.values(), config.alpha, config.lambda.unwrap_or_default())?
        }
        ProcedureKind::QuantileBh => {
            quantile_bh_select(pvals.values(), config.alpha, config.k0.unwrap_or_default())?
        }
    };
    outcome.n_used = Some(n);
    outcome.n0_used = Some(pvals.n0_used);
    let mut warnings = pvals.warnings();
    warnings.append(&mut outcome.warnings);
    outcome.warnings = warnings;
    Ok(outcome)
}
