//! Synthetic trials for checking FDR control empirically.
//!
//! Each trial draws `n + m` i.i.d. instances. An instance is mispredicted
//! with probability `p_null` and then draws its score from
//! `incorrect_dist`, otherwise from `correct_dist`. The first `n` form the
//! calibration set, the remaining `m` the test batch. Every configured
//! procedure runs at every level in `alpha_grid` and is scored against the
//! known truth.
//!
//! Trial `t` uses random streams keyed by `(seed, t)` only, and results are
//! reduced in trial order, so a report does not depend on the thread count.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_p_values, CalibrationSet, PValueSet};
use crate::error::{check_level, Error, Result};
use crate::metrics::{evaluate, GroundTruth};
use crate::procedures::{run_procedure, ProcedureConfig, ProcedureKind, SelectionOutcome};
use crate::regression::{regression_select, LossKind, LossSpec, RegressionCalibrationRecord};
use crate::rng::{self, derive_seed, Purpose};
use crate::tuning::{tuned_select, Grid, Hyperparameter, DEFAULT_BOOTSTRAP_REPLICATES};

/// Version tag written into every simulation report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `[1 - (1 - p)^(n + 1)] * alpha`, the FDR bound for conformal labeling
/// when a test instance is mispredicted with probability `p`.
pub fn theorem_bound(p: f64, n: usize, alpha: f64) -> f64 {
    (1.0 - (1.0 - p).powi(n as i32 + 1)) * alpha
}

/// Score distribution for one class of instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScoreDistribution {
    Beta { a: f64, b: f64 },
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

impl ScoreDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScoreDistribution::Beta { a, b } => {
                a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()
            }
            ScoreDistribution::Normal { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
            ScoreDistribution::Uniform { low, high } => {
                low.is_finite() && high.is_finite() && low < high
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("invalid score distribution {self:?}")))
        }
    }

    fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        let err = |e: &dyn fmt::Display| Error::validation(format!("{self:?}: {e}"));
        Ok(match *self {
            ScoreDistribution::Beta { a, b } => Sampler::Beta(Beta::new(a, b).map_err(|e| err(&e))?),
            ScoreDistribution::Normal { mean, sd } => {
                Sampler::Normal(Normal::new(mean, sd).map_err(|e| err(&e))?)
            }
            ScoreDistribution::Uniform { low, high } => {
                Sampler::Uniform(Uniform::new(low, high).map_err(|e| err(&e))?)
            }
        })
    }
}

enum Sampler {
    Beta(Beta<f64>),
    Normal(Normal<f64>),
    Uniform(Uniform<f64>),
}

impl Sampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Beta(d) => d.sample(rng),
            Sampler::Normal(d) => d.sample(rng),
            Sampler::Uniform(d) => d.sample(rng),
        }
    }
}

/// A procedure to run in simulation. Storey-BH and Quantile-BH without an
/// explicit hyperparameter are bootstrap-tuned in every trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimProcedure {
    pub kind: ProcedureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<usize>,
}

impl SimProcedure {
    pub fn new(kind: ProcedureKind) -> Self {
        Self {
            kind,
            lambda: None,
            k0: None,
        }
    }

    fn is_tuned(&self) -> bool {
        matches!(
            (self.kind, self.lambda, self.k0),
            (ProcedureKind::StoreyBh, None, _) | (ProcedureKind::QuantileBh, _, None)
        )
    }

    /// Human-readable label used in the CSV output.
    pub fn label(&self) -> String {
        match (self.kind, self.lambda, self.k0) {
            (ProcedureKind::StoreyBh, Some(l), _) => format!("storey_bh(lambda={l})"),
            (ProcedureKind::QuantileBh, _, Some(k)) => format!("quantile_bh(k0={k})"),
            (kind, _, _) if self.is_tuned() => format!("{kind}(tuned)"),
            (kind, _, _) => kind.to_string(),
        }
    }

    fn config(&self, alpha: f64) -> ProcedureConfig {
        ProcedureConfig {
            alpha,
            kind: self.kind,
            lambda: self.lambda,
            k0: self.k0,
        }
    }
}

/// Simulation settings. Fields missing from a JSON scenario take the
/// [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Calibration size.
    pub n: usize,
    /// Test batch size.
    pub m: usize,
    /// Probability that an instance is mispredicted.
    pub p_null: f64,
    pub correct_dist: ScoreDistribution,
    pub incorrect_dist: ScoreDistribution,
    pub trials: usize,
    pub alpha_grid: Vec<f64>,
    pub procedures: Vec<SimProcedure>,
    pub seed: u64,
    pub bootstrap_replicates: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 500,
            m: 500,
            p_null: 0.3,
            correct_dist: ScoreDistribution::Beta { a: 2.0, b: 8.0 },
            incorrect_dist: ScoreDistribution::Beta { a: 8.0, b: 2.0 },
            trials: 1000,
            alpha_grid: vec![0.1],
            procedures: vec![SimProcedure::new(ProcedureKind::ConformalLabeling)],
            seed: 0,
            bootstrap_replicates: DEFAULT_BOOTSTRAP_REPLICATES,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.trials == 0 {
            return Err(Error::validation("n, m and trials must all be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.p_null) {
            return Err(Error::validation(format!(
                "p_null = {} outside [0, 1]",
                self.p_null
            )));
        }
        self.correct_dist.validate()?;
        self.incorrect_dist.validate()?;
        if self.alpha_grid.is_empty() || self.procedures.is_empty() {
            return Err(Error::validation("alpha_grid and procedures must be non-empty"));
        }
        for &alpha in &self.alpha_grid {
            check_level("alpha", alpha)?;
            for proc in &self.procedures {
                if !proc.is_tuned() {
                    proc.config(alpha).validate(self.m)?;
                }
            }
        }
        if self.bootstrap_replicates == 0 {
            return Err(Error::validation("bootstrap_replicates must be at least 1"));
        }
        Ok(())
    }
}

/// One synthetic trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub calibration: CalibrationSet,
    pub test_scores: Vec<f64>,
    pub truth: GroundTruth,
}

/// Draws trial `trial_index`; deterministic in `(cfg.seed, trial_index)`.
pub fn generate_trial(cfg: &SimulationConfig, trial_index: usize) -> Result<Trial> {
    let correct_dist = cfg.correct_dist.sampler()?;
    let incorrect_dist = cfg.incorrect_dist.sampler()?;
    if !(0.0..=1.0).contains(&cfg.p_null) {
        return Err(Error::validation(format!("p_null = {} outside [0, 1]", cfg.p_null)));
    }
    let mut rng = rng::stream(cfg.seed, Purpose::Trial, trial_index as u64);
    let mut scores = Vec::with_capacity(cfg.n + cfg.m);
    let mut correct = Vec::with_capacity(cfg.n + cfg.m);
    for _ in 0..cfg.n + cfg.m {
        let null = rng.random_bool(cfg.p_null);
        let dist = if null { &incorrect_dist } else { &correct_dist };
        scores.push(dist.sample(&mut rng));
        correct.push(!null);
    }
    let test_scores = scores.split_off(cfg.n);
    let test_truth = correct.split_off(cfg.n);
    Ok(Trial {
        calibration: CalibrationSet::new(scores, correct)?,
        test_scores,
        truth: GroundTruth::new(test_truth),
    })
}

/// Seed for the tie-break draws of trial `t`.
pub fn trial_p_value_seed(seed: u64, trial_index: usize) -> u64 {
    derive_seed(seed, Purpose::TieBreak, trial_index as u64)
}

/// Trial data plus its conformal p-values.
pub fn trial_p_values(cfg: &SimulationConfig, trial_index: usize) -> Result<(Trial, PValueSet)> {
    let trial = generate_trial(cfg, trial_index)?;
    let pvals = conformal_p_values(
        &trial.calibration,
        &trial.test_scores,
        trial_p_value_seed(cfg.seed, trial_index),
    )?;
    Ok((trial, pvals))
}

/// Mean and standard error of one statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(T)`; 0 for a single trial.
    pub std_error: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let t = values.len() as f64;
        let mean = values.iter().sum::<f64>() / t;
        let std_error = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1.0);
            (var / t).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error }
    }
}

/// Per-trial statistics and their aggregates for one procedure at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub procedure: SimProcedure,
    pub label: String,
    pub alpha: f64,
    pub fdp: Vec<f64>,
    pub power: Vec<f64>,
    pub ai_labeled_ratio: Vec<f64>,
    /// Tuned hyperparameter per trial, for bootstrap-tuned procedures.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hyperparameters: Vec<Hyperparameter>,
    /// Mean FDP, the empirical FDR.
    pub fdr: Summary,
    pub mean_power: Summary,
    pub mean_ratio: Summary,
    pub theorem_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema_version: u32,
    pub config: SimulationConfig,
    pub cells: Vec<TrialReport>,
}

impl SimulationReport {
    pub fn cell(&self, kind: ProcedureKind, alpha: f64) -> Option<&TrialReport> {
        self.cells
            .iter()
            .find(|c| c.procedure.kind == kind && c.alpha == alpha)
    }

    /// Flat CSV, one row per procedure x alpha x statistic.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::validation(format!("writing CSV: {e}"));
        w.write_record([
            "procedure",
            "alpha",
            "statistic",
            "mean",
            "std_error",
            "theorem_bound",
            "trials",
        ])
        .map_err(io)?;
        for cell in &self.cells {
            for (name, s) in [
                ("fdr", cell.fdr),
                ("power", cell.mean_power),
                ("ai_labeled_ratio", cell.mean_ratio),
            ] {
                w.write_record([
                    cell.label.clone(),
                    cell.alpha.to_string(),
                    name.to_string(),
                    s.mean.to_string(),
                    s.std_error.to_string(),
                    cell.theorem_bound.to_string(),
                    cell.fdp.len().to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()
            .map_err(|e| Error::validation(format!("writing CSV: {e}")))?;
        Ok(())
    }
}

struct CellResult {
    fdp: f64,
    power: f64,
    ratio: f64,
    hyperparameter: Option<Hyperparameter>,
}

fn run_cell(
    cfg: &SimulationConfig,
    trial_index: usize,
    cell_index: usize,
    proc: &SimProcedure,
    alpha: f64,
    pvals: &PValueSet,
    trial: &Trial,
) -> Result<CellResult> {
    let n = trial.calibration.n();
    let (hyperparameter, outcome): (Option<Hyperparameter>, SelectionOutcome) = if proc.is_tuned()
    {
        let grid = match proc.kind {
            ProcedureKind::StoreyBh => Grid::default_storey(),
            _ => Grid::default_quantile(cfg.m),
        };
        let key = (trial_index * cfg.procedures.len() * cfg.alpha_grid.len() + cell_index) as u64;
        let seed = derive_seed(cfg.seed, Purpose::Bootstrap, key);
        let (h, out) = tuned_select(pvals, n, alpha, grid, cfg.bootstrap_replicates, seed)?;
        (Some(h), out)
    } else {
        (None, run_procedure(pvals, n, &proc.config(alpha))?)
    };
    let eval = evaluate(&outcome, &trial.truth, n, cfg.m)?;
    Ok(CellResult {
        fdp: eval.fdp,
        power: eval.power,
        ratio: eval.ai_labeled_ratio,
        hyperparameter,
    })
}

fn run_trial(cfg: &SimulationConfig, trial_index: usize) -> Result<Vec<CellResult>> {
    let (trial, pvals) = trial_p_values(cfg, trial_index)?;
    let mut cells = Vec::with_capacity(cfg.procedures.len() * cfg.alpha_grid.len());
    for (pi, proc) in cfg.procedures.iter().enumerate() {
        for (ai, &alpha) in cfg.alpha_grid.iter().enumerate() {
            let cell_index = pi * cfg.alpha_grid.len() + ai;
            cells.push(run_cell(cfg, trial_index, cell_index, proc, alpha, &pvals, &trial)?);
        }
    }
    Ok(cells)
}

/// Runs every trial on the current rayon pool and aggregates per cell.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let per_trial: Vec<Vec<CellResult>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for (pi, proc) in cfg.procedures.iter().enumerate() {
        for (ai, &alpha) in cfg.alpha_grid.iter().enumerate() {
            let idx = pi * cfg.alpha_grid.len() + ai;
            let column = |f: fn(&CellResult) -> f64| -> Vec<f64> {
                per_trial.iter().map(|cells| f(&cells[idx])).collect()
            };
            let fdp = column(|c| c.fdp);
            let power = column(|c| c.power);
            let ratio = column(|c| c.ratio);
            cells.push(TrialReport {
                procedure: *proc,
                label: proc.label(),
                alpha,
                fdr: Summary::of(&fdp),
                mean_power: Summary::of(&power),
                mean_ratio: Summary::of(&ratio),
                hyperparameters: per_trial
                    .iter()
                    .filter_map(|cells| cells[idx].hyperparameter)
                    .collect(),
                fdp,
                power,
                ai_labeled_ratio: ratio,
                theorem_bound: theorem_bound(cfg.p_null, cfg.n, alpha),
            });
        }
    }
    Ok(SimulationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        cells,
    })
}

/// [`run_simulation`] on a dedicated pool of `threads` workers.
pub fn run_simulation_with_threads(
    cfg: &SimulationConfig,
    threads: usize,
) -> Result<SimulationReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    pool.install(|| run_simulation(cfg))
}

/// Conformal p-values of every mispredicted test instance, pooled over all
/// trials in trial order.
pub fn pooled_null_p_values(cfg: &SimulationConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let per_trial: Vec<Vec<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let (trial, pvals) = trial_p_values(cfg, t)?;
            Ok(pvals
                .p_values
                .iter()
                .zip(&trial.truth.correct)
                .filter(|(_, c)| !**c)
                .map(|(p, _)| *p)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

/// Empirical CDF of `values` at `u`.
pub fn ecdf(values: &[f64], u: f64) -> f64 {
    values.iter().filter(|&&v| v <= u).count() as f64 / values.len() as f64
}

/// Synthetic regression task with a known null rate.
///
/// Each instance has uncertainty `s ~ Uniform(0, 1)`, prediction 0 and
/// target `s * V` with `V ~ Uniform(-1, 1)`; its absolute error exceeds
/// `t` with probability `1 - t + t ln t`. With squared error the tolerance
/// `epsilon = t^2` gives the same null rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSimulationConfig {
    pub n: usize,
    pub m: usize,
    pub loss: LossSpec,
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Probability that `|s * V| > t` in the synthetic regression task.
pub fn regression_null_rate(t: f64) -> f64 {
    if t <= 0.0 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        1.0 - t + t * t.ln()
    }
}

/// The absolute-error tolerance whose null rate is `p`, by bisection.
pub fn absolute_tolerance_for_null_rate(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(format!("null rate {p} outside (0, 1)")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if regression_null_rate(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn regression_instance<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let s: f64 = rng.random();
    let v: f64 = rng.random_range(-1.0..1.0);
    (s, s * v)
}

/// Runs the synthetic regression task through [`regression_select`].
pub fn run_regression_simulation(cfg: &RegressionSimulationConfig) -> Result<TrialReport> {
    if cfg.n == 0 || cfg.m == 0 || cfg.trials == 0 {
        return Err(Error::validation("n, m and trials must all be at least 1"));
    }
    check_level("alpha", cfg.alpha)?;
    let results: Vec<(f64, f64, f64)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(cfg.seed, Purpose::Trial, t as u64);
            let records: Vec<RegressionCalibrationRecord> = (0..cfg.n)
                .map(|_| {
                    let (s, y) = regression_instance(&mut rng);
                    RegressionCalibrationRecord {
                        truth: y,
                        prediction: 0.0,
                        uncertainty: s,
                    }
                })
                .collect();
            let test: Vec<(f64, f64)> = (0..cfg.m).map(|_| regression_instance(&mut rng)).collect();
            let uncertainties: Vec<f64> = test.iter().map(|(s, _)| *s).collect();
            let truth = GroundTruth::new(
                test.iter()
                    .map(|(_, y)| cfg.loss.is_correct(*y, 0.0))
                    .collect(),
            );
            let sel = regression_select(
                &records,
                &uncertainties,
                &cfg.loss,
                cfg.alpha,
                trial_p_value_seed(cfg.seed, t),
            )?;
            let eval = evaluate(&sel.outcome, &truth, cfg.n, cfg.m)?;
            Ok((eval.fdp, eval.power, eval.ai_labeled_ratio))
        })
        .collect::<Result<_>>()?;
    let fdp: Vec<f64> = results.iter().map(|r| r.0).collect();
    let power: Vec<f64> = results.iter().map(|r| r.1).collect();
    let ratio: Vec<f64> = results.iter().map(|r| r.2).collect();
    let p_null = match cfg.loss.loss_kind {
        LossKind::AbsoluteError => regression_null_rate(cfg.loss.epsilon),
        LossKind::SquaredError => regression_null_rate(cfg.loss.epsilon.sqrt()),
        // s * V is continuous, so every prediction misses
        LossKind::ZeroOne => 1.0,
    };
    Ok(TrialReport {
        procedure: SimProcedure::new(ProcedureKind::ConformalLabeling),
        label: "conformal_labeling(regression)".into(),
        alpha: cfg.alpha,
        fdr: Summary::of(&fdp),
        mean_power: Summary::of(&power),
        mean_ratio: Summary::of(&ratio),
        hyperparameters: Vec::new(),
        fdp,
        power,
        ai_labeled_ratio: ratio,
        theorem_bound: theorem_bound(p_null, cfg.n, cfg.alpha),
    })
}
