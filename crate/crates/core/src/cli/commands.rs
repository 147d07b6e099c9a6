use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{parse_enum, ResolvedConfig, RunConfig, SEED_ENV};
use super::io::{internal, read_bytes, write_bytes, InputDigest, Table};
use super::report::{InstanceRecord, SelectionReport, SELECTION_SCHEMA_VERSION};
use super::{
    CliError, EvaluateArgs, ScoreArgs, SelectArgs, SimulateArgs, SplitArgs, TuneArgs,
};
use crate::conformal::{conformal_p_values, CalibrationSet};
use crate::metrics::{evaluate_indices, EvaluationReport, GroundTruth};
use crate::montecarlo::{run_simulation, run_simulation_with_threads, SimulationConfig};
use crate::procedures::{run_procedure, ProcedureConfig, ProcedureKind};
use crate::regression::{build_regression_calibration, LossKind, LossSpec, RegressionCalibrationRecord};
use crate::rng::{derive_seed, stream, Purpose};
use crate::scores::{
    doctor_alpha_score, energy_score, msp_score, LogitVector, ProbabilityVector, ScoreKind,
};
use crate::tuning::{
    bootstrap_mse, select_hyperparameter, tuned_select, Grid, Hyperparameter, TuningConfig,
};

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(internal)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes to `path`, or to stdout when there is none.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => write_bytes(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|source| CliError::Io {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}

fn row_error(t: &Table, row: usize, message: impl std::fmt::Display) -> CliError {
    CliError::Parse {
        file: t.path.clone(),
        line: t.rows[row].0,
        column: None,
        message: message.to_string(),
    }
}

// ---------------------------------------------------------------- score

pub fn score(a: ScoreArgs) -> Result<(), CliError> {
    let kind: ScoreKind = parse_enum(&a.kind).map_err(|e| usage(format!("--kind: {e}")))?;
    if kind == ScoreKind::External {
        return Err(usage("--kind must be msp, energy or doctor-alpha"));
    }
    let t = Table::read(&a.input)?;
    let id = t.require("id")?;
    let probs = t.indexed_columns("prob_")?;
    let logits = t.indexed_columns("logit_")?;
    if !probs.is_empty() && !logits.is_empty() {
        return Err(CliError::Parse {
            file: t.path.clone(),
            line: 1,
            column: None,
            message: "give either prob_* or logit_* columns, not both".into(),
        });
    }
    let needed = if kind.needs_probabilities() {
        ("prob_", &probs)
    } else {
        ("logit_", &logits)
    };
    if needed.1.is_empty() {
        return Err(CliError::Parse {
            file: t.path.clone(),
            line: 1,
            column: None,
            message: format!("{} scores need {}0..{}K-1 columns", kind.as_str(), needed.0, needed.0),
        });
    }
    let passthrough: Vec<usize> = (0..t.headers.len())
        .filter(|&c| c != id && !probs.contains(&c) && !logits.contains(&c))
        .filter(|&c| t.headers[c] != "score")
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "score".to_string()];
    header.extend(passthrough.iter().map(|&c| t.headers[c].clone()));
    w.write_record(&header).map_err(internal)?;
    for row in 0..t.len() {
        let values = needed
            .1
            .iter()
            .map(|&c| t.float(row, c))
            .collect::<Result<Vec<f64>, _>>()?;
        let s = match kind {
            ScoreKind::Msp => ProbabilityVector::new(values).map(|p| msp_score(&p)),
            ScoreKind::DoctorAlpha => ProbabilityVector::new(values).map(|p| doctor_alpha_score(&p)),
            ScoreKind::Energy => LogitVector::new(values).map(|z| energy_score(&z)),
            ScoreKind::External => unreachable!("rejected above"),
        }
        .map_err(|e| row_error(&t, row, e))?;
        let s = if a.negate_score { s.negated() } else { s };
        let mut record = vec![t.text(row, id)?, s.value.to_string()];
        for &c in &passthrough {
            record.push(t.text(row, c)?);
        }
        w.write_record(&record).map_err(internal)?;
    }
    let bytes = w.into_inner().map_err(internal)?;
    emit(a.output.as_deref(), &bytes)
}

// --------------------------------------------------------------- select

/// Calibration/test row indices for a seeded split of `len` rows. Each part
/// keeps the input order.
pub fn split_indices(len: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    if len < 2 {
        return Err(usage(format!("cannot split {len} row(s) into two non-empty parts")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(usage(format!("split fraction must lie strictly inside (0, 1), got {fraction}")));
    }
    let n_cal = ((fraction * len as f64).round() as usize).clamp(1, len - 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, Purpose::Split, 0));
    let mut cal = order[..n_cal].to_vec();
    let mut test = order[n_cal..].to_vec();
    cal.sort_unstable();
    test.sort_unstable();
    Ok((cal, test))
}

/// Score column, or the interval width in regression mode when there is no
/// score column.
fn scores(t: &Table, cfg: &ResolvedConfig) -> Result<Vec<f64>, CliError> {
    let raw = match (t.column("score"), cfg.loss.is_some()) {
        (Some(c), _) => (0..t.len()).map(|r| t.float(r, c)).collect::<Result<Vec<_>, _>>()?,
        (None, true) if t.column("lower").is_some() && t.column("upper").is_some() => {
            let (lo, hi) = (t.require("lower")?, t.require("upper")?);
            (0..t.len())
                .map(|r| Ok(t.float(r, hi)? - t.float(r, lo)?))
                .collect::<Result<Vec<_>, CliError>>()?
        }
        _ => return Err(t.require("score").unwrap_err()),
    };
    Ok(if cfg.negate_score {
        raw.into_iter().map(|s| -s).collect()
    } else {
        raw
    })
}

/// Regression rows: `(y, y_hat)` with `y_hat` from its own column or the
/// midpoint of `lower`/`upper`. `None` when the table has no `y` column.
fn regression_pairs(t: &Table) -> Result<Option<Vec<(f64, f64)>>, CliError> {
    let Some(y) = t.column("y") else {
        return Ok(None);
    };
    let pairs = if let Some(yh) = t.column("y_hat") {
        (0..t.len())
            .map(|r| Ok((t.float(r, y)?, t.float(r, yh)?)))
            .collect::<Result<Vec<_>, CliError>>()?
    } else {
        let (lo, hi) = (t.require("lower")?, t.require("upper")?);
        (0..t.len())
            .map(|r| {
                let rec = RegressionCalibrationRecord::from_interval(
                    t.float(r, y)?,
                    t.float(r, lo)?,
                    t.float(r, hi)?,
                )
                .map_err(|e| row_error(t, r, e))?;
                Ok((rec.truth, rec.prediction))
            })
            .collect::<Result<Vec<_>, CliError>>()?
    };
    Ok(Some(pairs))
}

/// Per-row correctness from `correct`, `label` + `predicted`, or (with a
/// loss) `y` + `y_hat`/interval. `None` when the table carries no truth.
fn correctness(t: &Table, loss: Option<&LossSpec>) -> Result<Option<Vec<bool>>, CliError> {
    if let Some(spec) = loss {
        if let Some(pairs) = regression_pairs(t)? {
            return Ok(Some(pairs.iter().map(|&(y, yh)| spec.is_correct(y, yh)).collect()));
        }
    }
    if let Some(c) = t.column("correct") {
        return (0..t.len()).map(|r| t.boolean(r, c)).collect::<Result<_, _>>().map(Some);
    }
    match (t.column("label"), t.column("predicted")) {
        (Some(l), Some(p)) => (0..t.len())
            .map(|r| Ok(t.text(r, l)? == t.text(r, p)?))
            .collect::<Result<_, CliError>>()
            .map(Some),
        _ => Ok(None),
    }
}

fn calibration(t: &Table, cfg: &ResolvedConfig) -> Result<CalibrationSet, CliError> {
    let scores = scores(t, cfg)?;
    if let Some(spec) = &cfg.loss {
        if let Some(pairs) = regression_pairs(t)? {
            let records: Vec<RegressionCalibrationRecord> = pairs
                .iter()
                .zip(&scores)
                .map(|(&(truth, prediction), &uncertainty)| RegressionCalibrationRecord {
                    truth,
                    prediction,
                    uncertainty,
                })
                .collect();
            return Ok(build_regression_calibration(&records, spec)?);
        }
    }
    let correct = correctness(t, cfg.loss.as_ref())?.ok_or_else(|| CliError::Parse {
        file: t.path.clone(),
        line: 1,
        column: Some("correct".into()),
        message: "calibration needs `correct`, `label` and `predicted`, or `y` with --loss".into(),
    })?;
    Ok(CalibrationSet::new(scores, correct)?)
}

fn parse_opt<T: serde::de::DeserializeOwned>(flag: &str, raw: Option<&str>) -> Result<Option<T>, CliError> {
    raw.map(|r| parse_enum(r).map_err(|e| usage(format!("{flag}: {e}"))))
        .transpose()
}

pub fn select(a: SelectArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let file = a.config.as_deref().map(RunConfig::from_file).transpose()?;
    let flags = RunConfig {
        alpha: a.alpha,
        procedure: parse_opt("--procedure", a.procedure.as_deref())?,
        lambda: a.lambda,
        k0: a.k0,
        seed: a.seed,
        score_kind: None,
        negate_score: a.negate_score.then_some(true),
        loss: parse_opt::<LossKind>("--loss", a.loss.as_deref())?,
        epsilon: a.epsilon,
        bootstrap_replicates: a.bootstrap_replicates,
        split_fraction: a.split_fraction,
        split_seed: a.split_seed,
    };
    let cfg = RunConfig::resolve(file, flags, env_seed().as_deref())?;

    let (cal_table, test_table, inputs) = match (&a.calibration, &a.test, &a.input) {
        (Some(c), Some(t), None) => {
            let (c, t) = (Table::read(c)?, Table::read(t)?);
            let inputs = vec![c.digest("calibration"), t.digest("test")];
            (c, t, inputs)
        }
        (None, None, Some(i)) => {
            let fraction = cfg
                .split_fraction
                .ok_or_else(|| usage("--input needs --split-fraction"))?;
            let table = Table::read(i)?;
            let (cal, test) =
                split_indices(table.len(), fraction, cfg.split_seed.unwrap_or(cfg.seed))?;
            let inputs = vec![table.digest("input")];
            (table.subset(&cal), table.subset(&test), inputs)
        }
        _ => return Err(usage("give --calibration and --test, or --input")),
    };

    let cal = calibration(&cal_table, &cfg)?;
    let ids_col = test_table.require("id")?;
    let ids = (0..test_table.len())
        .map(|r| test_table.text(r, ids_col))
        .collect::<Result<Vec<_>, _>>()?;
    let test_scores = scores(&test_table, &cfg)?;
    let truth = correctness(&test_table, cfg.loss.as_ref())?;

    let (n, m) = (cal.n(), test_scores.len());
    let pvals = conformal_p_values(&cal, &test_scores, cfg.seed)?;
    let bootstrap_seed = derive_seed(cfg.seed, Purpose::Bootstrap, 0);
    let (tuned, outcome) = match (cfg.procedure, cfg.lambda, cfg.k0) {
        (ProcedureKind::StoreyBh, None, _) | (ProcedureKind::QuantileBh, _, None) => {
            let grid = if cfg.procedure == ProcedureKind::StoreyBh {
                Grid::default_storey()
            } else {
                Grid::default_quantile(m)
            };
            let (h, o) = tuned_select(&pvals, n, cfg.alpha, grid, cfg.bootstrap_replicates, bootstrap_seed)?;
            (Some(h), o)
        }
        _ => {
            let pc = ProcedureConfig {
                alpha: cfg.alpha,
                kind: cfg.procedure,
                lambda: cfg.lambda,
                k0: cfg.k0,
            };
            (None, run_procedure(&pvals, n, &pc)?)
        }
    };

    let evaluation = truth
        .map(|t| evaluate_indices(&outcome.selected, &GroundTruth::new(t), n, m))
        .transpose()?;
    let mut selected = vec![false; m];
    outcome.selected.iter().for_each(|&j| selected[j] = true);
    let instances = ids
        .into_iter()
        .enumerate()
        .map(|(j, id)| InstanceRecord {
            id,
            score: test_scores[j],
            p_value: pvals.p_values[j],
            tie_uniform: pvals.tie_uniforms[j],
            selected: selected[j],
        })
        .collect::<Vec<_>>();
    let warnings: Vec<String> = outcome.warnings.iter().map(ToString::to_string).collect();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let report = SelectionReport {
        schema_version: SELECTION_SCHEMA_VERSION,
        inputs,
        n,
        n0: cal.n0(),
        m,
        outcome,
        tuned_hyperparameter: tuned,
        warnings,
        instances,
        evaluation,
        config: cfg,
    };

    emit(a.report.as_deref(), &to_json(&report)?)?;
    if let Some(path) = &a.selected_ids {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id"]).map_err(internal)?;
        for r in report.instances.iter().filter(|r| r.selected) {
            w.write_record([&r.id]).map_err(internal)?;
        }
        write_bytes(path, &w.into_inner().map_err(internal)?)?;
    }
    eprintln!(
        "selected {} of {} test instances ({}, alpha = {}) in {:.3}s",
        report.outcome.selected.len(),
        m,
        report.config.procedure,
        report.config.alpha,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------- split

pub fn split(a: SplitArgs) -> Result<(), CliError> {
    let table = Table::read(&a.input)?;
    let (cal, test) = split_indices(table.len(), a.fraction, a.seed)?;
    write_bytes(&a.calibration_out, &table.subset(&cal).to_csv()?)?;
    write_bytes(&a.test_out, &table.subset(&test).to_csv()?)?;
    eprintln!("{} calibration rows, {} test rows", cal.len(), test.len());
    Ok(())
}

// ------------------------------------------------------------- simulate

const SCENARIOS: [(&str, &str); 4] = [
    ("theorem1", include_str!("../../scenarios/theorem1.json")),
    ("small-n", include_str!("../../scenarios/small_n.json")),
    ("procedures", include_str!("../../scenarios/procedures.json")),
    ("null-uniformity", include_str!("../../scenarios/null_uniformity.json")),
];

/// A bundled simulation scenario by name.
pub fn bundled_scenario(name: &str) -> Result<SimulationConfig, CliError> {
    let key = name.replace('_', "-");
    let (_, text) = SCENARIOS
        .iter()
        .find(|(n, _)| *n == key)
        .ok_or_else(|| {
            let names: Vec<&str> = SCENARIOS.iter().map(|(n, _)| *n).collect();
            usage(format!("unknown scenario `{name}`; choose one of {}", names.join(", ")))
        })?;
    serde_json::from_str(text).map_err(internal)
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg = match (&a.config, &a.scenario) {
        (Some(path), _) => {
            let bytes = read_bytes(path)?;
            serde_json::from_slice::<SimulationConfig>(&bytes).map_err(|e| CliError::Parse {
                file: path.clone(),
                line: e.line() as u64,
                column: None,
                message: e.to_string(),
            })?
        }
        (None, Some(name)) => bundled_scenario(name)?,
        (None, None) => return Err(usage("give --config or --scenario")),
    };
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let report = match a.threads {
        Some(0) => return Err(usage("--threads must be at least 1")),
        Some(t) => run_simulation_with_threads(&cfg, t)?,
        None => run_simulation(&cfg)?,
    };
    let csv_bytes = || -> Result<Vec<u8>, CliError> {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        Ok(buf)
    };
    if let Some(path) = &a.out_json {
        write_bytes(path, &to_json(&report)?)?;
    }
    match (&a.out_csv, &a.out_json) {
        (Some(path), _) => write_bytes(path, &csv_bytes()?)?,
        (None, None) => emit(None, &csv_bytes()?)?,
        (None, Some(_)) => {}
    }
    eprintln!(
        "{} trials x {} cells in {:.2}s",
        cfg.trials,
        report.cells.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

// ----------------------------------------------------------------- tune

#[derive(Debug, Serialize)]
struct TuneReport {
    input: InputDigest,
    m: usize,
    grid: Grid,
    gamma: f64,
    bootstrap_replicates: usize,
    seed: u64,
    /// Bootstrap MSE per grid entry, in grid order.
    mse: Vec<f64>,
    chosen: Hyperparameter,
}

fn read_p_values(path: &Path) -> Result<(Vec<f64>, InputDigest), CliError> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let bytes = read_bytes(path)?;
        let report: SelectionReport =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Parse {
                file: path.to_path_buf(),
                line: e.line() as u64,
                column: None,
                message: e.to_string(),
            })?;
        let digest = InputDigest {
            role: "pvalues".into(),
            path: path.display().to_string(),
            sha256: super::io::sha256_hex(&bytes),
            rows: report.instances.len(),
        };
        return Ok((report.instances.iter().map(|r| r.p_value).collect(), digest));
    }
    let t = Table::read(path)?;
    let c = t.require("p_value")?;
    let p = (0..t.len()).map(|r| t.float(r, c)).collect::<Result<Vec<_>, _>>()?;
    Ok((p, t.digest("pvalues")))
}

fn parse_grid(kind: ProcedureKind, raw: Option<&str>, m: usize) -> Result<Grid, CliError> {
    let Some(raw) = raw else {
        return Ok(match kind {
            ProcedureKind::StoreyBh => Grid::default_storey(),
            _ => Grid::default_quantile(m),
        });
    };
    let items = raw.split(',').map(str::trim).filter(|s| !s.is_empty());
    let bad = |s: &str| usage(format!("--grid: cannot parse `{s}`"));
    Ok(match kind {
        ProcedureKind::StoreyBh => Grid::Storey(
            items.map(|s| s.parse::<f64>().map_err(|_| bad(s))).collect::<Result<_, _>>()?,
        ),
        _ => Grid::Quantile(
            items.map(|s| s.parse::<usize>().map_err(|_| bad(s))).collect::<Result<_, _>>()?,
        ),
    })
}

pub fn tune(a: TuneArgs) -> Result<(), CliError> {
    let kind = match a.kind.trim().to_ascii_lowercase().as_str() {
        "storey" | "storey-bh" | "storey_bh" | "lambda" => ProcedureKind::StoreyBh,
        "quantile" | "quantile-bh" | "quantile_bh" | "k0" => ProcedureKind::QuantileBh,
        other => return Err(usage(format!("--kind must be storey or quantile, got `{other}`"))),
    };
    let (p, input) = read_p_values(&a.pvalues)?;
    let seed = match a.seed {
        Some(s) => s,
        None => RunConfig::resolve(None, RunConfig::default(), env_seed().as_deref())?.seed,
    };
    let cfg = TuningConfig {
        grid: parse_grid(kind, a.grid.as_deref(), p.len())?,
        bootstrap_replicates: a.replicates,
        gamma: a.gamma.unwrap_or(a.alpha),
        seed,
    };
    let mse = bootstrap_mse(&p, &cfg)?;
    let chosen = select_hyperparameter(&p, &cfg)?;
    match chosen {
        Hyperparameter::Lambda(l) => println!("lambda={l}"),
        Hyperparameter::K0(k) => println!("k0={k}"),
    }
    if let Some(path) = &a.output {
        let report = TuneReport {
            input,
            m: p.len(),
            grid: cfg.grid,
            gamma: cfg.gamma,
            bootstrap_replicates: cfg.bootstrap_replicates,
            seed,
            mse,
            chosen,
        };
        write_bytes(path, &to_json(&report)?)?;
    }
    Ok(())
}

// ------------------------------------------------------------- evaluate

#[derive(Debug, Serialize)]
struct EvaluationOutput {
    report: InputDigest,
    truth: InputDigest,
    #[serde(flatten)]
    metrics: EvaluationReport,
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let bytes = read_bytes(&a.report)?;
    let report: SelectionReport = serde_json::from_slice(&bytes).map_err(|e| CliError::Parse {
        file: a.report.clone(),
        line: e.line() as u64,
        column: None,
        message: e.to_string(),
    })?;
    let loss = match parse_opt::<LossKind>("--loss", a.loss.as_deref())? {
        Some(kind) => Some(LossSpec::new(kind, a.epsilon.unwrap_or(0.0))?),
        None if a.epsilon.is_some() => return Err(usage("--epsilon requires --loss")),
        None => report.config.loss,
    };
    let t = Table::read(&a.truth)?;
    let id = t.require("id")?;
    let correct = correctness(&t, loss.as_ref())?.ok_or_else(|| CliError::Parse {
        file: t.path.clone(),
        line: 1,
        column: Some("correct".into()),
        message: "truth needs `correct`, `label` and `predicted`, or `y` with a loss".into(),
    })?;
    let mut by_id = HashMap::with_capacity(t.len());
    for (row, c) in correct.into_iter().enumerate() {
        if by_id.insert(t.text(row, id)?, c).is_some() {
            return Err(row_error(&t, row, format!("duplicate id `{}`", t.text(row, id)?)));
        }
    }
    let missing: Vec<&str> = report
        .instances
        .iter()
        .filter(|r| !by_id.contains_key(&r.id))
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).copied().collect();
        return Err(CliError::Parse {
            file: t.path.clone(),
            line: 1,
            column: Some("id".into()),
            message: format!(
                "{} report id(s) have no truth row: {}{}",
                missing.len(),
                shown.join(", "),
                if missing.len() > shown.len() { ", ..." } else { "" }
            ),
        });
    }
    let truth = GroundTruth::new(report.instances.iter().map(|r| by_id[&r.id]).collect());
    let metrics = evaluate_indices(&report.selected_indices(), &truth, report.n, report.m)?;
    let out = EvaluationOutput {
        report: InputDigest {
            role: "report".into(),
            path: a.report.display().to_string(),
            sha256: super::io::sha256_hex(&bytes),
            rows: report.instances.len(),
        },
        truth: t.digest("truth"),
        metrics,
    };
    emit(a.output.as_deref(), &to_json(&out)?)
}
