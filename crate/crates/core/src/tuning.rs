//! Bootstrap selection of the Storey `lambda` and the Quantile-BH `k0`.
//!
//! For each candidate on the grid the positive-FDR estimate
//!
//! ```text
//! pFDR(gamma) = pi0 * gamma / ( P(p <= gamma) * (1 - (1 - gamma)^m) )
//! ```
//!
//! is computed on `B` bootstrap resamples of the p-values. The candidate
//! whose replicate estimates have the smallest mean squared deviation from
//! the smallest estimate on the original sample wins.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::PValueSet;
use crate::error::{check_level, Error, Result};
use crate::procedures::{
    adaptive_bh_select, quantile_pi0_from_order_stat, run_procedure, storey_pi0_from_tail,
    ProcedureConfig, SelectionOutcome,
};
use crate::rng::{self, Purpose};

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 200;

/// Candidate hyperparameters for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Grid {
    /// Storey `lambda` values in (0, 1).
    Storey(Vec<f64>),
    /// Quantile ranks `k0` in [1, m].
    Quantile(Vec<usize>),
}

impl Grid {
    /// `{0.1, 0.2, ..., 0.9}`.
    pub fn default_storey() -> Self {
        Grid::Storey((1..=9).map(|k| k as f64 / 10.0).collect())
    }

    /// Decile ranks `ceil(0.1 m), ..., ceil(0.9 m)`, deduplicated.
    pub fn default_quantile(m: usize) -> Self {
        let mut ranks: Vec<usize> = (1..=9).map(|k| (k * m).div_ceil(10).max(1)).collect();
        ranks.dedup();
        Grid::Quantile(ranks)
    }

    pub fn len(&self) -> usize {
        match self {
            Grid::Storey(v) => v.len(),
            Grid::Quantile(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, i: usize) -> Hyperparameter {
        match self {
            Grid::Storey(v) => Hyperparameter::Lambda(v[i]),
            Grid::Quantile(v) => Hyperparameter::K0(v[i]),
        }
    }

    fn value(&self, i: usize) -> f64 {
        match self {
            Grid::Storey(v) => v[i],
            Grid::Quantile(v) => v[i] as f64,
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::validation("hyperparameter grid is empty"));
        }
        match self {
            Grid::Storey(v) => v.iter().try_for_each(|&l| check_level("lambda", l)),
            Grid::Quantile(v) => match v.iter().find(|k| !(1..=m).contains(*k)) {
                Some(k) => Err(Error::validation(format!("k0 = {k} outside [1, {m}]"))),
                None => Ok(()),
            },
        }
    }
}

/// A chosen hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyperparameter {
    Lambda(f64),
    K0(usize),
}

impl Hyperparameter {
    /// The adaptive procedure that uses this hyperparameter at level `alpha`.
    pub fn procedure(self, alpha: f64) -> ProcedureConfig {
        match self {
            Hyperparameter::Lambda(l) => ProcedureConfig::storey_bh(alpha, l),
            Hyperparameter::K0(k) => ProcedureConfig::quantile_bh(alpha, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub grid: Grid,
    pub bootstrap_replicates: usize,
    /// Where the pFDR is evaluated; usually the target FDR level.
    pub gamma: f64,
    pub seed: u64,
}

impl TuningConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        self.grid.validate(m)?;
        if self.bootstrap_replicates == 0 {
            return Err(Error::validation("bootstrap_replicates must be at least 1"));
        }
        check_level("gamma", self.gamma)
    }
}

/// Positive-FDR estimate at `gamma`. The empirical `P(p <= gamma)` is
/// floored at `1/m`.
pub fn pfdr_estimate(p: &[f64], pi0: f64, gamma: f64) -> Result<f64> {
    check_level("gamma", gamma)?;
    if !(pi0 > 0.0 && pi0 <= 1.0) {
        return Err(Error::validation(format!("pi0 = {pi0} outside (0, 1]")));
    }
    if p.is_empty() {
        return Err(Error::validation("no p-values supplied"));
    }
    let below = p.iter().filter(|&&v| v <= gamma).count();
    Ok(pfdr_from_count(pi0, gamma, below, p.len()))
}

fn pfdr_from_count(pi0: f64, gamma: f64, below: usize, m: usize) -> f64 {
    let mf = m as f64;
    let fraction = (below as f64 / mf).max(1.0 / mf);
    let at_least_one = 1.0 - (1.0 - gamma).powi(m as i32);
    pi0 * gamma / (fraction * at_least_one)
}

/// pFDR for every grid entry on an ascending-sorted sample.
fn pfdr_over_grid(sorted: &[f64], grid: &Grid, gamma: f64) -> Vec<f64> {
    let m = sorted.len();
    let below = sorted.partition_point(|&v| v <= gamma);
    let pi0s: Vec<f64> = match grid {
        Grid::Storey(lambdas) => lambdas
            .iter()
            .map(|&l| storey_pi0_from_tail(m - sorted.partition_point(|&v| v < l), m, l))
            .collect(),
        // a resample can put p_(k0) at 1; the estimator is then treated as 1
        Grid::Quantile(ranks) => ranks
            .iter()
            .map(|&k| quantile_pi0_from_order_stat(sorted[k - 1], k, m).unwrap_or(1.0))
            .collect(),
    };
    pi0s.into_iter()
        .map(|pi0| pfdr_from_count(pi0, gamma, below, m))
        .collect()
}

/// Bootstrap MSE of each grid entry, in grid order.
pub fn bootstrap_mse(p: &[f64], cfg: &TuningConfig) -> Result<Vec<f64>> {
    cfg.validate(p.len())?;
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let target = pfdr_over_grid(&sorted, &cfg.grid, cfg.gamma)
        .into_iter()
        .fold(f64::INFINITY, f64::min);

    let m = p.len();
    let replicates: Vec<Vec<f64>> = (0..cfg.bootstrap_replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(cfg.seed, Purpose::Bootstrap, b as u64);
            let mut sample: Vec<f64> = (0..m).map(|_| p[rng.random_range(0..m)]).collect();
            sample.sort_by(f64::total_cmp);
            pfdr_over_grid(&sample, &cfg.grid, cfg.gamma)
        })
        .collect();

    let mut mse = vec![0.0; cfg.grid.len()];
    for estimates in &replicates {
        for (acc, est) in mse.iter_mut().zip(estimates) {
            *acc += (est - target).powi(2);
        }
    }
    let b = cfg.bootstrap_replicates as f64;
    mse.iter_mut().for_each(|v| *v /= b);
    Ok(mse)
}

/// Picks the grid entry with the smallest bootstrap MSE. Exact ties go to
/// the smaller value.
pub fn select_hyperparameter(p: &[f64], cfg: &TuningConfig) -> Result<Hyperparameter> {
    cfg.validate(p.len())?;
    if cfg.grid.len() == 1 {
        return Ok(cfg.grid.get(0));
    }
    let mse = bootstrap_mse(p, cfg)?;
    let best = (0..mse.len())
        .min_by(|&a, &b| {
            mse[a]
                .total_cmp(&mse[b])
                .then(cfg.grid.value(a).total_cmp(&cfg.grid.value(b)))
        })
        .expect("grid is non-empty");
    Ok(cfg.grid.get(best))
}

/// Tunes the hyperparameter on `pvals` (with `gamma = alpha`) and runs the
/// matching adaptive procedure.
///
/// If the chosen `k0` sits on a p-value of exactly 1 the quantile estimate
/// is undefined and `pi0 = 1` is used, which reduces to plain BH.
pub fn tuned_select(
    pvals: &PValueSet,
    n: usize,
    alpha: f64,
    grid: Grid,
    replicates: usize,
    seed: u64,
) -> Result<(Hyperparameter, SelectionOutcome)> {
    let cfg = TuningConfig {
        grid,
        bootstrap_replicates: replicates,
        gamma: alpha,
        seed,
    };
    let choice = select_hyperparameter(pvals.values(), &cfg)?;
    let config = choice.procedure(alpha);
    let outcome = match run_procedure(pvals, n, &config) {
        Err(Error::Degenerate(_)) => {
            let mut out = adaptive_bh_select(pvals.values(), alpha, 1.0)?;
            out.config = config;
            out.n_used = Some(n);
            out.n0_used = Some(pvals.n0_used);
            out
        }
        other => other?,
    };
    Ok((choice, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_p_values(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| rng.random::<f64>()).collect()
    }

    fn cfg(grid: Grid) -> TuningConfig {
        TuningConfig {
            grid,
            bootstrap_replicates: 200,
            gamma: 0.1,
            seed: 42,
        }
    }

    #[test]
    fn pfdr_hand_values() {
        let mut p = vec![0.05; 5];
        p.extend([0.5; 5]);
        let v = pfdr_estimate(&p, 1.0, 0.1).unwrap();
        let expected = 0.1 / (0.5 * (1.0 - 0.9f64.powi(10)));
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.307068).abs() < 1e-6);

        let v = pfdr_estimate(&[0.5; 10], 1.0, 0.1).unwrap();
        assert!((v - 0.1 / (0.1 * (1.0 - 0.9f64.powi(10)))).abs() < 1e-12);
        assert!((v - 1.535340).abs() < 1e-6);

        let tiny = pfdr_estimate(&p, 1e-300, 0.1).unwrap();
        assert!(tiny < 1e-299);
    }

    #[test]
    fn pfdr_is_monotone_in_pi0() {
        let p = uniform_p_values(50, 1);
        let mut last = 0.0;
        for k in 1..=20 {
            let v = pfdr_estimate(&p, k as f64 / 20.0, 0.2).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn pfdr_validation() {
        assert!(pfdr_estimate(&[0.1], 1.0, 0.0).is_err());
        assert!(pfdr_estimate(&[0.1], 0.0, 0.1).is_err());
        assert!(pfdr_estimate(&[], 1.0, 0.1).is_err());
    }

    #[test]
    fn singleton_grid_is_returned() {
        let p = uniform_p_values(20, 2);
        assert_eq!(
            select_hyperparameter(&p, &cfg(Grid::Storey(vec![0.35]))).unwrap(),
            Hyperparameter::Lambda(0.35)
        );
        assert_eq!(
            select_hyperparameter(&p, &cfg(Grid::Quantile(vec![7]))).unwrap(),
            Hyperparameter::K0(7)
        );
    }

    #[test]
    fn equal_mse_goes_to_smaller_value() {
        // every p-value sits above every lambda: all estimates clip to 1
        let p = vec![0.95; 30];
        let c = cfg(Grid::Storey(vec![0.7, 0.3, 0.5]));
        let mse = bootstrap_mse(&p, &c).unwrap();
        assert_eq!(mse[0], mse[1]);
        assert_eq!(mse[1], mse[2]);
        assert_eq!(select_hyperparameter(&p, &c).unwrap(), Hyperparameter::Lambda(0.3));
    }

    #[test]
    fn choice_is_deterministic_and_on_grid() {
        let p = uniform_p_values(200, 3);
        for grid in [Grid::default_storey(), Grid::default_quantile(200)] {
            let c = cfg(grid.clone());
            let a = select_hyperparameter(&p, &c).unwrap();
            let b = select_hyperparameter(&p, &c).unwrap();
            assert_eq!(a, b);
            let on_grid = match (a, &grid) {
                (Hyperparameter::Lambda(l), Grid::Storey(v)) => v.contains(&l),
                (Hyperparameter::K0(k), Grid::Quantile(v)) => v.contains(&k),
                _ => false,
            };
            assert!(on_grid);
        }
    }

    #[test]
    fn golden_storey_choice() {
        let p = uniform_p_values(100, 2024);
        let chosen = select_hyperparameter(&p, &cfg(Grid::default_storey())).unwrap();
        assert_eq!(chosen, Hyperparameter::Lambda(0.7));
        let mse = bootstrap_mse(&p, &cfg(Grid::default_storey())).unwrap();
        assert_eq!(mse[6].to_bits(), 1.5549162485505272f64.to_bits());
    }

    #[test]
    fn default_grids() {
        assert_eq!(
            Grid::default_storey(),
            Grid::Storey(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
        );
        assert_eq!(
            Grid::default_quantile(500),
            Grid::Quantile(vec![50, 100, 150, 200, 250, 300, 350, 400, 450])
        );
        assert_eq!(
            Grid::default_quantile(15),
            Grid::Quantile(vec![2, 3, 5, 6, 8, 9, 11, 12, 14])
        );
        assert_eq!(Grid::default_quantile(3), Grid::Quantile(vec![1, 2, 3]));
    }

    #[test]
    fn config_validation() {
        let p = uniform_p_values(10, 4);
        assert!(select_hyperparameter(&p, &cfg(Grid::Storey(vec![]))).is_err());
        assert!(select_hyperparameter(&p, &cfg(Grid::Storey(vec![1.0]))).is_err());
        assert!(select_hyperparameter(&p, &cfg(Grid::Quantile(vec![0]))).is_err());
        assert!(select_hyperparameter(&p, &cfg(Grid::Quantile(vec![11]))).is_err());
        let mut c = cfg(Grid::default_storey());
        c.bootstrap_replicates = 0;
        assert!(select_hyperparameter(&p, &c).is_err());
    }

    #[test]
    fn tuned_select_runs_the_matching_procedure() {
        let p = uniform_p_values(40, 5);
        let pvals = PValueSet {
            tie_uniforms: p.clone(),
            p_values: p,
            n0_used: 10,
            seed: 5,
        };
        let (h, out) = tuned_select(&pvals, 30, 0.1, Grid::default_storey(), 50, 9).unwrap();
        assert_eq!(out.config, h.procedure(0.1));
        assert!(out.pi0_estimate.is_some());
        let (h, out) = tuned_select(&pvals, 30, 0.1, Grid::default_quantile(40), 50, 9).unwrap();
        assert_eq!(out.config, h.procedure(0.1));
    }

    #[test]
    fn degenerate_quantile_falls_back_to_bh() {
        let pvals = PValueSet {
            p_values: vec![1.0; 6],
            tie_uniforms: vec![1.0; 6],
            n0_used: 3,
            seed: 0,
        };
        let (h, out) = tuned_select(&pvals, 9, 0.1, Grid::Quantile(vec![3]), 10, 1).unwrap();
        assert_eq!(h, Hyperparameter::K0(3));
        assert_eq!(out.pi0_estimate, Some(1.0));
        assert!(out.selected.is_empty());
    }
}
