//! Seeded parameter sweeps over the solvers, aggregated into quartile
//! statistics against Monte Carlo references.
//!
//! Every experiment varies one parameter of the base configuration. Each
//! (method, setting, run) triple gets its own seed, `seed_base` plus its
//! linear index, so no two runs share randomness. Raw runs are written to
//! `runs/<family>.csv` before the summary `<family>.csv` is derived from
//! them.

mod report;
mod stats;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

pub use report::{
    aggregate, emit_report, format_table, parse_runs_csv, parse_summary_csv, runs_csv, summary_csv, RunRecord,
    SummaryRow, QUANTILE_NOTE, RUN_COLUMNS, SUMMARY_COLUMNS,
};
pub use stats::{iqr, median_pe, quartiles, sqrt_scaling_fit, ScalingFit};

use crate::config::{hex_digest, Config};
use crate::error::{Error, Result};
use crate::models::{DiscountDriver, HestonParams};
use crate::oracle::{mc_price, McEstimate};
use crate::solvers::{solve, LossPoint, Method, SolverConfig};

/// The parameter an experiment sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Maturity `T` in years.
    TimeToExpiration,
    /// `M` in the strike `s0 / M`.
    Moneyness,
    /// Long-run variance `θ`.
    LongTermVariance,
    /// Number of time steps `N`.
    TimeSteps,
    /// Training batch size.
    BatchSize,
    /// Multiplier on every iteration budget.
    Epochs,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::TimeToExpiration,
        Family::Moneyness,
        Family::LongTermVariance,
        Family::TimeSteps,
        Family::BatchSize,
        Family::Epochs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::TimeToExpiration => "time_to_expiration",
            Family::Moneyness => "moneyness",
            Family::LongTermVariance => "long_term_variance",
            Family::TimeSteps => "time_steps",
            Family::BatchSize => "batch_size",
            Family::Epochs => "epochs",
        }
    }

    /// The standard sweep; `Epochs` values are multipliers of the standard
    /// budgets (125 of 8000 DBSDE iterations is 1/64).
    pub fn standard_values(self) -> Vec<f64> {
        match self {
            Family::TimeToExpiration => (3..=21).step_by(3).map(|m| m as f64 / 12.0).collect(),
            Family::Moneyness => vec![0.9, 1.0, 1.1, 1.2, 1.3],
            Family::LongTermVariance => vec![0.06, 0.08, 0.10, 0.12, 0.14],
            Family::TimeSteps => vec![3.0, 5.0, 10.0, 20.0, 40.0, 80.0],
            Family::BatchSize => vec![4.0, 16.0, 64.0, 256.0],
            Family::Epochs => vec![1.0 / 64.0, 1.0 / 16.0, 0.25, 1.0, 1.5],
        }
    }

    /// `values`, or the standard sweep when empty.
    pub fn sweep(self, values: &[f64]) -> Vec<f64> {
        if values.is_empty() {
            self.standard_values()
        } else {
            values.to_vec()
        }
    }

    /// Summary column that carries the experiment's conclusion.
    pub fn headline(self) -> &'static str {
        match self {
            Family::BatchSize => "iqr",
            _ => "median_pe",
        }
    }

    /// Whether the setting changes the market (and so the reference price).
    pub fn moves_market(self) -> bool {
        matches!(
            self,
            Family::TimeToExpiration | Family::Moneyness | Family::LongTermVariance
        )
    }

    /// Base configuration with the swept parameter set to `value`.
    pub fn apply(self, market: &HestonParams, solver: &SolverConfig, value: f64) -> Result<(HestonParams, SolverConfig)> {
        let (mut m, mut s) = (market.clone(), solver.clone());
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 && value < 1e9 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        match self {
            Family::TimeToExpiration => m.t_mat = value,
            Family::Moneyness => m.moneyness = value,
            Family::LongTermVariance => m.theta = value,
            Family::TimeSteps => s.n_steps = count()?,
            Family::BatchSize => s.batch = count()?,
            Family::Epochs => {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::Config(format!("epochs multiplier must be positive, got {value}")));
                }
                let scale = |n: usize| ((n as f64 * value).round() as usize).max(1);
                s.iters_forward = scale(s.iters_forward);
                s.iters_first = scale(s.iters_first);
                s.iters_rest = scale(s.iters_rest);
            }
        }
        m.validate()?;
        s.validate()?;
        Ok((m, s))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    /// Accepts `time_steps`, `TimeSteps`, `time-steps` and so on.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        Family::ALL
            .into_iter()
            .find(|f| f.name().replace('_', "") == key)
            .ok_or_else(|| Error::Config(format!("unknown experiment family '{s}'")))
    }
}

/// Where reference prices come from.
#[derive(Debug, Clone, PartialEq)]
pub enum McSource {
    /// Computed by [`mc_price`], cached under `cache_dir` when given.
    Compute {
        paths: usize,
        steps: usize,
        seed: u64,
        cache_dir: Option<PathBuf>,
    },
    /// One price per sweep value.
    Supplied(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub family: Family,
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    pub runs_per_setting: usize,
    pub market: HestonParams,
    pub solver: SolverConfig,
    pub seed_base: u64,
    pub mc: McSource,
    /// Concurrent runs.
    pub workers: usize,
    pub loss_curves: bool,
}

impl ExperimentSpec {
    /// Spec described by `cfg`, seeded from `solver.seed`, caching
    /// references under `cache_dir`.
    pub fn from_config(cfg: &Config, workers: usize, cache_dir: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.experiment;
        let mc = if e.mc_reference.is_empty() {
            McSource::Compute {
                paths: e.mc_paths,
                steps: e.mc_steps,
                seed: e.mc_seed,
                cache_dir,
            }
        } else {
            McSource::Supplied(e.mc_reference.clone())
        };
        let spec = Self {
            family: e.family,
            values: e.family.sweep(&e.values),
            methods: e.methods.clone(),
            runs_per_setting: e.runs,
            market: cfg.market.clone(),
            solver: cfg.solver.clone(),
            seed_base: cfg.solver.seed,
            mc,
            workers,
            loss_curves: e.loss_curves,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.methods.is_empty() || self.runs_per_setting == 0 || self.workers == 0 {
            return Err(Error::Config(
                "experiment needs sweep values, methods, at least one run and one worker".into(),
            ));
        }
        if let McSource::Supplied(v) = &self.mc {
            if v.len() != self.values.len() {
                return Err(Error::Config(format!(
                    "{} reference prices for {} settings",
                    v.len(),
                    self.values.len()
                )));
            }
        }
        for &v in &self.values {
            self.family.apply(&self.market, &self.solver, v)?;
        }
        Ok(())
    }

    /// Seed of run `run` of `method` at setting index `setting`.
    pub fn seed(&self, method: usize, setting: usize, run: usize) -> u64 {
        let index = (method * self.values.len() + setting) * self.runs_per_setting + run;
        self.seed_base.wrapping_add(index as u64)
    }
}

fn cache_key(p: &HestonParams, paths: usize, steps: usize, seed: u64) -> String {
    let text = format!(
        "d={} s0={} r={} T={} nu0={} theta={} rho={} kappa={} xi={} M={} paths={paths} steps={steps} seed={seed}",
        p.d, p.s0, p.r, p.t_mat, p.nu0, p.theta, p.rho, p.kappa, p.xi, p.moneyness
    );
    hex_digest(text.as_bytes())
}

/// Monte Carlo reference for `p`, read from or stored in `cache_dir` under
/// the hash of every market parameter and simulation setting.
pub fn cached_mc_price(
    p: &HestonParams,
    paths: usize,
    steps: usize,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<McEstimate> {
    let file = cache_dir.map(|d| d.join(format!("{}.txt", cache_key(p, paths, steps, seed))));
    if let Some(f) = &file {
        if let Ok(text) = std::fs::read_to_string(f) {
            let mut it = text.split_whitespace();
            if let (Some(Ok(price)), Some(Ok(std_error))) = (it.next().map(str::parse), it.next().map(str::parse)) {
                return Ok(McEstimate {
                    price,
                    std_error,
                    n_paths: paths,
                    n_steps: steps,
                });
            }
        }
    }
    let est = mc_price(p, paths, steps, seed)?;
    if let Some(f) = &file {
        report::write_file(f, &format!("{} {}\n", est.price, est.std_error))?;
    }
    Ok(est)
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub rows: Vec<SummaryRow>,
    pub summary_path: PathBuf,
    pub runs_path: PathBuf,
    /// Aligned text rendering of `rows`.
    pub table: String,
}

struct Job {
    method: Method,
    setting: usize,
    run: usize,
    seed: u64,
}

fn curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("time_step,iteration,loss\n");
    for p in curve {
        let ts = p.time_step.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!("{ts},{},{}\n", p.iteration, p.loss));
    }
    out
}

/// Runs every (method, setting, run) of `spec` and writes the raw runs and
/// the summary under `out_dir`. Diverged runs are recorded and counted;
/// any other error aborts the experiment.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentOutput> {
    spec.validate()?;
    let settings: Vec<(HestonParams, SolverConfig)> = spec
        .values
        .iter()
        .map(|&v| spec.family.apply(&spec.market, &spec.solver, v))
        .collect::<Result<_>>()?;
    let refs: Vec<f64> = match &spec.mc {
        McSource::Supplied(v) => v.clone(),
        McSource::Compute {
            paths,
            steps,
            seed,
            cache_dir,
        } => {
            let mut refs: Vec<f64> = Vec::with_capacity(settings.len());
            for (k, (m, _)) in settings.iter().enumerate() {
                // Solver-only sweeps share one market.
                if k > 0 && !spec.family.moves_market() {
                    refs.push(refs[0]);
                    continue;
                }
                refs.push(cached_mc_price(m, *paths, *steps, *seed, cache_dir.as_deref())?.price);
            }
            refs
        }
    };

    let mut jobs = vec![];
    for (mi, &method) in spec.methods.iter().enumerate() {
        for setting in 0..spec.values.len() {
            for run in 0..spec.runs_per_setting {
                jobs.push(Job {
                    method,
                    setting,
                    run,
                    seed: spec.seed(mi, setting, run),
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<(RunRecord, Option<Vec<LossPoint>>)>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let (market, base) = &settings[job.setting];
                let cfg = SolverConfig {
                    method: job.method,
                    seed: job.seed,
                    ..base.clone()
                };
                let drv = DiscountDriver { r: market.r };
                let mut rec = RunRecord {
                    method: job.method,
                    setting: spec.values[job.setting],
                    run: job.run,
                    seed: job.seed,
                    price: None,
                    mc_reference: refs[job.setting],
                    detail: String::new(),
                };
                match solve(&cfg, market, &drv) {
                    Ok(t) => {
                        rec.price = Some(t.run.price);
                        Ok((rec, spec.loss_curves.then_some(t.run.loss_curve)))
                    }
                    Err(e) if e.is_divergence() => {
                        rec.detail = e.to_string();
                        let curve = match e {
                            Error::Divergence { partial_curve, .. } => Some(partial_curve),
                            _ => Some(vec![]),
                        };
                        Ok((rec, curve.filter(|_| spec.loss_curves)))
                    }
                    Err(e) => Err(e),
                }
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        let (rec, curve) = r?;
        if let Some(curve) = curve {
            let name = format!(
                "{}_{}_{}_{}.csv",
                spec.family.name(),
                rec.method,
                rec.setting,
                rec.run
            );
            report::write_file(&out_dir.join("curves").join(name), &curve_csv(&curve))?;
        }
        records.push(rec);
    }
    let runs_path = out_dir.join("runs").join(format!("{}.csv", spec.family.name()));
    report::write_file(&runs_path, &runs_csv(&records))?;
    let rows = aggregate(&records)?;
    let (summary_path, table) = emit_report(&rows, spec.family.name(), spec.family.headline(), out_dir)?;
    Ok(ExperimentOutput {
        records,
        rows,
        summary_path,
        runs_path,
        table,
    })
}
