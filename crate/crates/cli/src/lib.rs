//! `dbb` command line: simulate paths, price by Monte Carlo, train one
//! solver, run a sweep, or re-aggregate a finished sweep.
//!
//! Exit codes: 0 on success, 1 on numerical divergence, 2 on any
//! configuration, usage or I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser};

use dbb_core::config::Config;
use dbb_core::harness::{self, ExperimentSpec, Family};
use dbb_core::models::DiscountDriver;
use dbb_core::oracle::mc_price;
use dbb_core::solvers::solve;
use dbb_core::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "DBB_OUTPUT_DIR";
pub const MANIFEST: &str = "manifest.ini";

#[derive(Debug, Parser)]
#[command(name = "dbb", version, about = "Deep BSDE solvers for best-of options under multi-asset Heston")]
struct Cli {
    #[command(subcommand)]
    cmd: Sub,
}

#[derive(Debug, clap::Subcommand)]
enum Sub {
    /// Simulate Euler paths and write them to paths.csv.
    Simulate(Common),
    /// Monte Carlo reference price.
    McPrice(Common),
    /// Train one solver and report its price.
    Solve(Seeded),
    /// Run a parameter sweep.
    Experiment(Seeded),
    /// Re-aggregate the raw runs of a finished sweep.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// INI-style configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. solver.method=DS.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $DBB_OUTPUT_DIR, else ./dbb-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent runs (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct Seeded {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Required so every run is reproducible.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory of a finished experiment.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    McPrice,
    Solve,
    Experiment,
    Report,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::McPrice => "mc-price",
            Subcommand::Solve => "solve",
            Subcommand::Experiment => "experiment",
            Subcommand::Report => "report",
        }
    }
}

/// A parsed invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub subcommand: Subcommand,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub workers: usize,
}

fn default_out(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dbb-out"))
}

fn default_workers(w: Option<usize>) -> usize {
    w.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Parses `argv` (including the program name).
pub fn parse_args<I, T>(argv: I) -> std::result::Result<Command, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let common = |sub, c: Common| Command {
        subcommand: sub,
        config: c.config,
        overrides: c.set,
        seed: c.seed,
        out: default_out(c.out),
        workers: default_workers(c.workers),
    };
    let seeded = |sub, c: Seeded| Command {
        subcommand: sub,
        config: c.config,
        overrides: c.set,
        seed: Some(c.seed),
        out: default_out(c.out),
        workers: default_workers(c.workers),
    };
    Ok(match cli.cmd {
        Sub::Simulate(c) => common(Subcommand::Simulate, c),
        Sub::McPrice(c) => common(Subcommand::McPrice, c),
        Sub::Solve(c) => seeded(Subcommand::Solve, c),
        Sub::Experiment(c) => seeded(Subcommand::Experiment, c),
        Sub::Report(r) => Command {
            subcommand: Subcommand::Report,
            config: None,
            overrides: vec![],
            seed: None,
            out: default_out(r.out),
            workers: 1,
        },
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads the config, applies overrides and the seed, and validates.
fn load_config(cmd: &Command) -> Result<Config> {
    let mut cfg = match &cmd.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &cmd.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cmd.seed {
        match cmd.subcommand {
            Subcommand::McPrice => cfg.experiment.mc_seed = seed,
            _ => cfg.solver.seed = seed,
        }
    }
    cfg.validate()?;
    if !cfg.market.feller_satisfied() {
        eprintln!("warning: Feller condition 2*kappa*theta > xi^2 does not hold");
    }
    Ok(cfg)
}

/// Writes a manifest that is itself a loadable config: run metadata in
/// comment lines followed by the canonical configuration.
fn write_manifest(cmd: &Command, cfg: &Config, wall_time: f64) -> Result<()> {
    let mut m = String::from("# dbb run manifest\n");
    let _ = writeln!(m, "# command: {}", cmd.subcommand.name());
    let _ = writeln!(m, "# version: {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "# seed: {}", cmd.seed.map_or_else(|| "config".into(), |s| s.to_string()));
    let _ = writeln!(m, "# config_hash: {}", cfg.hash());
    for o in &cmd.overrides {
        let _ = writeln!(m, "# override: {o}");
    }
    let _ = writeln!(m, "# wall_time: {wall_time}");
    m.push_str(&cfg.canonical());
    write(&cmd.out.join(MANIFEST), &m)
}

fn run_simulate(cmd: &Command, cfg: &Config) -> Result<()> {
    let s = &cfg.solver;
    let paths = cfg.market.simulate(s.n_steps, s.batch, s.seed)?;
    let d = cfg.market.d;
    let mut csv = String::from("path,step,t");
    for k in 1..=d {
        let _ = write!(csv, ",S{k}");
    }
    for k in 1..=d {
        let _ = write!(csv, ",nu{k}");
    }
    csv.push('\n');
    let states: Vec<_> = (0..=paths.n_steps).map(|i| paths.state_at(i)).collect();
    for p in 0..paths.batch {
        for (i, x) in states.iter().enumerate() {
            let _ = write!(csv, "{p},{i},{}", i as f64 * paths.dt);
            for v in x.row(p) {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
    }
    write(&cmd.out.join("paths.csv"), &csv)?;
    println!("paths={} steps={} out={}", paths.batch, paths.n_steps, cmd.out.join("paths.csv").display());
    Ok(())
}

fn run_mc(cmd: &Command, cfg: &Config) -> Result<()> {
    let e = &cfg.experiment;
    let est = mc_price(&cfg.market, e.mc_paths, e.mc_steps, e.mc_seed)?;
    write(
        &cmd.out.join("mc_price.csv"),
        &format!(
            "price,std_error,n_paths,n_steps,seed\n{},{},{},{},{}\n",
            est.price, est.std_error, est.n_paths, est.n_steps, e.mc_seed
        ),
    )?;
    println!("price={} stderr={}", est.price, est.std_error);
    Ok(())
}

fn run_solve(cmd: &Command, cfg: &Config) -> Result<()> {
    let drv = DiscountDriver { r: cfg.market.r };
    let trained = solve(&cfg.solver, &cfg.market, &drv)?;
    let run = &trained.run;
    let last = run.loss_curve.last().map_or(f64::NAN, |p| p.loss);
    write(
        &cmd.out.join("solve.csv"),
        &format!(
            "method,seed,price,final_val_loss\n{},{},{},{}\n",
            cfg.solver.method, run.seed, run.price, last
        ),
    )?;
    let mut curve = String::from("time_step,iteration,loss\n");
    for p in &run.loss_curve {
        let ts = p.time_step.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(curve, "{ts},{},{}", p.iteration, p.loss);
    }
    write(&cmd.out.join("loss_curve.csv"), &curve)?;
    println!("price={} method={} seed={}", run.price, cfg.solver.method, run.seed);
    Ok(())
}

fn run_experiment(cmd: &Command, cfg: &Config) -> Result<()> {
    let spec = ExperimentSpec::from_config(cfg, cmd.workers, Some(cmd.out.join("mc_cache")))?;
    let out = harness::run_experiment(&spec, &cmd.out)?;
    print!("{}", out.table);
    println!("summary={}", out.summary_path.display());
    Ok(())
}

fn run_report(cmd: &Command) -> Result<()> {
    let dir = cmd.out.join("runs");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no run files under {}", dir.display())));
    }
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::Io {
            path: f.display().to_string(),
            source: e,
        })?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let family: Family = stem.parse()?;
        let rows = harness::aggregate(&harness::parse_runs_csv(&text)?)?;
        println!("[{stem}]");
        print!("{}", harness::format_table(&rows, family.headline()));
    }
    Ok(())
}

/// Executes `cmd` and returns the process exit code.
pub fn dispatch(cmd: &Command) -> i32 {
    let start = Instant::now();
    let result = (|| -> Result<()> {
        if cmd.subcommand == Subcommand::Report {
            return run_report(cmd);
        }
        let cfg = load_config(cmd)?;
        match cmd.subcommand {
            Subcommand::Simulate => run_simulate(cmd, &cfg)?,
            Subcommand::McPrice => run_mc(cmd, &cfg)?,
            Subcommand::Solve => run_solve(cmd, &cfg)?,
            Subcommand::Experiment => run_experiment(cmd, &cfg)?,
            Subcommand::Report => unreachable!(),
        }
        write_manifest(cmd, &cfg, start.elapsed().as_secs_f64())
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_divergence() {
                1
            } else {
                2
            }
        }
    }
}

/// Parses and dispatches; usage errors print clap's message and give 2
/// (help and version give 0).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_args(argv) {
        Ok(cmd) => dispatch(&cmd),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}
