//! Flat INI-style configuration with `[market]`, `[solver]` and
//! `[experiment]` sections.
//!
//! ```text
//! # comments start with '#' or ';'
//! [market]
//! d = 5
//! maturity = 0.25
//!
//! [solver]
//! method = DBDP1
//! hidden = 128, 128
//! ```
//!
//! Missing keys keep their defaults; unknown sections or keys are errors.
//! [`Config::canonical`] renders every key in a fixed order with
//! round-trip float formatting, so parsing the canonical text reproduces the
//! configuration exactly and its hash identifies a run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::ad::Activation;
use crate::error::{Error, Result};
use crate::harness::Family;
use crate::models::HestonParams;
use crate::solvers::{Method, SolverConfig};

/// Settings of the `[experiment]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub family: Family,
    /// Sweep values; empty means the family's standard sweep.
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    pub runs: usize,
    pub mc_paths: usize,
    pub mc_steps: usize,
    pub mc_seed: u64,
    /// Supplied Monte Carlo references, one per sweep value; empty means
    /// compute them.
    pub mc_reference: Vec<f64>,
    /// Write one validation-loss CSV per run.
    pub loss_curves: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: Family::TimeToExpiration,
            values: vec![],
            methods: Method::ALL.to_vec(),
            runs: 10,
            mc_paths: 100_000,
            mc_steps: 1000,
            mc_seed: 1,
            mc_reference: vec![],
            loss_curves: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub market: HestonParams,
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
}


fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl Config {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "market" | "solver" | "experiment") {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {}: key outside a section", n + 1)))?;
            cfg.set(&format!("{sec}.{}", key.trim()), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(&text)
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not section.key=value")))?;
        self.set(key.trim(), value.trim())
    }

    /// Sets a value by its dotted name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, s, e) = (&mut self.market, &mut self.solver, &mut self.experiment);
        match key {
            "market.d" => m.d = parse(key, value)?,
            "market.s0" => m.s0 = parse(key, value)?,
            "market.r" => m.r = parse(key, value)?,
            "market.maturity" => m.t_mat = parse(key, value)?,
            "market.nu0" => m.nu0 = parse(key, value)?,
            "market.theta" => m.theta = parse(key, value)?,
            "market.rho" => m.rho = parse(key, value)?,
            "market.kappa" => m.kappa = parse(key, value)?,
            "market.xi" => m.xi = parse(key, value)?,
            "market.moneyness" => m.moneyness = parse(key, value)?,
            "solver.method" => s.method = value.parse()?,
            "solver.n_steps" => s.n_steps = parse(key, value)?,
            "solver.batch" => s.batch = parse(key, value)?,
            "solver.val_size" => s.val_size = parse(key, value)?,
            "solver.lr" => s.lr = parse(key, value)?,
            "solver.iters_forward" => s.iters_forward = parse(key, value)?,
            "solver.iters_first" => s.iters_first = parse(key, value)?,
            "solver.iters_rest" => s.iters_rest = parse(key, value)?,
            "solver.seed" => s.seed = parse(key, value)?,
            "solver.hidden" => s.hidden = parse_list(key, value)?,
            "solver.activation" => s.activation = value.parse::<Activation>()?,
            "solver.batch_norm" => s.batch_norm = parse_bool(key, value)?,
            "solver.lr_decay" => s.lr_decay = parse_bool(key, value)?,
            "solver.val_every" => s.val_every = parse(key, value)?,
            "experiment.family" => e.family = value.parse()?,
            "experiment.values" => e.values = parse_list(key, value)?,
            "experiment.methods" => {
                e.methods = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "experiment.runs" => e.runs = parse(key, value)?,
            "experiment.mc_paths" => e.mc_paths = parse(key, value)?,
            "experiment.mc_steps" => e.mc_steps = parse(key, value)?,
            "experiment.mc_seed" => e.mc_seed = parse(key, value)?,
            "experiment.mc_reference" => e.mc_reference = parse_list(key, value)?,
            "experiment.loss_curves" => e.loss_curves = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.solver.validate()?;
        let e = &self.experiment;
        if e.runs == 0 || e.mc_paths < 2 || e.mc_steps == 0 {
            return Err(Error::Config(
                "experiment: runs and mc_steps must be positive and mc_paths at least 2".into(),
            ));
        }
        if e.methods.is_empty() {
            return Err(Error::Config("experiment.methods must not be empty".into()));
        }
        if !e.mc_reference.is_empty() && e.mc_reference.len() != e.family.sweep(&e.values).len() {
            return Err(Error::Config(format!(
                "experiment.mc_reference has {} values for {} settings",
                e.mc_reference.len(),
                e.family.sweep(&e.values).len()
            )));
        }
        Ok(())
    }

    /// Every key in a fixed order, floats in shortest round-trip form.
    pub fn canonical(&self) -> String {
        let (m, s, e) = (&self.market, &self.solver, &self.experiment);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("[market]\nd", m.d.to_string());
        kv("s0", m.s0.to_string());
        kv("r", m.r.to_string());
        kv("maturity", m.t_mat.to_string());
        kv("nu0", m.nu0.to_string());
        kv("theta", m.theta.to_string());
        kv("rho", m.rho.to_string());
        kv("kappa", m.kappa.to_string());
        kv("xi", m.xi.to_string());
        kv("moneyness", m.moneyness.to_string());
        kv("\n[solver]\nmethod", s.method.to_string());
        kv("n_steps", s.n_steps.to_string());
        kv("batch", s.batch.to_string());
        kv("val_size", s.val_size.to_string());
        kv("lr", s.lr.to_string());
        kv("iters_forward", s.iters_forward.to_string());
        kv("iters_first", s.iters_first.to_string());
        kv("iters_rest", s.iters_rest.to_string());
        kv("seed", s.seed.to_string());
        kv("hidden", join(&s.hidden));
        kv("activation", s.activation.name().to_string());
        kv("batch_norm", s.batch_norm.to_string());
        kv("lr_decay", s.lr_decay.to_string());
        kv("val_every", s.val_every.to_string());
        kv("\n[experiment]\nfamily", e.family.name().to_string());
        kv("values", join(&e.values));
        kv("methods", join(&e.methods));
        kv("runs", e.runs.to_string());
        kv("mc_paths", e.mc_paths.to_string());
        kv("mc_steps", e.mc_steps.to_string());
        kv("mc_seed", e.mc_seed.to_string());
        kv("mc_reference", join(&e.mc_reference));
        kv("loss_curves", e.loss_curves.to_string());
        out
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn hash(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        assert_eq!(Config::parse("# nothing\n\n; here\n").unwrap(), Config::default());
    }

    #[test]
    fn parses_all_sections() {
        let cfg = Config::parse(
            "[market]\nd = 5\nmaturity = 0.25\n\n[solver]\nmethod = dbdp1\nhidden = 8, 8\nlr_decay = true\n\
             [experiment]\nfamily = BatchSize\nvalues = 4, 16, 64\nmethods = DBDP1, MDBDP\nruns = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.market.d, 5);
        assert_eq!(cfg.market.t_mat, 0.25);
        assert_eq!(cfg.solver.method, Method::Dbdp1);
        assert_eq!(cfg.solver.hidden, vec![8, 8]);
        assert!(cfg.solver.lr_decay);
        assert_eq!(cfg.experiment.family, Family::BatchSize);
        assert_eq!(cfg.experiment.values, vec![4.0, 16.0, 64.0]);
        assert_eq!(cfg.experiment.methods, vec![Method::Dbdp1, Method::Mdbdp]);
        assert_eq!(cfg.experiment.runs, 20);
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(Config::parse("[market]\nvolatility = 0.2\n").is_err());
        assert!(Config::parse("[pricing]\n").is_err());
        assert!(Config::parse("d = 3\n").is_err());
        assert!(Config::parse("[market]\nd 3\n").is_err());
        assert!(Config::parse("[solver]\nbatch = many\n").is_err());
        assert!(Config::parse("[solver]\nmethod = XYZ\n").is_err());
        let mut c = Config::default();
        assert!(c.apply_override("solver.nope=1").is_err());
        assert!(c.apply_override("solver.batch").is_err());
    }

    #[test]
    fn overrides_apply_after_parse() {
        let mut c = Config::parse("[solver]\nmethod = DBSDE\n").unwrap();
        c.apply_override("solver.method=DS").unwrap();
        c.apply_override(" market.xi = 0.2 ").unwrap();
        assert_eq!(c.solver.method, Method::Ds);
        assert_eq!(c.market.xi, 0.2);
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = Config::default();
        c.market.t_mat = 0.1 + 0.2;
        c.solver.lr = 1.0 / 3.0;
        c.experiment.values = vec![0.9, 1.1];
        c.experiment.mc_reference = vec![94.933, 1e-17];
        let back = Config::parse(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_tracks_every_change() {
        let a = Config::default();
        let mut b = a.clone();
        b.solver.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        // Known SHA-256 of the empty string.
        assert_eq!(
            hex_digest(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = Config::default();
        c.solver.iters_forward = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = Config::default();
        c.experiment.runs = 0;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.experiment.mc_reference = vec![1.0];
        assert!(c.validate().is_err());
        assert!(Config::default().validate().is_ok());
    }
}
