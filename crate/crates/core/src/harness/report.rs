//! CSV persistence of raw runs and summary rows, and the text table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::solvers::Method;

use super::stats::{iqr, median_pe, quartiles};

/// Written above every summary header.
pub const QUANTILE_NOTE: &str = "# quantiles: linear interpolation between closest ranks (type 7)";

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "method",
    "setting",
    "q1",
    "median",
    "q3",
    "median_pe",
    "iqr",
    "n_runs",
    "mc_reference",
    "n_failed",
];

pub const RUN_COLUMNS: [&str; 8] = ["method", "setting", "run", "seed", "status", "price", "mc_reference", "detail"];

/// One solver execution inside an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub setting: f64,
    pub run: usize,
    pub seed: u64,
    /// `None` when the run diverged.
    pub price: Option<f64>,
    pub mc_reference: f64,
    /// Failure description; empty on success.
    pub detail: String,
}

/// Aggregate of the successful runs of one (method, setting) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub setting: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub median_pe: f64,
    pub iqr: f64,
    pub n_runs: usize,
    pub mc_reference: f64,
    pub n_failed: usize,
}

/// Groups records by (method, setting) in order of first appearance and
/// summarizes each group. A single success gives zero spread; no success
/// gives NaN statistics.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    let mut keys: Vec<(Method, u64)> = vec![];
    for r in records {
        let k = (r.method, r.setting.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.iter()
        .map(|&(method, bits)| {
            let group: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.method == method && r.setting.to_bits() == bits)
                .collect();
            let mc = group[0].mc_reference;
            if group.iter().any(|r| r.mc_reference.to_bits() != mc.to_bits()) {
                return Err(Error::Invalid(format!(
                    "{method} at {}: runs disagree on the reference price",
                    f64::from_bits(bits)
                )));
            }
            let prices: Vec<f64> = group.iter().filter_map(|r| r.price).collect();
            let (q1, median, q3) = match prices.len() {
                0 => (f64::NAN, f64::NAN, f64::NAN),
                1 => (prices[0], prices[0], prices[0]),
                _ => quartiles(&prices)?,
            };
            let (pe, spread) = if prices.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (median_pe(median, mc)?, iqr(q1, q3)?)
            };
            Ok(SummaryRow {
                method,
                setting: f64::from_bits(bits),
                q1,
                median,
                q3,
                median_pe: pe,
                iqr: spread,
                n_runs: prices.len(),
                mc_reference: mc,
                n_failed: group.len() - prices.len(),
            })
        })
        .collect()
}

fn header(cols: &[&str]) -> String {
    cols.join(",")
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{QUANTILE_NOTE}\n{}\n", header(&SUMMARY_COLUMNS));
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method, r.setting, r.q1, r.median, r.q3, r.median_pe, r.iqr, r.n_runs, r.mc_reference, r.n_failed
        );
    }
    out
}

pub fn runs_csv(records: &[RunRecord]) -> String {
    let mut out = format!("{}\n", header(&RUN_COLUMNS));
    for r in records {
        let (status, price) = match r.price {
            Some(p) => ("ok", p.to_string()),
            None => ("failed", String::new()),
        };
        let detail: String = r
            .detail
            .chars()
            .map(|c| if c == ',' || c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{status},{price},{},{detail}",
            r.method, r.setting, r.run, r.seed, r.mc_reference
        );
    }
    out
}

fn data_lines<'a>(text: &'a str, cols: &[&str]) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let head = lines.next().ok_or_else(|| Error::Parse("missing CSV header".into()))?;
    if head != header(cols) {
        return Err(Error::Parse(format!("unexpected CSV header '{head}'")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != cols.len() {
                return Err(Error::Parse(format!("row {}: {} fields, expected {}", i + 1, f.len(), cols.len())));
            }
            Ok(f)
        })
        .collect()
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("bad number '{s}'")))
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    data_lines(text, &SUMMARY_COLUMNS)?
        .into_iter()
        .map(|f| {
            Ok(SummaryRow {
                method: f[0].parse().map_err(|e: Error| Error::Parse(e.to_string()))?,
                setting: num(f[1])?,
                q1: num(f[2])?,
                median: num(f[3])?,
                q3: num(f[4])?,
                median_pe: num(f[5])?,
                iqr: num(f[6])?,
                n_runs: num(f[7])?,
                mc_reference: num(f[8])?,
                n_failed: num(f[9])?,
            })
        })
        .collect()
}

pub fn parse_runs_csv(text: &str) -> Result<Vec<RunRecord>> {
    data_lines(text, &RUN_COLUMNS)?
        .into_iter()
        .map(|f| {
            let price = match f[4] {
                "ok" => Some(num(f[5])?),
                "failed" => None,
                other => return Err(Error::Parse(format!("unknown status '{other}'"))),
            };
            Ok(RunRecord {
                method: f[0].parse().map_err(|e: Error| Error::Parse(e.to_string()))?,
                setting: num(f[1])?,
                run: num(f[2])?,
                seed: num(f[3])?,
                price,
                mc_reference: num(f[6])?,
                detail: f[7].to_string(),
            })
        })
        .collect()
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Aligned text table; `headline` names the column marked with `*`.
pub fn format_table(rows: &[SummaryRow], headline: &str) -> String {
    let head: Vec<String> = SUMMARY_COLUMNS
        .iter()
        .map(|c| if *c == headline { format!("{c}*") } else { c.to_string() })
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                format!("{}", r.setting),
                format!("{:.3}", r.q1),
                format!("{:.3}", r.median),
                format!("{:.3}", r.q3),
                format!("{:.3}%", r.median_pe),
                format!("{:.3}", r.iqr),
                r.n_runs.to_string(),
                format!("{:.3}", r.mc_reference),
                r.n_failed.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| -> String {
        let mut s = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect::<Vec<_>>()
            .join("  ");
        s.push('\n');
        s
    };
    let mut out = line(&head);
    for r in &body {
        out.push_str(&line(r));
    }
    out
}

/// Writes `<dir>/<family>.csv` and returns its path and the text table.
pub fn emit_report(rows: &[SummaryRow], family: &str, headline: &str, dir: &Path) -> Result<(PathBuf, String)> {
    if rows.is_empty() {
        return Err(Error::Invalid("no summary rows to report".into()));
    }
    let path = dir.join(format!("{family}.csv"));
    write_file(&path, &summary_csv(rows))?;
    Ok((path, format_table(rows, headline)))
}
