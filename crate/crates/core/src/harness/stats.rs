//! Summary statistics of repeated runs.

use crate::error::{Error, Result};

/// Linear-interpolation quantile between closest ranks of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(Q1, median, Q3)` by linear interpolation between closest ranks.
pub fn quartiles(samples: &[f64]) -> Result<(f64, f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::Invalid(format!(
            "quartiles need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quartile sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.5), quantile_sorted(&s, 0.75)))
}

/// Signed percentage error of `median` against the reference `mc`.
pub fn median_pe(median: f64, mc: f64) -> Result<f64> {
    if mc == 0.0 {
        return Err(Error::Invalid("median_pe against a zero reference".into()));
    }
    Ok(100.0 * (median - mc) / mc)
}

/// Interquartile range `q3 − q1`.
pub fn iqr(q1: f64, q3: f64) -> Result<f64> {
    if q3 < q1 {
        return Err(Error::Invalid(format!("inverted quartiles: q1 {q1} > q3 {q3}")));
    }
    Ok(q3 - q1)
}

/// Least-squares line `metric ≈ intercept + slope / √parameter`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits `metric` against `1/√parameter` with an intercept.
pub fn sqrt_scaling_fit(metric: &[f64], parameter: &[f64]) -> Result<ScalingFit> {
    if metric.len() != parameter.len() {
        return Err(Error::Invalid(format!(
            "{} metric values for {} parameters",
            metric.len(),
            parameter.len()
        )));
    }
    if metric.len() < 3 {
        return Err(Error::Invalid("scaling fit needs at least 3 points".into()));
    }
    if parameter.iter().any(|&p| !(p > 0.0 && p.is_finite())) || metric.iter().any(|m| !m.is_finite()) {
        return Err(Error::Invalid("scaling fit needs finite metrics and positive parameters".into()));
    }
    let x: Vec<f64> = parameter.iter().map(|p| 1.0 / p.sqrt()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = metric.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let syy: f64 = metric.iter().map(|v| (v - my) * (v - my)).sum();
    let sxy: f64 = x.iter().zip(metric).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("scaling fit on constant data".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(metric)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    Ok(ScalingFit {
        slope,
        intercept,
        r_squared: 1.0 - sse / syy,
    })
}
