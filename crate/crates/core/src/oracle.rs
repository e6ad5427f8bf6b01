//! Reference prices: plain Monte Carlo on the Euler scheme, plus the
//! Black-Scholes formula for the constant-volatility single-asset case.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::HestonParams;
use crate::rng::path_rng;

/// Paths per work unit. Partial sums are combined in chunk order so the
/// estimate does not depend on the thread count.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub price: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_steps: usize,
}

/// Discounted mean payoff over `n_paths` Euler paths with `n_steps` steps.
///
/// Path `p` uses the same random stream as path `p` of
/// [`HestonParams::simulate`] under the same seed, so the two agree path by
/// path.
pub fn mc_price(params: &HestonParams, n_paths: usize, n_steps: usize, seed: u64) -> Result<McEstimate> {
    params.validate()?;
    if n_paths < 2 || n_steps == 0 {
        return Err(Error::Invalid(format!(
            "mc_price needs at least 2 paths and 1 step (got {n_paths}, {n_steps})"
        )));
    }
    let n = params.state_dim();
    let d = params.d;
    let dt = params.t_mat / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let x0 = params.initial_state();
    let strike = params.strike();
    let single = |p: usize, x: &mut Vec<f64>, next: &mut Vec<f64>, dw: &mut Vec<f64>| -> f64 {
        let mut rng = path_rng(seed, p as u64);
        x.copy_from_slice(&x0);
        for _ in 0..n_steps {
            for v in dw.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sqrt_dt * z;
            }
            params.euler_into(x, dw, dt, next);
            std::mem::swap(x, next);
        }
        let best = x[..d].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (best - strike).max(0.0)
    };
    let n_chunks = n_paths.div_ceil(CHUNK);
    let partial: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let (mut x, mut next, mut dw) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for p in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                let g = single(p, &mut x, &mut next, &mut dw);
                s += g;
                s2 += g * g;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partial
        .iter()
        .fold((0.0, 0.0), |(a, b), &(c, d)| (a + c, b + d));
    let m = n_paths as f64;
    let mean = s / m;
    let var = ((s2 - m * mean * mean) / (m - 1.0)).max(0.0);
    let disc = (-params.r * params.t_mat).exp();
    let est = McEstimate {
        price: disc * mean,
        std_error: disc * (var / m).sqrt(),
        n_paths,
        n_steps,
    };
    if !est.price.is_finite() || !est.std_error.is_finite() {
        return Err(Error::NonFinite(format!("Monte Carlo estimate {est:?}")));
    }
    Ok(est)
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// European call under Black-Scholes with volatility `sigma`.
pub fn bs_closed_form(s0: f64, strike: f64, r: f64, t: f64, sigma: f64) -> f64 {
    let disc_k = strike * (-r * t).exp();
    if sigma == 0.0 || t == 0.0 {
        return (s0 - disc_k).max(0.0);
    }
    let sd = sigma * t.sqrt();
    let d1 = ((s0 / strike).ln() + (r + 0.5 * sigma * sigma) * t) / sd;
    let d2 = d1 - sd;
    s0 * norm_cdf(d1) - disc_k * norm_cdf(d2)
}
