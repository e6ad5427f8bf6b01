//! Multi-asset Heston market.
//!
//! Each of the `d` assets follows its own Heston pair
//!
//! ```text
//! dS = r S dt + √ν S dW¹
//! dν = κ(θ − ν) dt + ξ √ν (ρ dW¹ + √(1−ρ²) dW²)
//! ```
//!
//! with the pairs mutually independent. The Markov state has dimension `2d`
//! and is laid out as `[S_1 … S_d, ν_1 … ν_d]`; the Brownian vector uses the
//! same layout (`W¹` components first). The diffusion matrix is therefore
//! block diagonal up to that coordinate permutation.
//!
//! Time stepping is full-truncation Euler: `ν⁺ = max(ν, 0)` is used inside
//! every square root and in the mean-reversion drift, while the raw iterate
//! is stored.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::ad::{Checkpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::path_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct HestonParams {
    /// Number of assets.
    pub d: usize,
    pub s0: f64,
    pub r: f64,
    /// Maturity in years.
    pub t_mat: f64,
    pub nu0: f64,
    pub theta: f64,
    pub rho: f64,
    pub kappa: f64,
    pub xi: f64,
    /// Spot over strike; the strike is `s0 / moneyness`.
    pub moneyness: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        Self::standard()
    }
}

impl HestonParams {
    /// The reference setting: 20 assets, one year, at-the-money-ish best-of
    /// call with strike `100 / 1.2`.
    pub fn standard() -> Self {
        Self {
            d: 20,
            s0: 100.0,
            r: 0.05,
            t_mat: 1.0,
            nu0: 0.1,
            theta: 0.1,
            rho: 0.0,
            kappa: 2.0,
            xi: 0.1,
            moneyness: 1.2,
        }
    }

    pub fn with_assets(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    pub fn strike(&self) -> f64 {
        self.s0 / self.moneyness
    }

    pub fn state_dim(&self) -> usize {
        2 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.s0,
            self.r,
            self.t_mat,
            self.nu0,
            self.theta,
            self.rho,
            self.kappa,
            self.xi,
            self.moneyness,
        ]
        .iter()
        .all(|v| v.is_finite());
        let bad = |msg: &str| Err(Error::Config(format!("market: {msg}")));
        if !finite {
            return bad("parameters must be finite");
        }
        if self.d == 0 {
            return bad("d must be at least 1");
        }
        if self.s0 <= 0.0 || self.t_mat <= 0.0 || self.kappa <= 0.0 {
            return bad("s0, T and kappa must be positive");
        }
        if self.nu0 < 0.0 || self.theta < 0.0 || self.xi < 0.0 {
            return bad("nu0, theta and xi must be non-negative");
        }
        if self.rho.abs() > 1.0 {
            return bad("|rho| must not exceed 1");
        }
        if self.moneyness <= 0.0 {
            return bad("moneyness must be positive");
        }
        Ok(())
    }

    /// `2κθ > ξ²` (strict). Violations are allowed but worth a warning.
    pub fn feller_satisfied(&self) -> bool {
        2.0 * self.kappa * self.theta > self.xi * self.xi
    }

    /// `(s0, …, s0, ν0, …, ν0)`.
    pub fn initial_state(&self) -> Vec<f64> {
        let mut x = vec![self.s0; self.d];
        x.extend(std::iter::repeat_n(self.nu0, self.d));
        x
    }

    /// Drift of the `2d` state: `r·S_k` for prices, `κ(θ − ν_k⁺)` for
    /// variances.
    pub fn drift(&self, _t: f64, state: &MarketState) -> Vec<f64> {
        let mut mu: Vec<f64> = state.prices.iter().map(|s| self.r * s).collect();
        mu.extend(
            state
                .variances
                .iter()
                .map(|v| self.kappa * (self.theta - v.max(0.0))),
        );
        mu
    }

    /// Nonzero entries of asset `k`'s diffusion block as
    /// `(σ[S,W¹], σ[ν,W¹], σ[ν,W²])`.
    #[inline]
    fn block(&self, s: f64, nu: f64) -> (f64, f64, f64) {
        let sq = nu.max(0.0).sqrt();
        (
            s * sq,
            self.xi * self.rho * sq,
            self.xi * (1.0 - self.rho * self.rho).sqrt() * sq,
        )
    }

    /// Dense `[2d, 2d]` diffusion matrix `σ(t, x)`.
    pub fn diffusion(&self, _t: f64, state: &MarketState) -> Tensor {
        let d = self.d;
        let n = 2 * d;
        let mut m = Tensor::zeros(&[n, n]);
        for k in 0..d {
            let (a, b, c) = self.block(state.prices[k], state.variances[k]);
            m.set(k, k, a);
            m.set(d + k, k, b);
            m.set(d + k, d + k, c);
        }
        m
    }

    /// Per-row diffusion matrices for a `[batch, 2d]` state tensor, shaped
    /// `[batch, 2d, 2d]`. Row `i` of matrix `b` is scaled by `row_scale[i]`.
    pub fn diffusion_batch(&self, states: &Tensor, row_scale: Option<&[f64]>) -> Tensor {
        let d = self.d;
        let n = 2 * d;
        let batch = states.rows();
        let mut out = vec![0.0; batch * n * n];
        for (b, m) in out.chunks_mut(n * n).enumerate() {
            let x = states.row(b);
            for k in 0..d {
                let (a, bb, c) = self.block(x[k], x[d + k]);
                let (sp, sv) = row_scale.map_or((1.0, 1.0), |s| (s[k], s[d + k]));
                m[k * n + k] = sp * a;
                m[(d + k) * n + k] = sv * bb;
                m[(d + k) * n + d + k] = sv * c;
            }
        }
        Tensor::new(vec![batch, n, n], out).expect("diffusion batch shape")
    }

    /// One Euler step for a single state vector, written into `out`.
    #[inline]
    pub fn euler_into(&self, x: &[f64], dw: &[f64], dt: f64, out: &mut [f64]) {
        let d = self.d;
        for k in 0..d {
            let (s, nu) = (x[k], x[d + k]);
            let (a, b, c) = self.block(s, nu);
            out[k] = s + self.r * s * dt + a * dw[k];
            out[d + k] =
                nu + self.kappa * (self.theta - nu.max(0.0)) * dt + (b * dw[k] + c * dw[d + k]);
        }
    }

    /// `X̂_{i+1} = X̂_i + μ(t_i, X̂_i)Δt + σ(t_i, X̂_i)ΔW_i` for a
    /// `[batch, 2d]` state tensor.
    pub fn euler_step(&self, _t: f64, states: &Tensor, dw: &Tensor, dt: f64) -> Result<Tensor> {
        let n = self.state_dim();
        if !states.is_matrix() || states.cols() != n || dw.shape() != states.shape() {
            return Err(Error::shape(
                "euler_step",
                format!(
                    "states {:?} and increments {:?} must both be [batch, {n}]",
                    states.shape(),
                    dw.shape()
                ),
            ));
        }
        if let Some(i) = states.first_non_finite().or_else(|| dw.first_non_finite()) {
            return Err(Error::NonFinite(format!("euler_step input entry {i}")));
        }
        let mut out = Tensor::zeros(states.shape());
        for b in 0..states.rows() {
            let row_out = &mut out.data_mut()[b * n..(b + 1) * n];
            self.euler_into(states.row(b), dw.row(b), dt, row_out);
        }
        Ok(out)
    }

    /// Simulates `batch` Euler paths on the uniform grid `Δt = T / n_steps`.
    /// Path `p` draws from its own stream keyed by `(seed, p)`.
    pub fn simulate(&self, n_steps: usize, batch: usize, seed: u64) -> Result<PathBatch> {
        self.validate()?;
        if n_steps == 0 || batch == 0 {
            return Err(Error::Invalid(format!(
                "simulate_paths needs n_steps ≥ 1 and batch ≥ 1 (got {n_steps}, {batch})"
            )));
        }
        let n = self.state_dim();
        let dt = self.t_mat / n_steps as f64;
        let sqrt_dt = dt.sqrt();
        let x0 = self.initial_state();
        let mut states = vec![0.0; batch * (n_steps + 1) * n];
        let mut dws = vec![0.0; batch * n_steps * n];
        let fill = |(p, (st, dw)): (usize, (&mut [f64], &mut [f64]))| {
            let mut rng = path_rng(seed, p as u64);
            for v in dw.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sqrt_dt * z;
            }
            st[..n].copy_from_slice(&x0);
            for i in 0..n_steps {
                let (head, tail) = st.split_at_mut((i + 1) * n);
                self.euler_into(&head[i * n..], &dw[i * n..(i + 1) * n], dt, &mut tail[..n]);
            }
        };
        let work = states
            .par_chunks_mut((n_steps + 1) * n)
            .zip(dws.par_chunks_mut(n_steps * n))
            .enumerate();
        if batch * n_steps * n > 1 << 14 {
            work.for_each(fill);
        } else {
            work.collect::<Vec<_>>().into_iter().for_each(fill);
        }
        Ok(PathBatch {
            batch,
            n_steps,
            dt,
            states: Tensor::new(vec![batch, n_steps + 1, n], states)?,
            dw: Tensor::new(vec![batch, n_steps, n], dws)?,
        })
    }

    /// Best-of call payoff `max(max_k S_k − K, 0)` per row of a
    /// `[batch, 2d]` tensor; variance columns are ignored.
    pub fn payoff(&self, terminal: &Tensor) -> Tensor {
        let k = self.strike();
        let d = self.d;
        let out = (0..terminal.rows())
            .map(|b| {
                let best = terminal.row(b)[..d]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                (best - k).max(0.0)
            })
            .collect();
        Tensor::matrix(terminal.rows(), 1, out)
    }

    /// Almost-everywhere gradient of [`payoff`](Self::payoff): a unit vector
    /// on the best asset when it finishes in the money, zero otherwise.
    pub fn payoff_grad(&self, states: &Tensor) -> Tensor {
        let k = self.strike();
        let (d, n) = (self.d, self.state_dim());
        let mut g = Tensor::zeros(&[states.rows(), n]);
        for b in 0..states.rows() {
            let prices = &states.row(b)[..d];
            let (arg, best) = prices
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
            if best > k {
                g.set(b, arg, 1.0);
            }
        }
        g
    }
}

/// Prices and variances of all assets at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub prices: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MarketState {
    /// Splits a `[S…, ν…]` vector of even length.
    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if !x.len().is_multiple_of(2) || x.is_empty() {
            return Err(Error::shape("MarketState", format!("odd state length {}", x.len())));
        }
        let d = x.len() / 2;
        Ok(Self {
            prices: x[..d].to_vec(),
            variances: x[d..].to_vec(),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.prices.clone();
        v.extend_from_slice(&self.variances);
        v
    }
}

/// Simulated Euler trajectories and the Brownian increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub batch: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// `[batch, n_steps + 1, 2d]`
    pub states: Tensor,
    /// `[batch, n_steps, 2d]`
    pub dw: Tensor,
}

impl PathBatch {
    pub fn state_dim(&self) -> usize {
        self.states.shape()[2]
    }

    fn slice_time(t: &Tensor, steps: usize, i: usize) -> Tensor {
        let n = t.shape()[2];
        let batch = t.shape()[0];
        let mut out = Vec::with_capacity(batch * n);
        for b in 0..batch {
            let off = (b * steps + i) * n;
            out.extend_from_slice(&t.data()[off..off + n]);
        }
        Tensor::matrix(batch, n, out)
    }

    /// `X̂_i` as `[batch, 2d]`.
    pub fn state_at(&self, i: usize) -> Tensor {
        assert!(i <= self.n_steps, "time index {i} beyond {}", self.n_steps);
        Self::slice_time(&self.states, self.n_steps + 1, i)
    }

    /// `ΔW_i` as `[batch, 2d]`.
    pub fn dw_at(&self, i: usize) -> Tensor {
        assert!(i < self.n_steps, "increment index {i} beyond {}", self.n_steps);
        Self::slice_time(&self.dw, self.n_steps, i)
    }

    pub fn terminal(&self) -> Tensor {
        self.state_at(self.n_steps)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("dt", Tensor::new(vec![1], vec![self.dt]).unwrap());
        ck.push("states", self.states.clone());
        ck.push("dw", self.dw.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ck.get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing entry '{name}'")))
        };
        let dt = get("dt")?.data()[0];
        let states = get("states")?;
        let dw = get("dw")?;
        if states.shape().len() != 3 || dw.shape().len() != 3 {
            return Err(Error::Checkpoint("path tensors must be rank 3".into()));
        }
        Ok(Self {
            batch: states.shape()[0],
            n_steps: dw.shape()[1],
            dt,
            states,
            dw,
        })
    }
}

/// The nonlinearity `f(t, x, y, z)` of the semilinear PDE.
///
/// Implementations record themselves on a tape so that solver losses can be
/// differentiated through `y` and `z`; `x` is `[batch, 2d]`, `y` is
/// `[batch, 1]`, `z` is `[batch, 2d]` and the result is `[batch, 1]`.
pub trait Driver: std::fmt::Debug + Send + Sync {
    fn record(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Result<Var>;

    fn eval(&self, t: f64, x: &Tensor, y: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (xv, yv, zv) = (
            tape.constant(x.clone()),
            tape.constant(y.clone()),
            tape.constant(z.clone()),
        );
        let out = self.record(&mut tape, t, xv, yv, zv)?;
        Ok(tape.value(out).clone())
    }
}

/// `f = r·y`: pure discounting, which turns the PDE into the linear pricing
/// equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscountDriver {
    pub r: f64,
}

impl Driver for DiscountDriver {
    fn record(&self, tape: &mut Tape, _t: f64, _x: Var, y: Var, _z: Var) -> Result<Var> {
        Ok(tape.scale(y, self.r))
    }
}
