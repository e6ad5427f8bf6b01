//! Deep BSDE solvers.
//!
//! The forward scheme (DBSDE) trains a scalar `u0` and one `Ẑ_i` network per
//! time step jointly, by shooting `Ŷ` forward and penalizing the terminal
//! mismatch. The backward schemes (DBDP1, DBDP2, DS, MDBDP) fit one value
//! network per step by regression, from maturity back to time zero, each
//! step warm-started from the weights of the step after it.
//!
//! Training draws a fresh batch of paths every iteration; a fixed held-out
//! batch is used for the validation curve.

mod losses;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

pub use losses::{
    dbdp_step_loss, dbdp_step_loss_grad, dbsde_loss, dbsde_loss_grad, ds_step_loss, ds_step_loss_grad,
    mdbdp_step_loss, mdbdp_step_loss_grad, InputScaling, LossGrad, NextValue,
};

use crate::ad::{Activation, AdamState, Mlp, NormMode, Tensor};
use crate::error::{Error, Result};
use crate::models::{Driver, HestonParams, PathBatch};
use crate::rng::derive_seed;
use losses::Recorded;

const TAG_VAL: u64 = 1;
const TAG_PILOT: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_INIT_U: u64 = 4;
const TAG_INIT_V: u64 = 5;
const TAG_INIT_Z: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dbsde,
    Dbdp1,
    Dbdp2,
    Ds,
    Mdbdp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dbsde, Method::Dbdp1, Method::Dbdp2, Method::Ds, Method::Mdbdp];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dbsde => "DBSDE",
            Method::Dbdp1 => "DBDP1",
            Method::Dbdp2 => "DBDP2",
            Method::Ds => "DS",
            Method::Mdbdp => "MDBDP",
        }
    }

    pub fn is_backward(self) -> bool {
        self != Method::Dbsde
    }

    /// Whether the scheme trains a separate `V_i` network.
    pub fn has_v_net(self) -> bool {
        matches!(self, Method::Dbdp1 | Method::Mdbdp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}' (expected one of DBSDE, DBDP1, DBDP2, DS, MDBDP)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Number of time steps `N`.
    pub n_steps: usize,
    pub batch: usize,
    pub val_size: usize,
    pub lr: f64,
    pub iters_forward: usize,
    pub iters_first: usize,
    pub iters_rest: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Batch-normalize the network input, every hidden pre-activation and
    /// the output.
    pub batch_norm: bool,
    /// Multiply the learning rate by 0.1 at 50% and again at 75% of each
    /// training phase.
    pub lr_decay: bool,
    /// Validation period in iterations.
    pub val_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dbsde,
            n_steps: 40,
            batch: 64,
            val_size: 2048,
            lr: 0.01,
            iters_forward: 8000,
            iters_first: 16000,
            iters_rest: 3000,
            seed: 0,
            hidden: vec![128, 128],
            activation: Activation::Relu,
            batch_norm: false,
            lr_decay: false,
            val_every: 100,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_steps", self.n_steps),
            ("batch", self.batch),
            ("val_size", self.val_size),
            ("iters_forward", self.iters_forward),
            ("iters_first", self.iters_first),
            ("iters_rest", self.iters_rest),
            ("val_every", self.val_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("solver.{name} must be positive")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("solver.hidden widths must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("solver.lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn net(&self, input: usize, output: usize, seed: u64) -> Result<Mlp> {
        Mlp::init_with(input, output, &self.hidden, self.activation, self.batch_norm, seed)
    }

    fn lr_at(&self, k: usize, iters: usize) -> f64 {
        if !self.lr_decay {
            self.lr
        } else if 4 * k >= 3 * iters {
            self.lr * 0.01
        } else if 2 * k >= iters {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// One validation measurement. `time_step` is `None` for the forward scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub time_step: Option<usize>,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverRun {
    pub config: SolverConfig,
    /// Estimate of `u(0, X_0)`.
    pub price: f64,
    pub loss_curve: Vec<LossPoint>,
    pub wall_time: f64,
    pub seed: u64,
}

/// Trained networks.
#[derive(Debug, Clone, PartialEq)]
pub enum StepNets {
    Forward { u0: f64, z: Vec<Mlp> },
    /// `u[i]` is `U_i`; `v[i]` is `V_i` for schemes that train one, otherwise
    /// `v` is empty.
    Backward { u: Vec<Mlp>, v: Vec<Mlp> },
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub run: SolverRun,
    pub nets: StepNets,
}

/// `u(0, X_0)` from trained networks.
pub fn price_at_initial(model: &HestonParams, nets: &StepNets) -> Result<f64> {
    match nets {
        StepNets::Forward { u0, .. } => Ok(*u0),
        StepNets::Backward { u, .. } => {
            let net = u
                .first()
                .ok_or_else(|| Error::Invalid("no U_0 network".into()))?;
            let x0 = Tensor::matrix(1, model.state_dim(), model.initial_state());
            let out = net.forward(&InputScaling::for_model(model).apply(&x0))?;
            Ok(out.data()[0])
        }
    }
}

/// Trains the method named in `cfg`.
pub fn solve(cfg: &SolverConfig, model: &HestonParams, drv: &dyn Driver) -> Result<Trained> {
    if cfg.method.is_backward() {
        backward_train(cfg, model, drv)
    } else {
        dbsde_train(cfg, model, drv)
    }
}

struct Diverged<'a> {
    time_step: Option<usize>,
    curve: &'a [LossPoint],
}

impl Diverged<'_> {
    fn check(&self, rec: &Recorded, iteration: usize, what: &str) -> Result<f64> {
        let loss = rec.value();
        if loss.is_finite() {
            return Ok(loss);
        }
        Err(Error::Divergence {
            time_step: self.time_step,
            iteration,
            path: rec.bad_path(),
            detail: format!("{what} loss is {loss}"),
            partial_curve: self.curve.to_vec(),
        })
    }
}

fn adam_update(adam: &mut AdamState, net: &mut Mlp, grads: &[Tensor], lr: f64) -> Result<()> {
    adam.lr = lr;
    adam.step(net.params_mut(), grads)
}

fn check_setup(cfg: &SolverConfig, model: &HestonParams, backward: bool) -> Result<()> {
    cfg.validate()?;
    model.validate()?;
    if cfg.method.is_backward() != backward {
        return Err(Error::Config(format!(
            "method {} cannot be trained by the {} scheme",
            cfg.method,
            if backward { "backward" } else { "forward" }
        )));
    }
    Ok(())
}

fn train_paths(model: &HestonParams, cfg: &SolverConfig, step: u64, k: usize) -> Result<PathBatch> {
    model.simulate(cfg.n_steps, cfg.batch, derive_seed(cfg.seed, &[TAG_TRAIN, step, k as u64]))
}

/// Forward scheme. `u0` starts at the discounted mean payoff of a pilot
/// batch of `val_size` paths.
pub fn dbsde_train(cfg: &SolverConfig, model: &HestonParams, drv: &dyn Driver) -> Result<Trained> {
    check_setup(cfg, model, false)?;
    let start = Instant::now();
    let n = model.state_dim();
    let scaling = InputScaling::for_model(model);
    let val = model.simulate(cfg.n_steps, cfg.val_size, derive_seed(cfg.seed, &[TAG_VAL]))?;
    let pilot = model.simulate(cfg.n_steps, cfg.val_size, derive_seed(cfg.seed, &[TAG_PILOT]))?;
    let mut u0 = model.payoff(&pilot.terminal()).mean() * (-model.r * model.t_mat).exp();
    let mut z = (0..cfg.n_steps)
        .map(|i| {
            cfg.net(n, n, derive_seed(cfg.seed, &[TAG_INIT_Z, i as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut u0_param = [Tensor::scalar(u0)];
    let mut adam_u0 = AdamState::new(&u0_param, cfg.lr);
    let mut adam_z: Vec<AdamState> = z.iter().map(|net| AdamState::new(net.params(), cfg.lr)).collect();
    let mut curve = Vec::new();
    let iters = cfg.iters_forward;
    for k in 0..iters {
        let paths = train_paths(model, cfg, 0, k)?;
        let rec = losses::record_dbsde(model, &scaling, drv, &paths, u0, &z, true, NormMode::Batch)?;
        Diverged { time_step: None, curve: &curve }.check(&rec, k, "training")?;
        let grads = rec.grads();
        let lr = cfg.lr_at(k, iters);
        adam_u0.lr = lr;
        adam_u0.step(&mut u0_param, &grads[0])?;
        u0 = u0_param[0].data()[0];
        for (((net, adam), g), st) in z.iter_mut().zip(&mut adam_z).zip(&grads[1..]).zip(&rec.stats[1..]) {
            adam_update(adam, net, g, lr)?;
            net.update_running(st);
        }
        if (k + 1) % cfg.val_every == 0 || k + 1 == iters {
            let rec = losses::record_dbsde(model, &scaling, drv, &val, u0, &z, false, NormMode::Running)?;
            let loss = Diverged { time_step: None, curve: &curve }.check(&rec, k + 1, "validation")?;
            curve.push(LossPoint {
                time_step: None,
                iteration: k + 1,
                loss,
            });
        }
    }
    if !u0.is_finite() {
        return Err(Error::Divergence {
            time_step: None,
            iteration: iters,
            path: None,
            detail: format!("u0 is {u0}"),
            partial_curve: curve,
        });
    }
    let nets = StepNets::Forward { u0, z };
    Ok(Trained {
        run: SolverRun {
            config: cfg.clone(),
            price: u0,
            loss_curve: curve,
            wall_time: start.elapsed().as_secs_f64(),
            seed: cfg.seed,
        },
        nets,
    })
}

/// Backward schemes: steps `N−1, …, 0`, the first with `iters_first`
/// iterations and the rest with `iters_rest`.
pub fn backward_train(cfg: &SolverConfig, model: &HestonParams, drv: &dyn Driver) -> Result<Trained> {
    check_setup(cfg, model, true)?;
    let start = Instant::now();
    let method = cfg.method;
    let n = model.state_dim();
    let big_n = cfg.n_steps;
    let scaling = InputScaling::for_model(model);
    let val = model.simulate(big_n, cfg.val_size, derive_seed(cfg.seed, &[TAG_VAL]))?;
    // Trained networks for steps i..N, stored in reverse (index 0 is N−1).
    let mut u_done: Vec<Mlp> = Vec::with_capacity(big_n);
    let mut v_done: Vec<Mlp> = Vec::new();
    let mut val_tail = Tensor::zeros(&[cfg.val_size, 1]);
    let mut curve = Vec::new();

    for i in (0..big_n).rev() {
        let first = i == big_n - 1;
        let iters = if first { cfg.iters_first } else { cfg.iters_rest };
        let mut u = match u_done.last() {
            Some(prev) => prev.clone(),
            None => cfg.net(n, 1, derive_seed(cfg.seed, &[TAG_INIT_U]))?,
        };
        let mut v = if method.has_v_net() {
            Some(match v_done.last() {
                Some(prev) => prev.clone(),
                None => cfg.net(n, n, derive_seed(cfg.seed, &[TAG_INIT_V]))?,
            })
        } else {
            None
        };
        let mut adam_u = AdamState::new(u.params(), cfg.lr);
        let mut adam_v = v.as_ref().map(|net| AdamState::new(net.params(), cfg.lr));
        // Later networks in forward order, for the multistep tail.
        let later_u: Vec<Mlp> = u_done.iter().rev().cloned().collect();
        let later_v: Vec<Mlp> = v_done.iter().rev().cloned().collect();
        let next = match u_done.last() {
            Some(prev) => NextValue::Net(prev),
            None => NextValue::Payoff,
        };
        let val_data = losses::step_data(model, &scaling, drv, method, &val, i, next, Some(&val_tail))?;

        for k in 0..iters {
            let paths = train_paths(model, cfg, (i + 1) as u64, k)?;
            let tail = if method == Method::Mdbdp {
                Some(losses::mdbdp_tail(&scaling, drv, &paths, i, &later_u, &later_v)?)
            } else {
                None
            };
            let data = losses::step_data(model, &scaling, drv, method, &paths, i, next, tail.as_ref())?;
            let rec = losses::record_step(model, &scaling, drv, &data, &u, v.as_ref(), true, NormMode::Batch)?;
            Diverged { time_step: Some(i), curve: &curve }.check(&rec, k, "training")?;
            let grads = rec.grads();
            let lr = cfg.lr_at(k, iters);
            adam_update(&mut adam_u, &mut u, &grads[0], lr)?;
            u.update_running(&rec.stats[0]);
            if let (Some(net), Some(adam)) = (v.as_mut(), adam_v.as_mut()) {
                adam_update(adam, net, &grads[1], lr)?;
                net.update_running(&rec.stats[1]);
            }
            if (k + 1) % cfg.val_every == 0 || k + 1 == iters {
                let rec = losses::record_step(model, &scaling, drv, &val_data, &u, v.as_ref(), false, NormMode::Running)?;
                let loss = Diverged { time_step: Some(i), curve: &curve }.check(&rec, k + 1, "validation")?;
                curve.push(LossPoint {
                    time_step: Some(i),
                    iteration: k + 1,
                    loss,
                });
            }
        }
        if let Some(vnet) = &v {
            if method == Method::Mdbdp && i > 0 {
                let term = losses::mdbdp_term(&scaling, drv, &val, i, &u, vnet)?;
                val_tail.add_assign(&term);
            }
        }
        u_done.push(u);
        if let Some(vnet) = v {
            v_done.push(vnet);
        }
    }
    u_done.reverse();
    v_done.reverse();
    let nets = StepNets::Backward { u: u_done, v: v_done };
    let price = price_at_initial(model, &nets)?;
    if !price.is_finite() {
        return Err(Error::Divergence {
            time_step: Some(0),
            iteration: cfg.iters_rest,
            path: None,
            detail: format!("U_0(x0) is {price}"),
            partial_curve: curve,
        });
    }
    Ok(Trained {
        run: SolverRun {
            config: cfg.clone(),
            price,
            loss_curve: curve,
            wall_time: start.elapsed().as_secs_f64(),
            seed: cfg.seed,
        },
        nets,
    })
}
