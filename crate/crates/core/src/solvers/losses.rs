//! Training objectives of the five schemes, recorded on a tape.
//!
//! Every network sees standardized inputs (see [`InputScaling`]); gradients
//! with respect to the raw state are recovered by folding the scaling into
//! the diffusion matrix, `σᵀ∇ₓu = (Dσ)ᵀ∇ₓ̃u` with `D = diag(1/scale)`.
//!
//! The public objectives are training objectives: batch-normalized networks
//! normalize with the statistics of `paths`.

use crate::ad::{Mlp, NormMode, RunningStats, Tape, TapeGrads, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{Driver, HestonParams, PathBatch};

use super::Method;

/// Affine standardization of network inputs around the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    center: Vec<f64>,
    inv_scale: Vec<f64>,
}

impl InputScaling {
    /// Prices are measured in units of `s0`, variances in units of
    /// `max(ν0, θ)` (or 1 if both vanish).
    pub fn for_model(p: &HestonParams) -> Self {
        let var_scale = match p.nu0.max(p.theta) {
            v if v > 0.0 => v,
            _ => 1.0,
        };
        let mut inv_scale = vec![1.0 / p.s0; p.d];
        inv_scale.extend(std::iter::repeat_n(1.0 / var_scale, p.d));
        Self {
            center: p.initial_state(),
            inv_scale,
        }
    }

    pub fn inv_scale(&self) -> &[f64] {
        &self.inv_scale
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let n = self.center.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((v, c), s) in row.iter_mut().zip(&self.center).zip(&self.inv_scale) {
                *v = (*v - c) * s;
            }
        }
        out
    }
}

/// Terminal condition of a backward step: the payoff at maturity or the
/// frozen network of the following step.
#[derive(Debug, Clone, Copy)]
pub enum NextValue<'a> {
    Payoff,
    Net(&'a Mlp),
}

/// A loss value together with parameter gradients, grouped per trainable
/// object in the order the loss function received them.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Vec<Tensor>>,
}

pub(crate) struct Recorded {
    pub tape: Tape,
    pub loss: Var,
    pub residual: Var,
    pub groups: Vec<Vec<Var>>,
    /// Batch normalization statistics per group; empty in running mode.
    pub stats: Vec<Vec<RunningStats>>,
}

impl Recorded {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }

    /// First batch row whose residual is not finite.
    pub fn bad_path(&self) -> Option<usize> {
        self.tape.value(self.residual).first_non_finite()
    }

    pub fn grads(&self) -> Vec<Vec<Tensor>> {
        let mut g: TapeGrads = self.tape.backward(self.loss);
        self.groups
            .iter()
            .map(|vars| vars.iter().map(|&v| g.take(v)).collect())
            .collect()
    }

    fn into_loss_grad(self) -> LossGrad {
        LossGrad {
            loss: self.value(),
            grads: self.grads(),
        }
    }
}

/// `out[b] = mats[b]ᵀ a[b]` for constant inputs.
fn matvec_t(mats: &Tensor, a: &Tensor) -> Tensor {
    let n = a.cols();
    let mut out = Tensor::zeros(a.shape());
    for b in 0..a.rows() {
        let m = &mats.data()[b * n * n..(b + 1) * n * n];
        let row = out.row_mut(b);
        for (j, &aj) in a.row(b).iter().enumerate() {
            for (o, mji) in row.iter_mut().zip(&m[j * n..(j + 1) * n]) {
                *o += mji * aj;
            }
        }
    }
    out
}

fn check_paths(model: &HestonParams, paths: &PathBatch, i: Option<usize>) -> Result<()> {
    if paths.state_dim() != model.state_dim() {
        return Err(Error::shape(
            "step_loss",
            format!("paths have state dim {}, model {}", paths.state_dim(), model.state_dim()),
        ));
    }
    if let Some(i) = i {
        if i >= paths.n_steps {
            return Err(Error::Invalid(format!(
                "time index {i} out of range for {} steps",
                paths.n_steps
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn record_dbsde(
    model: &HestonParams,
    scaling: &InputScaling,
    drv: &dyn Driver,
    paths: &PathBatch,
    u0: f64,
    z: &[Mlp],
    trainable: bool,
    mode: NormMode,
) -> Result<Recorded> {
    check_paths(model, paths, None)?;
    if z.len() != paths.n_steps {
        return Err(Error::shape(
            "dbsde_loss",
            format!("{} Z networks for {} time steps", z.len(), paths.n_steps),
        ));
    }
    let mut tape = Tape::new();
    let u0v = if trainable {
        tape.param(Tensor::scalar(u0))
    } else {
        tape.constant(Tensor::scalar(u0))
    };
    let mut groups = vec![vec![u0v]];
    let mut stats = vec![vec![]];
    let mut y = tape.broadcast_rows(u0v, paths.batch)?;
    for (i, net) in z.iter().enumerate() {
        let x = paths.state_at(i);
        let feat = tape.constant(scaling.apply(&x));
        let xr = tape.constant(x);
        let trace = net.record_with(&mut tape, feat, trainable, mode)?;
        groups.push(trace.params.clone());
        stats.push(trace.batch_stats);
        let zi = trace.output;
        let f = drv.record(&mut tape, i as f64 * paths.dt, xr, y, zi)?;
        let fdt = tape.scale(f, paths.dt);
        let dw = tape.constant(paths.dw_at(i));
        let zdw = tape.row_dot(zi, dw)?;
        let y1 = tape.add(y, fdt)?;
        y = tape.add(y1, zdw)?;
    }
    let g = tape.constant(model.payoff(&paths.terminal()));
    let residual = tape.sub(y, g)?;
    let loss = tape.mean_square(residual);
    Ok(Recorded {
        tape,
        loss,
        residual,
        groups,
        stats,
    })
}

/// Per-step inputs of a backward objective that do not depend on the
/// networks being trained.
#[derive(Debug, Clone)]
pub(crate) struct StepData {
    pub i: usize,
    pub dt: f64,
    pub x: Tensor,
    pub dw: Tensor,
    /// Regression target: `U_{i+1}(X_{i+1})`, or `g(X_N) − tail` for MDBDP.
    pub target: Tensor,
    /// Frozen driver term of the splitting scheme, already multiplied by Δt.
    pub fdt_const: Option<Tensor>,
}

pub(crate) fn next_value(
    model: &HestonParams,
    scaling: &InputScaling,
    next: NextValue,
    x: &Tensor,
) -> Result<Tensor> {
    match next {
        NextValue::Payoff => Ok(model.payoff(x)),
        NextValue::Net(net) => net.forward(&scaling.apply(x)),
    }
}

/// `Σ_{j=i+1}^{N−1} [f(t_j, X_j, U_j, V_j)Δt + V_j·ΔW_j]`, accumulated from
/// `j = N−1` downward. `later_u[k]` and `later_v[k]` are the networks of
/// step `i + 1 + k`.
pub(crate) fn mdbdp_tail(
    scaling: &InputScaling,
    drv: &dyn Driver,
    paths: &PathBatch,
    i: usize,
    later_u: &[Mlp],
    later_v: &[Mlp],
) -> Result<Tensor> {
    if i >= paths.n_steps {
        return Err(Error::Invalid(format!("time index {i} out of range for {} steps", paths.n_steps)));
    }
    let n_later = paths.n_steps - i - 1;
    if later_u.len() != n_later || later_v.len() != n_later {
        return Err(Error::shape(
            "mdbdp_step_loss",
            format!(
                "{} U and {} V networks for {n_later} later steps",
                later_u.len(),
                later_v.len()
            ),
        ));
    }
    let mut tail = Tensor::zeros(&[paths.batch, 1]);
    for k in (0..n_later).rev() {
        let j = i + 1 + k;
        let term = mdbdp_term(scaling, drv, paths, j, &later_u[k], &later_v[k])?;
        tail.add_assign(&term);
    }
    Ok(tail)
}

/// `f(t_j, X_j, U_j, V_j)Δt + V_j·ΔW_j` on a batch.
pub(crate) fn mdbdp_term(
    scaling: &InputScaling,
    drv: &dyn Driver,
    paths: &PathBatch,
    j: usize,
    u: &Mlp,
    v: &Mlp,
) -> Result<Tensor> {
    let x = paths.state_at(j);
    let feat = scaling.apply(&x);
    let uj = u.forward(&feat)?;
    let vj = v.forward(&feat)?;
    let dw = paths.dw_at(j);
    let f = drv.eval(j as f64 * paths.dt, &x, &uj, &vj)?;
    let vdw: Vec<f64> = (0..dw.rows())
        .map(|b| vj.row(b).iter().zip(dw.row(b)).map(|(p, q)| p * q).sum())
        .collect();
    Ok(f.zip_map(&Tensor::matrix(dw.rows(), 1, vdw), |a, b| a * paths.dt + b))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn step_data(
    model: &HestonParams,
    scaling: &InputScaling,
    drv: &dyn Driver,
    method: Method,
    paths: &PathBatch,
    i: usize,
    next: NextValue,
    mdbdp_tail: Option<&Tensor>,
) -> Result<StepData> {
    check_paths(model, paths, Some(i))?;
    let x = paths.state_at(i);
    let dw = paths.dw_at(i);
    let dt = paths.dt;
    let (target, fdt_const) = match method {
        Method::Mdbdp => {
            let g = model.payoff(&paths.terminal());
            let target = match mdbdp_tail {
                Some(tail) => g.zip_map(tail, |a, b| a - b),
                None => g,
            };
            (target, None)
        }
        Method::Dbdp1 | Method::Dbdp2 => {
            (next_value(model, scaling, next, &paths.state_at(i + 1))?, None)
        }
        Method::Ds => {
            let x1 = paths.state_at(i + 1);
            let u1 = next_value(model, scaling, next, &x1)?;
            let v1 = match next {
                NextValue::Payoff => matvec_t(&model.diffusion_batch(&x, None), &model.payoff_grad(&x1)),
                NextValue::Net(net) => {
                    let ones = Tensor::full(&[x1.rows(), 1], 1.0);
                    let grad = net
                        .backward(&scaling.apply(&x1), &ones, true)?
                        .input
                        .expect("input gradient requested");
                    matvec_t(&model.diffusion_batch(&x, Some(scaling.inv_scale())), &grad)
                }
            };
            let f = drv.eval(i as f64 * dt, &x1, &u1, &v1)?;
            (u1, Some(f.map(|v| v * dt)))
        }
        Method::Dbsde => {
            return Err(Error::Invalid("DBSDE has no backward step objective".into()));
        }
    };
    Ok(StepData {
        i,
        dt,
        x,
        dw,
        target,
        fdt_const,
    })
}

/// Records `target − U_i − f·Δt − V_i·ΔW_i` (or its splitting variant) and
/// the mean squared residual.
///
/// `v` is the free `V_i` network; when absent the scheme either derives
/// `V_i = σᵀ∇ₓU_i` on the tape (DBDP2) or has no `V_i` at all (DS).
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_step(
    model: &HestonParams,
    scaling: &InputScaling,
    drv: &dyn Driver,
    data: &StepData,
    u: &Mlp,
    v: Option<&Mlp>,
    trainable: bool,
    mode: NormMode,
) -> Result<Recorded> {
    let mut tape = Tape::new();
    let feat = tape.constant(scaling.apply(&data.x));
    let ut = u.record_with(&mut tape, feat, trainable, mode)?;
    let mut groups = vec![ut.params.clone()];
    let mut stats = vec![ut.batch_stats.clone()];
    let target = tape.constant(data.target.clone());
    let r0 = tape.sub(target, ut.output)?;
    let residual = if let Some(fdt) = &data.fdt_const {
        let fdt = tape.constant(fdt.clone());
        tape.sub(r0, fdt)?
    } else {
        let vi = match v {
            Some(net) => {
                let vt = net.record_with(&mut tape, feat, trainable, mode)?;
                groups.push(vt.params.clone());
                stats.push(vt.batch_stats);
                vt.output
            }
            None => {
                let ones = tape.constant(Tensor::full(&[data.x.rows(), 1], 1.0));
                let grad = u.record_input_grad(&mut tape, &ut, ones)?;
                let mats = model.diffusion_batch(&data.x, Some(scaling.inv_scale()));
                tape.batch_matvec_t(mats, grad)?
            }
        };
        let xr = tape.constant(data.x.clone());
        let f = drv.record(&mut tape, data.i as f64 * data.dt, xr, ut.output, vi)?;
        let fdt = tape.scale(f, data.dt);
        let dw = tape.constant(data.dw.clone());
        let vdw = tape.row_dot(vi, dw)?;
        let r1 = tape.sub(r0, fdt)?;
        tape.sub(r1, vdw)?
    };
    let loss = tape.mean_square(residual);
    Ok(Recorded {
        tape,
        loss,
        residual,
        groups,
        stats,
    })
}

/// Forward-scheme objective `E|Ŷ_N − g(X̂_N)|²`.
pub fn dbsde_loss(model: &HestonParams, drv: &dyn Driver, paths: &PathBatch, u0: f64, z: &[Mlp]) -> Result<f64> {
    let s = InputScaling::for_model(model);
    Ok(record_dbsde(model, &s, drv, paths, u0, z, false, NormMode::Batch)?.value())
}

/// [`dbsde_loss`] with gradients: group 0 is `u0` (as a `[1, 1]` tensor),
/// group `1 + i` the parameters of `Ẑ_i`.
pub fn dbsde_loss_grad(model: &HestonParams, drv: &dyn Driver, paths: &PathBatch, u0: f64, z: &[Mlp]) -> Result<LossGrad> {
    let s = InputScaling::for_model(model);
    Ok(record_dbsde(model, &s, drv, paths, u0, z, true, NormMode::Batch)?.into_loss_grad())
}

#[allow(clippy::too_many_arguments)]
fn backward_step(
    model: &HestonParams,
    drv: &dyn Driver,
    method: Method,
    paths: &PathBatch,
    i: usize,
    u: &Mlp,
    v: Option<&Mlp>,
    next: NextValue,
    tail: Option<&Tensor>,
    trainable: bool,
) -> Result<Recorded> {
    let s = InputScaling::for_model(model);
    let data = step_data(model, &s, drv, method, paths, i, next, tail)?;
    record_step(model, &s, drv, &data, u, v, trainable, NormMode::Batch)
}

/// DBDP objective at step `i`. With `v = Some(V_i)` this is DBDP1; with
/// `None`, `V_i = σᵀ∇ₓU_i` is differentiated through (DBDP2).
pub fn dbdp_step_loss(
    model: &HestonParams,
    drv: &dyn Driver,
    paths: &PathBatch,
    i: usize,
    u: &Mlp,
    v: Option<&Mlp>,
    next: NextValue,
) -> Result<f64> {
    let method = if v.is_some() { Method::Dbdp1 } else { Method::Dbdp2 };
    Ok(backward_step(model, drv, method, paths, i, u, v, next, None, false)?.value())
}

/// [`dbdp_step_loss`] with gradients for `U_i` and, if given, `V_i`.
pub fn dbdp_step_loss_grad(
    model: &HestonParams,
    drv: &dyn Driver,
    paths: &PathBatch,
    i: usize,
    u: &Mlp,
    v: Option<&Mlp>,
    next: NextValue,
) -> Result<LossGrad> {
    let method = if v.is_some() { Method::Dbdp1 } else { Method::Dbdp2 };
    Ok(backward_step(model, drv, method, paths, i, u, v, next, None, true)?.into_loss_grad())
}

/// Deep splitting objective at step `i`; the driver is evaluated on the
/// frozen next-step network and carries no gradient.
pub fn ds_step_loss(
    model: &HestonParams,
    drv: &dyn Driver,
    paths: &PathBatch,
    i: usize,
    u: &Mlp,
    next: NextValue,
) -> Result<f64> {
    Ok(backward_step(model, drv, Method::Ds, paths, i, u, None, next, None, false)?.value())
}

pub fn ds_step_loss_grad(
    model: &HestonParams,
    drv: &dyn Driver,
    paths: &PathBatch,
    i: usize,
    u: &Mlp,
    next: NextValue,
) -> Result<LossGrad> {
    Ok(backward_step(model, drv, Method::Ds, paths, i, u, None, next, None, true)?.into_loss_grad())
}

/// Multistep objective at step `i`: the target is `g(X_N)` minus the driver
/// and martingale increments of all later, frozen steps.
#[allow(clippy::too_many_arguments)]
pub fn mdbdp_step_loss(
    model: &HestonParams,
    drv: &dyn Driver,
    paths: &PathBatch,
    i: usize,
    u: &Mlp,
    v: &Mlp,
    later_u: &[Mlp],
    later_v: &[Mlp],
) -> Result<f64> {
    let s = InputScaling::for_model(model);
    let tail = mdbdp_tail(&s, drv, paths, i, later_u, later_v)?;
    let rec = backward_step(model, drv, Method::Mdbdp, paths, i, u, Some(v), NextValue::Payoff, Some(&tail), false)?;
    Ok(rec.value())
}

#[allow(clippy::too_many_arguments)]
pub fn mdbdp_step_loss_grad(
    model: &HestonParams,
    drv: &dyn Driver,
    paths: &PathBatch,
    i: usize,
    u: &Mlp,
    v: &Mlp,
    later_u: &[Mlp],
    later_v: &[Mlp],
) -> Result<LossGrad> {
    let s = InputScaling::for_model(model);
    let tail = mdbdp_tail(&s, drv, paths, i, later_u, later_v)?;
    let rec = backward_step(model, drv, Method::Mdbdp, paths, i, u, Some(v), NextValue::Payoff, Some(&tail), true)?;
    Ok(rec.into_loss_grad())
}
