//! Fully connected feedforward networks.
//!
//! A network maps `[batch, input_dim]` to `[batch, output_dim]` through the
//! hidden widths, applying the activation after every hidden layer and
//! nothing after the output layer. Layer `l` computes `h · W_l + b_l` with
//! `W_l` stored `[fan_in, fan_out]` and `b_l` stored `[1, fan_out]`.
//!
//! With batch normalization the biases are replaced by normalization sites:
//! one on the input, one after every linear map (before the activation) and
//! one on the output. Each site has a trainable scale `γ` and shift `β`, and
//! running statistics used outside training. Parameters are then laid out as
//! `[γ_in, β_in, W_0, γ_1, β_1, W_1, γ_2, β_2, …]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance offset inside every normalization.
pub const BN_EPS: f64 = 1e-3;
/// Weight of the old value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn code(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => 1.0,
            Activation::Identity => 2.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        match c as i64 {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn deriv(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Which statistics a normalization site uses when recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Running statistics (inference).
    Running,
}

/// Running mean and variance of one normalization site, each `[1, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input_dim: usize,
    output_dim: usize,
    hidden: Vec<usize>,
    activation: Activation,
    params: Vec<Tensor>,
    /// One entry per normalization site; empty without batch normalization.
    running: Vec<RunningStats>,
}

/// Parameter gradients (same order and shapes as [`Mlp::params`]) plus the
/// optional gradient with respect to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Option<Tensor>,
}

/// Nodes of one normalization site on a tape.
#[derive(Debug, Clone)]
pub struct NormTrace {
    xhat: Var,
    /// `1/√(var + ε)` broadcast to `[batch, width]`.
    inv: Var,
    /// `γ` broadcast to `[batch, width]`.
    gamma: Var,
    batch: bool,
}

/// Nodes recorded by [`Mlp::record`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub params: Vec<Var>,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Var>,
    /// Activations of each hidden layer.
    pub post: Vec<Var>,
    pub output: Var,
    pub norm: Vec<NormTrace>,
    /// Batch statistics per normalization site, when recorded in
    /// [`NormMode::Batch`]; feed them to [`Mlp::update_running`].
    pub batch_stats: Vec<RunningStats>,
}

/// Forward intermediates of the plain (tape-free) evaluation.
struct Forward {
    /// Network input after the input normalization (or the input itself).
    h0: Tensor,
    /// Linear outputs `h · W_l` before normalization or bias.
    lin: Vec<Tensor>,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
    out: Tensor,
}

fn layer_dims(input_dim: usize, output_dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    dims
}

fn broadcast_row(row: &Tensor, rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        data.extend_from_slice(row.data());
    }
    Tensor::matrix(rows, row.len(), data)
}

fn scale_cols(t: &Tensor, s: &[f64]) -> Tensor {
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(s.len()) {
        row.iter_mut().zip(s).for_each(|(v, k)| *v *= k);
    }
    out
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(
        input_dim: usize,
        output_dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        Self::init_with(input_dim, output_dim, hidden, activation, false, seed)
    }

    /// As [`init`](Self::init), optionally with batch normalization
    /// (`γ = 1`, `β = 0`, running mean 0 and variance 1).
    pub fn init_with(
        input_dim: usize,
        output_dim: usize,
        hidden: &[usize],
        activation: Activation,
        batch_norm: bool,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::Invalid(format!(
                "network dimensions must be positive (input {input_dim}, output {output_dim}, hidden {hidden:?})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = layer_dims(input_dim, output_dim, hidden);
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut site = |params: &mut Vec<Tensor>, width: usize| {
            params.push(Tensor::full(&[1, width], 1.0));
            params.push(Tensor::zeros(&[1, width]));
            running.push(RunningStats {
                mean: Tensor::zeros(&[1, width]),
                var: Tensor::full(&[1, width], 1.0),
            });
        };
        if batch_norm {
            site(&mut params, input_dim);
        }
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            params.push(Tensor::matrix(fan_in, fan_out, data));
            if batch_norm {
                site(&mut params, fan_out);
            } else {
                params.push(Tensor::zeros(&[1, fan_out]));
            }
        }
        Ok(Self {
            input_dim,
            output_dim,
            hidden: hidden.to_vec(),
            activation,
            params,
            running,
        })
    }

    /// Builds a network without normalization from explicit parameters,
    /// checking that the layer shapes chain from `input_dim` to `output_dim`.
    pub fn from_params(activation: Activation, params: Vec<Tensor>) -> Result<Self> {
        if params.is_empty() || !params.len().is_multiple_of(2) {
            return Err(Error::shape(
                "Mlp::from_params",
                "expected alternating weight/bias tensors",
            ));
        }
        let mut dims = vec![];
        for (l, pair) in params.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            if !w.is_matrix() || b.shape() != [1, w.cols()] {
                return Err(Error::shape(
                    "Mlp::from_params",
                    format!("layer {l}: weight {:?}, bias {:?}", w.shape(), b.shape()),
                ));
            }
            if let Some(&prev) = dims.last() {
                if prev != w.rows() {
                    return Err(Error::shape(
                        "Mlp::from_params",
                        format!("layer {l} expects {} inputs, previous emits {prev}", w.rows()),
                    ));
                }
            } else {
                dims.push(w.rows());
            }
            dims.push(w.cols());
        }
        if dims.contains(&0) {
            return Err(Error::Invalid("zero-width layer".into()));
        }
        Ok(Self {
            input_dim: dims[0],
            output_dim: *dims.last().unwrap(),
            hidden: dims[1..dims.len() - 1].to_vec(),
            activation,
            params,
            running: vec![],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn batch_norm(&self) -> bool {
        !self.running.is_empty()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn w_idx(&self, l: usize) -> usize {
        if self.batch_norm() {
            2 + 3 * l
        } else {
            2 * l
        }
    }

    /// Index of `γ` for normalization site `s` (0 is the input).
    fn gamma_idx(s: usize) -> usize {
        if s == 0 {
            0
        } else {
            3 * s
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.input_dim {
            return Err(Error::shape(
                "mlp_forward",
                format!(
                    "input shaped {:?}, network expects [batch, {}]",
                    x.shape(),
                    self.input_dim
                ),
            ));
        }
        Ok(())
    }

    /// `1/√(running var + ε)` of site `s`.
    fn running_inv(&self, s: usize) -> Vec<f64> {
        self.running[s].var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()
    }

    /// Inference-mode normalization of site `s`.
    fn norm_running(&self, z: &Tensor, s: usize) -> Tensor {
        let g = Self::gamma_idx(s);
        let (gamma, beta) = (self.params[g].data(), self.params[g + 1].data());
        let mean = self.running[s].mean.data();
        let inv = self.running_inv(s);
        let mut out = z.clone();
        for row in out.data_mut().chunks_mut(z.cols()) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv[j] * gamma[j] + beta[j];
            }
        }
        out
    }

    fn forward_full(&self, x: &Tensor) -> Forward {
        let bn = self.batch_norm();
        let h0 = if bn { self.norm_running(x, 0) } else { x.clone() };
        let last = self.n_layers() - 1;
        let mut lin = Vec::with_capacity(last + 1);
        let mut pre = Vec::with_capacity(last);
        let mut post: Vec<Tensor> = Vec::with_capacity(last);
        let mut out = None;
        for l in 0..=last {
            let h = post.last().unwrap_or(&h0);
            let w = self.w_idx(l);
            let zl = Tensor::matmul(h, &self.params[w], false, false).expect("layer shapes validated");
            let z = if bn {
                self.norm_running(&zl, l + 1)
            } else {
                let mut z = zl.clone();
                let b = self.params[w + 1].data();
                for row in z.data_mut().chunks_mut(b.len()) {
                    row.iter_mut().zip(b).for_each(|(o, bb)| *o += bb);
                }
                z
            };
            lin.push(zl);
            if l < last {
                let act = self.activation;
                post.push(z.map(|v| act.apply(v)));
                pre.push(z);
            } else {
                out = Some(z);
            }
        }
        Forward {
            h0,
            lin,
            pre,
            post,
            out: out.expect("at least one layer"),
        }
    }

    /// Inference-mode evaluation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.forward_full(x).out)
    }

    /// Backpropagates `g` through inference-mode site `s`, writing `γ` and
    /// `β` gradients into `grads`. `z` is the site input.
    fn norm_running_back(&self, g: &Tensor, z: &Tensor, s: usize, grads: &mut [Tensor]) -> Tensor {
        let gi = Self::gamma_idx(s);
        let inv = self.running_inv(s);
        let mean = self.running[s].mean.data();
        let n = z.cols();
        let mut dgamma = vec![0.0; n];
        for (gr, zr) in g.data().chunks(n).zip(z.data().chunks(n)) {
            for j in 0..n {
                dgamma[j] += gr[j] * (zr[j] - mean[j]) * inv[j];
            }
        }
        grads[gi] = Tensor::matrix(1, n, dgamma);
        grads[gi + 1] = g.sum_rows();
        let k: Vec<f64> = inv.iter().zip(self.params[gi].data()).map(|(a, b)| a * b).collect();
        scale_cols(g, &k)
    }

    /// Gradients of `sum(upstream ⊙ forward(x))`, in inference mode.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor, want_input_grad: bool) -> Result<Gradients> {
        self.check_input(x)?;
        if upstream.shape() != [x.rows(), self.output_dim] {
            return Err(Error::shape(
                "mlp_backward",
                format!(
                    "upstream shaped {:?}, expected [{}, {}]",
                    upstream.shape(),
                    x.rows(),
                    self.output_dim
                ),
            ));
        }
        if let Some(i) = upstream.first_non_finite() {
            return Err(Error::NonFinite(format!("mlp_backward upstream entry {i}")));
        }
        let bn = self.batch_norm();
        let fw = self.forward_full(x);
        let mut grads = vec![Tensor::zeros(&[0]); self.params.len()];
        let mut g = upstream.clone();
        let mut input = None;
        for l in (0..self.n_layers()).rev() {
            let w = self.w_idx(l);
            if bn {
                g = self.norm_running_back(&g, &fw.lin[l], l + 1, &mut grads);
            } else {
                grads[w + 1] = g.sum_rows();
            }
            let h = if l == 0 { &fw.h0 } else { &fw.post[l - 1] };
            grads[w] = Tensor::matmul(h, &g, true, false)?;
            if l == 0 && !want_input_grad && !bn {
                break;
            }
            let g_in = Tensor::matmul(&g, &self.params[w], false, true)?;
            if l == 0 {
                let g_x = if bn { self.norm_running_back(&g_in, x, 0, &mut grads) } else { g_in };
                if want_input_grad {
                    input = Some(g_x);
                }
                break;
            }
            let act = self.activation;
            let (z, a) = (&fw.pre[l - 1], &fw.post[l - 1]);
            let mut next = g_in;
            for ((gv, &zv), &av) in next.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
                *gv *= act.deriv(zv, av);
            }
            g = next;
        }
        Ok(Gradients {
            params: grads,
            input,
        })
    }

    fn record_norm(
        &self,
        tape: &mut Tape,
        a: Var,
        s: usize,
        params: &[Var],
        mode: NormMode,
        stats: &mut Vec<RunningStats>,
    ) -> Result<(Var, NormTrace)> {
        let rows = tape.value(a).rows();
        let gi = Self::gamma_idx(s);
        let (gamma, beta) = (params[gi], params[gi + 1]);
        let (xhat, inv, batch) = match mode {
            NormMode::Batch => {
                let mu = tape.mean_rows(a);
                let mub = tape.broadcast_rows(mu, rows)?;
                let c = tape.sub(a, mub)?;
                let c2 = tape.mul(c, c)?;
                let var = tape.mean_rows(c2);
                stats.push(RunningStats {
                    mean: tape.value(mu).clone(),
                    var: tape.value(var).clone(),
                });
                let inv1 = tape.rsqrt(var, BN_EPS);
                let inv = tape.broadcast_rows(inv1, rows)?;
                (tape.mul(c, inv)?, inv, true)
            }
            NormMode::Running => {
                let mean = tape.constant(broadcast_row(&self.running[s].mean, rows));
                let inv_row = Tensor::matrix(1, self.running[s].var.len(), self.running_inv(s));
                let inv = tape.constant(broadcast_row(&inv_row, rows));
                let c = tape.sub(a, mean)?;
                (tape.mul(c, inv)?, inv, false)
            }
        };
        let gb = tape.broadcast_rows(gamma, rows)?;
        let scaled = tape.mul(xhat, gb)?;
        let out = tape.add_bias(scaled, beta)?;
        Ok((
            out,
            NormTrace {
                xhat,
                inv,
                gamma: gb,
                batch,
            },
        ))
    }

    /// Records the forward pass on `tape` in inference mode. Parameters
    /// become trainable leaves when `trainable`, constants otherwise.
    pub fn record(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<MlpTrace> {
        self.record_with(tape, x, trainable, NormMode::Running)
    }

    /// Records the forward pass with the given normalization mode (ignored
    /// without batch normalization).
    pub fn record_with(&self, tape: &mut Tape, x: Var, trainable: bool, mode: NormMode) -> Result<MlpTrace> {
        self.check_input(tape.value(x))?;
        let bn = self.batch_norm();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let last = self.n_layers() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut post = Vec::with_capacity(last);
        let mut norm = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = x;
        if bn {
            let (y, nt) = self.record_norm(tape, x, 0, &params, mode, &mut batch_stats)?;
            norm.push(nt);
            h = y;
        }
        let mut output = h;
        for l in 0..=last {
            let w = self.w_idx(l);
            let z = tape.matmul(h, params[w], false, false)?;
            let z = if bn {
                let (y, nt) = self.record_norm(tape, z, l + 1, &params, mode, &mut batch_stats)?;
                norm.push(nt);
                y
            } else {
                tape.add_bias(z, params[w + 1])?
            };
            if l == last {
                output = z;
                break;
            }
            let a = match self.activation {
                Activation::Relu => tape.relu(z),
                Activation::Tanh => tape.tanh(z),
                Activation::Identity => z,
            };
            pre.push(z);
            post.push(a);
            h = a;
        }
        Ok(MlpTrace {
            params,
            pre,
            post,
            output,
            norm,
            batch_stats,
        })
    }

    /// Blends batch statistics from a [`NormMode::Batch`] trace into the
    /// running statistics.
    pub fn update_running(&mut self, stats: &[RunningStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.mean = r.mean.zip_map(&s.mean, |a, b| BN_MOMENTUM * a + (1.0 - BN_MOMENTUM) * b);
            r.var = r.var.zip_map(&s.var, |a, b| BN_MOMENTUM * a + (1.0 - BN_MOMENTUM) * b);
        }
    }

    /// Input gradient through one normalization site, as tape operations.
    fn record_norm_back(tape: &mut Tape, g: Var, nt: &NormTrace) -> Result<Var> {
        let gx = tape.mul(g, nt.gamma)?;
        if !nt.batch {
            return tape.mul(gx, nt.inv);
        }
        let rows = tape.value(g).rows();
        let m1 = tape.mean_rows(gx);
        let m1 = tape.broadcast_rows(m1, rows)?;
        let gxh = tape.mul(gx, nt.xhat)?;
        let m2 = tape.mean_rows(gxh);
        let m2 = tape.broadcast_rows(m2, rows)?;
        let proj = tape.mul(nt.xhat, m2)?;
        let t = tape.sub(gx, m1)?;
        let t = tape.sub(t, proj)?;
        tape.mul(t, nt.inv)
    }

    /// Records `∂/∂x sum(upstream ⊙ output)` as tape operations, so the
    /// result can itself be differentiated with respect to the parameters.
    /// Batch-mode normalization includes the dependence of the batch
    /// statistics on every row.
    pub fn record_input_grad(&self, tape: &mut Tape, trace: &MlpTrace, upstream: Var) -> Result<Var> {
        let bn = self.batch_norm();
        let mut g = upstream;
        for l in (0..self.n_layers()).rev() {
            if bn {
                g = Self::record_norm_back(tape, g, &trace.norm[l + 1])?;
            }
            let g_in = tape.matmul(g, trace.params[self.w_idx(l)], false, true)?;
            if l == 0 {
                return if bn {
                    Self::record_norm_back(tape, g_in, &trace.norm[0])
                } else {
                    Ok(g_in)
                };
            }
            g = match self.activation {
                Activation::Identity => g_in,
                Activation::Relu => {
                    // Piecewise constant in the parameters: a constant mask.
                    let mask = tape.value(trace.pre[l - 1]).map(|z| if z > 0.0 { 1.0 } else { 0.0 });
                    let mask = tape.constant(mask);
                    tape.mul(g_in, mask)?
                }
                Activation::Tanh => {
                    let a = trace.post[l - 1];
                    let a2 = tape.mul(a, a)?;
                    let neg = tape.scale(a2, -1.0);
                    let d = tape.add_const(neg, 1.0);
                    tape.mul(g_in, d)?
                }
            };
        }
        unreachable!("network has at least one layer")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("activation", Tensor::new(vec![1], vec![self.activation.code()]).unwrap());
        let dims: Vec<f64> = layer_dims(self.input_dim, self.output_dim, &self.hidden)
            .iter()
            .map(|&d| d as f64)
            .collect();
        ck.push("dims", Tensor::new(vec![dims.len()], dims).unwrap());
        ck.push("batch_norm", Tensor::new(vec![1], vec![self.batch_norm() as u8 as f64]).unwrap());
        for (k, p) in self.params.iter().enumerate() {
            ck.push(format!("param{k}"), p.clone());
        }
        for (s, r) in self.running.iter().enumerate() {
            ck.push(format!("running{s}.mean"), r.mean.clone());
            ck.push(format!("running{s}.var"), r.var.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("missing or invalid {what}"));
        let act = ck
            .get("activation")
            .and_then(|t| t.data().first().copied())
            .and_then(Activation::from_code)
            .ok_or_else(|| bad("activation entry"))?;
        let dims: Vec<usize> = ck.get("dims").ok_or_else(|| bad("dims"))?.data().iter().map(|&d| d as usize).collect();
        let bn = ck.get("batch_norm").and_then(|t| t.data().first().copied()).ok_or_else(|| bad("batch_norm flag"))? != 0.0;
        if dims.len() < 2 {
            return Err(bad("dims"));
        }
        let mut net = Self::init_with(dims[0], *dims.last().unwrap(), &dims[1..dims.len() - 1], act, bn, 0)?;
        for k in 0..net.params.len() {
            let t = ck.get(&format!("param{k}")).ok_or_else(|| bad(&format!("param{k}")))?;
            if t.shape() != net.params[k].shape() {
                return Err(Error::Checkpoint(format!(
                    "param{k} shaped {:?}, expected {:?}",
                    t.shape(),
                    net.params[k].shape()
                )));
            }
            net.params[k] = t.clone();
        }
        for (s, r) in net.running.iter_mut().enumerate() {
            for (name, slot) in [("mean", &mut r.mean), ("var", &mut r.var)] {
                let t = ck
                    .get(&format!("running{s}.{name}"))
                    .filter(|t| t.shape() == slot.shape())
                    .ok_or_else(|| bad(&format!("running{s}.{name}")))?;
                *slot = t.clone();
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(seed: u64, i: usize, o: usize, hidden: &[usize], act: Activation) -> Mlp {
        Mlp::init(i, o, hidden, act, seed).unwrap()
    }

    fn rand_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut n = net(1, 3, 2, &[4, 4], Activation::Relu);
        n.params_mut().iter_mut().for_each(|p| p.data_mut().fill(0.0));
        let y = n.forward(&rand_input(5, 3, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_network() {
        let n = Mlp::from_params(
            Activation::Identity,
            vec![Tensor::matrix(1, 1, vec![1.0]), Tensor::matrix(1, 1, vec![0.0])],
        )
        .unwrap();
        assert_eq!(n.forward(&Tensor::matrix(1, 1, vec![2.0])).unwrap().data(), &[2.0]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let n = net(11, 2, 1, &[3, 3], Activation::Relu);
        let x = [0.4, -0.7];
        // Hand-rolled dense layers, independent of the matmul path.
        let layer = |h: &[f64], w: &Tensor, b: &Tensor, relu: bool| -> Vec<f64> {
            (0..w.cols())
                .map(|j| {
                    let mut s = b.data()[j];
                    for (i, hi) in h.iter().enumerate() {
                        s += hi * w.at(i, j);
                    }
                    if relu { s.max(0.0) } else { s }
                })
                .collect()
        };
        let p = n.params();
        let h1 = layer(&x, &p[0], &p[1], true);
        let h2 = layer(&h1, &p[2], &p[3], true);
        let y = layer(&h2, &p[4], &p[5], false);
        let got = n.forward(&Tensor::matrix(1, 2, x.to_vec())).unwrap();
        assert!((got.data()[0] - y[0]).abs() < 1e-14);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let n = net(1, 3, 1, &[4], Activation::Relu);
        let err = n.forward(&Tensor::zeros(&[2, 4])).unwrap_err();
        assert!(err.to_string().contains("[batch, 3]"), "{err}");
    }

    #[test]
    fn forward_is_pure() {
        let n = net(5, 4, 2, &[8, 8], Activation::Tanh);
        let x = rand_input(6, 4, 9);
        assert_eq!(n.forward(&x).unwrap(), n.forward(&x).unwrap());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = net(42, 5, 3, &[7], Activation::Relu);
        let b = net(42, 5, 3, &[7], Activation::Relu);
        let c = net(43, 5, 3, &[7], Activation::Relu);
        assert_eq!(a, b);
        assert_ne!(a.params()[0], c.params()[0]);
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.params()[0].data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(Mlp::init(0, 1, &[4], Activation::Relu, 0).is_err());
        assert!(Mlp::init(3, 0, &[4], Activation::Relu, 0).is_err());
        assert!(Mlp::init(3, 1, &[0], Activation::Relu, 0).is_err());
    }

    #[test]
    fn default_architecture_parameter_count() {
        let n = net(0, 40, 1, &[128, 128], Activation::Relu);
        assert_eq!(n.param_count(), 40 * 128 + 128 + 128 * 128 + 128 + 128 + 1);
        assert_eq!(n.param_count(), 21889);
    }

    #[test]
    fn linear_unit_gradients() {
        let (w, b, x) = (1.7, -0.3, 2.5);
        let n = Mlp::from_params(
            Activation::Identity,
            vec![Tensor::matrix(1, 1, vec![w]), Tensor::matrix(1, 1, vec![b])],
        )
        .unwrap();
        let g = n
            .backward(&Tensor::matrix(1, 1, vec![x]), &Tensor::scalar(1.0), true)
            .unwrap();
        assert_eq!(g.params[0].data(), &[x]);
        assert_eq!(g.params[1].data(), &[1.0]);
        assert_eq!(g.input.unwrap().data(), &[w]);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let n = net(3, 4, 2, &[5], Activation::Tanh);
        let x = rand_input(3, 4, 1);
        let g = n.backward(&x, &Tensor::zeros(&[3, 2]), true).unwrap();
        assert!(g.params.iter().chain(g.input.iter()).all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn input_grad_only_when_requested() {
        let n = net(3, 4, 2, &[5], Activation::Relu);
        let x = rand_input(3, 4, 1);
        let up = Tensor::full(&[3, 2], 1.0);
        assert!(n.backward(&x, &up, false).unwrap().input.is_none());
        assert_eq!(n.backward(&x, &up, true).unwrap().input.unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn backward_rejects_non_finite_upstream() {
        let n = net(3, 2, 1, &[3], Activation::Relu);
        let up = Tensor::matrix(1, 1, vec![f64::NAN]);
        assert!(matches!(
            n.backward(&Tensor::zeros(&[1, 2]), &up, false),
            Err(Error::NonFinite(_))
        ));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central finite differences (h = 1e-5) of every parameter and input.
    fn check_against_fd(act: Activation, seed: u64) {
        let n = net(seed, 5, 3, &[6, 4], act);
        let x = rand_input(4, 5, seed + 1);
        let up = rand_input(4, 3, seed + 2);
        let obj = |m: &Mlp, x: &Tensor| -> f64 {
            m.forward(x)
                .unwrap()
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = n.backward(&x, &up, true).unwrap();
        let h = 1e-5;
        for (pi, grad) in g.params.iter().enumerate() {
            for k in 0..grad.len() {
                let mut p = n.clone();
                p.params_mut()[pi].data_mut()[k] += h;
                let mut m = n.clone();
                m.params_mut()[pi].data_mut()[k] -= h;
                let fd = (obj(&p, &x) - obj(&m, &x)) / (2.0 * h);
                let e = rel_err(grad.data()[k], fd);
                assert!(e < 1e-5 || (grad.data()[k] - fd).abs() < 1e-9, "param {pi}[{k}]: {} vs {fd}", grad.data()[k]);
            }
        }
        let gi = g.input.unwrap();
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (obj(&n, &xp) - obj(&n, &xm)) / (2.0 * h);
            assert!(rel_err(gi.data()[k], fd) < 1e-5 || (gi.data()[k] - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in [1, 7, 19] {
            check_against_fd(Activation::Relu, seed);
            check_against_fd(Activation::Tanh, seed);
        }
    }

    #[test]
    fn tape_record_matches_plain_paths() {
        for act in [Activation::Relu, Activation::Tanh, Activation::Identity] {
            let n = net(8, 3, 2, &[5, 4], act);
            let x = rand_input(6, 3, 4);
            let up = rand_input(6, 2, 5);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let tr = n.record(&mut tape, xv, true).unwrap();
            assert_eq!(tape.value(tr.output), &n.forward(&x).unwrap());

            // Input-gradient graph reproduces the plain input gradient.
            let uv = tape.constant(up.clone());
            let gi = n.record_input_grad(&mut tape, &tr, uv).unwrap();
            let plain = n.backward(&x, &up, true).unwrap();
            let diff = tape
                .value(gi)
                .data()
                .iter()
                .zip(plain.input.unwrap().data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn second_order_parameter_gradients_match_fd() {
        // loss = mean((∇ₓ sum(out) · c)²) differentiated w.r.t. parameters
        for act in [Activation::Relu, Activation::Tanh] {
            let n = net(21, 3, 1, &[6, 5], act);
            let x = rand_input(4, 3, 22);
            let c = rand_input(4, 3, 23);
            let loss = |m: &Mlp| -> (Tape, MlpTrace, Var) {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let tr = m.record(&mut tape, xv, true).unwrap();
                let ones = tape.constant(Tensor::full(&[4, 1], 1.0));
                let gi = m.record_input_grad(&mut tape, &tr, ones).unwrap();
                let cv = tape.constant(c.clone());
                let d = tape.row_dot(gi, cv).unwrap();
                let d = tape.add(d, tr.output).unwrap();
                let l = tape.mean_square(d);
                (tape, tr, l)
            };
            let (tape, tr, l) = loss(&n);
            let g = tape.backward(l);
            let h = 1e-5;
            for (pi, &pv) in tr.params.iter().enumerate() {
                let grad = g.wrt(pv);
                for k in 0..grad.len() {
                    let mut p = n.clone();
                    p.params_mut()[pi].data_mut()[k] += h;
                    let mut m = n.clone();
                    m.params_mut()[pi].data_mut()[k] -= h;
                    let (tp, _, lp) = loss(&p);
                    let (tm, _, lm) = loss(&m);
                    let fd = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
                    let a = grad.data()[k];
                    assert!(rel_err(a, fd) < 1e-5 || (a - fd).abs() < 1e-9, "{act:?} p{pi}[{k}] {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let n = net(30, 3, 2, &[5], Activation::Relu);
        let x = rand_input(4, 3, 31);
        let up = rand_input(4, 2, 32);
        let full = n.backward(&x, &up, false).unwrap();
        let mut summed: Vec<Tensor> = full.params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for r in 0..4 {
            let xr = Tensor::matrix(1, 3, x.row(r).to_vec());
            let ur = Tensor::matrix(1, 2, up.row(r).to_vec());
            let g = n.backward(&xr, &ur, false).unwrap();
            for (s, t) in summed.iter_mut().zip(&g.params) {
                s.add_assign(t);
            }
        }
        for (a, b) in full.params.iter().zip(&summed) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let n = net(2, 4, 3, &[5, 6], Activation::Tanh);
        let mut buf = vec![];
        n.to_checkpoint().write_to(&mut buf).unwrap();
        let back = Mlp::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(n, back);
    }

    /// Network with batch normalization and non-trivial scales, shifts and
    /// running statistics.
    fn bn_net(seed: u64, i: usize, o: usize, hidden: &[usize], act: Activation) -> Mlp {
        let mut n = Mlp::init_with(i, o, hidden, act, true, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb7);
        for p in n.params_mut() {
            if p.rows() == 1 {
                p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
            }
        }
        for r in &mut n.running {
            r.mean.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            r.var.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
        n
    }

    fn record_batch(n: &Mlp, x: &Tensor) -> (Tape, MlpTrace) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tr = n.record_with(&mut tape, xv, true, NormMode::Batch).unwrap();
        (tape, tr)
    }

    fn weighted(t: &Tensor, w: &Tensor) -> f64 {
        t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn batch_norm_layout_and_count() {
        let n = Mlp::init_with(4, 1, &[8, 8], Activation::Relu, true, 0).unwrap();
        assert!(n.batch_norm());
        // γ, β per site (input, two hidden, output) and bias-free weights.
        assert_eq!(n.param_count(), 2 * (4 + 8 + 8 + 1) + 4 * 8 + 8 * 8 + 8);
        assert_eq!(n.running_stats().len(), 4);
        assert_eq!(n.params()[2].shape(), &[4, 8]);
        assert_eq!(n.params()[5].shape(), &[8, 8]);
        assert_eq!(n.params()[8].shape(), &[8, 1]);
        assert!(!net(0, 4, 1, &[8], Activation::Relu).batch_norm());
    }

    #[test]
    fn running_mode_matches_straight_line_oracle() {
        let n = bn_net(3, 2, 1, &[3], Activation::Tanh);
        let x = [0.3, -1.1];
        let norm = |v: &[f64], s: usize, gi: usize| -> Vec<f64> {
            let r = &n.running_stats()[s];
            let (g, b) = (n.params()[gi].data(), n.params()[gi + 1].data());
            v.iter()
                .enumerate()
                .map(|(j, z)| (z - r.mean.data()[j]) / (r.var.data()[j] + BN_EPS).sqrt() * g[j] + b[j])
                .collect()
        };
        let lin = |h: &[f64], w: &Tensor| -> Vec<f64> {
            (0..w.cols()).map(|j| h.iter().enumerate().map(|(i, hi)| hi * w.at(i, j)).sum()).collect()
        };
        let p = n.params();
        let h0 = norm(&x, 0, 0);
        let h1: Vec<f64> = norm(&lin(&h0, &p[2]), 1, 3).iter().map(|z| z.tanh()).collect();
        let y = norm(&lin(&h1, &p[5]), 2, 6);
        let got = n.forward(&Tensor::matrix(1, 2, x.to_vec())).unwrap();
        assert!((got.data()[0] - y[0]).abs() < 1e-14);
    }

    #[test]
    fn batch_mode_output_has_batch_statistics_of_the_shift_and_scale() {
        let n = bn_net(4, 3, 2, &[6], Activation::Relu);
        let x = rand_input(32, 3, 5);
        let (tape, tr) = record_batch(&n, &x);
        let y = tape.value(tr.output);
        let (g, b) = (n.params()[6].data(), n.params()[7].data());
        for j in 0..2 {
            let col: Vec<f64> = (0..32).map(|r| y.at(r, j)).collect();
            let m = col.iter().sum::<f64>() / 32.0;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 32.0;
            assert!((m - b[j]).abs() < 1e-12);
            let raw = tr.batch_stats[2].var.data()[j];
            assert!((v - g[j] * g[j] * raw / (raw + BN_EPS)).abs() < 1e-10);
        }
        assert_eq!(tr.batch_stats.len(), 3);
        let xm: Vec<f64> = (0..3).map(|j| (0..32).map(|r| x.at(r, j)).sum::<f64>() / 32.0).collect();
        for j in 0..3 {
            assert!((tr.batch_stats[0].mean.data()[j] - xm[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_norm_running_backward_matches_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh] {
            let n = bn_net(9, 4, 2, &[5, 3], act);
            let x = rand_input(3, 4, 10);
            let up = rand_input(3, 2, 11);
            let obj = |m: &Mlp, x: &Tensor| weighted(&m.forward(x).unwrap(), &up);
            let g = n.backward(&x, &up, true).unwrap();
            let h = 1e-5;
            for (pi, grad) in g.params.iter().enumerate() {
                for k in 0..grad.len() {
                    let (mut p, mut m) = (n.clone(), n.clone());
                    p.params_mut()[pi].data_mut()[k] += h;
                    m.params_mut()[pi].data_mut()[k] -= h;
                    let fd = (obj(&p, &x) - obj(&m, &x)) / (2.0 * h);
                    let a = grad.data()[k];
                    assert!(rel_err(a, fd) < 1e-5 || (a - fd).abs() < 1e-9, "p{pi}[{k}] {a} vs {fd}");
                }
            }
            let gi = g.input.unwrap();
            for k in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[k] += h;
                xm.data_mut()[k] -= h;
                let fd = (obj(&n, &xp) - obj(&n, &xm)) / (2.0 * h);
                assert!(rel_err(gi.data()[k], fd) < 1e-5 || (gi.data()[k] - fd).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batch_norm_running_tape_matches_plain_paths() {
        let n = bn_net(12, 3, 2, &[4], Activation::Tanh);
        let x = rand_input(5, 3, 13);
        let up = rand_input(5, 2, 14);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tr = n.record(&mut tape, xv, true).unwrap();
        let fw = n.forward(&x).unwrap();
        for (a, b) in tape.value(tr.output).data().iter().zip(fw.data()) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(tr.batch_stats.is_empty());
        let uv = tape.constant(up.clone());
        let gi = n.record_input_grad(&mut tape, &tr, uv).unwrap();
        let plain = n.backward(&x, &up, true).unwrap().input.unwrap();
        for (a, b) in tape.value(gi).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_mode_input_grad_includes_cross_sample_terms() {
        // FD of the batch-mode output w.r.t. every input entry, with the
        // batch statistics recomputed.
        for act in [Activation::Relu, Activation::Tanh] {
            let n = bn_net(15, 3, 1, &[5], act);
            let x = rand_input(6, 3, 16);
            let up = rand_input(6, 1, 17);
            let (mut tape, tr) = record_batch(&n, &x);
            let uv = tape.constant(up.clone());
            let gi = n.record_input_grad(&mut tape, &tr, uv).unwrap();
            let gi = tape.value(gi).clone();
            let h = 1e-6;
            for k in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[k] += h;
                xm.data_mut()[k] -= h;
                let (tp, trp) = record_batch(&n, &xp);
                let (tm, trm) = record_batch(&n, &xm);
                let fd = (weighted(tp.value(trp.output), &up) - weighted(tm.value(trm.output), &up)) / (2.0 * h);
                let a = gi.data()[k];
                assert!(rel_err(a, fd) < 1e-5 || (a - fd).abs() < 1e-8, "{act:?} x[{k}] {a} vs {fd}");
            }
        }
    }

    #[test]
    fn batch_mode_second_order_gradients_match_fd() {
        let n = bn_net(25, 3, 1, &[4], Activation::Tanh);
        let x = rand_input(5, 3, 26);
        let c = rand_input(5, 3, 27);
        let loss = |m: &Mlp| -> (Tape, MlpTrace, Var) {
            let (mut tape, tr) = record_batch(m, &x);
            let ones = tape.constant(Tensor::full(&[5, 1], 1.0));
            let gi = m.record_input_grad(&mut tape, &tr, ones).unwrap();
            let cv = tape.constant(c.clone());
            let d = tape.row_dot(gi, cv).unwrap();
            let d = tape.add(d, tr.output).unwrap();
            let l = tape.mean_square(d);
            (tape, tr, l)
        };
        let (tape, tr, l) = loss(&n);
        let g = tape.backward(l);
        let h = 1e-5;
        for (pi, &pv) in tr.params.iter().enumerate() {
            let grad = g.wrt(pv);
            for k in 0..grad.len() {
                let (mut p, mut m) = (n.clone(), n.clone());
                p.params_mut()[pi].data_mut()[k] += h;
                m.params_mut()[pi].data_mut()[k] -= h;
                let (tp, _, lp) = loss(&p);
                let (tm, _, lm) = loss(&m);
                let fd = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
                let a = grad.data()[k];
                assert!(rel_err(a, fd) < 1e-5 || (a - fd).abs() < 1e-9, "p{pi}[{k}] {a} vs {fd}");
            }
        }
    }

    #[test]
    fn running_statistics_follow_exponential_average() {
        let mut n = Mlp::init_with(2, 1, &[3], Activation::Relu, true, 1).unwrap();
        let x = rand_input(8, 2, 2);
        let (_, tr) = record_batch(&n, &x);
        n.update_running(&tr.batch_stats);
        let s = &tr.batch_stats[0];
        for j in 0..2 {
            let want_m = (1.0 - BN_MOMENTUM) * s.mean.data()[j];
            let want_v = BN_MOMENTUM + (1.0 - BN_MOMENTUM) * s.var.data()[j];
            assert!((n.running_stats()[0].mean.data()[j] - want_m).abs() < 1e-15);
            assert!((n.running_stats()[0].var.data()[j] - want_v).abs() < 1e-15);
        }
        // Constant batches drive the running statistics to the batch values.
        for _ in 0..3000 {
            n.update_running(&tr.batch_stats);
        }
        let r = &n.running_stats()[1];
        for (a, b) in r.mean.data().iter().zip(tr.batch_stats[1].mean.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_checkpoint_roundtrip() {
        let n = bn_net(2, 4, 3, &[5], Activation::Relu);
        let mut buf = vec![];
        n.to_checkpoint().write_to(&mut buf).unwrap();
        let back = Mlp::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(n, back);
    }
}
