//! Wengert tape for reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are recorded eagerly (values are computed as nodes are pushed)
//! and [`Tape::backward`] replays them in reverse. The tape is first-order
//! only, but because input gradients of a network can themselves be recorded
//! as ordinary tape operations (see `Mlp::record_input_grad`), losses that
//! contain `∇ₓU` still get exact parameter gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddBias { a: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    RowDot(Var, Var),
    MeanSquare(Var),
    BroadcastRows(Var),
    MeanRows(Var),
    /// `(a + eps)^(-1/2)`
    Rsqrt(Var),
    /// `out[b, i] = Σ_j mats[b, j, i] · a[b, j]`, i.e. `Mᵀa` per row.
    BatchMatVecT { mats: Tensor, a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct TapeGrads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl TapeGrads {
    /// Gradient of the differentiated output with respect to `v`; zeros when
    /// `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = Tensor::matmul(self.value(a), self.value(b), ta, tb)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Adds a `[1, n]` bias row to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.shape() != [1, av.cols()] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs input {:?}", bv.shape(), av.shape()),
            ));
        }
        let mut out = av.clone();
        let n = av.cols();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias { a, bias }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Row-wise dot product of two `[m, n]` matrices, giving `[m, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        let out: Vec<f64> = av
            .data()
            .chunks(n)
            .zip(bv.data().chunks(n))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let value = Tensor::matrix(av.rows(), 1, out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    /// Mean of squared entries, as a `[1, 1]` tensor.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let ms = av.data().iter().map(|x| x * x).sum::<f64>() / av.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(ms), Op::MeanSquare(a), rg)
    }

    /// Repeats a `[1, n]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() || av.rows() != 1 {
            return Err(Error::shape(
                "broadcast_rows",
                format!("expected [1, n], got {:?}", av.shape()),
            ));
        }
        let n = av.cols();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(av.data());
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(rows, n, data), Op::BroadcastRows(a), rg))
    }

    /// Column means of a `[m, n]` matrix, as `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.rows() as f64;
        let value = av.sum_rows().map(|x| x / m);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Elementwise `1 / √(a + eps)`.
    pub fn rsqrt(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).map(|x| 1.0 / (x + eps).sqrt());
        let rg = self.rg(&[a]);
        self.push(value, Op::Rsqrt(a), rg)
    }

    /// Applies the transpose of a per-row constant matrix:
    /// `out[b] = mats[b]ᵀ · a[b]` with `mats` shaped `[m, n, n]`.
    pub fn batch_matvec_t(&mut self, mats: Tensor, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if mats.shape() != [m, n, n] {
            return Err(Error::shape(
                "batch_matvec_t",
                format!("matrices {:?} vs vectors {:?}", mats.shape(), av.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        for b in 0..m {
            let mb = &mats.data()[b * n * n..(b + 1) * n * n];
            let ab = av.row(b);
            let ob = &mut out[b * n..(b + 1) * n];
            for (j, &aj) in ab.iter().enumerate() {
                if aj == 0.0 {
                    continue;
                }
                for (o, mji) in ob.iter_mut().zip(&mb[j * n..(j + 1) * n]) {
                    *o += mji * aj;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::BatchMatVecT { mats, a },
            rg,
        ))
    }

    /// Reverse sweep from `output`, seeding its adjoint with ones.
    pub fn backward(&self, output: Var) -> TapeGrads {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        }

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = op(A) op(B)
                    if need(a) {
                        let ga = if *ta {
                            Tensor::matmul(bv, &g, *tb, true)
                        } else {
                            Tensor::matmul(&g, bv, false, !*tb)
                        }
                        .expect("matmul backward shapes");
                        acc(&mut grads, *a, ga);
                    }
                    if need(b) {
                        let gb = if *tb {
                            Tensor::matmul(&g, av, true, *ta)
                        } else {
                            Tensor::matmul(av, &g, !*ta, false)
                        }
                        .expect("matmul backward shapes");
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddBias { a, bias } => {
                    if need(bias) {
                        acc(&mut grads, *bias, g.sum_rows());
                    }
                    if need(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                    if need(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if need(b) {
                        acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|x| x * c));
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let cols = av.cols();
                    let scale_rows = |t: &Tensor| {
                        let mut out = t.clone();
                        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
                            let s = g.data()[r];
                            row.iter_mut().for_each(|x| *x *= s);
                        }
                        out
                    };
                    if need(a) {
                        acc(&mut grads, *a, scale_rows(bv));
                    }
                    if need(b) {
                        acc(&mut grads, *b, scale_rows(av));
                    }
                }
                Op::MeanSquare(a) => {
                    let av = self.value(*a);
                    let s = 2.0 * g.data()[0] / av.len() as f64;
                    acc(&mut grads, *a, av.map(|x| s * x));
                }
                Op::BroadcastRows(a) => acc(&mut grads, *a, g.sum_rows()),
                Op::MeanRows(a) => {
                    let m = self.value(*a).rows();
                    let row = g.map(|x| x / m as f64);
                    let mut data = Vec::with_capacity(m * row.len());
                    for _ in 0..m {
                        data.extend_from_slice(row.data());
                    }
                    acc(&mut grads, *a, Tensor::matrix(m, row.len(), data));
                }
                Op::Rsqrt(a) => {
                    let ga = g.zip_map(&node.value, |x, y| -0.5 * x * y * y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::BatchMatVecT { mats, a } => {
                    let (m, ncol) = (g.rows(), g.cols());
                    let mut ga = vec![0.0; m * ncol];
                    for b in 0..m {
                        let mb = &mats.data()[b * ncol * ncol..(b + 1) * ncol * ncol];
                        let gb = g.row(b);
                        for j in 0..ncol {
                            ga[b * ncol + j] = mb[j * ncol..(j + 1) * ncol]
                                .iter()
                                .zip(gb)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(m, ncol, ga));
                }
            }
        }
        TapeGrads { grads, shapes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of a scalar-valued closure over one tensor.
    fn fd(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.shape());
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            out.data_mut()[k] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(
                (x - y).abs() <= tol * (1.0 + y.abs()),
                "{x} vs {y}\n{a:?}\n{b:?}"
            );
        }
    }

    #[test]
    fn matmul_transposes_backward() {
        let a0 = Tensor::matrix(3, 2, vec![0.3, -1.2, 0.7, 0.1, -0.4, 2.0]);
        let b0 = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let f = |a: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (av, bv) = (t.param(a.clone()), t.param(b.clone()));
            // (aᵀ · bᵀ) has shape [2, 4]
            let c = t.matmul(av, bv, true, true).unwrap();
            let c = t.tanh(c);
            let l = t.mean_square(c);
            (t, av, bv, l)
        };
        let (t, av, bv, l) = f(&a0, &b0);
        let g = t.backward(l);
        let fa = fd(|a| f(a, &b0).0.value(f(a, &b0).3).data()[0], &a0);
        let fb = fd(|b| f(&a0, b).0.value(f(&a0, b).3).data()[0], &b0);
        close(&g.wrt(av), &fa, 1e-6);
        close(&g.wrt(bv), &fb, 1e-6);
    }

    #[test]
    fn row_dot_bias_broadcast_matvec_backward() {
        let x0 = Tensor::matrix(3, 2, vec![0.5, -0.2, 1.1, 0.9, -0.6, 0.3]);
        let bias0 = Tensor::matrix(1, 2, vec![0.1, -0.3]);
        let mats = Tensor::new(
            vec![3, 2, 2],
            (0..12).map(|i| (i as f64 * 0.71).cos()).collect(),
        )
        .unwrap();
        let build = |x: &Tensor, bias: &Tensor| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let bv = t.param(bias.clone());
            let y = t.add_bias(xv, bv).unwrap();
            let z = t.batch_matvec_t(mats.clone(), y).unwrap();
            let rb = t.broadcast_rows(bv, 3).unwrap();
            let d = t.row_dot(z, rb).unwrap();
            let d = t.add_const(d, 0.5);
            let l = t.mean_square(d);
            (t, xv, bv, l)
        };
        let (t, xv, bv, l) = build(&x0, &bias0);
        let g = t.backward(l);
        let val = |x: &Tensor, b: &Tensor| {
            let (t, _, _, l) = build(x, b);
            t.value(l).data()[0]
        };
        close(&g.wrt(xv), &fd(|x| val(x, &bias0), &x0), 1e-6);
        close(&g.wrt(bv), &fd(|b| val(&x0, b), &bias0), 1e-6);
    }

    #[test]
    fn mean_rows_and_rsqrt_backward() {
        let x0 = Tensor::matrix(3, 2, vec![0.5, -0.2, 1.1, 0.9, -0.6, 0.3]);
        let build = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let sq = t.mul(xv, xv).unwrap();
            let m = t.mean_rows(sq);
            let r = t.rsqrt(m, 0.1);
            let rb = t.broadcast_rows(r, 3).unwrap();
            let y = t.mul(xv, rb).unwrap();
            let l = t.mean_square(y);
            (t, xv, l)
        };
        let (t, xv, l) = build(&x0);
        assert_eq!(t.value(l).shape(), &[1, 1]);
        let g = t.backward(l);
        let val = |x: &Tensor| {
            let (t, _, l) = build(x);
            t.value(l).data()[0]
        };
        close(&g.wrt(xv), &fd(val, &x0), 1e-6);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let p = t.param(Tensor::scalar(3.0));
        let y = t.mul(c, p).unwrap();
        let g = t.backward(y);
        assert_eq!(g.wrt(p).data(), &[2.0]);
        assert_eq!(g.wrt(c).data(), &[0.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
        let bias = t.constant(Tensor::zeros(&[1, 2]));
        assert!(t.add_bias(a, bias).is_err());
    }
}
