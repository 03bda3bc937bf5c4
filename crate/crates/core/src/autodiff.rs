//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape is define-by-run: every op eagerly computes its value, records
//! itself, and returns a [`Var`] handle. `backward` replays the recorded ops
//! in reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers. Values are rank-0..2 f64 tensors; gradients of inputs are
//! first-class (needed for input-space Fisher preconditioners), constants
//! never allocate gradient storage.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// [m,k] @ [k,n]
    Matmul(usize, usize),
    /// x @ w + b, with b a row vector broadcast over the rows of x @ w.
    Affine { x: usize, w: usize, b: usize },
    Tanh(usize),
    Silu(usize),
    /// Row-wise softmax.
    Softmax(usize),
    Log(usize),
    ClampMin(usize, f64),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    /// Sum of squared entries.
    SqNorm(usize),
    /// Stack two matrices with equal column counts, a's rows first.
    ConcatRows(usize, usize),
    /// Select rows of a table by index (embedding lookup).
    GatherRows { table: usize, idx: Vec<usize> },
    /// Repeat a row vector m times.
    BroadcastRows { row: usize, m: usize },
}

pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

/// Gradients produced by [`Tape::backward`], addressed by the original vars.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` for constants and untouched nodes.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), requires: Vec::new() }
    }

    fn push(&mut self, val: Tensor, op: Op, requires: bool) -> Var {
        self.vals.push(val);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.vals.len() - 1)
    }

    /// Leaf whose gradient will be tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.vals[a.0].shape(), self.vals[b.0].shape()),
            ));
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.vals[a.0].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.vals[b.0].data()) {
            *o += bv;
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add(a.0, b.0), req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut out = self.vals[a.0].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.vals[b.0].data()) {
            *o -= bv;
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Sub(a.0, b.0), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.vals[a.0].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.vals[b.0].data()) {
            *o *= bv;
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Mul(a.0, b.0), req))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut out = self.vals[a.0].clone();
        for o in out.data_mut() {
            *o *= c;
        }
        let req = self.req(a);
        Ok(self.push(out, Op::Scale(a.0, c), req))
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.vals[a.0].as_2d();
        let (kb, n) = self.vals[b.0].as_2d();
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} @ {:?}", self.vals[a.0].shape(), self.vals[b.0].shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nn_acc(self.vals[a.0].data(), self.vals[b.0].data(), m, ka, n, &mut out);
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Matmul(a.0, b.0), req))
    }

    /// x[m,k] @ w[k,n] + b[n] with b broadcast across rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, kx) = self.vals[x.0].as_2d();
        let (kw, n) = self.vals[w.0].as_2d();
        if kx != kw || self.vals[b.0].len() != n {
            return Err(Error::shape(
                "affine",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.vals[x.0].shape(),
                    self.vals[w.0].shape(),
                    self.vals[b.0].shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            out[r * n..(r + 1) * n].copy_from_slice(self.vals[b.0].data());
        }
        tensor::matmul_nn_acc(self.vals[x.0].data(), self.vals[w.0].data(), m, kx, n, &mut out);
        let req = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Affine { x: x.0, w: w.0, b: b.0 }, req))
    }

    // ── nonlinearities ───────────────────────────────────────────────────

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let mut out = self.vals[a.0].clone();
        for o in out.data_mut() {
            *o = o.tanh();
        }
        let req = self.req(a);
        Ok(self.push(out, Op::Tanh(a.0), req))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.vals[a.0].clone();
        for o in out.data_mut() {
            *o = tensor::silu(*o);
        }
        let req = self.req(a);
        Ok(self.push(out, Op::Silu(a.0), req))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.vals[a.0].as_2d();
        let mut out = vec![0.0; m * n];
        tensor::softmax_rows(self.vals[a.0].data(), m, n, &mut out);
        let mut t = self.vals[a.0].clone();
        t.data_mut().copy_from_slice(&out);
        let req = self.req(a);
        Ok(self.push(t, Op::Softmax(a.0), req))
    }

    /// Natural log; domain is checked so a later backward never divides by zero.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.vals[a.0].data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("log of non-positive value"));
        }
        let mut out = self.vals[a.0].clone();
        for o in out.data_mut() {
            *o = o.ln();
        }
        let req = self.req(a);
        Ok(self.push(out, Op::Log(a.0), req))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        let mut out = self.vals[a.0].clone();
        for o in out.data_mut() {
            *o = o.max(min);
        }
        let req = self.req(a);
        Ok(self.push(out, Op::ClampMin(a.0, min), req))
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.vals[a.0].data().iter().sum();
        let req = self.req(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0), req))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.vals[a.0].is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s: f64 = self.vals[a.0].data().iter().sum();
        let n = self.vals[a.0].len() as f64;
        let req = self.req(a);
        Ok(self.push(Tensor::scalar(s / n), Op::Mean(a.0), req))
    }

    /// Squared L2 norm over all entries.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.vals[a.0].data().iter().map(|&v| v * v).sum();
        let req = self.req(a);
        Ok(self.push(Tensor::scalar(s), Op::SqNorm(a.0), req))
    }

    // ── structure ────────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.vals[a.0].as_2d();
        let (mb, nb) = self.vals[b.0].as_2d();
        if na != nb {
            return Err(Error::shape(
                "concat_rows",
                format!("{:?} vs {:?}", self.vals[a.0].shape(), self.vals[b.0].shape()),
            ));
        }
        let mut data = Vec::with_capacity((ma + mb) * na);
        data.extend_from_slice(self.vals[a.0].data());
        data.extend_from_slice(self.vals[b.0].data());
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::matrix(ma + mb, na, data)?, Op::ConcatRows(a.0, b.0), req))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.vals[table.0].as_2d();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather index {} out of range for table with {} rows",
                bad, rows
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.vals[table.0].row(i));
        }
        let req = self.req(table);
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, data)?,
            Op::GatherRows { table: table.0, idx: idx.to_vec() },
            req,
        ))
    }

    pub fn broadcast_rows(&mut self, row: Var, m: usize) -> Result<Var> {
        let (r, n) = self.vals[row.0].as_2d();
        if r != 1 {
            return Err(Error::shape(
                "broadcast_rows",
                format!("expected a single row, got {:?}", self.vals[row.0].shape()),
            ));
        }
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(self.vals[row.0].data());
        }
        let req = self.req(row);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::BroadcastRows { row: row.0, m }, req))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Node ids are already topologically
    /// ordered (ops only reference earlier nodes), so a reverse scan suffices.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.vals.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.requires[id] {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backward_op(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], node: usize, update: impl FnOnce(&mut Tensor)) {
        if !self.requires[node] {
            return;
        }
        let slot = &mut grads[node];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.vals[node].shape().to_vec()));
        }
        update(slot.as_mut().unwrap());
    }

    fn backward_op(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| tensor::axpy(1.0, g.data(), ga.data_mut()));
                self.accum(grads, *b, |gb| tensor::axpy(1.0, g.data(), gb.data_mut()));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| tensor::axpy(1.0, g.data(), ga.data_mut()));
                self.accum(grads, *b, |gb| tensor::axpy(-1.0, g.data(), gb.data_mut()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.vals[*a], &self.vals[*b]);
                self.accum(grads, *a, |ga| {
                    for ((o, &gv), &bvv) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * bvv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for ((o, &gv), &avv) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * avv;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, |ga| tensor::axpy(c, g.data(), ga.data_mut()));
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.vals[*a].as_2d();
                let (_, n) = self.vals[*b].as_2d();
                let (av, bv) = (&self.vals[*a], &self.vals[*b]);
                // dA = g @ B^T, dB = A^T @ g
                self.accum(grads, *a, |ga| {
                    tensor::matmul_nt_acc(g.data(), bv.data(), m, n, k, ga.data_mut());
                });
                self.accum(grads, *b, |gb| {
                    tensor::matmul_tn_acc(av.data(), g.data(), m, k, n, gb.data_mut());
                });
            }
            Op::Affine { x, w, b } => {
                let (m, k) = self.vals[*x].as_2d();
                let (_, n) = self.vals[*w].as_2d();
                let (xv, wv) = (&self.vals[*x], &self.vals[*w]);
                self.accum(grads, *x, |gx| {
                    tensor::matmul_nt_acc(g.data(), wv.data(), m, n, k, gx.data_mut());
                });
                self.accum(grads, *w, |gw| {
                    tensor::matmul_tn_acc(xv.data(), g.data(), m, k, n, gw.data_mut());
                });
                self.accum(grads, *b, |gb| {
                    for r in 0..m {
                        tensor::axpy(1.0, &g.data()[r * n..(r + 1) * n], gb.data_mut());
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = &self.vals[id];
                self.accum(grads, *a, |ga| {
                    for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Silu(a) => {
                let xv = &self.vals[*a];
                self.accum(grads, *a, |ga| {
                    for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gv * tensor::silu_prime(x);
                    }
                });
            }
            Op::Softmax(a) => {
                let yv = &self.vals[id];
                let (m, n) = yv.as_2d();
                self.accum(grads, *a, |ga| {
                    for r in 0..m {
                        let yr = &yv.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot = tensor::dot(gr, yr);
                        let or = &mut ga.data_mut()[r * n..(r + 1) * n];
                        for ((o, &gv), &y) in or.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot);
                        }
                    }
                });
            }
            Op::Log(a) => {
                let xv = &self.vals[*a];
                self.accum(grads, *a, |ga| {
                    for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gv / x;
                    }
                });
            }
            Op::ClampMin(a, min) => {
                let xv = &self.vals[*a];
                let min = *min;
                self.accum(grads, *a, |ga| {
                    for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if x > min {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, |ga| {
                    for o in ga.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let gv = g.item() / self.vals[*a].len() as f64;
                self.accum(grads, *a, |ga| {
                    for o in ga.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::SqNorm(a) => {
                let gv = g.item();
                let xv = &self.vals[*a];
                self.accum(grads, *a, |ga| {
                    for (o, &x) in ga.data_mut().iter_mut().zip(xv.data()) {
                        *o += 2.0 * gv * x;
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.vals[*a].len();
                self.accum(grads, *a, |ga| {
                    tensor::axpy(1.0, &g.data()[..na], ga.data_mut());
                });
                self.accum(grads, *b, |gb| {
                    tensor::axpy(1.0, &g.data()[na..], gb.data_mut());
                });
            }
            Op::GatherRows { table, idx } => {
                let (_, cols) = self.vals[*table].as_2d();
                self.accum(grads, *table, |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g.data()[r * cols..(r + 1) * cols];
                        let dst = &mut gt.data_mut()[i * cols..(i + 1) * cols];
                        tensor::axpy(1.0, src, dst);
                    }
                });
            }
            Op::BroadcastRows { row, m } => {
                let n = self.vals[*row].len();
                let m = *m;
                self.accum(grads, *row, |gr| {
                    for r in 0..m {
                        tensor::axpy(1.0, &g.data()[r * n..(r + 1) * n], gr.data_mut());
                    }
                });
            }
        }
    }
}

// ── finite-difference checking ───────────────────────────────────────────

/// Max relative disagreement between the tape gradient and a central
/// finite-difference estimate of `f` at `x`:
/// `max_i |g_tape_i - g_fd_i| / max(1, |g_fd_i|)`.
///
/// `f` must build a scalar loss from the given input var.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |pt: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.input(pt.clone());
        let l = f(&mut t, v)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += eps;
        let mut lo = x.clone();
        lo.data_mut()[i] -= eps;
        let fd = (eval(&hi)? - eval(&lo)?) / (2.0 * eps);
        let rel = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sq_norm_hand_values() {
        // f([3,4]) = 25, df/dx = [6, 8]
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.sq_norm(x).unwrap();
        assert_eq!(tape.value(y).item(), 25.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn add_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.input(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 5.0]));
        let m = tape.mul(x, c).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 5.0]);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_on_reuse() {
        // f(x) = sum(x*x) + sum(x) -> df/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum(sq).unwrap();
        let s2 = tape.sum(x).unwrap();
        let l = tape.add(s1, s2).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, -3.0]);
    }

    // Every op: gradient vs central finite differences on >= 10 random
    // instances, max relative error < 1e-4.
    fn check_many<F>(name: &str, shape_for: impl Fn(&mut ChaCha8Rng) -> Vec<usize>, f: F)
    where
        F: Fn(&mut Tape, Var, &mut ChaCha8Rng) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for trial in 0..10 {
            let shape = shape_for(&mut rng);
            let x = rand_tensor(&mut rng, shape);
            // Clone the rng so the closure sees identical aux randomness on
            // every finite-difference re-evaluation.
            let frozen = rng.clone();
            let err = grad_check(
                |t, v| {
                    let mut r = frozen.clone();
                    f(t, v, &mut r)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} trial {trial}: fd mismatch {err}");
        }
    }

    #[test]
    fn grad_check_elementwise_ops() {
        check_many("add", |r| vec![r.gen_range(1..4), r.gen_range(1..4)], |t, v, r| {
            let shape = t.value(v).shape().to_vec();
            let other = t.constant(rand_tensor(r, shape));
            let s = t.add(v, other)?;
            let m = t.mul(s, s)?;
            t.sum(m)
        });
        check_many("sub", |r| vec![r.gen_range(1..4), r.gen_range(1..4)], |t, v, r| {
            let shape = t.value(v).shape().to_vec();
            let other = t.constant(rand_tensor(r, shape));
            let s = t.sub(v, other)?;
            let m = t.mul(s, s)?;
            t.sum(m)
        });
        check_many("mul", |r| vec![r.gen_range(1..4), r.gen_range(1..4)], |t, v, r| {
            let shape = t.value(v).shape().to_vec();
            let other = t.constant(rand_tensor(r, shape));
            let m = t.mul(v, other)?;
            t.sum(m)
        });
        check_many("scale", |r| vec![r.gen_range(1..5)], |t, v, _| {
            let s = t.scale(v, -2.5)?;
            let m = t.mul(s, s)?;
            t.sum(m)
        });
    }

    #[test]
    fn grad_check_linear_ops() {
        check_many("matmul_lhs", |r| vec![r.gen_range(1..4), 3], |t, v, r| {
            let b = t.constant(rand_tensor(r, vec![3, 2]));
            let m = t.matmul(v, b)?;
            t.sq_norm(m)
        });
        check_many("matmul_rhs", |r| vec![3, r.gen_range(1..4)], |t, v, r| {
            let a = t.constant(rand_tensor(r, vec![2, 3]));
            let m = t.matmul(a, v)?;
            t.sq_norm(m)
        });
        check_many("affine_x", |r| vec![r.gen_range(1..4), 3], |t, v, r| {
            let w = t.constant(rand_tensor(r, vec![3, 2]));
            let b = t.constant(rand_tensor(r, vec![2]));
            let y = t.affine(v, w, b)?;
            t.sq_norm(y)
        });
        check_many("affine_w", |_| vec![3, 2], |t, v, r| {
            let x = t.constant(rand_tensor(r, vec![4, 3]));
            let b = t.constant(rand_tensor(r, vec![2]));
            let y = t.affine(x, v, b)?;
            t.sq_norm(y)
        });
        check_many("affine_b", |_| vec![2], |t, v, r| {
            let x = t.constant(rand_tensor(r, vec![4, 3]));
            let w = t.constant(rand_tensor(r, vec![3, 2]));
            let y = t.affine(x, w, v)?;
            t.sq_norm(y)
        });
    }

    #[test]
    fn grad_check_nonlinearities() {
        check_many("tanh", |r| vec![r.gen_range(1..4), r.gen_range(1..4)], |t, v, _| {
            let y = t.tanh(v)?;
            t.sum(y)
        });
        check_many("silu", |r| vec![r.gen_range(1..4), r.gen_range(1..4)], |t, v, _| {
            let y = t.silu(v)?;
            t.sum(y)
        });
        check_many("softmax", |r| vec![r.gen_range(1..4), r.gen_range(2..5)], |t, v, r| {
            let shape = t.value(v).shape().to_vec();
            let w = t.constant(rand_tensor(r, shape));
            let y = t.softmax(v)?;
            let m = t.mul(y, w)?;
            t.sum(m)
        });
        check_many("log", |r| vec![r.gen_range(1..4)], |t, v, _| {
            // shift into the strictly positive domain before the log
            let sq = t.mul(v, v)?;
            let off = t.constant(Tensor::full(t.value(sq).shape().to_vec(), 0.5));
            let pos = t.add(sq, off)?;
            let y = t.log(pos)?;
            t.sum(y)
        });
        check_many("clamp_min", |r| vec![r.gen_range(2..6)], |t, v, _| {
            let y = t.clamp_min(v, 0.25)?;
            let m = t.mul(y, y)?;
            t.sum(m)
        });
    }

    #[test]
    fn grad_check_reductions_and_structure() {
        check_many("sum", |r| vec![r.gen_range(1..5)], |t, v, _| {
            let m = t.mul(v, v)?;
            t.sum(m)
        });
        check_many("mean", |r| vec![r.gen_range(1..5), r.gen_range(1..4)], |t, v, _| {
            let m = t.mul(v, v)?;
            t.mean(m)
        });
        check_many("sq_norm", |r| vec![r.gen_range(1..5)], |t, v, _| t.sq_norm(v));
        check_many("concat_rows", |r| vec![r.gen_range(1..4), 3], |t, v, r| {
            let other = t.constant(rand_tensor(r, vec![2, 3]));
            let c = t.concat_rows(v, other)?;
            t.sq_norm(c)
        });
        check_many("gather_rows", |_| vec![5, 3], |t, v, r| {
            let idx: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let gathered = t.gather_rows(v, &idx)?;
            t.sq_norm(gathered)
        });
        check_many("broadcast_rows", |r| vec![1, r.gen_range(1..5)], |t, v, r| {
            let m = r.gen_range(1..4);
            let b = t.broadcast_rows(v, m)?;
            let sq = t.mul(b, b)?;
            t.sum(sq)
        });
    }

    #[test]
    fn gather_repeated_index_accumulates() {
        let mut tape = Tape::new();
        let table = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.gather_rows(table, &[0, 0, 1]).unwrap();
        let l = tape.sum(g).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.wrt(table).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_out_of_range_is_error() {
        let mut tape = Tape::new();
        let table = tape.input(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(tape.gather_rows(table, &[2]).is_err());
    }
}
