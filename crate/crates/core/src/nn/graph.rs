//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse order and
//! accumulates `∂loss/∂parameter` into the [`ParamStore`] the parameters were
//! read from. A fresh graph is built for every forward pass and recorded
//! values are never mutated in place.

use std::rc::Rc;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{contract, Result};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
    RowSum(Var),
    Pick(Var, Rc<Vec<usize>>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Records a constant input (receives no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Reads a parameter into the graph; gradients flow back to `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (k2, n) = shape2(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(contract(format!(
                "matmul {:?} · {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `x · w + b` with `x: [batch×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(contract(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if self.value(b).len() != n || self.value(x).shape().len() != 2 {
            return Err(contract(format!(
                "add_row {:?} + {:?}",
                self.value(x).shape(),
                self.value(b).shape()
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bb) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bb;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, b)))
    }

    /// Multiplies row `i` of `x` by the scalar `c[i]` (`c: [rows×1]`).
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if self.value(c).len() != m {
            return Err(contract(format!(
                "mul_col {:?} * {:?}",
                self.value(x).shape(),
                self.value(c).shape()
            )));
        }
        let col = self.value(c).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().for_each(|o| *o *= col[r]);
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulCol(x, c)))
    }

    /// Smallest `|input|` over every recorded ReLU and absolute value, i.e.
    /// how far this evaluation point is from a non-differentiable one.
    /// `f64::INFINITY` when the tape has no such node.
    pub fn nearest_kink(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) | Op::Abs(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::abs);
        self.push(t, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::Offset(x))
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.offset(neg, 1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v * v);
        self.push(t, Op::Square(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(contract("concat_cols: row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if start >= end || end > n {
            return Err(contract(format!("slice_cols {start}..{end} of width {n}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&self.value(x).row(r)[start..end]);
        }
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols(x, start)))
    }

    /// Row `idx[i]` of `x` becomes output row `i`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(contract("gather_rows: index out of range or empty"));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            out.extend_from_slice(self.value(x).row(i));
        }
        Ok(self.push(Tensor::new(vec![idx.len(), n], out)?, Op::GatherRows(x, idx)))
    }

    /// Output row `r` is the sum of the rows `i` of `x` with `idx[i] == r`;
    /// rows receiving nothing are zero.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if idx.len() != m || idx.iter().any(|&i| i >= rows) {
            return Err(contract("scatter_add_rows: bad index list"));
        }
        let mut out = vec![0.0; rows * n];
        for (i, &dst) in idx.iter().enumerate() {
            for (o, v) in out[dst * n..(dst + 1) * n].iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ScatterAddRows(x, idx)))
    }

    /// `[m×n] → [m×1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (m, _) = shape2(self.value(x));
        let out = (0..m).map(|r| self.value(x).row(r).iter().sum()).collect();
        let t = Tensor::new(vec![m, 1], out).expect("m rows");
        self.push(t, Op::RowSum(x))
    }

    /// `[m×n] → [m×1]` picking column `idx[r]` of row `r`.
    pub fn pick(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if idx.len() != m || idx.iter().any(|&c| c >= n) {
            return Err(contract("pick: bad column index list"));
        }
        let out = idx.iter().enumerate().map(|(r, &c)| self.value(x).get2(r, c)).collect();
        Ok(self.push(Tensor::new(vec![m, 1], out)?, Op::Pick(x, idx)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Back-propagates from the scalar `loss`, adding `∂loss/∂p` into the
    /// gradient of every parameter `p` read into this graph. Parameters that
    /// do not influence `loss` are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, contribution: impl FnOnce(&mut Vec<f64>)) {
            contribution(grads[v.0].get_or_insert_with(Vec::new));
        }
        fn acc_slice(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, g: &[f64]) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            if slot.is_empty() {
                slot.resize(len, 0.0);
            }
            for (d, s) in slot.iter_mut().zip(g) {
                *d += s;
            }
        }
        fn acc_map(
            grads: &mut [Option<Vec<f64>>],
            v: Var,
            len: usize,
            f: impl Fn(usize) -> f64,
        ) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            if slot.is_empty() {
                slot.resize(len, 0.0);
            }
            for (i, d) in slot.iter_mut().enumerate() {
                *d += f(i);
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if g.is_empty() {
                continue;
            }
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let (m, k) = shape2(self.value(*a));
                    let n = self.value(*b).cols();
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    acc(&mut grads, *a, |slot| {
                        let fresh = slot.is_empty();
                        if fresh {
                            slot.resize(m * k, 0.0);
                        }
                        gemm(m, n, k, &g, false, vb, true, slot, !fresh);
                    });
                    acc(&mut grads, *b, |slot| {
                        let fresh = slot.is_empty();
                        if fresh {
                            slot.resize(k * n, 0.0);
                        }
                        gemm(k, m, n, va, true, &g, false, slot, !fresh);
                    });
                }
                Op::Add(a, b) => {
                    acc_slice(&mut grads, *a, g.len(), &g);
                    acc_slice(&mut grads, *b, g.len(), &g);
                }
                Op::Sub(a, b) => {
                    acc_slice(&mut grads, *a, g.len(), &g);
                    acc_map(&mut grads, *b, g.len(), |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    acc_map(&mut grads, *a, g.len(), |i| g[i] * vb[i]);
                    acc_map(&mut grads, *b, g.len(), |i| g[i] * va[i]);
                }
                Op::AddRow(x, b) => {
                    let n = out.cols();
                    acc_slice(&mut grads, *x, g.len(), &g);
                    acc_map(&mut grads, *b, n, |j| g.iter().skip(j).step_by(n).sum());
                }
                Op::MulCol(x, c) => {
                    let (m, n) = shape2(out);
                    let vx = self.value(*x).data();
                    let vc = self.value(*c).data();
                    acc_map(&mut grads, *x, g.len(), |i| g[i] * vc[i / n]);
                    acc_map(&mut grads, *c, m, |r| {
                        (0..n).map(|j| g[r * n + j] * vx[r * n + j]).sum()
                    });
                }
                Op::Relu(x) => {
                    let vx = self.value(*x).data();
                    acc_map(&mut grads, *x, g.len(), |i| if vx[i] > 0.0 { g[i] } else { 0.0 });
                }
                Op::Abs(x) => {
                    let vx = self.value(*x).data();
                    acc_map(&mut grads, *x, g.len(), |i| {
                        if vx[i] > 0.0 {
                            g[i]
                        } else if vx[i] < 0.0 {
                            -g[i]
                        } else {
                            0.0
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = out.data();
                    acc_map(&mut grads, *x, g.len(), |i| g[i] * y[i] * (1.0 - y[i]));
                }
                Op::Tanh(x) => {
                    let y = out.data();
                    acc_map(&mut grads, *x, g.len(), |i| g[i] * (1.0 - y[i] * y[i]));
                }
                Op::Scale(x, s) => acc_map(&mut grads, *x, g.len(), |i| g[i] * s),
                Op::Offset(x) | Op::Reshape(x) => acc_slice(&mut grads, *x, g.len(), &g),
                Op::Square(x) => {
                    let vx = self.value(*x).data();
                    acc_map(&mut grads, *x, g.len(), |i| 2.0 * vx[i] * g[i]);
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = shape2(out);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc_map(&mut grads, p, m * w, |i| g[(i / w) * n + offset + i % w]);
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let w = out.cols();
                    let (m, n) = shape2(self.value(*x));
                    let start = *start;
                    acc_map(&mut grads, *x, m * n, |i| {
                        let c = i % n;
                        if c >= start && c < start + w {
                            g[(i / n) * w + c - start]
                        } else {
                            0.0
                        }
                    });
                }
                Op::GatherRows(x, rows) => {
                    let (m, n) = shape2(self.value(*x));
                    acc(&mut grads, *x, |slot| {
                        if slot.is_empty() {
                            slot.resize(m * n, 0.0);
                        }
                        for (i, &src) in rows.iter().enumerate() {
                            for j in 0..n {
                                slot[src * n + j] += g[i * n + j];
                            }
                        }
                    });
                }
                Op::ScatterAddRows(x, rows) => {
                    let n = out.cols();
                    let len = rows.len() * n;
                    acc_map(&mut grads, *x, len, |i| g[rows[i / n] * n + i % n]);
                }
                Op::RowSum(x) => {
                    let n = self.value(*x).cols();
                    let len = self.value(*x).len();
                    acc_map(&mut grads, *x, len, |i| g[i / n]);
                }
                Op::Pick(x, cols) => {
                    let n = self.value(*x).cols();
                    let len = self.value(*x).len();
                    acc(&mut grads, *x, |slot| {
                        if slot.is_empty() {
                            slot.resize(len, 0.0);
                        }
                        for (r, &c) in cols.iter().enumerate() {
                            slot[r * n + c] += g[r];
                        }
                    });
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    acc_map(&mut grads, *x, len, |_| g[0]);
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len();
                    let s = g[0] / len as f64;
                    acc_map(&mut grads, *x, len, |_| s);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(values));
        (store, id)
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let (mut store, id) = store_with(vec![0.3, -2.0, 5.0]);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.sum(p);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn power_rule() {
        let (mut store, id) = store_with(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let sq = g.square(p);
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut store, id) = store_with(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        assert!(matches!(
            g.backward(p, &mut store),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn unreachable_parameters_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0]));
        let b = store.add("b", Tensor::vector(vec![1.0]));
        store.get_mut(b).grad.fill(7.0);
        let mut g = Graph::new();
        let pa = g.param(&store, a);
        let _pb = g.param(&store, b);
        let loss = g.sum(pa);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(b).data(), &[7.0]);
        assert_eq!(store.grad(a).data(), &[1.0]);
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let (mut store, id) = store_with(vec![1.0, 2.0]);
        for _ in 0..2 {
            let mut g = Graph::new();
            let p = g.param(&store, id);
            let loss = g.sum(p);
            g.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad(id).data(), &[2.0, 2.0]);
    }

    #[test]
    fn reused_value_sums_both_paths() {
        // loss = sum(p * p + p) → 2p + 1
        let (mut store, id) = store_with(vec![3.0]);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let pp = g.mul(p, p).unwrap();
        let s = g.add(pp, p).unwrap();
        let loss = g.sum(s);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[7.0]);
    }

    #[test]
    fn shape_errors_are_contract_violations() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.input(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
        let bias = g.input(Tensor::zeros(&[2]));
        assert!(g.add_row(a, bias).is_err());
    }

    #[test]
    fn scatter_and_gather_are_adjoint() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let s = g
            .scatter_add_rows(x, Rc::new(vec![2, 0, 2]), 4)
            .unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 0.0, 0.0, 6.0, 8.0, 0.0, 0.0]);
        let gr = g.gather_rows(x, Rc::new(vec![2, 2, 0])).unwrap();
        assert_eq!(g.value(gr).data(), &[5.0, 6.0, 5.0, 6.0, 1.0, 2.0]);
    }
}
