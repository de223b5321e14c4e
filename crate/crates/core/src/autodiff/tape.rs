use std::sync::Arc;

use super::tensor::{matmul_into, Tensor};
use crate::dependence::{euclidean, u_center};
use crate::error::{Error, Result};
use crate::par::Execution;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    PairwiseEuclidean(Var),
    CrossEuclidean(Var, Var),
    UCenter(Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    ScaleAdd(Vec<(f64, Var)>),
    SoftmaxCrossEntropy(Var, Arc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn need_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::ShapeMismatch {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteForward { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = need_matrix("matmul", ta)?;
        let (k2, m) = need_matrix("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::matrix(n, m, matmul_into(ta.data(), tb.data(), n, k, m))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x (n x m)` plus bias `b` (length `m`) broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (n, m) = need_matrix("add_bias", tx)?;
        if tb.len() != m {
            return Err(mismatch("add_bias", tx, tb));
        }
        let bias = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::matrix(n, m, data)?;
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// `n x d` rows to the `n x n` matrix of Euclidean distances.
    pub fn pairwise_euclidean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = need_matrix("pairwise_euclidean", tx)?;
        let xs = tx.data();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    data[i * n + j] = euclidean(&xs[i * d..(i + 1) * d], &xs[j * d..(j + 1) * d]);
                }
            }
        }
        let out = Tensor::matrix(n, n, data)?;
        self.push("pairwise_euclidean", out, Op::PairwiseEuclidean(x), &[x])
    }

    /// Distances between rows of `x (n x d)` and rows of `y (m x d)`.
    pub fn cross_euclidean(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let (n, d) = need_matrix("cross_euclidean", tx)?;
        let (m, d2) = need_matrix("cross_euclidean", ty)?;
        if d != d2 {
            return Err(mismatch("cross_euclidean", tx, ty));
        }
        let (xs, ys) = (tx.data(), ty.data());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] = euclidean(&xs[i * d..(i + 1) * d], &ys[j * d..(j + 1) * d]);
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        self.push("cross_euclidean", out, Op::CrossEuclidean(x, y), &[x, y])
    }

    /// U-centering of a square matrix; the diagonal of the result is zero.
    pub fn u_center(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = need_matrix("u_center", tx)?;
        if n != m {
            return Err(mismatch("u_center", tx, tx));
        }
        if n < 3 {
            return Err(Error::TooFewSamples {
                what: "u_center",
                min: 3,
                got: n,
            });
        }
        let out = Tensor::matrix(n, n, u_center(tx.data(), n, Execution::Sequential))?;
        self.push("u_center", out, Op::UCenter(x), &[x])
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("reduce_sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("reduce_mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `sum_k c_k * x_k` over equal-shape tensors.
    pub fn scale_add(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::invalid("scale_add needs at least one term"));
        };
        let shape = self.value(first).shape().to_vec();
        let mut data = vec![0.0; self.value(first).len()];
        for &(c, v) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(mismatch("scale_add", self.value(first), t));
            }
            data.iter_mut().zip(t.data()).for_each(|(o, x)| *o += c * x);
        }
        let inputs: Vec<Var> = terms.iter().map(|&(_, v)| v).collect();
        let out = Tensor::new(shape, data)?;
        self.push("scale_add", out, Op::ScaleAdd(terms.to_vec()), &inputs)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits (n x K)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = need_matrix("softmax_cross_entropy", t)?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::invalid(format!("label {bad} outside {k} classes")));
        }
        let mut total = 0.0;
        for (row, &c) in t.data().chunks(k).zip(labels) {
            total += log_sum_exp(row) - row[c];
        }
        let out = Tensor::scalar(total / n as f64);
        self.push(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCrossEntropy(logits, labels.into()),
            &[logits],
        )
    }

    /// Vector-Jacobian products of scalar `loss` for every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2().unwrap();
                let m = tb.dims2().unwrap().1;
                if needs(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let brow = &tb.data()[p * m..(p + 1) * m];
                            da[i * k + p] = g[i * m..(i + 1) * m].iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            db[p * m..(p + 1) * m]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, x)| *o += aip * x);
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g);
                }
                if needs(*b) {
                    let m = self.value(*b).len();
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::PairwiseEuclidean(x) => {
                let tx = self.value(*x);
                let (n, d) = tx.dims2().unwrap();
                let (xs, dist) = (tx.data(), node.value.data());
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let r = dist[i * n + j];
                        // zero subgradient at coincident points
                        if i == j || r == 0.0 {
                            continue;
                        }
                        let w = (g[i * n + j] + g[j * n + i]) / r;
                        for c in 0..d {
                            dx[i * d + c] += w * (xs[i * d + c] - xs[j * d + c]);
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::CrossEuclidean(x, y) => {
                let (tx, ty) = (self.value(*x), self.value(*y));
                let (n, d) = tx.dims2().unwrap();
                let m = ty.dims2().unwrap().0;
                let (xs, ys, dist) = (tx.data(), ty.data(), node.value.data());
                let mut dx = vec![0.0; n * d];
                let mut dy = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let r = dist[i * m + j];
                        if r == 0.0 {
                            continue;
                        }
                        let w = g[i * m + j] / r;
                        for c in 0..d {
                            let diff = xs[i * d + c] - ys[j * d + c];
                            dx[i * d + c] += w * diff;
                            dy[j * d + c] -= w * diff;
                        }
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, &dx);
                }
                if needs(*y) {
                    accumulate(grads, *y, &dy);
                }
            }
            Op::UCenter(x) => {
                let n = node.value.dims2().unwrap().0;
                let mut gm = g.to_vec();
                (0..n).for_each(|i| gm[i * n + i] = 0.0);
                let row: Vec<f64> = (0..n).map(|i| gm[i * n..(i + 1) * n].iter().sum()).collect();
                let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| gm[i * n + j]).sum()).collect();
                let total: f64 = row.iter().sum();
                let nm2 = (n - 2) as f64;
                let shift = total / ((n - 1) as f64 * nm2);
                let dx: Vec<f64> = (0..n * n)
                    .map(|idx| {
                        let (k, l) = (idx / n, idx % n);
                        gm[idx] - row[k] / nm2 - col[l] / nm2 + shift
                    })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, &dx);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let dx = vec![g[0] / len as f64; len];
                accumulate(grads, *x, &dx);
            }
            Op::ScaleAdd(terms) => {
                for &(c, v) in terms {
                    if needs(v) {
                        let dv: Vec<f64> = g.iter().map(|x| c * x).collect();
                        accumulate(grads, v, &dv);
                    }
                }
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let t = self.value(*logits);
                let (n, k) = t.dims2().unwrap();
                let scale = g[0] / n as f64;
                let mut dz = vec![0.0; n * k];
                for (i, (row, &c)) in t.data().chunks(k).zip(labels.iter()).enumerate() {
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let p = (row[j] - lse).exp();
                        dz[i * k + j] = scale * (p - if j == c { 1.0 } else { 0.0 });
                    }
                }
                accumulate(grads, *logits, &dz);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(o, d)| *o += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_backward() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn linear_chain_gradient() {
        // loss = sum(W x) for W (1 x 3), x (3 x 1): dW = x^T
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let x = tape.constant(Tensor::matrix(3, 1, vec![3.0, 4.0, -5.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(w).data(), &[3.0, 4.0, -5.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = tape.param(Tensor::zeros(&[3]));
        let s = tape.sum(a).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn coincident_rows_have_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let d = tape.pairwise_euclidean(x).unwrap();
        let s = tape.sum(d).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[0.0; 4]);
    }

    #[test]
    fn nan_forward_is_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
        let err = tape.scale_add(&[(10.0, x)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteForward { .. }));
    }
}
