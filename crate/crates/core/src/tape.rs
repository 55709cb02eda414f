//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! The forward pass records every primitive into a linear tape; the backward
//! pass walks the tape in exact reverse order and accumulates adjoints via
//! the chain rule. Replaying a tape forward reproduces every intermediate
//! bit-exactly, which keeps training runs reproducible.
//!
//! Two broadcast primitives exist beyond the plain elementwise set so that
//! equal-length sequences can be evaluated as one batch: `add_col` adds a
//! column vector to every column (bias add) and `mul_row` scales every
//! column by a per-column factor (per-sequence time-gap discount).

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Gradient-tracked input (a learnable parameter).
    Leaf,
    /// Input data; no gradient is reported for it.
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (m x n) + (m x 1), the column vector added to every column.
    AddCol(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise (Hadamard) product of same-shape matrices.
    Mul(NodeId, NodeId),
    /// (m x n) scaled per column by a (1 x n) row of factors.
    MulRow(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    ScalarMul(NodeId, f64),
    /// Sum of squared entries, yielding a 1x1 scalar.
    SumSquares(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Recorded computation. Confined to one worker at a time; parameter
/// snapshots fed in as leaves are immutable and freely shareable.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Gradients of a scalar loss with respect to every leaf on the tape,
/// in leaf registration order. Leaves the loss does not depend on get
/// zero matrices of the leaf's shape.
#[derive(Debug)]
pub struct Gradients {
    by_leaf: Vec<Matrix>,
    leaf_ids: Vec<NodeId>,
}

impl Gradients {
    /// Gradients in leaf registration order.
    pub fn leaf_grads(&self) -> &[Matrix] {
        &self.by_leaf
    }

    pub fn into_leaf_grads(self) -> Vec<Matrix> {
        self.by_leaf
    }

    /// Gradient for one leaf, if `id` is a leaf of the tape.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        let pos = self.leaf_ids.iter().position(|l| *l == id)?;
        Some(&self.by_leaf[pos])
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Clears all recorded nodes, keeping allocated capacity.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leaves.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a gradient-tracked input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, value });
        self.leaves.push(id);
        id
    }

    /// Registers input data that needs no gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Constant, value });
        id
    }

    /// Value currently recorded for `id`.
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        debug_assert_eq!(data.len(), rows * cols);
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite result in {}",
                op_name(&op)
            )));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: Matrix::from_raw(rows, cols, data),
        });
        Ok(id)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Matrix product `a * b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Dimension {
                op: "matmul",
                details: format!("{m}x{ka} * {kb}x{n}"),
            });
        }
        let mut data = vec![0.0; m * n];
        {
            let av = self.nodes[a.0].value.as_slice();
            let bv = self.nodes[b.0].value.as_slice();
            for i in 0..m {
                for k in 0..ka {
                    let aik = av[i * ka + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * n..(k + 1) * n];
                    let crow = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aik * brow[j];
                    }
                }
            }
        }
        self.push(Op::MatMul(a, b), m, n, data)
    }

    fn elementwise2(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Dimension {
                op: name,
                details: format!("{ra}x{ca} vs {rb}x{cb}"),
            });
        }
        let data: Vec<f64> = {
            let av = self.nodes[a.0].value.as_slice();
            let bv = self.nodes[b.0].value.as_slice();
            av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
        };
        self.push(op, ra, ca, data)
    }

    /// Elementwise sum of same-shape matrices.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    /// Elementwise difference of same-shape matrices.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product of same-shape matrices.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds column vector `b` (m x 1) to every column of `a` (m x n).
    pub fn add_col(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if rb != m || cb != 1 {
            return Err(Error::Dimension {
                op: "add_col",
                details: format!("{m}x{n} + {rb}x{cb} column"),
            });
        }
        let data: Vec<f64> = {
            let av = self.nodes[a.0].value.as_slice();
            let bv = self.nodes[b.0].value.as_slice();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let bi = bv[i];
                for j in 0..n {
                    out.push(av[i * n + j] + bi);
                }
            }
            out
        };
        self.push(Op::AddCol(a, b), m, n, data)
    }

    /// Scales column `j` of `a` (m x n) by `r[j]` where `r` is 1 x n.
    pub fn mul_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let (rr, rc) = self.dims(r);
        if rr != 1 || rc != n {
            return Err(Error::Dimension {
                op: "mul_row",
                details: format!("{m}x{n} scaled by {rr}x{rc} row"),
            });
        }
        let data: Vec<f64> = {
            let av = self.nodes[a.0].value.as_slice();
            let rv = self.nodes[r.0].value.as_slice();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(av[i * n + j] * rv[j]);
                }
            }
            out
        };
        self.push(Op::MulRow(a, r), m, n, data)
    }

    fn elementwise1(
        &mut self,
        a: NodeId,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].value.as_slice().iter().map(|x| f(*x)).collect();
        self.push(op, r, c, data)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise1(a, Op::Tanh(a), f64::tanh)
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise1(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// Multiplies every entry by the fixed scalar `c`.
    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::numeric("non-finite scalar in scalar_mul".to_string()));
        }
        self.elementwise1(a, Op::ScalarMul(a, c), |x| c * x)
    }

    /// Sum of squared entries as a 1x1 scalar node.
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let sum: f64 = self.nodes[a.0]
            .value
            .as_slice()
            .iter()
            .map(|x| x * x)
            .sum();
        self.push(Op::SumSquares(a), 1, 1, vec![sum])
    }

    /// Reverse pass from a scalar `loss` node. Returns one gradient per
    /// leaf, in registration order; leaves that do not influence the loss
    /// get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (lr, lc) = self.dims(loss);
        if (lr, lc) != (1, 1) {
            return Err(Error::contract(format!(
                "backward requires a scalar loss node, got {lr}x{lc}"
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        // Nodes only reference earlier nodes, so one reverse sweep visits
        // every recorded op in exact reverse order of recording.
        for idx in (0..=loss.0).rev() {
            let Some(dout) = adj[idx].take() else {
                continue;
            };
            match self.nodes[idx].op {
                Op::Leaf | Op::Constant => {
                    adj[idx] = Some(dout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(a);
                    let (_, n) = self.dims(b);
                    {
                        let bv = self.nodes[b.0].value.as_slice();
                        let da = ensure(&mut adj[a.0], m * k);
                        for i in 0..m {
                            for j in 0..n {
                                let d = dout[i * n + j];
                                if d == 0.0 {
                                    continue;
                                }
                                for kk in 0..k {
                                    da[i * k + kk] += d * bv[kk * n + j];
                                }
                            }
                        }
                    }
                    {
                        let av = self.nodes[a.0].value.as_slice();
                        let db = ensure(&mut adj[b.0], k * n);
                        for i in 0..m {
                            for kk in 0..k {
                                let aik = av[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[kk * n + j] += aik * dout[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], &dout, 1.0);
                    accumulate(&mut adj[b.0], &dout, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], &dout, 1.0);
                    accumulate(&mut adj[b.0], &dout, -1.0);
                }
                Op::AddCol(a, b) => {
                    let (m, n) = self.dims(a);
                    accumulate(&mut adj[a.0], &dout, 1.0);
                    let db = ensure(&mut adj[b.0], m);
                    for i in 0..m {
                        for j in 0..n {
                            db[i] += dout[i * n + j];
                        }
                    }
                }
                Op::Mul(a, b) => {
                    {
                        let bv = self.nodes[b.0].value.as_slice();
                        let da = ensure(&mut adj[a.0], bv.len());
                        for (i, d) in dout.iter().enumerate() {
                            da[i] += d * bv[i];
                        }
                    }
                    {
                        let av = self.nodes[a.0].value.as_slice();
                        let db = ensure(&mut adj[b.0], av.len());
                        for (i, d) in dout.iter().enumerate() {
                            db[i] += d * av[i];
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let (m, n) = self.dims(a);
                    {
                        let rv = self.nodes[r.0].value.as_slice();
                        let da = ensure(&mut adj[a.0], m * n);
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] += dout[i * n + j] * rv[j];
                            }
                        }
                    }
                    {
                        let av = self.nodes[a.0].value.as_slice();
                        let dr = ensure(&mut adj[r.0], n);
                        for i in 0..m {
                            for j in 0..n {
                                dr[j] += dout[i * n + j] * av[i * n + j];
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let yv = self.nodes[idx].value.as_slice();
                    let da = ensure(&mut adj[a.0], yv.len());
                    for (i, d) in dout.iter().enumerate() {
                        da[i] += d * (1.0 - yv[i] * yv[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = self.nodes[idx].value.as_slice();
                    let da = ensure(&mut adj[a.0], yv.len());
                    for (i, d) in dout.iter().enumerate() {
                        da[i] += d * yv[i] * (1.0 - yv[i]);
                    }
                }
                Op::ScalarMul(a, c) => {
                    accumulate(&mut adj[a.0], &dout, c);
                }
                Op::SumSquares(a) => {
                    let av = self.nodes[a.0].value.as_slice();
                    let d = dout[0];
                    let da = ensure(&mut adj[a.0], av.len());
                    for (i, x) in av.iter().enumerate() {
                        da[i] += 2.0 * d * x;
                    }
                }
            }
        }

        let by_leaf = self
            .leaves
            .iter()
            .map(|id| {
                let (r, c) = self.dims(*id);
                match &adj[id.0] {
                    Some(g) => Matrix::from_raw(r, c, g.clone()),
                    None => Matrix::zeros(r, c),
                }
            })
            .collect();
        Ok(Gradients {
            by_leaf,
            leaf_ids: self.leaves.clone(),
        })
    }
}

fn ensure(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(slot: &mut Option<Vec<f64>>, dout: &[f64], factor: f64) {
    let dst = ensure(slot, dout.len());
    for (d, s) in dst.iter_mut().zip(dout) {
        *d += factor * s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddCol(..) => "add_col",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulRow(..) => "mul_row",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::ScalarMul(..) => "scalar_mul",
        Op::SumSquares(..) => "sum_squares",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_multiply_is_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(mat(2, 2, &[1.5, -2.0, 0.25, 3.0]));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[1.5, -2.0, 0.25, 3.0]);
    }

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::zeros(2, 3));
        let t = tape.tanh(z).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert!(tape.value(t).as_slice().iter().all(|v| *v == 0.0));
        assert!(tape.value(s).as_slice().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(2, 1, &[1.0, 2.0]));
        let loss = tape.sum_squares(x).unwrap();
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 5.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(2, 1, &[1.0, 2.0]));
        let unused = tape.leaf(mat(3, 2, &[1.0; 6]));
        let loss = tape.sum_squares(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(unused).unwrap();
        assert_eq!(g.shape(), (3, 2));
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(2, 1, &[1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
        let c = tape.constant(Matrix::zeros(3, 1));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn overflow_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(1, 1, &[1e308]));
        let y = tape.scalar_mul(x, 1e10).unwrap_err();
        assert!(matches!(y, Error::Numeric(_)));
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(mat(2, 2, &[0.3, -1.7, 2.4, 0.9]));
            let y = tape.leaf(mat(2, 2, &[1.1, 0.2, -0.4, 0.7]));
            let p = tape.matmul(x, y).unwrap();
            let t = tape.tanh(p).unwrap();
            let s = tape.sigmoid(t).unwrap();
            let m = tape.mul(s, t).unwrap();
            let l = tape.sum_squares(m).unwrap();
            (tape.value(l).scalar_value().unwrap(), {
                let g = tape.backward(l).unwrap();
                g.leaf_grads().to_vec()
            })
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        // backward of a*loss1 + b*loss2 == a*grad1 + b*grad2
        let xv = mat(3, 1, &[0.4, -0.8, 1.3]);
        let (a, b) = (1.75, -0.4);

        let run = |combine: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let t = tape.tanh(x).unwrap();
            let l1 = tape.sum_squares(t).unwrap();
            let s = tape.sigmoid(x).unwrap();
            let l2 = tape.sum_squares(s).unwrap();
            if combine {
                let sa = tape.scalar_mul(l1, a).unwrap();
                let sb = tape.scalar_mul(l2, b).unwrap();
                let l = tape.add(sa, sb).unwrap();
                let g = tape.backward(l).unwrap();
                vec![g.get(x).unwrap().clone()]
            } else {
                let g1 = tape.backward(l1).unwrap();
                let g2 = tape.backward(l2).unwrap();
                vec![g1.get(x).unwrap().clone(), g2.get(x).unwrap().clone()]
            }
        };

        let combined = run(true);
        let separate = run(false);
        for i in 0..3 {
            let expect = a * separate[0].as_slice()[i] + b * separate[1].as_slice()[i];
            let got = combined[0].as_slice()[i];
            assert!((expect - got).abs() < 1e-12, "{expect} vs {got}");
        }
    }
}
