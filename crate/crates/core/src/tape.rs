//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every backward pass can itself be recorded as differentiable nodes
//! (`create_graph`), which is what makes the second-order gradient of the
//! gradient-matching loss with respect to the input perturbation computable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Primitive operations recorded on the tape.
///
/// The set is the minimum needed to express an MLP forward pass,
/// softmax cross-entropy, and cosine similarity of two flat gradients,
/// plus the primitives their own backward passes are built from.
#[derive(Debug, Clone)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    /// Elementwise add; rhs may be a rank-1 row broadcast over rows, or a scalar.
    Add,
    /// Elementwise subtract; rhs may be a scalar.
    Sub,
    /// Elementwise multiply; rhs may be scalar, row `[c]`, or column `[r,1]`.
    Mul,
    /// Elementwise divide; rhs may be a scalar.
    Div,
    Scale(f64),
    Relu,
    /// 1.0 where x > threshold, else 0.0. Derivative is zero everywhere.
    Step(f64),
    Sum,
    RowSum,
    ColSum,
    /// Full contraction of two same-shape tensors.
    Dot,
    Sqrt,
    /// max(x, floor) elementwise.
    ClampMin(f64),
    /// Row-wise softmax of a rank-2 tensor.
    Softmax,
    /// Mean softmax cross-entropy over rows, log-sum-exp stabilized.
    SoftmaxXent { labels: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: OpKind,
    pub parents: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn classify(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Some(Broadcast::Scalar);
    }
    if a.len() == 2 && b.len() == 1 && b[0] == a[1] {
        return Some(Broadcast::Row);
    }
    if a.len() == 2 && b.len() == 2 && b[0] == a[0] && b[1] == 1 {
        return Some(Broadcast::Col);
    }
    None
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    /// Drop all nodes with id >= `len`. Used to discard throwaway backward
    /// graphs; callers must not retain ids past the truncation point.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        value.check_finite("leaf")?;
        Ok(self.push(OpKind::Leaf, vec![], value, requires_grad))
    }

    /// Non-differentiable constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn push(&mut self, op: OpKind, parents: Vec<NodeId>, value: Tensor, rg: bool) -> NodeId {
        self.nodes.push(Node { op, parents, value, requires_grad: rg });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn result(&mut self, op: OpKind, parents: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        value.check_finite(&format!("{op:?}"))?;
        let rg = self.rg(&parents);
        Ok(self.push(op, parents, value, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (r, k, c) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; r * c];
        let (da, db) = (va.data(), vb.data());
        for i in 0..r {
            for l in 0..k {
                let av = da[i * k + l];
                if av == 0.0 {
                    continue;
                }
                for j in 0..c {
                    out[i * c + j] += av * db[l * c + j];
                }
            }
        }
        self.result(OpKind::MatMul, vec![a, b], Tensor::matrix(r, c, out)?)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::shape(format!("transpose of rank-{} tensor", va.shape().len())));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let d = va.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.result(OpKind::Transpose, vec![a], Tensor::matrix(c, r, out)?)
    }

    fn binary_elementwise(
        &mut self,
        op: OpKind,
        a: NodeId,
        b: NodeId,
        allowed: &[Broadcast],
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = classify(va.shape(), vb.shape())
            .filter(|m| allowed.contains(m))
            .ok_or_else(|| {
                Error::shape(format!("{op:?} on shapes {:?}, {:?}", va.shape(), vb.shape()))
            })?;
        let (da, db) = (va.data(), vb.data());
        let cols = va.cols();
        let out: Vec<f64> = match bc {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Broadcast::Row => da
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i % cols]))
                .collect(),
            Broadcast::Col => da
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i / cols]))
                .collect(),
        };
        let shape = va.shape().to_vec();
        self.result(op, vec![a, b], Tensor::new(shape, out)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        use Broadcast::*;
        self.binary_elementwise(OpKind::Add, a, b, &[Same, Scalar, Row], |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        use Broadcast::*;
        self.binary_elementwise(OpKind::Sub, a, b, &[Same, Scalar], |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        use Broadcast::*;
        self.binary_elementwise(OpKind::Mul, a, b, &[Same, Scalar, Row, Col], |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(b).data().iter().any(|v| v.abs() < 1e-300) {
            return Err(Error::numeric("division by near-zero value"));
        }
        use Broadcast::*;
        self.binary_elementwise(OpKind::Div, a, b, &[Same, Scalar], |x, y| x / y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().map(|&x| x * c).collect();
        let shape = va.shape().to_vec();
        self.result(OpKind::Scale(c), vec![a], Tensor::new(shape, out)?)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = va.shape().to_vec();
        self.result(OpKind::Relu, vec![a], Tensor::new(shape, out)?)
    }

    /// Indicator of x > threshold; gradient sink (zero derivative).
    pub fn step_above(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        let va = self.value(a);
        let out: Vec<f64> = va
            .data()
            .iter()
            .map(|&x| if x > threshold { 1.0 } else { 0.0 })
            .collect();
        let shape = va.shape().to_vec();
        self.result(OpKind::Step(threshold), vec![a], Tensor::new(shape, out)?)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.result(OpKind::Sum, vec![a], Tensor::scalar(s))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::shape("row_sum needs a rank-2 tensor"));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let d = va.data();
        let out: Vec<f64> = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        self.result(OpKind::RowSum, vec![a], Tensor::matrix(r, 1, out)?)
    }

    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::shape("col_sum needs a rank-2 tensor"));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let d = va.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += d[i * c + j];
            }
        }
        self.result(OpKind::ColSum, vec![a], Tensor::from_vec(out))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "dot on shapes {:?}, {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).sum();
        self.result(OpKind::Dot, vec![a, b], Tensor::scalar(s))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.data().iter().any(|&x| x < 0.0) {
            return Err(Error::numeric("sqrt of negative value"));
        }
        let out: Vec<f64> = va.data().iter().map(|&x| x.sqrt()).collect();
        let shape = va.shape().to_vec();
        self.result(OpKind::Sqrt, vec![a], Tensor::new(shape, out)?)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().map(|&x| x.max(floor)).collect();
        let shape = va.shape().to_vec();
        self.result(OpKind::ClampMin(floor), vec![a], Tensor::new(shape, out)?)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::shape("softmax needs a rank-2 tensor"));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(va.row(i), &mut out[i * c..(i + 1) * c]);
        }
        self.result(OpKind::Softmax, vec![a], Tensor::matrix(r, c, out)?)
    }

    /// Mean cross-entropy of row-softmax(logits) against integer labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.shape().len() != 2 {
            return Err(Error::shape("softmax_xent needs rank-2 logits"));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        if labels.len() != r {
            return Err(Error::shape(format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(format!("label {bad} out of range for {c} classes")));
        }
        let mut total = 0.0;
        for i in 0..r {
            let row = v.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        self.result(
            OpKind::SoftmaxXent { labels: labels.to_vec() },
            vec![logits],
            Tensor::scalar(total / r as f64),
        )
    }

    /// L2 norm of a tensor viewed as a flat vector.
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.dot(a, a)?;
        self.sqrt(sq)
    }

    /// Reverse accumulation of d(output)/d(wrt_i).
    ///
    /// With `create_graph` the backward pass stays on the tape as
    /// differentiable nodes, so a second call can compute second-order
    /// gradients. Without it, the scratch graph is discarded and the
    /// gradients come back as plain (non-differentiable) leaves.
    ///
    /// A `wrt` node unreachable from `output` yields a zero tensor of
    /// matching shape.
    pub fn gradient(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<Vec<NodeId>> {
        if !self.value(output).is_scalar() {
            return Err(Error::shape("gradient output must be scalar"));
        }
        for &w in wrt {
            if !self.nodes[w].requires_grad {
                return Err(Error::config(format!(
                    "gradient wrt node {w} does not require grad"
                )));
            }
        }
        let base_len = self.len();
        let mut grads: Vec<Option<NodeId>> = vec![None; output + 1];
        if self.nodes[output].requires_grad {
            let seed = self.constant(Tensor::scalar(1.0))?;
            grads[output] = Some(seed);
            for id in (0..=output).rev() {
                let Some(g) = grads[id] else { continue };
                if matches!(self.nodes[id].op, OpKind::Leaf) {
                    continue;
                }
                let contribs = self.vjp(id, g)?;
                for (parent, c) in contribs {
                    grads[parent] = Some(match grads[parent] {
                        Some(prev) => self.add(prev, c)?,
                        None => c,
                    });
                }
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        if create_graph {
            for &w in wrt {
                let id = match grads.get(w).copied().flatten() {
                    Some(g) => g,
                    None => {
                        let shape = self.value(w).shape().to_vec();
                        self.constant(Tensor::zeros(shape))?
                    }
                };
                out.push(id);
            }
        } else {
            let tensors: Vec<Tensor> = wrt
                .iter()
                .map(|&w| match grads.get(w).copied().flatten() {
                    Some(g) => self.value(g).clone(),
                    None => Tensor::zeros(self.value(w).shape().to_vec()),
                })
                .collect();
            self.truncate(base_len);
            for t in tensors {
                out.push(self.constant(t)?);
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product of one node, expressed as new tape nodes.
    /// Only parents that require grad receive contributions.
    fn vjp(&mut self, id: NodeId, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let node = self.nodes[id].clone();
        let mut out = Vec::new();
        let wants = |t: &Tape, p: NodeId| t.nodes[p].requires_grad;
        match &node.op {
            OpKind::Leaf | OpKind::Step(_) => {}
            OpKind::MatMul => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if wants(self, a) {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(g, bt)?;
                    out.push((a, ga));
                }
                if wants(self, b) {
                    let at = self.transpose(a)?;
                    let gb = self.matmul(at, g)?;
                    out.push((b, gb));
                }
            }
            OpKind::Transpose => {
                let a = node.parents[0];
                if wants(self, a) {
                    let ga = self.transpose(g)?;
                    out.push((a, ga));
                }
            }
            OpKind::Add => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if wants(self, a) {
                    out.push((a, g));
                }
                if wants(self, b) {
                    let gb = self.reduce_like(g, b)?;
                    out.push((b, gb));
                }
            }
            OpKind::Sub => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if wants(self, a) {
                    out.push((a, g));
                }
                if wants(self, b) {
                    let r = self.reduce_like(g, b)?;
                    let gb = self.scale(r, -1.0)?;
                    out.push((b, gb));
                }
            }
            OpKind::Mul => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if wants(self, a) {
                    let ga = self.mul(g, b)?;
                    out.push((a, ga));
                }
                if wants(self, b) {
                    let full = self.mul(g, a)?;
                    let gb = self.reduce_like(full, b)?;
                    out.push((b, gb));
                }
            }
            OpKind::Div => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if wants(self, a) {
                    let ga = self.div(g, b)?;
                    out.push((a, ga));
                }
                if wants(self, b) {
                    // d/db (a/b) = -a/b^2 = -out/b
                    let ob = self.div(id, b)?;
                    let full = self.mul(g, ob)?;
                    let neg = self.scale(full, -1.0)?;
                    let gb = self.reduce_like(neg, b)?;
                    out.push((b, gb));
                }
            }
            OpKind::Scale(c) => {
                let a = node.parents[0];
                if wants(self, a) {
                    let ga = self.scale(g, *c)?;
                    out.push((a, ga));
                }
            }
            OpKind::Relu => {
                let a = node.parents[0];
                if wants(self, a) {
                    let mask = self.step_above(a, 0.0)?;
                    let ga = self.mul(g, mask)?;
                    out.push((a, ga));
                }
            }
            OpKind::Sum => {
                let a = node.parents[0];
                if wants(self, a) {
                    let ones = self.constant(Tensor::filled(self.value(a).shape().to_vec(), 1.0))?;
                    let ga = self.mul(ones, g)?;
                    out.push((a, ga));
                }
            }
            OpKind::RowSum | OpKind::ColSum => {
                let a = node.parents[0];
                if wants(self, a) {
                    let ones = self.constant(Tensor::filled(self.value(a).shape().to_vec(), 1.0))?;
                    let ga = self.mul(ones, g)?;
                    out.push((a, ga));
                }
            }
            OpKind::Dot => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if wants(self, a) {
                    let ga = self.mul(b, g)?;
                    out.push((a, ga));
                }
                if wants(self, b) {
                    let gb = self.mul(a, g)?;
                    out.push((b, gb));
                }
            }
            OpKind::Sqrt => {
                let a = node.parents[0];
                if wants(self, a) {
                    let dg = self.div(g, id)?;
                    let ga = self.scale(dg, 0.5)?;
                    out.push((a, ga));
                }
            }
            OpKind::ClampMin(floor) => {
                let a = node.parents[0];
                if wants(self, a) {
                    let mask = self.step_above(a, *floor)?;
                    let ga = self.mul(g, mask)?;
                    out.push((a, ga));
                }
            }
            OpKind::Softmax => {
                let a = node.parents[0];
                if wants(self, a) {
                    // vjp = y * (g - rowsum(g * y)), with y = softmax(a)
                    let gy = self.mul(g, id)?;
                    let s = self.row_sum(gy)?;
                    let ys = self.mul(id, s)?;
                    let ga = self.sub(gy, ys)?;
                    out.push((a, ga));
                }
            }
            OpKind::SoftmaxXent { labels } => {
                let a = node.parents[0];
                if wants(self, a) {
                    let rows = self.value(a).shape()[0];
                    let cols = self.value(a).shape()[1];
                    let mut oh = vec![0.0; rows * cols];
                    for (i, &l) in labels.iter().enumerate() {
                        oh[i * cols + l] = 1.0;
                    }
                    let onehot = self.constant(Tensor::matrix(rows, cols, oh)?)?;
                    let sm = self.softmax(a)?;
                    let diff = self.sub(sm, onehot)?;
                    let mean = self.scale(diff, 1.0 / rows as f64)?;
                    let ga = self.mul(mean, g)?;
                    out.push((a, ga));
                }
            }
        }
        Ok(out)
    }

    /// Reduce `full` (shaped like the broadcast lhs) back to the shape of
    /// node `like`, inverting the broadcast used in the forward op.
    fn reduce_like(&mut self, full: NodeId, like: NodeId) -> Result<NodeId> {
        let fs = self.value(full).shape().to_vec();
        let ls = self.value(like).shape().to_vec();
        match classify(&fs, &ls) {
            Some(Broadcast::Same) => Ok(full),
            Some(Broadcast::Scalar) => {
                let s = self.sum(full)?;
                if ls == [1] {
                    Ok(s)
                } else {
                    // scalar stored with a different 1-element shape
                    Ok(s)
                }
            }
            Some(Broadcast::Row) => self.col_sum(full),
            Some(Broadcast::Col) => self.row_sum(full),
            None => Err(Error::shape(format!("cannot reduce {fs:?} to {ls:?}"))),
        }
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - mx).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Compare the analytic gradient of `f` at `point` against central finite
/// differences. Returns the max over coordinates of |a-n| / max(1, |a|, |n|).
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::config("grad_check eps must be in [1e-8, 1e-3]"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true)?;
    let y = f(&mut tape, x)?;
    let analytic = {
        let g = tape.gradient(y, &[x], false)?;
        tape.value(g[0]).clone()
    };
    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(point.shape().to_vec(), data.to_vec())?, true)?;
        let y = f(&mut t, x)?;
        t.value(y).scalar_value()
    };
    let mut max_err = 0.0f64;
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + eps;
        let hi = eval(&data)?;
        data[i] = orig - eps;
        let lo = eval(&data)?;
        data[i] = orig;
        let n = (hi - lo) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
