use std::borrow::Cow;

use super::linalg::Cholesky;
use super::{matmul_t, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations with their standard backward rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Sigmoid,
    LeakyRelu(f64),
    Log,
    Exp,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Sigmoid,
    LeakyRelu(f64),
    Log,
    Exp,
    Softplus,
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    LhsRow,
    RhsRow,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SqDist(NodeId, NodeId),
    Reshape(NodeId),
    Binary(Binary, NodeId, NodeId, Broadcast),
    Scale(NodeId, f64),
    Unary(Unary, NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    Softmax(NodeId),
    ConcatCols(Vec<NodeId>),
    AddDiag(NodeId, NodeId),
    SolveSpd {
        a: NodeId,
        b: NodeId,
        factor: Cholesky,
    },
    SolveShifted {
        a: NodeId,
        d: NodeId,
        b: NodeId,
        factors: Vec<Cholesky>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Tensor,
        targets: Tensor,
    },
    BceWithLogits {
        logits: NodeId,
        labels: Tensor,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b, _) | Op::AddDiag(a, b) | Op::SqDist(a, b) => {
                vec![*a, *b]
            }
            Op::SolveSpd { a, b, .. } => vec![*a, *b],
            Op::SolveShifted { a, d, b, .. } => vec![*a, *d, *b],
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Unary(_, x)
            | Op::Sum(x)
            | Op::RowSum(x)
            | Op::Softmax(x) => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => {
                vec![*logits]
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros shaped like `like` when nothing flowed into it.
    pub fn wrt(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Append-only computation graph. Nodes only reference earlier nodes, so
/// index order is a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_fault: bool,
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

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Test hook: deliberately breaks the matmul backward rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.backward_fault = true;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn derived(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(value, Op::MatMul(a, b)))
    }

    /// Pairwise squared distances `‖a_i − b_j‖²` between the rows of `a`
    /// (`p×d`) and `b` (`r×d`), as a `p×r` matrix.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.cols() {
            return Err(Error::Dimension {
                op: "sq_dist",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let sq = |t: &Tensor, i: usize| sq_norm(t.row_slice(i));
        let bn: Vec<f64> = (0..bv.rows()).map(|j| sq(bv, j)).collect();
        let mut value = matmul_t(av, false, bv, true)?;
        let r = bv.rows();
        for (i, row) in value.data_mut().chunks_mut(r.max(1)).enumerate() {
            let an = sq(av, i);
            for (v, b2) in row.iter_mut().zip(&bn) {
                *v = (an + b2 - 2.0 * *v).max(0.0);
            }
        }
        Ok(self.derived(value, Op::SqDist(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transpose();
        self.derived(value, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(value, Op::Reshape(x)))
    }

    /// Applies a pointwise operation. Binary ops take two inputs and
    /// broadcast scalar-with-tensor and row-vector-with-matrix.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::validation(format!(
                "{op:?} expects {arity} input(s), got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.binary(Binary::Add, inputs[0], inputs[1]),
            Elementwise::Sub => self.binary(Binary::Sub, inputs[0], inputs[1]),
            Elementwise::Mul => self.binary(Binary::Mul, inputs[0], inputs[1]),
            Elementwise::Div => self.binary(Binary::Div, inputs[0], inputs[1]),
            Elementwise::Scale(c) => Ok(self.scale(inputs[0], c)),
            Elementwise::Sigmoid => self.unary(Unary::Sigmoid, inputs[0]),
            Elementwise::LeakyRelu(s) => self.unary(Unary::LeakyRelu(s), inputs[0]),
            Elementwise::Log => self.unary(Unary::Log, inputs[0]),
            Elementwise::Exp => self.unary(Unary::Exp, inputs[0]),
            Elementwise::Softplus => self.unary(Unary::Softplus, inputs[0]),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).scale(factor);
        self.derived(value, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(Unary::LeakyRelu(slope), x).expect("leaky relu is total")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Softplus, x).expect("softplus is total")
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        self.unary(Unary::ClampMin(floor), x).expect("clamp is total")
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.derived(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row of a matrix into a column `[rows, 1]`.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let data = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let value = Tensor::new(vec![r, 1], data).expect("row sums");
        self.derived(value, Op::RowSum(x))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let value = softmax_rows(self.value(x));
        self.derived(value, Op::Softmax(x))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows || v.ndim() > 2 {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec())))
    }

    /// `A + diag(d)` where `d` is a scalar or a vector with one entry per row of `A`.
    pub fn add_diag(&mut self, a: NodeId, d: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let dv = self.value(d);
        let k = av.rows();
        if av.ndim() != 2 || av.cols() != k || !(dv.len() == 1 || dv.len() == k) {
            return Err(Error::Dimension {
                op: "add_diag",
                lhs: av.shape().to_vec(),
                rhs: dv.shape().to_vec(),
            });
        }
        let mut value = av.clone();
        for i in 0..k {
            let di = if dv.len() == 1 { dv.data()[0] } else { dv.data()[i] };
            value.data_mut()[i * k + i] += di;
        }
        Ok(self.derived(value, Op::AddDiag(a, d)))
    }

    /// Solves `A·Z = B` for symmetric positive definite `A` via Cholesky.
    pub fn solve_spd(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let factor = Cholesky::factor(self.value(a))?;
        let value = factor.solve(self.value(b))?;
        Ok(self.derived(value, Op::SolveSpd { a, b, factor }))
    }

    /// Column `c` of the result solves `(A + diag(D[:, c]))·z = B[:, c]` for
    /// symmetric `A` (`k×k`) and `D`, `B` of shape `k×o`. Each shifted system
    /// must be positive definite.
    pub fn solve_shifted(&mut self, a: NodeId, d: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, dv, bv) = (self.value(a), self.value(d), self.value(b));
        let k = av.rows();
        if av.ndim() != 2 || av.cols() != k || dv.shape() != [k, bv.cols()] || bv.rows() != k {
            return Err(Error::Dimension {
                op: "solve_shifted",
                lhs: av.shape().to_vec(),
                rhs: [dv.shape(), bv.shape()].concat(),
            });
        }
        let o = bv.cols();
        let mut value = Tensor::zeros(&[k, o]);
        let mut factors = Vec::with_capacity(o);
        for c in 0..o {
            let mut system = av.clone();
            for i in 0..k {
                system.data_mut()[i * k + i] += dv.get(i, c);
            }
            let factor = Cholesky::factor(&system)?;
            let rhs = Tensor::column(&(0..k).map(|i| bv.get(i, c)).collect::<Vec<_>>());
            let z = factor.solve(&rhs)?;
            for i in 0..k {
                value.set(i, c, z.data()[i]);
            }
            factors.push(factor);
        }
        Ok(self.derived(value, Op::SolveShifted { a, d, b, factors }))
    }

    /// Mean over rows of `-log softmax(logits)` at the one-hot target.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape() != targets.shape() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        validate_one_hot(targets)?;
        let probs = softmax_rows(lv);
        let (b, o) = (lv.rows(), lv.cols());
        let mut total = 0.0;
        for i in 0..b {
            let row = lv.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let t = (0..o).find(|&j| targets.get(i, j) == 1.0).expect("validated");
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / b.max(1) as f64);
        Ok(self.derived(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.clone(),
            },
        ))
    }

    /// Mean of `softplus(x) - y·x` over binary labels `y`.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: labels.shape().to_vec(),
            });
        }
        if let Some(bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::validation(format!("binary label expected, got {bad}")));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum();
        let value = Tensor::scalar(total / lv.len().max(1) as f64);
        Ok(self.derived(
            value,
            Op::BceWithLogits {
                logits,
                labels: labels.clone(),
            },
        ))
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = broadcast(av, bv).ok_or_else(|| Error::Dimension {
            op: match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        if kind == Binary::Div && bv.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let value = apply_broadcast(av, bv, bc, f);
        Ok(self.derived(value, Op::Binary(kind, a, b, bc)))
    }

    fn unary(&mut self, kind: Unary, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let value = match kind {
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::LeakyRelu(s) => xv.map(|v| if v >= 0.0 { v } else { s * v }),
            Unary::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                xv.map(f64::ln)
            }
            Unary::Exp => xv.map(f64::exp),
            Unary::Softplus => xv.map(softplus),
            Unary::ClampMin(lo) => xv.map(|v| v.max(lo)),
        };
        Ok(self.derived(value, Op::Unary(kind, x)))
    }

    /// Reverse sweep from a scalar root. Every node that requires a gradient
    /// and lies upstream of the root receives `∂root/∂node`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for p in node.op.parents() {
                assert!(
                    p.0 < idx,
                    "internal invariant violation: node {idx} depends on later node {}",
                    p.0
                );
            }
            for (parent, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let mut ga = matmul_t(g, false, self.value(*b), true)?;
                    if self.backward_fault {
                        ga = ga.scale(1.5);
                    }
                    res.push((*a, ga.reshape(self.value(*a).shape())?));
                }
                if wants(*b) {
                    let gb = matmul_t(self.value(*a), true, g, false)?;
                    res.push((*b, gb.reshape(self.value(*b).shape())?));
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // ∂a = 2(diag(g·1)·a − g·b), ∂b = 2(diag(gᵀ·1)·b − gᵀ·a)
                let side = |x: &Tensor, y: &Tensor, trans: bool| -> Result<Tensor> {
                    let mut out = matmul_t(g, trans, y, false)?;
                    let d = x.cols();
                    for (i, row) in out.data_mut().chunks_mut(d.max(1)).enumerate() {
                        let w: f64 = if trans {
                            (0..g.rows()).map(|k| g.get(k, i)).sum()
                        } else {
                            g.row_slice(i).iter().sum()
                        };
                        for (o, xv) in row.iter_mut().zip(x.row_slice(i)) {
                            *o = 2.0 * (w * xv - *o);
                        }
                    }
                    Ok(out)
                };
                if wants(*a) {
                    res.push((*a, side(av, bv, false)?));
                }
                if wants(*b) {
                    res.push((*b, side(bv, av, true)?));
                }
            }
            Op::Transpose(x) => {
                let gx = g.transpose().reshape(self.value(*x).shape())?;
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.clone().reshape(self.value(*x).shape())?)),
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let wide = |t| widen(t, out.shape());
                let lhs = matches!(bc, Broadcast::LhsScalar | Broadcast::LhsRow);
                let rhs = matches!(bc, Broadcast::RhsScalar | Broadcast::RhsRow);
                if wants(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => g.zip_map(&wide(bv), |x, y| x * y),
                        Binary::Div => g.zip_map(&wide(bv), |x, y| x / y),
                    };
                    res.push((*a, if lhs { reduce_to(&ga, av) } else { ga }));
                }
                if wants(*b) {
                    let gb = match kind {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.scale(-1.0),
                        Binary::Mul => g.zip_map(&wide(av), |x, y| x * y),
                        Binary::Div => {
                            let (ea, eb) = (wide(av), wide(bv));
                            Tensor::new(
                                out.shape().to_vec(),
                                g.data()
                                    .iter()
                                    .zip(ea.data())
                                    .zip(eb.data())
                                    .map(|((gg, x), y)| -gg * x / (y * y))
                                    .collect(),
                            )?
                        }
                    };
                    res.push((*b, if rhs { reduce_to(&gb, bv) } else { gb }));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.scale(*c))),
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let gx = match kind {
                    Unary::Sigmoid => g.zip_map(out, |gg, s| gg * s * (1.0 - s)),
                    Unary::LeakyRelu(s) => {
                        g.zip_map(xv, |gg, v| if v >= 0.0 { gg } else { gg * s })
                    }
                    Unary::Log => g.zip_map(xv, |gg, v| gg / v),
                    Unary::Exp => g.zip_map(out, |gg, e| gg * e),
                    Unary::Softplus => g.zip_map(xv, |gg, v| gg * sigmoid(v)),
                    Unary::ClampMin(lo) => {
                        g.zip_map(xv, |gg, v| if v >= *lo { gg } else { 0.0 })
                    }
                };
                res.push((*x, gx));
            }
            Op::Sum(x) => res.push((*x, Tensor::full(self.value(*x).shape(), g.item()))),
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, c))
                    .collect();
                res.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Softmax(x) => {
                let (r, c) = (out.rows(), out.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let p = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dotp: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        data[i * c + j] = p[j] * (gr[j] - dotp);
                    }
                }
                res.push((*x, Tensor::new(out.shape().to_vec(), data)?));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if wants(*p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        res.push((*p, Tensor::new(pv.shape().to_vec(), data)?));
                    }
                    offset += w;
                }
            }
            Op::AddDiag(a, d) => {
                if wants(*a) {
                    res.push((*a, g.clone()));
                }
                if wants(*d) {
                    let dv = self.value(*d);
                    let k = out.rows();
                    let gd = if dv.len() == 1 {
                        Tensor::full(dv.shape(), (0..k).map(|i| g.get(i, i)).sum())
                    } else {
                        Tensor::new(dv.shape().to_vec(), (0..k).map(|i| g.get(i, i)).collect())?
                    };
                    res.push((*d, gd));
                }
            }
            Op::SolveSpd { a, b, factor } => {
                // A symmetric: ∂B = A⁻¹Ḡ, ∂A = -∂B·Zᵀ symmetrized.
                let gb = factor.solve(g)?;
                if wants(*a) {
                    let gb2 = as_matrix(&gb);
                    let z2 = as_matrix(out);
                    let m = matmul_t(&gb2, false, &z2, true)?;
                    let k = m.rows();
                    let mut sym = Tensor::zeros(&[k, k]);
                    for i in 0..k {
                        for j in 0..k {
                            sym.set(i, j, -0.5 * (m.get(i, j) + m.get(j, i)));
                        }
                    }
                    res.push((*a, sym));
                }
                if wants(*b) {
                    res.push((*b, gb));
                }
            }
            Op::SolveShifted { a, d, b, factors } => {
                let (k, o) = (out.rows(), out.cols());
                let mut ga = Tensor::zeros(&[k, k]);
                let mut gd = Tensor::zeros(&[k, o]);
                let mut gb = Tensor::zeros(&[k, o]);
                for (c, factor) in factors.iter().enumerate() {
                    let gc = Tensor::column(&(0..k).map(|i| g.get(i, c)).collect::<Vec<_>>());
                    let v = factor.solve(&gc)?;
                    for i in 0..k {
                        let vi = v.data()[i];
                        gb.set(i, c, vi);
                        gd.set(i, c, -vi * out.get(i, c));
                        for j in 0..k {
                            let w = -0.5 * (vi * out.get(j, c) + v.data()[j] * out.get(i, c));
                            ga.data_mut()[i * k + j] += w;
                        }
                    }
                }
                if wants(*a) {
                    res.push((*a, ga));
                }
                if wants(*d) {
                    res.push((*d, gd));
                }
                if wants(*b) {
                    res.push((*b, gb));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let scale = g.item() / probs.rows().max(1) as f64;
                res.push((*logits, probs.zip_map(targets, |p, t| (p - t) * scale)));
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = self.value(*logits);
                let scale = g.item() / lv.len().max(1) as f64;
                let gx = lv.zip_map(labels, |x, y| (sigmoid(x) - y) * scale);
                res.push((*logits, gx));
            }
        }
        Ok(res)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row_slice(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|v| (v - max).exp()));
        let z: f64 = data[start..].iter().sum();
        for v in &mut data[start..] {
            *v /= z;
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn validate_one_hot(targets: &Tensor) -> Result<()> {
    for i in 0..targets.rows() {
        let row = targets.row_slice(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::validation(format!("target row {i} is not one-hot")));
        }
    }
    Ok(())
}

fn is_row_of(row: &Tensor, mat: &Tensor) -> bool {
    mat.ndim() == 2
        && mat.rows() != 1
        && row.len() == mat.cols()
        && match row.ndim() {
            1 => true,
            2 => row.rows() == 1,
            _ => false,
        }
}

fn sq_norm(x: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = x.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|v| v * v).sum();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v * v;
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn broadcast(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.shape() == b.shape() {
        Some(Broadcast::Same)
    } else if b.is_scalar() && (!a.is_scalar() || a.ndim() >= b.ndim()) {
        Some(Broadcast::RhsScalar)
    } else if a.is_scalar() {
        Some(Broadcast::LhsScalar)
    } else if is_row_of(b, a) {
        Some(Broadcast::RhsRow)
    } else if is_row_of(a, b) {
        Some(Broadcast::LhsRow)
    } else {
        None
    }
}

fn apply_broadcast(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match bc {
        Broadcast::Same => a.zip_map(b, f),
        Broadcast::RhsScalar => {
            let y = b.data()[0];
            a.map(|x| f(x, y))
        }
        Broadcast::LhsScalar => {
            let x = a.data()[0];
            b.map(|y| f(x, y))
        }
        Broadcast::RhsRow => {
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % c]))
                .collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        }
        Broadcast::LhsRow => {
            let c = b.cols();
            let data = b
                .data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(a.data()[i % c], y))
                .collect();
            Tensor::new(b.shape().to_vec(), data).expect("same shape")
        }
    }
}

/// Broadcasts `t` to `shape` (scalar or row vector expansion).
fn expand(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let n: usize = shape.iter().product();
    let data = if t.len() == 1 {
        vec![t.data()[0]; n]
    } else {
        (0..n).map(|i| t.data()[i % t.len()]).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("broadcast shape")
}

fn widen<'a>(t: &'a Tensor, shape: &[usize]) -> Cow<'a, Tensor> {
    if t.shape() == shape {
        Cow::Borrowed(t)
    } else {
        Cow::Owned(expand(t, shape))
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: &Tensor, operand: &Tensor) -> Tensor {
    if operand.len() == 1 {
        return Tensor::full(operand.shape(), g.sum());
    }
    let c = operand.len();
    let mut data = vec![0.0; c];
    for (i, v) in g.data().iter().enumerate() {
        data[i % c] += v;
    }
    Tensor::new(operand.shape().to_vec(), data).expect("operand shape")
}

fn as_matrix(t: &Tensor) -> Tensor {
    if t.ndim() == 2 {
        t.clone()
    } else {
        t.clone().reshape(&[t.rows(), t.cols()]).expect("matrix view")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_input() {
        let mut g = Graph::new();
        let xv = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = g.param(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn sigmoid_and_leaky_relu_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let m = g.constant(Tensor::scalar(-1.0));
        let r = g.elementwise(Elementwise::LeakyRelu(0.1), &[m]).unwrap();
        assert!((g.value(r).item() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn softplus_gradient_is_sigmoid() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.5).collect();
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![xs.len()], xs.clone()).unwrap());
        let sp = g.softplus(x);
        let s = g.sum(sp);
        let grads = g.backward(s).unwrap();
        for (gv, &xv) in grads.get(x).unwrap().data().iter().zip(&xs) {
            assert!((gv - sigmoid(xv)).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.div(a, z), Err(Error::Domain { .. })));
        let neg = g.constant(Tensor::scalar(-1.0));
        assert!(matches!(g.log(neg), Err(Error::Domain { .. })));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 5]));
        let t = Tensor::from_rows(&[[0.0, 0.0, 1.0, 0.0, 0.0]]);
        let loss = g.softmax_cross_entropy(logits, &t).unwrap();
        assert!((g.value(loss).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::from_rows(&[[10.0, 0.0, 0.0]]));
        let t = Tensor::from_rows(&[[1.0, 0.0, 0.0]]);
        let loss = g.softmax_cross_entropy(logits, &t).unwrap();
        assert!(g.value(loss).item() < 1e-4);
    }

    #[test]
    fn non_one_hot_targets_rejected() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        let t = Tensor::from_rows(&[[0.5, 0.5, 0.0]]);
        assert!(matches!(
            g.softmax_cross_entropy(logits, &t),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bce_at_zero_logit() {
        for label in [0.0, 1.0] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
            let l = g.bce_with_logits(x, &Tensor::new(vec![1], vec![label]).unwrap()).unwrap();
            assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_matches_naive_formula() {
        for i in -40..=40 {
            let x = i as f64 * 0.5;
            for y in [0.0, 1.0] {
                let mut g = Graph::new();
                let xn = g.constant(Tensor::new(vec![1], vec![x]).unwrap());
                let l = g.bce_with_logits(xn, &Tensor::new(vec![1], vec![y]).unwrap()).unwrap();
                // 1 - σ(x) evaluated as σ(-x) so the oracle keeps full precision at |x| = 20.
                let s = 1.0 / (1.0 + (-x).exp());
                let one_minus_s = 1.0 / (1.0 + x.exp());
                let naive = -(y * s.ln() + (1.0 - y) * one_minus_s.ln());
                assert!((g.value(l).item() - naive).abs() < 1e-10, "x={x} y={y}");
            }
        }
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let m = g.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let r = g.param(Tensor::row(&[10.0, 20.0]));
        let s = g.param(Tensor::scalar(2.0));
        let a = g.add(m, r).unwrap();
        assert_eq!(g.value(a).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let b = g.mul(s, a).unwrap();
        let total = g.sum(b);
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get(r).unwrap().data(), &[6.0, 6.0]);
        assert_eq!(grads.get(s).unwrap().item(), 111.0);
        let col = g.constant(Tensor::column(&[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(m, col), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradient_shapes_match_values() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[[1.0, 2.0, 0.5], [0.0, 1.0, -1.0]]));
        let b = g.param(Tensor::from_rows(&[[1.0], [0.5], [2.0]]));
        let c = g.matmul(a, b).unwrap();
        let t = g.transpose(c);
        let sp = g.softplus(t);
        let s = g.sum(sp);
        let grads = g.backward(s).unwrap();
        for id in [a, b, c, t, sp, s] {
            assert_eq!(grads.get(id).unwrap().shape(), g.shape(id));
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(Tensor::matrix(3, 3, (0..9).map(|v| (v as f64).sin()).collect()).unwrap());
            let at = g.transpose(a);
            let m = g.matmul(a, at).unwrap();
            let one = g.constant(Tensor::scalar(1.0));
            let spd = g.add_diag(m, one).unwrap();
            let b = g.constant(Tensor::column(&[1.0, 2.0, 3.0]));
            let z = g.solve_spd(spd, b).unwrap();
            g.value(z).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn shifted_solve_matches_per_column_solves_and_gradients() {
        let base = Tensor::matrix(4, 4, (0..16).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap();
        let shifts = Tensor::matrix(4, 3, (0..12).map(|v| (v as f64 * 1.3).sin()).collect()).unwrap();
        let rhs = Tensor::matrix(4, 3, (0..12).map(|v| (v as f64 * 0.4).sin()).collect()).unwrap();
        let build = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let mt = g.transpose(ids[0]);
            let mm = g.matmul(ids[0], mt)?;
            let one = g.constant(Tensor::scalar(1.0));
            let a = g.add_diag(mm, one)?;
            let d = g.softplus(ids[1]);
            let z = g.solve_shifted(a, d, ids[2])?;
            let sq = g.mul(z, z)?;
            Ok(g.sum(sq))
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = [&base, &shifts, &rhs].iter().map(|t| g.constant((*t).clone())).collect();
        let mt = g.transpose(ids[0]);
        let mm = g.matmul(ids[0], mt).unwrap();
        let one = g.constant(Tensor::scalar(1.0));
        let a = g.add_diag(mm, one).unwrap();
        let d = g.softplus(ids[1]);
        let z = g.solve_shifted(a, d, ids[2]).unwrap();
        let (av, dv, zv) = (g.value(a).clone(), g.value(d).clone(), g.value(z).clone());
        for c in 0..3 {
            let mut system = av.clone();
            for i in 0..4 {
                system.data_mut()[i * 4 + i] += dv.get(i, c);
            }
            let col = Tensor::column(&(0..4).map(|i| rhs.get(i, c)).collect::<Vec<_>>());
            let oracle = Cholesky::factor(&system).unwrap().solve(&col).unwrap();
            for i in 0..4 {
                assert!((zv.get(i, c) - oracle.data()[i]).abs() < 1e-12);
            }
        }

        let report = crate::tensor::grad_check(build, &[base, shifts, rhs], 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.per_leaf);
    }

    #[test]
    fn sq_dist_matches_direct_distances_and_gradients() {
        let a = Tensor::matrix(4, 3, (0..12).map(|v| (v as f64 * 0.9).sin()).collect()).unwrap();
        let b = Tensor::matrix(2, 3, (0..6).map(|v| (v as f64 * 1.7).cos()).collect()).unwrap();
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
        let d = g.sq_dist(an, bn).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let direct: f64 = (0..3).map(|k| (a.get(i, k) - b.get(j, k)).powi(2)).sum();
                assert!((g.value(d).get(i, j) - direct).abs() < 1e-14);
            }
        }
        let probe = Tensor::matrix(4, 2, (0..8).map(|v| v as f64 - 3.5).collect()).unwrap();
        let report = crate::tensor::grad_check(
            |g, ids| {
                let d = g.sq_dist(ids[0], ids[1])?;
                let p = g.constant(probe.clone());
                let w = g.mul(d, p)?;
                Ok(g.sum(w))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.per_leaf);
    }
}
