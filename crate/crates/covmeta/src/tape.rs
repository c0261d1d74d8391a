//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape supports two backward modes:
//!
//! * **higher-order** (`higher_order = true`): a backward pass appends the
//!   gradient computation as new nodes, so gradients are themselves
//!   differentiable — this is what lets an outer gradient flow through the
//!   gradient steps of an unrolled inner loop.
//! * **value mode**: `backward_values` returns plain tensors and leaves the
//!   node list unchanged (gradients are computed with the same appended-node
//!   arithmetic, then the scratch nodes are truncated away, so both modes
//!   produce bit-identical numbers by construction).
//!
//! All arithmetic is in f64. Every op result is checked for NaN/Inf and the
//! producing op is named in the error (fail-fast NaN policy).

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Index of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Operation kind; parent node ids are embedded in the variants.
#[derive(Clone, Debug)]
pub enum Op {
    /// Differentiable leaf (parameters, inputs).
    Input,
    /// Non-differentiable leaf (data, detached values).
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise multiply (trailing-dimension broadcasting allowed).
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    /// Multiply by a compile-time scalar constant.
    Scale(NodeId, f64),
    /// Add a scalar constant elementwise.
    AddScalar(NodeId, f64),
    /// (m,k) @ (k,n)
    Matmul(NodeId, NodeId),
    /// (m,k) @ (n,k)^T — "NT" = (normal, transposed)
    MatmulNT(NodeId, NodeId),
    /// (k,m)^T @ (k,n)
    MatmulTN(NodeId, NodeId),
    /// Broadcast parent to this node's shape.
    Broadcast(NodeId),
    /// Sum parent down to this node's shape (adjoint of Broadcast).
    SumTo(NodeId),
    /// Full-reduction sum to a scalar.
    Sum(NodeId),
    /// Full-reduction mean to a scalar.
    Mean(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    /// Concatenate along the last axis.
    Concat(Vec<NodeId>),
    /// Take last-axis window [start, start+len) of the parent.
    Slice {
        src: NodeId,
        start: usize,
        len: usize,
    },
    /// Embed parent into zeros of last-axis width `total` at `start`
    /// (adjoint of Slice).
    Pad {
        src: NodeId,
        total: usize,
        start: usize,
    },
    /// Same data, new shape (same element count).
    Reshape(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul(..) => "matmul",
            Op::MatmulNT(..) => "matmul_nt",
            Op::MatmulTN(..) => "matmul_tn",
            Op::Broadcast(..) => "broadcast",
            Op::SumTo(..) => "sum_to",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Reshape(..) => "reshape",
        }
    }
}

/// One recorded computation step.
#[derive(Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    /// Filled for requested nodes by value-mode backward passes.
    pub grad: Option<Tensor>,
}

/// Result of a backward pass: nodes in higher-order mode, tensors otherwise.
#[derive(Debug)]
pub enum Gradient {
    Node(NodeId),
    Value(Tensor),
}

pub struct Tape {
    nodes: Vec<Node>,
    higher_order: bool,
    /// Backward-pass scratch, reused across passes: `adj_val[i]` is node
    /// `i`'s adjoint iff `adj_epoch[i] == epoch`. A training step runs many
    /// backward passes over one shared tape, so clearing must be O(1)
    /// (bump `epoch`) rather than a zero-fill of tape-length storage.
    adj_val: Vec<NodeId>,
    adj_epoch: Vec<u32>,
    epoch: u32,
}

impl Tape {
    pub fn new(higher_order: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            higher_order,
            adj_val: Vec::new(),
            adj_epoch: Vec::new(),
            epoch: 0,
        }
    }

    pub fn higher_order(&self) -> bool {
        self.higher_order
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node but keep the allocated storage (node vector and
    /// backward scratch), so the next graph records without regrowing.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Register a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    /// Re-enter a node's current value as a constant leaf (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    /// Evaluate an op from its parents' current values (shared by forward
    /// recording and by the nodes a backward pass appends).
    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Input | Op::Const => unreachable!("leaves carry their value"),
            Op::Add(a, b) => tensor::binary("add", v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => tensor::binary("sub", v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => tensor::binary("mul", v(a), v(b), |x, y| x * y),
            Op::Div(a, b) => tensor::binary("div", v(a), v(b), |x, y| x / y),
            Op::Neg(a) => Ok(v(a).map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                Ok(v(a).map(|x| x * c))
            }
            Op::AddScalar(a, c) => {
                let c = *c;
                Ok(v(a).map(|x| x + c))
            }
            Op::Matmul(a, b) => tensor::matmul(v(a), v(b)),
            Op::MatmulNT(a, b) => tensor::matmul_nt(v(a), v(b)),
            Op::MatmulTN(a, b) => tensor::matmul_tn(v(a), v(b)),
            Op::Broadcast(_) | Op::SumTo(_) | Op::Reshape(_) => {
                unreachable!("shape-carrying ops evaluated at record time")
            }
            Op::Sum(a) => Ok(Tensor::scalar(tensor::sum_slice(v(a).data()))),
            Op::Mean(a) => {
                let t = v(a);
                let inv = 1.0 / t.numel() as f64;
                Ok(Tensor::scalar(tensor::sum_slice(t.data()) * inv))
            }
            Op::Exp(a) => Ok(v(a).map(f64::exp)),
            Op::Log(a) => {
                let t = v(a);
                if t.data().iter().any(|&x| x <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        message: "argument must be positive".into(),
                    });
                }
                Ok(t.map(f64::ln))
            }
            Op::Tanh(a) => Ok(v(a).map(f64::tanh)),
            Op::Sigmoid(a) => Ok(v(a).map(|x| 1.0 / (1.0 + (-x).exp()))),
            Op::Relu(a) => Ok(v(a).map(|x| if x > 0.0 { x } else { 0.0 })),
            Op::Softplus(a) => Ok(v(a).map(|x| {
                // numerically stable ln(1 + e^x)
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            })),
            Op::Square(a) => Ok(v(a).map(|x| x * x)),
            Op::Concat(parts) => {
                let vs: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
                tensor::concat_last(&vs)
            }
            Op::Slice { src, start, len } => tensor::slice_last(v(src), *start, *len),
            Op::Pad { src, total, start } => tensor::pad_last(v(src), *total, *start),
        }
    }

    /// Record one operation: evaluate, check finiteness, push.
    pub fn forward_op(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(op, value))
    }

    // ── Convenience constructors, one per op ───────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Div(a, b))
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Neg(a))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.forward_op(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.forward_op(Op::AddScalar(a, c))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Matmul(a, b))
    }
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::MatmulNT(a, b))
    }
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::MatmulTN(a, b))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Mean(a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Log(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sigmoid(a))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Relu(a))
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Softplus(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Square(a))
    }
    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.forward_op(Op::Concat(parts))
    }
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.forward_op(Op::Slice { src, start, len })
    }
    pub fn pad(&mut self, src: NodeId, total: usize, start: usize) -> Result<NodeId> {
        self.forward_op(Op::Pad { src, total, start })
    }

    /// Broadcast `a` to `target` (explicit materialization).
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let value = tensor::broadcast_to(self.value(a), target)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "broadcast" });
        }
        Ok(self.push(Op::Broadcast(a), value))
    }

    /// Sum `a` down to `target` (adjoint of broadcast).
    pub fn sum_to(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let value = tensor::sum_to(self.value(a), target)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "sum_to" });
        }
        Ok(self.push(Op::SumTo(a), value))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    // ── Gaussian building blocks ───────────────────────────────────────────

    /// Summed log-density of independent Gaussians:
    /// Σ_j [ −½·log(2π·σ_j²) − (x_j−μ_j)²/(2σ_j²) ].
    /// `mu`/`sigma` broadcast against `x`. Differentiable w.r.t. all three.
    pub fn gaussian_log_density(
        &mut self,
        x: NodeId,
        mu: NodeId,
        sigma: NodeId,
    ) -> Result<NodeId> {
        if self.value(sigma).data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain {
                op: "gaussian_log_density",
                message: "sigma must be positive".into(),
            });
        }
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
        let d = self.sub(x, mu)?;
        let d2 = self.square(d)?;
        let s2 = self.square(sigma)?;
        let denom = self.scale(s2, 2.0)?;
        let q = self.div(d2, denom)?; // (x−μ)²/(2σ²), broadcast to x's shape
        let ln_sigma = self.log(sigma)?;
        let norm = self.add_scalar(ln_sigma, HALF_LN_2PI)?; // ½log(2πσ²)
        let per = self.add(norm, q)?; // broadcast again
        let total = self.sum(per)?;
        self.neg(total)
    }

    /// KL( N(mu, diag sigma²) ‖ N(0, I) ) = ½ Σ_d (μ_d² + σ_d² − log σ_d² − 1).
    pub fn gaussian_kl_to_standard(&mut self, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        if self.value(sigma).data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain {
                op: "gaussian_kl_to_standard",
                message: "sigma must be positive".into(),
            });
        }
        let mu2 = self.square(mu)?;
        let s2 = self.square(sigma)?;
        let log_s2 = self.log(s2)?;
        let lhs = self.add(mu2, s2)?;
        let rhs = self.add_scalar(log_s2, 1.0)?;
        let per = self.sub(lhs, rhs)?;
        let total = self.sum(per)?;
        self.scale(total, 0.5)
    }

    // ── Backward ───────────────────────────────────────────────────────────

    /// Reverse-mode pass from scalar `root`. In higher-order mode returns
    /// `Gradient::Node`s (differentiable); otherwise `Gradient::Value`s and
    /// the tape is left exactly as long as before the call.
    pub fn backward(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Gradient>> {
        if self.higher_order {
            Ok(self
                .backward_nodes(root, wrt)?
                .into_iter()
                .map(Gradient::Node)
                .collect())
        } else {
            Ok(self
                .backward_values(root, wrt)?
                .into_iter()
                .map(Gradient::Value)
                .collect())
        }
    }

    /// Backward returning gradient *nodes* (higher-order tapes only).
    pub fn backward_nodes(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.higher_order {
            return Err(Error::Invalid(
                "backward_nodes requires a higher-order tape".into(),
            ));
        }
        self.backward_impl(root, wrt)
    }

    /// Backward returning plain tensors on any tape. Gradients are computed
    /// by the same appended-node arithmetic as higher-order mode and the
    /// scratch nodes are then removed, so the numbers are bit-identical
    /// across modes. Grad-slots of `wrt` nodes are filled.
    pub fn backward_values(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let len0 = self.nodes.len();
        let ids = self.backward_impl(root, wrt)?;
        let values: Vec<Tensor> = ids.iter().map(|id| self.value(*id).clone()).collect();
        self.nodes.truncate(len0);
        for (w, g) in wrt.iter().zip(&values) {
            self.nodes[w.0].grad = Some(g.clone());
        }
        Ok(values)
    }

    fn backward_impl(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward root must be scalar-shaped, got {:?}",
                self.value(root).shape()
            )));
        }
        let rid = root.0;
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            // u32 wrapped: stale stamps could alias the new epoch.
            self.adj_epoch.fill(0);
            self.epoch = 1;
        }
        if self.adj_epoch.len() <= rid {
            self.adj_epoch.resize(rid + 1, 0);
            self.adj_val.resize(rid + 1, NodeId(usize::MAX));
        }
        let seed_shape = self.value(root).shape().to_vec();
        let seed = self.constant(Tensor::filled(&seed_shape, 1.0));
        self.adj_set(root, seed);

        for id in (0..=rid).rev() {
            let Some(g) = self.adj_get(NodeId(id)) else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    let ga = self.reduce_to_parent(g, a)?;
                    self.accumulate(a, ga)?;
                    let gb = self.reduce_to_parent(g, b)?;
                    self.accumulate(b, gb)?;
                }
                Op::Sub(a, b) => {
                    let ga = self.reduce_to_parent(g, a)?;
                    self.accumulate(a, ga)?;
                    let ng = self.neg(g)?;
                    let gb = self.reduce_to_parent(ng, b)?;
                    self.accumulate(b, gb)?;
                }
                Op::Mul(a, b) => {
                    let gb_raw = self.mul(g, b)?;
                    let ga = self.reduce_to_parent(gb_raw, a)?;
                    self.accumulate(a, ga)?;
                    let ga_raw = self.mul(g, a)?;
                    let gb = self.reduce_to_parent(ga_raw, b)?;
                    self.accumulate(b, gb)?;
                }
                Op::Div(a, b) => {
                    let da_raw = self.div(g, b)?;
                    let ga = self.reduce_to_parent(da_raw, a)?;
                    self.accumulate(a, ga)?;
                    // d(a/b)/db = −a/b² = −out/b
                    let gout = self.mul(g, NodeId(id))?;
                    let over_b = self.div(gout, b)?;
                    let neg = self.neg(over_b)?;
                    let gb = self.reduce_to_parent(neg, b)?;
                    self.accumulate(b, gb)?;
                }
                Op::Neg(a) => {
                    let ga = self.neg(g)?;
                    self.accumulate(a, ga)?;
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c)?;
                    self.accumulate(a, ga)?;
                }
                Op::AddScalar(a, _) => {
                    self.accumulate(a, g)?;
                }
                Op::Matmul(a, b) => {
                    let ga = self.matmul_nt(g, b)?;
                    self.accumulate(a, ga)?;
                    let gb = self.matmul_tn(a, g)?;
                    self.accumulate(b, gb)?;
                }
                Op::MatmulNT(a, b) => {
                    let ga = self.matmul(g, b)?;
                    self.accumulate(a, ga)?;
                    let gb = self.matmul_tn(g, a)?;
                    self.accumulate(b, gb)?;
                }
                Op::MatmulTN(a, b) => {
                    let ga = self.matmul_nt(b, g)?;
                    self.accumulate(a, ga)?;
                    let gb = self.matmul(a, g)?;
                    self.accumulate(b, gb)?;
                }
                Op::Broadcast(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.sum_to(g, &shape)?;
                    self.accumulate(a, ga)?;
                }
                Op::SumTo(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.broadcast(g, &shape)?;
                    self.accumulate(a, ga)?;
                }
                Op::Sum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.broadcast(g, &shape)?;
                    self.accumulate(a, ga)?;
                }
                Op::Mean(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let inv = 1.0 / self.value(a).numel() as f64;
                    let gs = self.scale(g, inv)?;
                    let ga = self.broadcast(gs, &shape)?;
                    self.accumulate(a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, NodeId(id))?;
                    self.accumulate(a, ga)?;
                }
                Op::Log(a) => {
                    let ga = self.div(g, a)?;
                    self.accumulate(a, ga)?;
                }
                Op::Tanh(a) => {
                    // 1 − tanh²
                    let sq = self.square(NodeId(id))?;
                    let nsq = self.neg(sq)?;
                    let one_m = self.add_scalar(nsq, 1.0)?;
                    let ga = self.mul(g, one_m)?;
                    self.accumulate(a, ga)?;
                }
                Op::Sigmoid(a) => {
                    // σ(1−σ)
                    let nout = self.neg(NodeId(id))?;
                    let one_m = self.add_scalar(nout, 1.0)?;
                    let d = self.mul(NodeId(id), one_m)?;
                    let ga = self.mul(g, d)?;
                    self.accumulate(a, ga)?;
                }
                Op::Relu(a) => {
                    // subgradient: 0 at the kink
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    let ga = self.mul(g, m)?;
                    self.accumulate(a, ga)?;
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(a)?;
                    let ga = self.mul(g, s)?;
                    self.accumulate(a, ga)?;
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0)?;
                    let ga = self.mul(g, two_a)?;
                    self.accumulate(a, ga)?;
                }
                Op::Concat(parts) => {
                    let mut off = 0usize;
                    for p in parts {
                        let w = self.value(p).last_dim();
                        let gp = self.slice(g, off, w)?;
                        // restore rank-1 parents' shape
                        let pshape = self.value(p).shape().to_vec();
                        let gp = if self.value(gp).shape() != pshape.as_slice() {
                            self.reshape(gp, &pshape)?
                        } else {
                            gp
                        };
                        self.accumulate(p, gp)?;
                        off += w;
                    }
                }
                Op::Slice { src, start, len: _ } => {
                    let total = self.value(src).last_dim();
                    let gs = self.pad(g, total, start)?;
                    let sshape = self.value(src).shape().to_vec();
                    let gs = if self.value(gs).shape() != sshape.as_slice() {
                        self.reshape(gs, &sshape)?
                    } else {
                        gs
                    };
                    self.accumulate(src, gs)?;
                }
                Op::Pad {
                    src,
                    total: _,
                    start,
                } => {
                    let len = self.value(src).last_dim();
                    let gs = self.slice(g, start, len)?;
                    let sshape = self.value(src).shape().to_vec();
                    let gs = if self.value(gs).shape() != sshape.as_slice() {
                        self.reshape(gs, &sshape)?
                    } else {
                        gs
                    };
                    self.accumulate(src, gs)?;
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.reshape(g, &shape)?;
                    self.accumulate(a, ga)?;
                }
            }
        }

        wrt.iter()
            .map(|w| match self.adj_get(*w) {
                Some(id) => Ok(id),
                None => {
                    let shape = self.value(*w).shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    fn adj_get(&self, id: NodeId) -> Option<NodeId> {
        (self.adj_epoch.get(id.0) == Some(&self.epoch)).then(|| self.adj_val[id.0])
    }

    fn adj_set(&mut self, id: NodeId, adjoint: NodeId) {
        self.adj_val[id.0] = adjoint;
        self.adj_epoch[id.0] = self.epoch;
    }

    /// Reduce an adjoint to the parent's shape when broadcasting widened it.
    fn reduce_to_parent(&mut self, g: NodeId, parent: NodeId) -> Result<NodeId> {
        let pshape = self.value(parent).shape().to_vec();
        if self.value(g).shape() == pshape.as_slice() {
            Ok(g)
        } else {
            self.sum_to(g, &pshape)
        }
    }

    fn accumulate(&mut self, parent: NodeId, contrib: NodeId) -> Result<()> {
        let next = match self.adj_get(parent) {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        };
        self.adj_set(parent, next);
        Ok(())
    }
}

/// Central-difference gradient oracle:
/// (f(θ+h·e_d) − f(θ−h·e_d)) / (2h) per coordinate. Depends only on forward
/// evaluation, never on the tape's backward pass.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    theta: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be > 0".into()));
    }
    let mut out = Vec::with_capacity(theta.numel());
    let mut probe = theta.clone();
    for d in 0..theta.numel() {
        let orig = probe.data()[d];
        probe.data_mut()[d] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[d] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[d] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_grad",
            });
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(theta.shape().to_vec(), out)
}

/// ‖a−b‖ / max(1e-8, ‖a‖+‖b‖) — the relative error used by every gradcheck.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / f64::max(1e-8, norm(a) + norm(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn forward_matmul_example() {
        let mut tape = Tape::new(false);
        let a = tape.input(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.input(Tensor::matrix(&[vec![1.0], vec![1.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn forward_identities() {
        let mut tape = Tape::new(false);
        let x = tape.input(t1(&[1.5, -2.0]));
        let z = tape.constant(Tensor::zeros(&[2]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s).data(), &[1.5, -2.0]);
        let th = tape.tanh(z).unwrap();
        assert_eq!(tape.value(th).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        // d/dx Σ x∘x at [1,2,3] = [2,4,6]
        let mut tape = Tape::new(false);
        let x = tape.input(t1(&[1.0, 2.0, 3.0]));
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        let g = tape.backward_values(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
        // grad-slot filled, tape length unchanged by value-mode backward
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(tape.len(), 3);
    }

    #[test]
    fn backward_unreachable_leaf_is_zero() {
        let mut tape = Tape::new(false);
        let x = tape.input(t1(&[1.0, 2.0]));
        let y = tape.input(t1(&[3.0]));
        let s = tape.sum(y).unwrap();
        let g = tape.backward_values(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert_eq!(g[0].shape(), &[2]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new(false);
        let x = tape.input(t1(&[1.0, 2.0]));
        assert!(tape.backward_values(x, &[x]).is_err());
    }

    #[test]
    fn second_derivative_of_cube() {
        // d²/dx² x³ at 2 = 12, via two backward passes
        let mut tape = Tape::new(true);
        let x = tape.input(Tensor::scalar(2.0));
        let x2 = tape.square(x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let g = tape.backward_nodes(x3, &[x]).unwrap()[0];
        assert_eq!(tape.value(g).data(), &[12.0]); // 3x² = 12
        let gg = tape.backward_values(g, &[x]).unwrap();
        assert_eq!(gg[0].data(), &[12.0]); // 6x = 12
    }

    #[test]
    fn gaussian_log_density_closed_forms() {
        let mut tape = Tape::new(false);
        let x = tape.constant(Tensor::scalar(0.0));
        let mu = tape.input(Tensor::scalar(0.0));
        let sg = tape.input(Tensor::scalar(1.0));
        let ld = tape.gaussian_log_density(x, mu, sg).unwrap();
        assert!((tape.value(ld).data()[0] - (-0.9189385332046727)).abs() < 1e-10);

        let x1 = tape.constant(Tensor::scalar(1.0));
        let ld1 = tape.gaussian_log_density(x1, mu, sg).unwrap();
        assert!((tape.value(ld1).data()[0] - (-1.4189385332046727)).abs() < 1e-10);

        // x = μ, arbitrary σ → −½ log(2πσ²), and broadcasting over a batch
        let xs = tape.constant(t1(&[0.7, 0.7, 0.7]));
        let mu7 = tape.input(Tensor::scalar(0.7));
        let s3 = tape.input(Tensor::scalar(3.0));
        let ld3 = tape.gaussian_log_density(xs, mu7, s3).unwrap();
        let expect = 3.0 * (-0.5 * (2.0 * std::f64::consts::PI * 9.0).ln());
        assert!((tape.value(ld3).data()[0] - expect).abs() < 1e-10);

        // σ ≤ 0 → domain error
        let bad = tape.input(Tensor::scalar(0.0));
        assert!(matches!(
            tape.gaussian_log_density(x, mu, bad),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn gaussian_kl_closed_forms() {
        let mut tape = Tape::new(false);
        let mu0 = tape.input(t1(&[0.0, 0.0]));
        let sg1 = tape.input(t1(&[1.0, 1.0]));
        let kl = tape.gaussian_kl_to_standard(mu0, sg1).unwrap();
        assert_eq!(tape.value(kl).data()[0], 0.0);

        let mu1 = tape.input(t1(&[1.0]));
        let s1 = tape.input(t1(&[1.0]));
        let kl1 = tape.gaussian_kl_to_standard(mu1, s1).unwrap();
        assert!((tape.value(kl1).data()[0] - 0.5).abs() < 1e-10);

        let muz = tape.input(t1(&[0.0]));
        let s2 = tape.input(t1(&[2.0]));
        let kl2 = tape.gaussian_kl_to_standard(muz, s2).unwrap();
        assert!((tape.value(kl2).data()[0] - 0.8068528194400547).abs() < 1e-10);

        let s_bad = tape.input(t1(&[-1.0]));
        assert!(matches!(
            tape.gaussian_kl_to_standard(muz, s_bad),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn finite_difference_examples() {
        // f(θ)=θ² at 3 → 6
        let mut f = |t: &Tensor| Ok(t.data()[0] * t.data()[0]);
        let g = finite_difference_grad(&mut f, &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
        // f(θ)=sin θ at 0 → 1
        let mut f = |t: &Tensor| Ok(t.data()[0].sin());
        let g = finite_difference_grad(&mut f, &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        // constant → zeros
        let mut f = |_: &Tensor| Ok(42.0);
        let g = finite_difference_grad(&mut f, &t1(&[1.0, 2.0]), 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn nan_policy_names_the_op() {
        let mut tape = Tape::new(false);
        let x = tape.input(Tensor::scalar(-1.0));
        match tape.log(x) {
            Err(Error::Domain { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected domain error, got {other:?}"),
        }
        let big = tape.input(Tensor::scalar(1e308));
        let big2 = tape.input(Tensor::scalar(1e308));
        match tape.add(big, big2) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "add"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        let z = tape.input(Tensor::scalar(0.0));
        let one = tape.input(Tensor::scalar(1.0));
        assert!(matches!(
            tape.div(one, z),
            Err(Error::NonFinite { op: "div" })
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new(false);
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 2]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn linearity_of_gradients() {
        // grad(a·f + b·g) = a·grad f + b·grad g to 1e-12 on the same tape
        let (a, b) = (2.5f64, -1.25f64);
        let x0 = t1(&[0.3, -0.7, 1.1]);

        let mut tape = Tape::new(false);
        let x = tape.input(x0.clone());
        let xx = tape.mul(x, x).unwrap();
        let f = tape.sum(xx).unwrap(); // f = Σx²
        let tx = tape.tanh(x).unwrap();
        let g = tape.sum(tx).unwrap(); // g = Σ tanh x
        let fa = tape.scale(f, a).unwrap();
        let gb = tape.scale(g, b).unwrap();
        let combo = tape.add(fa, gb).unwrap();

        let gf = tape.backward_values(f, &[x]).unwrap().remove(0);
        let gg = tape.backward_values(g, &[x]).unwrap().remove(0);
        let gc = tape.backward_values(combo, &[x]).unwrap().remove(0);
        for i in 0..3 {
            let lin = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn node_and_value_backward_are_bitwise_equal() {
        let build = |tape: &mut Tape| -> (NodeId, NodeId) {
            let x = tape.input(t1(&[0.4, -1.3, 2.2, 0.9]));
            let sp = tape.softplus(x).unwrap();
            let sg = tape.sigmoid(sp).unwrap();
            let e = tape.exp(sg).unwrap();
            let l = tape.log(e).unwrap();
            let m = tape.mean(l).unwrap();
            (m, x)
        };
        let mut t_ho = Tape::new(true);
        let (root, x) = build(&mut t_ho);
        let gn = t_ho.backward_nodes(root, &[x]).unwrap()[0];
        let node_grad = t_ho.value(gn).clone();

        let mut t_val = Tape::new(false);
        let (root, x) = build(&mut t_val);
        let val_grad = t_val.backward_values(root, &[x]).unwrap().remove(0);

        assert_eq!(node_grad.data(), val_grad.data());
    }

    #[test]
    fn higher_order_consistency_on_polynomial() {
        // p(x) = Σ (x³ − 2x²): check d²p via double backward against
        // finite differences of the first backward.
        let x0 = t1(&[0.8, -0.5, 1.7]);
        let first_grad = |pt: &Tensor| -> Tensor {
            let mut tape = Tape::new(false);
            let x = tape.input(pt.clone());
            let x2 = tape.square(x).unwrap();
            let x3 = tape.mul(x2, x).unwrap();
            let two_x2 = tape.scale(x2, 2.0).unwrap();
            let p = tape.sub(x3, two_x2).unwrap();
            let s = tape.sum(p).unwrap();
            tape.backward_values(s, &[x]).unwrap().remove(0)
        };

        // analytic-by-tape second derivative
        let mut tape = Tape::new(true);
        let x = tape.input(x0.clone());
        let x2 = tape.square(x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let two_x2 = tape.scale(x2, 2.0).unwrap();
        let p = tape.sub(x3, two_x2).unwrap();
        let s = tape.sum(p).unwrap();
        let g1 = tape.backward_nodes(s, &[x]).unwrap()[0];
        let g1_sum = tape.sum(g1).unwrap();
        let g2 = tape.backward_values(g1_sum, &[x]).unwrap().remove(0);

        // FD of the first backward, coordinate by coordinate
        let h = 1e-5;
        for d in 0..3 {
            let mut pp = x0.clone();
            pp.data_mut()[d] += h;
            let mut pm = x0.clone();
            pm.data_mut()[d] -= h;
            let fd: f64 = (0..3)
                .map(|j| (first_grad(&pp).data()[j] - first_grad(&pm).data()[j]) / (2.0 * h))
                .sum();
            let rel = (g2.data()[d] - fd).abs() / f64::max(1e-8, g2.data()[d].abs() + fd.abs());
            assert!(rel < 1e-4, "dim {d}: {} vs {}", g2.data()[d], fd);
        }
    }

    #[test]
    fn relu_subgradient_zero_at_kink() {
        let mut tape = Tape::new(false);
        let x = tape.input(t1(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward_values(s, &[x]).unwrap().remove(0);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_gradcheck_roundtrip() {
        // scalar loss of broadcast+mul: d/db Σ (B·w) where B = broadcast(b)
        let mut tape = Tape::new(false);
        let b = tape.input(t1(&[2.0, -1.0]));
        let w = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let bb = tape.broadcast(b, &[3, 2]).unwrap();
        let prod = tape.mul(bb, w).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = tape.backward_values(s, &[b]).unwrap().remove(0);
        assert_eq!(g.data(), &[9.0, 12.0]); // column sums of w
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape = Tape::new(false);
        let x = tape.input(Tensor::scalar(3.0));
        let sq = tape.square(x).unwrap();
        let d = tape.detach(sq);
        let y = tape.mul(d, x).unwrap(); // y = const(9)·x
        let g = tape.backward_values(y, &[x]).unwrap().remove(0);
        assert_eq!(g.data(), &[9.0]);
    }
}

// temp instrumentation — remove before ship
pub mod debug_stats {
    use std::cell::RefCell;
    use std::collections::BTreeMap;
    thread_local! {
        static STATS: RefCell<BTreeMap<&'static str, (u64, usize)>> =
            RefCell::new(BTreeMap::new());
    }
    pub fn record(name: &'static str, bytes: usize) {
        STATS.with(|s| {
            let mut m = s.borrow_mut();
            let e = m.entry(name).or_insert((0, 0));
            e.0 += 1;
            e.1 += bytes;
        });
    }
    pub fn snapshot() -> BTreeMap<&'static str, (u64, usize)> {
        STATS.with(|s| s.borrow().clone())
    }
}
