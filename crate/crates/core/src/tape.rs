//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each node stores its forward
//! value, the ids of its inputs (always earlier nodes) and a backward rule.
//! Rules normally implement the true derivative of the forward map; nodes
//! created through [`Tape::custom_grad`] may substitute any other rule, which
//! is how straight-through estimators are injected.

use std::collections::BTreeMap;

use crate::error::{DmpError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub upstream: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Which inputs actually need a gradient.
    pub needs: &'a [bool],
}

pub(crate) type BackwardRule = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: String,
    value: Tensor,
    inputs: Vec<NodeId>,
    rule: Option<BackwardRule>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Scale(f64),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node; zeros when the node does not reach the loss.
    pub fn wrt(&self, node: NodeId) -> Tensor {
        self.nodes[node.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node.0]))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// How a binary elementwise op lines up its operands.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Right operand repeats along the left operand's leading axes.
    Right,
    Left,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Broadcast::Right)
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(Broadcast::Left)
    } else if b.iter().product::<usize>() == 1 && b.len() == 1 {
        Ok(Broadcast::Right)
    } else if a.iter().product::<usize>() == 1 && a.len() == 1 {
        Ok(Broadcast::Left)
    } else {
        Err(DmpError::shape(format!(
            "operands {a:?} and {b:?} are neither equal nor broadcastable along leading axes"
        )))
    }
}

/// Sum `g` down to `len` values by folding repeated leading blocks.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let mut out = vec![0.0; len];
    for (i, v) in g.data().iter().enumerate() {
        out[i % len] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape is consistent")
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].op
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// First node (in recording order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (NodeId(i), n.op.as_str()))
    }

    pub(crate) fn push(
        &mut self,
        op: impl Into<String>,
        value: Tensor,
        inputs: Vec<NodeId>,
        rule: Option<BackwardRule>,
    ) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        let requires_grad = rule.is_some() && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op: op.into(),
            value,
            inputs,
            rule,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (gradients w.r.t. it are reported by `backward`).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: "input".into(),
            value,
            inputs: vec![],
            rule: None,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never needs a gradient (data, masks, running statistics).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: "constant".into(),
            value,
            inputs: vec![],
            rule: None,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a registered parameter. Repeated calls return the same node so
    /// gradients from every use accumulate into one tensor.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            op: format!("param:{}", store.name(id)),
            value: store.get(id).clone(),
            inputs: vec![],
            rule: None,
            requires_grad: true,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.insert(id, node);
        node
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ----------------------------------------------------------------------
    // elementwise

    pub fn elementwise(&mut self, op: ElementwiseOp, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Sigmoid, None) => self.sigmoid(a),
            (ElementwiseOp::Tanh, None) => self.tanh(a),
            (ElementwiseOp::Relu, None) => self.relu(a),
            (ElementwiseOp::Abs, None) => self.abs(a),
            (ElementwiseOp::Scale(s), None) => self.scale(a, s),
            (op, _) => Err(DmpError::InvalidArgument(format!("wrong operand count for {op:?}"))),
        }
    }

    fn binary(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: fn(f64, f64) -> f64,
        // partial derivatives (d/da, d/db) at (a, b)
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(va.shape(), vb.shape())?;
        let (big, na, nb) = match kind {
            Broadcast::Same | Broadcast::Right => (va.shape().to_vec(), va.len(), vb.len()),
            Broadcast::Left => (vb.shape().to_vec(), va.len(), vb.len()),
        };
        let n = na.max(nb);
        let data: Vec<f64> = (0..n).map(|i| f(va.data()[i % na], vb.data()[i % nb])).collect();
        let value = Tensor::new(big, data)?;
        let rule: BackwardRule = Box::new(move |ctx| {
            let (xa, xb) = (ctx.inputs[0], ctx.inputs[1]);
            let (na, nb) = (xa.len(), xb.len());
            let g = ctx.upstream.data();
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for i in 0..g.len() {
                let (da, db) = df(xa.data()[i % na], xb.data()[i % nb]);
                ga[i] = g[i] * da;
                gb[i] = g[i] * db;
            }
            let shape = ctx.upstream.shape().to_vec();
            let ga = Tensor::new(shape.clone(), ga).expect("same shape");
            let gb = Tensor::new(shape, gb).expect("same shape");
            vec![
                ctx.needs[0].then(|| reduce_to(&ga, xa.shape())),
                ctx.needs[1].then(|| reduce_to(&gb, xb.shape())),
            ]
        });
        Ok(self.push(name, value, vec![a, b], Some(rule)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    /// Unary map whose derivative is expressed through input `x` and output `y`.
    fn unary(&mut self, name: &str, a: NodeId, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        let rule: BackwardRule = Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g: Vec<f64> = ctx
                .upstream
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g * df(x[i], y[i]))
                .collect();
            vec![Some(Tensor::new(ctx.output.shape().to_vec(), g).expect("same shape"))]
        });
        self.push(name, value, vec![a], Some(rule))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary("sigmoid", a, sigmoid, |_, y| y * (1.0 - y)))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary("tanh", a, f64::tanh, |_, y| 1.0 - y * y))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary("relu", a, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 }))
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary("abs", a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * s);
        let rule: BackwardRule = Box::new(move |ctx| vec![Some(ctx.upstream.map(|g| g * s))]);
        Ok(self.push("scale", value, vec![a], Some(rule)))
    }

    // ----------------------------------------------------------------------
    // reductions and shape ops

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        let rule: BackwardRule = Box::new(|ctx| {
            let g = ctx.upstream.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        });
        Ok(self.push("sum", value, vec![a], Some(rule)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        let rule: BackwardRule = Box::new(|ctx| {
            vec![Some(
                ctx.upstream
                    .reshape(ctx.inputs[0].shape())
                    .expect("reshape preserves length"),
            )]
        });
        Ok(self.push("reshape", value, vec![a], Some(rule)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        let rule: BackwardRule = Box::new(|ctx| vec![Some(ctx.upstream.transpose().expect("rank 2"))]);
        Ok(self.push("transpose", value, vec![a], Some(rule)))
    }

    /// Concatenate two rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[0] != vb.shape()[0] {
            return Err(DmpError::shape(format!(
                "concat_cols needs rank-2 operands with equal rows, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (rows, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![rows, ca + cb], data)?;
        let rule: BackwardRule = Box::new(move |ctx| {
            let g = ctx.upstream.data();
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for r in 0..rows {
                let row = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            vec![
                Some(Tensor::new(vec![rows, ca], ga).expect("shape")),
                Some(Tensor::new(vec![rows, cb], gb).expect("shape")),
            ]
        });
        Ok(self.push("concat_cols", value, vec![a, b], Some(rule)))
    }

    // ----------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rule: BackwardRule = Box::new(|ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let g = ctx.upstream.data();
            let ga = ctx.needs[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm_bt(g, b.data(), &mut out, m, n, k);
                Tensor::new(vec![m, k], out).expect("shape")
            });
            let gb = ctx.needs[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm_at(a.data(), g, &mut out, k, m, n);
                Tensor::new(vec![k, n], out).expect("shape")
            });
            vec![ga, gb]
        });
        Ok(self.push("matmul", value, vec![a, b], Some(rule)))
    }

    /// Affine map `x·Wᵀ + b` for `x: [batch, p]`, `W: [q, p]`, `b: [q]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 2 || vw.rank() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(DmpError::shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let (batch, p, q) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut out = vec![0.0; batch * q];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [q] {
                return Err(DmpError::shape(format!(
                    "linear: bias {:?} does not match {q} outputs",
                    vb.shape()
                )));
            }
            for r in 0..batch {
                out[r * q..(r + 1) * q].copy_from_slice(vb.data());
            }
        }
        gemm_bt(vx.data(), vw.data(), &mut out, batch, p, q);
        let value = Tensor::new(vec![batch, q], out)?;
        let has_bias = b.is_some();
        let rule: BackwardRule = Box::new(move |ctx| {
            let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.upstream.data();
            let gx = ctx.needs[0].then(|| {
                let mut out = vec![0.0; batch * p];
                gemm(g, w.data(), &mut out, batch, q, p);
                Tensor::new(vec![batch, p], out).expect("shape")
            });
            let gw = ctx.needs[1].then(|| {
                let mut out = vec![0.0; q * p];
                gemm_at(g, x.data(), &mut out, q, batch, p);
                Tensor::new(vec![q, p], out).expect("shape")
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(ctx.needs[2].then(|| reduce_to(ctx.upstream, &[q])));
            }
            grads
        });
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push("linear", value, inputs, Some(rule)))
    }

    // ----------------------------------------------------------------------
    // custom gradients

    /// Record a node whose forward value is `value` and whose backward pass
    /// calls `rule(upstream)` instead of differentiating anything. The rule
    /// must return one gradient per input, each shaped like that input.
    pub fn custom_grad(
        &mut self,
        name: &str,
        value: Tensor,
        inputs: &[NodeId],
        rule: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> NodeId {
        let wrapped: BackwardRule = Box::new(move |ctx| rule(ctx.upstream).into_iter().map(Some).collect());
        self.push(format!("custom:{name}"), value, inputs.to_vec(), Some(wrapped))
    }

    /// Like [`Tape::custom_grad`], but the rule also sees the input values.
    pub fn custom_grad_with_inputs(
        &mut self,
        name: &str,
        value: Tensor,
        inputs: &[NodeId],
        rule: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> NodeId {
        let wrapped: BackwardRule = Box::new(move |ctx| rule(ctx.upstream, ctx.inputs).into_iter().map(Some).collect());
        self.push(format!("custom:{name}"), value, inputs.to_vec(), Some(wrapped))
    }

    // ----------------------------------------------------------------------
    // backward

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DmpError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = &node.rule else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let ctx = BackwardCtx {
                upstream: &upstream,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let input_grads = rule(&ctx);
            if input_grads.len() != node.inputs.len() {
                return Err(DmpError::shape(format!(
                    "backward rule of `{}` returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                let expected = self.nodes[input.0].value.shape();
                if g.shape() != expected {
                    return Err(DmpError::shape(format!(
                        "backward rule of `{}` produced gradient {:?} for input of shape {:?}",
                        node.op,
                        g.shape(),
                        expected
                    )));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }

        let params = self
            .params
            .iter()
            .map(|(&pid, &node)| {
                let g = grads[node.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[node.0].value.shape()));
                (pid, g)
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            nodes: grads,
            shapes,
            params,
        })
    }
}
