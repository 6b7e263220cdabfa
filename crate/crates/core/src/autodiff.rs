//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! Nodes are appended in execution order, so node order is a topological
//! order. `backward` records its own computation as ordinary nodes in the same
//! graph, which means a gradient can itself be differentiated: an inner
//! parameter update built from gradient nodes is just more graph.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{apply_primitive, gelu_constants, Array, Prim};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Source {
    Param(String),
    Constant,
    Op(Prim, Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    source: Source,
    value: Array,
    /// True when the node depends on some parameter leaf.
    requires_grad: bool,
}

/// Map from leaf name to gradient, one entry per requested leaf.
pub type GradMap = BTreeMap<String, Array>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Differentiable named leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Array) -> Var {
        self.push(Source::Param(name.into()), value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(Source::Constant, value, false)
    }

    fn push(&mut self, source: Source, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node { source, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of a parameter leaf.
    pub fn leaf_name(&self, v: Var) -> Option<&str> {
        match &self.nodes[v.0].source {
            Source::Param(n) => Some(n),
            _ => None,
        }
    }

    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.source, Source::Param(p) if p == name))
            .map(Var)
    }

    /// Records a primitive application.
    pub fn apply(&mut self, prim: Prim, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Array> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            apply_primitive(&prim, &vals)?
        };
        let requires_grad =
            !matches!(prim, Prim::Step) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Source::Op(prim, inputs.to_vec()), value, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Prim::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Prim::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Prim::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Prim::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Prim::AddScalar(c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Relu, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Gelu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Tanh, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::SoftmaxLastDim, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Prim::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Prim::EmbedLookup { ids: ids.into() }, &[table])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Prim::Concat { axis }, xs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Prim::Slice { axis, start, end }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Prim::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::TransposeLast2, &[a])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(Prim::CrossEntropyWithLogits { targets: targets.into() }, &[logits])
    }

    pub fn mask_fill(&mut self, a: Var, mask: Arc<[bool]>, value: f64) -> Result<Var> {
        self.apply(Prim::MaskFill { mask, value }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Mean, &[a])
    }

    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(Prim::SumTo { shape: shape.to_vec() }, &[a])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(Prim::BroadcastTo { shape: shape.to_vec() }, &[a])
    }

    /// Mean over the last axis, keeping it as extent 1.
    fn mean_last_keep(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let mut reduced = shape;
        *reduced.last_mut().unwrap() = 1;
        let s = self.sum_to(a, &reduced)?;
        self.scale(s, 1.0 / d as f64)
    }

    /// Gradients of the scalar `output` with respect to `wrt`, as graph nodes.
    ///
    /// The returned nodes are differentiable, so calling `backward` again on
    /// an expression built from them yields second-order terms. Nodes in
    /// `wrt` that do not influence `output` get an all-zero constant.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out_shape = self.shape(output).to_vec();
        if self.value(output).len() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let end = output.0 + 1;
        // Nodes that both depend on a wrt node and lead to the output.
        let mut on_path = vec![false; end];
        for v in wrt {
            if v.0 < end {
                on_path[v.0] = true;
            }
        }
        for i in 0..end {
            if on_path[i] {
                continue;
            }
            if let Source::Op(_, inputs) = &self.nodes[i].source {
                on_path[i] = self.nodes[i].requires_grad && inputs.iter().any(|v| on_path[v.0]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; end];
        if on_path[output.0] {
            grads[output.0] = Some(self.constant(Array::ones(&out_shape)));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            let (prim, inputs) = match &self.nodes[i].source {
                Source::Op(p, ins) => (p.clone(), ins.clone()),
                _ => continue,
            };
            let needed: Vec<bool> = inputs.iter().map(|v| on_path[v.0]).collect();
            if !needed.iter().any(|&n| n) {
                continue;
            }
            let input_grads = self.vjp(&prim, &inputs, Var(i), g, &needed)?;
            for ((inp, ig), need) in inputs.iter().zip(input_grads).zip(needed) {
                let Some(ig) = ig else { continue };
                if !need {
                    continue;
                }
                grads[inp.0] = Some(match grads[inp.0] {
                    None => ig,
                    Some(prev) => self.add(prev, ig)?,
                });
            }
        }

        wrt.iter()
            .map(|&v| {
                let g = if v.0 < end { grads[v.0] } else { None };
                let g = match g {
                    Some(g) => g,
                    None => {
                        let shape = self.shape(v).to_vec();
                        self.constant(Array::zeros(&shape))
                    }
                };
                if !self.value(g).is_finite() {
                    return Err(Error::NonFinite("backward".into()));
                }
                Ok(g)
            })
            .collect()
    }

    /// Gradients of `output` for the named parameter leaves.
    pub fn grad_map(&mut self, output: Var, names: &[&str]) -> Result<GradMap> {
        let leaves = names
            .iter()
            .map(|n| self.leaf(n).ok_or_else(|| Error::MissingParam(n.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let grads = self.backward(output, &leaves)?;
        Ok(names
            .iter()
            .zip(grads)
            .map(|(n, g)| (n.to_string(), self.value(g).clone()))
            .collect())
    }

    /// Vector-Jacobian products of one node, expressed as new graph nodes.
    fn vjp(
        &mut self,
        prim: &Prim,
        inputs: &[Var],
        out: Var,
        g: Var,
        needed: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let x = inputs[0];
        let xs = self.shape(x).to_vec();
        Ok(match prim {
            Prim::MatMul => {
                let b = inputs[1];
                let ga = if needed[0] {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let gb = if needed[1] {
                    let at = self.transpose(x)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Prim::Add => {
                let bs = self.shape(inputs[1]).to_vec();
                let gb = if needed[1] { Some(self.sum_to(g, &bs)?) } else { None };
                vec![Some(g), gb]
            }
            Prim::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bs = self.shape(b).to_vec();
                let ga = if needed[0] { Some(self.mul(g, b)?) } else { None };
                let gb = if needed[1] {
                    let t = self.mul(g, a)?;
                    Some(self.sum_to(t, &bs)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Prim::Scale(c) => vec![Some(self.scale(g, *c)?)],
            Prim::AddScalar(_) => vec![Some(g)],
            Prim::Relu => {
                let step = self.apply(Prim::Step, &[x])?;
                vec![Some(self.mul(g, step)?)]
            }
            Prim::Step => vec![None],
            Prim::Gelu => {
                let d = self.gelu_derivative(x)?;
                vec![Some(self.mul(g, d)?)]
            }
            Prim::Tanh => {
                // d tanh = 1 - y^2
                let y2 = self.mul(out, out)?;
                let ny2 = self.scale(y2, -1.0)?;
                let d = self.add_scalar(ny2, 1.0)?;
                vec![Some(self.mul(g, d)?)]
            }
            Prim::Rsqrt => {
                // d x^{-1/2} = -1/2 y^3
                let y2 = self.mul(out, out)?;
                let y3 = self.mul(y2, out)?;
                let d = self.scale(y3, -0.5)?;
                vec![Some(self.mul(g, d)?)]
            }
            Prim::SoftmaxLastDim => {
                // y * (g - sum(g * y))
                let gy = self.mul(g, out)?;
                let mut reduced = xs.clone();
                *reduced.last_mut().unwrap() = 1;
                let s = self.sum_to(gy, &reduced)?;
                let centered = self.sub(g, s)?;
                vec![Some(self.mul(out, centered)?)]
            }
            Prim::LayerNorm { eps } => self.layer_norm_vjp(inputs, g, *eps, needed)?,
            Prim::EmbedLookup { ids } => {
                let rows = xs[0];
                vec![Some(self.apply(Prim::ScatterRows { ids: ids.clone(), rows }, &[g])?)]
            }
            Prim::ScatterRows { ids, .. } => {
                vec![Some(self.apply(Prim::EmbedLookup { ids: ids.clone() }, &[g])?)]
            }
            Prim::Concat { axis } => {
                let mut start = 0;
                let mut out_grads = Vec::with_capacity(inputs.len());
                for (inp, &need) in inputs.iter().zip(needed) {
                    let len = self.shape(*inp)[*axis];
                    out_grads.push(if need {
                        Some(self.slice(g, *axis, start, start + len)?)
                    } else {
                        None
                    });
                    start += len;
                }
                out_grads
            }
            Prim::Slice { axis, start, .. } => {
                let full = xs[*axis];
                vec![Some(self.apply(Prim::PadSlice { axis: *axis, start: *start, full }, &[g])?)]
            }
            Prim::PadSlice { axis, start, .. } => {
                let len = xs[*axis];
                vec![Some(self.slice(g, *axis, *start, start + len)?)]
            }
            Prim::Reshape { .. } => vec![Some(self.reshape(g, &xs)?)],
            Prim::TransposeLast2 => vec![Some(self.transpose(g)?)],
            Prim::CrossEntropyWithLogits { targets } => {
                // (softmax(logits) - onehot) * g[:, None]
                let (n, v) = (xs[0], xs[1]);
                let mut onehot = vec![0.0; n * v];
                for (r, &t) in targets.iter().enumerate() {
                    onehot[r * v + t] = 1.0;
                }
                let onehot = self.constant(Array::new(vec![n, v], onehot)?);
                let p = self.softmax(x)?;
                let diff = self.sub(p, onehot)?;
                let gcol = self.reshape(g, &[n, 1])?;
                vec![Some(self.mul(diff, gcol)?)]
            }
            Prim::MaskFill { mask, .. } => {
                vec![Some(self.mask_fill(g, mask.clone(), 0.0)?)]
            }
            Prim::Sum => vec![Some(self.broadcast_to(g, &xs)?)],
            Prim::Mean => {
                let n = self.value(x).len();
                let b = self.broadcast_to(g, &xs)?;
                vec![Some(self.scale(b, 1.0 / n as f64)?)]
            }
            Prim::SumTo { .. } => vec![Some(self.broadcast_to(g, &xs)?)],
            Prim::BroadcastTo { .. } => vec![Some(self.sum_to(g, &xs)?)],
        })
    }

    /// d/dx of the tanh-form GELU, built from differentiable primitives.
    fn gelu_derivative(&mut self, x: Var) -> Result<Var> {
        let (c, k) = gelu_constants();
        // u = c (x + k x^3), t = tanh(u)
        // gelu'(x) = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3k x^2)
        let x2 = self.mul(x, x)?;
        let x3 = self.mul(x2, x)?;
        let kx3 = self.scale(x3, k)?;
        let inner = self.add(x, kx3)?;
        let u = self.scale(inner, c)?;
        let t = self.tanh(u)?;
        let half_one_plus_t = {
            let s = self.add_scalar(t, 1.0)?;
            self.scale(s, 0.5)?
        };
        let t2 = self.mul(t, t)?;
        let sech2 = {
            let n = self.scale(t2, -1.0)?;
            self.add_scalar(n, 1.0)?
        };
        let du = {
            let s = self.scale(x2, 3.0 * k)?;
            let s = self.add_scalar(s, 1.0)?;
            self.scale(s, 0.5 * c)?
        };
        let xs = self.mul(x, sech2)?;
        let right = self.mul(xs, du)?;
        self.add(half_one_plus_t, right)
    }

    fn layer_norm_vjp(
        &mut self,
        inputs: &[Var],
        g: Var,
        eps: f64,
        needed: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let d = *self.shape(x).last().unwrap();
        // Recompute the normalized input differentiably.
        let mu = self.mean_last_keep(x)?;
        let xc = self.sub(x, mu)?;
        let sq = self.mul(xc, xc)?;
        let var = self.mean_last_keep(sq)?;
        let var_eps = self.add_scalar(var, eps)?;
        let rstd = self.apply(Prim::Rsqrt, &[var_eps])?;
        let xhat = self.mul(xc, rstd)?;

        let gx = if needed[0] {
            let gxhat = self.mul(g, gain)?;
            let m1 = self.mean_last_keep(gxhat)?;
            let gx_xhat = self.mul(gxhat, xhat)?;
            let m2 = self.mean_last_keep(gx_xhat)?;
            let t = self.sub(gxhat, m1)?;
            let xm2 = self.mul(xhat, m2)?;
            let t = self.sub(t, xm2)?;
            Some(self.mul(t, rstd)?)
        } else {
            None
        };
        let ggain = if needed[1] {
            let t = self.mul(g, xhat)?;
            Some(self.sum_to(t, &[d])?)
        } else {
            None
        };
        let gbias = if needed[2] { Some(self.sum_to(g, &[d])?) } else { None };
        Ok(vec![gx, ggain, gbias])
    }

    /// Re-evaluates nodes `0..=output` with some leaf values replaced.
    /// Returns the recomputed output value.
    pub fn replay(&self, output: Var, overrides: &HashMap<Var, Array>) -> Result<Array> {
        let mut values: Vec<Option<Array>> = vec![None; output.0 + 1];
        for i in 0..=output.0 {
            let node = &self.nodes[i];
            let v = match &node.source {
                Source::Op(prim, inputs) => {
                    let vals: Vec<&Array> =
                        inputs.iter().map(|v| values[v.0].as_ref().unwrap()).collect();
                    apply_primitive(prim, &vals)?
                }
                _ => overrides.get(&Var(i)).cloned().unwrap_or_else(|| node.value.clone()),
            };
            values[i] = Some(v);
        }
        Ok(values.pop().flatten().unwrap())
    }
}
