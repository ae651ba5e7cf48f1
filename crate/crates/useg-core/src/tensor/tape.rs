//! Define-by-run autodiff tape.
//!
//! Every forward call appends a node holding the computed value, the
//! parent edges, and the attributes needed to replay the operation
//! backward. `backward` consumes the tape, sweeps nodes in reverse
//! insertion order, and returns gradients for the leaves that asked for
//! them. Parents always precede children in the arena, so a single
//! reverse pass visits each node after all of its consumers.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::ops::{self, OpRecord};
use super::{Elem, ParameterStore, Result, Tensor, TensorError};

/// Handle to a node on the tape. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Saved activations and attributes a custom operator carries from its
/// forward pass to its backward pass.
#[derive(Debug, Clone, Default)]
pub struct SavedCtx<T: Elem> {
    pub tensors: Vec<Tensor<T>>,
    pub scalars: Vec<f64>,
    pub ints: Vec<usize>,
}

/// Extension point for fused operators with hand-derived backward
/// kernels. Implementations return, per input, either a gradient tensor
/// of that input's shape or `None` for inputs that receive no gradient.
pub trait CustomOp<T: Elem> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, SavedCtx<T>)>;
    fn backward(
        &self,
        ctx: &SavedCtx<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Record<T: Elem> {
    Leaf,
    Prim(OpRecord),
    Custom {
        op: Rc<dyn CustomOp<T>>,
        ctx: SavedCtx<T>,
    },
}

struct Node<T: Elem> {
    value: Tensor<T>,
    parents: Vec<Var>,
    record: Record<T>,
    needs_grad: bool,
    name: Option<String>,
}

/// Gradients produced by one backward pass, addressable by `Var` or by
/// parameter name.
#[derive(Debug)]
pub struct Gradients<T: Elem> {
    grads: Vec<Option<Tensor<T>>>,
    named: BTreeMap<String, usize>,
}

impl<T: Elem> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` is a leaf that
    /// required grad and was reached by the sweep.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn named(&self, name: &str) -> Result<&Tensor<T>> {
        self.named
            .get(name)
            .and_then(|&i| self.grads[i].as_ref())
            .ok_or_else(|| TensorError::MissingGrad(name.to_string()))
    }

    /// All named gradients, consumed into an owned map for the optimizer.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, idx) in std::mem::take(&mut self.named) {
            if let Some(g) = self.grads[idx].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
    param_cache: BTreeMap<String, Var>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_cache: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Register a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false, None)
    }

    /// Register an input leaf; it participates in the backward pass when
    /// its tensor was marked `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push_leaf(t, rg, None)
    }

    /// Bind a named parameter from the store as a grad-requiring leaf.
    /// Binding the same name twice returns the original node, so every
    /// use of a parameter shares one gradient accumulator.
    pub fn param(&mut self, name: &str, store: &ParameterStore<T>) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push_leaf(t, true, Some(name.to_string()));
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    fn push_leaf(&mut self, t: Tensor<T>, needs_grad: bool, name: Option<String>) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            record: Record::Leaf,
            needs_grad,
            name,
        });
        v
    }

    fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        record: Record<T>,
        op_name: &str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("forward of {op_name}")));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            record,
            needs_grad,
            name: None,
        });
        Ok(v)
    }

    // ── primitive operators ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        self.push_op(out, vec![a, b], Record::Prim(OpRecord::Add), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        self.push_op(out, vec![a, b], Record::Prim(OpRecord::Mul), "mul")
    }

    /// Multiply by a compile-time constant without a second leaf.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(T::from_f64_lossy(c)));
        self.mul(a, k)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_forward(self.value(a), self.value(b))?;
        self.push_op(out, vec![a, b], Record::Prim(OpRecord::MatMul), "matmul")
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push_op(
            out,
            parents,
            Record::Prim(OpRecord::Conv2d { stride, pad }),
            "conv2d",
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::convt2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push_op(
            out,
            parents,
            Record::Prim(OpRecord::ConvTranspose2d { stride, pad }),
            "conv_transpose2d",
        )
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push_op(
            out,
            vec![x, gamma, beta],
            Record::Prim(OpRecord::LayerNorm { eps }),
            "layer_norm",
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax_forward(self.value(x), axis)?;
        self.push_op(
            out,
            vec![x],
            Record::Prim(OpRecord::Softmax { axis }),
            "softmax",
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(ops::silu_scalar);
        self.push_op(out, vec![x], Record::Prim(OpRecord::Silu), "silu")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(ops::softplus_scalar);
        self.push_op(out, vec![x], Record::Prim(OpRecord::Softplus), "softplus")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(ops::sigmoid_scalar);
        self.push_op(out, vec![x], Record::Prim(OpRecord::Sigmoid), "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.push_op(out, vec![x], Record::Prim(OpRecord::Exp), "exp")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::mean_axis_forward(self.value(x), axis)?;
        self.push_op(
            out,
            vec![x],
            Record::Prim(OpRecord::MeanAxis { axis }),
            "mean_axis",
        )
    }

    /// Mean of all elements, producing a `[1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_forward(&tensors, axis)?;
        self.push_op(
            out,
            inputs.to_vec(),
            Record::Prim(OpRecord::Concat { axis }),
            "concat",
        )
    }

    pub fn reverse_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::reverse_axis_forward(self.value(x), axis)?;
        self.push_op(
            out,
            vec![x],
            Record::Prim(OpRecord::ReverseAxis { axis }),
            "reverse_axis",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.value(x).shape().to_vec();
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push_op(
            out,
            vec![x],
            Record::Prim(OpRecord::Reshape { from }),
            "reshape",
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute_forward(self.value(x), axes)?;
        self.push_op(
            out,
            vec![x],
            Record::Prim(OpRecord::Permute {
                axes: axes.to_vec(),
            }),
            "permute",
        )
    }

    /// Row lookup into a 2D table; ids are static attributes, so only the
    /// table receives gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::gather_rows_forward(self.value(table), ids)?;
        self.push_op(
            out,
            vec![table],
            Record::Prim(OpRecord::GatherRows { ids: ids.to_vec() }),
            "gather_rows",
        )
    }

    /// Run a fused operator through the tape.
    pub fn custom(&mut self, op: Rc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let (out, ctx) = op.forward(&tensors)?;
        let name = op.name();
        self.push_op(out, inputs.to_vec(), Record::Custom { op, ctx }, name)
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients of
    /// unreached or grad-free branches are absent rather than zero.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = self.nodes.get(loss.0).ok_or(TensorError::NoGraph)?;
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NotScalar(loss_node.value.shape().to_vec()));
        }
        if !loss_node.needs_grad {
            return Err(TensorError::NoGraph);
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![T::one()],
        )?);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || grads[id].is_none() {
                continue;
            }
            let is_leaf = matches!(self.nodes[id].record, Record::Leaf);
            if is_leaf {
                continue;
            }
            let grad_out = grads[id].take().expect("checked above");
            let node = &self.nodes[id];
            let parent_values: Vec<&Tensor<T>> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let contributions = match &node.record {
                Record::Leaf => unreachable!(),
                Record::Prim(rec) => prim_backward(rec, &parent_values, &node.value, &grad_out)?,
                Record::Custom { op, ctx } => {
                    let g = op.backward(ctx, &parent_values, &node.value, &grad_out)?;
                    if g.len() != node.parents.len() {
                        return Err(TensorError::ShapeMismatch(format!(
                            "custom op {} returned {} gradients for {} inputs",
                            op.name(),
                            g.len(),
                            node.parents.len()
                        )));
                    }
                    g
                }
            };
            let op_name = match &self.nodes[id].record {
                Record::Prim(rec) => rec.kind().name(),
                Record::Custom { op, .. } => op.name(),
                Record::Leaf => unreachable!(),
            };
            let parents = self.nodes[id].parents.clone();
            for (p, contrib) in parents.into_iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                if c.shape() != self.nodes[p.0].value.shape() {
                    return Err(TensorError::ShapeMismatch(format!(
                        "backward of {op_name}: gradient shape {:?} vs input {:?}",
                        c.shape(),
                        self.nodes[p.0].value.shape()
                    )));
                }
                if !c.is_finite() {
                    return Err(TensorError::NonFinite(format!("backward of {op_name}")));
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, &g) in acc.data_mut().iter_mut().zip(c.data().iter()) {
                            *a = *a + g;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }

        let mut named = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                if grads[i].is_some() {
                    named.insert(name.clone(), i);
                }
            }
        }
        Ok(Gradients { grads, named })
    }
}

fn prim_backward<T: Elem>(
    rec: &OpRecord,
    parents: &[&Tensor<T>],
    value: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    Ok(match rec {
        OpRecord::Add => {
            let ga = ops::reduce_to_shape(grad.data(), grad.shape(), parents[0].shape());
            let gb = ops::reduce_to_shape(grad.data(), grad.shape(), parents[1].shape());
            vec![Some(ga), Some(gb)]
        }
        OpRecord::Mul => {
            let gb_full = ops::broadcast_binary(grad, parents[0], |g, a| g * a)?;
            let ga_full = ops::broadcast_binary(grad, parents[1], |g, b| g * b)?;
            let ga = ops::reduce_to_shape(ga_full.data(), ga_full.shape(), parents[0].shape());
            let gb = ops::reduce_to_shape(gb_full.data(), gb_full.shape(), parents[1].shape());
            vec![Some(ga), Some(gb)]
        }
        OpRecord::MatMul => {
            let (ga, gb) = ops::matmul_backward(parents[0], parents[1], grad);
            vec![Some(ga), Some(gb)]
        }
        OpRecord::Conv2d { stride, pad } => {
            let (gx, gw, gb) = ops::conv2d_backward(
                parents[0],
                parents[1],
                parents.len() == 3,
                *stride,
                *pad,
                grad,
            );
            let mut out = vec![Some(gx), Some(gw)];
            if let Some(gb) = gb {
                out.push(Some(gb));
            }
            out
        }
        OpRecord::ConvTranspose2d { stride, pad } => {
            let (gx, gw, gb) = ops::convt2d_backward(
                parents[0],
                parents[1],
                parents.len() == 3,
                *stride,
                *pad,
                grad,
            );
            let mut out = vec![Some(gx), Some(gw)];
            if let Some(gb) = gb {
                out.push(Some(gb));
            }
            out
        }
        OpRecord::LayerNorm { eps } => {
            let (gx, ggamma, gbeta) = ops::layer_norm_backward(parents[0], parents[1], *eps, grad);
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }
        OpRecord::Softmax { axis } => {
            vec![Some(ops::softmax_backward(value, *axis, grad))]
        }
        OpRecord::Silu => {
            let x = parents[0];
            let mut gx = Vec::with_capacity(x.numel());
            for (&xv, &g) in x.data().iter().zip(grad.data().iter()) {
                let s = ops::sigmoid_scalar(xv);
                gx.push(g * s * (T::one() + xv * (T::one() - s)));
            }
            vec![Some(Tensor::from_vec(x.shape().to_vec(), gx)?)]
        }
        OpRecord::Softplus => {
            let x = parents[0];
            let mut gx = Vec::with_capacity(x.numel());
            for (&xv, &g) in x.data().iter().zip(grad.data().iter()) {
                gx.push(g * ops::sigmoid_scalar(xv));
            }
            vec![Some(Tensor::from_vec(x.shape().to_vec(), gx)?)]
        }
        OpRecord::Sigmoid => {
            let mut gx = Vec::with_capacity(value.numel());
            for (&y, &g) in value.data().iter().zip(grad.data().iter()) {
                gx.push(g * y * (T::one() - y));
            }
            vec![Some(Tensor::from_vec(value.shape().to_vec(), gx)?)]
        }
        OpRecord::Exp => {
            let mut gx = Vec::with_capacity(value.numel());
            for (&y, &g) in value.data().iter().zip(grad.data().iter()) {
                gx.push(g * y);
            }
            vec![Some(Tensor::from_vec(value.shape().to_vec(), gx)?)]
        }
        OpRecord::MeanAxis { axis } => {
            vec![Some(ops::mean_axis_backward(
                parents[0].shape(),
                *axis,
                grad,
            ))]
        }
        OpRecord::Concat { axis } => {
            let shapes: Vec<Vec<usize>> = parents.iter().map(|p| p.shape().to_vec()).collect();
            ops::concat_backward(&shapes, *axis, grad)
                .into_iter()
                .map(Some)
                .collect()
        }
        OpRecord::ReverseAxis { axis } => {
            vec![Some(ops::reverse_axis_forward(grad, *axis)?)]
        }
        OpRecord::Reshape { from } => {
            vec![Some(grad.clone().reshaped(from.clone())?)]
        }
        OpRecord::Permute { axes } => {
            vec![Some(ops::permute_forward(
                grad,
                &ops::invert_permutation(axes),
            )?)]
        }
        OpRecord::GatherRows { ids } => {
            vec![Some(ops::gather_rows_backward(
                parents[0].shape(),
                ids,
                grad,
            ))]
        }
    })
}
