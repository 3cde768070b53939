//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in
//! execution order. [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products into the parents of each node, so
//! accumulation order is fixed by recording order. Graphs are built and
//! differentiated by a single thread and dropped afterwards.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{contract, Error, Result};
use crate::ops::activation::{
    gelu_backward, gelu_forward_with_cdf, softmax_channels_backward, softmax_channels_forward,
};
use crate::ops::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use crate::ops::grn::{grn_backward, grn_forward, GrnCache, GrnDivisor};
use crate::ops::loss::{dice_ce_backward, dice_ce_forward, DiceCeCache};
use crate::ops::norm::{instance_norm_backward, instance_norm_forward, InstanceNormCache};
use crate::tensor::{Element, Tensor};

enum Op<T> {
    Leaf,
    Conv3d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        spec: ConvSpec,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: InstanceNormCache<T>,
    },
    Gelu {
        x: usize,
        cdf: Tensor<T>,
    },
    Grn {
        x: usize,
        gamma: usize,
        beta: usize,
        mode: GrnDivisor,
        cache: GrnCache<T>,
    },
    Softmax {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Sum {
        a: usize,
    },
    WeightedSum {
        a: usize,
        weights: Tensor<T>,
    },
    DiceCe {
        logits: usize,
        labels: Tensor<u16>,
        cache: DiceCeCache<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for one forward/backward pass.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    first_non_finite: Cell<Option<usize>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            first_non_finite: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if cfg!(debug_assertions) && self.first_non_finite.get().is_none() && !value.all_finite() {
            self.first_non_finite.set(Some(id));
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// First node whose value contained NaN or ±Inf. Only tracked in
    /// debug builds.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite.get()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `loss`. Returns gradients of every leaf
    /// that requires them.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        contract!(
            std::ptr::eq(loss.graph, self),
            "loss variable belongs to a different graph"
        );
        let nodes = self.nodes.borrow();
        contract!(
            nodes[loss.id].value.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::filled(
            nodes[loss.id].value.shape().to_vec(),
            T::one(),
        ));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut send = |target: usize, t: Tensor<T>| -> Result<()> {
                if target >= id {
                    return Err(Error::Structural(format!(
                        "node {id} depends on later node {target}"
                    )));
                }
                if !nodes[target].requires_grad {
                    return Ok(());
                }
                if t.shape() != nodes[target].value.shape() {
                    return Err(Error::Structural(format!(
                        "gradient shape {:?} does not match node {target} shape {:?}",
                        t.shape(),
                        nodes[target].value.shape()
                    )));
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let need = [
                        nodes[*input].requires_grad,
                        nodes[*weight].requires_grad,
                        bias.is_some_and(|b| nodes[b].requires_grad),
                    ];
                    let cg = conv3d_backward(
                        &nodes[*input].value,
                        &nodes[*weight].value,
                        &g,
                        spec,
                        need,
                    )?;
                    if let Some(t) = cg.input {
                        send(*input, t)?;
                    }
                    if let Some(t) = cg.weight {
                        send(*weight, t)?;
                    }
                    if let (Some(b), Some(t)) = (bias, cg.bias) {
                        send(*b, t)?;
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = instance_norm_backward(cache, &nodes[*gamma].value, &g)?;
                    send(*x, dx)?;
                    send(*gamma, dg)?;
                    send(*beta, db)?;
                }
                Op::Gelu { x, cdf } => send(*x, gelu_backward(&nodes[*x].value, cdf, &g))?,
                Op::Grn {
                    x,
                    gamma,
                    beta,
                    mode,
                    cache,
                } => {
                    let (dx, dg, db) = grn_backward(
                        &nodes[*x].value,
                        &nodes[*gamma].value,
                        cache,
                        *mode,
                        &g,
                    )?;
                    send(*x, dx)?;
                    send(*gamma, dg)?;
                    send(*beta, db)?;
                }
                Op::Softmax { x } => send(*x, softmax_channels_backward(&node.value, &g))?,
                Op::Add { a, b } => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let da = Tensor::from_vec(
                        g.shape().to_vec(),
                        g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    let db = Tensor::from_vec(
                        g.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    send(*a, da)?;
                    send(*b, db)?;
                }
                Op::Scale { a, factor } => send(*a, g.map(|v| v * *factor))?,
                Op::Sum { a } => {
                    let up = g.data()[0];
                    send(*a, Tensor::filled(nodes[*a].value.shape().to_vec(), up))?;
                }
                Op::WeightedSum { a, weights } => {
                    let up = g.data()[0];
                    send(*a, weights.map(|w| w * up))?;
                }
                Op::DiceCe {
                    logits,
                    labels,
                    cache,
                } => send(*logits, dice_ce_backward(cache, labels, g.data()[0]))?,
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing reached it.
    pub fn take_or_zeros(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.grads
            .get_mut(v.id)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        contract!(
            std::ptr::eq(self.graph, other.graph),
            "variables belong to different graphs"
        );
        Ok(())
    }

    fn any_needs(&self, others: &[usize]) -> bool {
        let nodes = self.graph.nodes.borrow();
        nodes[self.id].requires_grad || others.iter().any(|&o| nodes[o].requires_grad)
    }

    pub fn conv3d(
        &self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: &ConvSpec,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&weight)?;
        if let Some(b) = &bias {
            self.same_graph(b)?;
        }
        let out = {
            let nodes = self.graph.nodes.borrow();
            conv3d_forward(
                &nodes[self.id].value,
                &nodes[weight.id].value,
                bias.map(|b| &nodes[b.id].value),
                spec,
            )?
        };
        let mut deps = vec![weight.id];
        deps.extend(bias.map(|b| b.id));
        let rg = self.any_needs(&deps);
        Ok(self.graph.push(
            out,
            Op::Conv3d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                spec: *spec,
            },
            rg,
        ))
    }

    pub fn instance_norm(&self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        self.same_graph(&gamma)?;
        self.same_graph(&beta)?;
        let (out, cache) = {
            let nodes = self.graph.nodes.borrow();
            instance_norm_forward(
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
                eps,
            )?
        };
        let rg = self.any_needs(&[gamma.id, beta.id]);
        Ok(self.graph.push(
            out,
            Op::InstanceNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                cache,
            },
            rg,
        ))
    }

    pub fn gelu(&self) -> Var<'g, T> {
        let (out, cdf) = gelu_forward_with_cdf(&self.value());
        self.graph
            .push(out, Op::Gelu { x: self.id, cdf }, self.requires_grad())
    }

    pub fn grn(
        &self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        mode: GrnDivisor,
        eps: f64,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&gamma)?;
        self.same_graph(&beta)?;
        let (out, cache) = {
            let nodes = self.graph.nodes.borrow();
            grn_forward(
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
                mode,
                eps,
            )?
        };
        let rg = self.any_needs(&[gamma.id, beta.id]);
        Ok(self.graph.push(
            out,
            Op::Grn {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mode,
                cache,
            },
            rg,
        ))
    }

    pub fn softmax_channels(&self) -> Result<Var<'g, T>> {
        let out = softmax_channels_forward(&self.value())?;
        Ok(self
            .graph
            .push(out, Op::Softmax { x: self.id }, self.requires_grad()))
    }

    fn zip_with(&self, other: &Var<'g, T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_graph(other)?;
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        contract!(
            a.shape() == b.shape(),
            "elementwise shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        Tensor::from_vec(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.zip_with(&other, |x, y| x + y)?;
        let rg = self.any_needs(&[other.id]);
        Ok(self.graph.push(
            out,
            Op::Add {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.zip_with(&other, |x, y| x * y)?;
        let rg = self.any_needs(&[other.id]);
        Ok(self.graph.push(
            out,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn scale(&self, factor: T) -> Var<'g, T> {
        let out = self.value().map(|v| v * factor);
        self.graph.push(
            out,
            Op::Scale {
                a: self.id,
                factor,
            },
            self.requires_grad(),
        )
    }

    pub fn sum(&self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph
            .push(out, Op::Sum { a: self.id }, self.requires_grad())
    }

    /// `Σ w ⊙ x` with a constant weight tensor of the same shape.
    pub fn weighted_sum(&self, weights: &Tensor<T>) -> Result<Var<'g, T>> {
        let out = {
            let v = self.value();
            contract!(
                v.shape() == weights.shape(),
                "weights shape {:?} does not match {:?}",
                weights.shape(),
                v.shape()
            );
            Tensor::scalar(v.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum())
        };
        Ok(self.graph.push(
            out,
            Op::WeightedSum {
                a: self.id,
                weights: weights.clone(),
            },
            self.requires_grad(),
        ))
    }

    /// Fused soft-Dice + cross-entropy loss against integer labels.
    pub fn dice_ce(&self, labels: &Tensor<u16>) -> Result<Var<'g, T>> {
        let (terms, cache) = dice_ce_forward(&self.value(), labels)?;
        Ok(self.graph.push(
            Tensor::scalar(T::cst(terms.total)),
            Op::DiceCe {
                logits: self.id,
                labels: labels.clone(),
                cache,
            },
            self.requires_grad(),
        ))
    }
}
