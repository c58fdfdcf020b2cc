//! Minimal reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Nodes only
//! ever reference nodes recorded before them, so insertion order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use famamba_core::numerics::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::numerics::ops::{self, ConvSpec};
use crate::numerics::tensor::{Real, Tensor};

/// Inputs handed to a node's backward rule.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

pub(crate) type Grads<T> = Vec<Option<Tensor<T>>>;
type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Grads<T>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Operation recorder. Single-owner: build one per forward/backward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    macs: Cell<u64>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Result of [`Graph::backward`]: one gradient slot per recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            macs: Cell::new(0),
        }
    }

    /// Trainable input; gradients flow into it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push("leaf", Rc::new(value), vec![], true, None)
    }

    /// Input excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push("constant", Rc::new(value), vec![], false, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates performed by recorded convolution, matrix and
    /// scan operations so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    fn push(
        &self,
        op: &'static str,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            parents,
            requires_grad,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an op output. Rejects non-finite values.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&BackwardCtx<'_, T>) -> Result<Grads<T>> + 'static,
    ) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let bw: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(op, Rc::new(value), ids, requires_grad, bw))
    }

    pub fn value(&self, v: Var<'_, T>) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    /// Reverse sweep from a scalar node. The seed gradient is 1.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if let Some(&p) = node.parents.iter().find(|&&p| p >= id) {
                return Err(Error::CyclicTape { node: id, parent: p });
            }
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                grad: &g,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &*nodes[p].value).collect(),
                needs: needs.clone(),
            };
            let parent_grads = bw(&ctx)?;
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                if pg.shape() != nodes[p].value.shape() {
                    return Err(dim_err(
                        "backward",
                        format!(
                            "{} produced gradient {:?} for input {:?}",
                            node.op,
                            pg.shape(),
                            nodes[p].value.shape()
                        ),
                    ));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    #[cfg(test)]
    pub(crate) fn corrupt_parent(&self, node: Var<'_, T>, parent: usize) {
        self.nodes.borrow_mut()[node.id].parents.push(parent);
    }
}

fn need<T>(ctx: &BackwardCtx<'_, T>, i: usize) -> bool {
    ctx.needs.get(i).copied().unwrap_or(false)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_graph(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(dim_err("graph", "operands recorded on different graphs"))
        }
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Self> {
        self.same_graph(&other)?;
        let v = ops::add(&self.value(), &other.value())?;
        self.graph.record("add", v, &[self, other], |c| {
            Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())])
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Self> {
        self.same_graph(&other)?;
        let v = ops::sub(&self.value(), &other.value())?;
        self.graph.record("sub", v, &[self, other], |c| {
            Ok(vec![Some(c.grad.clone()), Some(c.grad.map(|x| -x))])
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Self> {
        self.same_graph(&other)?;
        let v = ops::mul(&self.value(), &other.value())?;
        self.graph.record("mul", v, &[self, other], |c| {
            let ga = if need(c, 0) { Some(c.grad.zip_map(c.inputs[1], |g, b| g * b)?) } else { None };
            let gb = if need(c, 1) { Some(c.grad.zip_map(c.inputs[0], |g, a| g * a)?) } else { None };
            Ok(vec![ga, gb])
        })
    }

    pub fn scale(self, s: T) -> Result<Self> {
        let v = ops::scale(&self.value(), s)?;
        self.graph
            .record("scale", v, &[self], move |c| Ok(vec![Some(c.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(self, s: T) -> Result<Self> {
        let v = self.value().map(|x| x + s).check_finite("add_scalar")?;
        self.graph
            .record("add_scalar", v, &[self], |c| Ok(vec![Some(c.grad.clone())]))
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-T::one())
    }

    pub fn relu(self) -> Result<Self> {
        let v = ops::relu(&self.value());
        self.graph.record("relu", v, &[self], |c| {
            Ok(vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    pub fn silu(self) -> Result<Self> {
        let v = ops::silu(&self.value())?;
        self.graph.record("silu", v, &[self], |c| {
            Ok(vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                let s = ops::sigmoid_scalar(x);
                g * s * (T::one() + x * (T::one() - s))
            })?)])
        })
    }

    pub fn softplus(self) -> Result<Self> {
        let v = ops::softplus(&self.value())?;
        self.graph.record("softplus", v, &[self], |c| {
            Ok(vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * ops::sigmoid_scalar(x))?)])
        })
    }

    pub fn exp(self) -> Result<Self> {
        let v = self.value().map(|x| x.exp()).check_finite("exp")?;
        self.graph.record("exp", v, &[self], |c| {
            Ok(vec![Some(c.grad.zip_map(c.out, |g, y| g * y)?)])
        })
    }

    /// 2D convolution; see [`ops::conv2d`].
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: ConvSpec) -> Result<Self> {
        self.same_graph(&weight)?;
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let v = ops::conv2d(&x, &w, b.as_deref(), spec)?;
        let geo = ops::ConvGeometry::new(x.shape(), w.shape(), spec)?;
        self.graph.add_macs(geo.macs());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.record("conv2d", v, &parents, move |c| {
            let gx = if need(c, 0) {
                Some(ops::conv2d_grad_input(c.inputs[0].shape(), c.inputs[1], c.grad, spec)?)
            } else {
                None
            };
            let mut out = vec![gx];
            if need(c, 1) || need(c, 2) {
                let (gw, gb) = ops::conv2d_grad_weight(c.inputs[0], c.inputs[1].shape(), c.grad, spec)?;
                out.push(Some(gw));
                out.push(Some(gb));
            }
            Ok(out)
        })
    }

    /// Depthwise causal 1D convolution over `[N, C, L]`.
    pub fn causal_conv1d(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Result<Self> {
        let v = ops::causal_conv1d(&self.value(), &weight.value(), &bias.value())?;
        self.graph
            .add_macs((v.numel() * weight.shape()[1]) as u64);
        self.graph.record("causal_conv1d", v, &[self, weight, bias], |c| {
            let (gx, gw, gb) = ops::causal_conv1d_grads(c.inputs[0], c.inputs[1], c.grad)?;
            Ok(vec![Some(gx), Some(gw), Some(gb)])
        })
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Self> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let v = ops::matmul(&a, &b)?;
        self.graph
            .add_macs((a.numel() * b.shape()[1]) as u64);
        self.graph.record("matmul", v, &[self, other], |c| {
            let ga = if need(c, 0) {
                Some(ops::matmul(c.grad, &ops::transpose(c.inputs[1])?)?)
            } else {
                None
            };
            let gb = if need(c, 1) {
                Some(ops::matmul(&ops::transpose(c.inputs[0])?, c.grad)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }

    /// Batched matrix product over rank-3 operands.
    pub fn bmm(self, other: Var<'g, T>) -> Result<Self> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let v = ops::bmm(&a, &b)?;
        self.graph
            .add_macs((a.numel() * b.shape()[2]) as u64);
        self.graph.record("bmm", v, &[self, other], |c| {
            let ga = if need(c, 0) {
                Some(ops::bmm(c.grad, &ops::transpose(c.inputs[1])?)?)
            } else {
                None
            };
            let gb = if need(c, 1) {
                Some(ops::bmm(&ops::transpose(c.inputs[0])?, c.grad)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let v = ops::permute(&self.value(), perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph.record("permute", v, &[self], move |c| {
            Ok(vec![Some(ops::permute(c.grad, &inverse)?)])
        })
    }

    /// Swaps the two trailing axes.
    pub fn transpose(self) -> Result<Self> {
        let r = self.shape().len();
        if r < 2 {
            return Err(dim_err("transpose", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape.to_vec())?;
        self.graph.record("reshape", v, &[self], |c| {
            Ok(vec![Some(c.grad.reshape(c.inputs[0].shape().to_vec())?)])
        })
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no tensors to concatenate"))?;
        for p in parts {
            first.same_graph(p)?;
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
        let v = ops::concat(&refs, axis)?;
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        first.graph.record("concat", v, parts, move |c| {
            let mut start = 0;
            let mut out = Vec::with_capacity(lens.len());
            for (i, &len) in lens.iter().enumerate() {
                out.push(if need(c, i) {
                    Some(ops::slice(c.grad, axis, start, len)?)
                } else {
                    None
                });
                start += len;
            }
            Ok(out)
        })
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let v = ops::slice(&self.value(), axis, start, len)?;
        self.graph.record("slice", v, &[self], move |c| {
            let full = c.inputs[0].shape();
            let (outer, alen, inner) = ops::split_axis(full, axis)?;
            let mut g = vec![T::zero(); c.inputs[0].numel()];
            for o in 0..outer {
                let src = &c.grad.data()[o * len * inner..(o + 1) * len * inner];
                let base = (o * alen + start) * inner;
                g[base..base + len * inner].copy_from_slice(src);
            }
            Ok(vec![Some(Tensor::new(full.to_vec(), g)?)])
        })
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        let v = ops::softmax(&self.value(), axis)?;
        self.graph.record("softmax", v, &[self], move |c| {
            Ok(vec![Some(ops::softmax_grad(c.out, c.grad, axis)?)])
        })
    }

    pub fn avg_pool2d(self, k: usize) -> Result<Self> {
        if k == 1 {
            return Ok(self);
        }
        let v = ops::avg_pool2d(&self.value(), k)?;
        self.graph.record("avg_pool2d", v, &[self], move |c| {
            let up = ops::upsample_nearest2d(c.grad, k)?;
            Ok(vec![Some(up.map(|g| g / T::c((k * k) as f64)))])
        })
    }

    pub fn upsample_nearest2d(self, k: usize) -> Result<Self> {
        let v = ops::upsample_nearest2d(&self.value(), k)?;
        self.graph.record("upsample", v, &[self], move |c| {
            Ok(vec![Some(ops::block_sum2d(c.grad, k)?)])
        })
    }

    /// Reorders the last axis: `out[..., t] = x[..., index[t]]`.
    pub fn gather_last(self, index: Arc<[usize]>) -> Result<Self> {
        let v = ops::gather_last(&self.value(), &index)?;
        self.graph.record("gather_last", v, &[self], move |c| {
            let len = *c.inputs[0].shape().last().expect("rank >= 1");
            Ok(vec![Some(ops::scatter_add_last(c.grad, &index, len)?)])
        })
    }

    pub fn sum(self) -> Result<Self> {
        let v = Tensor::scalar(ops::finite_scalar(self.value().sum(), "sum")?);
        self.graph.record("sum", v, &[self], |c| {
            Ok(vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item()))])
        })
    }

    pub fn mean(self) -> Result<Self> {
        let v = Tensor::scalar(ops::finite_scalar(self.value().mean(), "mean")?);
        self.graph.record("mean", v, &[self], |c| {
            let n = T::c(c.inputs[0].numel() as f64);
            Ok(vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item() / n))])
        })
    }

    /// Element-wise arithmetic mean of equally shaped values.
    pub fn mean_of(parts: &[Var<'g, T>]) -> Result<Self> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| dim_err("mean_of", "no inputs"))?;
        if rest.is_empty() {
            return Ok(*first);
        }
        let mut acc = *first;
        for p in rest {
            acc = acc.add(*p)?;
        }
        acc.scale(T::one() / T::c(parts.len() as f64))
    }
}
