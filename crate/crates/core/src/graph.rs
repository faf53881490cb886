//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its output value
//! and whatever the backward pass needs. [`Graph::backward`] walks the nodes
//! in reverse creation order, which is a valid topological order because
//! nodes can only reference earlier nodes.

use crate::error::{Error, Result};
use crate::ops::{self, GroupStats};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    Silu(Var),
    Add(Var, Var),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    ConcatChannels(Var, Var),
    UpsampleNearest2(Var),
    Attention {
        qkv: Var,
        probs: Vec<T>,
    },
    L1Loss {
        pred: Var,
        target: Tensor<T>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (y, stats) =
            ops::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups)?;
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::silu);
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    /// Adds a per-sample, per-channel bias `[N, C]` to an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.shape().len() != 2 || vx.shape()[..2] != vb.shape()[..] {
            return Err(Error::Shape(format!(
                "channel bias {:?} for input {:?}",
                vb.shape(),
                vx.shape()
            )));
        }
        let spatial: usize = vx.shape()[2..].iter().product();
        let mut y = vx.clone();
        for (chunk, &b) in y.data_mut().chunks_mut(spatial).zip(vb.data()) {
            for v in chunk {
                *v = *v + b;
            }
        }
        Ok(self.push(y, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample_nearest2(self.value(x))?;
        Ok(self.push(y, Op::UpsampleNearest2(x), &[x]))
    }

    pub fn attention(&mut self, qkv: Var) -> Result<Var> {
        let (y, probs) = ops::attention_forward(self.value(qkv))?;
        Ok(self.push(y, Op::Attention { qkv, probs }, &[qkv]))
    }

    /// Attention matrices recorded by an attention node, `[N, P, P]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean absolute error against a constant target; a scalar `[1]` node.
    pub fn l1_loss(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "l1 loss prediction {:?} vs target {:?}",
                vp.shape(),
                target.shape()
            )));
        }
        let total = vp
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t).abs());
        let y = Tensor::from_vec(&[1], vec![total / T::from_f64(vp.len() as f64)])?;
        Ok(self.push(y, Op::L1Loss { pred, target }, &[pred]))
    }

    /// `sum_i x_i * w_i` against constant weights; a scalar `[1]` node.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted sum {:?} vs weights {:?}",
                vx.shape(),
                weights.shape()
            )));
        }
        let total = vx
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let y = Tensor::from_vec(&[1], vec![total])?;
        Ok(self.push(y, Op::WeightedSum { x, weights }, &[x]))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let g = ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, dy)?;
                self.accumulate(grads, *x, g.dx);
                self.accumulate(grads, *w, g.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.db);
                }
            }
            Op::Linear { x, w, b } => {
                let g = ops::linear_backward(self.value(*x), self.value(*w), dy)?;
                self.accumulate(grads, *x, g.dx);
                self.accumulate(grads, *w, g.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let g = ops::group_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    *groups,
                    stats,
                    dy,
                )?;
                self.accumulate(grads, *x, g.dx);
                self.accumulate(grads, *gamma, g.dgamma);
                self.accumulate(grads, *beta, g.dbeta);
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &d)| d * ops::silu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), data)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddChannelBias { x, bias } => {
                let vb = self.value(*bias);
                let spatial = dy.len() / vb.len();
                let db = dy
                    .data()
                    .chunks(spatial)
                    .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
                    .collect();
                self.accumulate(grads, *bias, Tensor::from_vec(vb.shape(), db)?);
                self.accumulate(grads, *x, dy.clone());
            }
            Op::ConcatChannels(a, b) => {
                let (ga, gb) = ops::split_channels(dy, self.value(*a).dim(1))?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::UpsampleNearest2(x) => {
                let g = ops::upsample_nearest2_backward(self.value(*x).shape(), dy)?;
                self.accumulate(grads, *x, g);
            }
            Op::Attention { qkv, probs } => {
                let g = ops::attention_backward(self.value(*qkv), probs, dy)?;
                self.accumulate(grads, *qkv, g);
            }
            Op::L1Loss { pred, target } => {
                let vp = self.value(*pred);
                let scale = dy.data()[0] / T::from_f64(vp.len() as f64);
                let data = vp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let d = p - t;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::from_vec(vp.shape(), data)?);
            }
            Op::WeightedSum { x, weights } => {
                let scale = dy.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * scale));
            }
        }
        Ok(())
    }
}
