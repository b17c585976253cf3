//! Append-only gradient tape.
//!
//! A [`Tape`] records one forward pass. Every operation appends a node whose
//! parents already exist, so node ids are a topological order and
//! [`Tape::backward`] is a single reverse sweep. Parameters are borrowed
//! into the tape rather than copied; the tape is dropped after backward.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::tensor::{self, BinaryOp, ConvDims, LayerNormCache, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Rowwise(BinaryOp, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Recip(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Softmax(Var, usize),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A trainable leaf borrowed from the caller.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// An owned leaf that participates in gradients (used for inputs under test).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out = tensor::binary(op, self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a[r, :] + v[r]` for a matrix `a` and a vector `v` with one entry per row.
    pub fn add_rowwise(&mut self, a: Var, v: Var) -> Result<Var> {
        let out = tensor::rowwise(BinaryOp::Add, self.value(a), self.value(v))?;
        Ok(self.derived(out, Op::Rowwise(BinaryOp::Add, a, v), &[a, v]))
    }

    /// `a[r, :] * v[r]`.
    pub fn mul_rowwise(&mut self, a: Var, v: Var) -> Result<Var> {
        let out = tensor::rowwise(BinaryOp::Mul, self.value(a), self.value(v))?;
        Ok(self.derived(out, Op::Rowwise(BinaryOp::Mul, a, v), &[a, v]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = tensor::scale(self.value(a), s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = tensor::gelu(self.value(a));
        self.derived(out, Op::Gelu(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / v);
        self.derived(out, Op::Recip(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.derived(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    /// Same-padded 1D convolution; see [`tensor::conv1d`].
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let dims = tensor::conv1d_dims(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let out = tensor::conv1d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.derived(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            },
            &parents,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        Ok(self.derived(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            tensor::layer_norm_cached(self.value(input), self.value(gamma), self.value(beta), eps)?;
        Ok(self.derived(
            out,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                cache,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.derived(out, Op::Mean(a), &[a])
    }

    /// Mean squared error between `pred` and a target of the same shape.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Inverted dropout. `rng = None` means evaluation mode and returns `x`
    /// unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        match rng {
            Some(rng) if rate > 0.0 => {
                let mask = dropout_mask(self.shape(x), rate, rng);
                let m = self.constant(mask);
                self.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(op, a, b) => {
                let (av, bv) = (val(a), val(b));
                match op {
                    BinaryOp::Add => {
                        acc(a, g.clone());
                        acc(b, tensor::reduce_broadcast(g, bv.shape()));
                    }
                    BinaryOp::Sub => {
                        acc(a, g.clone());
                        acc(
                            b,
                            tensor::reduce_broadcast(&tensor::scale(g, -1.0), bv.shape()),
                        );
                    }
                    BinaryOp::Mul => {
                        let ga = tensor::mul(g, bv).expect("shape checked in forward");
                        let gb_full = g.with_data(
                            g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                        );
                        acc(a, ga);
                        acc(b, tensor::reduce_broadcast(&gb_full, bv.shape()));
                    }
                }
            }
            &Op::Rowwise(op, a, v) => {
                let cols = val(a).shape()[1];
                match op {
                    BinaryOp::Mul => {
                        let vv = val(v);
                        acc(a, tensor::rowwise(BinaryOp::Mul, g, vv).expect("checked"));
                        let gv: Vec<f64> = g
                            .data()
                            .chunks_exact(cols)
                            .zip(val(a).data().chunks_exact(cols))
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                            .collect();
                        acc(v, Tensor::vector(gv));
                    }
                    BinaryOp::Add | BinaryOp::Sub => {
                        let sign = if op == BinaryOp::Add { 1.0 } else { -1.0 };
                        acc(a, g.clone());
                        let gv: Vec<f64> = g
                            .data()
                            .chunks_exact(cols)
                            .map(|r| sign * r.iter().sum::<f64>())
                            .collect();
                        acc(v, Tensor::vector(gv));
                    }
                }
            }
            &Op::Scale(a, s) => acc(a, tensor::scale(g, s)),
            &Op::Relu(a) => {
                let x = val(a);
                acc(
                    a,
                    g.with_data(
                        g.data()
                            .iter()
                            .zip(x.data())
                            .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                            .collect(),
                    ),
                );
            }
            &Op::Gelu(a) => {
                let x = val(a);
                acc(
                    a,
                    g.with_data(
                        g.data()
                            .iter()
                            .zip(x.data())
                            .map(|(gi, &xi)| gi * tensor::gelu_grad_scalar(xi))
                            .collect(),
                    ),
                );
            }
            &Op::Recip(a) => {
                let y = &node.value;
                acc(
                    a,
                    g.with_data(
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gi, yi)| -gi * yi * yi)
                            .collect(),
                    ),
                );
            }
            &Op::MatMul(a, b) => {
                acc(a, tensor::matmul_nt(g, val(b)));
                acc(b, tensor::matmul_tn(val(a), g));
            }
            &Op::Transpose(a) => acc(a, tensor::transpose(g).expect("rank 2")),
            &Op::Reshape(a) => acc(
                a,
                g.clone()
                    .reshape(val(a).shape().to_vec())
                    .expect("same numel"),
            ),
            &Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            } => {
                let (dx, dw, db) = tensor::conv1d_backward(val(input), val(weight), g, dims);
                acc(input, dx);
                acc(weight, dw);
                if let Some(b) = bias {
                    acc(b, db);
                }
            }
            &Op::Softmax(x, axis) => acc(x, tensor::softmax_backward(&node.value, g, axis)),
            Op::LayerNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = tensor::layer_norm_backward(cache, val(*gamma), g);
                acc(*input, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            &Op::Sum(a) => acc(a, Tensor::full(val(a).shape().to_vec(), g.data()[0])),
            &Op::Mean(a) => {
                let n = val(a).numel() as f64;
                acc(a, Tensor::full(val(a).shape().to_vec(), g.data()[0] / n))
            }
        }
    }
}

/// Keep-mask for inverted dropout: zero with probability `rate`, otherwise
/// `1 / (1 - rate)`.
/// Short reborrow of an optional RNG handle, for passing it down several
/// calls in a row.
pub fn reborrow<'s>(rng: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut dyn RngCore) -> Tensor {
    assert!(
        (0.0..1.0).contains(&rate),
        "dropout rate must lie in [0, 1)"
    );
    let keep = 1.0 / (1.0 - rate);
    let n = tensor::numel(shape);
    let data = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape from existing tensor")
}

/// Tensor-level dropout. Identity when `training` is false or `rate` is 0.
pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut dyn RngCore) -> Tensor {
    if !training || rate == 0.0 {
        return x.clone();
    }
    let mask = dropout_mask(x.shape(), rate, rng);
    tensor::mul(x, &mask).expect("same shape")
}

/// Gradient buffers produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` is not
    /// reachable from the loss (its gradient is zero).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with unreachable nodes materialized as zeros shaped like the
    /// node's value.
    pub fn get_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }
}
