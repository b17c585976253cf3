//! Parameter storage and the layers the model is built from: affine maps,
//! layer normalization, same-padded convolutions and reversible instance
//! normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::tape::{Tape, Var};
use crate::tensor::{self, BinaryOp, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const REVIN_EPS: f64 = 1e-5;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of every trainable tensor of a model.
///
/// Layers hold [`ParamId`]s into the set; optimizers, checkpoints and the
/// gradient audit walk the set directly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value_at(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// Registers every parameter as a borrowed leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        BoundParams {
            vars: self.values.iter().map(|v| tape.param(v)).collect(),
        }
    }
}

/// Tape handles of a [`ParamSet`] for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let n = tensor::numel(shape);
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Affine map `x·W + b` along the trailing dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            uniform_init(&[d_in, d_out], d_in, rng),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros([d_out]));
        LinearParams {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    /// Leading dimensions are flattened and restored around the product.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &BoundParams, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: alloc::vec![self.d_in, self.d_out],
            });
        }
        let flat = if shape.len() == 2 {
            x
        } else {
            let rows = shape[..shape.len() - 1].iter().product();
            tape.reshape(x, &[rows, self.d_in])?
        };
        let y = tape.matmul(flat, p.var(self.weight))?;
        let y = tape.add(y, p.var(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.d_out;
            tape.reshape(y, &out_shape)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: params.push(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: params.push(format!("{name}.beta"), Tensor::zeros([dim])),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &BoundParams, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}

/// Same-padded 1D convolution `[c_in, len] -> [c_out, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv1dParams {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        with_bias: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidKernel(kernel));
        }
        let weight = params.push(
            format!("{name}.weight"),
            uniform_init(&[c_out, c_in, kernel], c_in * kernel, rng),
        );
        let bias = with_bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros([c_out])));
        Ok(Conv1dParams {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.c_out * self.c_in * self.kernel + if self.bias.is_some() { self.c_out } else { 0 }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &BoundParams, x: Var) -> Result<Var> {
        tape.conv1d(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// Per-instance statistics captured by [`revin_normalize`]. Only
/// normalization can create one, so denormalization always pairs with a
/// matching normalize call.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinState {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl RevinState {
    fn capture(x: &Tensor) -> Result<Self> {
        let (n, len) = match *x.shape() {
            [n, l] if l >= 2 => (n, l),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "revin",
                    lhs: x.shape().to_vec(),
                    rhs: alloc::vec![0, 2],
                })
            }
        };
        let mut mean = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64;
            mean.push(m);
            std.push(libm::sqrt(var));
        }
        Ok(RevinState { mean, std })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn variates(&self) -> usize {
        self.mean.len()
    }

    fn denom(&self) -> Tensor {
        Tensor::vector(self.std.iter().map(|s| s + REVIN_EPS).collect())
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.mean.len() {
            return Err(Error::StateMismatch {
                expected: self.mean.len(),
                got: n,
            });
        }
        Ok(())
    }
}

/// Learnable per-variate affine of RevIN, identity at init.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinParams {
    pub scale: ParamId,
    pub shift: ParamId,
    pub variates: usize,
}

impl RevinParams {
    pub fn new(params: &mut ParamSet, name: &str, variates: usize) -> Self {
        RevinParams {
            scale: params.push(format!("{name}.scale"), Tensor::ones([variates])),
            shift: params.push(format!("{name}.shift"), Tensor::zeros([variates])),
            variates,
        }
    }

    /// Normalizes the constant input `x[N, L]` and applies the affine on the tape.
    pub fn normalize(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        x: &Tensor,
    ) -> Result<(Var, RevinState)> {
        let (xn, state) = revin_normalize(x)?;
        let v = tape.constant(xn);
        let v = tape.mul_rowwise(v, p.var(self.scale))?;
        let v = tape.add_rowwise(v, p.var(self.shift))?;
        Ok((v, state))
    }

    /// Inverts the affine, then the statistics: `((y - shift) / scale)·(σ+eps) + μ`.
    pub fn denormalize(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        y: Var,
        state: &RevinState,
    ) -> Result<Var> {
        state.check(tape.shape(y)[0])?;
        let neg_shift = tape.scale(p.var(self.shift), -1.0);
        let v = tape.add_rowwise(y, neg_shift)?;
        let inv_scale = tape.recip(p.var(self.scale));
        let v = tape.mul_rowwise(v, inv_scale)?;
        let denom = tape.constant(state.denom());
        let v = tape.mul_rowwise(v, denom)?;
        let mean = tape.constant(Tensor::vector(state.mean.clone()));
        tape.add_rowwise(v, mean)
    }
}

/// Per-variate `(x_r - μ_r) / (σ_r + eps)` over the rows of `x[N, L]`.
pub fn revin_normalize(x: &Tensor) -> Result<(Tensor, RevinState)> {
    let state = RevinState::capture(x)?;
    let centered = tensor::rowwise(BinaryOp::Sub, x, &Tensor::vector(state.mean.clone()))?;
    let inv = Tensor::vector(state.std.iter().map(|s| 1.0 / (s + REVIN_EPS)).collect());
    let out = tensor::rowwise(BinaryOp::Mul, &centered, &inv)?;
    Ok((out, state))
}

/// Inverse of [`revin_normalize`] for an output `y[N, H]` of any length.
pub fn revin_denormalize(y: &Tensor, state: &RevinState) -> Result<Tensor> {
    if y.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "revin",
            lhs: y.shape().to_vec(),
            rhs: alloc::vec![state.variates(), 0],
        });
    }
    state.check(y.shape()[0])?;
    let scaled = tensor::rowwise(BinaryOp::Mul, y, &state.denom())?;
    tensor::rowwise(BinaryOp::Add, &scaled, &Tensor::vector(state.mean.clone()))
}
