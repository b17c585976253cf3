//! Dense row-major `f64` tensor and the forward/backward kernels the tape
//! dispatches to.
//!
//! Kernels here are plain functions over [`Tensor`] values. They never record
//! anything; the [`crate::tape`] module wraps them with gradient rules.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != data.len() {
            return Err(Error::InvalidShape(shape));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive: {shape:?}"
        );
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape(vec![rows.len(), cols]));
        }
        Tensor::new([rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element `(r, c)` of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[self.rank() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[self.rank() - 1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    /// Rounds every element to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn with_data(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// Element-wise binary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// True when `b` can be broadcast onto `a`: equal shapes, or `b`'s shape
/// equals a trailing run of `a`'s dimensions.
pub fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !broadcastable(&a.shape, &b.shape) {
        return Err(mismatch("elementwise", a, b));
    }
    let f: fn(f64, f64) -> f64 = match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
    };
    let inner = b.numel();
    let data = a
        .data
        .chunks_exact(inner)
        .flat_map(|chunk| chunk.iter().zip(&b.data).map(move |(&x, &y)| f(x, y)))
        .collect();
    Ok(a.with_data(data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Mul, a, b)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 * pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    a.map(gelu_scalar)
}

/// Reduces a gradient shaped like `a` down to the broadcast operand's shape.
pub(crate) fn reduce_broadcast(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let inner = numel(target);
    let mut out = vec![0.0; inner];
    for chunk in grad.data.chunks_exact(inner) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor {
        shape: target.to_vec(),
        data: out,
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![0, 0],
        }),
    }
}

/// `a[m,p] · b[p,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = check_matrix("matmul", a)?;
    let (p2, n) = check_matrix("matmul", b)?;
    if p != p2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a.data[i * p..(i + 1) * p].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in row.iter_mut().zip(&b.data[k * n..(k + 1) * n]) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a[m,p] · b[n,p]ᵀ`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, p) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a.data[i * p..(i + 1) * p];
        for j in 0..n {
            let bj = &b.data[j * p..(j + 1) * p];
            out[i * n + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a[p,m]ᵀ · b[p,n]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for k in 0..p {
        let bk = &b.data[k * n..(k + 1) * n];
        for (i, &aki) in a.data[k * m..(k + 1) * m].iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(bk) {
                *o += aki * v;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = check_matrix("transpose", a)?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor {
        shape: vec![c, r],
        data: out,
    })
}

/// Multiplies (or adds) row `r` of a matrix by `v[r]`.
pub fn rowwise(op: BinaryOp, a: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (rows, cols) = check_matrix("rowwise", a)?;
    if v.numel() != rows || v.rank() != 1 {
        return Err(mismatch("rowwise", a, v));
    }
    let mut out = a.data.clone();
    for (r, chunk) in out.chunks_exact_mut(cols).enumerate() {
        let s = v.data[r];
        match op {
            BinaryOp::Add => chunk.iter_mut().for_each(|x| *x += s),
            BinaryOp::Sub => chunk.iter_mut().for_each(|x| *x -= s),
            BinaryOp::Mul => chunk.iter_mut().for_each(|x| *x *= s),
        }
    }
    Ok(a.with_data(out))
}

/// Geometry of a same-padded 1D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    c_in: usize,
    c_out: usize,
    k: usize,
    len: usize,
}

pub(crate) fn conv1d_dims(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<ConvDims> {
    let (c_in, len) = check_matrix("conv1d", input)?;
    let (c_out, wc, k) = match *weight.shape() {
        [o, c, k] => (o, c, k),
        _ => return Err(mismatch("conv1d", input, weight)),
    };
    if k.is_multiple_of(2) {
        return Err(Error::InvalidKernel(k));
    }
    if wc != c_in {
        return Err(mismatch("conv1d", input, weight));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(mismatch("conv1d", weight, b));
        }
    }
    Ok(ConvDims {
        c_in,
        c_out,
        k,
        len,
    })
}

/// Valid output range `t` for tap offset `shift` so that `t + shift` stays
/// inside `[0, len)`, or `None` when the tap never touches the signal.
#[inline]
fn tap_range(shift: isize, len: usize) -> Option<(usize, usize)> {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 {
        len.saturating_sub(shift as usize)
    } else {
        len
    };
    (lo < hi).then_some((lo, hi))
}

/// Same-padded cross-correlation: `y[o,t] = b[o] + Σ_{c,j} w[o,c,j]·x[c, t+j-pad]`
/// with zeros outside the signal.
pub fn conv1d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let d = conv1d_dims(input, weight, bias)?;
    let pad = (d.k / 2) as isize;
    let mut out = vec![0.0; d.c_out * d.len];
    for o in 0..d.c_out {
        let y = &mut out[o * d.len..(o + 1) * d.len];
        if let Some(b) = bias {
            y.fill(b.data[o]);
        }
        for c in 0..d.c_in {
            let x = &input.data[c * d.len..(c + 1) * d.len];
            for j in 0..d.k {
                let w = weight.data[(o * d.c_in + c) * d.k + j];
                if w == 0.0 {
                    continue;
                }
                let shift = j as isize - pad;
                let Some((lo, hi)) = tap_range(shift, d.len) else {
                    continue;
                };
                let src = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (yt, xs) in y[lo..hi].iter_mut().zip(src) {
                    *yt += w * xs;
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![d.c_out, d.len],
        data: out,
    })
}

/// Gradients of [`conv1d`] with respect to input, weight and bias.
pub(crate) fn conv1d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    dims: ConvDims,
) -> (Tensor, Tensor, Tensor) {
    let d = dims;
    let pad = (d.k / 2) as isize;
    let mut dx = vec![0.0; d.c_in * d.len];
    let mut dw = vec![0.0; d.c_out * d.c_in * d.k];
    let mut db = vec![0.0; d.c_out];
    for (o, b) in db.iter_mut().enumerate() {
        let gy = &grad_out.data[o * d.len..(o + 1) * d.len];
        *b = gy.iter().sum();
        for c in 0..d.c_in {
            let x = &input.data[c * d.len..(c + 1) * d.len];
            let gx = &mut dx[c * d.len..(c + 1) * d.len];
            for j in 0..d.k {
                let widx = (o * d.c_in + c) * d.k + j;
                let w = weight.data[widx];
                let shift = j as isize - pad;
                let Some((lo, hi)) = tap_range(shift, d.len) else {
                    continue;
                };
                let s_lo = (lo as isize + shift) as usize;
                let s_hi = (hi as isize + shift) as usize;
                let mut acc = 0.0;
                for (g, xs) in gy[lo..hi].iter().zip(&x[s_lo..s_hi]) {
                    acc += g * xs;
                }
                dw[widx] += acc;
                if w != 0.0 {
                    for (gxs, g) in gx[s_lo..s_hi].iter_mut().zip(&gy[lo..hi]) {
                        *gxs += w * g;
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: vec![d.c_in, d.len],
            data: dx,
        },
        Tensor {
            shape: vec![d.c_out, d.c_in, d.k],
            data: dw,
        },
        Tensor {
            shape: vec![d.c_out],
            data: db,
        },
    )
}

/// `(outer, axis_len, inner)` view of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |t: usize| base + t * inner + i;
            let max = (0..len)
                .map(|t| x.data[idx(t)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..len {
                let e = libm::exp(x.data[idx(t)] - max);
                out[idx(t)] = e;
                total += e;
            }
            for t in 0..len {
                out[idx(t)] /= total;
            }
        }
    }
    Ok(x.with_data(out))
}

pub(crate) fn softmax_backward(y: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&y.shape, axis).expect("validated in forward");
    let mut out = vec![0.0; y.numel()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |t: usize| base + t * inner + i;
            let dot: f64 = (0..len).map(|t| y.data[idx(t)] * grad.data[idx(t)]).sum();
            for t in 0..len {
                out[idx(t)] = y.data[idx(t)] * (grad.data[idx(t)] - dot);
            }
        }
    }
    y.with_data(out)
}

/// Saved forward context of a layer normalization.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes every row (last dimension) to zero mean and unit variance,
/// then applies `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = *x.shape.last().expect("non-empty shape");
    if gamma.shape() != [d] {
        return Err(mismatch("layer_norm", x, gamma));
    }
    if beta.shape() != [d] {
        return Err(mismatch("layer_norm", x, beta));
    }
    let mut xhat = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(x.numel() / d);
    for (r, row) in x.data.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / libm::sqrt(var + eps);
        inv_std.push(inv);
        for c in 0..d {
            let h = (row[c] - mean) * inv;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma.data[c] + beta.data[c];
        }
    }
    Ok((
        x.with_data(y),
        LayerNormCache {
            xhat: x.with_data(xhat),
            inv_std,
        },
    ))
}

pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = gamma.numel();
    let mut dx = vec![0.0; grad.numel()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for (r, g) in grad.data.chunks_exact(d).enumerate() {
        let xh = &cache.xhat.data[r * d..(r + 1) * d];
        for c in 0..d {
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
            dxhat[c] = g[c] * gamma.data[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let inv = cache.inv_std[r];
        for c in 0..d {
            dx[r * d + c] = inv * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    (
        grad.with_data(dx),
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        assert_eq!(add(&a, &t(&[2], &[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(
            mul(&t(&[2], &[2.0, 3.0]), &t(&[2], &[0.0, 1.0]))
                .unwrap()
                .data(),
            &[0.0, 3.0]
        );
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn trailing_broadcast() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        let bad = t(&[3], &[1.0, 1.0, 1.0]);
        assert!(matches!(add(&a, &bad), Err(Error::ShapeMismatch { .. })));
        // leading-dim vectors are not broadcast by the trailing rule
        let col = t(&[2, 1], &[1.0, 1.0]);
        assert!(add(&a, &col).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        let m = t(&[3, 3], &[1.0, -2.0, 3.5, 0.25, 5.0, -6.0, 7.0, 8.0, 9.0]);
        assert_eq!(matmul(&m, &Tensor::identity(3)).unwrap(), m);
        assert!(matches!(
            matmul(&a, &m),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn nt_tn_agree_with_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(
            &[4, 3],
            &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0, 3.0, 1.0, 1.0, -2.0, 2.0, 0.0],
        );
        assert_eq!(
            matmul_nt(&a, &b),
            matmul(&a, &transpose(&b).unwrap()).unwrap()
        );
        let c = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(
            matmul_tn(&a, &c),
            matmul(&transpose(&a).unwrap(), &c).unwrap()
        );
    }

    #[test]
    fn conv1d_examples() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 1, 3], &[1.0, 0.0, -1.0]);
        let b = t(&[1], &[0.0]);
        assert_eq!(conv1d(&x, &w, Some(&b)).unwrap().data(), &[-2.0, -2.0, 2.0]);

        let x = t(&[2, 4], &[1.0, -2.0, 3.0, 0.5, 2.0, 2.0, -1.0, 4.0]);
        let w = Tensor::zeros([3, 2, 5]);
        let b = t(&[3], &[0.7, 0.7, 0.7]);
        let y = conv1d(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv1d_errors() {
        let x = Tensor::zeros([2, 4]);
        assert_eq!(
            conv1d(&x, &Tensor::zeros([1, 2, 2]), None),
            Err(Error::InvalidKernel(2))
        );
        assert!(matches!(
            conv1d(&x, &Tensor::zeros([1, 3, 3]), None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
        assert!(y.is_finite());
        assert!(matches!(
            softmax(&Tensor::zeros([2, 2]), 2),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_column_axis() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 0.0, 3.0]);
        let y = softmax(&x, 0).unwrap();
        for c in 0..3 {
            assert!((y.at(0, c) + y.at(1, c) - 1.0).abs() < 1e-15);
        }
        assert_eq!(y.at(0, 2), 0.5);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones([2]);
        let b = Tensor::zeros([2]);
        let y = layer_norm(&t(&[1, 2], &[3.0, 3.0]), &g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = layer_norm(&t(&[1, 2], &[1.0, -1.0]), &g, &b, 1e-5).unwrap();
        let expect = 1.0 / libm::sqrt(1.0 + 1e-5);
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);
        let beta = t(&[2], &[5.0, 5.0]);
        let y = layer_norm(
            &t(&[2, 2], &[1.0, 7.0, -3.0, 2.0]),
            &Tensor::zeros([2]),
            &beta,
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // GELU(1) = 0.5 * (1 + erf(1/sqrt 2)) = Φ(1)
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu_scalar(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::new([2, 2], alloc::vec![1.0; 3]).is_err());
        assert!(Tensor::new([0, 2], Vec::new()).is_err());
        assert!(Tensor::zeros([2, 3]).reshape([4, 2]).is_err());
    }
}
