//! Central finite-difference gradient oracle.
//!
//! The oracle only evaluates forward values; it never reads the tape's
//! gradient rules, so it stays independent of the path it checks.

use alloc::string::String;
use alloc::vec::Vec;

use crate::model::CasaModel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / (libm::fabs(analytic) + 1e-8)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(x.with_data(out))
}

/// Max relative error between the tape gradient of a scalar function and
/// its central finite difference at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(&tape, xv);

    let numeric = numeric_gradient(
        |probe| {
            let mut t = Tape::new();
            let v = t.constant(probe.clone());
            let out = f(&mut t, v)?;
            Ok(t.value(out).data()[0])
        },
        x,
        eps,
    )?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Per-parameter outcome of a full-model gradient audit.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Checks every scalar of every model parameter: MSE loss of the eval-mode
/// forward on `(input, target)` against central differences.
///
/// `tamper` sees each analytic gradient before comparison; pass a no-op in
/// normal use. It exists so callers can prove the audit catches a broken
/// gradient.
pub fn model_gradcheck(
    model: &CasaModel,
    input: &Tensor,
    target: &Tensor,
    eps: f64,
    mut tamper: impl FnMut(&str, &mut Tensor),
) -> Result<GradcheckReport> {
    let mut analytic = model.loss_gradients(input, target)?;
    let mut probe = model.clone();
    let mut params = Vec::with_capacity(analytic.len());
    for (idx, grad) in analytic.iter_mut().enumerate() {
        let name = String::from(model.params().name_at(idx));
        tamper(&name, grad);
        let mut max_rel_err: f64 = 0.0;
        for j in 0..grad.numel() {
            let orig = probe.params().value_at(idx).data()[j];
            probe.params_mut().value_at_mut(idx).data_mut()[j] = orig + eps;
            let plus = probe.loss(input, target)?;
            probe.params_mut().value_at_mut(idx).data_mut()[j] = orig - eps;
            let minus = probe.loss(input, target)?;
            probe.params_mut().value_at_mut(idx).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            max_rel_err = max_rel_err.max(relative_error(grad.data()[j], numeric));
        }
        let max_abs_grad = grad
            .data()
            .iter()
            .map(|v| libm::fabs(*v))
            .fold(0.0, f64::max);
        params.push(ParamCheck {
            name,
            max_rel_err,
            max_abs_grad,
        });
    }
    Ok(GradcheckReport { params })
}
