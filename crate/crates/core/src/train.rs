//! Adam, the epoch loop with plateau decay and early stopping, and test
//! metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{SeriesTable, Windows};
use crate::model::CasaModel;
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Adam moments and hyperparameters, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moment shapes mirror `params`.
    pub fn matches(&self, params: &ParamSet) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .values()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// One bias-corrected Adam update. Weight decay, when nonzero, is added to
/// the gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::InvalidConfig(format!(
            "{} gradients / {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (idx, g) in grads.iter().enumerate() {
        if g.shape() != params.value_at(idx).shape() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: params.value_at(idx).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: String::from(params.name_at(idx)),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for (idx, g) in grads.iter().enumerate() {
        let w = params.value_at_mut(idx).data_mut();
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        for j in 0..w.len() {
            let gj = g.data()[j] + state.weight_decay * w[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            w[j] -= state.lr * mhat / (libm::sqrt(vhat) + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Early stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Halve the learning rate after this many epochs without improvement.
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Round parameters to f32 after every update, matching checkpoint
    /// storage.
    pub store_f32: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            patience: 10,
            lr_patience: 3,
            lr_factor: 0.5,
            seed: 2024,
            shuffle: true,
            store_f32: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.patience > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) || self.lr_patience == 0 {
            return Err(Error::InvalidConfig(
                "lr_factor must lie in (0, 1], lr_patience >= 1".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "weight decay must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Validation MSE of the model before the first update.
    pub initial_val_mse: f64,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub optim: OptimState,
}

/// Mean per-window MSE of `windows` over `table`, evaluation mode.
fn mean_loss(model: &CasaModel, table: &SeriesTable, windows: &Windows) -> Result<f64> {
    Ok(evaluate(model, table, windows)?.mse)
}

/// Trains `model` in place on the training windows and leaves it holding the
/// parameters of the best validation epoch. `on_epoch` sees every record as
/// soon as it is produced.
pub fn train(
    model: &mut CasaModel,
    table: &SeriesTable,
    train_windows: &Windows,
    val_windows: &Windows,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::InsufficientData(
            "no train or validation windows".into(),
        ));
    }
    let expected = [model.config().input_len, model.config().horizon];
    let got = [train_windows.input_len, train_windows.horizon];
    if expected != got || table.variates() != model.config().n_vars {
        return Err(Error::ConfigMismatch {
            expected: alloc::vec![model.config().n_vars, expected[0], expected[1]],
            got: alloc::vec![table.variates(), got[0], got[1]],
        });
    }
    if cfg.store_f32 {
        model.params_mut().round_to_f32();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optim = OptimState::new(model.params(), cfg.lr);
    optim.weight_decay = cfg.weight_decay;

    let initial_val_mse = mean_loss(model, table, val_windows)?;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = model.params().clone();
    let mut since_best = 0;
    let mut since_decay = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let lr = optim.lr;
        let order = if cfg.shuffle {
            train_windows.order(Some(&mut rng))
        } else {
            train_windows.order(None)
        };
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &start in chunk {
                let (x, y) = train_windows.sample(table, start);
                let (loss, grads) = model.loss_and_gradients(&x, &y, Some(&mut rng))?;
                if !loss.is_finite() {
                    return Err(Error::DivergenceDetected { epoch });
                }
                loss_sum += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&grads)
                        .for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty chunk");
            let inv = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(model.params_mut(), &grads, &mut optim)?;
            if cfg.store_f32 {
                model.params_mut().round_to_f32();
            }
        }
        let train_mse = loss_sum / order.len() as f64;
        if !train_mse.is_finite() {
            return Err(Error::DivergenceDetected { epoch });
        }
        let val_mse = mean_loss(model, table, val_windows)?;
        let record = EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr,
        };
        on_epoch(&record);
        log.push(record);

        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best_params = model.params().clone();
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_decay >= cfg.lr_patience {
                optim.lr *= cfg.lr_factor;
                since_decay = 0;
            }
        }
        if since_best >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    *model.params_mut() = best_params;
    Ok(TrainOutcome {
        initial_val_mse,
        log,
        best_epoch,
        best_val_mse: best_val,
        stopped_early,
        optim,
    })
}

/// Error metrics averaged over every (window, variate, step) element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

/// Accumulates squared and absolute errors elementwise.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricsAccumulator {
    sq: f64,
    abs: f64,
    count: usize,
}

impl MetricsAccumulator {
    pub fn push(&mut self, pred: &[f64], truth: &[f64]) {
        for (p, t) in pred.iter().zip(truth) {
            let d = p - t;
            self.sq += d * d;
            self.abs += libm::fabs(d);
        }
        self.count += pred.len().min(truth.len());
    }

    pub fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
            count: self.count,
        }
    }
}

pub fn metrics(pred: &Tensor, truth: &Tensor) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let mut acc = MetricsAccumulator::default();
    acc.push(pred.data(), truth.data());
    Ok(acc.finish())
}

/// Test metrics; `on_window(start, prediction, target)` sees each window.
pub fn evaluate_with(
    model: &CasaModel,
    table: &SeriesTable,
    windows: &Windows,
    mut on_window: impl FnMut(usize, &Tensor, &Tensor),
) -> Result<Metrics> {
    if table.variates() != model.config().n_vars
        || windows.input_len != model.config().input_len
        || windows.horizon != model.config().horizon
    {
        return Err(Error::ConfigMismatch {
            expected: alloc::vec![
                model.config().n_vars,
                model.config().input_len,
                model.config().horizon
            ],
            got: alloc::vec![table.variates(), windows.input_len, windows.horizon],
        });
    }
    let mut acc = MetricsAccumulator::default();
    for &start in &windows.starts {
        let (x, y) = windows.sample(table, start);
        let pred = model.predict(&x)?;
        acc.push(pred.data(), y.data());
        on_window(start, &pred, &y);
    }
    Ok(acc.finish())
}

pub fn evaluate(model: &CasaModel, table: &SeriesTable, windows: &Windows) -> Result<Metrics> {
    evaluate_with(model, table, windows, |_, _, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_param(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![w]));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_param(0.7);
        let mut s = OptimState::new(&p, 0.1);
        adam_step(&mut p, &[Tensor::vector(vec![0.0])], &mut s).unwrap();
        assert_eq!(p.value_at(0).data()[0], 0.7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_lr() {
        for g in [1e-4, 1.0, 250.0, -3.0] {
            let mut p = scalar_param(1.0);
            let mut s = OptimState::new(&p, 0.01);
            adam_step(&mut p, &[Tensor::vector(vec![g])], &mut s).unwrap();
            let step = (p.value_at(0).data()[0] - 1.0).abs();
            assert!((step - 0.01).abs() < 1e-6, "g={g} step={step}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_param(1.0);
        let mut s = OptimState::new(&p, 0.1);
        let err = adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut s).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient { param: "w".into() });
        assert_eq!(s.t, 0);
        assert_eq!(p.value_at(0).data()[0], 1.0);
    }

    #[test]
    fn metrics_offsets() {
        let a = Tensor::full([3, 4], 2.0);
        let b = Tensor::full([3, 4], 3.0);
        assert_eq!(metrics(&a, &a).unwrap().mse, 0.0);
        let m = metrics(&a, &b).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 40,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
