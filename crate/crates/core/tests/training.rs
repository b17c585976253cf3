use casa_core::data::{make_windows, resolve_split, SeriesTable, SplitSpec};
use casa_core::train::{
    adam_step, evaluate, evaluate_with, metrics, train, OptimState, TrainConfig,
};
use casa_core::{CasaModel, Error, ModelConfig, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain-scalar Adam on `f(w) = w²`, written out independently of the
/// library update.
fn adam_oracle(steps: usize) -> Vec<f64> {
    let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.1, 1e-8);
    let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
    let mut out = vec![w];
    for t in 1..=steps {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t as i32));
        let vhat = v / (1.0 - b2.powi(t as i32));
        w -= lr * mhat / (vhat.sqrt() + eps);
        out.push(w);
    }
    out
}

fn adam_library(steps: usize) -> Vec<f64> {
    let mut p = ParamSet::new();
    p.push("w", Tensor::vector(vec![1.0]));
    let mut state = OptimState::new(&p, 0.1);
    let mut out = vec![1.0];
    for _ in 0..steps {
        let g = Tensor::vector(vec![2.0 * p.value_at(0).data()[0]]);
        adam_step(&mut p, &[g], &mut state).unwrap();
        out.push(p.value_at(0).data()[0]);
    }
    out
}

#[test]
fn adam_on_quadratic_follows_the_scalar_recursion() {
    let lib = adam_library(500);
    let oracle = adam_oracle(500);
    for (t, (a, b)) in lib.iter().zip(&oracle).enumerate() {
        assert!((a - b).abs() < 1e-14, "step {t}: {a} vs {b}");
    }
    let pinned = [
        1.0, 0.9, 0.8004, 0.7016, 0.6039, 0.508, 0.4142, 0.3234, 0.2363, 0.1536, 0.0762, 0.0051,
    ];
    for (t, want) in pinned.iter().enumerate() {
        assert!((lib[t] - want).abs() < 5e-5, "step {t}: {}", lib[t]);
    }
}

#[test]
fn adam_on_quadratic_descends_then_settles() {
    let w = adam_library(500);
    for t in 0..11 {
        assert!(w[t + 1].abs() < w[t].abs(), "step {}", t + 1);
    }
    // momentum carries the iterate past the minimum at step 12
    assert!(w[12] < 0.0 && w[12].abs() > w[11].abs());
    assert!(w[200..].iter().all(|x| x.abs() < 1e-3));
    assert!(w[500].abs() < 1e-3);
}

fn sinusoids(steps: usize) -> SeriesTable {
    let mut data = Vec::with_capacity(steps * 2);
    for t in 0..steps {
        let x = t as f64;
        data.push((2.0 * std::f64::consts::PI * x / 24.0).sin());
        data.push(0.5 * (2.0 * std::f64::consts::PI * x / 12.0 + 1.0).cos() + 0.3);
    }
    SeriesTable::new(
        (0..steps).map(|t| t.to_string()).collect(),
        Tensor::new([steps, 2], data).unwrap(),
        vec!["a".into(), "b".into()],
    )
    .unwrap()
}

struct Setup {
    table: SeriesTable,
    train: casa_core::data::Windows,
    val: casa_core::data::Windows,
    test: casa_core::data::Windows,
    cfg: ModelConfig,
}

fn setup(steps: usize, stride: usize) -> Setup {
    let table = sinusoids(steps);
    let (l, h) = (16, 16);
    let split = resolve_split(table.len(), SplitSpec::DEFAULT_RATIO, l, h).unwrap();
    let mut cfg = ModelConfig::new(2, l, h).with_d_model(16);
    cfg.n_blocks = 1;
    Setup {
        train: make_windows(split.train, l, h, stride, 16).unwrap(),
        val: make_windows(split.val, l, h, stride, 16).unwrap(),
        test: make_windows(split.test, l, h, stride, 16).unwrap(),
        table,
        cfg,
    }
}

#[test]
fn learns_sinusoids() {
    let s = setup(600, 1);
    let mut model = CasaModel::new(s.cfg.clone(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        lr: 1e-3,
        patience: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &s.table, &s.train, &s.val, &cfg, |_| {}).unwrap();
    assert!(
        out.best_val_mse < 0.1 * out.initial_val_mse,
        "val {} vs initial {}",
        out.best_val_mse,
        out.initial_val_mse
    );
    let test = evaluate(&model, &s.table, &s.test).unwrap();
    assert!(test.mse < 0.1 * out.initial_val_mse);
}

#[test]
fn zero_patience_runs_one_epoch() {
    let s = setup(300, 4);
    let mut model = CasaModel::new(s.cfg.clone(), 2).unwrap();
    let cfg = TrainConfig {
        patience: 0,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &s.table, &s.train, &s.val, &cfg, |_| {}).unwrap();
    assert_eq!(out.log.len(), 1);
}

#[test]
fn same_seed_same_trajectory() {
    let s = setup(300, 2);
    let cfg = TrainConfig {
        epochs: 4,
        patience: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = CasaModel::new(s.cfg.clone(), 3).unwrap();
        let out = train(&mut model, &s.table, &s.train, &s.val, &cfg, |_| {}).unwrap();
        (out.log, model.params().clone())
    };
    let (log_a, params_a) = run();
    let (log_b, params_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(params_a, params_b);

    let other = TrainConfig {
        seed: 10,
        ..cfg.clone()
    };
    let mut model = CasaModel::new(s.cfg.clone(), 3).unwrap();
    let log_c = train(&mut model, &s.table, &s.train, &s.val, &other, |_| {})
        .unwrap()
        .log;
    assert_ne!(log_a, log_c);
}

#[test]
fn restores_best_validation_parameters() {
    let s = setup(300, 2);
    let mut model = CasaModel::new(s.cfg.clone(), 4).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        patience: 8,
        lr: 2e-2,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let out = train(&mut model, &s.table, &s.train, &s.val, &cfg, |r| {
        seen.push(r.clone())
    })
    .unwrap();
    assert_eq!(seen, out.log);
    let min = out
        .log
        .iter()
        .map(|r| r.val_mse)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_mse, min);
    assert_eq!(out.log[out.best_epoch - 1].val_mse, min);
    assert_eq!(evaluate(&model, &s.table, &s.val).unwrap().mse, min);
}

#[test]
fn plateau_halves_learning_rate() {
    let s = setup(300, 4);
    let mut model = CasaModel::new(s.cfg.clone(), 5).unwrap();
    // a huge rate makes validation stall quickly
    let cfg = TrainConfig {
        epochs: 12,
        patience: 12,
        lr: 0.5,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &s.table, &s.train, &s.val, &cfg, |_| {}).unwrap();
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut bad = 0;
    for r in &out.log {
        assert_eq!(r.lr, lr, "epoch {}", r.epoch);
        if r.val_mse < best {
            best = r.val_mse;
            bad = 0;
        } else {
            bad += 1;
            if bad == 3 {
                lr *= 0.5;
                bad = 0;
            }
        }
    }
    assert!(out.log.last().unwrap().lr < cfg.lr, "no decay happened");
}

#[test]
fn infinite_loss_is_divergence() {
    let mut table = sinusoids(300);
    let mut values = table.values().clone();
    values.data_mut()[2 * 40] = 1e200;
    table = SeriesTable::new(
        table.timestamps().to_vec(),
        values,
        table.variate_names().to_vec(),
    )
    .unwrap();
    let s = setup(300, 4);
    let mut model = CasaModel::new(s.cfg.clone(), 6).unwrap();
    let err = train(
        &mut model,
        &table,
        &s.train,
        &s.val,
        &TrainConfig::default(),
        |_| {},
    )
    .unwrap_err();
    assert_eq!(err, Error::DivergenceDetected { epoch: 1 });
}

#[test]
fn mismatched_windows_rejected() {
    let s = setup(300, 4);
    let mut cfg = s.cfg.clone();
    cfg.horizon = 8;
    let mut model = CasaModel::new(cfg, 0).unwrap();
    let err = train(
        &mut model,
        &s.table,
        &s.train,
        &s.val,
        &TrainConfig::default(),
        |_| {},
    );
    assert!(matches!(err, Err(Error::ConfigMismatch { .. })));
}

fn metric_oracle(p: &[Vec<Vec<f64>>], t: &[Vec<Vec<f64>>]) -> (f64, f64) {
    let (mut sq, mut ab, mut n) = (0.0, 0.0, 0usize);
    for b in 0..p.len() {
        for v in 0..p[b].len() {
            for h in 0..p[b][v].len() {
                let d = p[b][v][h] - t[b][v][h];
                sq += d * d;
                ab += d.abs();
                n += 1;
            }
        }
    }
    (sq / n as f64, ab / n as f64)
}

#[test]
fn metrics_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let (b, n, h) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..7),
        );
        let mut draw = || -> Vec<Vec<Vec<f64>>> {
            (0..b)
                .map(|_| {
                    (0..n)
                        .map(|_| (0..h).map(|_| rng.random_range(-3.0..3.0)).collect())
                        .collect()
                })
                .collect()
        };
        let (p, t) = (draw(), draw());
        let (mse, mae) = metric_oracle(&p, &t);
        let flat = |x: &Vec<Vec<Vec<f64>>>| Tensor::new([b, n, h], x.concat().concat()).unwrap();
        let m = metrics(&flat(&p), &flat(&t)).unwrap();
        assert!((m.mse - mse).abs() < 1e-12);
        assert!((m.mae - mae).abs() < 1e-12);
        assert_eq!(m.count, b * n * h);
    }
}

#[test]
fn evaluate_pools_every_element() {
    let s = setup(300, 3);
    let model = CasaModel::new(s.cfg.clone(), 7).unwrap();
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let m = evaluate_with(&model, &s.table, &s.test, |start, p, t| {
        assert_eq!(t, &s.test.sample(&s.table, start).1);
        preds.extend_from_slice(p.data());
        truths.extend_from_slice(t.data());
    })
    .unwrap();
    let pooled = metrics(&Tensor::vector(preds), &Tensor::vector(truths)).unwrap();
    assert!((m.mse - pooled.mse).abs() < 1e-12);
    assert!((m.mae - pooled.mae).abs() < 1e-12);
    assert_eq!(m.count, s.test.len() * 2 * 16);
}
