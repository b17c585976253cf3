//! The `train`, `eval`, `bench`, `analyze` and `gradcheck` commands.
//!
//! Results go to stdout and files under the output directory; progress and
//! warnings go to stderr.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use casa_core::analysis::correlation_report;
use casa_core::data::{
    fit_apply_scaler, make_windows, resolve_split, SeriesTable, SplitRanges, Windows,
};
use casa_core::gradcheck::{model_gradcheck, GradcheckReport, DEFAULT_EPS};
use casa_core::model::describe;
use casa_core::train::{evaluate, evaluate_with, train, Metrics};
use casa_core::{AttentionKind, CasaModel, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bench::{self, Axis, BenchSpec, ScalingReport};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{ConfigError, RunConfig};
use crate::csv_io::{load_csv, CsvOptions};
use crate::error::CliError;
use crate::report;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Gradient audit passes below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_MAX_N: usize = 4;
pub const GRADCHECK_MAX_D: usize = 8;

/// Scaled data with its split and windows.
pub struct Prepared {
    pub table: SeriesTable,
    pub split: SplitRanges,
    pub train: Windows,
    pub val: Windows,
    pub test: Windows,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let opts = CsvOptions {
        delimiter: cfg.delimiter,
        date_column: cfg.date_column.clone(),
    };
    let loaded = load_csv(&cfg.data_path, &opts)?;
    for w in &loaded.warnings {
        eprintln!("warning: {}: {w}", cfg.data_path.display());
    }
    let raw = loaded.table;
    let (l, h) = (cfg.input_len, cfg.horizon);
    let split = resolve_split(raw.len(), cfg.split_spec(), l, h).map_err(CliError::DataShape)?;
    let (_, table) = fit_apply_scaler(&raw, split.train.clone()).map_err(CliError::DataShape)?;
    let batch = cfg.train.batch_size;
    let windows = |r: std::ops::Range<usize>, stride| {
        make_windows(r, l, h, stride, batch).map_err(CliError::DataShape)
    };
    Ok(Prepared {
        train: windows(split.train.clone(), cfg.stride)?,
        val: windows(split.val.clone(), 1)?,
        test: windows(split.test.clone(), 1)?,
        table,
        split,
    })
}

/// Model shape for `cfg` over data with `n_data` variates.
pub fn data_model_config(cfg: &RunConfig, n_data: usize) -> Result<ModelConfig, CliError> {
    match cfg.n_vars {
        Some(n) if n != n_data => Err(CliError::Mismatch(format!(
            "model.N = {n} but the data has {n_data} variates"
        ))),
        _ => Ok(cfg.model_config(n_data)),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn print_metrics(label: &str, m: &Metrics) {
    println!(
        "{label} mse={:.6} mae={:.6} elements={}",
        m.mse, m.mae, m.count
    );
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = prepare_data(cfg)?;
    let mcfg = data_model_config(cfg, data.table.variates())?;
    let out = &cfg.out;
    create_dir(out)?;
    let resolved = RunConfig {
        n_vars: Some(mcfg.n_vars),
        ..cfg.clone()
    };
    report::write_text(&out.join(CONFIG_FILE), &resolved.to_text())?;
    eprintln!(
        "{}; windows train={} val={} test={}",
        describe(&mcfg),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let tcfg = cfg.train_config();
    let mut model = CasaModel::new(mcfg, cfg.seed)?;
    let mut seconds = Vec::new();
    let mut clock = Instant::now();
    let outcome = train(
        &mut model,
        &data.table,
        &data.train,
        &data.val,
        &tcfg,
        |r| {
            seconds.push(clock.elapsed().as_secs_f64());
            clock = Instant::now();
            eprintln!(
                "epoch {:>3}  train {:.6}  val {:.6}  lr {:.2e}  {:.1}s",
                r.epoch,
                r.train_mse,
                r.val_mse,
                r.lr,
                seconds.last().unwrap()
            );
        },
    )?;
    report::write_train_log(&out.join(TRAIN_LOG_FILE), &outcome.log, &seconds)?;
    checkpoint::save(
        &out.join(CHECKPOINT_FILE),
        &model,
        Some(&outcome.optim),
        &outcome.log,
    )?;

    let test = evaluate(&model, &data.table, &data.test)?;
    let val = Metrics {
        mse: outcome.best_val_mse,
        ..evaluate(&model, &data.table, &data.val)?
    };
    report::write_metrics(&out.join(METRICS_FILE), &[("val", val), ("test", test)])?;
    println!(
        "best epoch {} of {} (initial val mse {:.6})",
        outcome.best_epoch,
        outcome.log.len(),
        outcome.initial_val_mse
    );
    print_metrics("val", &val);
    print_metrics("test", &test);
    println!("artifacts in {}", out.display());
    Ok(())
}

/// Checks a loaded checkpoint against the data and, when `strict`, the
/// model section of `cfg`.
fn check_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    path: &Path,
    n_data: usize,
    strict: bool,
) -> Result<(), CliError> {
    let stored = ckpt.config();
    if stored.n_vars != n_data {
        return Err(CliError::Mismatch(format!(
            "{}: checkpoint has N = {}, data has {n_data} variates",
            path.display(),
            stored.n_vars
        )));
    }
    if strict {
        ckpt.check_config(&data_model_config(cfg, n_data)?)?;
    }
    Ok(())
}

/// Data settings come from `cfg`; `L`/`H` follow the checkpoint.
fn with_checkpoint_shape(cfg: &RunConfig, m: &ModelConfig) -> RunConfig {
    RunConfig {
        input_len: m.input_len,
        horizon: m.horizon,
        ..cfg.clone()
    }
}

/// `strict` checks the model section of `cfg` against the checkpoint, which
/// is what a user-supplied config asks for.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    strict: bool,
    dump: &[usize],
) -> Result<(), CliError> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let data_cfg = if strict {
        cfg.clone()
    } else {
        with_checkpoint_shape(cfg, ckpt.config())
    };
    let data = prepare_data(&data_cfg)?;
    check_checkpoint(
        &data_cfg,
        &ckpt,
        checkpoint_path,
        data.table.variates(),
        strict,
    )?;
    let wanted: BTreeSet<usize> = dump.iter().copied().collect();
    if let Some(&bad) = wanted.iter().find(|&&i| i >= data.test.len()) {
        return Err(CliError::Usage(format!(
            "dump window {bad} out of range, the test split has {} windows",
            data.test.len()
        )));
    }
    let out = &cfg.out;
    create_dir(out)?;
    let resolved = RunConfig {
        n_vars: Some(data.table.variates()),
        ..data_cfg.clone()
    };
    report::write_text(&out.join(CONFIG_FILE), &resolved.to_text())?;

    let starts: Vec<usize> = wanted.iter().map(|&i| data.test.starts[i]).collect();
    let mut dumps = Vec::new();
    let metrics = evaluate_with(
        &ckpt.model,
        &data.table,
        &data.test,
        |start, pred, truth| {
            if let Some(pos) = starts.iter().position(|&s| s == start) {
                dumps.push((pos, start, pred.clone(), truth.clone()));
            }
        },
    )?;
    for (pos, start, pred, truth) in dumps {
        let index = wanted.iter().nth(pos).expect("position from the same set");
        let path = out.join(format!("prediction_window_{index}.csv"));
        report::write_prediction_dump(
            &path,
            &data.table,
            start,
            data.test.input_len,
            &pred,
            &truth,
        )?;
        eprintln!("wrote {}", path.display());
    }
    report::write_metrics(&out.join(METRICS_FILE), &[("test", metrics)])?;
    print_metrics("test", &metrics);
    Ok(())
}

pub struct BenchArgs {
    pub axis: Axis,
    pub values: Option<Vec<usize>>,
    pub attention: Option<AttentionKind>,
    pub backward: Option<bool>,
}

/// Fixed dimensions come from `cfg` (`N` defaults to 862 when `auto`).
pub fn bench_spec(cfg: &RunConfig, args: &BenchArgs) -> BenchSpec {
    let mut base = cfg.model_config(cfg.n_vars.unwrap_or(862));
    if let Some(a) = args.attention {
        base.attention = a;
    }
    let values = args
        .values
        .clone()
        .unwrap_or_else(|| args.axis.default_values());
    if let Some(&first) = values.first() {
        args.axis.apply(&mut base, first);
    }
    BenchSpec {
        axis: args.axis,
        values,
        base,
        reps: cfg.bench.reps,
        batch: cfg.bench.batch,
        backward: args.backward.unwrap_or(cfg.bench.backward),
        scope: cfg.bench.scope,
        memory_budget_bytes: (cfg.bench.memory_budget_mb > 0)
            .then_some(cfg.bench.memory_budget_mb << 20),
        seed: cfg.seed,
    }
}

pub fn cmd_bench(cfg: &RunConfig, args: &BenchArgs) -> Result<ScalingReport, CliError> {
    let spec = bench_spec(cfg, args);
    bench::check_values(&spec.values)?;
    create_dir(&cfg.out)?;
    report::write_text(&cfg.out.join(CONFIG_FILE), &cfg.to_text())?;
    eprintln!(
        "bench {} over {:?}: {}",
        spec.axis.as_str(),
        spec.values,
        describe(&spec.base)
    );
    let result = bench::run(&spec, |p| match &p.outcome {
        Ok(m) => eprintln!(
            "  {}={:<5} {:.4}s/iter  peak {:.1} MiB",
            spec.axis.as_str(),
            p.value,
            m.seconds,
            m.peak_bytes as f64 / (1 << 20) as f64
        ),
        Err(e) => eprintln!("  {}={:<5} failed: {e}", spec.axis.as_str(), p.value),
    })?;
    report::write_scaling(&cfg.out, &result)?;
    println!(
        "axis={} attention={} time_slope={:.3} memory_slope={:.3}",
        result.axis.as_str(),
        spec.base.attention.as_str(),
        result.time_slope,
        result.memory_slope
    );
    Ok(result)
}

/// Report label for each checkpoint: its file stem, made unique.
fn source_names(paths: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for p in paths {
        let stem: String = p
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "model".into())
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let mut name = stem.clone();
        let mut k = 2;
        while name == "truth" || names.contains(&name) {
            name = format!("{stem}_{k}");
            k += 1;
        }
        names.push(name);
    }
    names
}

pub fn cmd_analyze(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<(), CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage(
            "analyze needs at least one checkpoint".into(),
        ));
    }
    let loaded: Vec<Checkpoint> = checkpoints
        .iter()
        .map(|p| checkpoint::load(p).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let first = loaded[0].config().clone();
    for (c, p) in loaded.iter().zip(checkpoints) {
        let m = c.config();
        if (m.input_len, m.horizon) != (first.input_len, first.horizon) {
            return Err(CliError::Mismatch(format!(
                "{}: L={} H={} differs from L={} H={} of the first checkpoint",
                p.display(),
                m.input_len,
                m.horizon,
                first.input_len,
                first.horizon
            )));
        }
    }
    let data_cfg = with_checkpoint_shape(cfg, &first);
    let data = prepare_data(&data_cfg)?;
    let n = data.table.variates();
    for (c, p) in loaded.iter().zip(checkpoints) {
        check_checkpoint(&data_cfg, c, p, n, false)?;
    }

    // Pool every test window as H rows of N values.
    let pool = |t: &Tensor, into: &mut Vec<f64>| {
        for step in 0..t.shape()[1] {
            into.extend((0..t.shape()[0]).map(|v| t.at(v, step)));
        }
    };
    let mut truth = Vec::new();
    for &s in &data.test.starts {
        pool(&data.test.sample(&data.table, s).1, &mut truth);
    }
    let rows = truth.len() / n;
    let truth = Tensor::new([rows, n], truth).expect("pooled rows");
    let mut series = Vec::with_capacity(loaded.len());
    let mut errors = Vec::with_capacity(loaded.len());
    for c in &loaded {
        let mut pred = Vec::with_capacity(rows * n);
        let m = evaluate_with(&c.model, &data.table, &data.test, |_, p, _| {
            pool(p, &mut pred)
        })?;
        series.push(Tensor::new([rows, n], pred).expect("pooled rows"));
        errors.push(m);
    }
    let names = source_names(checkpoints);
    let models: Vec<(&str, &Tensor)> = names
        .iter()
        .map(String::as_str)
        .zip(series.iter())
        .collect();
    let rep = correlation_report(&truth, &models).map_err(CliError::DataShape)?;

    create_dir(&cfg.out)?;
    report::write_text(&cfg.out.join(CONFIG_FILE), &data_cfg.to_text())?;
    report::write_correlation_report(&cfg.out, data.table.variate_names(), &rep)?;
    let forecast: Vec<(&str, Metrics)> = names
        .iter()
        .map(String::as_str)
        .zip(errors.iter().cloned())
        .collect();
    report::write_metrics(&cfg.out.join("forecast_metrics.csv"), &forecast)?;

    println!(
        "{:<16} {:>10} {:>10} {:>10} {:>10}",
        "source", "mse", "cosine", "ssim", "pdf_mse"
    );
    for r in &rep.rows {
        let cos = r
            .cosine
            .map_or_else(|| "nan".to_string(), |c| format!("{c:.6}"));
        println!(
            "{:<16} {:>10.6} {:>10} {:>10.6} {:>10.6}",
            r.name, r.mse, cos, r.ssim, r.pdf_mse
        );
    }
    for (name, m) in &forecast {
        print_metrics(&format!("{name} test"), m);
    }
    Ok(())
}

/// Starting point for `gradcheck` before the config file and overrides.
pub fn gradcheck_base() -> RunConfig {
    RunConfig {
        n_vars: Some(3),
        input_len: 8,
        horizon: 4,
        d_model: 8,
        n_blocks: 1,
        kernel_size: 3,
        ..RunConfig::default()
    }
}

/// Full-model finite-difference audit on random data. `corrupt` names a
/// parameter whose analytic gradient is deliberately skewed.
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> Result<GradcheckReport, CliError> {
    let n = cfg.n_vars.unwrap_or(3);
    if n > GRADCHECK_MAX_N || cfg.d_model > GRADCHECK_MAX_D {
        return Err(CliError::Config(ConfigError::Invalid(format!(
            "gradcheck is limited to N <= {GRADCHECK_MAX_N} and D <= {GRADCHECK_MAX_D}, got N = {n}, D = {}",
            cfg.d_model
        ))));
    }
    let mcfg = cfg.model_config(n);
    let model = CasaModel::new(mcfg.clone(), cfg.seed)?;
    if let Some(name) = corrupt {
        if model.params().position(name).is_none() {
            return Err(CliError::Usage(format!("no parameter named `{name}`")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |shape: [usize; 2]| {
        let data = (0..shape[0] * shape[1])
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    let x = draw([mcfg.n_vars, mcfg.input_len]);
    let y = draw([mcfg.n_vars, mcfg.horizon]);
    let start = Instant::now();
    let rep = model_gradcheck(&model, &x, &y, DEFAULT_EPS, |name, g| {
        if Some(name) == corrupt {
            for v in g.data_mut() {
                *v = 1.5 * *v + 1e-3;
            }
        }
    })?;
    eprintln!("{}; {:.2}s", describe(&mcfg), start.elapsed().as_secs_f64());
    for p in &rep.params {
        println!(
            "{:<40} max_rel_err={:.3e} max_abs_grad={:.3e}",
            p.name, p.max_rel_err, p.max_abs_grad
        );
    }
    let worst = rep.worst().expect("model has parameters");
    println!("max_rel_err={:.3e} ({})", worst.max_rel_err, worst.name);
    if worst.max_rel_err.is_nan() || worst.max_rel_err >= GRADCHECK_TOLERANCE {
        return Err(CliError::GradcheckFailed {
            param: worst.name.clone(),
            rel_err: worst.max_rel_err,
        });
    }
    Ok(rep)
}
