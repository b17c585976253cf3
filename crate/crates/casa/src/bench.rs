//! Scaling benchmark: median wall time and peak heap per iteration as one of
//! `N`, `L`, `H` grows, with log-log slopes.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::time::Instant;

use casa_core::analysis::loglog_slope;
use casa_core::{CasaModel, ModelConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::BenchScope;
use crate::error::CliError;

/// Passes through to the system allocator and keeps per-thread live and peak
/// byte counts, so measurements ignore other threads.
pub struct TrackingAllocator;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn record(delta: isize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Runs `f` and returns its result with the peak number of bytes the current
/// thread held above its starting level meanwhile.
pub fn peak_bytes<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = LIVE.with(Cell::get);
    PEAK.with(|p| p.set(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    (out, (peak - base).max(0) as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N,
    L,
    H,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::N => "N",
            Axis::L => "L",
            Axis::H => "H",
        }
    }

    /// Sweep used when no values are given.
    pub fn default_values(self) -> Vec<usize> {
        match self {
            Axis::N => vec![64, 128, 256, 512, 862],
            Axis::L => vec![96, 192, 384, 768],
            Axis::H => vec![96, 192, 336, 720],
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig, value: usize) {
        match self {
            Axis::N => cfg.n_vars = value,
            Axis::L => cfg.input_len = value,
            Axis::H => cfg.horizon = value,
        }
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "N" | "n" => Ok(Axis::N),
            "L" | "l" => Ok(Axis::L),
            "H" | "h" => Ok(Axis::H),
            _ => Err(format!("unknown axis `{s}`, expected N, L or H")),
        }
    }
}

pub const MIN_POINTS: usize = 4;

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub axis: Axis,
    pub values: Vec<usize>,
    /// Model at every point, before the swept dimension is set.
    pub base: ModelConfig,
    pub reps: usize,
    pub batch: usize,
    pub backward: bool,
    pub scope: BenchScope,
    pub memory_budget_bytes: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    /// Median seconds per iteration over `batch` instances.
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchPoint {
    pub value: usize,
    pub outcome: Result<Measurement, String>,
}

#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub axis: Axis,
    pub spec: BenchSpec,
    pub points: Vec<BenchPoint>,
    pub time_slope: f64,
    pub memory_slope: f64,
}

fn gaussian(shape: [usize; 2], rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape[0] * shape[1])
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

fn iteration(
    model: &CasaModel,
    inputs: &[Tensor],
    targets: &[Tensor],
    spec: &BenchSpec,
) -> casa_core::Result<()> {
    for (x, y) in inputs.iter().zip(targets) {
        match spec.scope {
            BenchScope::Model if spec.backward => {
                model.loss_and_gradients(x, y, None)?;
            }
            BenchScope::Model => {
                model.predict(x)?;
            }
            BenchScope::Attention => {
                let mut tape = Tape::new();
                let p = model.params().bind(&mut tape);
                let z = tape.variable(x.clone());
                let out = model.blocks()[0].attend(&mut tape, &p, z, None)?;
                if spec.backward {
                    let loss = tape.mean(out);
                    tape.backward(loss)?;
                }
            }
        }
    }
    Ok(())
}

fn run_point(spec: &BenchSpec, value: usize) -> Result<Measurement, String> {
    let mut cfg = spec.base.clone();
    spec.axis.apply(&mut cfg, value);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ value as u64);
    let model = CasaModel::new(cfg.clone(), spec.seed).map_err(|e| e.to_string())?;
    let in_shape = match spec.scope {
        BenchScope::Model => [cfg.n_vars, cfg.input_len],
        BenchScope::Attention => [cfg.n_vars, cfg.d_model],
    };
    let inputs: Vec<Tensor> = (0..spec.batch)
        .map(|_| gaussian(in_shape, &mut rng))
        .collect();
    let targets: Vec<Tensor> = (0..spec.batch)
        .map(|_| gaussian([cfg.n_vars, cfg.horizon], &mut rng))
        .collect();

    let (warm, peak) = peak_bytes(|| iteration(&model, &inputs, &targets, spec));
    warm.map_err(|e| e.to_string())?;
    if let Some(budget) = spec.memory_budget_bytes {
        if peak > budget {
            return Err(format!(
                "out of memory: peak {peak} bytes exceeds budget {budget}"
            ));
        }
    }
    let mut times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let start = Instant::now();
        iteration(&model, &inputs, &targets, spec).map_err(|e| e.to_string())?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(Measurement {
        seconds: median(times),
        peak_bytes: peak,
    })
}

/// Checks the sweep before any work: at least [`MIN_POINTS`] strictly
/// increasing positive values.
pub fn check_values(values: &[usize]) -> Result<(), CliError> {
    if values.len() < MIN_POINTS {
        return Err(CliError::InsufficientPoints(format!(
            "need at least {MIN_POINTS} axis values, got {}",
            values.len()
        )));
    }
    if values[0] == 0 || values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Usage(
            "axis values must be positive and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Measures every point serially. Failures, including panics and budget
/// overruns, are kept as failed points; slopes use the rest.
pub fn run(
    spec: &BenchSpec,
    mut on_point: impl FnMut(&BenchPoint),
) -> Result<ScalingReport, CliError> {
    check_values(&spec.values)?;
    let mut points = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let outcome = catch_unwind(AssertUnwindSafe(|| run_point(spec, value)))
            .unwrap_or_else(|p| Err(panic_message(p)));
        let point = BenchPoint { value, outcome };
        on_point(&point);
        points.push(point);
    }
    let ok: Vec<(f64, &Measurement)> = points
        .iter()
        .filter_map(|p| p.outcome.as_ref().ok().map(|m| (p.value as f64, m)))
        .collect();
    if ok.len() < MIN_POINTS {
        return Err(CliError::InsufficientPoints(format!(
            "only {} of {} points succeeded, need {MIN_POINTS}",
            ok.len(),
            points.len()
        )));
    }
    let xs: Vec<f64> = ok.iter().map(|(x, _)| *x).collect();
    let secs: Vec<f64> = ok.iter().map(|(_, m)| m.seconds).collect();
    let bytes: Vec<f64> = ok.iter().map(|(_, m)| m.peak_bytes as f64).collect();
    let time_slope =
        loglog_slope(&xs, &secs).map_err(|e| CliError::InsufficientPoints(e.to_string()))?;
    let memory_slope =
        loglog_slope(&xs, &bytes).map_err(|e| CliError::InsufficientPoints(e.to_string()))?;
    Ok(ScalingReport {
        axis: spec.axis,
        spec: spec.clone(),
        points,
        time_slope,
        memory_slope,
    })
}
