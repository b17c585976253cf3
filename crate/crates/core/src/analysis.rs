//! Correlation structure of forecasts (Pearson matrices, KDE of their
//! entries, matrix similarity metrics) and log-log slope fitting for the
//! scaling benchmark.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// PDF grid used when comparing correlation distributions.
pub const PDF_GRID_POINTS: usize = 512;
pub const PDF_GRID_RANGE: (f64, f64) = (-1.2, 1.2);
/// Dynamic range of a correlation matrix, used by SSIM.
pub const CORRELATION_RANGE: f64 = 2.0;
/// Bandwidth used when Scott's rule degenerates (one sample or zero spread).
pub const FALLBACK_BANDWIDTH: f64 = 1e-2;

/// Pearson matrix plus the variates whose standard deviation was zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    pub matrix: Tensor,
    pub degenerate: Vec<bool>,
}

/// Pearson correlation between the columns of `series[T, N]`. A constant
/// column gets zeros off the diagonal and is flagged in `degenerate`.
pub fn correlation_matrix(series: &Tensor) -> Result<Correlation> {
    if series.rank() != 2 || series.shape()[0] < 2 {
        return Err(Error::InsufficientData(alloc::format!(
            "correlation needs at least 2 rows, got shape {:?}",
            series.shape()
        )));
    }
    let (t, n) = (series.shape()[0], series.shape()[1]);
    let mut mean = alloc::vec![0.0; n];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(series.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut cov = alloc::vec![0.0; n * n];
    let mut centered = alloc::vec![0.0; n];
    for r in 0..t {
        for ((c, v), m) in centered.iter_mut().zip(series.row(r)).zip(&mean) {
            *c = v - m;
        }
        for i in 0..n {
            for j in i..n {
                cov[i * n + j] += centered[i] * centered[j];
            }
        }
    }
    let sd: Vec<f64> = (0..n).map(|i| libm::sqrt(cov[i * n + i])).collect();
    let degenerate: Vec<bool> = sd.iter().map(|&s| s.is_nan() || s <= 0.0).collect();
    let mut out = alloc::vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = if degenerate[i] || degenerate[j] {
                0.0
            } else {
                (cov[i * n + j] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            };
            out[i * n + j] = r;
            out[j * n + i] = r;
        }
    }
    Ok(Correlation {
        matrix: Tensor::new([n, n], out)?,
        degenerate,
    })
}

/// Strict upper-triangle entries of a square matrix, row by row.
pub fn off_diagonal(m: &Tensor) -> Vec<f64> {
    let n = m.shape()[0];
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        out.extend_from_slice(&m.row(i)[i + 1..]);
    }
    out
}

pub fn linspace(start: f64, end: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => alloc::vec![start],
        _ => {
            let step = (end - start) / (points - 1) as f64;
            (0..points).map(|i| start + step * i as f64).collect()
        }
    }
}

pub fn pdf_grid() -> Vec<f64> {
    linspace(PDF_GRID_RANGE.0, PDF_GRID_RANGE.1, PDF_GRID_POINTS)
}

/// Scott's rule `n^(-1/5)·σ̂` with the unbiased sample deviation, or
/// [`FALLBACK_BANDWIDTH`] when that is not positive.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return FALLBACK_BANDWIDTH;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
    let h = libm::pow(n as f64, -0.2) * libm::sqrt(var);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        FALLBACK_BANDWIDTH
    }
}

/// Gaussian kernel density estimate evaluated on `grid`.
pub fn gaussian_kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !bandwidth.is_finite() || bandwidth <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "bandwidth {bandwidth} must be positive"
        )));
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth * libm::sqrt(2.0 * core::f64::consts::PI));
    Ok(grid
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / bandwidth;
                    libm::exp(-0.5 * u * u)
                })
                .sum::<f64>()
        })
        .collect())
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean of squared differences between two equally long sequences.
pub fn mean_squared_difference(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()).max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na * nb))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatrixMetrics {
    pub mse: f64,
    pub cosine: f64,
}

pub fn matrix_metrics(a: &Tensor, b: &Tensor) -> Result<MatrixMetrics> {
    same_shape("matrix metrics", a, b)?;
    Ok(MatrixMetrics {
        mse: mean_squared_difference(a.data(), b.data()),
        cosine: cosine_similarity(a.data(), b.data())?,
    })
}

/// Single-window SSIM over the whole matrix with dynamic range `range`.
pub fn ssim_global(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let n = a.numel() as f64;
    let (c1, c2) = (
        (0.01 * range) * (0.01 * range),
        (0.03 * range) * (0.03 * range),
    );
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    Ok(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

/// SSIM of two correlation matrices.
pub fn ssim_matrix(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_global(a, b, CORRELATION_RANGE)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(alloc::format!(
            "slope needs at least 2 paired points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::InvalidConfig(
            "log-log fit needs positive values".into(),
        ));
    }
    let lx: Vec<f64> = x.iter().map(|v| libm::log(*v)).collect();
    let ly: Vec<f64> = y.iter().map(|v| libm::log(*v)).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidConfig(
            "log-log fit needs distinct x values".into(),
        ));
    }
    Ok(sxy / sxx)
}

/// Correlation structure of one source (ground truth or a model).
#[derive(Clone, Debug)]
pub struct SourceCorrelation {
    pub name: String,
    pub correlation: Correlation,
    pub bandwidth: f64,
    /// KDE of the off-diagonal entries on [`pdf_grid`].
    pub density: Vec<f64>,
}

/// Metrics of one source against the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub mse: f64,
    /// `None` when a matrix has zero norm.
    pub cosine: Option<f64>,
    pub ssim: f64,
    pub pdf_mse: f64,
}

#[derive(Clone, Debug)]
pub struct CorrelationReport {
    pub grid: Vec<f64>,
    /// Ground truth first, then each model in the order given.
    pub sources: Vec<SourceCorrelation>,
    /// One row per source, ground truth included.
    pub rows: Vec<ComparisonRow>,
}

fn source(name: &str, series: &Tensor, grid: &[f64]) -> Result<SourceCorrelation> {
    let correlation = correlation_matrix(series)?;
    let mut samples = off_diagonal(&correlation.matrix);
    if samples.is_empty() {
        samples.push(1.0);
    }
    let bandwidth = scott_bandwidth(&samples);
    let density = gaussian_kde(&samples, bandwidth, grid)?;
    Ok(SourceCorrelation {
        name: String::from(name),
        correlation,
        bandwidth,
        density,
    })
}

/// Builds the report from pooled series `[T', N]`: the ground truth and one
/// prediction series per model.
pub fn correlation_report(truth: &Tensor, models: &[(&str, &Tensor)]) -> Result<CorrelationReport> {
    let grid = pdf_grid();
    let mut sources = alloc::vec![source("truth", truth, &grid)?];
    for (name, series) in models {
        same_shape("correlation report", truth, series)?;
        sources.push(source(name, series, &grid)?);
    }
    let reference = &sources[0];
    let rows = sources
        .iter()
        .map(|s| {
            let a = &s.correlation.matrix;
            let b = &reference.correlation.matrix;
            Ok(ComparisonRow {
                name: s.name.clone(),
                mse: mean_squared_difference(a.data(), b.data()),
                cosine: cosine_similarity(a.data(), b.data()).ok(),
                ssim: ssim_matrix(a, b)?,
                pdf_mse: mean_squared_difference(&s.density, &reference.density),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationReport {
        grid,
        sources,
        rows,
    })
}
