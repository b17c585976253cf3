//! Chronological splits, train-only standardization and sliding windows over
//! a `T×N` series table. CSV parsing lives in the `casa` crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// A multivariate series: `values[t, n]` with one timestamp per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    timestamps: Vec<String>,
    values: Tensor,
    variate_names: Vec<String>,
}

impl SeriesTable {
    pub fn new(
        timestamps: Vec<String>,
        values: Tensor,
        variate_names: Vec<String>,
    ) -> Result<Self> {
        let ok = values.rank() == 2
            && values.shape()[0] == timestamps.len()
            && values.shape()[1] == variate_names.len();
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "series table",
                lhs: values.shape().to_vec(),
                rhs: alloc::vec![timestamps.len(), variate_names.len()],
            });
        }
        Ok(SeriesTable {
            timestamps,
            values,
            variate_names,
        })
    }

    /// Steps `T`.
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Variates `N`.
    pub fn variates(&self) -> usize {
        self.variate_names.len()
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn variate_names(&self) -> &[String] {
        &self.variate_names
    }

    pub fn value(&self, t: usize, n: usize) -> f64 {
        self.values.at(t, n)
    }

    /// Rows `start..start+len` transposed to `[N, len]`.
    pub fn window(&self, start: usize, len: usize) -> Tensor {
        let n = self.variates();
        let mut out = alloc::vec![0.0; n * len];
        for t in 0..len {
            for (v, &x) in self.values.row(start + t).iter().enumerate() {
                out[v * len + t] = x;
            }
        }
        Tensor::new([n, len], out).expect("non-empty window")
    }

    fn with_values(&self, values: Tensor) -> Self {
        SeriesTable {
            timestamps: self.timestamps.clone(),
            values,
            variate_names: self.variate_names.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    /// Fractions of `T` for train/val/test; the test share is floored first
    /// and validation takes the remainder.
    Ratio { train: f64, val: f64, test: f64 },
    /// 12/4/4 months of 30 days each, at `steps_per_day` samples per day.
    EttCalendar { steps_per_day: usize },
}

impl SplitSpec {
    pub const DEFAULT_RATIO: SplitSpec = SplitSpec::Ratio {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };
    pub const ETT_HOURLY: SplitSpec = SplitSpec::EttCalendar { steps_per_day: 24 };
    pub const ETT_15MIN: SplitSpec = SplitSpec::EttCalendar { steps_per_day: 96 };
}

/// Index ranges of the three splits. Validation and test ranges start `L`
/// steps before their boundary so their first window has full history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn resolve_split(
    total: usize,
    spec: SplitSpec,
    input_len: usize,
    horizon: usize,
) -> Result<SplitRanges> {
    if total < input_len + horizon {
        return Err(Error::InsufficientData(format!(
            "{total} steps cannot hold one window of L={input_len} + H={horizon}"
        )));
    }
    let (train_end, val_end, test_end) = match spec {
        SplitSpec::Ratio { train, val, test } => {
            let ok = [train, val, test]
                .iter()
                .all(|f| (0.0..=1.0).contains(f) && *f > 0.0)
                && train + val + test <= 1.0 + 1e-9;
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "split ratios {train}/{val}/{test} must be positive and sum to at most 1"
                )));
            }
            let n_train = libm::floor(total as f64 * train) as usize;
            let n_test = libm::floor(total as f64 * test) as usize;
            let n_val = total - n_train - n_test;
            (n_train, n_train + n_val, total)
        }
        SplitSpec::EttCalendar { steps_per_day } => {
            let month = 30 * steps_per_day;
            let (a, b, c) = (12 * month, 16 * month, 20 * month);
            if c > total {
                return Err(Error::InsufficientData(format!(
                    "calendar split needs {c} steps, table has {total}"
                )));
            }
            (a, b, c)
        }
    };
    let ranges = SplitRanges {
        train: 0..train_end,
        val: train_end.saturating_sub(input_len)..val_end,
        test: val_end.saturating_sub(input_len)..test_end,
    };
    for (name, r) in [
        ("train", &ranges.train),
        ("val", &ranges.val),
        ("test", &ranges.test),
    ] {
        if r.len() < input_len + horizon {
            return Err(Error::InsufficientData(format!(
                "{name} range {r:?} is shorter than L+H = {}",
                input_len + horizon
            )));
        }
    }
    Ok(ranges)
}

/// Per-variate standardization fitted on the training range.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    const MIN_STD: f64 = 1e-8;

    pub fn fit(table: &SeriesTable, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > table.len() {
            return Err(Error::InsufficientData(format!(
                "invalid train range {train:?}"
            )));
        }
        let n = table.variates();
        let count = train.len() as f64;
        let mut mean = alloc::vec![0.0; n];
        for t in train.clone() {
            for (m, v) in mean.iter_mut().zip(table.values.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = alloc::vec![0.0; n];
        for t in train {
            for ((s, v), m) in var.iter_mut().zip(table.values.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| libm::sqrt(s / count)).collect();
        Ok(Scaler { mean, std })
    }

    fn divisor(&self, n: usize) -> f64 {
        if self.std[n] < Self::MIN_STD {
            1.0
        } else {
            self.std[n]
        }
    }

    pub fn transform(&self, table: &SeriesTable) -> SeriesTable {
        let mut values = table.values.clone();
        let n = table.variates();
        for (i, v) in values.data_mut().iter_mut().enumerate() {
            let c = i % n;
            *v = (*v - self.mean[c]) / self.divisor(c);
        }
        table.with_values(values)
    }

    pub fn inverse(&self, table: &SeriesTable) -> SeriesTable {
        let mut values = table.values.clone();
        let n = table.variates();
        for (i, v) in values.data_mut().iter_mut().enumerate() {
            let c = i % n;
            *v = *v * self.divisor(c) + self.mean[c];
        }
        table.with_values(values)
    }
}

/// Fits a [`Scaler`] on `train` and standardizes the whole table with it.
pub fn fit_apply_scaler(table: &SeriesTable, train: Range<usize>) -> Result<(Scaler, SeriesTable)> {
    let scaler = Scaler::fit(table, train)?;
    let scaled = scaler.transform(table);
    Ok((scaler, scaled))
}

/// Sliding windows over one split range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Windows {
    pub input_len: usize,
    pub horizon: usize,
    /// Start index of each window's input, chronological.
    pub starts: Vec<usize>,
    pub batch_size: usize,
}

/// One batch: `inputs[B, N, L]`, `targets[B, N, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    fn slice(t: &Tensor, i: usize) -> Tensor {
        let (n, l) = (t.shape()[1], t.shape()[2]);
        Tensor::new([n, l], t.data()[i * n * l..(i + 1) * n * l].to_vec()).expect("batch slice")
    }

    pub fn input(&self, i: usize) -> Tensor {
        Self::slice(&self.inputs, i)
    }

    pub fn target(&self, i: usize) -> Tensor {
        Self::slice(&self.targets, i)
    }
}

pub fn make_windows(
    range: Range<usize>,
    input_len: usize,
    horizon: usize,
    stride: usize,
    batch_size: usize,
) -> Result<Windows> {
    if stride == 0 || batch_size == 0 || input_len == 0 || horizon == 0 {
        return Err(Error::InvalidConfig(
            "L, H, stride and batch size must be positive".into(),
        ));
    }
    let span = input_len + horizon;
    if range.len() < span {
        return Err(Error::InsufficientData(format!(
            "range {range:?} shorter than L+H = {span}"
        )));
    }
    let starts = (range.start..=range.end - span).step_by(stride).collect();
    Ok(Windows {
        input_len,
        horizon,
        starts,
        batch_size,
    })
}

impl Windows {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// `(input[N, L], target[N, H])` for the window starting at `start`.
    pub fn sample(&self, table: &SeriesTable, start: usize) -> (Tensor, Tensor) {
        (
            table.window(start, self.input_len),
            table.window(start + self.input_len, self.horizon),
        )
    }

    /// Window starts in chronological order, or shuffled by `rng`.
    pub fn order(&self, rng: Option<&mut dyn RngCore>) -> Vec<usize> {
        let mut order = self.starts.clone();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order
    }

    /// Materialized batches of at most `batch_size` windows.
    pub fn batches<'a>(
        &'a self,
        table: &'a SeriesTable,
        rng: Option<&mut dyn RngCore>,
    ) -> impl Iterator<Item = WindowBatch> + 'a {
        let order = self.order(rng);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |starts| {
            let n = table.variates();
            let b = starts.len();
            let mut inputs = Vec::with_capacity(b * n * self.input_len);
            let mut targets = Vec::with_capacity(b * n * self.horizon);
            for &s in &starts {
                let (x, y) = self.sample(table, s);
                inputs.extend_from_slice(x.data());
                targets.extend_from_slice(y.data());
            }
            WindowBatch {
                inputs: Tensor::new([b, n, self.input_len], inputs).expect("batch"),
                targets: Tensor::new([b, n, self.horizon], targets).expect("batch"),
                starts,
            }
        })
    }
}
