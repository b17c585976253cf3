//! Flat `section.key = value` run configuration.
//!
//! Files may contain blank lines and `#` comments. `--set key=value`
//! overrides are applied after the file. [`RunConfig::to_text`] writes every
//! key, so a resolved file alone reproduces a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use casa_core::data::SplitSpec;
use casa_core::train::TrainConfig;
use casa_core::{AttentionKind, ModelConfig, SoftmaxAxis};

pub const DATA_DIR_ENV: &str = "CASA_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: `{key}` set twice")]
    Duplicate { key: String, line: usize },
    #[error("`{key}`: cannot use `{value}`, expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("override `{0}` must look like key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitMode {
    /// Calendar split for files named `ETTh*`/`ETTm*`, ratios otherwise.
    Auto,
    Ratio,
    EttHourly,
    Ett15Min,
}

impl SplitMode {
    fn as_str(self) -> &'static str {
        match self {
            SplitMode::Auto => "auto",
            SplitMode::Ratio => "ratio",
            SplitMode::EttHourly => "ett-hourly",
            SplitMode::Ett15Min => "ett-15min",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchScope {
    /// Whole forecaster per instance.
    Model,
    /// One attention sublayer on a random `[N, D]` token matrix.
    Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub reps: usize,
    pub batch: usize,
    pub backward: bool,
    pub scope: BenchScope,
    /// Points whose single-instance peak exceeds this are recorded as failed.
    /// 0 disables the check.
    pub memory_budget_mb: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub split: SplitMode,
    pub ratios: (f64, f64, f64),
    pub delimiter: u8,
    pub date_column: Option<String>,
    pub stride: usize,
    /// `None` takes the variate count from the data.
    pub n_vars: Option<usize>,
    pub input_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    /// `None` follows `D`.
    pub score_hidden: Option<usize>,
    pub ae_depth: usize,
    /// `None` follows `2D`.
    pub ffn_dim: Option<usize>,
    pub dropout: f64,
    pub score_dropout: f64,
    pub softmax_axis: SoftmaxAxis,
    pub use_revin: bool,
    pub attention: AttentionKind,
    pub train: TrainConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 96, 96);
        let train = TrainConfig::default();
        RunConfig {
            data_path: PathBuf::from("ETTh1.csv"),
            split: SplitMode::Auto,
            ratios: (0.7, 0.1, 0.2),
            delimiter: b',',
            date_column: None,
            stride: 1,
            n_vars: None,
            input_len: m.input_len,
            horizon: m.horizon,
            d_model: m.d_model,
            n_blocks: m.n_blocks,
            kernel_size: m.kernel_size,
            score_hidden: None,
            ae_depth: m.ae_depth,
            ffn_dim: None,
            dropout: m.dropout,
            score_dropout: m.score_dropout,
            softmax_axis: m.softmax_axis,
            use_revin: m.use_revin,
            attention: m.attention,
            seed: train.seed,
            train,
            out: PathBuf::from("out"),
            bench: BenchSettings {
                reps: 3,
                batch: 16,
                backward: false,
                scope: BenchScope::Model,
                memory_budget_mb: 0,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "true or false",
        }),
    }
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>, ConfigError> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value, "a positive integer or `auto`").map(Some)
    }
}

fn auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

/// Parses `key = value` lines into ordered pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if pairs.iter().any(|(k, _)| k == key) {
            return Err(ConfigError::Duplicate {
                key: key.to_string(),
                line: i + 1,
            });
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (`key=value` each). A relative
    /// data path is resolved against `data_dir` when one is given.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[String],
        data_dir: Option<&Path>,
    ) -> Result<Self, ConfigError> {
        Self::resolve_from(RunConfig::default(), file, overrides, data_dir)
    }

    /// As [`RunConfig::resolve`] with `base` in place of the defaults.
    pub fn resolve_from(
        base: RunConfig,
        file: Option<&Path>,
        overrides: &[String],
        data_dir: Option<&Path>,
    ) -> Result<Self, ConfigError> {
        let mut cfg = base;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for (k, v) in parse_pairs(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        cfg.apply_overrides(overrides)?;
        if let Some(dir) = data_dir {
            if cfg.data_path.is_relative() {
                cfg.data_path = dir.join(&cfg.data_path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Data directory from the environment, if set and non-empty.
    pub fn env_data_dir() -> Option<PathBuf> {
        std::env::var_os(DATA_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(o.clone()))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let pos = "a positive integer";
        let real = "a number";
        match key {
            "data.path" => self.data_path = PathBuf::from(value),
            "data.split" => {
                self.split = match value {
                    "auto" => SplitMode::Auto,
                    "ratio" => SplitMode::Ratio,
                    "ett-hourly" => SplitMode::EttHourly,
                    "ett-15min" => SplitMode::Ett15Min,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "auto, ratio, ett-hourly or ett-15min",
                        })
                    }
                }
            }
            "data.ratios" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse(key, p.trim(), "three comma-separated fractions"))
                    .collect::<Result<_, _>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        expected: "three comma-separated fractions",
                    });
                };
                self.ratios = (a, b, c);
            }
            "data.delimiter" => {
                let d = match value {
                    "tab" | "\\t" => b'\t',
                    v if v.len() == 1 && v.is_ascii() => v.as_bytes()[0],
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "a single ASCII character or `tab`",
                        })
                    }
                };
                self.delimiter = d;
            }
            "data.date_column" => {
                self.date_column =
                    (!value.is_empty() && value != "first").then(|| value.to_string())
            }
            "data.stride" => self.stride = parse(key, value, pos)?,
            "model.N" => self.n_vars = parse_auto(key, value)?,
            "model.L" => self.input_len = parse(key, value, pos)?,
            "model.H" => self.horizon = parse(key, value, pos)?,
            "model.D" => self.d_model = parse(key, value, pos)?,
            "model.M" => self.n_blocks = parse(key, value, pos)?,
            "model.k" => self.kernel_size = parse(key, value, pos)?,
            "model.c_hid" => self.score_hidden = parse_auto(key, value)?,
            "model.ae_depth" => self.ae_depth = parse(key, value, pos)?,
            "model.ffn_dim" => self.ffn_dim = parse_auto(key, value)?,
            "model.dropout" => self.dropout = parse(key, value, real)?,
            "model.score_dropout" => self.score_dropout = parse(key, value, real)?,
            "model.softmax_axis" => {
                self.softmax_axis = value.parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    expected: "hidden or variate",
                })?
            }
            "model.revin" => self.use_revin = parse_bool(key, value)?,
            "attention" => {
                self.attention = value.parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    expected: "casa or baseline",
                })?
            }
            "train.epochs" => self.train.epochs = parse(key, value, pos)?,
            "train.batch_size" => self.train.batch_size = parse(key, value, pos)?,
            "train.lr" => self.train.lr = parse(key, value, real)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value, real)?,
            "train.patience" => self.train.patience = parse(key, value, "a nonnegative integer")?,
            "train.lr_patience" => self.train.lr_patience = parse(key, value, pos)?,
            "train.lr_factor" => self.train.lr_factor = parse(key, value, real)?,
            "train.shuffle" => self.train.shuffle = parse_bool(key, value)?,
            "train.precision" => {
                self.train.store_f32 = match value {
                    "f32" => true,
                    "f64" => false,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "f32 or f64",
                        })
                    }
                }
            }
            "seed" => self.seed = parse(key, value, "an unsigned integer")?,
            "out" => self.out = PathBuf::from(value),
            "bench.reps" => self.bench.reps = parse(key, value, pos)?,
            "bench.batch" => self.bench.batch = parse(key, value, pos)?,
            "bench.backward" => self.bench.backward = parse_bool(key, value)?,
            "bench.scope" => {
                self.bench.scope = match value {
                    "model" => BenchScope::Model,
                    "attention" => BenchScope::Attention,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "model or attention",
                        })
                    }
                }
            }
            "bench.memory_budget_mb" => {
                self.bench.memory_budget_mb = parse(key, value, "a nonnegative integer")?
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.stride == 0 {
            return invalid("data.stride must be positive".into());
        }
        if self.bench.reps == 0 || self.bench.batch == 0 {
            return invalid("bench.reps and bench.batch must be positive".into());
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_config(self.n_vars.unwrap_or(1))
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, n_vars: usize) -> ModelConfig {
        let mut m =
            ModelConfig::new(n_vars, self.input_len, self.horizon).with_d_model(self.d_model);
        m.n_blocks = self.n_blocks;
        m.kernel_size = self.kernel_size;
        if let Some(c) = self.score_hidden {
            m.score_hidden = c;
        }
        m.ae_depth = self.ae_depth;
        if let Some(f) = self.ffn_dim {
            m.ffn_dim = f;
        }
        m.dropout = self.dropout;
        m.score_dropout = self.score_dropout;
        m.softmax_axis = self.softmax_axis;
        m.use_revin = self.use_revin;
        m.attention = self.attention;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// The split for a data file, resolving [`SplitMode::Auto`] by file name.
    pub fn split_spec(&self) -> SplitSpec {
        let name = self
            .data_path
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        let mode = match self.split {
            SplitMode::Auto if name.starts_with("ETTh") => SplitMode::EttHourly,
            SplitMode::Auto if name.starts_with("ETTm") => SplitMode::Ett15Min,
            SplitMode::Auto => SplitMode::Ratio,
            m => m,
        };
        match mode {
            SplitMode::EttHourly => SplitSpec::ETT_HOURLY,
            SplitMode::Ett15Min => SplitSpec::ETT_15MIN,
            _ => SplitSpec::Ratio {
                train: self.ratios.0,
                val: self.ratios.1,
                test: self.ratios.2,
            },
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let delim = match self.delimiter {
            b'\t' => "tab".to_string(),
            d => (d as char).to_string(),
        };
        let split = match self.split_spec() {
            SplitSpec::Ratio { .. } if self.split == SplitMode::Auto => "ratio",
            SplitSpec::EttCalendar { steps_per_day: 24 } => "ett-hourly",
            SplitSpec::EttCalendar { .. } => "ett-15min",
            _ => self.split.as_str(),
        };
        let lines: Vec<(&str, String)> = vec![
            ("data.path", self.data_path.display().to_string()),
            ("data.split", split.to_string()),
            (
                "data.ratios",
                format!("{},{},{}", self.ratios.0, self.ratios.1, self.ratios.2),
            ),
            ("data.delimiter", delim),
            (
                "data.date_column",
                self.date_column.clone().unwrap_or_else(|| "first".into()),
            ),
            ("data.stride", self.stride.to_string()),
            ("model.N", auto(self.n_vars)),
            ("model.L", self.input_len.to_string()),
            ("model.H", self.horizon.to_string()),
            ("model.D", self.d_model.to_string()),
            ("model.M", self.n_blocks.to_string()),
            ("model.k", self.kernel_size.to_string()),
            ("model.c_hid", auto(self.score_hidden)),
            ("model.ae_depth", self.ae_depth.to_string()),
            ("model.ffn_dim", auto(self.ffn_dim)),
            ("model.dropout", self.dropout.to_string()),
            ("model.score_dropout", self.score_dropout.to_string()),
            ("model.softmax_axis", self.softmax_axis.as_str().to_string()),
            ("model.revin", self.use_revin.to_string()),
            ("attention", self.attention.as_str().to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.patience", self.train.patience.to_string()),
            ("train.lr_patience", self.train.lr_patience.to_string()),
            ("train.lr_factor", self.train.lr_factor.to_string()),
            ("train.shuffle", self.train.shuffle.to_string()),
            (
                "train.precision",
                if self.train.store_f32 { "f32" } else { "f64" }.to_string(),
            ),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("bench.reps", self.bench.reps.to_string()),
            ("bench.batch", self.bench.batch.to_string()),
            ("bench.backward", self.bench.backward.to_string()),
            (
                "bench.scope",
                match self.bench.scope {
                    BenchScope::Model => "model",
                    BenchScope::Attention => "attention",
                }
                .to_string(),
            ),
            (
                "bench.memory_budget_mb",
                self.bench.memory_budget_mb.to_string(),
            ),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// `model.*` keys plus `attention` for a concrete model.
pub fn model_config_text(m: &ModelConfig) -> String {
    format!(
        "model.N = {}\nmodel.L = {}\nmodel.H = {}\nmodel.D = {}\nmodel.M = {}\nmodel.k = {}\nmodel.c_hid = {}\n\
         model.ae_depth = {}\nmodel.ffn_dim = {}\nmodel.dropout = {}\nmodel.score_dropout = {}\n\
         model.softmax_axis = {}\nmodel.revin = {}\nattention = {}\n",
        m.n_vars,
        m.input_len,
        m.horizon,
        m.d_model,
        m.n_blocks,
        m.kernel_size,
        m.score_hidden,
        m.ae_depth,
        m.ffn_dim,
        m.dropout,
        m.score_dropout,
        m.softmax_axis.as_str(),
        m.use_revin,
        m.attention.as_str()
    )
}

/// Inverse of [`model_config_text`]; every key must be present.
pub fn parse_model_config(text: &str) -> Result<ModelConfig, ConfigError> {
    let pairs = parse_pairs(text)?;
    let mut cfg = RunConfig::default();
    let required = [
        "model.N",
        "model.L",
        "model.H",
        "model.D",
        "model.M",
        "model.k",
        "model.c_hid",
        "model.ae_depth",
        "model.ffn_dim",
        "model.dropout",
        "model.score_dropout",
        "model.softmax_axis",
        "model.revin",
        "attention",
    ];
    for key in required {
        if !pairs.iter().any(|(k, _)| k == key) {
            return Err(ConfigError::Invalid(format!("model config lacks `{key}`")));
        }
    }
    for (k, v) in &pairs {
        if !required.contains(&k.as_str()) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        cfg.set(k, v)?;
    }
    let n = cfg
        .n_vars
        .ok_or_else(|| ConfigError::Invalid("model.N must be a number".into()))?;
    let m = cfg.model_config(n);
    m.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(m)
}
