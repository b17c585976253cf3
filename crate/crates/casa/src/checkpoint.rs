//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CASA" | u32 version
//! u32 len | model config text (utf-8)
//! u32 count | count x (u32 len | name | u32 rank | rank x u64 dim | f32 data)
//! u8 has_optim | [f64 lr, beta1, beta2, eps, weight_decay | u64 t | f64 m, v per tensor]
//! u32 records | records x (u64 epoch | f64 train_mse | f64 val_mse | f64 lr)
//! u32 crc32 of everything above
//! ```

use std::path::{Path, PathBuf};

use casa_core::train::{EpochRecord, OptimState};
use casa_core::{CasaModel, ModelConfig, ParamSet, Tensor};

use crate::config::{model_config_text, parse_model_config};

pub const MAGIC: &[u8; 4] = b"CASA";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not fit the configuration: {0}")]
    ShapeMismatch(String),
}

impl CheckpointError {
    pub fn is_mismatch(&self) -> bool {
        matches!(self, CheckpointError::ShapeMismatch(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CasaModel,
    pub optim: Option<OptimState>,
    pub log: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Fails with `ShapeMismatch` unless the stored model was built with
    /// `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let got = self.model.config();
        if got == expected {
            return Ok(());
        }
        let mut diffs = Vec::new();
        let a = model_config_text(expected);
        let b = model_config_text(got);
        for (x, y) in a.lines().zip(b.lines()) {
            if x != y {
                let key = x.split('=').next().unwrap_or("").trim();
                let want = x.split('=').nth(1).unwrap_or("").trim();
                let have = y.split('=').nth(1).unwrap_or("").trim();
                diffs.push(format!("{key}: config {want}, checkpoint {have}"));
            }
        }
        Err(CheckpointError::ShapeMismatch(diffs.join("; ")))
    }
}

pub fn encode(model: &CasaModel, optim: Option<&OptimState>, log: &[EpochRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model_config_text(model.config());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in value.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    match optim {
        Some(o) => {
            out.push(1);
            for x in [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&o.t.to_le_bytes());
            for (m, v) in o.m.iter().zip(&o.v) {
                for x in m.data().iter().chain(v.data()) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }

    out.extend_from_slice(&(log.len() as u32).to_le_bytes());
    for r in log {
        out.extend_from_slice(&(r.epoch as u64).to_le_bytes());
        for x in [r.train_mse, r.val_mse, r.lr] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated { offset: self.pos })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K], CheckpointError> {
        Ok(self.take(K)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        self.array().map(u64::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        self.array().map(f32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        self.array().map(f64::from_le_bytes)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Malformed("string is not utf-8".into()))
    }

    /// Checks that `count` items of `size` bytes can still be read.
    fn reserve(&self, count: usize, size: usize) -> Result<(), CheckpointError> {
        count
            .checked_mul(size)
            .filter(|&b| b <= self.buf.len() - self.pos)
            .map(|_| ())
            .ok_or(CheckpointError::Truncated { offset: self.pos })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated {
            offset: bytes.len(),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };

    let config =
        parse_model_config(&r.string()?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        r.reserve(rank, 8)?;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                CheckpointError::Malformed(format!("`{name}` has an overflowing shape"))
            })?;
        r.reserve(numel, 4)?;
        let data: Vec<f64> = (0..numel)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<_, _>>()?;
        let tensor =
            Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params.push(name, tensor);
    }
    let model = CasaModel::from_params(config, params)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let optim = match r.u8()? {
        0 => None,
        1 => {
            let [lr, beta1, beta2, eps, weight_decay] =
                [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
            let t = r.u64()?;
            let mut m = Vec::with_capacity(model.params().len());
            let mut v = Vec::with_capacity(model.params().len());
            for p in model.params().values() {
                r.reserve(2 * p.numel(), 8)?;
                let mut read = || -> Result<Tensor, CheckpointError> {
                    let data = (0..p.numel())
                        .map(|_| r.f64())
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(Tensor::new(p.shape(), data).expect("shape from parameter"))
                };
                m.push(read()?);
                v.push(read()?);
            }
            Some(OptimState {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
                t,
                m,
                v,
            })
        }
        flag => return Err(CheckpointError::Malformed(format!("optimizer flag {flag}"))),
    };

    let records = r.u32()? as usize;
    r.reserve(records, 32)?;
    let mut log = Vec::with_capacity(records);
    for _ in 0..records {
        log.push(EpochRecord {
            epoch: r.u64()? as usize,
            train_mse: r.f64()?,
            val_mse: r.f64()?,
            lr: r.f64()?,
        });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { model, optim, log })
}

pub fn save(
    path: &Path,
    model: &CasaModel,
    optim: Option<&OptimState>,
    log: &[EpochRecord],
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(model, optim, log)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
