//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `PICCKPT1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then the parameter blob. The header's `layout`
//! table lists every tensor as `(name, shape, offset)` with byte offsets into
//! the blob; values are little-endian `f32`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::error::{io_err, Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PICCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Rl,
}

/// Where the next run would pick up its random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub model_config: ModelConfig,
    pub params: ModelParams,
    /// Frozen reward model used during RL; `None` means `params` is the listener.
    pub listener: Option<ModelParams>,
    pub vocab_hash: String,
    pub train_config: TrainConfig,
    /// Epoch (1-based) whose parameters are stored.
    pub epoch: usize,
    pub dev_history: Vec<f64>,
    pub rng: RngState,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    /// Parameters that score captions: the frozen reward model when present.
    pub fn listener_params(&self) -> &ModelParams {
        self.listener.as_ref().unwrap_or(&self.params)
    }

    pub fn best_dev_cider(&self) -> f64 {
        self.dev_history
            .get(self.epoch.wrapping_sub(1))
            .copied()
            .unwrap_or(f64::NAN)
    }
}

#[derive(Serialize, Deserialize)]
struct LayoutEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    phase: Phase,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab_hash: String,
    epoch: usize,
    dev_history: Vec<f64>,
    rng: RngState,
    has_listener: bool,
    optimizer: Option<OptimizerHeader>,
    layout: Vec<LayoutEntry>,
}

fn groups(ckpt: &Checkpoint) -> Vec<(&'static str, &ModelParams)> {
    let mut g = vec![("params", &ckpt.params)];
    if let Some(l) = &ckpt.listener {
        g.push(("listener", l));
    }
    if let Some(o) = &ckpt.optimizer {
        g.push(("adam.m", &o.m));
        g.push(("adam.v", &o.v));
    }
    g
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut layout = Vec::new();
    let mut blob = Vec::new();
    for (prefix, params) in groups(ckpt) {
        for (name, m) in params.tensors() {
            layout.push(LayoutEntry {
                name: format!("{prefix}.{name}"),
                shape: [m.rows, m.cols],
                offset: blob.len(),
            });
            for &v in &m.data {
                let f = v as f32;
                if f as f64 != v && v.is_finite() {
                    return Err(Error::Checkpoint(format!("{prefix}.{name} is not f32-representable")));
                }
                blob.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        phase: ckpt.phase,
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        vocab_hash: ckpt.vocab_hash.clone(),
        epoch: ckpt.epoch,
        dev_history: ckpt.dev_history.clone(),
        rng: ckpt.rng,
        has_listener: ckpt.listener.is_some(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            step: o.step,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }),
        layout,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let version = serde_json::from_slice::<serde_json::Value>(body)?
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing version"))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header: Header = serde_json::from_slice(body)?;
    header.model_config.validate()?;
    let blob = &bytes[16 + hlen..];
    let table: std::collections::HashMap<&str, &LayoutEntry> =
        header.layout.iter().map(|e| (e.name.as_str(), e)).collect();

    let read = |prefix: &str| -> Result<ModelParams> {
        let mut p = ModelParams::zeros(&header.model_config);
        for (name, m) in p.tensors_mut() {
            let key = format!("{prefix}.{name}");
            let e = table
                .get(key.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if e.shape != [m.rows, m.cols] {
                return Err(Error::Checkpoint(format!("shape mismatch for {key}")));
            }
            let end = e.offset + 4 * m.len();
            let raw = blob
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("truncated blob at {key}")))?;
            for (v, c) in m.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
        }
        Ok(p)
    };
    let params = read("params")?;
    let listener = if header.has_listener {
        Some(read("listener")?)
    } else {
        None
    };
    let optimizer = match &header.optimizer {
        Some(o) => Some(Adam {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
            m: read("adam.m")?,
            v: read("adam.v")?,
        }),
        None => None,
    };
    Ok(Checkpoint {
        phase: header.phase,
        model_config: header.model_config,
        params,
        listener,
        vocab_hash: header.vocab_hash,
        train_config: header.train_config,
        epoch: header.epoch,
        dev_history: header.dev_history,
        rng: header.rng,
        optimizer,
    })
}

/// Writes through a temporary sibling and renames, so a failed write leaves no partial file.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}
