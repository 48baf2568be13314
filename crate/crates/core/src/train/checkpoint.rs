//! Checkpoint serialization.
//!
//! Layout: 8-byte magic `RADTRNG1`, a little-endian u64 manifest length, a
//! JSON text manifest (version, configs, rng state, metrics snapshot, and a
//! tensor table of name/dtype/shape/offset/length), then contiguous
//! little-endian IEEE-754 f32 blobs in manifest order. Offsets are relative
//! to the start of the blob section. Round trips are bit-exact.

use super::optim::AdamW;
use super::TrainConfig;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadParams};
use crate::model::Model;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"RADTRNG1";
pub const VERSION: u32 = 1;

/// Validation state recorded with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub val_f1: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len_bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    encoder: EncoderConfig,
    head: HeadConfig,
    train: Option<TrainConfig>,
    rng: RngStream,
    optimizer_step: Option<u64>,
    metrics: Option<MetricsSnapshot>,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: config echo, named tensors (model parameters plus
/// optional optimizer moments), rng state, and a metrics snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder_cfg: EncoderConfig,
    pub head_cfg: HeadConfig,
    pub train_cfg: Option<TrainConfig>,
    pub rng: RngStream,
    pub optimizer_step: Option<u64>,
    pub metrics: Option<MetricsSnapshot>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        train_cfg: Option<TrainConfig>,
        optimizer: Option<&AdamW>,
        rng: RngStream,
        metrics: Option<MetricsSnapshot>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut optimizer_step = None;
        if let Some(opt) = optimizer {
            optimizer_step = Some(opt.step_count());
            for (name, m, v) in opt.moment_tensors() {
                tensors.push((format!("optim.m.{name}"), m.clone()));
                tensors.push((format!("optim.v.{name}"), v.clone()));
            }
        }
        Self {
            encoder_cfg: model.encoder_cfg,
            head_cfg: model.head_cfg,
            train_cfg,
            rng,
            optimizer_step,
            metrics,
            tensors,
        }
    }

    /// Rebuilds the model, verifying every expected parameter is present
    /// with the right shape.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model {
            encoder_cfg: self.encoder_cfg,
            head_cfg: self.head_cfg,
            encoder: EncoderParams::zeros(&self.encoder_cfg)?,
            head: HeadParams::zeros(&self.head_cfg)?,
        };
        let lookup: std::collections::BTreeMap<&str, &Tensor<f32>> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        for (name, slot) in model.named_mut() {
            let tensor = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if tensor.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = (*tensor).clone();
        }
        for (name, _) in &self.tensors {
            if !name.starts_with("optim.")
                && !name.starts_with("encoder.")
                && !name.starts_with("head.")
            {
                return Err(Error::Format(format!("unexpected tensor {name}")));
            }
        }
        model.shape_audit()?;
        Ok(model)
    }

    /// Optimizer moment pairs, when the checkpoint carries them.
    pub fn to_optimizer(&self, train_cfg: &TrainConfig) -> Option<AdamW> {
        let step = self.optimizer_step?;
        let mut opt = AdamW::new(
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.eps,
            train_cfg.weight_decay,
        );
        let mut moments: std::collections::BTreeMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>)> =
            Default::default();
        for (name, t) in &self.tensors {
            if let Some(base) = name.strip_prefix("optim.m.") {
                moments.entry(base.to_string()).or_default().0 = Some(t.clone());
            } else if let Some(base) = name.strip_prefix("optim.v.") {
                moments.entry(base.to_string()).or_default().1 = Some(t.clone());
            }
        }
        opt.restore_moments(
            step,
            moments
                .into_iter()
                .filter_map(|(n, (m, v))| Some((n, m?, v?))),
        );
        Some(opt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        let len_bytes = (t.numel() * 4) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            offset,
            len_bytes,
        });
        offset += len_bytes;
    }
    let manifest = Manifest {
        version: VERSION,
        encoder: ckpt.encoder_cfg,
        head: ckpt.head_cfg,
        train: ckpt.train_cfg,
        rng: ckpt.rng,
        optimizer_step: ckpt.optimizer_step,
        metrics: ckpt.metrics,
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("cannot encode manifest: {e}")))?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in &ckpt.tensors {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_base = 16 + manifest_len;
    if bytes.len() < blob_base {
        return Err(Error::Format("truncated checkpoint manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..blob_base])
        .map_err(|e| Error::Format(format!("cannot parse manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let blobs = &bytes[blob_base..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len_bytes as usize;
        if end > blobs.len() || entry.len_bytes % 4 != 0 {
            return Err(Error::Format(format!(
                "tensor {} blob out of range",
                entry.name
            )));
        }
        let data: Vec<f32> = blobs[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|_| {
            Error::Format(format!(
                "tensor {} shape {:?} disagrees with payload",
                entry.name, entry.shape
            ))
        })?;
        tensors.push((entry.name.clone(), t));
    }
    Ok(Checkpoint {
        encoder_cfg: manifest.encoder,
        head_cfg: manifest.head,
        train_cfg: manifest.train,
        rng: manifest.rng,
        optimizer_step: manifest.optimizer_step,
        metrics: manifest.metrics,
        tensors,
    })
}
