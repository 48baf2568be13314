//! Selective-unfreezing fine-tuning: two-tier AdamW under a shared
//! warmup/cosine schedule, deterministic epochs, best-validation-AUROC
//! checkpointing.

pub mod checkpoint;
pub mod optim;

use crate::dataset::Splits;
use crate::error::{Error, Result};
use crate::eval::{self, Prediction, StudyKey};
use crate::model::{forward_image, Model, ModelVars};
use crate::preprocess::{preprocess_image, PreprocessConfig, RawRadiograph};
use crate::rng::RngStream;
use crate::tensor::tape::{Mode, Tape};
use crate::tensor::Tensor;
use checkpoint::MetricsSnapshot;
use optim::{schedule_factor, select_trainable, tier_of, AdamW, Tier};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

// substream tags; epoch is mixed in by addition
const SHUFFLE_STREAM: u64 = 0x0100_0000_0000;
const AUGMENT_STREAM: u64 = 0x0200_0000_0000;
const DROPOUT_STREAM: u64 = 0x0300_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of final encoder blocks to unfreeze (0 = head-only).
    pub unfreeze_k: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub pos_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // peaks tuned for from-scratch training of the tiny preset; the
        // head/encoder ratio stays at 10:1
        Self {
            unfreeze_k: 2,
            lr_encoder: 1e-3,
            lr_head: 1e-2,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 8,
            warmup_fraction: 0.2,
            seed: 0,
            pos_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.unfreeze_k > num_layers {
            return Err(Error::Config(format!(
                "unfreeze depth {} exceeds {num_layers} encoder layers",
                self.unfreeze_k
            )));
        }
        if !(self.lr_encoder > 0.0) || self.lr_head < self.lr_encoder {
            return Err(Error::Config(format!(
                "learning rates must satisfy head {} >= encoder {} > 0",
                self.lr_head, self.lr_encoder
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Parameter("warmup fraction must be in [0, 1)".into()));
        }
        if self.pos_weight <= 0.0 {
            return Err(Error::Parameter("pos_weight must be positive".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub val_f1: f64,
    pub lr_head: f64,
    pub lr_encoder: f64,
}

impl EpochLog {
    /// `epoch,train_loss,val_auroc,val_f1,lr_head,lr_encoder`
    pub fn to_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.8},{:.8}",
            self.epoch, self.train_loss, self.val_auroc, self.val_f1, self.lr_head, self.lr_encoder
        )
    }

    pub const HEADER: &'static str = "epoch,train_loss,val_auroc,val_f1,lr_head,lr_encoder";
}

/// Training result: the epoch log plus the best-validation-AUROC snapshot.
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub best_model: Model,
    pub best_optimizer: AdamW,
    pub best_metrics: MetricsSnapshot,
}

struct TrainItem {
    path: PathBuf,
    label: u8,
    /// Stable index into the unshuffled item list; keys the per-item rng
    /// substreams so parallelism and batch composition cannot change draws.
    stable_idx: u64,
}

/// Runs the full fine-tuning loop. `model` holds the final-epoch parameters
/// afterwards; the best snapshot is returned separately.
pub fn train(
    model: &mut Model,
    splits: &Splits,
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(model.encoder_cfg.num_layers)?;
    pre.validate()?;
    model.shape_audit()?;

    let items: Vec<TrainItem> = splits
        .train
        .iter()
        .flat_map(|r| r.view_paths.iter().map(move |p| (p.clone(), r.label)))
        .enumerate()
        .map(|(i, (path, label))| TrainItem {
            path,
            label,
            stable_idx: i as u64,
        })
        .collect();
    if items.is_empty() {
        return Err(Error::Input("training split has no images".into()));
    }
    if splits.val.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }

    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let partition = select_trainable(&names, model.encoder_cfg.num_layers, cfg.unfreeze_k)?;
    let num_layers = model.encoder_cfg.num_layers;
    let k = cfg.unfreeze_k;

    let n_batches = items.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * n_batches) as u64;
    let warmup_steps = ((total_steps as f64 * cfg.warmup_fraction).round() as u64)
        .min(total_steps.saturating_sub(1));

    let mut optimizer = AdamW::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let root_rng = RngStream::new(cfg.seed);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model, AdamW, MetricsSnapshot)> = None;

    let _ = &partition; // partition is derived for validation; tiers are resolved per name below

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        root_rng
            .substream(SHUFFLE_STREAM + epoch as u64)
            .shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut last_factor = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let step_idx = optimizer.step_count(); // 0-based update index
            let factor = schedule_factor(step_idx, total_steps, warmup_steps);
            last_factor = factor;

            let results: Vec<(f64, Vec<(String, Tensor<f32>)>)> = batch
                .par_iter()
                .map(|&i| {
                    let item = &items[i];
                    let mut aug_rng = root_rng
                        .substream(AUGMENT_STREAM + epoch as u64)
                        .substream(item.stable_idx);
                    let mut drop_rng = root_rng
                        .substream(DROPOUT_STREAM + epoch as u64)
                        .substream(item.stable_idx);
                    let raw = RawRadiograph::load_png(&item.path)?;
                    let image = preprocess_image(&raw, pre, Mode::Train, &mut aug_rng)?;

                    let mut tape = Tape::new();
                    let vars = ModelVars::load(&mut tape, model, |n| {
                        tier_of(n, num_layers, k) != Tier::Frozen
                    })?;
                    let iv = tape.leaf(image, false)?;
                    let p = forward_image(&mut tape, iv, &vars, model, Mode::Train, &mut drop_rng)?;
                    let loss = tape.bce_loss(p, item.label, cfg.pos_weight)?;
                    let loss_value = tape.value(loss).item() as f64;
                    tape.backward(loss)?;

                    let grads: Vec<(String, Tensor<f32>)> = vars
                        .named()
                        .into_iter()
                        .filter_map(|(n, v)| tape.grad(v).map(|g| (n, g.clone())))
                        .collect();
                    Ok((loss_value, grads))
                })
                .collect::<Result<_>>()?;

            // merge per-item gradients in item order, then average
            let mut merged: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (loss_value, grads) in results {
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged: non-finite loss at epoch {epoch}, step {step_idx}"
                    )));
                }
                loss_sum += loss_value;
                for (name, g) in grads {
                    match merged.get_mut(&name) {
                        Some(acc) => acc.add_assign_tensor(&g),
                        None => {
                            merged.insert(name, g);
                        }
                    }
                }
            }
            let inv_batch = 1.0 / batch.len() as f32;
            for g in merged.values_mut() {
                g.scale_assign(inv_batch);
            }

            optimizer.begin_step();
            let mut params: BTreeMap<String, &mut Tensor<f32>> =
                model.named_mut().into_iter().collect();
            for (name, grad) in &merged {
                let peak = match tier_of(name, num_layers, k) {
                    Tier::Encoder => cfg.lr_encoder,
                    Tier::Head => cfg.lr_head,
                    Tier::Frozen => unreachable!("frozen parameters accumulate no gradient"),
                };
                let param = params
                    .get_mut(name)
                    .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
                optimizer.update(name, param, grad, peak * factor)?;
            }
        }

        let (val_probs, val_labels) = predict_split(model, &splits.val, pre)?;
        let val_auroc = eval::auroc(&val_probs, &val_labels)?;
        let threshold = eval::select_threshold(&val_probs, &val_labels)?;
        let val_f1 = eval::confusion_and_point_metrics(&val_probs, &val_labels, threshold)?.f1;

        let train_loss = loss_sum / items.len() as f64;
        let log = EpochLog {
            epoch,
            train_loss,
            val_auroc,
            val_f1,
            lr_head: cfg.lr_head * last_factor,
            lr_encoder: cfg.lr_encoder * last_factor,
        };
        logs.push(log);

        let metrics = MetricsSnapshot {
            epoch,
            train_loss,
            val_auroc,
            val_f1,
        };
        if best.as_ref().map_or(true, |(b, ..)| val_auroc > *b) {
            best = Some((val_auroc, epoch, model.clone(), optimizer.clone(), metrics));
        }
    }

    let (best_val_auroc, best_epoch, best_model, best_optimizer, best_metrics) =
        best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        logs,
        best_epoch,
        best_val_auroc,
        best_model,
        best_optimizer,
        best_metrics,
    })
}

/// Eval-mode study-level probabilities and labels for a split, in record
/// order. Views are scored independently and averaged per study.
pub fn predict_split(
    model: &Model,
    records: &[crate::dataset::StudyRecord],
    pre: &PreprocessConfig,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let preds = predict_records(model, records, pre)?;
    Ok((
        preds.iter().map(|p| p.prob).collect(),
        records.iter().map(|r| r.label).collect(),
    ))
}

/// Full study predictions for a record list, preserving order.
pub fn predict_records(
    model: &Model,
    records: &[crate::dataset::StudyRecord],
    pre: &PreprocessConfig,
) -> Result<Vec<Prediction>> {
    records
        .par_iter()
        .map(|record| {
            let mut view_probs = Vec::with_capacity(record.view_paths.len());
            for path in &record.view_paths {
                let raw = RawRadiograph::load_png(path)?;
                view_probs.push(model.predict_raw(&raw, pre)?);
            }
            Prediction::from_views(
                StudyKey {
                    patient_id: record.patient_id.clone(),
                    study_id: record.study_id.clone(),
                    anatomy: record.anatomy,
                },
                view_probs,
            )
        })
        .collect()
}
