//! Parameter tiers for selective unfreezing, the warmup/cosine schedule,
//! and AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Which learning-rate tier a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    /// Never updated; stays bit-identical to initialization.
    Frozen,
    /// One of the last K encoder blocks; trained at the encoder peak rate.
    Encoder,
    /// Classification head; trained at the head peak rate.
    Head,
}

/// Tier of a prefixed parameter name (`encoder.…` / `head.…`) under
/// unfreeze depth `k` of an `num_layers`-deep encoder. The patch projection,
/// positional table, and final norm are always frozen.
pub fn tier_of(name: &str, num_layers: usize, k: usize) -> Tier {
    if name.starts_with("head.") {
        return Tier::Head;
    }
    if let Some(rest) = name.strip_prefix("encoder.layers.") {
        if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            if idx + k >= num_layers {
                return Tier::Encoder;
            }
        }
    }
    Tier::Frozen
}

/// Exhaustive, disjoint partition of parameter names into tiers.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub frozen: Vec<String>,
    pub encoder: Vec<String>,
    pub head: Vec<String>,
}

pub fn select_trainable(names: &[String], num_layers: usize, k: usize) -> Result<Partition> {
    if k > num_layers {
        return Err(Error::Config(format!(
            "unfreeze depth {k} exceeds {num_layers} encoder layers"
        )));
    }
    let mut out = Partition::default();
    for name in names {
        match tier_of(name, num_layers, k) {
            Tier::Frozen => out.frozen.push(name.clone()),
            Tier::Encoder => out.encoder.push(name.clone()),
            Tier::Head => out.head.push(name.clone()),
        }
    }
    Ok(out)
}

/// cos(π·t), exact at the quarter points the schedule is specified by.
fn cos_pi(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else if t == 0.5 {
        0.0
    } else if t == 1.0 {
        -1.0
    } else {
        (std::f64::consts::PI * t).cos()
    }
}

/// Shared schedule shape in [0, 1]: linear ramp over the warmup, then cosine
/// decay to zero. Both tiers multiply their own peak by this same factor.
pub fn schedule_factor(step: u64, total_steps: u64, warmup_steps: u64) -> f64 {
    debug_assert!(warmup_steps < total_steps.max(1));
    if step >= total_steps {
        return 0.0;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * (1.0 + cos_pi(progress))
}

/// Learning rate at a step: peak · schedule_factor.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, peak: f64) -> f64 {
    peak * schedule_factor(step, total_steps, warmup_steps)
}

/// AdamW with decoupled weight decay. Decay is skipped for 1-D tensors
/// (biases and layer-norm gains/shifts).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one AdamW update to a single parameter tensor.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
        lr: f64,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        grad.check_finite(name)
            .map_err(|_| Error::Numeric(format!("non-finite gradient for {name}")))?;
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape().to_vec()), Tensor::zeros(param.shape().to_vec())));

        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = if param.ndim() > 1 { self.weight_decay } else { 0.0 };

        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr32 = lr as f32;
        let eps32 = self.eps as f32;
        let shrink = 1.0 - (lr * decay) as f32;
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1 as f32;
            let v_hat = *vi / bc2 as f32;
            *p = *p * shrink - lr32 * m_hat / (v_hat.sqrt() + eps32);
        }
        Ok(())
    }

    /// Moment tensors in name order, for checkpointing.
    pub fn moment_tensors(&self) -> Vec<(String, &Tensor<f32>, &Tensor<f32>)> {
        self.moments
            .iter()
            .map(|(n, (m, v))| (n.clone(), m, v))
            .collect()
    }

    pub fn restore_moments(
        &mut self,
        step: u64,
        moments: impl IntoIterator<Item = (String, Tensor<f32>, Tensor<f32>)>,
    ) {
        self.step = step;
        self.moments = moments
            .into_iter()
            .map(|(n, m, v)| (n, (m, v)))
            .collect();
    }
}
