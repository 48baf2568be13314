//! MLP classification head: pooled embedding → abnormality probability.
//!
//! Linear(D→512) + ReLU + Dropout(0.30); Linear(512→128) + ReLU +
//! Dropout(0.20); Linear(128→1) + Sigmoid.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::tape::{linear, Mode, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Probabilities are reported clamped to [ε, 1−ε] so the output stays
/// strictly inside (0, 1) even where f32 sigmoid saturates.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout1: f64,
    pub dropout2: f64,
}

impl HeadConfig {
    /// D → 512 → 128 → 1 with dropout rates (0.30, 0.20).
    pub fn for_embed_dim(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            hidden1: 512,
            hidden2: 128,
            dropout1: 0.30,
            dropout2: 0.20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        for rate in [self.dropout1, self.dropout2] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Parameter(format!(
                    "dropout rate must be in [0,1), got {rate}"
                )));
            }
        }
        Ok(())
    }
}

/// Head parameter names and shapes in checkpoint order; no allocation.
pub fn parameter_shapes(cfg: &HeadConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("fc1.weight".into(), vec![cfg.hidden1, cfg.embed_dim]),
        ("fc1.bias".into(), vec![cfg.hidden1]),
        ("fc2.weight".into(), vec![cfg.hidden2, cfg.hidden1]),
        ("fc2.bias".into(), vec![cfg.hidden2]),
        ("fc3.weight".into(), vec![1, cfg.hidden2]),
        ("fc3.bias".into(), vec![1]),
    ]
}

pub fn parameter_count(cfg: &HeadConfig) -> usize {
    parameter_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = f32> {
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
    pub fc3_w: Tensor<T>,
    pub fc3_b: Tensor<T>,
}

impl<T: Scalar> HeadParams<T> {
    /// Fan-in-scaled truncated-normal weights (the head always trains from
    /// scratch, so its activations must start at unit scale), zero biases.
    pub fn init(cfg: &HeadConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let std = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        Ok(Self {
            fc1_w: Tensor::trunc_normal(vec![cfg.hidden1, cfg.embed_dim], std(cfg.embed_dim), rng),
            fc1_b: Tensor::zeros(vec![cfg.hidden1]),
            fc2_w: Tensor::trunc_normal(vec![cfg.hidden2, cfg.hidden1], std(cfg.hidden1), rng),
            fc2_b: Tensor::zeros(vec![cfg.hidden2]),
            fc3_w: Tensor::trunc_normal(vec![1, cfg.hidden2], std(cfg.hidden2), rng),
            fc3_b: Tensor::zeros(vec![1]),
        })
    }

    pub fn zeros(cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            fc1_w: Tensor::zeros(vec![cfg.hidden1, cfg.embed_dim]),
            fc1_b: Tensor::zeros(vec![cfg.hidden1]),
            fc2_w: Tensor::zeros(vec![cfg.hidden2, cfg.hidden1]),
            fc2_b: Tensor::zeros(vec![cfg.hidden2]),
            fc3_w: Tensor::zeros(vec![1, cfg.hidden2]),
            fc3_b: Tensor::zeros(vec![1]),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("fc1.weight".into(), &self.fc1_w),
            ("fc1.bias".into(), &self.fc1_b),
            ("fc2.weight".into(), &self.fc2_w),
            ("fc2.bias".into(), &self.fc2_b),
            ("fc3.weight".into(), &self.fc3_w),
            ("fc3.bias".into(), &self.fc3_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("fc1.weight".into(), &mut self.fc1_w),
            ("fc1.bias".into(), &mut self.fc1_b),
            ("fc2.weight".into(), &mut self.fc2_w),
            ("fc2.bias".into(), &mut self.fc2_b),
            ("fc3.weight".into(), &mut self.fc3_w),
            ("fc3.bias".into(), &mut self.fc3_b),
        ]
    }

    pub fn shape_audit(&self, cfg: &HeadConfig) -> Result<()> {
        for ((en, es), (an, at)) in parameter_shapes(cfg).iter().zip(self.named()) {
            if en != &an || es.as_slice() != at.shape() {
                return Err(Error::Config(format!(
                    "head parameter {an} has shape {:?}, expected {es:?}",
                    at.shape()
                )));
            }
            at.check_finite(&an)?;
        }
        Ok(())
    }
}

pub struct HeadVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub fc3_w: Var,
    pub fc3_b: Var,
}

impl HeadVars {
    pub fn load<T: Scalar>(
        tape: &mut Tape<T>,
        params: &HeadParams<T>,
        mut requires: impl FnMut(&str) -> bool,
    ) -> Result<Self> {
        let mut leaf = |name: &str, t: &Tensor<T>| -> Result<Var> {
            let rg = requires(name);
            tape.leaf(t.clone(), rg)
        };
        Ok(Self {
            fc1_w: leaf("fc1.weight", &params.fc1_w)?,
            fc1_b: leaf("fc1.bias", &params.fc1_b)?,
            fc2_w: leaf("fc2.weight", &params.fc2_w)?,
            fc2_b: leaf("fc2.bias", &params.fc2_b)?,
            fc3_w: leaf("fc3.weight", &params.fc3_w)?,
            fc3_b: leaf("fc3.bias", &params.fc3_b)?,
        })
    }

    pub fn named(&self) -> Vec<(String, Var)> {
        vec![
            ("fc1.weight".into(), self.fc1_w),
            ("fc1.bias".into(), self.fc1_b),
            ("fc2.weight".into(), self.fc2_w),
            ("fc2.bias".into(), self.fc2_b),
            ("fc3.weight".into(), self.fc3_w),
            ("fc3.bias".into(), self.fc3_b),
        ]
    }
}

/// Maps a pooled embedding ([D] or [1, D]) to a scalar probability var.
/// Train mode draws dropout masks from `rng`; eval mode is deterministic.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    vars: &HeadVars,
    cfg: &HeadConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Var> {
    let z = match tape.value(z).ndim() {
        1 => tape.reshape(z, vec![1, tape.value(z).numel()])?,
        2 => z,
        _ => return Err(Error::Dimension("head input must be 1-D or 2-D".into())),
    };
    if tape.value(z).shape()[1] != cfg.embed_dim {
        return Err(Error::Config(format!(
            "head expects width {}, got {}",
            cfg.embed_dim,
            tape.value(z).shape()[1]
        )));
    }
    let h1 = linear(tape, z, vars.fc1_w, vars.fc1_b)?;
    let a1 = tape.relu(h1)?;
    let d1 = tape.dropout(a1, cfg.dropout1, mode, rng)?;
    let h2 = linear(tape, d1, vars.fc2_w, vars.fc2_b)?;
    let a2 = tape.relu(h2)?;
    let d2 = tape.dropout(a2, cfg.dropout2, mode, rng)?;
    let logit = linear(tape, d2, vars.fc3_w, vars.fc3_b)?;
    tape.sigmoid(logit)
}

/// Clamps a probability into the open interval (0, 1).
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}
