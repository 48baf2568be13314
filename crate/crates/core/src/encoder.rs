//! SigLIP-style vision tower.
//!
//! Strided patch projection, a learned positional table, a stack of pre-norm
//! attention/FFN blocks with residuals, one final post-normalization, and
//! mean pooling over the patch tokens. Layer norm sits before each sublayer;
//! the residual wraps the whole sublayer.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::tape::{linear, multi_head_attention, AttentionVars, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Layer-norm epsilon used throughout the tower.
pub const LN_EPS: f64 = 1e-6;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub max_positions: usize,
}

impl EncoderConfig {
    /// Full-scale preset: 896×896 input, patch 14, width 1152, 27 layers,
    /// FFN 4304, positional table (4096, 1152).
    pub fn paper() -> Self {
        Self {
            image_size: 896,
            patch_size: 14,
            embed_dim: 1152,
            num_layers: 27,
            num_heads: 16,
            ffn_hidden: 4304,
            max_positions: 4096,
        }
    }

    /// Desk-scale preset trainable on a CPU in minutes; keeps patch size 14
    /// and roughly the full preset's FFN expansion ratio.
    pub fn tiny() -> Self {
        Self {
            image_size: 56,
            patch_size: 14,
            embed_dim: 48,
            num_layers: 4,
            num_heads: 4,
            ffn_hidden: 180,
            max_positions: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.embed_dim == 0
            || self.num_heads == 0
            || self.ffn_hidden == 0
            || self.max_positions == 0
        {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_tokens() > self.max_positions {
            return Err(Error::Config(format!(
                "{} tokens exceed positional capacity {}",
                self.num_tokens(),
                self.max_positions
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Tokens per image: (image/patch)².
    pub fn num_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened patch length: 3·P·P.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Names and shapes of every encoder parameter, in checkpoint order.
/// Pure arithmetic on the config; allocates no tensor storage.
pub fn parameter_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut out = vec![
        ("patch_proj.weight".to_string(), vec![d, cfg.patch_dim()]),
        ("patch_proj.bias".to_string(), vec![d]),
        ("pos_table".to_string(), vec![cfg.max_positions, d]),
    ];
    for i in 0..cfg.num_layers {
        let p = |suffix: &str| format!("layers.{i}.{suffix}");
        out.push((p("ln1.gamma"), vec![d]));
        out.push((p("ln1.beta"), vec![d]));
        for proj in ["q", "k", "v", "out"] {
            out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
            out.push((p(&format!("attn.{proj}.bias")), vec![d]));
        }
        out.push((p("ln2.gamma"), vec![d]));
        out.push((p("ln2.beta"), vec![d]));
        out.push((p("ffn.in.weight"), vec![cfg.ffn_hidden, d]));
        out.push((p("ffn.in.bias"), vec![cfg.ffn_hidden]));
        out.push((p("ffn.out.weight"), vec![d, cfg.ffn_hidden]));
        out.push((p("ffn.out.bias"), vec![d]));
    }
    out.push(("final_ln.gamma".to_string(), vec![d]));
    out.push(("final_ln.beta".to_string(), vec![d]));
    out
}

/// Closed-form parameter count for a config.
pub fn parameter_count(cfg: &EncoderConfig) -> usize {
    let d = cfg.embed_dim;
    let f = cfg.ffn_hidden;
    let patch = d * cfg.patch_dim() + d;
    let pos = cfg.max_positions * d;
    let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (f * d + f) + (d * f + d);
    patch + pos + cfg.num_layers * per_layer + 2 * d
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub q_w: Tensor<T>,
    pub q_b: Tensor<T>,
    pub k_w: Tensor<T>,
    pub k_b: Tensor<T>,
    pub v_w: Tensor<T>,
    pub v_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub ffn_in_w: Tensor<T>,
    pub ffn_in_b: Tensor<T>,
    pub ffn_out_w: Tensor<T>,
    pub ffn_out_b: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn init(cfg: &EncoderConfig, rng: &mut RngStream) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_hidden;
        Self {
            ln1_gamma: Tensor::full(vec![d], T::ONE),
            ln1_beta: Tensor::zeros(vec![d]),
            q_w: Tensor::trunc_normal(vec![d, d], INIT_STD, rng),
            q_b: Tensor::zeros(vec![d]),
            k_w: Tensor::trunc_normal(vec![d, d], INIT_STD, rng),
            k_b: Tensor::zeros(vec![d]),
            v_w: Tensor::trunc_normal(vec![d, d], INIT_STD, rng),
            v_b: Tensor::zeros(vec![d]),
            out_w: Tensor::trunc_normal(vec![d, d], INIT_STD, rng),
            out_b: Tensor::zeros(vec![d]),
            ln2_gamma: Tensor::full(vec![d], T::ONE),
            ln2_beta: Tensor::zeros(vec![d]),
            ffn_in_w: Tensor::trunc_normal(vec![f, d], INIT_STD, rng),
            ffn_in_b: Tensor::zeros(vec![f]),
            ffn_out_w: Tensor::trunc_normal(vec![d, f], INIT_STD, rng),
            ffn_out_b: Tensor::zeros(vec![d]),
        }
    }

    fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_hidden;
        Self {
            ln1_gamma: Tensor::full(vec![d], T::ONE),
            ln1_beta: Tensor::zeros(vec![d]),
            q_w: Tensor::zeros(vec![d, d]),
            q_b: Tensor::zeros(vec![d]),
            k_w: Tensor::zeros(vec![d, d]),
            k_b: Tensor::zeros(vec![d]),
            v_w: Tensor::zeros(vec![d, d]),
            v_b: Tensor::zeros(vec![d]),
            out_w: Tensor::zeros(vec![d, d]),
            out_b: Tensor::zeros(vec![d]),
            ln2_gamma: Tensor::full(vec![d], T::ONE),
            ln2_beta: Tensor::zeros(vec![d]),
            ffn_in_w: Tensor::zeros(vec![f, d]),
            ffn_in_b: Tensor::zeros(vec![f]),
            ffn_out_w: Tensor::zeros(vec![d, f]),
            ffn_out_b: Tensor::zeros(vec![d]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.q.weight", &self.q_w),
            ("attn.q.bias", &self.q_b),
            ("attn.k.weight", &self.k_w),
            ("attn.k.bias", &self.k_b),
            ("attn.v.weight", &self.v_w),
            ("attn.v.bias", &self.v_b),
            ("attn.out.weight", &self.out_w),
            ("attn.out.bias", &self.out_b),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ffn.in.weight", &self.ffn_in_w),
            ("ffn.in.bias", &self.ffn_in_b),
            ("ffn.out.weight", &self.ffn_out_w),
            ("ffn.out.bias", &self.ffn_out_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 16] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.q.weight", &mut self.q_w),
            ("attn.q.bias", &mut self.q_b),
            ("attn.k.weight", &mut self.k_w),
            ("attn.k.bias", &mut self.k_b),
            ("attn.v.weight", &mut self.v_w),
            ("attn.v.bias", &mut self.v_b),
            ("attn.out.weight", &mut self.out_w),
            ("attn.out.bias", &mut self.out_b),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("ffn.in.weight", &mut self.ffn_in_w),
            ("ffn.in.bias", &mut self.ffn_in_b),
            ("ffn.out.weight", &mut self.ffn_out_w),
            ("ffn.out.bias", &mut self.ffn_out_b),
        ]
    }
}

/// The learnable parameter set of the vision tower.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos_table: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Fresh parameters: truncated-normal weights (std 0.02), zero biases,
    /// layer-norm gamma 1 / beta 0.
    pub fn init(cfg: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(Self {
            patch_w: Tensor::trunc_normal(vec![d, cfg.patch_dim()], INIT_STD, rng),
            patch_b: Tensor::zeros(vec![d]),
            pos_table: Tensor::trunc_normal(vec![cfg.max_positions, d], INIT_STD, rng),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams::init(cfg, rng))
                .collect(),
            final_gamma: Tensor::full(vec![d], T::ONE),
            final_beta: Tensor::zeros(vec![d]),
        })
    }

    /// All weights and biases zero (layer-norm gammas stay 1); test fixture
    /// for residual-identity behavior.
    pub fn zeros(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(Self {
            patch_w: Tensor::zeros(vec![d, cfg.patch_dim()]),
            patch_b: Tensor::zeros(vec![d]),
            pos_table: Tensor::zeros(vec![cfg.max_positions, d]),
            layers: (0..cfg.num_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            final_gamma: Tensor::full(vec![d], T::ONE),
            final_beta: Tensor::zeros(vec![d]),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_proj.weight".into(), &self.patch_w),
            ("patch_proj.bias".into(), &self.patch_b),
            ("pos_table".into(), &self.pos_table),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, t) in layer.fields() {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("final_ln.gamma".into(), &self.final_gamma));
        out.push(("final_ln.beta".into(), &self.final_beta));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("patch_proj.weight".into(), &mut self.patch_w),
            ("patch_proj.bias".into(), &mut self.patch_b),
            ("pos_table".into(), &mut self.pos_table),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in layer.fields_mut() {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("final_ln.gamma".into(), &mut self.final_gamma));
        out.push(("final_ln.beta".into(), &mut self.final_beta));
        out
    }

    /// Verifies every tensor against the config-derived shape map.
    pub fn shape_audit(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = parameter_shapes(cfg);
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} tensors, expected {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(actual.iter()) {
            if en != an || es.as_slice() != at.shape() {
                return Err(Error::Config(format!(
                    "parameter {an} has shape {:?}, expected {en} {es:?}",
                    at.shape()
                )));
            }
            at.check_finite(an)?;
        }
        Ok(())
    }
}

/// Encoder parameters registered on a tape.
pub struct EncoderVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos_table: Var,
    pub layers: Vec<LayerVars>,
    pub final_gamma: Var,
    pub final_beta: Var,
}

pub struct LayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn: AttentionVars,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ffn_in_w: Var,
    pub ffn_in_b: Var,
    pub ffn_out_w: Var,
    pub ffn_out_b: Var,
}

impl EncoderVars {
    /// Loads every parameter onto the tape; `requires` decides per name
    /// (relative to the encoder, e.g. `layers.3.attn.q.weight`) whether
    /// gradients accumulate into it.
    pub fn load<T: Scalar>(
        tape: &mut Tape<T>,
        params: &EncoderParams<T>,
        mut requires: impl FnMut(&str) -> bool,
    ) -> Result<Self> {
        let mut leaf = |name: String, t: &Tensor<T>| -> Result<Var> {
            let rg = requires(&name);
            tape.leaf(t.clone(), rg)
        };
        let patch_w = leaf("patch_proj.weight".into(), &params.patch_w)?;
        let patch_b = leaf("patch_proj.bias".into(), &params.patch_b)?;
        let pos_table = leaf("pos_table".into(), &params.pos_table)?;
        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, lp) in params.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerVars {
                ln1_gamma: leaf(p("ln1.gamma"), &lp.ln1_gamma)?,
                ln1_beta: leaf(p("ln1.beta"), &lp.ln1_beta)?,
                attn: AttentionVars {
                    q_w: leaf(p("attn.q.weight"), &lp.q_w)?,
                    q_b: leaf(p("attn.q.bias"), &lp.q_b)?,
                    k_w: leaf(p("attn.k.weight"), &lp.k_w)?,
                    k_b: leaf(p("attn.k.bias"), &lp.k_b)?,
                    v_w: leaf(p("attn.v.weight"), &lp.v_w)?,
                    v_b: leaf(p("attn.v.bias"), &lp.v_b)?,
                    out_w: leaf(p("attn.out.weight"), &lp.out_w)?,
                    out_b: leaf(p("attn.out.bias"), &lp.out_b)?,
                },
                ln2_gamma: leaf(p("ln2.gamma"), &lp.ln2_gamma)?,
                ln2_beta: leaf(p("ln2.beta"), &lp.ln2_beta)?,
                ffn_in_w: leaf(p("ffn.in.weight"), &lp.ffn_in_w)?,
                ffn_in_b: leaf(p("ffn.in.bias"), &lp.ffn_in_b)?,
                ffn_out_w: leaf(p("ffn.out.weight"), &lp.ffn_out_w)?,
                ffn_out_b: leaf(p("ffn.out.bias"), &lp.ffn_out_b)?,
            });
        }
        let final_gamma = leaf("final_ln.gamma".into(), &params.final_gamma)?;
        let final_beta = leaf("final_ln.beta".into(), &params.final_beta)?;
        Ok(Self {
            patch_w,
            patch_b,
            pos_table,
            layers,
            final_gamma,
            final_beta,
        })
    }

    /// (name, var) pairs in the same order as `EncoderParams::named`.
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = vec![
            ("patch_proj.weight".into(), self.patch_w),
            ("patch_proj.bias".into(), self.patch_b),
            ("pos_table".into(), self.pos_table),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("ln1.gamma"), l.ln1_gamma));
            out.push((p("ln1.beta"), l.ln1_beta));
            out.push((p("attn.q.weight"), l.attn.q_w));
            out.push((p("attn.q.bias"), l.attn.q_b));
            out.push((p("attn.k.weight"), l.attn.k_w));
            out.push((p("attn.k.bias"), l.attn.k_b));
            out.push((p("attn.v.weight"), l.attn.v_w));
            out.push((p("attn.v.bias"), l.attn.v_b));
            out.push((p("attn.out.weight"), l.attn.out_w));
            out.push((p("attn.out.bias"), l.attn.out_b));
            out.push((p("ln2.gamma"), l.ln2_gamma));
            out.push((p("ln2.beta"), l.ln2_beta));
            out.push((p("ffn.in.weight"), l.ffn_in_w));
            out.push((p("ffn.in.bias"), l.ffn_in_b));
            out.push((p("ffn.out.weight"), l.ffn_out_w));
            out.push((p("ffn.out.bias"), l.ffn_out_b));
        }
        out.push(("final_ln.gamma".into(), self.final_gamma));
        out.push(("final_ln.beta".into(), self.final_beta));
        out
    }
}

/// Gather map that rearranges a [3, H, W] image into [N, 3·P·P] flattened
/// patches: row-major patch order, each patch channel-major then row then
/// column.
pub fn patch_gather_map(image_size: usize, patch_size: usize) -> Arc<Vec<usize>> {
    let (s, p) = (image_size, patch_size);
    let grid = s / p;
    let mut map = Vec::with_capacity(grid * grid * 3 * p * p);
    for ty in 0..grid {
        for tx in 0..grid {
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        map.push(c * s * s + (ty * p + py) * s + (tx * p + px));
                    }
                }
            }
        }
    }
    Arc::new(map)
}

/// Splits the image into non-overlapping patches and projects each to the
/// embedding dimension: numerically identical to a strided convolution with
/// kernel = stride = P.
pub fn patchify_project<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    if shape != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Dimension(format!(
            "image shape {shape:?} does not match configured [3, {0}, {0}]",
            cfg.image_size
        )));
    }
    if cfg.image_size % cfg.patch_size != 0 {
        return Err(Error::Dimension(format!(
            "image size {} not divisible by patch size {}",
            cfg.image_size, cfg.patch_size
        )));
    }
    let map = patch_gather_map(cfg.image_size, cfg.patch_size);
    let patches = tape.gather(image, map, vec![cfg.num_tokens(), cfg.patch_dim()])?;
    linear(tape, patches, vars.patch_w, vars.patch_b)
}

/// Adds the first N rows of the positional table to the tokens.
pub fn add_positional<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let n = tape.value(tokens).shape()[0];
    if n > cfg.max_positions {
        return Err(Error::Capacity(format!(
            "{n} tokens exceed positional capacity {}",
            cfg.max_positions
        )));
    }
    let rows = tape.slice_rows(vars.pos_table, 0, n)?;
    tape.add(tokens, rows)
}

/// One pre-norm block: u = x + attn(ln1(x)); out = u + ffn(ln2(u)).
pub fn encoder_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    layer: &LayerVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let normed = tape.layer_norm(tokens, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    let attn = multi_head_attention(tape, normed, &layer.attn, cfg.num_heads)?;
    let u = tape.add(tokens, attn)?;
    let normed2 = tape.layer_norm(u, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
    let hidden = linear(tape, normed2, layer.ffn_in_w, layer.ffn_in_b)?;
    let act = tape.gelu_tanh(hidden)?;
    let ffn = linear(tape, act, layer.ffn_out_w, layer.ffn_out_b)?;
    tape.add(u, ffn)
}

/// Full tower: patchify → positions → L blocks → final layer norm.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let mut tokens = patchify_project(tape, image, vars, cfg)?;
    tokens = add_positional(tape, tokens, vars, cfg)?;
    for layer in &vars.layers {
        tokens = encoder_layer_forward(tape, tokens, layer, cfg)?;
    }
    tape.layer_norm(tokens, vars.final_gamma, vars.final_beta, LN_EPS)
}

/// z[d] = mean over tokens of T[.., d].
pub fn mean_pool<T: Scalar>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    tape.mean_rows(tokens)
}
