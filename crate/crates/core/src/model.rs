//! Encoder + head bundled as one model: parameter naming, full forward
//! passes, and single-image inference.

use crate::encoder::{self, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::Result;
use crate::head::{self, clamp_prob, HeadConfig, HeadParams, HeadVars};
use crate::preprocess::{preprocess_image, PreprocessConfig, RawRadiograph};
use crate::rng::RngStream;
use crate::tensor::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Full model parameters. Checkpoint names carry `encoder.` / `head.`
/// prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder_cfg: EncoderConfig,
    pub head_cfg: HeadConfig,
    pub encoder: EncoderParams<f32>,
    pub head: HeadParams<f32>,
}

impl Model {
    /// Randomly initialized model for a config; the head width follows the
    /// encoder embedding dimension.
    pub fn init(encoder_cfg: EncoderConfig, seed: u64) -> Result<Self> {
        encoder_cfg.validate()?;
        let head_cfg = HeadConfig::for_embed_dim(encoder_cfg.embed_dim);
        let mut rng = RngStream::new(seed);
        Ok(Self {
            encoder_cfg,
            head_cfg,
            encoder: EncoderParams::init(&encoder_cfg, &mut rng)?,
            head: HeadParams::init(&head_cfg, &mut rng)?,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> = self
            .encoder
            .named()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(
            self.head
                .named()
                .into_iter()
                .map(|(n, t)| (format!("head.{n}"), t)),
        );
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out: Vec<(String, &mut Tensor<f32>)> = self
            .encoder
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(
            self.head
                .named_mut()
                .into_iter()
                .map(|(n, t)| (format!("head.{n}"), t)),
        );
        out
    }

    /// Names and shapes of every parameter without touching tensor storage.
    pub fn parameter_shapes(
        encoder_cfg: &EncoderConfig,
        head_cfg: &HeadConfig,
    ) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = encoder::parameter_shapes(encoder_cfg)
            .into_iter()
            .map(|(n, s)| (format!("encoder.{n}"), s))
            .collect();
        out.extend(
            head::parameter_shapes(head_cfg)
                .into_iter()
                .map(|(n, s)| (format!("head.{n}"), s)),
        );
        out
    }

    pub fn shape_audit(&self) -> Result<()> {
        self.encoder.shape_audit(&self.encoder_cfg)?;
        self.head.shape_audit(&self.head_cfg)
    }

    /// Eval-mode probability for one preprocessed [3, S, S] image tensor.
    pub fn predict_pixels(&self, image: &Tensor<f32>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ModelVars::load(&mut tape, self, |_| false)?;
        let iv = tape.leaf(image.clone(), false)?;
        let mut rng = RngStream::new(0); // unused in eval mode
        let p = forward_image(&mut tape, iv, &vars, self, Mode::Eval, &mut rng)?;
        Ok(clamp_prob(tape.value(p).item() as f64))
    }

    /// Eval-mode probability for one raw radiograph.
    pub fn predict_raw(&self, raw: &RawRadiograph, pre: &PreprocessConfig) -> Result<f64> {
        let mut rng = RngStream::new(0);
        let image = preprocess_image(raw, pre, Mode::Eval, &mut rng)?;
        self.predict_pixels(&image)
    }
}

/// Model parameters registered on a tape.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl ModelVars {
    /// `requires` receives prefixed names (`encoder.…`, `head.…`).
    pub fn load(
        tape: &mut Tape<f32>,
        model: &Model,
        mut requires: impl FnMut(&str) -> bool,
    ) -> Result<Self> {
        let encoder = EncoderVars::load(tape, &model.encoder, |n| {
            requires(&format!("encoder.{n}"))
        })?;
        let head = HeadVars::load(tape, &model.head, |n| requires(&format!("head.{n}")))?;
        Ok(Self { encoder, head })
    }

    /// Prefixed (name, var) pairs across encoder and head.
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .encoder
            .named()
            .into_iter()
            .map(|(n, v)| (format!("encoder.{n}"), v))
            .collect();
        out.extend(
            self.head
                .named()
                .into_iter()
                .map(|(n, v)| (format!("head.{n}"), v)),
        );
        out
    }
}

/// image → encode → mean pool → head probability (a scalar var).
pub fn forward_image(
    tape: &mut Tape<f32>,
    image: Var,
    vars: &ModelVars,
    model: &Model,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Var> {
    let tokens = encoder::encode(tape, image, &vars.encoder, &model.encoder_cfg)?;
    let pooled = encoder::mean_pool(tape, tokens)?;
    head::head_forward(tape, pooled, &vars.head, &model.head_cfg, mode, rng)
}
