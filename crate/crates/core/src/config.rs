//! Model and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward block is `ffn_mult · d_model`.
    pub ffn_mult: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Frames folded into one latent step.
    pub temporal_factor: usize,
    /// Spatial patch edge.
    pub patch: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub output: Output,
    /// Seed for the frozen base weights.
    pub seed: u64,
}

/// What the network head regresses. The denoiser always returns ε̂; with
/// `Velocity` it is recovered as `√(1−ᾱ)·z + √ᾱ·v̂`, so the head does not
/// have to rebuild the input at high noise levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Epsilon,
    #[default]
    Velocity,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn_mult: 4,
            text_len: 8,
            vocab: vocab::size(),
            frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            temporal_factor: 2,
            patch: 4,
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            output: Output::Velocity,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return fail("layers, d_model, heads and ffn_mult must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !self.d_model.is_multiple_of(8) {
            return fail(format!("d_model {} must be a multiple of 8 for the positional code", self.d_model));
        }
        if self.temporal_factor == 0 || !self.frames.is_multiple_of(self.temporal_factor) {
            return fail(format!("frames {} not divisible by temporal factor {}", self.frames, self.temporal_factor));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return fail(format!("{}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.channels == 0 || self.text_len == 0 || self.vocab == 0 {
            return fail("channels, text_len and vocab must be positive".into());
        }
        if self.timesteps == 0 {
            return fail("timesteps must be positive".into());
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return fail(format!("need 0 < beta_start <= beta_end < 1, got {} .. {}", self.beta_start, self.beta_end));
        }
        Ok(())
    }

    /// Latent grid `(f, h, w, c)`.
    pub fn latent_dims(&self) -> [usize; 4] {
        [
            self.frames / self.temporal_factor,
            self.height / self.patch,
            self.width / self.patch,
            self.channels * self.temporal_factor * self.patch * self.patch,
        ]
    }

    pub fn video_dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn vision_tokens(&self) -> usize {
        let [f, h, w, _] = self.latent_dims();
        f * h * w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }
}

/// Optimization and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    pub lambda_mask: f64,
    pub lambda_rcl: f64,
    pub tau: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub bank_capacity: usize,
    pub prompt_dropout: f64,
    pub rank: usize,
    /// Relation/Subject matrix placement, e.g. `"QK|V"`.
    pub placement: String,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 2000,
            lambda_mask: 50.0,
            lambda_rcl: 0.01,
            tau: 0.07,
            n_pos: 4,
            n_neg: 10,
            bank_capacity: 64,
            prompt_dropout: 0.1,
            rank: 16,
            placement: "QK|V".into(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 2400 iterations at otherwise default settings.
    pub fn long_schedule() -> Self {
        Self { iterations: 2400, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return fail("lr and adam_eps must be positive, weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.lambda_mask < 0.0 || self.lambda_rcl < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.tau <= 0.0 {
            return fail(format!("temperature must be positive, got {}", self.tau));
        }
        if self.n_pos == 0 || self.n_neg == 0 || self.bank_capacity == 0 || self.rank == 0 {
            return fail("n_pos, n_neg, bank_capacity and rank must be positive".into());
        }
        if !(0.0..1.0).contains(&self.prompt_dropout) {
            return fail(format!("prompt_dropout must lie in [0, 1), got {}", self.prompt_dropout));
        }
        crate::lora::Placement::parse(&self.placement)?;
        Ok(())
    }
}
