//! Base-model pretraining on relation-agnostic clips.
//!
//! Adapter customization assumes a base model that already renders moving
//! subjects. This stage trains all base weights with the plain diffusion loss
//! on clips of every relation, captioned only with their subjects, so the
//! base learns to draw shapes in motion without tying any motion to a
//! relation word.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Output};
use crate::datagen::{gen_video, DatasetEntry, Relation, RelationSpec, VideoShape};
use crate::denoiser::{diffusion_loss_graph, BaseWeights, Denoiser};
use crate::error::{Error, Result};
use crate::latent::{patchify, LatentVideo};
use crate::optim::{adam_update, Hyper};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{autodiff::Graph, vocab, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub prompt_dropout: f64,
    /// Decay of the weight average that is returned; 0 returns the raw weights.
    pub ema_decay: f64,
    /// Generated clips per relation in the corpus.
    pub clips_per_relation: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            prompt_dropout: 0.1,
            ema_decay: 0.999,
            clips_per_relation: 40,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("pretrain lr and adam_eps must be positive, weight_decay non-negative".into()));
        }
        if [self.beta1, self.beta2, self.prompt_dropout, self.ema_decay].iter().any(|x| !(0.0..1.0).contains(x)) {
            return Err(Error::Config("pretrain betas, prompt_dropout and ema_decay must lie in [0, 1)".into()));
        }
        if self.clips_per_relation == 0 {
            return Err(Error::Config("pretrain corpus needs at least one clip per relation".into()));
        }
        Ok(())
    }
}

/// `"⟨shape1⟩ and ⟨shape2⟩"`: the subjects of a clip without its relation.
pub fn subject_prompt(spec: &RelationSpec) -> Result<Vec<usize>> {
    vocab::encode(&format!("{} and {}", spec.shape1.name(), spec.shape2.name()))
}

/// Clips of every relation with random shape pairs, prompts replaced by
/// [`subject_prompt`].
pub fn corpus<S: Scalar>(shape: &VideoShape, clips_per_relation: usize, seed: u64) -> Result<Vec<DatasetEntry<S>>> {
    let mut out = Vec::with_capacity(clips_per_relation * Relation::ALL.len());
    for i in 0..clips_per_relation {
        for (r, rel) in Relation::ALL.into_iter().enumerate() {
            let spec_seed = seed.wrapping_mul(1_000_003).wrapping_add((i * Relation::ALL.len() + r) as u64);
            let spec = RelationSpec::sample(rel, spec_seed)?;
            let mut e = gen_video(&spec, shape)?;
            e.prompt = subject_prompt(&spec)?;
            out.push(e);
        }
    }
    Ok(out)
}

/// Trains every base weight with the unmasked diffusion loss. A velocity
/// head is trained on its own target, i.e. the ε loss divided by ᾱ, so high
/// noise levels, where the layout is decided, are not drowned out.
///
/// `on_step` sees the iteration, its loss and the averaged weights. Returns
/// the averaged weights and the per-step losses.
pub fn pretrain<S: Scalar>(
    model: &ModelConfig,
    corpus: &[DatasetEntry<S>],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64, &BaseWeights<S>),
) -> Result<(BaseWeights<S>, Vec<f64>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::dataset("pretrain corpus", "no clips"));
    }
    let mut den = Denoiser::<S>::new(model.clone())?;
    let mut moments: Vec<(Tensor<S>, Tensor<S>)> =
        den.weights.named().into_iter().map(|(_, t)| (Tensor::zeros(t.shape()), Tensor::zeros(t.shape()))).collect();
    let hyper = Hyper { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay };
    let mut rng = Rng::seed_from_u64(cfg.seed ^ 0xba5e_0000_0000_0002);
    let mut average = den.weights.clone();
    let decay = S::c(cfg.ema_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 1..=cfg.iterations {
        let entry = &corpus[rng.random_range(0..corpus.len())];
        let drop = rng.random_bool(cfg.prompt_dropout);
        let t = rng.random_range(0..model.timesteps);
        let noise = LatentVideo { data: Tensor::gaussian(&model.latent_dims(), 0.0, 1.0, &mut rng) };
        let z_t = den.schedule.add_noise(&patchify(&entry.video, model)?, t, &noise)?;
        let text = if drop { vocab::null_prompt() } else { entry.prompt.clone() };

        let mut g = Graph::new();
        let bound = den.weights.bind(&mut g, true);
        let (eps_hat, _) = den.forward_bound(&mut g, &bound, &z_t, &text, t, None, false)?;
        let mut loss = diffusion_loss_graph(&mut g, &noise, eps_hat)?;
        if model.output == Output::Velocity {
            loss = g.scale(loss, S::c(1.0 / den.schedule.alpha_bar(t)?));
        }
        let value = g.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite pretraining loss at step {step} (timestep {t}, prompt {text:?})")));
        }
        g.backward(loss)?;
        for ((name, var), (m, v)) in bound.named().into_iter().zip(moments.iter_mut()) {
            let Some(grad) = g.grad(var) else { continue };
            let w = den.weights.get_named_mut(&name).expect("bound names are base names");
            adam_update(w, grad, m, v, &hyper, step as u64);
            let avg = average.get_named_mut(&name).expect("bound names are base names");
            *avg = avg.zip_map(w, |a, x| decay * a + (S::one() - decay) * x)?;
        }
        on_step(step, value, &average);
        losses.push(value);
    }
    Ok((average, losses))
}
