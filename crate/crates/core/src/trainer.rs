//! Hybrid mask training of the adapter triplet and guided sampling.
//!
//! Each step picks one adapter group, amplifies the reconstruction loss on
//! that group's mask, adds the weighted contrastive term and updates only the
//! chosen group. Sampling drops the Subject adapters.

use std::collections::BTreeMap;
use std::path::Path;

use log::{error, info};
use rand::{Rng as _, SeedableRng};

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::datagen::DatasetEntry;
use crate::denoiser::{BaseWeights, Denoiser};
use crate::error::{Error, Result};
use crate::latent::{patchify, unpatchify, LatentVideo};
use crate::lora::{select_active, Choice, LoraSet, Pattern, Selection, TripletConfig};
use crate::mask::masked_loss_graph;
use crate::optim::{AdapterKey, Hyper};
use crate::rcl::{anchors_graph, appearance_features, rcl_loss_graph, sample_contrast, to_features, Contrast, MemoryBank, Role};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab;
use crate::{autodiff::Graph, Rng};

/// Guidance scale used when none is given.
pub const DEFAULT_CFG_SCALE: f64 = 6.0;
pub const DEFAULT_SAMPLING_STEPS: usize = 32;

/// The random choices of one step, drawn before any computation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraw<S> {
    pub selection: Selection,
    pub drop_prompt: bool,
    pub t: usize,
    pub noise: LatentVideo<S>,
}

/// Draws selection, prompt dropout, timestep and noise, in that order.
pub fn draw_step<S: Scalar>(model: &ModelConfig, train: &TrainConfig, rng: &mut Rng) -> StepDraw<S> {
    let selection = select_active(rng);
    let drop_prompt = rng.random_bool(train.prompt_dropout);
    let t = rng.random_range(0..model.timesteps);
    let noise = LatentVideo { data: Tensor::gaussian(&model.latent_dims(), 0.0, 1.0, rng) };
    StepDraw { selection, drop_prompt, t, noise }
}

/// Loss values of one step and, when requested, factor gradients of every
/// adapter in the trainable set.
#[derive(Clone, Debug)]
pub struct Objective<S> {
    pub l_rec: S,
    pub l_rcl: Option<S>,
    pub l_total: S,
    pub eps_hat: LatentVideo<S>,
    /// Detached dynamics features of this step, `(f−1)×c`.
    pub anchors: Tensor<S>,
    pub grads: Vec<(AdapterKey, Tensor<S>, Tensor<S>)>,
}

/// `L_rec + λ_1·L_RCL` for one entry under `draw`.
///
/// `contrast` receives the step's appearance features and returns the
/// positives and negatives, or `None` to skip the contrastive term. It is
/// not called when `λ_1 = 0`.
pub fn objective<S: Scalar>(
    denoiser: &Denoiser<S>,
    triplet: &TripletConfig<S>,
    train: &TrainConfig,
    entry: &DatasetEntry<S>,
    draw: &StepDraw<S>,
    contrast: impl FnOnce(&Tensor<S>) -> Option<Contrast<S>>,
    with_grads: bool,
) -> Result<Objective<S>> {
    let cfg = &denoiser.cfg;
    let z0 = patchify(&entry.video, cfg)?;
    let z_t = denoiser.schedule.add_noise(&z0, draw.t, &draw.noise)?;
    let text = if draw.drop_prompt { vocab::null_prompt() } else { entry.prompt.clone() };

    let mut g = if with_grads { Graph::new() } else { Graph::inference() };
    let trainable: &[LoraSet] = if with_grads { &draw.selection.trainable } else { &[] };
    let bound = triplet.bind(&mut g, trainable);
    let (eps_hat, _) = denoiser.forward_graph(&mut g, &z_t, &text, draw.t, Some(&bound), false)?;
    let mask = entry.masks.latent(draw.selection.mask_kind);
    let l_rec = masked_loss_graph(&mut g, &draw.noise, eps_hat, mask, train.lambda_mask)?;

    let eps_val = g.value(eps_hat).clone();
    let anchors = anchors_graph(&mut g, eps_hat)?;
    let mut total = l_rec;
    let mut l_rcl = None;
    if train.lambda_rcl != 0.0 {
        if let Some(c) = contrast(&appearance_features(&eps_val)?) {
            let l = rcl_loss_graph(&mut g, anchors, &c.positives, &c.negatives, train.tau)?;
            let weighted = g.scale(l, S::c(train.lambda_rcl));
            total = g.add(l_rec, weighted)?;
            l_rcl = Some(g.value(l).item());
        }
    }
    let l_total = g.value(total).item();
    let mut grads = Vec::new();
    if with_grads && l_total.is_finite() {
        g.backward(total)?;
        for (b, a) in bound.iter() {
            if draw.selection.trainable.contains(&a.set) {
                let gd = g.grad(a.down).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(a.down)));
                let gu = g.grad(a.up).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(a.up)));
                grads.push(((a.set, *b), gd, gu));
            }
        }
    }
    Ok(Objective {
        l_rec: g.value(l_rec).item(),
        l_rcl,
        l_total,
        eps_hat: LatentVideo::new(eps_val)?,
        anchors: g.value(anchors).clone(),
        grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub choice: Choice,
    pub timestep: usize,
    pub video: usize,
    pub prompt_dropped: bool,
    pub l_rec: f64,
    /// Zero when the contrastive term was skipped.
    pub l_rcl: f64,
    pub rcl_active: bool,
    pub l_total: f64,
}

/// Mutable training state: model, adapters, optimizer and memory bank.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub denoiser: Denoiser<S>,
    pub ckpt: Checkpoint<S>,
    pub bank: MemoryBank<S>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::init(model, train)?)
    }

    pub fn from_checkpoint(ckpt: Checkpoint<S>) -> Result<Self> {
        Ok(Self { denoiser: ckpt.denoiser()?, bank: MemoryBank::new(ckpt.train.bank_capacity), ckpt })
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.ckpt.train
    }

    pub fn triplet(&self) -> &TripletConfig<S> {
        &self.ckpt.triplet
    }

    /// One step on `entry`, drawing everything from `rng`.
    pub fn step(&mut self, entry: &DatasetEntry<S>, video: usize, rng: &mut Rng) -> Result<StepMetrics> {
        let draw = draw_step(&self.ckpt.model, &self.ckpt.train, rng);
        self.step_with(entry, video, &draw, rng)
    }

    /// One step with pre-drawn randomness; `rng` feeds contrastive sampling.
    pub fn step_with(&mut self, entry: &DatasetEntry<S>, video: usize, draw: &StepDraw<S>, rng: &mut Rng) -> Result<StepMetrics> {
        let train = self.ckpt.train.clone();
        let relation = entry.relation.name();
        let video_id = video.to_string();
        let rows = self.ckpt.model.latent_dims()[0] - 1;
        let bank = &self.bank;
        let mut appearance = Vec::new();
        let obj = objective(
            &self.denoiser,
            &self.ckpt.triplet,
            &train,
            entry,
            draw,
            |app| {
                appearance = to_features(app, Role::Appearance, relation, &video_id, draw.t);
                sample_contrast(bank, &appearance, relation, &video_id, train.n_pos, train.n_neg, rows, rng)
            },
            true,
        )?;
        let metrics = StepMetrics {
            iteration: self.ckpt.iteration,
            choice: draw.selection.choice,
            timestep: draw.t,
            video,
            prompt_dropped: draw.drop_prompt,
            l_rec: obj.l_rec.f64(),
            l_rcl: obj.l_rcl.map_or(0.0, |x| x.f64()),
            rcl_active: obj.l_rcl.is_some(),
            l_total: obj.l_total.f64(),
        };
        if !metrics.l_total.is_finite() {
            let dump = format!(
                "non-finite loss at iteration {}: choice {}, timestep {}, video {video}, prompt {:?} (dropped: {}), \
                 l_rec {}, l_rcl {}, |noise|max {}, |eps_hat|max {}",
                metrics.iteration,
                metrics.choice.name(),
                draw.t,
                entry.prompt,
                draw.drop_prompt,
                metrics.l_rec,
                metrics.l_rcl,
                max_abs(&draw.noise.data),
                max_abs(&obj.eps_hat.data),
            );
            error!("{dump}");
            return Err(Error::Numeric(dump));
        }

        let hyper = Hyper::from(&train);
        for ((set, b), gd, gu) in &obj.grads {
            let adapter = self.ckpt.triplet.set_mut(*set).get_mut(b).expect("bound adapter exists");
            self.ckpt.optimizer.step((*set, *b), adapter, gd, gu, &hyper)?;
        }

        let mut feats = to_features(&obj.anchors, Role::Dynamics, relation, &video_id, draw.t);
        if appearance.is_empty() {
            appearance = to_features(&appearance_features(&obj.eps_hat.data)?, Role::Appearance, relation, &video_id, draw.t);
        }
        feats.append(&mut appearance);
        self.bank.push(feats);
        self.ckpt.iteration += 1;
        Ok(metrics)
    }
}

fn max_abs<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data().iter().map(|x| x.f64().abs()).fold(0.0, f64::max)
}

/// Seed of the step generator for a training run.
fn step_rng(train: &TrainConfig) -> Rng {
    Rng::seed_from_u64(train.seed ^ 0x7a11_0000_0000_0001)
}

fn check_dataset<S: Scalar>(dataset: &[DatasetEntry<S>], model: &ModelConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::dataset("dataset", "no entries to train on"));
    }
    let want = model.video_dims();
    let [f, h, w, _] = model.latent_dims();
    for (i, e) in dataset.iter().enumerate() {
        if e.video.shape() != want {
            return Err(Error::dataset(format!("entry {i}"), format!("video {:?}, model expects {want:?}", e.video.shape())));
        }
        if e.masks.latent_r.shape() != [f, h, w] {
            return Err(Error::dataset(format!("entry {i}"), format!("latent masks {:?}, model expects {:?}", e.masks.latent_r.shape(), [f, h, w])));
        }
    }
    Ok(())
}

fn pattern_of<S>(dataset: &[DatasetEntry<S>]) -> Pattern {
    let same = |f: &dyn Fn(&DatasetEntry<S>) -> String| {
        let first = f(&dataset[0]);
        if dataset.iter().all(|e| f(e) == first) { first } else { "*".to_string() }
    };
    Pattern {
        subject1: same(&|e| e.spec.shape1.name().to_string()),
        relation: same(&|e| e.relation.name().to_string()),
        subject2: same(&|e| e.spec.shape2.name().to_string()),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    pub metrics: Vec<StepMetrics>,
}

/// Runs `train.iterations` steps, sampling one entry uniformly per step.
/// With `out`, a checkpoint is written every `checkpoint_every` iterations
/// and at the end.
pub fn train<S: Scalar>(
    dataset: &[DatasetEntry<S>],
    model: ModelConfig,
    train: TrainConfig,
    out: Option<&Path>,
    on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome<S>> {
    train_on(dataset, None, model, train, out, on_step)
}

/// [`train`] starting from given base weights instead of a fresh
/// initialization.
pub fn train_on<S: Scalar>(
    dataset: &[DatasetEntry<S>],
    base: Option<BaseWeights<S>>,
    model: ModelConfig,
    train: TrainConfig,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome<S>> {
    model.validate()?;
    train.validate()?;
    check_dataset(dataset, &model)?;
    let mut ckpt = Checkpoint::init(model, train.clone())?;
    if let Some(base) = base {
        let named: BTreeMap<String, Tensor<S>> = base.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        ckpt.base = BaseWeights::from_named(&ckpt.model, &named)?;
    }
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    trainer.ckpt.triplet.pattern = pattern_of(dataset);
    let mut rng = step_rng(&train);
    let mut metrics = Vec::with_capacity(train.iterations);
    for i in 0..train.iterations {
        let video = rng.random_range(0..dataset.len());
        let m = trainer.step(&dataset[video], video, &mut rng)?;
        on_step(&m);
        metrics.push(m);
        if let (Some(path), k) = (out, train.checkpoint_every) {
            if k > 0 && (i + 1) % k == 0 && i + 1 < train.iterations {
                trainer.ckpt.save(path)?;
                info!("checkpoint at iteration {} written to {}", i + 1, path.display());
            }
        }
    }
    if let Some(path) = out {
        trainer.ckpt.save(path)?;
    }
    Ok(TrainOutcome { checkpoint: trainer.ckpt, metrics })
}

/// `(1 − s)·ε_null + s·ε_cond`, which equals `ε_null + s·(ε_cond − ε_null)`
/// and reproduces either input exactly at `s = 0` or `s = 1`.
pub fn guide<S: Scalar>(eps_null: &Tensor<S>, eps_cond: &Tensor<S>, scale: f64) -> Result<Tensor<S>> {
    let (a, b) = (S::c(1.0 - scale), S::c(scale));
    eps_null.zip_map(eps_cond, |u, c| a * u + b * c)
}

/// Descending timesteps spread over `[0, T)`, starting at `T − 1`.
pub fn sampling_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least 1 step".into()));
    }
    if steps > timesteps {
        return Err(Error::Config(format!("{steps} sampling steps exceed {timesteps} timesteps")));
    }
    if steps == 1 {
        return Ok(vec![timesteps - 1]);
    }
    Ok((0..steps).rev().map(|i| ((i * (timesteps - 1)) as f64 / (steps - 1) as f64).round() as usize).collect())
}

/// Deterministic DDIM sampling with classifier-free guidance, using exactly
/// the adapters given. Each step's clean estimate is clipped to the pixel
/// range `[0, 1]` and ε̂ is re-derived from it.
pub fn sample_with<S: Scalar>(
    denoiser: &Denoiser<S>,
    adapters: Option<&TripletConfig<S>>,
    prompt: &[usize],
    steps: usize,
    cfg_scale: f64,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    let cfg = &denoiser.cfg;
    let ts = sampling_timesteps(cfg.timesteps, steps)?;
    if !cfg_scale.is_finite() {
        return Err(Error::Config(format!("guidance scale must be finite, got {cfg_scale}")));
    }
    let null = vocab::null_prompt();
    let mut z = LatentVideo { data: Tensor::gaussian(&cfg.latent_dims(), 0.0, 1.0, rng) };
    for (i, &t) in ts.iter().enumerate() {
        let eps = if cfg_scale == 0.0 {
            denoiser.predict(&z, &null, t, adapters, false)?.0.data
        } else if cfg_scale == 1.0 {
            denoiser.predict(&z, prompt, t, adapters, false)?.0.data
        } else {
            let u = denoiser.predict(&z, &null, t, adapters, false)?.0.data;
            let c = denoiser.predict(&z, prompt, t, adapters, false)?.0.data;
            guide(&u, &c, cfg_scale)?
        };
        let ab = S::c(denoiser.schedule.alpha_bar(t)?);
        let ab_prev = S::c(ts.get(i + 1).map_or(Ok(1.0), |&p| denoiser.schedule.alpha_bar(p))?);
        let (sa, sb) = (ab.sqrt(), (S::one() - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (S::one() - ab_prev).sqrt());
        let x0 = z.data.zip_map(&eps, |zi, e| ((zi - sb * e) / sa).clamp(S::zero(), S::one()))?;
        let eps = z.data.zip_map(&x0, |zi, x| (zi - sa * x) / sb)?;
        z = LatentVideo { data: x0.zip_map(&eps, |x, e| pa * x + pb * e)? };
    }
    unpatchify(&z, cfg)
}

/// Samples a video for `prompt` with the Subject adapters excluded.
pub fn sample<S: Scalar>(ckpt: &Checkpoint<S>, prompt: &[usize], steps: usize, cfg_scale: f64, rng: &mut Rng) -> Result<Tensor<S>> {
    let denoiser = ckpt.denoiser()?;
    let view = ckpt.triplet.inference_view();
    sample_with(&denoiser, Some(&view), prompt, steps, cfg_scale, rng)
}
