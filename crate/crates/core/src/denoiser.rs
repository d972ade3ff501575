//! Miniature joint-attention diffusion transformer predicting ε.
//!
//! Text and vision tokens keep separate projection weights (and separate
//! LoRA sets) but attend jointly over the concatenated sequence. Vision
//! tokens are the cells of the latent grid in `(f, h, w)` order, so the output
//! reshapes straight back to the latent shape.

use std::collections::BTreeMap;

use rand::SeedableRng;

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, Output};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::lora::{Branch, BoundTriplet, LoraBinding, Matrix, TripletConfig};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::Rng;

const NORM_EPS: f64 = 1e-6;

/// Frozen projection weights of one branch of one block, `d_out×d_in` each.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchWeights<S> {
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    pub attn_out: Tensor<S>,
    pub ffn_in: Tensor<S>,
    pub ffn_out: Tensor<S>,
}

impl<S: Scalar> BranchWeights<S> {
    pub fn get(&self, m: Matrix) -> &Tensor<S> {
        match m {
            Matrix::Q => &self.q,
            Matrix::K => &self.k,
            Matrix::V => &self.v,
            Matrix::AttnOut => &self.attn_out,
            Matrix::FfnIn => &self.ffn_in,
            Matrix::FfnOut => &self.ffn_out,
        }
    }

    pub fn get_mut(&mut self, m: Matrix) -> &mut Tensor<S> {
        match m {
            Matrix::Q => &mut self.q,
            Matrix::K => &mut self.k,
            Matrix::V => &mut self.v,
            Matrix::AttnOut => &mut self.attn_out,
            Matrix::FfnIn => &mut self.ffn_in,
            Matrix::FfnOut => &mut self.ffn_out,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<S> {
    pub text: BranchWeights<S>,
    pub vision: BranchWeights<S>,
}

impl<S> BlockWeights<S> {
    pub fn branch(&self, b: Branch) -> &BranchWeights<S> {
        match b {
            Branch::Text => &self.text,
            Branch::Vision => &self.vision,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut BranchWeights<S> {
        match b {
            Branch::Text => &mut self.text,
            Branch::Vision => &mut self.vision,
        }
    }
}

/// Frozen base model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights<S> {
    /// `d×c` latent-cell embedding.
    pub vision_embed: Tensor<S>,
    /// `vocab×d` token table.
    pub text_embed: Tensor<S>,
    pub blocks: Vec<BlockWeights<S>>,
    /// `c×d` output projection.
    pub head: Tensor<S>,
}

impl<S: Scalar> BaseWeights<S> {
    /// Gaussian init with variance `1/d_in` per projection.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let [_, _, _, c] = cfg.latent_dims();
        let d = cfg.d_model;
        let lin = |d_out: usize, d_in: usize, rng: &mut Rng| {
            Tensor::gaussian(&[d_out, d_in], 0.0, (1.0 / d_in as f64).sqrt(), rng)
        };
        let vision_embed = lin(d, c, &mut rng);
        let text_embed = Tensor::gaussian(&[cfg.vocab, d], 0.0, 1.0, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let branch = |rng: &mut Rng| BranchWeights {
                q: lin(d, d, rng),
                k: lin(d, d, rng),
                v: lin(d, d, rng),
                attn_out: lin(d, d, rng),
                ffn_in: lin(cfg.ffn_hidden(), d, rng),
                ffn_out: lin(d, cfg.ffn_hidden(), rng),
            };
            let text = branch(&mut rng);
            let vision = branch(&mut rng);
            blocks.push(BlockWeights { text, vision });
        }
        let head = lin(c, d, &mut rng);
        Ok(Self { vision_embed, text_embed, blocks, head })
    }

    /// Named tensors in a fixed order, as stored in checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("base/vision_embed".to_string(), &self.vision_embed),
            ("base/text_embed".to_string(), &self.text_embed),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for b in Branch::ALL {
                for m in [Matrix::Q, Matrix::K, Matrix::V, Matrix::AttnOut, Matrix::FfnIn, Matrix::FfnOut] {
                    out.push((format!("base/layer{l}/{}/{}", b.name(), m.name()), block.branch(b).get(m)));
                }
            }
        }
        out.push(("base/head".to_string(), &self.head));
        out
    }

    /// Rebuilds weights from named tensors, checking each against `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: &BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let mut w = Self::init(cfg)?;
        let expected: Vec<(String, Vec<usize>)> =
            w.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for (name, shape) in expected {
            let t = tensors.get(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "tensor `{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            *w.slot_mut(&name).expect("name produced by named()") = t.clone();
        }
        Ok(w)
    }

    /// Places every tensor into `g`, as trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> BoundBase {
        let mut leaf = |t: &Tensor<S>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let vision_embed = leaf(&self.vision_embed);
        let text_embed = leaf(&self.text_embed);
        let blocks = self
            .blocks
            .iter()
            .map(|blk| Branch::ALL.map(|b| BASE_MATRICES.map(|m| leaf(blk.branch(b).get(m)))))
            .collect();
        let head = leaf(&self.head);
        BoundBase { vision_embed, text_embed, blocks, head }
    }

    pub fn get_named_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.slot_mut(name)
    }

    fn slot_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        match name {
            "base/vision_embed" => return Some(&mut self.vision_embed),
            "base/text_embed" => return Some(&mut self.text_embed),
            "base/head" => return Some(&mut self.head),
            _ => {}
        }
        let rest = name.strip_prefix("base/layer")?;
        let mut parts = rest.split('/');
        let l: usize = parts.next()?.parse().ok()?;
        let b = match parts.next()? {
            "text" => Branch::Text,
            "vision" => Branch::Vision,
            _ => return None,
        };
        let m = [Matrix::Q, Matrix::K, Matrix::V, Matrix::AttnOut, Matrix::FfnIn, Matrix::FfnOut]
            .into_iter()
            .find(|m| Some(m.name()) == parts.clone().next())?;
        Some(self.blocks.get_mut(l)?.branch_mut(b).get_mut(m))
    }
}

/// Base weights placed in a graph.
#[derive(Clone, Debug)]
pub struct BoundBase {
    pub vision_embed: Var,
    pub text_embed: Var,
    /// `[layer][branch][matrix]` in [`Branch::ALL`] and [`BASE_MATRICES`] order.
    pub blocks: Vec<[[Var; 6]; 2]>,
    pub head: Var,
}

/// Projection matrices of one branch in storage order.
pub const BASE_MATRICES: [Matrix; 6] = [Matrix::Q, Matrix::K, Matrix::V, Matrix::AttnOut, Matrix::FfnIn, Matrix::FfnOut];

fn matrix_slot(m: Matrix) -> usize {
    BASE_MATRICES.iter().position(|x| *x == m).expect("every matrix is stored")
}

impl BoundBase {
    pub fn get(&self, layer: usize, b: Branch, m: Matrix) -> Var {
        self.blocks[layer][b as usize][matrix_slot(m)]
    }

    /// Every bound tensor paired with its checkpoint name, in [`BaseWeights::named`] order.
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = vec![("base/vision_embed".to_string(), self.vision_embed), ("base/text_embed".to_string(), self.text_embed)];
        for (l, block) in self.blocks.iter().enumerate() {
            for b in Branch::ALL {
                for m in BASE_MATRICES {
                    out.push((format!("base/layer{l}/{}/{}", b.name(), m.name()), block[b as usize][matrix_slot(m)]));
                }
            }
        }
        out.push(("base/head".to_string(), self.head));
        out
    }
}

/// Q/K/V activations of the vision tokens and the full attention matrix of
/// one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRecord<S> {
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    /// Row-stochastic `n×n` weights over the joint sequence, text tokens first.
    pub attention: Tensor<S>,
}

/// Activations captured during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<S> {
    pub timestep: usize,
    pub text_tokens: Vec<usize>,
    /// Latent grid `(f, h, w)` of the vision tokens.
    pub grid: [usize; 3],
    /// `layers[l][h]`
    pub layers: Vec<Vec<HeadRecord<S>>>,
}

impl<S: Scalar> AttentionRecord<S> {
    pub fn text_len(&self) -> usize {
        self.text_tokens.len()
    }

    pub fn vision_len(&self) -> usize {
        self.grid.iter().product()
    }
}

/// The denoising network: frozen base weights plus fixed embeddings.
#[derive(Clone, Debug)]
pub struct Denoiser<S> {
    pub cfg: ModelConfig,
    pub weights: BaseWeights<S>,
    pub schedule: NoiseSchedule,
    vision_pos: Tensor<S>,
    text_pos: Tensor<S>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let weights = BaseWeights::init(&cfg)?;
        Self::with_weights(cfg, weights)
    }

    pub fn with_weights(cfg: ModelConfig, weights: BaseWeights<S>) -> Result<Self> {
        cfg.validate()?;
        let schedule = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
        let [f, h, w, _] = cfg.latent_dims();
        let vision_pos = grid_positions(f, h, w, cfg.d_model);
        let text_pos = Tensor::from_fn(&[cfg.text_len, cfg.d_model], |i| {
            let (pos, k) = (i / cfg.d_model, i % cfg.d_model);
            S::c(sinusoid(pos as f64, k, cfg.d_model, 100.0))
        });
        Ok(Self { cfg, weights, schedule, vision_pos, text_pos })
    }

    /// Sinusoidal embedding of timestep `t`, added to every token.
    pub fn timestep_embedding(&self, t: usize) -> Tensor<S> {
        let d = self.cfg.d_model;
        Tensor::from_fn(&[d], |k| S::c(sinusoid(t as f64, k, d, 10_000.0)))
    }

    fn check_text(&self, text: &[usize]) -> Result<()> {
        if text.is_empty() || text.len() > self.cfg.text_len {
            return Err(Error::Contract(format!("prompt of {} tokens, expected 1..={}", text.len(), self.cfg.text_len)));
        }
        if let Some(bad) = text.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab)));
        }
        Ok(())
    }

    /// Forward pass recorded into `g` with the base weights as constants.
    /// Returns ε̂ of latent shape.
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        z_t: &LatentVideo<S>,
        text: &[usize],
        t: usize,
        triplet: Option<&BoundTriplet<S>>,
        record: bool,
    ) -> Result<(Var, Option<AttentionRecord<S>>)> {
        let base = self.weights.bind(g, false);
        self.forward_bound(g, &base, z_t, text, t, triplet, record)
    }

    /// Forward pass using base weights already placed in `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_bound(
        &self,
        g: &mut Graph<S>,
        base: &BoundBase,
        z_t: &LatentVideo<S>,
        text: &[usize],
        t: usize,
        triplet: Option<&BoundTriplet<S>>,
        record: bool,
    ) -> Result<(Var, Option<AttentionRecord<S>>)> {
        let cfg = &self.cfg;
        self.check_text(text)?;
        if t >= cfg.timesteps {
            return Err(Error::Range(format!("timestep {t} outside [0, {})", cfg.timesteps)));
        }
        let dims = cfg.latent_dims();
        if z_t.dims() != dims {
            return Err(Error::Dimension(format!("latent {:?}, model expects {dims:?}", z_t.dims())));
        }
        if let Some(bt) = triplet {
            if let Some((b, _)) = bt.iter().find(|(b, _)| b.layer >= cfg.layers) {
                return Err(Error::Binding(format!("adapter bound to {b}, model has {} layers", cfg.layers)));
            }
        }
        let [f, h, w, c] = dims;
        let n_vis = f * h * w;
        let n_txt = text.len();
        let (d, heads, dh) = (cfg.d_model, cfg.heads, cfg.head_dim());
        let eps = S::c(NORM_EPS);

        let temb = g.constant(self.timestep_embedding(t));

        let cells = g.constant(z_t.data.reshape(&[n_vis, c])?);
        let mut x_vis = g.matmul_t(cells, base.vision_embed)?;
        let pos = g.constant(self.vision_pos.clone());
        x_vis = g.add(x_vis, pos)?;
        x_vis = g.add_row(x_vis, temb)?;

        let mut x_txt = g.gather_rows(base.text_embed, text)?;
        let tpos = Tensor::new(vec![n_txt, d], self.text_pos.data()[..n_txt * d].to_vec())?;
        let tpos = g.constant(tpos);
        x_txt = g.add(x_txt, tpos)?;
        x_txt = g.add_row(x_txt, temb)?;

        let scale = S::c(1.0 / (dh as f64).sqrt());
        let mut layers_rec = Vec::new();
        for layer in 0..cfg.layers {
            let lin = |g: &mut Graph<S>, x: Var, branch: Branch, m: Matrix| -> Result<Var> {
                let mut y = g.matmul_t(x, base.get(layer, branch, m))?;
                if let Some(bt) = triplet {
                    for a in bt.at(&LoraBinding { layer, matrix: m, branch }) {
                        let low = g.matmul_t(x, a.down)?;
                        let mut delta = g.matmul_t(low, a.up)?;
                        if a.scale != S::one() {
                            delta = g.scale(delta, a.scale);
                        }
                        y = g.add(y, delta)?;
                    }
                }
                Ok(y)
            };

            let h_txt = g.rms_norm(x_txt, eps)?;
            let h_vis = g.rms_norm(x_vis, eps)?;
            let mut proj = |m: Matrix| -> Result<Var> {
                let a = lin(g, h_txt, Branch::Text, m)?;
                let b = lin(g, h_vis, Branch::Vision, m)?;
                g.concat(&[a, b], 0)
            };
            let q = proj(Matrix::Q)?;
            let k = proj(Matrix::K)?;
            let v = proj(Matrix::V)?;

            let mut head_outs = Vec::with_capacity(heads);
            let mut head_rec = Vec::new();
            for hd in 0..heads {
                let qh = g.narrow(q, 1, hd * dh, dh)?;
                let kh = g.narrow(k, 1, hd * dh, dh)?;
                let vh = g.narrow(v, 1, hd * dh, dh)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale);
                let probs = g.softmax(scores, 1)?;
                head_outs.push(g.matmul(probs, vh)?);
                if record {
                    let vis_rows = |t: &Tensor<S>| {
                        Tensor::new(vec![n_vis, dh], t.data()[n_txt * dh..].to_vec()).expect("row slice")
                    };
                    head_rec.push(HeadRecord {
                        q: vis_rows(g.value(qh)),
                        k: vis_rows(g.value(kh)),
                        v: vis_rows(g.value(vh)),
                        attention: g.value(probs).clone(),
                    });
                }
            }
            if record {
                layers_rec.push(head_rec);
            }
            let attn = g.concat(&head_outs, 1)?;
            let o_txt = g.narrow(attn, 0, 0, n_txt)?;
            let o_vis = g.narrow(attn, 0, n_txt, n_vis)?;
            let o_txt = lin(g, o_txt, Branch::Text, Matrix::AttnOut)?;
            let o_vis = lin(g, o_vis, Branch::Vision, Matrix::AttnOut)?;
            x_txt = g.add(x_txt, o_txt)?;
            x_vis = g.add(x_vis, o_vis)?;

            let ffn = |g: &mut Graph<S>, x: Var, branch: Branch| -> Result<Var> {
                let hn = g.rms_norm(x, eps)?;
                let hid = lin(g, hn, branch, Matrix::FfnIn)?;
                let act = g.gelu(hid);
                let out = lin(g, act, branch, Matrix::FfnOut)?;
                g.add(x, out)
            };
            x_txt = ffn(g, x_txt, Branch::Text)?;
            x_vis = ffn(g, x_vis, Branch::Vision)?;
        }

        let hn = g.rms_norm(x_vis, eps)?;
        let out = g.matmul_t(hn, base.head)?;
        let mut out = g.reshape(out, &[f, h, w, c])?;
        if cfg.output == Output::Velocity {
            let ab = self.schedule.alpha_bar(t)?;
            let skip = g.constant(z_t.data.map(|x| x * S::c((1.0 - ab).sqrt())));
            let v = g.scale(out, S::c(ab.sqrt()));
            out = g.add(skip, v)?;
        }
        let rec = record.then(|| AttentionRecord { timestep: t, text_tokens: text.to_vec(), grid: [f, h, w], layers: layers_rec });
        Ok((out, rec))
    }

    /// Inference forward: ε̂ and, when `record` is set, the attention record.
    pub fn predict(
        &self,
        z_t: &LatentVideo<S>,
        text: &[usize],
        t: usize,
        triplet: Option<&TripletConfig<S>>,
        record: bool,
    ) -> Result<(LatentVideo<S>, Option<AttentionRecord<S>>)> {
        if let Some(tr) = triplet {
            tr.check_against(&self.cfg)?;
        }
        let mut g = Graph::inference();
        let bound = triplet.map(|tr| tr.bind(&mut g, &[]));
        let (out, rec) = self.forward_graph(&mut g, z_t, text, t, bound.as_ref(), record)?;
        Ok((LatentVideo::new(g.value(out).clone())?, rec))
    }
}

/// Mean squared error between the injected and the predicted noise.
pub fn diffusion_loss<S: Scalar>(eps: &LatentVideo<S>, eps_hat: &LatentVideo<S>) -> Result<S> {
    let sq = eps.data.zip_map(&eps_hat.data, |a, b| (a - b) * (a - b))?;
    Ok(sq.mean())
}

/// Graph form of [`diffusion_loss`]; `eps` enters as a constant.
pub fn diffusion_loss_graph<S: Scalar>(g: &mut Graph<S>, eps: &LatentVideo<S>, eps_hat: Var) -> Result<Var> {
    let target = g.constant(eps.data.clone());
    let diff = g.sub(eps_hat, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

fn sinusoid(pos: f64, k: usize, dim: usize, base: f64) -> f64 {
    let half = dim / 2;
    let i = k % half;
    let freq = base.powf(-(i as f64) / half as f64);
    if k < half {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}

/// Fixed 3-D sinusoidal code: a quarter of the channels for the frame index,
/// the rest split between row and column.
fn grid_positions<S: Scalar>(f: usize, h: usize, w: usize, d: usize) -> Tensor<S> {
    let df = 2 * (d / 8);
    let dh = 2 * ((d - df) / 4);
    let dw = d - df - dh;
    let mut out = Tensor::zeros(&[f * h * w, d]);
    for fi in 0..f {
        for hi in 0..h {
            for wi in 0..w {
                let row = (fi * h + hi) * w + wi;
                for k in 0..d {
                    let v = if k < df {
                        sinusoid(fi as f64, k, df, 100.0)
                    } else if k < df + dh {
                        sinusoid(hi as f64, k - df, dh, 100.0)
                    } else {
                        sinusoid(wi as f64, k - df - dh, dw, 100.0)
                    };
                    out.set(&[row, k], S::c(v));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::Placement;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            ffn_mult: 2,
            frames: 4,
            height: 8,
            width: 8,
            temporal_factor: 2,
            patch: 4,
            timesteps: 20,
            ..Default::default()
        }
    }

    fn noise(cfg: &ModelConfig, seed: u64) -> LatentVideo<f64> {
        LatentVideo::new(Tensor::gaussian(&cfg.latent_dims(), 0.0, 1.0, &mut Rng::seed_from_u64(seed))).unwrap()
    }

    #[test]
    fn output_shape_and_record_rows() {
        let cfg = tiny();
        let m = Denoiser::<f64>::new(cfg.clone()).unwrap();
        let (out, rec) = m.predict(&noise(&cfg, 1), &[1, 5, 2], 7, None, true).unwrap();
        assert_eq!(out.dims(), cfg.latent_dims());
        let rec = rec.unwrap();
        assert_eq!(rec.layers.len(), 2);
        assert_eq!(rec.layers[0].len(), 2);
        for head in rec.layers.iter().flatten() {
            let n = rec.text_len() + rec.vision_len();
            assert_eq!(head.attention.shape(), &[n, n]);
            for r in 0..n {
                let s: f64 = head.attention.data()[r * n..(r + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_up_triplet_is_bitwise_identity() {
        let cfg = tiny();
        let m = Denoiser::<f64>::new(cfg.clone()).unwrap();
        let tr = TripletConfig::init(&cfg, Placement::default(), 4, 1.0, 9).unwrap();
        let z = noise(&cfg, 2);
        let (a, _) = m.predict(&z, &[1, 5, 2], 3, None, false).unwrap();
        let (b, _) = m.predict(&z, &[1, 5, 2], 3, Some(&tr), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_errors() {
        let cfg = tiny();
        let m = Denoiser::<f64>::new(cfg.clone()).unwrap();
        let z = noise(&cfg, 3);
        assert!(matches!(m.predict(&z, &[99], 0, None, false), Err(Error::Vocab(_))));
        assert!(matches!(m.predict(&z, &[1], 20, None, false), Err(Error::Range(_))));
        let deeper = ModelConfig { layers: 3, ..cfg.clone() };
        let tr = TripletConfig::init(&deeper, Placement::default(), 2, 1.0, 0).unwrap();
        assert!(matches!(m.predict(&z, &[1], 0, Some(&tr), false), Err(Error::Binding(_))));
    }

    #[test]
    fn calls_are_independent() {
        let cfg = tiny();
        let m = Denoiser::<f64>::new(cfg.clone()).unwrap();
        let (z1, z2) = (noise(&cfg, 4), noise(&cfg, 5));
        let a1 = m.predict(&z1, &[1], 4, None, false).unwrap().0;
        let _ = m.predict(&z2, &[2], 9, None, false).unwrap();
        let a2 = m.predict(&z1, &[1], 4, None, false).unwrap().0;
        assert_eq!(a1, a2);
    }

    #[test]
    fn loss_closed_forms() {
        let a = LatentVideo::new(Tensor::<f64>::zeros(&[1, 2, 2, 3])).unwrap();
        let b = LatentVideo::new(Tensor::full(&[1, 2, 2, 3], 2.0)).unwrap();
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&a, &b).unwrap(), 4.0);
        let c = LatentVideo::new(Tensor::<f64>::zeros(&[1, 2, 2, 2])).unwrap();
        assert!(matches!(diffusion_loss(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn named_round_trip() {
        let cfg = tiny();
        let w = BaseWeights::<f64>::init(&cfg).unwrap();
        let map: BTreeMap<String, Tensor<f64>> = w.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(BaseWeights::from_named(&cfg, &map).unwrap(), w);
        let wide = ModelConfig { d_model: 24, heads: 2, ..cfg };
        let err = BaseWeights::<f64>::from_named(&wide, &map).unwrap_err().to_string();
        assert!(err.contains("base/vision_embed"), "{err}");
    }
}
