//! Space-time relational contrastive loss.
//!
//! Anchors are spatially averaged frame differences of the model output;
//! positives are the same kind of feature taken from other videos of the same
//! relation; negatives are spatially averaged single frames, which carry
//! appearance but no motion. All three live in a bounded FIFO memory bank as
//! detached vectors.

use std::collections::VecDeque;

use rand::seq::index;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Dynamics,
    Appearance,
}

/// One detached 1-D feature of length `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsFeature<S> {
    pub vector: Vec<S>,
    pub relation_id: String,
    pub role: Role,
    pub video_id: String,
    pub frame: usize,
    pub timestep: usize,
}

/// Bounded FIFO queue of features; the oldest entries are evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<S> {
    capacity: usize,
    queue: VecDeque<DynamicsFeature<S>>,
}

impl<S: Scalar> MemoryBank<S> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, queue: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DynamicsFeature<S>> {
        self.queue.iter()
    }

    pub fn push(&mut self, feats: impl IntoIterator<Item = DynamicsFeature<S>>) {
        for f in feats {
            if self.capacity == 0 {
                return;
            }
            if self.queue.len() == self.capacity {
                self.queue.pop_front();
            }
            self.queue.push_back(f);
        }
    }
}

fn check_latent<S: Scalar>(x: &Tensor<S>) -> Result<[usize; 4]> {
    match x.shape() {
        [f, h, w, c] => Ok([*f, *h, *w, *c]),
        s => Err(Error::Dimension(format!("expected f×h×w×c, got {s:?}"))),
    }
}

/// `out[i] = x[i+1] − x[i]` along the frame axis.
pub fn frame_differences<S: Scalar>(eps_hat: &Tensor<S>) -> Result<Tensor<S>> {
    let [f, h, w, c] = check_latent(eps_hat)?;
    if f < 2 {
        return Err(Error::Contract(format!("frame differences need at least 2 frames, got {f}")));
    }
    let plane = h * w * c;
    let d = eps_hat.data();
    let out = (0..(f - 1) * plane).map(|i| d[i + plane] - d[i]).collect();
    Tensor::new(vec![f - 1, h, w, c], out)
}

/// Spatial mean per frame and channel: `n×h×w×c → n×c`.
pub fn spatial_mean<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, h, w, c] = check_latent(x)?;
    let cells = S::c((h * w) as f64);
    let d = x.data();
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for ch in 0..c {
            let mut acc = S::zero();
            for cell in 0..h * w {
                acc = acc + d[(i * h * w + cell) * c + ch];
            }
            out.set(&[i, ch], acc / cells);
        }
    }
    Ok(out)
}

/// Relational dynamics features `(f−1)×c` from frame differences.
pub fn dynamics_features<S: Scalar>(diffs: &Tensor<S>) -> Result<Tensor<S>> {
    spatial_mean(diffs)
}

/// Appearance features `f×c`, one per single frame.
pub fn appearance_features<S: Scalar>(eps_hat: &Tensor<S>) -> Result<Tensor<S>> {
    spatial_mean(eps_hat)
}

/// Graph form: frame differences of `eps_hat` averaged over space, `(f−1)×c`.
pub fn anchors_graph<S: Scalar>(g: &mut Graph<S>, eps_hat: Var) -> Result<Var> {
    let [f, ..] = check_latent(g.value(eps_hat))?;
    if f < 2 {
        return Err(Error::Contract(format!("frame differences need at least 2 frames, got {f}")));
    }
    let later = g.narrow(eps_hat, 0, 1, f - 1)?;
    let earlier = g.narrow(eps_hat, 0, 0, f - 1)?;
    let diffs = g.sub(later, earlier)?;
    let rows = g.mean_axis(diffs, 1)?;
    g.mean_axis(rows, 1)
}

/// Wraps the rows of an `n×c` feature matrix as bank entries.
pub fn to_features<S: Scalar>(
    rows: &Tensor<S>,
    role: Role,
    relation_id: &str,
    video_id: &str,
    timestep: usize,
) -> Vec<DynamicsFeature<S>> {
    let c = rows.shape()[1];
    rows.data()
        .chunks(c)
        .enumerate()
        .map(|(frame, v)| DynamicsFeature {
            vector: v.to_vec(),
            relation_id: relation_id.to_string(),
            role,
            video_id: video_id.to_string(),
            frame,
            timestep,
        })
        .collect()
}

/// Positives `rows×n_pos×c` and negatives `rows×n_neg×c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Contrast<S> {
    pub positives: Tensor<S>,
    pub negatives: Tensor<S>,
}

/// Draws, independently for each of `rows` anchors, `n_pos` positives and
/// `n_neg` negatives without replacement.
///
/// Positives are bank dynamics features of `relation_id` from videos other
/// than `video_id`; negatives are appearance features from the bank or from
/// `extra_negatives`. Returns `None` (skip this step) when either pool is too
/// small.
#[allow(clippy::too_many_arguments)]
pub fn sample_contrast<S: Scalar>(
    bank: &MemoryBank<S>,
    extra_negatives: &[DynamicsFeature<S>],
    relation_id: &str,
    video_id: &str,
    n_pos: usize,
    n_neg: usize,
    rows: usize,
    rng: &mut Rng,
) -> Option<Contrast<S>> {
    let pos: Vec<&DynamicsFeature<S>> = bank
        .iter()
        .filter(|f| f.role == Role::Dynamics && f.relation_id == relation_id && f.video_id != video_id)
        .collect();
    let neg: Vec<&DynamicsFeature<S>> =
        bank.iter().chain(extra_negatives).filter(|f| f.role == Role::Appearance).collect();
    if pos.len() < n_pos || neg.len() < n_neg || n_pos == 0 || n_neg == 0 {
        return None;
    }
    let c = pos[0].vector.len();
    let mut p = Vec::with_capacity(rows * n_pos * c);
    let mut n = Vec::with_capacity(rows * n_neg * c);
    for _ in 0..rows {
        for i in index::sample(rng, pos.len(), n_pos) {
            p.extend_from_slice(&pos[i].vector);
        }
        for i in index::sample(rng, neg.len(), n_neg) {
            n.extend_from_slice(&neg[i].vector);
        }
    }
    Some(Contrast {
        positives: Tensor::new(vec![rows, n_pos, c], p).ok()?,
        negatives: Tensor::new(vec![rows, n_neg, c], n).ok()?,
    })
}

/// Unit-normalizes the last axis; zero vectors stay zero.
fn normalize_rows<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let c = *t.shape().last().expect("non-scalar");
    let mut out = t.clone();
    let mut zeroed = 0;
    for row in out.data_mut().chunks_mut(c) {
        let norm = row.iter().map(|&x| x * x).sum::<S>().sqrt();
        if norm < S::c(crate::autodiff::NORM_FLOOR) {
            row.iter_mut().for_each(|x| *x = S::zero());
            zeroed += 1;
        } else {
            row.iter_mut().for_each(|x| *x = *x / norm);
        }
    }
    if zeroed > 0 {
        log::warn!("contrastive features: {zeroed} zero-norm vector(s) treated as zero");
    }
    out
}

/// InfoNCE over anchors, summed:
/// `Σ_i −log( Σ_j e^{Â_i·P̂_ij/τ} / (Σ_j e^{Â_i·P̂_ij/τ} + Σ_k e^{Â_i·N̂_ik/τ}) )`
/// with all vectors unit-normalized. Only `anchors` carries gradient.
pub fn rcl_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    anchors: Var,
    positives: &Tensor<S>,
    negatives: &Tensor<S>,
    tau: f64,
) -> Result<Var> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (rows, c) = match g.shape(anchors) {
        [r, c] => (*r, *c),
        s => return Err(Error::Dimension(format!("anchors must be n×c, got {s:?}"))),
    };
    let (n_pos, n_neg) = match (positives.shape(), negatives.shape()) {
        ([r1, p, c1], [r2, n, c2]) if *r1 == rows && *r2 == rows && *c1 == c && *c2 == c && *p > 0 && *n > 0 => (*p, *n),
        (p, n) => {
            return Err(Error::Dimension(format!("anchors [{rows}, {c}] with positives {p:?} and negatives {n:?}")))
        }
    };
    let (pn, nn) = (normalize_rows(positives), normalize_rows(negatives));
    let width = n_pos + n_neg;
    let a_hat = g.l2_normalize(anchors, 1)?;
    let mut logit_rows = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut cand = Vec::with_capacity(width * c);
        cand.extend_from_slice(&pn.data()[i * n_pos * c..(i + 1) * n_pos * c]);
        cand.extend_from_slice(&nn.data()[i * n_neg * c..(i + 1) * n_neg * c]);
        let cand = g.constant(Tensor::new(vec![width, c], cand)?);
        let a_i = g.narrow(a_hat, 0, i, 1)?;
        logit_rows.push(g.matmul_t(a_i, cand)?);
    }
    let logits = g.concat(&logit_rows, 0)?;
    let logits = g.scale(logits, S::c(1.0 / tau));
    let all = g.log_sum_exp(logits, 1)?;
    let pos_logits = g.narrow(logits, 1, 0, n_pos)?;
    let pos = g.log_sum_exp(pos_logits, 1)?;
    let per_anchor = g.sub(all, pos)?;
    Ok(g.sum(per_anchor))
}

/// Value of [`rcl_loss_graph`] on plain tensors.
pub fn rcl_loss<S: Scalar>(anchors: &Tensor<S>, positives: &Tensor<S>, negatives: &Tensor<S>, tau: f64) -> Result<S> {
    let mut g = Graph::inference();
    let a = g.constant(anchors.clone());
    let l = rcl_loss_graph(&mut g, a, positives, negatives, tau)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn feat(i: usize, role: Role, rel: &str, video: &str) -> DynamicsFeature<f64> {
        DynamicsFeature {
            vector: vec![i as f64, 1.0],
            relation_id: rel.into(),
            role,
            video_id: video.into(),
            frame: i,
            timestep: 0,
        }
    }

    #[test]
    fn differences() {
        let x = Tensor::new(vec![3, 1, 1, 1], vec![1.0, 3.0, 6.0]).unwrap();
        assert_eq!(frame_differences(&x).unwrap().data(), &[2.0, 3.0]);
        let still = Tensor::<f64>::full(&[4, 2, 2, 3], 0.7);
        assert!(frame_differences(&still).unwrap().data().iter().all(|&v| v == 0.0));
        let v = [0.5, -1.0];
        let ramp = Tensor::from_fn(&[4, 1, 1, 2], |i| (i / 2) as f64 * v[i % 2]);
        let d = frame_differences(&ramp).unwrap();
        assert!(d.data().chunks(2).all(|r| r == v));
        assert!(matches!(frame_differences(&Tensor::<f64>::zeros(&[1, 2, 2, 1])), Err(Error::Contract(_))));
    }

    #[test]
    fn spatial_means() {
        let c = Tensor::from_fn(&[2, 2, 2, 2], |i| if i % 2 == 0 { 3.0 } else { -1.0 });
        assert_eq!(dynamics_features(&c).unwrap().data(), &[3.0, -1.0, 3.0, -1.0]);
        // +1 on the left column, −1 on the right
        let lr = Tensor::from_fn(&[1, 2, 2, 1], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        assert_eq!(dynamics_features(&lr).unwrap().data(), &[0.0]);
        let ones = Tensor::<f64>::ones(&[1, 3, 3, 4]);
        assert!(appearance_features(&ones).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bank_is_fifo() {
        let mut bank = MemoryBank::new(64);
        bank.push((1..=65).map(|i| feat(i, Role::Dynamics, "r", "v")));
        assert_eq!(bank.len(), 64);
        let frames: Vec<usize> = bank.iter().map(|f| f.frame).collect();
        assert_eq!(frames, (2..=65).collect::<Vec<_>>());
        let before = bank.clone();
        bank.push(Vec::new());
        assert_eq!(bank, before);
    }

    #[test]
    fn sampling_rules() {
        let mut rng = Rng::seed_from_u64(0);
        let mut bank = MemoryBank::new(64);
        bank.push((0..12).map(|i| feat(i, Role::Appearance, "r", "v0")));
        assert!(sample_contrast(&bank, &[], "r", "v1", 4, 10, 3, &mut rng).is_none());

        bank.push((100..104).map(|i| feat(i, Role::Dynamics, "r", "v2")));
        bank.push((200..210).map(|i| feat(i, Role::Dynamics, "r", "v1"))); // same video: excluded
        bank.push((300..310).map(|i| feat(i, Role::Dynamics, "other", "v3"))); // other relation
        let c = sample_contrast(&bank, &[], "r", "v1", 4, 10, 3, &mut rng).unwrap();
        assert_eq!(c.positives.shape(), &[3, 4, 2]);
        for row in c.positives.data().chunks(8) {
            let mut ids: Vec<f64> = row.chunks(2).map(|v| v[0]).collect();
            ids.sort_by(f64::total_cmp);
            assert_eq!(ids, vec![100.0, 101.0, 102.0, 103.0]);
        }
        assert!(c.negatives.data().chunks(2).all(|v| v[0] < 12.0));

        let mut r1 = Rng::seed_from_u64(5);
        let mut r2 = Rng::seed_from_u64(5);
        assert_eq!(
            sample_contrast(&bank, &[], "r", "v1", 4, 10, 3, &mut r1),
            sample_contrast(&bank, &[], "r", "v1", 4, 10, 3, &mut r2)
        );
    }

    #[test]
    fn temperature_must_be_positive() {
        let a = Tensor::<f64>::ones(&[1, 2]);
        let p = Tensor::<f64>::ones(&[1, 1, 2]);
        assert!(matches!(rcl_loss(&a, &p, &p, 0.0), Err(Error::Config(_))));
        assert!(matches!(rcl_loss(&a, &p, &p, -1.0), Err(Error::Config(_))));
    }
}
