//! Weight-space and activation-space probes: dense SVD, subspace similarity
//! between attention projections, averaged Q/K/V feature maps and per-token
//! attention maps.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::denoiser::AttentionRecord;
use crate::error::{Error, Result};
use crate::lora::{Branch, LoraSet, Matrix};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SIMILARITY_HEADER: &str = "layer,branch,pair,rank,similarity";
pub const MAP_HEADER: &str = "frame,row,col,value";

/// Projections compared by [`qkv_similarity_report`], in grid order.
pub const QKV: [Matrix; 3] = [Matrix::Q, Matrix::K, Matrix::V];

const JACOBI_SWEEPS: usize = 100;

/// Relative cutoff below which a singular value counts as zero. Squaring in
/// the Gram matrix leaves exact zeros near `√ε · s_max`, so this sits above it.
pub const RANK_TOL: f64 = 1e-7;

/// Thin SVD `W = U·diag(s)·Vᵀ` with `k = min(m, n)` columns in `U` and `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd<S> {
    /// `m×k`, orthonormal columns.
    pub u: Tensor<S>,
    /// Descending, nonnegative.
    pub s: Vec<S>,
    /// `n×k`, orthonormal columns.
    pub v: Tensor<S>,
}

impl<S: Scalar> Svd<S> {
    pub fn reconstruct(&self) -> Result<Tensor<S>> {
        let (m, k) = (self.u.shape()[0], self.s.len());
        let us = Tensor::from_fn(&[m, k], |i| self.u.data()[i] * self.s[i % k]);
        us.matmul(&self.v.transpose2()?)
    }

    /// Singular values above `tol · s_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let top = self.s.first().map_or(0.0, |x| x.f64());
        self.s.iter().filter(|x| x.f64() > tol * top && x.f64() > 0.0).count()
    }
}

/// Eigen-decomposition of a symmetric `n×n` matrix (row-major) by cyclic
/// Jacobi rotations. Returns eigenvalues and eigenvectors as columns.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale || scale == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Orthonormalizes `col` against `basis` (columns of length `m`); `None` when
/// nothing is left.
fn orthogonalize(mut col: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
            col.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
    let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-8).then(|| col.into_iter().map(|x| x / norm).collect())
}

/// Thin SVD through the eigen-decomposition of the smaller Gram matrix.
/// Each left vector's largest-magnitude component is made positive.
pub fn svd<S: Scalar>(w: &Tensor<S>) -> Result<Svd<S>> {
    let &[m, n] = w.shape() else {
        return Err(Error::Dimension(format!("svd needs a matrix, got shape {:?}", w.shape())));
    };
    if !w.is_finite() {
        return Err(Error::Validation("svd input has non-finite entries".into()));
    }
    if m < n {
        let t = svd(&w.transpose2()?)?;
        let mut out = Svd { u: t.v, s: t.s, v: t.u };
        fix_signs(&mut out);
        return Ok(out);
    }
    let x: Vec<f64> = w.data().iter().map(|v| v.f64()).collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g: f64 = (0..m).map(|r| x[r * n + i] * x[r * n + j]).sum();
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let (vals, vecs) = jacobi_eigen(gram, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));

    let mut s: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0).sqrt()).collect();
    let vcols: Vec<Vec<f64>> = order.iter().map(|&c| (0..n).map(|r| vecs[r * n + c]).collect()).collect();
    let tol = s.first().copied().unwrap_or(0.0) * RANK_TOL;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (j, vc) in vcols.iter().enumerate() {
        if s[j] > tol && s[j] > 0.0 {
            let col: Vec<f64> = (0..m).map(|r| (0..n).map(|c| x[r * n + c] * vc[c]).sum::<f64>() / s[j]).collect();
            ucols.push(col);
        } else {
            s[j] = 0.0;
            pending.push(j);
        }
    }
    // Null directions get an orthonormal completion from the standard basis.
    let mut e = 0;
    for _ in pending {
        loop {
            let mut cand = vec![0.0; m];
            cand[e % m] = 1.0;
            e += 1;
            if let Some(c) = orthogonalize(cand, &ucols) {
                ucols.push(c);
                break;
            }
        }
    }
    let mut out = Svd {
        u: Tensor::from_fn(&[m, n], |i| S::c(ucols[i % n][i / n])),
        s: s.into_iter().map(S::c).collect(),
        v: Tensor::from_fn(&[n, n], |i| S::c(vcols[i % n][i / n])),
    };
    fix_signs(&mut out);
    Ok(out)
}

fn fix_signs<S: Scalar>(svd: &mut Svd<S>) {
    let (m, k) = (svd.u.shape()[0], svd.s.len());
    let n = svd.v.shape()[0];
    for j in 0..k {
        let mut best = (0.0, S::zero());
        for i in 0..m {
            let x = svd.u.data()[i * k + j];
            if x.f64().abs() > best.0 {
                best = (x.f64().abs(), x);
            }
        }
        if best.1 < S::zero() {
            for i in 0..m {
                svd.u.data_mut()[i * k + j] = -svd.u.data()[i * k + j];
            }
            for i in 0..n {
                svd.v.data_mut()[i * k + j] = -svd.v.data()[i * k + j];
            }
        }
    }
}

/// `(1/r)·‖U₁[:, :r]ᵀ·U₂[:, :r]‖_F²` over the top-`r` left singular vectors.
pub fn subspace_similarity<S: Scalar>(w1: &Tensor<S>, w2: &Tensor<S>, r: usize) -> Result<f64> {
    if w1.ndim() != 2 || w2.ndim() != 2 || w1.shape()[0] != w2.shape()[0] {
        return Err(Error::Dimension(format!("subspace similarity needs matrices with equal rows, got {:?} and {:?}", w1.shape(), w2.shape())));
    }
    let (a, b) = (svd(w1)?, svd(w2)?);
    let limit = a.rank(RANK_TOL).min(b.rank(RANK_TOL));
    if r == 0 || r > limit {
        return Err(Error::Config(format!("rank {r} must lie in 1..={limit} for these matrices")));
    }
    Ok(top_overlap(&a.u, &b.u, r))
}

fn top_overlap<S: Scalar>(u1: &Tensor<S>, u2: &Tensor<S>, r: usize) -> f64 {
    let m = u1.shape()[0];
    let (k1, k2) = (u1.shape()[1], u2.shape()[1]);
    let mut total = 0.0;
    for i in 0..r {
        for j in 0..r {
            let d: f64 = (0..m).map(|row| u1.data()[row * k1 + i].f64() * u2.data()[row * k2 + j].f64()).sum();
            total += d * d;
        }
    }
    total / r as f64
}

/// Pairwise Q/K/V similarities of one layer and branch, indexed like [`QKV`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGrid {
    pub layer: usize,
    pub branch: Branch,
    pub rank: usize,
    pub values: [[f64; 3]; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub grids: Vec<SimilarityGrid>,
    /// Element-wise mean over every grid.
    pub mean: [[f64; 3]; 3],
}

impl SimilarityReport {
    /// One row per unordered pair and grid, then the means under layer `all`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SIMILARITY_HEADER}\n");
        let rank = self.grids.first().map_or(0, |g| g.rank);
        let pairs = [(0, 1), (0, 2), (1, 2)];
        for g in &self.grids {
            for (i, j) in pairs {
                let _ = writeln!(out, "{},{},{},{},{}", g.layer, g.branch.name(), pair_label(i, j), g.rank, g.values[i][j]);
            }
        }
        for (i, j) in pairs {
            let _ = writeln!(out, "all,all,{},{rank},{}", pair_label(i, j), self.mean[i][j]);
        }
        out
    }
}

fn pair_label(i: usize, j: usize) -> String {
    format!("{}{}", QKV[i].letter().unwrap_or('?'), QKV[j].letter().unwrap_or('?'))
}

/// Base weight plus every inference-time adapter bound to it.
pub fn effective_weight<S: Scalar>(ckpt: &Checkpoint<S>, layer: usize, branch: Branch, m: Matrix) -> Result<Tensor<S>> {
    let block = ckpt.base.blocks.get(layer).ok_or_else(|| Error::Range(format!("layer {layer} outside 0..{}", ckpt.base.blocks.len())))?;
    let mut w = block.branch(branch).get(m).clone();
    let view = ckpt.triplet.inference_view();
    for set in LoraSet::ALL {
        for (b, a) in view.set(set) {
            if b.layer == layer && b.branch == branch && b.matrix == m && !a.is_noop() {
                let delta = a.up.matmul(&a.down)?.map(|x| x * a.scale);
                w = w.zip_map(&delta, |p, q| p + q)?;
            }
        }
    }
    Ok(w)
}

/// Q/K/V subspace similarities for every layer and branch of `ckpt`, taken
/// on the weights used at inference.
pub fn qkv_similarity_report<S: Scalar>(ckpt: &Checkpoint<S>, r: usize) -> Result<SimilarityReport> {
    let mut grids = Vec::new();
    for layer in 0..ckpt.model.layers {
        for branch in Branch::ALL {
            let mut us = Vec::with_capacity(3);
            let mut limit = usize::MAX;
            for m in QKV {
                let s = svd(&effective_weight(ckpt, layer, branch, m)?)?;
                limit = limit.min(s.rank(RANK_TOL));
                us.push(s.u);
            }
            if r == 0 || r > limit {
                return Err(Error::Config(format!("rank {r} must lie in 1..={limit} (layer {layer}, {} branch)", branch.name())));
            }
            let mut values = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    values[i][j] = top_overlap(&us[i], &us[j], r);
                }
            }
            grids.push(SimilarityGrid { layer, branch, rank: r, values });
        }
    }
    let mut mean = [[0.0; 3]; 3];
    for g in &grids {
        for i in 0..3 {
            for j in 0..3 {
                mean[i][j] += g.values[i][j] / grids.len() as f64;
            }
        }
    }
    Ok(SimilarityReport { grids, mean })
}

/// The analysis timestep, proportional to step 60 of a 64-step schedule.
pub fn analysis_timestep(timesteps: usize) -> usize {
    ((60.0 / 64.0 * timesteps as f64).round() as usize).min(timesteps.saturating_sub(1))
}

/// Mean absolute Q, K or V activation over layers, heads, channels and
/// frames, as an `h×w` map.
pub fn feature_map<S: Scalar>(record: &AttentionRecord<S>, which: Matrix) -> Result<Tensor<S>> {
    if !QKV.contains(&which) {
        return Err(Error::Contract(format!("feature maps exist for q, k and v, not {}", which.name())));
    }
    let heads: Vec<_> = record.layers.iter().flatten().collect();
    if heads.is_empty() {
        return Err(Error::Contract("attention record holds no layers".into()));
    }
    let [f, h, w] = record.grid;
    let mut acc = vec![0.0; h * w];
    let mut count = 0usize;
    for head in &heads {
        let x = match which {
            Matrix::Q => &head.q,
            Matrix::K => &head.k,
            _ => &head.v,
        };
        let &[n, c] = x.shape() else {
            return Err(Error::Dimension(format!("activation shape {:?} is not tokens×channels", x.shape())));
        };
        if n != f * h * w {
            return Err(Error::Dimension(format!("{n} activation rows for a {f}×{h}×{w} grid")));
        }
        for (tok, row) in x.data().chunks(c).enumerate() {
            acc[tok % (h * w)] += row.iter().map(|v| v.f64().abs()).sum::<f64>();
        }
        count += f * c;
    }
    Ok(Tensor::from_fn(&[h, w], |i| S::c(acc[i] / count as f64)))
}

/// Attention between the text token `token` and every vision token, averaged
/// over both directions, layers and heads, as an `f×h×w` map.
pub fn attention_map<S: Scalar>(record: &AttentionRecord<S>, token: usize) -> Result<Tensor<S>> {
    let pos = record
        .text_tokens
        .iter()
        .position(|&t| t == token)
        .ok_or_else(|| Error::Lookup(format!("token {token} does not occur in the recorded prompt")))?;
    let heads: Vec<_> = record.layers.iter().flatten().collect();
    if heads.is_empty() {
        return Err(Error::Contract("attention record holds no layers".into()));
    }
    let (nt, nv) = (record.text_len(), record.vision_len());
    let n = nt + nv;
    let mut acc = vec![0.0; nv];
    for head in &heads {
        if head.attention.shape() != [n, n] {
            return Err(Error::Dimension(format!("attention {:?}, expected {n}×{n}", head.attention.shape())));
        }
        let a = head.attention.data();
        for (j, slot) in acc.iter_mut().enumerate() {
            let vis = nt + j;
            *slot += 0.5 * (a[vis * n + pos].f64() + a[pos * n + vis].f64());
        }
    }
    let [f, h, w] = record.grid;
    Ok(Tensor::from_fn(&[f, h, w], |i| S::c(acc[i] / heads.len() as f64)))
}

/// `frame,row,col,value` rows of an `f×h×w` map.
pub fn map_csv<S: Scalar>(map: &Tensor<S>) -> Result<String> {
    let &[f, h, w] = map.shape() else {
        return Err(Error::Dimension(format!("map shape {:?} is not frames×rows×cols", map.shape())));
    };
    let mut out = format!("{MAP_HEADER}\n");
    for fr in 0..f {
        for r in 0..h {
            for c in 0..w {
                let _ = writeln!(out, "{fr},{r},{c},{}", map.get(&[fr, r, c]).f64());
            }
        }
    }
    Ok(out)
}
