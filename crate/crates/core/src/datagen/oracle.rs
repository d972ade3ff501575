//! Rule-based relation classifier over subject centroid tracks, and the
//! temporal-consistency metric.

use std::f64::consts::PI;

use log::warn;

use super::Relation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixels brighter than this (channel mean) count as foreground.
pub const THRESHOLD: f64 = 0.3;
/// Components smaller than this many pixels are ignored as speckle.
pub const MIN_AREA: usize = 3;
/// Fraction of frames in which both subjects must be tracked.
pub const MIN_TRACKED: f64 = 0.8;
pub const TAU_THRESHOLD: f64 = 0.6;
pub const ORBIT_CV: f64 = 0.1;
pub const FOLLOW_CV: f64 = 0.15;
/// Minimum net change, in pixels, for a trend to count.
pub const MIN_TRAVEL: f64 = 1.0;
/// Minimum shared displacement, in pixels, for follow.
pub const FOLLOW_TRAVEL: f64 = 2.0;

/// Centroid tracks of two subjects over the frames where both are visible,
/// plus the frame at which they merged into one component, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracks {
    pub first: Vec<[f64; 2]>,
    pub second: Vec<[f64; 2]>,
    pub merged_at: Option<usize>,
}

enum Frame {
    Two([f64; 2], [f64; 2]),
    One,
    Lost,
}

/// 4-connected foreground components, largest first, as (area, centroid).
fn components(mask: &[bool], h: usize, w: usize) -> Vec<(usize, [f64; 2])> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            n += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if n >= MIN_AREA {
            out.push((n, [sx / n as f64, sy / n as f64]));
        }
    }
    out.sort_by(|a, b| b.0.cmp(&a.0));
    out
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Tracks {
    /// Thresholds each frame, finds components and links them across frames
    /// by nearest centroid. `None` when fewer than 80% of frames are tracked.
    pub fn extract<S: Scalar>(video: &Tensor<S>) -> Option<Self> {
        let s = video.shape();
        if s.len() != 4 || s[0] == 0 {
            return None;
        }
        let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
        let frames: Vec<Frame> = (0..f)
            .map(|k| {
                let fg: Vec<bool> = (0..h * w)
                    .map(|i| {
                        let px = &video.data()[(k * h * w + i) * c..(k * h * w + i + 1) * c];
                        px.iter().map(|v| v.f64()).sum::<f64>() / c as f64 > THRESHOLD
                    })
                    .collect();
                match components(&fg, h, w).as_slice() {
                    [] => Frame::Lost,
                    [_] => Frame::One,
                    [a, b, ..] => Frame::Two(a.1, b.1),
                }
            })
            .collect();
        // a single component counts as tracked only in a merged tail that
        // follows a two-component frame
        let merged_at = (1..f).find(|&m| matches!(frames[m - 1], Frame::Two(..)) && frames[m..].iter().all(|x| matches!(x, Frame::One)));
        let two = frames.iter().filter(|x| matches!(x, Frame::Two(..))).count();
        let tracked = two + merged_at.map_or(0, |m| f - m);
        if (tracked as f64) < MIN_TRACKED * f as f64 {
            return None;
        }
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for fr in &frames {
            if let Frame::Two(a, b) = *fr {
                let (a, b) = match (first.last(), second.last()) {
                    (Some(&p), Some(&q)) if dist(a, p) + dist(b, q) > dist(b, p) + dist(a, q) => (b, a),
                    (None, None) if b[0] < a[0] => (b, a),
                    _ => (a, b),
                };
                first.push(a);
                second.push(b);
            }
        }
        Some(Self { first, second, merged_at })
    }
}

/// Kendall rank correlation of a series against time, ties counting zero.
pub fn kendall_tau(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (series[j] - series[i]).partial_cmp(&0.0).map_or(0.0, |o| o as i8 as f64);
        }
    }
    s / (n * (n - 1) / 2) as f64
}

fn cv(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Classifies two centroid tracks. Returns `None` for "unknown".
pub fn classify_tracks(tracks: &Tracks) -> Option<Relation> {
    let n = tracks.first.len().min(tracks.second.len());
    if n < 3 {
        return None;
    }
    let (a, b) = (&tracks.first[..n], &tracks.second[..n]);
    let d: Vec<f64> = (0..n).map(|k| dist(a[k], b[k])).collect();
    let tau = kendall_tau(&d);
    let change = d[n - 1] - d[0];
    if tracks.merged_at.is_some() {
        return (tau <= -TAU_THRESHOLD).then_some(Relation::Collide);
    }
    let offsets: Vec<[f64; 2]> = (0..n).map(|k| [b[k][0] - a[k][0], b[k][1] - a[k][1]]).collect();
    let sweep: f64 = offsets
        .windows(2)
        .map(|w| {
            let delta = w[1][1].atan2(w[1][0]) - w[0][1].atan2(w[0][0]);
            (delta + PI).rem_euclid(2.0 * PI) - PI
        })
        .sum();
    if cv(&d) < ORBIT_CV && sweep.abs() > PI / 2.0 {
        return Some(Relation::Orbit);
    }
    let mean_off = offsets.iter().fold([0.0, 0.0], |s, o| [s[0] + o[0] / n as f64, s[1] + o[1] / n as f64]);
    let spread = (offsets.iter().map(|o| dist(*o, mean_off).powi(2)).sum::<f64>() / n as f64).sqrt();
    let offset_cv = spread / offsets.iter().map(|o| o[0].hypot(o[1])).sum::<f64>() * n as f64;
    let mid = |k: usize| [(a[k][0] + b[k][0]) / 2.0, (a[k][1] + b[k][1]) / 2.0];
    if offset_cv < FOLLOW_CV && dist(mid(0), mid(n - 1)) >= FOLLOW_TRAVEL {
        return Some(Relation::Follow);
    }
    if tau <= -TAU_THRESHOLD && -change >= MIN_TRAVEL {
        return Some(Relation::Approach);
    }
    if tau >= TAU_THRESHOLD && change >= MIN_TRAVEL {
        return Some(Relation::Separate);
    }
    None
}

/// Relation read off an `F×H×W×C` video, or `None` when subjects cannot be
/// tracked or no rule fires.
pub fn relation_oracle<S: Scalar>(video: &Tensor<S>) -> Option<Relation> {
    Tracks::extract(video).and_then(|t| classify_tracks(&t))
}

/// Mean cosine similarity of consecutive flattened frames. Pairs with a
/// zero-norm frame are skipped.
pub fn temporal_consistency<S: Scalar>(video: &Tensor<S>) -> Result<f64> {
    let s = video.shape();
    if s.is_empty() || s[0] < 2 {
        return Err(Error::Contract(format!("temporal consistency needs at least 2 frames, got shape {s:?}")));
    }
    let per = video.numel() / s[0];
    let frames: Vec<&[S]> = video.data().chunks_exact(per).collect();
    let (mut total, mut used) = (0.0, 0usize);
    for (k, w) in frames.windows(2).enumerate() {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in w[0].iter().zip(w[1]) {
            let (x, y) = (x.f64(), y.f64());
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            warn!("frames {k} and {} include a zero-norm frame; pair skipped", k + 1);
            continue;
        }
        total += (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Validation("every consecutive frame pair has a zero-norm frame".into()));
    }
    Ok(total / used as f64)
}

#[cfg(test)]
mod tests {
    use super::super::{gen_video, RelationSpec, VideoShape};
    use super::*;

    fn tracks(d: &[f64]) -> Tracks {
        Tracks { first: d.iter().map(|_| [0.0, 0.0]).collect(), second: d.iter().map(|&x| [x, 0.0]).collect(), merged_at: None }
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[10.0, 8.0, 6.0, 4.0]), -1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(kendall_tau(&[5.0, 5.0, 5.0]), 0.0);
        // one swap among 4: (5 - 1) / 6
        assert!((kendall_tau(&[1.0, 3.0, 2.0, 4.0]) - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn hand_built_series() {
        assert_eq!(classify_tracks(&tracks(&[10.0, 8.0, 6.0, 4.0])), Some(Relation::Approach));
        assert_eq!(classify_tracks(&tracks(&[4.0, 6.0, 8.0, 10.0])), Some(Relation::Separate));
        assert_eq!(classify_tracks(&tracks(&[7.0, 7.0, 7.0, 7.0])), None);
    }

    #[test]
    fn static_video_is_unknown() {
        let mut e = gen_video::<f64>(&RelationSpec::sample(Relation::Approach, 4).unwrap(), &VideoShape::default()).unwrap();
        let frame = e.video.data()[..32 * 32].to_vec();
        for k in 1..8 {
            e.video.data_mut()[k * 32 * 32..(k + 1) * 32 * 32].copy_from_slice(&frame);
        }
        assert!(Tracks::extract(&e.video).is_some());
        assert_eq!(relation_oracle(&e.video), None);
    }

    #[test]
    fn blank_video_is_unknown() {
        assert_eq!(relation_oracle(&Tensor::<f64>::zeros(&[8, 32, 32, 1])), None);
    }

    #[test]
    fn generator_round_trip() {
        for rel in Relation::ALL {
            for seed in 0..50 {
                let e = gen_video::<f64>(&RelationSpec::sample(rel, seed).unwrap(), &VideoShape::default()).unwrap();
                assert_eq!(relation_oracle(&e.video), Some(rel), "{rel} seed {seed}");
            }
        }
    }

    #[test]
    fn consistency_cases() {
        let same = Tensor::<f64>::from_fn(&[4, 2, 2, 1], |i| (i % 4) as f64 + 1.0);
        assert_eq!(temporal_consistency(&same).unwrap(), 1.0);
        let alt = Tensor::<f64>::from_fn(&[4, 2, 2, 1], |i| if (i / 4) % 2 == 0 { (i % 4) as f64 + 1.0 } else { -((i % 4) as f64 + 1.0) });
        assert!((temporal_consistency(&alt).unwrap() + 1.0).abs() < 1e-15);
        let mut gap = same.clone();
        gap.data_mut()[4..8].fill(0.0);
        assert_eq!(temporal_consistency(&gap).unwrap(), 1.0);
        assert!(matches!(temporal_consistency(&Tensor::<f64>::zeros(&[1, 2, 2, 1])), Err(Error::Contract(_))));
    }
}
