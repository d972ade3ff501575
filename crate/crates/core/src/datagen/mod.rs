//! Synthetic relational videos: two shapes moving under one of five
//! relations, rendered with exact per-subject masks.
//!
//! Positions live in normalized frame coordinates (`[0, 1]²`, x to the right,
//! y downward) and are scaled to pixels at render time.

mod io;
mod oracle;

pub use io::{read_dataset, write_dataset, Meta, FORMAT_VERSION};
pub use oracle::{classify_tracks, kendall_tau, relation_oracle, temporal_consistency, Tracks};

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::MaskSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab;
use crate::Rng;

/// Shape footprints reach at most this multiple of the nominal radius.
pub const EXTENT: f64 = 1.25;
/// Nominal shape radius in normalized units.
pub const DEFAULT_RADIUS: f64 = 0.11;
pub const SUBJECT1_INTENSITY: f64 = 1.0;
pub const SUBJECT2_INTENSITY: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Approach,
    Separate,
    Orbit,
    Follow,
    Collide,
}

impl Relation {
    pub const ALL: [Relation; 5] = [Relation::Approach, Relation::Separate, Relation::Orbit, Relation::Follow, Relation::Collide];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Approach => "approach",
            Relation::Separate => "separate",
            Relation::Orbit => "orbit",
            Relation::Follow => "follow",
            Relation::Collide => "collide",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|r| r.name()).collect();
            Error::Config(format!("unknown relation `{s}`; valid relations: {}", names.join(", ")))
        })
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|x| x.name()).collect();
            Error::Config(format!("unknown shape `{s}`; valid shapes: {}", names.join(", ")))
        })
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                let (a, b, c) = ((0.0, -1.1 * r), (-0.95 * r, 0.7 * r), (0.95 * r, 0.7 * r));
                let side = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (dy - p.1) - (q.1 - p.1) * (dx - p.0);
                let (s1, s2, s3) = (side(a, b), side(b, c), side(c, a));
                (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0)
            }
            Shape::Cross => {
                let (ax, ay) = (dx.abs(), dy.abs());
                (ax <= r && ay <= 0.35 * r) || (ay <= r && ax <= 0.35 * r)
            }
        }
    }
}

/// Subject motion. Distances are between subject centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// Centers on a line through `midpoint` at `angle`, distance linear in time.
    Line { midpoint: [f64; 2], angle: f64, d_start: f64, d_end: f64 },
    /// Linear closing from `d_start` to `d_apart`, then overlapping frames in
    /// the final quarter shrinking toward `d_end`.
    Collide { midpoint: [f64; 2], angle: f64, d_start: f64, d_apart: f64, d_end: f64 },
    /// Diametrically opposite points rotating about `center`.
    Orbit { center: [f64; 2], radius: f64, angle0: f64, sweep: f64 },
    /// Subject 2 leads along `velocity` (total displacement over the clip);
    /// subject 1 trails at `start + offset`.
    Follow { start: [f64; 2], velocity: [f64; 2], offset: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub relation: Relation,
    pub shape1: Shape,
    pub shape2: Shape,
    pub radius: f64,
    pub trajectory: Trajectory,
    pub seed: u64,
}

/// First frame of the overlapping tail of a collide clip.
pub fn merge_frame(frames: usize) -> usize {
    frames - frames / 4
}

impl RelationSpec {
    /// Draws shapes and trajectory parameters from `seed`.
    pub fn sample(relation: Relation, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(seed ^ 0x5eed_5a3e);
        let i = rng.random_range(0..Shape::ALL.len());
        let j = (i + rng.random_range(1..Shape::ALL.len())) % Shape::ALL.len();
        Self::sample_with(relation, Shape::ALL[i], Shape::ALL[j], seed)
    }

    /// Draws trajectory parameters from `seed` for fixed shapes. Draws that
    /// would leave the frame are rejected and redrawn.
    pub fn sample_with(relation: Relation, shape1: Shape, shape2: Shape, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let radius = DEFAULT_RADIUS;
        let apart = 2.0 * EXTENT * radius + 0.05;
        for _ in 0..1000 {
            let jitter = |rng: &mut Rng, a: f64| [0.5 + rng.random_range(-a..=a), 0.5 + rng.random_range(-a..=a)];
            let tilt = |rng: &mut Rng| rng.random_range(-0.35..=0.35);
            let trajectory = match relation {
                Relation::Approach | Relation::Separate => {
                    let (near, far) = (rng.random_range(apart..apart + 0.05), rng.random_range(0.58..0.68));
                    let (d_start, d_end) = if relation == Relation::Approach { (far, near) } else { (near, far) };
                    Trajectory::Line { midpoint: jitter(&mut rng, 0.04), angle: tilt(&mut rng), d_start, d_end }
                }
                Relation::Collide => Trajectory::Collide {
                    midpoint: jitter(&mut rng, 0.04),
                    angle: tilt(&mut rng),
                    d_start: rng.random_range(0.58..0.68),
                    d_apart: apart,
                    d_end: rng.random_range(0.5..0.7) * radius,
                },
                Relation::Orbit => {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    Trajectory::Orbit {
                        center: jitter(&mut rng, 0.08),
                        radius: rng.random_range(0.17..0.22),
                        angle0: rng.random_range(0.0..2.0 * PI),
                        sweep: sign * rng.random_range(0.6 * PI..0.9 * PI),
                    }
                }
                Relation::Follow => {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let dir = [theta.cos(), theta.sin()];
                    let (travel, gap) = (rng.random_range(0.2..0.28), rng.random_range(apart..apart + 0.05));
                    let mid = jitter(&mut rng, 0.03);
                    // centre the swept span of both subjects on `mid`
                    let shift = (travel - gap) / 2.0;
                    Trajectory::Follow {
                        start: [mid[0] - shift * dir[0], mid[1] - shift * dir[1]],
                        velocity: [travel * dir[0], travel * dir[1]],
                        offset: [-gap * dir[0], -gap * dir[1]],
                    }
                }
            };
            let spec = Self { relation, shape1, shape2, radius, trajectory, seed };
            if spec.validate(8).is_ok() {
                return Ok(spec);
            }
        }
        Err(Error::Spec(format!("could not draw an in-frame {relation} trajectory for seed {seed}")))
    }

    /// Subject centers per frame, in normalized coordinates.
    pub fn centers(&self, frames: usize) -> Vec<([f64; 2], [f64; 2])> {
        let last = (frames.max(2) - 1) as f64;
        let on_line = |mid: [f64; 2], angle: f64, d: f64| {
            let (c, s) = (angle.cos() * d / 2.0, angle.sin() * d / 2.0);
            ([mid[0] - c, mid[1] - s], [mid[0] + c, mid[1] + s])
        };
        (0..frames)
            .map(|k| {
                let s = k as f64 / last;
                match self.trajectory {
                    Trajectory::Line { midpoint, angle, d_start, d_end } => on_line(midpoint, angle, d_start + (d_end - d_start) * s),
                    Trajectory::Collide { midpoint, angle, d_start, d_apart, d_end } => {
                        let m = merge_frame(frames);
                        let d = if k < m {
                            d_start + (d_apart - d_start) * k as f64 / (m - 1).max(1) as f64
                        } else {
                            let tail = (frames - 1 - m).max(1) as f64;
                            d_end * (1.0 + 0.5 * (frames - 1 - k) as f64 / tail)
                        };
                        on_line(midpoint, angle, d)
                    }
                    Trajectory::Orbit { center, radius, angle0, sweep } => {
                        let a = angle0 + sweep * s;
                        let (c, sn) = (radius * a.cos(), radius * a.sin());
                        ([center[0] - c, center[1] - sn], [center[0] + c, center[1] + sn])
                    }
                    Trajectory::Follow { start, velocity, offset } => {
                        let lead = [start[0] + velocity[0] * s, start[1] + velocity[1] * s];
                        ([lead[0] + offset[0], lead[1] + offset[1]], lead)
                    }
                }
            })
            .collect()
    }

    /// Checks the construction invariants for a clip of `frames` frames.
    pub fn validate(&self, frames: usize) -> Result<()> {
        if !(self.radius > 0.0 && self.radius < 0.25) {
            return Err(Error::Spec(format!("radius {} outside (0, 0.25)", self.radius)));
        }
        let reach = EXTENT * self.radius;
        let centers = self.centers(frames);
        for (k, (a, b)) in centers.iter().enumerate() {
            for (who, p) in [("subject 1", a), ("subject 2", b)] {
                if p.iter().any(|&x| !x.is_finite() || x - reach < 0.0 || x + reach > 1.0) {
                    return Err(Error::Spec(format!("{who} leaves the frame at frame {k} (center {p:?})")));
                }
            }
        }
        if let Some((a, b)) = centers.first() {
            if (a[0] - b[0]).hypot(a[1] - b[1]) < 2.0 * reach {
                return Err(Error::Spec("subjects start on top of each other".into()));
            }
        }
        Ok(())
    }

    pub fn prompt(&self) -> String {
        format!("{} {} {}", self.shape1.name(), self.relation.name(), self.shape2.name())
    }
}

/// Pixel geometry of generated clips and their latent masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub temporal_factor: usize,
    pub patch: usize,
}

impl From<&ModelConfig> for VideoShape {
    fn from(c: &ModelConfig) -> Self {
        Self { frames: c.frames, height: c.height, width: c.width, channels: c.channels, temporal_factor: c.temporal_factor, patch: c.patch }
    }
}

impl Default for VideoShape {
    fn default() -> Self {
        Self::from(&ModelConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry<S> {
    /// `F×H×W×C`, values in `[0, 1]`.
    pub video: Tensor<S>,
    pub masks: MaskSet<S>,
    pub prompt: Vec<usize>,
    pub relation: Relation,
    pub spec: RelationSpec,
}

/// `count` clips of `relation` whose subject pairs are drawn from `shapes`.
/// Clip `i` depends only on `seed` and `i`.
pub fn generate<S: Scalar>(relation: Relation, count: usize, seed: u64, shapes: &[Shape], shape: &VideoShape) -> Result<Vec<DatasetEntry<S>>> {
    let mut pool = shapes.to_vec();
    pool.dedup();
    if pool.len() < 2 || pool.iter().enumerate().any(|(i, s)| pool[..i].contains(s)) {
        return Err(Error::Config(format!("need at least two distinct subject shapes, got {shapes:?}")));
    }
    (0..count)
        .map(|i| {
            let clip_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut rng = Rng::seed_from_u64(clip_seed ^ 0x5eed_5a3e);
            let a = rng.random_range(0..pool.len());
            let b = (a + rng.random_range(1..pool.len())) % pool.len();
            gen_video(&RelationSpec::sample_with(relation, pool[a], pool[b], clip_seed)?, shape)
        })
        .collect()
}

/// Renders a clip and its subject masks. Subject 1 is painted over subject 2.
pub fn gen_video<S: Scalar>(spec: &RelationSpec, shape: &VideoShape) -> Result<DatasetEntry<S>> {
    let VideoShape { frames, height, width, channels, temporal_factor, patch } = *shape;
    if frames < 4 {
        return Err(Error::Contract(format!("need at least 4 frames, got {frames}")));
    }
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Contract(format!("empty frame geometry {height}×{width}×{channels}")));
    }
    spec.validate(frames)?;
    let r = spec.radius * height.min(width) as f64;
    let mut video = vec![S::zero(); frames * height * width * channels];
    let mut m1 = vec![S::zero(); frames * height * width];
    let mut m2 = m1.clone();
    for (k, (c1, c2)) in spec.centers(frames).into_iter().enumerate() {
        let (c1, c2) = ([c1[0] * width as f64, c1[1] * height as f64], [c2[0] * width as f64, c2[1] * height as f64]);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let in1 = spec.shape1.contains(px - c1[0], py - c1[1], r);
                let in2 = spec.shape2.contains(px - c2[0], py - c2[1], r);
                let cell = (k * height + y) * width + x;
                let value = match (in1, in2) {
                    (true, _) => SUBJECT1_INTENSITY,
                    (false, true) => SUBJECT2_INTENSITY,
                    _ => 0.0,
                };
                if in1 {
                    m1[cell] = S::one();
                }
                if in2 {
                    m2[cell] = S::one();
                }
                video[cell * channels..(cell + 1) * channels].fill(S::c(value));
            }
        }
    }
    let mask_shape = vec![frames, height, width];
    let masks = MaskSet::new(Tensor::new(mask_shape.clone(), m1)?, Tensor::new(mask_shape, m2)?, temporal_factor, patch)?;
    Ok(DatasetEntry {
        video: Tensor::new(vec![frames, height, width, channels], video)?,
        masks,
        prompt: vocab::encode(&spec.prompt())?,
        relation: spec.relation,
        spec: spec.clone(),
    })
}
