//! Lossless video ⇄ latent rearrangement.
//!
//! A `F×H×W×C` video becomes a `f×h×w×c` latent with `f = F/T_c`,
//! `h = H/p`, `w = W/p` and `c = T_c·p·p·C`; each latent cell stacks the
//! `T_c × p × p` block of pixels it covers.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Latent video of shape `f×h×w×c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo<S> {
    pub data: Tensor<S>,
}

impl<S: Scalar> LatentVideo<S> {
    pub fn new(data: Tensor<S>) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(Error::Dimension(format!("latent must be 4-D, got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

fn check_video<S: Scalar>(video: &Tensor<S>, cfg: &ModelConfig) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("video must be F×H×W×C, got {s:?}")));
    }
    let (tc, p) = (cfg.temporal_factor, cfg.patch);
    if tc == 0 || p == 0 || !s[0].is_multiple_of(tc) || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
        return Err(Error::Config(format!("video {s:?} not divisible by temporal factor {tc} and patch {p}")));
    }
    Ok(())
}

pub fn patchify<S: Scalar>(video: &Tensor<S>, cfg: &ModelConfig) -> Result<LatentVideo<S>> {
    check_video(video, cfg)?;
    let s = video.shape();
    let (tc, p) = (cfg.temporal_factor, cfg.patch);
    let (f, h, w, c) = (s[0] / tc, s[1] / p, s[2] / p, s[3]);
    let split = video.reshape(&[f, tc, h, p, w, p, c])?;
    let moved = split.permute(&[0, 2, 4, 1, 3, 5, 6])?;
    LatentVideo::new(moved.reshape(&[f, h, w, tc * p * p * c])?)
}

pub fn unpatchify<S: Scalar>(latent: &LatentVideo<S>, cfg: &ModelConfig) -> Result<Tensor<S>> {
    let [f, h, w, c] = latent.dims();
    let (tc, p) = (cfg.temporal_factor, cfg.patch);
    if tc == 0 || p == 0 || c % (tc * p * p) != 0 {
        return Err(Error::Config(format!("latent channel {c} not divisible by {tc}·{p}·{p}")));
    }
    let ch = c / (tc * p * p);
    let split = latent.data.reshape(&[f, h, w, tc, p, p, ch])?;
    let moved = split.permute(&[0, 3, 1, 4, 2, 5, 6])?;
    moved.reshape(&[f * tc, h * p, w * p, ch])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        ModelConfig { frames: 8, height: 32, width: 32, channels: 1, temporal_factor: 2, patch: 4, ..Default::default() }
    }

    #[test]
    fn shape_arithmetic() {
        let v = Tensor::<f64>::zeros(&[8, 32, 32, 1]);
        assert_eq!(patchify(&v, &cfg()).unwrap().dims(), [4, 8, 8, 32]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let v = Tensor::<f64>::gaussian(&[8, 32, 32, 1], 0.0, 1.0, &mut crate::Rng::seed_from_u64(4));
        let z = patchify(&v, &cfg()).unwrap();
        assert_eq!(unpatchify(&z, &cfg()).unwrap(), v);
        let v3 = Tensor::<f64>::gaussian(&[4, 8, 12, 3], 0.0, 1.0, &mut crate::Rng::seed_from_u64(5));
        let c = ModelConfig { temporal_factor: 2, patch: 2, ..cfg() };
        assert_eq!(unpatchify(&patchify(&v3, &c).unwrap(), &c).unwrap(), v3);
    }

    #[test]
    fn constant_video_gives_constant_latent() {
        let v = Tensor::<f64>::full(&[8, 32, 32, 1], 0.25);
        assert!(patchify(&v, &cfg()).unwrap().data.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn cell_holds_its_block() {
        let v = Tensor::<f64>::from_fn(&[2, 4, 4, 1], |i| i as f64);
        let c = ModelConfig { temporal_factor: 2, patch: 2, ..cfg() };
        let z = patchify(&v, &c).unwrap();
        // latent cell (0, 1, 0) covers frames 0..2, rows 2..4, cols 0..2
        let expected: Vec<f64> = [[0, 2, 0], [0, 2, 1], [0, 3, 0], [0, 3, 1], [1, 2, 0], [1, 2, 1], [1, 3, 0], [1, 3, 1]]
            .iter()
            .map(|&[f, r, col]| v.get(&[f, r, col, 0]))
            .collect();
        let got: Vec<f64> = (0..8).map(|k| z.data.get(&[0, 1, 0, k])).collect();
        // channel order is (frame, row, col)
        assert_eq!(got, expected);
    }

    #[test]
    fn indivisible_dims_are_config_errors() {
        let v = Tensor::<f64>::zeros(&[7, 32, 32, 1]);
        assert!(matches!(patchify(&v, &cfg()), Err(Error::Config(_))));
    }
}
