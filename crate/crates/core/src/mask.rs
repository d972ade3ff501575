//! Subject/relation masks and the mask-amplified reconstruction loss.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::lora::MaskKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel masks (`F×H×W`) and their latent-grid counterparts (`f×h×w`).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<S> {
    pub m_s1: Tensor<S>,
    pub m_s2: Tensor<S>,
    pub m_r: Tensor<S>,
    pub latent_s1: Tensor<S>,
    pub latent_s2: Tensor<S>,
    pub latent_r: Tensor<S>,
}

impl<S: Scalar> MaskSet<S> {
    /// Derives the relation mask and all latent masks from the two subject masks.
    pub fn new(m_s1: Tensor<S>, m_s2: Tensor<S>, temporal_factor: usize, patch: usize) -> Result<Self> {
        let m_r = relation_mask(&m_s1, &m_s2)?;
        Ok(Self {
            latent_s1: to_latent(&m_s1, temporal_factor, patch)?,
            latent_s2: to_latent(&m_s2, temporal_factor, patch)?,
            latent_r: to_latent(&m_r, temporal_factor, patch)?,
            m_s1,
            m_s2,
            m_r,
        })
    }

    pub fn latent(&self, kind: MaskKind) -> &Tensor<S> {
        match kind {
            MaskKind::R => &self.latent_r,
            MaskKind::S1 => &self.latent_s1,
            MaskKind::S2 => &self.latent_s2,
        }
    }
}

fn check_range<S: Scalar>(m: &Tensor<S>, what: &str) -> Result<()> {
    if let Some(bad) = m.data().iter().find(|&&x| !(x >= S::zero() && x <= S::one())) {
        return Err(Error::Validation(format!("{what} has value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Union of two subject masks as the elementwise maximum.
pub fn relation_mask<S: Scalar>(m_s1: &Tensor<S>, m_s2: &Tensor<S>) -> Result<Tensor<S>> {
    check_range(m_s1, "subject-1 mask")?;
    check_range(m_s2, "subject-2 mask")?;
    m_s1.zip_map(m_s2, |a, b| a.max(b))
}

/// Block mean over every `T_c × p × p` cell of an `F×H×W` mask.
pub fn to_latent<S: Scalar>(mask: &Tensor<S>, temporal_factor: usize, patch: usize) -> Result<Tensor<S>> {
    let s = mask.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("mask must be F×H×W, got {s:?}")));
    }
    let (tc, p) = (temporal_factor, patch);
    if tc == 0 || p == 0 || !s[0].is_multiple_of(tc) || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
        return Err(Error::Config(format!("mask {s:?} not divisible by temporal factor {tc} and patch {p}")));
    }
    let (f, h, w) = (s[0] / tc, s[1] / p, s[2] / p);
    let count = S::c((tc * p * p) as f64);
    let mut out = Tensor::zeros(&[f, h, w]);
    for fi in 0..f {
        for hi in 0..h {
            for wi in 0..w {
                let mut acc = S::zero();
                for dt in 0..tc {
                    for dy in 0..p {
                        for dx in 0..p {
                            acc = acc + mask.get(&[fi * tc + dt, hi * p + dy, wi * p + dx]);
                        }
                    }
                }
                out.set(&[fi, hi, wi], acc / count);
            }
        }
    }
    Ok(out)
}

/// `(λ_m·M + 1)` broadcast over the latent channel axis.
pub fn loss_weights<S: Scalar>(latent_mask: &Tensor<S>, channels: usize, lambda_mask: f64) -> Result<Tensor<S>> {
    if lambda_mask < 0.0 {
        return Err(Error::Config(format!("mask weight must be non-negative, got {lambda_mask}")));
    }
    let mut shape = latent_mask.shape().to_vec();
    shape.push(channels);
    let lam = S::c(lambda_mask);
    let m = latent_mask.data();
    Ok(Tensor::from_fn(&shape, |i| lam * m[i / channels] + S::one()))
}

fn check_mask_fits<S: Scalar>(latent_mask: &Tensor<S>, eps: &LatentVideo<S>) -> Result<()> {
    if latent_mask.shape() != &eps.data.shape()[..3] {
        return Err(Error::Dimension(format!(
            "latent mask {:?} does not match latent {:?}",
            latent_mask.shape(),
            eps.data.shape()
        )));
    }
    Ok(())
}

/// Mean over all elements of `(λ_m·M + 1)·(ε − ε̂)²`.
pub fn masked_loss<S: Scalar>(
    eps: &LatentVideo<S>,
    eps_hat: &LatentVideo<S>,
    latent_mask: &Tensor<S>,
    lambda_mask: f64,
) -> Result<S> {
    check_mask_fits(latent_mask, eps)?;
    let weights = loss_weights(latent_mask, eps.dims()[3], lambda_mask)?;
    let sq = eps.data.zip_map(&eps_hat.data, |a, b| (a - b) * (a - b))?;
    Ok(sq.zip_map(&weights, |e, w| e * w)?.mean())
}

/// Graph form of [`masked_loss`]; only `eps_hat` carries gradient.
pub fn masked_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    eps: &LatentVideo<S>,
    eps_hat: Var,
    latent_mask: &Tensor<S>,
    lambda_mask: f64,
) -> Result<Var> {
    check_mask_fits(latent_mask, eps)?;
    let weights = g.constant(loss_weights(latent_mask, eps.dims()[3], lambda_mask)?);
    let target = g.constant(eps.data.clone());
    let diff = g.sub(eps_hat, target)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, weights)?;
    Ok(g.mean(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::diffusion_loss;
    use crate::Rng;
    use rand::SeedableRng;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn union_cases() {
        assert_eq!(relation_mask(&t(&[1, 1, 2], &[1.0, 0.0]), &t(&[1, 1, 2], &[0.0, 1.0])).unwrap().data(), &[1.0, 1.0]);
        let m = t(&[1, 1, 3], &[0.2, 0.0, 1.0]);
        assert_eq!(relation_mask(&m, &Tensor::zeros(&[1, 1, 3])).unwrap(), m);
        assert_eq!(relation_mask(&t(&[1, 1, 1], &[0.5]), &t(&[1, 1, 1], &[0.8])).unwrap().data(), &[0.8]);
        assert!(matches!(relation_mask(&t(&[1, 1, 1], &[1.5]), &t(&[1, 1, 1], &[0.0])), Err(Error::Validation(_))));
    }

    #[test]
    fn latent_cases() {
        let frames = t(&[2, 1, 1], &[1.0, 0.0]);
        assert_eq!(to_latent(&frames, 2, 1).unwrap().data(), &[0.5]);
        let ones = Tensor::<f64>::ones(&[4, 8, 8]);
        assert!(to_latent(&ones, 2, 4).unwrap().data().iter().all(|&x| x == 1.0));
        let checker = Tensor::<f64>::from_fn(&[1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
        assert!(to_latent(&checker, 1, 2).unwrap().data().iter().all(|&x| x == 0.5));
        assert!(matches!(to_latent(&ones, 3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn degenerates_to_plain_loss() {
        let mut rng = Rng::seed_from_u64(0);
        let shape = [2, 2, 2, 3];
        let a = LatentVideo::new(Tensor::gaussian(&shape, 0.0, 1.0, &mut rng)).unwrap();
        let b = LatentVideo::new(Tensor::gaussian(&shape, 0.0, 1.0, &mut rng)).unwrap();
        let m = Tensor::uniform(&[2, 2, 2], 0.0, 1.0, &mut rng);
        assert_eq!(masked_loss(&a, &b, &m, 0.0).unwrap(), diffusion_loss(&a, &b).unwrap());
        let ones = Tensor::ones(&[2, 2, 2]);
        let l: f64 = masked_loss(&a, &b, &ones, 50.0).unwrap();
        assert!((l - 51.0_f64 * diffusion_loss(&a, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn inside_error_weighs_more() {
        // mask covers cell 0 of two; same squared error placed inside or outside
        let m = t(&[1, 1, 2], &[1.0, 0.0]);
        let zero = LatentVideo::new(Tensor::<f64>::zeros(&[1, 1, 2, 1])).unwrap();
        let inside = LatentVideo::new(t(&[1, 1, 2, 1], &[1.0, 0.0])).unwrap();
        let outside = LatentVideo::new(t(&[1, 1, 2, 1], &[0.0, 1.0])).unwrap();
        assert_eq!(diffusion_loss(&zero, &inside).unwrap(), diffusion_loss(&zero, &outside).unwrap());
        let li = masked_loss(&zero, &inside, &m, 50.0).unwrap();
        let lo = masked_loss(&zero, &outside, &m, 50.0).unwrap();
        assert!((li / lo - 51.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = LatentVideo::new(Tensor::<f64>::zeros(&[1, 2, 2, 3])).unwrap();
        assert!(matches!(masked_loss(&a, &a, &Tensor::zeros(&[1, 2, 3]), 1.0), Err(Error::Dimension(_))));
    }
}
