//! Linear-β DDPM noise schedule and forward noising.

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Cumulative products ᾱ_t, strictly decreasing.
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("bad schedule: {steps} steps, β {beta_start}..{beta_end}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Range(format!("timestep {t} outside [0, {})", self.len())))
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
    pub fn add_noise<S: Scalar>(&self, z0: &LatentVideo<S>, t: usize, eps: &LatentVideo<S>) -> Result<LatentVideo<S>> {
        mix(z0, eps, self.alpha_bar(t)?)
    }
}

/// Noising at an explicit ᾱ, including the endpoints 1 and 0.
pub fn mix<S: Scalar>(z0: &LatentVideo<S>, eps: &LatentVideo<S>, alpha_bar: f64) -> Result<LatentVideo<S>> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Range(format!("ᾱ = {alpha_bar} outside [0, 1]")));
    }
    let (a, b) = (S::c(alpha_bar.sqrt()), S::c((1.0 - alpha_bar).sqrt()));
    let data: Tensor<S> = z0.data.zip_map(&eps.data, |x, e| a * x + b * e)?;
    LatentVideo::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(v: f64) -> LatentVideo<f64> {
        LatentVideo::new(Tensor::full(&[2, 2, 2, 3], v)).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.betas.iter().all(|&b| 0.0 < b && b < 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!((s.betas[99] - 0.02).abs() < 1e-15);
        assert!(matches!(s.alpha_bar(100), Err(Error::Range(_))));
    }

    #[test]
    fn endpoints_and_closed_form() {
        let z0 = lat(1.0);
        let eps = lat(-3.0);
        assert_eq!(mix(&z0, &eps, 1.0).unwrap(), z0);
        assert_eq!(mix(&z0, &eps, 0.0).unwrap(), eps);
        let z = mix(&z0, &lat(0.0), 0.25).unwrap();
        assert!(z.data.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn out_of_range_timestep() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(matches!(s.add_noise(&lat(1.0), 10, &lat(0.0)), Err(Error::Range(_))));
    }
}
