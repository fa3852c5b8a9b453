//! Paired training augmentation.
//!
//! Flips touch both images identically; noise and contrast touch only the
//! degraded input.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Noise standard deviation is drawn from `U[0, noise_sigma_max]`.
    pub noise_sigma_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            noise_sigma_max: 0.02,
            contrast_min: 0.8,
            contrast_max: 1.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_probability)
            && self.noise_sigma_max >= 0.0
            && self.contrast_min > 0.0
            && self.contrast_min <= self.contrast_max;
        if !ok {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// One set of random choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draws {
    pub hflip: bool,
    pub vflip: bool,
    pub sigma: f64,
    pub contrast: f64,
}

impl Draws {
    pub const IDENTITY: Draws = Draws {
        hflip: false,
        vflip: false,
        sigma: 0.0,
        contrast: 1.0,
    };

    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let hflip = rng.random_bool(cfg.flip_probability);
        let vflip = rng.random_bool(cfg.flip_probability);
        let sigma = rng.random::<f64>() * cfg.noise_sigma_max;
        let contrast = cfg.contrast_min + rng.random::<f64>() * (cfg.contrast_max - cfg.contrast_min);
        Draws {
            hflip,
            vflip,
            sigma,
            contrast,
        }
    }
}

/// Mirror the last axis (`horizontal`) or the second-to-last.
pub fn flip(img: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = img.data();
    Tensor::from_fn(s.to_vec(), |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (y, x) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
        d[plane * h * w + y * w + x]
    })
}

/// Only the flips of `draws`, for images that must stay aligned with the pair.
pub fn apply_geometric(img: &Tensor<f32>, draws: &Draws) -> Tensor<f32> {
    let mut out = img.clone();
    if draws.hflip {
        out = flip(&out, true);
    }
    if draws.vflip {
        out = flip(&out, false);
    }
    out
}

/// Apply `draws` to a `[3, h, w]` pair. Noise samples come from `rng` only when `sigma > 0`.
pub fn apply<R: Rng>(degraded: &Tensor<f32>, clean: &Tensor<f32>, draws: &Draws, rng: &mut R) -> (Tensor<f32>, Tensor<f32>) {
    let mut deg = apply_geometric(degraded, draws);
    let cln = apply_geometric(clean, draws);
    if draws.contrast != 1.0 {
        let mean = deg.data().iter().map(|&v| v as f64).sum::<f64>() / deg.numel() as f64;
        let s = draws.contrast;
        deg = deg.map(|v| ((v as f64 - mean) * s + mean) as f32);
    }
    if draws.sigma > 0.0 {
        for v in deg.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += (n * draws.sigma) as f32;
        }
    }
    if draws.contrast != 1.0 || draws.sigma > 0.0 {
        deg = deg.map(|v| v.clamp(0.0, 1.0));
    }
    (deg, cln)
}

pub fn augment<R: Rng>(
    degraded: &Tensor<f32>,
    clean: &Tensor<f32>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Tensor<f32>, Tensor<f32>) {
    let draws = Draws::sample(cfg, rng);
    apply(degraded, clean, &draws, rng)
}
