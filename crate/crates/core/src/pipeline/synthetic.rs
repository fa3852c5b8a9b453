//! Procedural clean images and the haze degradation `x·β + A`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::pipeline::image::save_image;
use crate::tensor::Tensor;

pub const BETA_RANGE: (f64, f64) = (0.5, 0.8);
pub const AIRLIGHT_RANGE: (f64, f64) = (0.1, 0.3);

/// Smooth colour gradients, a few sinusoids and one soft disc, in `[0, 1]`.
pub fn synthetic_clean(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let base: [f64; 3] = [r(0.2, 0.6), r(0.2, 0.6), r(0.2, 0.6)];
    let grad: [(f64, f64); 3] = [(r(-0.3, 0.3), r(-0.3, 0.3)), (r(-0.3, 0.3), r(-0.3, 0.3)), (r(-0.3, 0.3), r(-0.3, 0.3))];
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..3)
        .map(|i| (r(1.0, 4.0), r(1.0, 4.0), r(0.0, 6.3), r(0.05, 0.15), i))
        .collect();
    let disc = (r(0.25, 0.75), r(0.25, 0.75), r(0.1, 0.25), [r(-0.3, 0.3), r(-0.3, 0.3), r(-0.3, 0.3)]);
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        let mut val = base[c] + grad[c].0 * (u - 0.5) + grad[c].1 * (v - 0.5);
        for &(fx, fy, ph, amp, ch) in &waves {
            if ch == c {
                val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
            }
        }
        let d = ((u - disc.0).powi(2) + (v - disc.1).powi(2)).sqrt();
        let edge = 1.0 / (1.0 + ((d - disc.2) * 40.0).exp());
        val += disc.3[c] * edge;
        val.clamp(0.0, 1.0) as f32
    })
}

/// `x·β + A`, clamped to `[0, 1]`.
pub fn haze(clean: &Tensor<f32>, beta: f64, airlight: f64) -> Tensor<f32> {
    clean.map(|v| (v as f64 * beta + airlight).clamp(0.0, 1.0) as f32)
}

/// `n` `(degraded, clean)` pairs with β and A drawn uniformly from the haze ranges.
pub fn synthetic_pairs(n: usize, h: usize, w: usize, seed: u64) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let clean = synthetic_clean(h, w, rng.random());
            let beta = rng.random_range(BETA_RANGE.0..BETA_RANGE.1);
            let a = rng.random_range(AIRLIGHT_RANGE.0..AIRLIGHT_RANGE.1);
            (haze(&clean, beta, a), clean)
        })
        .collect()
}

/// Write pairs as `degraded/NNN.ppm` and `clean/NNN.ppm` under `dir`.
pub fn write_pairs(dir: &Path, pairs: &[(Tensor<f32>, Tensor<f32>)]) -> Result<()> {
    std::fs::create_dir_all(dir.join("degraded"))?;
    std::fs::create_dir_all(dir.join("clean"))?;
    for (i, (deg, clean)) in pairs.iter().enumerate() {
        let name = format!("{i:03}.ppm");
        save_image(&dir.join("degraded").join(&name), deg)?;
        save_image(&dir.join("clean").join(&name), clean)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_pairs(3, 16, 16, 9);
        assert_eq!(a, synthetic_pairs(3, 16, 16, 9));
        for (d, c) in &a {
            assert!(d.data().iter().chain(c.data()).all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(d, c);
        }
    }

    #[test]
    fn haze_formula() {
        let c = Tensor::from_fn(vec![3, 2, 2], |i| i as f32 / 12.0);
        let h = haze(&c, 0.6, 0.3);
        assert!((h.data()[6] as f64 - (0.5f32 as f64 * 0.6 + 0.3)).abs() < 1e-7);
    }
}
