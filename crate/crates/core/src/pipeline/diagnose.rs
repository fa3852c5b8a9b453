//! How much a degradation moves the amplitude versus the phase of the luma spectrum.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::spectral::{decompose, fft2};
use crate::tensor::{Scalar, Tensor};

/// ITU-R BT.601 luma of a `[3, h, w]` image, as `[h, w]`.
pub fn luma<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<f64>> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::dim("luma", format!("expected [3, h, w], got {s:?}"))),
    };
    let d = img.data();
    let hw = h * w;
    Ok(Tensor::from_fn(vec![h, w], |i| {
        0.299 * d[i].as_f64() + 0.587 * d[hw + i].as_f64() + 0.114 * d[2 * hw + i].as_f64()
    }))
}

/// Wrap an angle difference into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairDistance {
    /// `‖M_clean − M_deg‖₂ / ‖M_clean‖₂`.
    pub d_amp: f64,
    /// `‖wrap(φ_clean − φ_deg)‖₂ / (π·sqrt(hw))`.
    pub d_phase: f64,
}

pub fn pair_distance<T: Scalar>(clean: &Tensor<T>, degraded: &Tensor<T>) -> Result<PairDistance> {
    if clean.shape() != degraded.shape() {
        return Err(Error::dim(
            "diagnose_phase",
            format!("pair shapes {:?} and {:?} differ", clean.shape(), degraded.shape()),
        ));
    }
    let (mc, pc) = decompose(&fft2(&luma(clean)?)?);
    let (md, pd) = decompose(&fft2(&luma(degraded)?)?);
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&mut mc.data().iter().zip(md.data()).map(|(a, b)| a - b));
    let base = norm(&mut mc.data().iter().copied());
    let d_amp = if base > 0.0 { diff / base } else { 0.0 };
    let phase = norm(&mut pc.data().iter().zip(pd.data()).map(|(a, b)| wrap_angle(a - b)));
    let d_phase = phase / (PI * (mc.numel() as f64).sqrt());
    Ok(PairDistance { d_amp, d_phase })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub pairs: Vec<PairDistance>,
    pub mean_amp: f64,
    pub mean_phase: f64,
    /// Share of pairs with `d_amp > d_phase`.
    pub amp_dominant_fraction: f64,
}

/// `pairs` are `(degraded, clean)`, the dataset order.
pub fn diagnose_phase<T: Scalar>(pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<PhaseReport> {
    if pairs.is_empty() {
        return Err(Error::Usage("diagnose_phase needs at least one image pair".into()));
    }
    let dist = pairs
        .iter()
        .map(|(deg, clean)| pair_distance(clean, deg))
        .collect::<Result<Vec<_>>>()?;
    let n = dist.len() as f64;
    Ok(PhaseReport {
        mean_amp: dist.iter().map(|d| d.d_amp).sum::<f64>() / n,
        mean_phase: dist.iter().map(|d| d.d_phase).sum::<f64>() / n,
        amp_dominant_fraction: dist.iter().filter(|d| d.d_amp > d.d_phase).count() as f64 / n,
        pairs: dist,
    })
}
