//! Full-reference (PSNR, SSIM) and no-reference (UICM, UISM, UIConM, UIQM) image quality.

pub mod constants;

use crate::error::{Error, Result};
use crate::losses::ssim_components;
use crate::pipeline::diagnose::luma;
use crate::tensor::{Scalar, Tape, Tensor};
use constants::*;

/// `10·log10(peak² / MSE)`, capped at 100 dB.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dim("psnr", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gray(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    match x.rank() {
        2 => Ok(x.clone()),
        3 if x.shape()[0] == 1 => x.clone().reshape(x.shape()[1..].to_vec()),
        3 => luma(x),
        _ => Err(Error::dim("ssim", format!("expected [3, h, w], [1, h, w] or [h, w], got {:?}", x.shape()))),
    }
}

/// Single-scale SSIM of the luma planes (11-tap Gaussian window, σ 1.5, valid region).
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dim("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (gx, gy) = (gray(&x.cast())?, gray(&y.cast())?);
    let (h, w) = (gx.shape()[0], gx.shape()[1]);
    if h < crate::losses::SSIM_WINDOW || w < crate::losses::SSIM_WINDOW {
        return Err(Error::Domain(format!("ssim needs at least 11x11 pixels, got {h}x{w}")));
    }
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(gx.reshape(vec![1, 1, h, w])?);
    let b = tape.constant(gy.reshape(vec![1, 1, h, w])?);
    let (lcs, _) = ssim_components(&mut tape, a, b)?;
    Ok(tape.value(lcs).item())
}

fn channels_255<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<(usize, usize, Vec<f64>)> {
    match *x.shape() {
        [3, h, w] => Ok((h, w, x.data().iter().map(|v| v.as_f64() * INTENSITY_SCALE).collect())),
        ref s => Err(Error::Domain(format!("{op} needs a colour [3, h, w] image, got {s:?}"))),
    }
}

/// α-trimmed mean: the `ceil(TRIM_LOW·K)` smallest and `floor(TRIM_HIGH·K)` largest samples are dropped.
pub fn trimmed_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let lo = (TRIM_LOW * k as f64).ceil() as usize;
    let hi = (TRIM_HIGH * k as f64).floor() as usize;
    let kept = &v[lo.min(k)..k - hi.min(k - lo.min(k))];
    if kept.is_empty() {
        return 0.0;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Colourfulness from the trimmed statistics of RG = R − G and YB = (R + G)/2 − B.
pub fn uicm<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    let (h, w, d) = channels_255(x, "uicm")?;
    let hw = h * w;
    let rg: Vec<f64> = (0..hw).map(|i| d[i] - d[hw + i]).collect();
    let yb: Vec<f64> = (0..hw).map(|i| 0.5 * (d[i] + d[hw + i]) - d[2 * hw + i]).collect();
    let stats = |v: &[f64]| {
        let mu = trimmed_mean(v);
        let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64;
        (mu, var)
    };
    let ((mrg, vrg), (myb, vyb)) = (stats(&rg), stats(&yb));
    Ok(UICM_MEAN * (mrg * mrg + myb * myb).sqrt() + UICM_VAR * (vrg + vyb).sqrt())
}

/// Sobel gradient magnitude with edge-replicated borders.
pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Visit every complete `BLOCK × BLOCK` tile as `(max, min)`; trailing partial tiles are ignored.
fn block_extrema(plane: &[f64], h: usize, w: usize, mut f: impl FnMut(f64, f64)) -> usize {
    let (by, bx) = (h / BLOCK, w / BLOCK);
    for j in 0..by {
        for i in 0..bx {
            let (mut mx, mut mn) = (f64::NEG_INFINITY, f64::INFINITY);
            for y in j * BLOCK..(j + 1) * BLOCK {
                for &v in &plane[y * w + i * BLOCK..y * w + (i + 1) * BLOCK] {
                    mx = mx.max(v);
                    mn = mn.min(v);
                }
            }
            f(mx, mn);
        }
    }
    by * bx
}

/// `2/(k₁k₂) Σ ln(max/min)`; blocks with a zero extreme contribute 0.
pub fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let mut sum = 0.0;
    let n = block_extrema(plane, h, w, |mx, mn| {
        if mn > 0.0 && mx > 0.0 {
            sum += (mx / mn).ln();
        }
    });
    if n == 0 {
        return 0.0;
    }
    2.0 / n as f64 * sum
}

/// Sharpness: luma-weighted EME of each channel's Sobel magnitude times the channel.
pub fn uism<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    let (h, w, d) = channels_255(x, "uism")?;
    let hw = h * w;
    let mut total = 0.0;
    for (c, lambda) in UISM_LAMBDA.iter().enumerate() {
        let plane = &d[c * hw..(c + 1) * hw];
        let edges: Vec<f64> = sobel_magnitude(plane, h, w)
            .iter()
            .zip(plane)
            .map(|(e, v)| e * v)
            .collect();
        total += lambda * eme(&edges, h, w);
    }
    Ok(total)
}

/// Contrast: `−1/(k₁k₂) Σ r·ln r` with `r = (max − min)/(max + min)` over luma blocks.
pub fn uiconm<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    channels_255(x, "uiconm")?;
    let y = luma(x)?.map(|v| v * INTENSITY_SCALE);
    let (h, w) = (y.shape()[0], y.shape()[1]);
    let mut sum = 0.0;
    let n = block_extrema(y.data(), h, w, |mx, mn| {
        let (top, bot) = (mx - mn, mx + mn);
        if top > 0.0 && bot > 0.0 {
            let r = top / bot;
            sum += r * r.ln();
        }
    });
    if n == 0 {
        return Ok(0.0);
    }
    Ok(-sum / n as f64)
}

pub fn uiqm<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    Ok(UIQM_C1 * uicm(x)? + UIQM_C2 * uism(x)? + UIQM_C3 * uiconm(x)?)
}

/// Scores of one restored image against its reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
    pub uiqm: f64,
    pub uism: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub names: Vec<String>,
    pub per_image: Vec<ImageScores>,
    pub mean: ImageScores,
}

pub fn score_image<T: Scalar>(restored: &Tensor<T>, reference: &Tensor<T>) -> Result<ImageScores> {
    Ok(ImageScores {
        psnr: psnr(restored, reference, 1.0)?,
        ssim: ssim(restored, reference)?,
        uiqm: uiqm(restored)?,
        uism: uism(restored)?,
    })
}

impl MetricReport {
    /// `items` are `(name, restored, reference)`.
    pub fn build<T: Scalar>(items: &[(String, Tensor<T>, Tensor<T>)]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Usage("no images to evaluate".into()));
        }
        let per_image = items
            .iter()
            .map(|(_, r, g)| score_image(r, g))
            .collect::<Result<Vec<_>>>()?;
        let n = per_image.len() as f64;
        let avg = |f: fn(&ImageScores) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let mean = ImageScores {
            psnr: avg(|s| s.psnr),
            ssim: avg(|s| s.ssim),
            uiqm: avg(|s| s.uiqm),
            uism: avg(|s| s.uism),
        };
        Ok(MetricReport {
            names: items.iter().map(|(n, _, _)| n.clone()).collect(),
            per_image,
            mean,
        })
    }

    /// Tab-separated table: header, one row per image, then the mean row.
    pub fn to_table(&self) -> String {
        let row = |name: &str, s: &ImageScores| format!("{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n", s.psnr, s.ssim, s.uiqm, s.uism);
        let mut out = String::from("image\tpsnr\tssim\tuiqm\tuism\n");
        for (n, s) in self.names.iter().zip(&self.per_image) {
            out += &row(n, s);
        }
        out += &row("mean", &self.mean);
        out
    }
}
