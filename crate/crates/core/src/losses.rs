//! Training objectives: Charbonnier, gradient, MS-SSIM and feature-space
//! losses, combined per resolution by softmax-normalised weights.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::OutputVars;
use crate::pipeline::checkpoint::read_records;
use crate::tensor::{Init, ParamSpec, ParamStore, Scalar, Tape, Tensor, Var};

/// Whether the four per-resolution weights are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Learnable,
    Fixed,
}

/// Final weights reported for the fully trained network, in loss order
/// (Charbonnier, gradient, MS-SSIM, perceptual).
pub const REPORTED_OMEGA: [f64; 4] = [0.2741, 0.2222, 0.3357, 0.1680];

/// Four logits whose softmax weights the per-resolution losses, plus the
/// fixed split between the ×2 and native resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub logits: [f64; 4],
    pub omega_h: f64,
    pub omega_l: f64,
    pub mode: WeightMode,
}

impl LossWeights {
    /// Equal weights that the optimiser may move.
    pub fn learnable() -> Self {
        LossWeights {
            logits: [0.0; 4],
            omega_h: 0.4,
            omega_l: 0.6,
            mode: WeightMode::Learnable,
        }
    }

    /// Frozen weights equal to `omega` (which must be positive and sum to 1).
    pub fn fixed(omega: [f64; 4]) -> Result<Self> {
        if omega.iter().any(|&w| w.is_nan() || w <= 0.0) || (omega.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("fixed loss weights {omega:?} must be positive and sum to 1")));
        }
        Ok(LossWeights {
            logits: omega.map(f64::ln),
            mode: WeightMode::Fixed,
            ..Self::learnable()
        })
    }

    pub fn for_mode(mode: WeightMode) -> Self {
        match mode {
            WeightMode::Learnable => Self::learnable(),
            WeightMode::Fixed => LossWeights {
                mode,
                ..Self::learnable()
            },
        }
    }

    /// `softmax(logits)`.
    pub fn realized(&self) -> [f64; 4] {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.logits.map(|l| (l - m).exp());
        let z: f64 = e.iter().sum();
        e.map(|v| v / z)
    }

    /// Record the realized weights on `tape`; the logits leaf is tracked only
    /// in learnable mode. Returns `(logits, omega)`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<(Var, Var)> {
        let t = Tensor::from_f64(vec![4], &self.logits)?;
        let logits = tape.leaf(t, self.mode == WeightMode::Learnable);
        let omega = tape.softmax(logits)?;
        Ok((logits, omega))
    }
}

fn check_same<T: Scalar>(tape: &Tape<T>, op: &'static str, x: Var, y: Var) -> Result<()> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::dim(op, format!("{:?} vs {:?}", tape.shape(x), tape.shape(y))));
    }
    Ok(())
}

/// `mean(sqrt((x − y)² + eps²))`.
pub fn charbonnier<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, eps: f64) -> Result<Var> {
    check_same(tape, "charbonnier", x, y)?;
    let d = tape.sub(x, y)?;
    let d2 = tape.square(d);
    let s = tape.add_scalar(d2, T::from_f64(eps * eps));
    let r = tape.sqrt(s);
    Ok(tape.mean(r))
}

fn forward_diff<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Option<Var>> {
    let n = tape.shape(x)[axis];
    if n < 2 {
        return Ok(None);
    }
    let a = tape.narrow(x, axis, 1, n - 1)?;
    let b = tape.narrow(x, axis, 0, n - 1)?;
    tape.sub(a, b).map(Some)
}

/// `mean|∂x x − ∂x y| + mean|∂y x − ∂y y|` with forward differences.
pub fn gradient_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    check_same(tape, "gradient_loss", x, y)?;
    if tape.shape(x).len() != 4 {
        return Err(Error::dim("gradient_loss", format!("expected [n, c, h, w], got {:?}", tape.shape(x))));
    }
    let mut total: Option<Var> = None;
    for axis in [3, 2] {
        if let (Some(dx), Some(dy)) = (forward_diff(tape, x, axis)?, forward_diff(tape, y, axis)?) {
            let d = tape.sub(dx, dy)?;
            let a = tape.abs(d);
            let m = tape.mean(a);
            total = Some(match total {
                Some(t) => tape.add(t, m)?,
                None => m,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const CS_FLOOR: f64 = 1e-6;

/// Normalised 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Scales used for an `h × w` image: `min(5, ⌊log2(min(h, w)/11)⌋ + 1)`.
pub fn ms_ssim_scales(h: usize, w: usize) -> Result<usize> {
    let m = h.min(w);
    if m < SSIM_WINDOW {
        return Err(Error::Config(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}-pixel window")));
    }
    Ok(((m as f64 / SSIM_WINDOW as f64).log2().floor() as usize + 1).min(5))
}

/// Per-channel SSIM statistics of one scale: `(mean of l·cs, mean of cs)`,
/// both shaped `[n, c, 1, 1]`. Valid (unpadded) Gaussian window, peak 1.
pub fn ssim_components<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<(Var, Var)> {
    check_same(tape, "ssim", x, y)?;
    let c = match *tape.shape(x) {
        [_, c, h, w] if h >= SSIM_WINDOW && w >= SSIM_WINDOW => c,
        ref s => {
            return Err(Error::Config(format!(
                "ssim needs [n, c, h, w] with h, w >= {SSIM_WINDOW}, got {s:?}"
            )))
        }
    };
    let g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let k = SSIM_WINDOW;
    let win = Tensor::from_fn(vec![c, 1, k, k], |i| T::from_f64(g[(i / k) % k] * g[i % k]));
    let win = tape.constant(win);
    let blur = |tape: &mut Tape<T>, v: Var| tape.depthwise_conv2d(v, win, 0);

    let mx = blur(tape, x)?;
    let my = blur(tape, y)?;
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let sxx = blur(tape, xx)?;
    let syy = blur(tape, yy)?;
    let sxy = blur(tape, xy)?;
    let mx2 = tape.square(mx);
    let my2 = tape.square(my);
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(sxx, mx2)?;
    let vy = tape.sub(syy, my2)?;
    let cov = tape.sub(sxy, mxy)?;

    let c1 = T::from_f64(SSIM_K1 * SSIM_K1);
    let c2 = T::from_f64(SSIM_K2 * SSIM_K2);
    let two = T::from_f64(2.0);
    let l_num = tape.mul_scalar(mxy, two);
    let l_num = tape.add_scalar(l_num, c1);
    let l_den = tape.add(mx2, my2)?;
    let l_den = tape.add_scalar(l_den, c1);
    let l = tape.div(l_num, l_den)?;
    let cs_num = tape.mul_scalar(cov, two);
    let cs_num = tape.add_scalar(cs_num, c2);
    let cs_den = tape.add(vx, vy)?;
    let cs_den = tape.add_scalar(cs_den, c2);
    let cs = tape.div(cs_num, cs_den)?;
    let lcs = tape.mul(l, cs)?;
    Ok((tape.global_avg_pool(lcs)?, tape.global_avg_pool(cs)?))
}

/// Per-channel MS-SSIM over `scales` scales, `[n, c, 1, 1]`.
pub fn ms_ssim_map<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, scales: usize) -> Result<Var> {
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::Config(format!("ms-ssim scale count {scales} outside 1..=5")));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (x, y);
    let mut acc: Option<Var> = None;
    for (s, &weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        if s > 0 {
            x = tape.avg_pool2(x)?;
            y = tape.avg_pool2(y)?;
        }
        let (ssim, cs) = ssim_components(tape, x, y)?;
        let term = if s + 1 == scales { ssim } else { cs };
        let term = tape.clamp(term, T::from_f64(CS_FLOOR), T::max_value());
        let term = tape.powf(term, T::from_f64(weight / wsum));
        acc = Some(match acc {
            Some(a) => tape.mul(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one scale"))
}

/// `1 − MS-SSIM` averaged over batch and channels, scale count chosen from the image size.
pub fn ms_ssim_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let (h, w) = match *tape.shape(x) {
        [_, _, h, w] => (h, w),
        ref s => return Err(Error::dim("ms_ssim", format!("expected [n, c, h, w], got {s:?}"))),
    };
    ms_ssim_loss_with_scales(tape, x, y, ms_ssim_scales(h, w)?)
}

pub fn ms_ssim_loss_with_scales<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, scales: usize) -> Result<Var> {
    let m = ms_ssim_map(tape, x, y, scales)?;
    let mean = tape.mean(m);
    let neg = tape.mul_scalar(mean, T::from_f64(-1.0));
    Ok(tape.add_scalar(neg, T::one()))
}

/// Frozen convolutional feature stack: three stride-2 3×3 stages with
/// 16, 32 and 64 channels, each followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<Tensor<f64>>,
}

pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];

impl FeatureExtractor {
    fn specs() -> Vec<ParamSpec> {
        let mut cin = 3;
        FEATURE_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = ParamSpec::new(format!("stage{i}"), vec![c, cin, 3, 3], Init::KaimingUniform { fan_in: cin * 9 });
                cin = c;
                s
            })
            .collect()
    }

    /// Weights drawn from a seeded stream; identical for identical seeds.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store: ParamStore<f64> = ParamStore::init(&Self::specs(), &mut rng).expect("static specs are valid");
        FeatureExtractor {
            stages: store.iter().map(|p| p.tensor.clone()).collect(),
        }
    }

    /// Weights from a record file holding `stage0`, `stage1`, `stage2` in the
    /// checkpoint record layout.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cursor = &bytes[..];
        let records = read_records(&mut cursor)?;
        let mut stages = Vec::new();
        for spec in Self::specs() {
            let t = records
                .iter()
                .find(|(n, _)| *n == spec.name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing record {}", path.display(), spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: {} has shape {:?}, expected {:?}",
                    path.display(),
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            stages.push(t.cast());
        }
        Ok(FeatureExtractor { stages })
    }

    pub fn stage_weights(&self) -> &[Tensor<f64>] {
        &self.stages
    }

    /// Feature maps after every stage.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for w in &self.stages {
            let wv = tape.constant(w.cast());
            let c = tape.conv2d(h, wv, 2, 1)?;
            h = tape.relu(c);
            out.push(h);
        }
        Ok(out)
    }
}

/// Sum over stages of the mean squared feature difference.
pub fn perceptual_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, fx: &FeatureExtractor) -> Result<Var> {
    check_same(tape, "perceptual_loss", x, y)?;
    let a = fx.features(tape, x)?;
    let b = fx.features(tape, y)?;
    let mut total: Option<Var> = None;
    for (p, q) in a.into_iter().zip(b) {
        let d = tape.sub(p, q)?;
        let d2 = tape.square(d);
        let m = tape.mean(d2);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("extractor has stages"))
}

/// Settings shared by every loss evaluation.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub charbonnier_eps: f64,
    pub extractor: FeatureExtractor,
}

impl Default for LossContext {
    fn default() -> Self {
        LossContext {
            charbonnier_eps: 1e-3,
            extractor: FeatureExtractor::seeded(0),
        }
    }
}

/// The four weighted terms at one resolution.
#[derive(Clone, Copy, Debug)]
pub struct ResolutionLoss {
    pub total: Var,
    /// Charbonnier, gradient, MS-SSIM and perceptual terms, unweighted.
    pub parts: [Var; 4],
}

/// `Ω₁·L_C + Ω₂·L_G + Ω₃·L_M + Ω₄·L_P` with `omega` a `[4]` variable.
pub fn resolution_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    omega: Var,
    ctx: &LossContext,
) -> Result<ResolutionLoss> {
    let parts = [
        charbonnier(tape, pred, gt, ctx.charbonnier_eps)?,
        gradient_loss(tape, pred, gt)?,
        ms_ssim_loss(tape, pred, gt)?,
        perceptual_loss(tape, pred, gt, &ctx.extractor)?,
    ];
    let flat: Vec<Var> = parts
        .iter()
        .map(|&p| tape.reshape(p, &[1]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&flat, 0)?;
    let weighted = tape.mul(stacked, omega)?;
    Ok(ResolutionLoss {
        total: tape.sum(weighted),
        parts,
    })
}

/// Losses of both output heads.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub high: ResolutionLoss,
    pub low: ResolutionLoss,
}

/// `Ω_H·L_H + Ω_L·L_L`, `L_H` on the ×2 pair and `L_L` on the native pair.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &OutputVars,
    gt_full: Var,
    gt_double: Var,
    omega: Var,
    weights: &LossWeights,
    ctx: &LossContext,
) -> Result<TotalLoss> {
    let (fs, ds) = (tape.shape(gt_full).to_vec(), tape.shape(gt_double).to_vec());
    if fs.len() != 4 || ds.len() != 4 || ds[2] != 2 * fs[2] || ds[3] != 2 * fs[3] || ds[..2] != fs[..2] {
        return Err(Error::dim(
            "total_loss",
            format!("×2 target {ds:?} is not twice the native target {fs:?}"),
        ));
    }
    let high = resolution_loss(tape, out.double_res, gt_double, omega, ctx)?;
    let low = resolution_loss(tape, out.full_res, gt_full, omega, ctx)?;
    let h = tape.mul_scalar(high.total, T::from_f64(weights.omega_h));
    let l = tape.mul_scalar(low.total, T::from_f64(weights.omega_l));
    Ok(TotalLoss {
        total: tape.add(h, l)?,
        high,
        low,
    })
}
