//! The restoration network: a U-shaped stack of phase-attention transformer
//! blocks with gated skips and two output heads (native and ×2 resolution).

pub mod attention;
mod config;
pub mod skip;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::{AttentionKind, BlockConfig, ResidualKind};
pub use config::ModelConfig;
pub use skip::SkipKind;

use crate::error::{Error, Result};
use crate::losses::WeightMode;
use crate::spectral::radix2::fft_flops;
use crate::tensor::{BoundParams, ParamSpec, ParamStore, Scalar, Tape, Tensor, Var};
use attention::{pbtb, BlockParams};

/// Predictions at native and doubled resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T: Scalar = f32> {
    pub full_res: Tensor<T>,
    pub double_res: Tensor<T>,
}

/// Tape handles of a forward pass.
#[derive(Clone, Debug)]
pub struct OutputVars {
    pub full_res: Var,
    pub double_res: Var,
    /// `(stage, shape)` of every encoder level output, bottleneck and decoder level.
    pub trace: Vec<(String, Vec<usize>)>,
}

fn enc(level: usize, b: usize) -> String {
    format!("enc.{level}.{b}")
}

fn dec(level: usize, b: usize) -> String {
    format!("dec.{level}.{b}")
}

/// Every trainable tensor of `cfg`, with its initialiser.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let c0 = cfg.base_channels;
    let k = cfg.upsample_kernel;
    let mut specs = vec![ParamSpec::conv("input_conv", c0, 3, 3)];
    for level in 0..cfg.levels {
        let c = cfg.channels_at(level);
        let bc = cfg.block_config(level);
        for b in 0..cfg.blocks_per_level[level] {
            specs.extend(BlockParams::specs(&enc(level, b), &bc));
        }
        if level + 1 < cfg.levels {
            specs.push(ParamSpec::conv(format!("down.{level}"), 2 * c, c, 3));
            // each output pixel of a stride-2 transposed conv sums cin·(k/2)² terms
            specs.push(ParamSpec::new(
                format!("up.{level}"),
                vec![2 * c, c, k, k],
                crate::tensor::Init::KaimingUniform { fan_in: 2 * c * k * k / 4 },
            ));
            specs.push(ParamSpec::conv(format!("reduce.{level}"), c, 2 * c, 1));
            if cfg.skip_kind != SkipKind::Identity {
                specs.push(skip::gate_spec(format!("skip.{level}"), c)?);
            }
            for b in 0..cfg.decoder_blocks_per_level[level] {
                specs.extend(BlockParams::specs(&dec(level, b), &bc));
            }
        }
    }
    let deepest = cfg.block_config(cfg.levels - 1);
    for b in 0..cfg.bottleneck_blocks {
        specs.extend(BlockParams::specs(&format!("bottleneck.{b}"), &deepest));
    }
    specs.push(ParamSpec::conv("head_full", 3, c0, 3));
    specs.push(ParamSpec::new(
        "head_up",
        vec![c0, c0, k, k],
        crate::tensor::Init::KaimingUniform { fan_in: c0 * k * k / 4 },
    ));
    specs.push(ParamSpec::conv("head_double", 3, c0, 3));
    Ok(specs)
}

/// Freshly initialised parameters drawn from a seeded stream.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ParamStore::init(&param_specs(cfg)?, &mut rng)
}

/// Total trainable scalars and a breakdown keyed by module path
/// (parameter name without its last segment).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub by_module: BTreeMap<String, usize>,
}

pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamCount> {
    let mut by_module = BTreeMap::new();
    let mut total = 0;
    for spec in param_specs(cfg)? {
        let module = match spec.name.rsplit_once('.') {
            Some((m, _)) => m.to_string(),
            None => spec.name.clone(),
        };
        *by_module.entry(module).or_insert(0) += spec.numel();
        total += spec.numel();
    }
    Ok(ParamCount { total, by_module })
}

/// Stride-2 transposed convolution that exactly doubles `h × w`, cropping
/// the `(k − 2)/2` overhang on each side for kernels wider than 2.
fn upsample<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<Var> {
    let (h, wd) = (tape.shape(x)[2], tape.shape(x)[3]);
    let y = tape.conv_transpose2d(x, w, 2)?;
    let k = tape.shape(w)[2];
    if k == 2 {
        return Ok(y);
    }
    let crop = (k - 2) / 2;
    let y = tape.narrow(y, 2, crop, 2 * h)?;
    tape.narrow(y, 3, crop, 2 * wd)
}

/// Record the network on `tape`. `x` is `[n, 3, h, w]`.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, cfg: &ModelConfig, p: &BoundParams, x: Var) -> Result<OutputVars> {
    cfg.validate()?;
    let (h, w) = match *tape.shape(x) {
        [_, 3, h, w] => (h, w),
        ref s => return Err(Error::dim("forward", format!("expected [n, 3, h, w] input, got {s:?}"))),
    };
    cfg.check_input(h, w)?;
    let mut trace = Vec::new();

    let mut feat = tape.conv2d(x, p.get("input_conv")?, 1, 1)?;
    let mut skips = Vec::new();
    for level in 0..cfg.levels {
        let bc = cfg.block_config(level);
        for b in 0..cfg.blocks_per_level[level] {
            feat = pbtb(tape, &BlockParams::bind(p, &enc(level, b))?, feat, &bc)?;
        }
        trace.push((format!("enc.{level}"), tape.shape(feat).to_vec()));
        if level + 1 < cfg.levels {
            skips.push(feat);
            feat = tape.conv2d(feat, p.get(&format!("down.{level}"))?, 2, 1)?;
        }
    }
    let deepest = cfg.block_config(cfg.levels - 1);
    for b in 0..cfg.bottleneck_blocks {
        feat = pbtb(tape, &BlockParams::bind(p, &format!("bottleneck.{b}"))?, feat, &deepest)?;
    }
    trace.push(("bottleneck".to_string(), tape.shape(feat).to_vec()));

    for level in (0..cfg.levels - 1).rev() {
        let bc = cfg.block_config(level);
        let up = upsample(tape, feat, p.get(&format!("up.{level}"))?)?;
        let kernel = match cfg.skip_kind {
            SkipKind::Identity => None,
            _ => Some(p.get(&format!("skip.{level}"))?),
        };
        let gated = skip::apply_skip(tape, cfg.skip_kind, skips[level], kernel, cfg.pem_differentiable)?;
        let merged = tape.concat(&[up, gated], 1)?;
        feat = tape.conv2d(merged, p.get(&format!("reduce.{level}"))?, 1, 0)?;
        for b in 0..cfg.decoder_blocks_per_level[level] {
            feat = pbtb(tape, &BlockParams::bind(p, &dec(level, b))?, feat, &bc)?;
        }
        trace.push((format!("dec.{level}"), tape.shape(feat).to_vec()));
    }

    let full_res = tape.conv2d(feat, p.get("head_full")?, 1, 1)?;
    let up = upsample(tape, feat, p.get("head_up")?)?;
    let double_res = tape.conv2d(up, p.get("head_double")?, 1, 1)?;
    Ok(OutputVars {
        full_res,
        double_res,
        trace,
    })
}

/// Inference: untracked forward pass with outputs clamped to `[0, 1]`.
pub fn infer<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, x: &Tensor<T>) -> Result<ModelOutput<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = forward(&mut tape, cfg, &bound, xv)?;
    let clamp = |t: &Tensor<T>| t.map(|v| v.max(T::zero()).min(T::one()));
    Ok(ModelOutput {
        full_res: clamp(tape.value(out.full_res)),
        double_res: clamp(tape.value(out.double_res)),
    })
}

fn block_flops(bc: &BlockConfig, hw: u64, fft: u64) -> u64 {
    let c = bc.channels as u64;
    let d = bc.head_dim() as u64;
    let hid = bc.hidden() as u64;
    let pem = match bc.attention {
        AttentionKind::Phase => 2 * c * fft,
        AttentionKind::Plain => 0,
    };
    let qkv = 3 * (2 * c * c * hw + 2 * c * 9 * hw);
    let attn = 4 * c * d * hw;
    let out = 2 * c * c * hw;
    let ffn = 2 * (2 * hid) * c * hw + 2 * (2 * hid) * 9 * hw + 2 * c * hid * hw;
    pem + qkv + attn + out + ffn
}

/// Floating-point operations of one forward pass at batch 1 on an `h × w` input:
/// 2 per multiply–accumulate of every convolution and matmul, plus
/// `2·5·hw·log2(hw)` per 2D FFT plane.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let k2 = (cfg.upsample_kernel * cfg.upsample_kernel) as u64;
    let c0 = cfg.base_channels as u64;
    let hw0 = (h * w) as u64;
    let mut total = 2 * c0 * 3 * 9 * hw0;
    for level in 0..cfg.levels {
        let (lh, lw) = (h >> level, w >> level);
        let hw = (lh * lw) as u64;
        let fft = fft_flops(lh, lw);
        let c = cfg.channels_at(level) as u64;
        let bc = cfg.block_config(level);
        let mut blocks = cfg.blocks_per_level[level] as u64;
        if level + 1 == cfg.levels {
            blocks += cfg.bottleneck_blocks as u64;
        } else {
            blocks += cfg.decoder_blocks_per_level[level] as u64;
            let down = 2 * (2 * c) * c * 9 * (hw / 4);
            let up = 2 * (2 * c) * c * k2 * (hw / 4);
            let reduce = 2 * c * (2 * c) * hw;
            let kernel = skip::default_kernel_size(c as usize)? as u64;
            let gate = match cfg.skip_kind {
                SkipKind::Opab => 2 * c * fft + 2 * c * kernel,
                SkipKind::Oa => 2 * c * kernel,
                SkipKind::Identity => 0,
            };
            total += down + up + reduce + gate;
        }
        total += blocks * block_flops(&bc, hw, fft);
    }
    total += 2 * 3 * c0 * 9 * hw0;
    total += 2 * c0 * c0 * k2 * hw0;
    total += 2 * 3 * c0 * 9 * 4 * hw0;
    Ok(total)
}

/// One row of the component ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub config: ModelConfig,
    pub weights: WeightMode,
}

/// The five component ablation settings, in table order, built on `base`.
pub fn ablation_variants(base: &ModelConfig) -> Vec<AblationVariant> {
    let row = |name, attention_kind, skip_kind, weights| AblationVariant {
        name,
        config: ModelConfig {
            attention_kind,
            skip_kind,
            ..base.clone()
        },
        weights,
    };
    use AttentionKind::*;
    use SkipKind::*;
    vec![
        row("self-attention, dynamic weights", Plain, Identity, WeightMode::Learnable),
        row("phase attention, dynamic weights", Phase, Identity, WeightMode::Learnable),
        row("phase attention, fixed weights, gate without phase", Phase, Oa, WeightMode::Fixed),
        row("phase attention, fixed weights, phase gate", Phase, Opab, WeightMode::Fixed),
        row("full method", Phase, Opab, WeightMode::Learnable),
    ]
}
