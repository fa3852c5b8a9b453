//! End-to-end finite-difference check of a miniature network in 64-bit.

use crate::error::Result;
use crate::losses::{total_loss, LossContext, LossWeights};
use crate::model::{forward, init_params, ModelConfig};
use crate::pipeline::image::resize_bilinear;
use crate::tensor::gradcheck::{check_gradients, project, random_tensor, GradCheckOptions, GradCheckReport};
use crate::tensor::BoundParams;

/// Two levels, four base channels, 16×16 input.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        levels: 2,
        blocks_per_level: vec![1, 1],
        bottleneck_blocks: 0,
        decoder_blocks_per_level: vec![1],
        heads_per_level: vec![1, 2],
        input_size: (16, 16),
        ..ModelConfig::desk()
    }
}

/// Check `samples` random coordinates of the input and every parameter
/// against the gradient of both projected outputs plus the training loss.
pub fn model_gradcheck(cfg: &ModelConfig, samples: usize, seed: u64, inject_fault: bool) -> Result<GradCheckReport> {
    let params = init_params::<f64>(cfg, seed)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let (h, w) = cfg.input_size;
    let x = random_tensor(&[1, 3, h, w], 0.05, 0.95, seed ^ 1);
    let gt = random_tensor(&[1, 3, h, w], 0.05, 0.95, seed ^ 2);
    let gt2 = resize_bilinear(&gt, 2 * h, 2 * w)?;
    let mut inputs = vec![x];
    inputs.extend(params.iter().map(|p| p.tensor.clone()));
    let ctx = LossContext::default();
    let weights = LossWeights::learnable();
    let f = |tape: &mut crate::tensor::Tape<f64>, vars: &[crate::tensor::Var]| {
        let bound = BoundParams::from_vars(names.iter().map(String::as_str).zip(vars[1..].iter().copied()));
        let out = forward(tape, cfg, &bound, vars[0])?;
        let a = project(tape, out.full_res, seed ^ 3)?;
        let b = project(tape, out.double_res, seed ^ 4)?;
        let g1 = tape.constant(gt.clone());
        let g2 = tape.constant(gt2.clone());
        let (_, omega) = weights.bind(tape)?;
        let loss = total_loss(tape, &out, g1, g2, omega, &weights, &ctx)?.total;
        let ab = tape.add(a, b)?;
        tape.add(ab, loss)
    };
    let opts = GradCheckOptions {
        samples: Some(samples),
        seed,
        inject_fault,
        ..GradCheckOptions::default()
    };
    check_gradients(&inputs, f, &opts)
}
