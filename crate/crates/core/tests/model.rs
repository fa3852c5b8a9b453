use phaseformer::losses::WeightMode;
use phaseformer::model::attention::{block_param_count, BlockConfig};
use phaseformer::model::skip::default_kernel_size;
use phaseformer::model::*;
use phaseformer::pipeline::selftest::{micro_config, model_gradcheck};
use phaseformer::tensor::gradcheck::random_tensor;
use phaseformer::tensor::{ParamSpec, Tape, Tensor};
use phaseformer::Error;

fn hand_count(cfg: &ModelConfig) -> usize {
    let c0 = cfg.base_channels;
    let k2 = cfg.upsample_kernel * cfg.upsample_kernel;
    let mut total = c0 * 3 * 9 + 3 * c0 * 9 + c0 * c0 * k2 + 3 * c0 * 9;
    for level in 0..cfg.levels {
        let c = cfg.channels_at(level);
        let h = cfg.heads_per_level[level];
        let block = 10 * c * c + 65 * c + h;
        total += cfg.blocks_per_level[level] * block;
        if level + 1 < cfg.levels {
            total += 2 * c * c * 9 + 2 * c * c * k2 + c * 2 * c;
            if cfg.skip_kind != SkipKind::Identity {
                total += default_kernel_size(c).unwrap();
            }
            total += cfg.decoder_blocks_per_level[level] * block;
        } else {
            total += cfg.bottleneck_blocks * block;
        }
    }
    total
}

#[test]
fn parameter_count_matches_hand_count() {
    for cfg in [ModelConfig::full(), ModelConfig::desk(), micro_config()] {
        assert_eq!(count_parameters(&cfg).unwrap().total, hand_count(&cfg));
        assert_eq!(init_params::<f32>(&cfg, 0).unwrap().scalar_count(), hand_count(&cfg));
    }
    let identity = ModelConfig {
        skip_kind: SkipKind::Identity,
        ..ModelConfig::desk()
    };
    assert_eq!(count_parameters(&identity).unwrap().total, hand_count(&identity));
}

#[test]
fn block_count_closed_form() {
    assert_eq!(block_param_count(&BlockConfig::new(24, 1)), 10 * 576 + 65 * 24 + 1);
}

#[test]
fn full_config_complexity_in_range() {
    let cfg = ModelConfig::full();
    let params = count_parameters(&cfg).unwrap().total;
    assert!((1_500_000..=2_000_000).contains(&params), "{params}");
    let flops = estimate_flops(&cfg, 256, 256).unwrap();
    assert!((8e9..=20e9).contains(&(flops as f64)), "{flops}");
}

#[test]
fn pointwise_conv_flops() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(vec![8, 3, 1, 1]));
    tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.flops(), 768);
}

fn traced_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let params = init_params::<f32>(cfg, 0).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(vec![1, 3, h, w]));
    forward(&mut tape, cfg, &b, x).unwrap();
    tape.flops()
}

#[test]
fn estimate_equals_traced_flops() {
    for (skip_kind, attention_kind, k) in [
        (SkipKind::Opab, AttentionKind::Phase, 2),
        (SkipKind::Oa, AttentionKind::Phase, 2),
        (SkipKind::Identity, AttentionKind::Plain, 2),
        (SkipKind::Opab, AttentionKind::Phase, 4),
    ] {
        let cfg = ModelConfig {
            skip_kind,
            attention_kind,
            upsample_kernel: k,
            ..micro_config()
        };
        assert_eq!(estimate_flops(&cfg, 16, 16).unwrap(), traced_flops(&cfg, 16, 16));
    }
    let desk = ModelConfig::desk();
    assert_eq!(estimate_flops(&desk, 64, 32).unwrap(), traced_flops(&desk, 64, 32));
}

#[test]
fn forward_shapes() {
    let cfg = ModelConfig::desk();
    let params = init_params::<f32>(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let x = tape.constant(random_tensor(&[2, 3, 64, 64], 0.0, 1.0, 2).cast());
    let out = forward(&mut tape, &cfg, &b, x).unwrap();
    assert_eq!(tape.shape(out.full_res), &[2, 3, 64, 64]);
    assert_eq!(tape.shape(out.double_res), &[2, 3, 128, 128]);
    let trace: Vec<(&str, &[usize])> = out.trace.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    assert_eq!(
        trace,
        vec![
            ("enc.0", &[2, 8, 64, 64][..]),
            ("enc.1", &[2, 16, 32, 32][..]),
            ("enc.2", &[2, 32, 16, 16][..]),
            ("bottleneck", &[2, 32, 16, 16][..]),
            ("dec.1", &[2, 16, 32, 32][..]),
            ("dec.0", &[2, 8, 64, 64][..]),
        ]
    );
}

#[test]
fn wide_upsample_kernel_keeps_shapes() {
    let cfg = ModelConfig {
        upsample_kernel: 4,
        ..micro_config()
    };
    let params = init_params::<f64>(&cfg, 0).unwrap();
    let y = infer(&cfg, &params, &random_tensor(&[1, 3, 16, 16], 0.0, 1.0, 1)).unwrap();
    assert_eq!(y.full_res.shape(), &[1, 3, 16, 16]);
    assert_eq!(y.double_res.shape(), &[1, 3, 32, 32]);
}

#[test]
fn bad_inputs_rejected() {
    let cfg = ModelConfig::desk();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    assert!(matches!(infer(&cfg, &params, &Tensor::zeros(vec![1, 3, 48, 48])), Err(Error::Config(_))));
    assert!(matches!(infer(&cfg, &params, &Tensor::zeros(vec![1, 4, 64, 64])), Err(Error::Dimension { .. })));
    let odd = ModelConfig {
        upsample_kernel: 3,
        ..cfg
    };
    assert!(matches!(odd.validate(), Err(Error::Config(_))));
}

#[test]
fn inference_is_deterministic_and_clamped() {
    let cfg = micro_config();
    let params = init_params::<f32>(&cfg, 3).unwrap();
    let x: Tensor<f32> = random_tensor(&[1, 3, 16, 16], 0.0, 1.0, 4).cast();
    let a = infer(&cfg, &params, &x).unwrap();
    let b = infer(&cfg, &params, &x).unwrap();
    assert_eq!(a, b);
    assert!(a.full_res.data().iter().chain(a.double_res.data()).all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn initialisation_is_seeded() {
    let cfg = micro_config();
    assert_eq!(init_params::<f32>(&cfg, 5).unwrap(), init_params::<f32>(&cfg, 5).unwrap());
    assert_ne!(init_params::<f32>(&cfg, 5).unwrap(), init_params::<f32>(&cfg, 6).unwrap());
    let names: Vec<String> = param_specs(&cfg).unwrap().into_iter().map(|s: ParamSpec| s.name).collect();
    assert!(names.contains(&"skip.0".to_string()) && names.contains(&"head_up".to_string()));
}

#[test]
fn micro_model_gradients() {
    let report = model_gradcheck(&micro_config(), 20, 0, false).unwrap();
    assert_eq!(report.checked, 20);
    assert!(report.passes(1e-3), "{report:?}");
    let faulty = model_gradcheck(&micro_config(), 5, 0, true).unwrap();
    assert!(!faulty.passes(1e-3));
}

#[test]
fn ablation_rows() {
    let rows = ablation_variants(&ModelConfig::desk());
    let kinds: Vec<_> = rows.iter().map(|r| (r.config.attention_kind, r.config.skip_kind, r.weights)).collect();
    assert_eq!(
        kinds,
        vec![
            (AttentionKind::Plain, SkipKind::Identity, WeightMode::Learnable),
            (AttentionKind::Phase, SkipKind::Identity, WeightMode::Learnable),
            (AttentionKind::Phase, SkipKind::Oa, WeightMode::Fixed),
            (AttentionKind::Phase, SkipKind::Opab, WeightMode::Fixed),
            (AttentionKind::Phase, SkipKind::Opab, WeightMode::Learnable),
        ]
    );
    for r in &rows {
        r.config.validate().unwrap();
    }
}
