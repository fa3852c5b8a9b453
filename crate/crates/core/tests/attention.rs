use phaseformer::model::attention::{pbtb, pmsa_body, BlockConfig, BlockParams, PmsaParams};
use phaseformer::model::{AttentionKind, ResidualKind};
use phaseformer::spectral::pem;
use phaseformer::tensor::gradcheck::{check_gradients, project, random_tensor, GradCheckOptions};
use phaseformer::tensor::{BoundParams, ParamStore, Tape, Tensor};
use phaseformer::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store(cfg: &BlockConfig, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::init(&BlockParams::specs("b", cfg), &mut rng).unwrap();
    // distinct temperatures per head so head mix-ups are visible
    if let Some(a) = s.get_mut("b.attn.alpha") {
        for (i, v) in a.tensor.data_mut().iter_mut().enumerate() {
            *v = 0.7 + 0.45 * i as f64;
        }
    }
    s
}

fn w(s: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    s.get(&format!("b.attn.{name}")).unwrap().tensor.clone()
}

/// Pointwise conv followed by 3×3 depthwise (zero padded), on `[c, h, w]`.
fn point_depth(x: &[f64], c: usize, h: usize, wd: usize, pw: &Tensor<f64>, dw: &Tensor<f64>) -> Vec<f64> {
    let mut p = vec![0.0; c * h * wd];
    for o in 0..c {
        for i in 0..c {
            let k = pw.data()[o * c + i];
            for s in 0..h * wd {
                p[o * h * wd + s] += k * x[i * h * wd + s];
            }
        }
    }
    let mut out = vec![0.0; c * h * wd];
    for ch in 0..c {
        for y in 0..h as isize {
            for xx in 0..wd as isize {
                let mut acc = 0.0;
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let (sy, sx) = (y + ky - 1, xx + kx - 1);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                            acc += dw.data()[ch * 9 + (ky * 3 + kx) as usize]
                                * p[ch * h * wd + (sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[ch * h * wd + y as usize * wd + xx as usize] = acc;
            }
        }
    }
    out
}

/// Dense re-derivation of phase attention on one image: returns (attention maps, projected output).
fn dense_pmsa(s: &ParamStore<f64>, x: &Tensor<f64>, cfg: &BlockConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * wd;
    let img = x.index0(0);
    let src = match cfg.attention {
        AttentionKind::Phase => pem(&img).unwrap(),
        AttentionKind::Plain => img.clone(),
    };
    let q = point_depth(src.data(), c, h, wd, &w(s, "q_point"), &w(s, "q_depth"));
    let k = point_depth(src.data(), c, h, wd, &w(s, "k_point"), &w(s, "k_depth"));
    let v = point_depth(img.data(), c, h, wd, &w(s, "v_point"), &w(s, "v_depth"));
    let alpha = w(s, "alpha");
    let d = c / cfg.heads;
    let mut maps = Vec::new();
    let mut out = vec![0.0; c * hw];
    for head in 0..cfg.heads {
        let base = head * d;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            let row: Vec<f64> = (0..d)
                .map(|j| {
                    (0..hw).map(|p| k[(base + i) * hw + p] * q[(base + j) * hw + p]).sum::<f64>() / alpha.data()[head]
                })
                .collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|r| (r - m).exp()).sum();
            for j in 0..d {
                a[i * d + j] = (row[j] - m).exp() / z;
            }
        }
        for j in 0..d {
            for p in 0..hw {
                out[(base + j) * hw + p] = (0..d).map(|i| a[i * d + j] * v[(base + i) * hw + p]).sum();
            }
        }
        maps.push(a);
    }
    let op = w(s, "out_point");
    let mut proj = vec![0.0; c * hw];
    for o in 0..c {
        for i in 0..c {
            for p in 0..hw {
                proj[o * hw + p] += op.data()[o * c + i] * out[i * hw + p];
            }
        }
    }
    (maps, proj)
}

fn run_pmsa(s: &ParamStore<f64>, x: &Tensor<f64>, cfg: &BlockConfig) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let b = s.bind(&mut tape, false);
    let p = PmsaParams::bind(&b, "b.attn").unwrap();
    let xv = tape.constant(x.clone());
    let o = pmsa_body(&mut tape, &p, xv, cfg).unwrap();
    (tape.value(o.attention).clone(), tape.value(o.projected).clone())
}

#[test]
fn pmsa_matches_dense_oracle() {
    for (attention, seed) in [(AttentionKind::Phase, 1), (AttentionKind::Plain, 2), (AttentionKind::Phase, 3)] {
        let cfg = BlockConfig {
            attention,
            ..BlockConfig::new(4, 2)
        };
        let s = store(&cfg, seed);
        let x = random_tensor(&[1, 4, 8, 8], -1.0, 1.0, seed + 10);
        let (att, proj) = run_pmsa(&s, &x, &cfg);
        let (maps, dense) = dense_pmsa(&s, &x, &cfg);
        assert_eq!(att.shape(), &[1, 2, 2, 2]);
        let flat: Vec<f64> = maps.concat();
        for (a, b) in att.data().iter().zip(&flat) {
            assert!((a - b).abs() < 1e-6, "attention {a} vs {b}");
        }
        for (a, b) in proj.data().iter().zip(&dense) {
            assert!((a - b).abs() < 1e-6, "output {a} vs {b}");
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = BlockConfig::new(8, 2);
    let s = store(&cfg, 4);
    let x = random_tensor(&[2, 8, 8, 8], -2.0, 2.0, 5);
    let (att, _) = run_pmsa(&s, &x, &cfg);
    for row in att.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn phase_attention_map_ignores_input_scale() {
    let cfg = BlockConfig::new(8, 2);
    let s = store(&cfg, 6);
    let x = random_tensor(&[1, 8, 16, 16], -1.0, 1.0, 7);
    let (a1, _) = run_pmsa(&s, &x, &cfg);
    let (a2, _) = run_pmsa(&s, &x.scale(2.5), &cfg);
    assert!(a1.max_abs_diff(&a2) < 1e-6);
}

#[test]
fn permuting_heads_permutes_output() {
    // swapping the two channel groups (and their weights) swaps the output groups
    let cfg = BlockConfig::new(4, 2);
    let s = store(&cfg, 8);
    let x = random_tensor(&[1, 4, 8, 8], -1.0, 1.0, 9);
    let perm = [2usize, 3, 0, 1];
    let permute_channels = |t: &Tensor<f64>| {
        let (c, plane) = (4, t.numel() / 4 / t.shape()[0]);
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let ch = (i / plane) % c;
            t.data()[i - ch * plane + perm[ch] * plane]
        })
    };
    let mut s2 = s.clone();
    for name in ["q_point", "k_point", "v_point", "out_point"] {
        let t = w(&s, name);
        let p = Tensor::from_fn(vec![4, 4, 1, 1], |i| t.data()[perm[i / 4] * 4 + perm[i % 4]]);
        s2.get_mut(&format!("b.attn.{name}")).unwrap().tensor = p;
    }
    for name in ["q_depth", "k_depth", "v_depth"] {
        let t = w(&s, name);
        let p = Tensor::from_fn(vec![4, 1, 3, 3], |i| t.data()[perm[i / 9] * 9 + i % 9]);
        s2.get_mut(&format!("b.attn.{name}")).unwrap().tensor = p;
    }
    let a = w(&s, "alpha");
    s2.get_mut("b.attn.alpha").unwrap().tensor = Tensor::new(vec![2], vec![a.data()[1], a.data()[0]]).unwrap();
    let (_, y) = run_pmsa(&s, &x, &cfg);
    let (_, y2) = run_pmsa(&s2, &permute_channels(&x), &cfg);
    assert!(permute_channels(&y).max_abs_diff(&y2) < 1e-10);
}

#[test]
fn indivisible_heads_are_config_errors() {
    let cfg = BlockConfig::new(6, 4);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

fn block_gradcheck(cfg: BlockConfig) {
    let specs = BlockParams::specs("b", &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = ParamStore::<f64>::init(&specs, &mut rng).unwrap();
    let names: Vec<String> = s.names().map(str::to_string).collect();
    let mut inputs = vec![random_tensor(&[1, 4, 8, 8], -1.0, 1.0, 12)];
    inputs.extend(s.iter().map(|p| p.tensor.clone()));
    let report = check_gradients(
        &inputs,
        |tape, vars| {
            let b = BoundParams::from_vars(names.iter().map(String::as_str).zip(vars[1..].iter().copied()));
            let p = BlockParams::bind(&b, "b")?;
            let y = pbtb(tape, &p, vars[0], &cfg)?;
            project(tape, y, 13)
        },
        &GradCheckOptions {
            samples: Some(150),
            seed: 14,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn block_gradients_pre_norm() {
    block_gradcheck(BlockConfig::new(4, 2));
}

#[test]
fn block_gradients_normalized_plain() {
    block_gradcheck(BlockConfig {
        residual: ResidualKind::Normalized,
        attention: AttentionKind::Plain,
        ..BlockConfig::new(4, 2)
    });
}

#[test]
fn block_preserves_shape() {
    let cfg = BlockConfig::new(8, 4);
    let s = store(&cfg, 1);
    let mut tape = Tape::new();
    let b = s.bind(&mut tape, false);
    let p = BlockParams::bind(&b, "b").unwrap();
    let x = tape.constant(random_tensor(&[2, 8, 4, 8], 0.0, 1.0, 2));
    let y = pbtb(&mut tape, &p, x, &cfg).unwrap();
    assert_eq!(tape.shape(y), &[2, 8, 4, 8]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_map_scale_invariant(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let cfg = BlockConfig::new(4, 2);
        let s = store(&cfg, seed);
        let x = random_tensor(&[1, 4, 8, 8], -1.0, 1.0, seed + 1);
        let (a1, _) = run_pmsa(&s, &x, &cfg);
        let (a2, _) = run_pmsa(&s, &x.scale(scale), &cfg);
        prop_assert!(a1.max_abs_diff(&a2) < 1e-6);
    }
}
