use proptest::prelude::*;

use super::*;
use crate::rng::{self, Stream};
use crate::tensor::{grad_check, GradCheckConfig, Probe};

fn t64(shape: &[usize], v: &[f64]) -> DiffTensor<f64> {
    DiffTensor::from_f64(shape, v).unwrap()
}

fn init_params(cfg: &MapperConfig, seed: u64) -> ParamSet<f64> {
    let mut r = rng::keyed(seed, Stream::Init, 0);
    let mut init = Init { rng: &mut r };
    let mut ps = ParamSet::new();
    cfg.init(&mut init, &mut ps);
    ps.cast()
}

/// Weights drawn at `std` so the block's nonlinearities are exercised.
fn loud_params(cfg: &MapperConfig, seed: u64, std: f64) -> ParamSet<f64> {
    let base = init_params(cfg, seed);
    let mut out = ParamSet::new();
    for (i, (name, t)) in base.iter().enumerate() {
        let v = rng::normal_vec(seed, Stream::Init, 1000 + i as u64, t.len());
        let v: Vec<f64> = v.iter().map(|x| x * std).collect();
        out.insert(name, DiffTensor::from_f64(t.shape(), &v).unwrap());
    }
    out
}

fn latents64(seed: u64, b: usize, d: usize) -> DiffTensor<f64> {
    let v: Vec<f64> = (0..b).flat_map(|i| rng::normal_vec(seed, Stream::Eval, i as u64, d)).collect();
    t64(&[b, d], &v)
}

fn rtm(h: usize, l: usize) -> Rtm {
    Rtm::new(RtmConfig::new(32, 8, 16, h, l)).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn pixel_norm_examples() {
    let tape = Tape::<f64>::inactive();
    let ones = pixel_norm(&tape, &t64(&[1, 5], &[1.0; 5])).unwrap();
    assert!(close(ones.values(), &[1.0; 5], 1e-8));
    let zero = pixel_norm(&tape, &t64(&[1, 3], &[0.0; 3])).unwrap();
    assert_eq!(zero.values(), &[0.0; 3]);
    let v = pixel_norm(&tape, &t64(&[1, 2], &[3.0, 4.0])).unwrap();
    assert!(close(v.values(), &[0.8485, 1.1314], 1e-4));
}

#[test]
fn projection_with_zero_weights_is_the_bias() {
    let m = rtm(2, 1);
    let cfg = MapperConfig::Rtm(m.cfg.clone());
    let mut p = init_params(&cfg, 0);
    let bias: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
    p.insert("mapper.proj.w", DiffTensor::zeros(&[32, 128]));
    p.insert("mapper.proj.b", t64(&[128], &bias));
    let tape = Tape::inactive();
    let z0 = m.project_to_tokens(&tape, &p, &latents64(1, 3, 32)).unwrap();
    assert_eq!(z0.shape(), &[3, 8, 16]);
    for b in 0..3 {
        assert_eq!(&z0.values()[b * 128..(b + 1) * 128], &bias[..]);
    }
}

#[test]
fn identity_projection_reshapes_z() {
    // d = s·d_h
    let m = Rtm::new(RtmConfig::new(8, 2, 4, 1, 1)).unwrap();
    let cfg = MapperConfig::Rtm(m.cfg.clone());
    let mut p = init_params(&cfg, 0);
    let eye: Vec<f64> = (0..64).map(|i| if i / 8 == i % 8 { 1.0 } else { 0.0 }).collect();
    p.insert("mapper.proj.w", t64(&[8, 8], &eye));
    let z = latents64(2, 2, 8);
    let z0 = m.project_to_tokens(&Tape::inactive(), &p, &z).unwrap();
    assert_eq!(z0.shape(), &[2, 2, 4]);
    assert_eq!(z0.values(), z.values());
}

#[test]
fn projection_matches_matmul_oracle() {
    let m = rtm(1, 1);
    let cfg = MapperConfig::Rtm(m.cfg.clone());
    let p = loud_params(&cfg, 3, 0.3);
    let z = latents64(4, 5, 32);
    let got = m.project_to_tokens(&Tape::inactive(), &p, &z).unwrap();
    let w = p.get("mapper.proj.w").unwrap().values();
    let bias = p.get("mapper.proj.b").unwrap().values();
    for b in 0..5 {
        for j in 0..128 {
            let mut acc = bias[j];
            for i in 0..32 {
                acc += z.values()[b * 32 + i] * w[i * 128 + j];
            }
            assert!((got.values()[b * 128 + j] - acc).abs() < 1e-12);
        }
    }
}

fn rms_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|r| {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let s = (ms + RMS_EPS).sqrt();
            r.iter().map(move |v| v / s).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn zero_block_weights_leave_the_normalised_residual() {
    let m = rtm(1, 1);
    let cfg = MapperConfig::Rtm(m.cfg.clone());
    let mut p = init_params(&cfg, 0);
    let names: Vec<String> = p.names().filter(|n| n.starts_with("mapper.block.")).map(String::from).collect();
    for n in names {
        let shape = p.get(&n).unwrap().shape().to_vec();
        p.insert(n, DiffTensor::zeros(&shape));
    }
    let z = latents64(5, 2, 128);
    let ctx = latents64(6, 2, 128);
    let zt = t64(&[2, 8, 16], z.values());
    let ct = t64(&[2, 8, 16], ctx.values());
    let out = m.shared_block(&Tape::inactive(), &p, &zt, &ct).unwrap();
    let u: Vec<f64> = zt.values().iter().zip(ct.values()).map(|(a, b)| a + b).collect();
    let expect = rms_rows(&rms_rows(&u, 16), 16);
    assert!(close(out.values(), &expect, 1e-12));
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `silu(x·G) ⊙ (x·U) · D` for one row.
fn gated(x: &[f64], g: &[f64], u: &[f64], d: &[f64], hidden: usize) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..hidden)
        .map(|j| {
            let a: f64 = (0..n).map(|i| x[i] * g[i * hidden + j]).sum();
            let b: f64 = (0..n).map(|i| x[i] * u[i * hidden + j]).sum();
            silu(a) * b
        })
        .collect();
    (0..n).map(|o| (0..hidden).map(|j| h[j] * d[j * n + o]).sum()).collect()
}

#[test]
fn token_mixer_matches_straight_line_reference() {
    let (s, dh) = (8, 16);
    let m = rtm(1, 1);
    let cfg = MapperConfig::Rtm(m.cfg.clone());
    let p = loud_params(&cfg, 7, 0.4);
    let w = |n: &str| p.get(&format!("mapper.block.{n}")).unwrap().values().to_vec();
    let z = latents64(8, 1, s * dh);
    let ctx = latents64(9, 1, s * dh);
    let got = m
        .shared_block(
            &Tape::inactive(),
            &p,
            &t64(&[1, s, dh], z.values()),
            &t64(&[1, s, dh], ctx.values()),
        )
        .unwrap();

    let u: Vec<f64> = z.values().iter().zip(ctx.values()).map(|(a, b)| a + b).collect();
    // token mixing acts on each channel's column of s values
    let mut mixed = vec![0.0; s * dh];
    for c in 0..dh {
        let col: Vec<f64> = (0..s).map(|t| u[t * dh + c]).collect();
        let y = gated(&col, &w("tok.gate"), &w("tok.up"), &w("tok.down"), 2 * s);
        for t in 0..s {
            mixed[t * dh + c] = y[t];
        }
    }
    let a = rms_rows(&u.iter().zip(&mixed).map(|(x, y)| x + y).collect::<Vec<_>>(), dh);
    let mut out = Vec::new();
    for t in 0..s {
        let row = &a[t * dh..(t + 1) * dh];
        let y = gated(row, &w("ch.gate"), &w("ch.up"), &w("ch.down"), 2 * dh);
        out.extend(row.iter().zip(&y).map(|(x, y)| x + y));
    }
    let expect = rms_rows(&out, dh);
    assert!(close(got.values(), &expect, 1e-10));
}

#[test]
fn block_eval_examples() {
    assert_eq!(RtmConfig::new(32, 8, 16, 16, 1).block_evals(16), 32);
    assert_eq!(RtmConfig::new(32, 8, 16, 8, 2).block_evals(8), 24);
    let tape = Tape::<f32>::inactive();
    for (h, l) in [(1, 1), (3, 2), (4, 4)] {
        let cfg = MapperConfig::Rtm(RtmConfig::new(32, 8, 16, h, l));
        let p = init_params(&cfg, 0).cast::<f32>();
        let z = latents64(0, 2, 32).cast::<f32>();
        let out = cfg.forward(&tape, &p, &z, None, GradScope::Inference).unwrap();
        assert_eq!(out.block_evals, h * (l + 1));
        assert_eq!(out.w.shape(), &[2, 32]);
    }
}

#[test]
fn parameter_count_examples() {
    let a = RtmConfig::new(32, 8, 16, 16, 1).parameter_count();
    let b = RtmConfig::new(32, 8, 16, 8, 2).parameter_count();
    assert_eq!(a, b);
    for kind in [BlockKind::TokenMixer, BlockKind::SelfAttention] {
        let mut c = RtmConfig::new(32, 8, 16, 4, 2);
        c.block = kind;
        let cfg = MapperConfig::Rtm(c);
        assert_eq!(init_params(&cfg, 0).num_scalars(), cfg.parameter_count());
    }
    let mlp = MapperConfig::Mlp(MlpConfig::new(32, 5));
    assert_eq!(init_params(&mlp, 0).num_scalars(), mlp.parameter_count());
    let ratio = MlpConfig::new(32, 32).parameter_count() as f64 / MlpConfig::new(32, 2).parameter_count() as f64;
    assert!((ratio - 16.0).abs() < 1e-9, "{ratio}");
}

#[test]
fn identity_block_reads_out_the_carry() {
    let m = rtm(3, 2);
    let cfg = MapperConfig::Rtm(m.cfg.clone());
    let mut p = loud_params(&cfg, 11, 0.2);
    let carry: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin()).collect();
    p.insert("mapper.carry.h", t64(&[8, 16], &carry));
    let tape = Tape::inactive();
    let z = latents64(12, 4, 32);
    let out = m
        .forward_with(&tape, &p, &z, None, GradScope::Inference, |_, a, _| Ok(a.clone()))
        .unwrap();
    let zh = tape.repeat(p.get("mapper.carry.h").unwrap(), 1).unwrap();
    let expect = m.readout(&tape, &p, &zh).unwrap();
    for b in 0..4 {
        assert_eq!(&out.w.values()[b * 32..(b + 1) * 32], expect.values());
    }
    assert_eq!(out.block_evals, 9);
}

#[test]
fn short_gradient_scope_is_exact() {
    for (h, l) in [(2, 1), (3, 2)] {
        let m = rtm(h, l);
        let p = loud_params(&MapperConfig::Rtm(m.cfg.clone()), 13, 0.2);
        let report = gradient_scope_check(&m, &p, &latents64(14, 3, 32)).unwrap();
        assert!(report.passed(), "H={h} L={l}: {report:?}");
        let p32 = p.cast::<f32>();
        let report = gradient_scope_check(&m, &p32, &latents64(14, 3, 32).cast()).unwrap();
        assert!(report.passed(), "f32 H={h} L={l}: {report:?}");
    }
    assert!(gradient_scope_check(&rtm(1, 1), &init_params(&MapperConfig::Rtm(rtm(1, 1).cfg), 0), &latents64(0, 1, 32)).is_err());
}

fn grads_under(m: &Rtm, p: &ParamSet<f64>, z: &DiffTensor<f64>, scope: GradScope) -> ParamSet<f64> {
    let tape = Tape::new();
    let lp = p.on_tape(&tape);
    let out = m.forward(&tape, &lp, z, None, scope).unwrap();
    let loss = tape.sum(&tape.mul(&out.w, &out.w).unwrap()).unwrap();
    let g = tape.backward(&loss).unwrap();
    let mut set = ParamSet::new();
    for (name, leaf) in lp.iter() {
        set.insert(name, g.wrt_or_zero(leaf));
    }
    set
}

#[test]
fn single_step_short_gradient_is_the_full_gradient() {
    let m = rtm(1, 2);
    let p = loud_params(&MapperConfig::Rtm(m.cfg.clone()), 15, 0.2);
    let z = latents64(16, 2, 32);
    let a = grads_under(&m, &p, &z, GradScope::ShortGradient);
    let b = grads_under(&m, &p, &z, GradScope::FullGraph);
    assert!(a.bit_eq(&b));
}

#[test]
fn carries_get_no_gradient_through_detached_steps() {
    let m = rtm(3, 1);
    let p = loud_params(&MapperConfig::Rtm(m.cfg.clone()), 17, 0.2);
    let z = latents64(18, 2, 32);
    let short = grads_under(&m, &p, &z, GradScope::ShortGradient);
    for name in ["mapper.carry.l", "mapper.carry.h"] {
        assert!(short.get(name).unwrap().values().iter().all(|&v| v == 0.0), "{name}");
    }
    let full = grads_under(&m, &p, &z, GradScope::FullGraph);
    assert!(full.get("mapper.carry.l").unwrap().values().iter().any(|&v| v != 0.0));
}

#[test]
fn short_gradient_tape_length_is_independent_of_h() {
    let mut lens = Vec::new();
    for h in [2, 5, 9] {
        let m = rtm(h, 2);
        let p = init_params(&MapperConfig::Rtm(m.cfg.clone()), 0);
        let tape = Tape::new();
        let lp = p.on_tape(&tape);
        m.forward(&tape, &lp, &latents64(0, 2, 32), None, GradScope::ShortGradient).unwrap();
        lens.push(tape.len());
    }
    assert!(lens.windows(2).all(|w| w[0] == w[1]), "{lens:?}");
}

#[test]
fn inference_override_at_trained_h_is_identity() {
    let m = rtm(4, 2);
    let p = loud_params(&MapperConfig::Rtm(m.cfg.clone()), 19, 0.2).cast::<f32>();
    let z = latents64(20, 3, 32).cast::<f32>();
    let tape = Tape::inactive();
    let a = m.forward(&tape, &p, &z, None, GradScope::Inference).unwrap();
    let b = m.forward(&tape, &p, &z, Some(4), GradScope::Inference).unwrap();
    let t = Tape::new();
    let c = m.forward(&t, &p.on_tape(&t), &z, None, GradScope::ShortGradient).unwrap();
    assert_eq!(a.w.values(), b.w.values());
    assert_eq!(a.w.values(), c.w.values());
    assert!(m.forward(&tape, &p, &z, Some(0), GradScope::Inference).is_err());
}

#[test]
fn non_finite_state_names_the_step() {
    let m = rtm(3, 1);
    let mut p = init_params(&MapperConfig::Rtm(m.cfg.clone()), 0);
    p.insert("mapper.carry.h", DiffTensor::full(&[8, 16], f64::NAN));
    let err = m
        .forward(&Tape::inactive(), &p, &latents64(0, 1, 32), None, GradScope::Inference)
        .unwrap_err();
    assert_eq!(
        err,
        ModelError::NonFinite {
            stage: "refinement",
            step: 1
        }
    );
}

#[test]
fn mlp_depth_one_identity_is_pixel_norm() {
    let cfg = MlpConfig::new(4, 1);
    let mut p = ParamSet::<f64>::new();
    let eye: Vec<f64> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
    p.insert("mapper.fc0.w", t64(&[4, 4], &eye));
    p.insert("mapper.fc0.b", DiffTensor::zeros(&[4]));
    let z = t64(&[1, 4], &[0.5, 1.0, 2.0, 3.0]);
    let tape = Tape::inactive();
    let w = cfg.forward(&tape, &p, &z).unwrap();
    assert_eq!(w.values(), pixel_norm(&tape, &z).unwrap().values());
}

#[test]
fn mlp_matches_matmul_chain_oracle() {
    let cfg = MlpConfig {
        d: 6,
        depth: 3,
        width: Some(5),
    };
    let p = loud_params(&MapperConfig::Mlp(cfg.clone()), 23, 0.6);
    let z = latents64(24, 4, 6);
    let got = cfg.forward(&Tape::inactive(), &p, &z).unwrap();
    for b in 0..4 {
        let row = &z.values()[b * 6..(b + 1) * 6];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / 6.0;
        let mut x: Vec<f64> = row.iter().map(|v| v / (ms + PIXEL_NORM_EPS).sqrt()).collect();
        for (i, (fi, fo)) in cfg.layer_dims().into_iter().enumerate() {
            let w = p.get(&format!("mapper.fc{i}.w")).unwrap().values();
            let bias = p.get(&format!("mapper.fc{i}.b")).unwrap().values();
            x = (0..fo)
                .map(|o| {
                    let v = bias[o] + (0..fi).map(|j| x[j] * w[j * fo + o]).sum::<f64>();
                    if v > 0.0 {
                        v
                    } else {
                        LRELU_SLOPE * v
                    }
                })
                .collect();
        }
        assert!(close(&got.values()[b * 6..(b + 1) * 6], &x, 1e-12));
    }
}

#[test]
fn rtm_gradients_match_finite_differences() {
    for kind in [BlockKind::TokenMixer, BlockKind::SelfAttention] {
        let mut c = RtmConfig::new(6, 3, 4, 2, 2);
        c.block = kind;
        let m = Rtm::new(c).unwrap();
        let p = loud_params(&MapperConfig::Rtm(m.cfg.clone()), 25, 0.3);
        let names: Vec<String> = p.names().map(String::from).collect();
        let point: Vec<DiffTensor<f64>> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let z = latents64(26, 2, 6);
        let f = |tape: &Tape<f64>, xs: &[DiffTensor<f64>]| -> Result<DiffTensor<f64>, ModelError> {
            let mut ps = ParamSet::new();
            for (n, x) in names.iter().zip(xs) {
                ps.insert(n.clone(), x.clone());
            }
            let out = m.forward(tape, &ps, &z, None, GradScope::FullGraph)?;
            Ok(tape.sum(&tape.mul(&out.w, &out.w)?)?)
        };
        let report = grad_check(
            f,
            &point,
            &Probe::All,
            &GradCheckConfig {
                step: 1e-6,
                tol: 1e-3,
                abs_floor: 1e-6,
            },
        );
        assert!(report.passed(), "{kind:?}: {:?}", &report.failures[..report.failures.len().min(3)]);
    }
}

#[test]
fn config_validation_names_fields() {
    let bad = |c: RtmConfig| match c.validate() {
        Err(ModelError::Config { field, .. }) => field,
        other => panic!("{other:?}"),
    };
    assert_eq!(bad(RtmConfig::new(32, 8, 16, 0, 1)), "H");
    assert_eq!(bad(RtmConfig::new(32, 8, 16, 1, 0)), "L");
    assert_eq!(bad(RtmConfig::new(0, 8, 16, 1, 1)), "d");
    let mut c = RtmConfig::new(32, 8, 16, 1, 1);
    c.block = BlockKind::SelfAttention;
    c.heads = 3;
    assert_eq!(bad(c), "heads");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_preserve_shape_and_stay_finite(
        seed in 0u64..1000,
        attention in any::<bool>(),
        scale in 0.1f64..10.0,
        b in 1usize..4,
    ) {
        let mut c = RtmConfig::new(8, 4, 6, 1, 1);
        if attention {
            c.block = BlockKind::SelfAttention;
        }
        let m = Rtm::new(c).unwrap();
        let p = loud_params(&MapperConfig::Rtm(m.cfg.clone()), seed, 0.5);
        let clamp = |t: DiffTensor<f64>| {
            let v: Vec<f64> = t.values().iter().map(|x| (x * scale).clamp(-10.0, 10.0)).collect();
            t64(&[b, 4, 6], &v)
        };
        let z = clamp(latents64(seed, b, 24));
        let ctx = clamp(latents64(seed + 1, b, 24));
        let out = m.shared_block(&Tape::inactive(), &p, &z, &ctx).unwrap();
        prop_assert_eq!(out.shape(), &[b, 4, 6]);
        prop_assert!(out.all_finite());
    }

    #[test]
    fn parameter_count_is_schedule_invariant(h in 1usize..=64, l in 1usize..=4) {
        prop_assert_eq!(
            RtmConfig::new(32, 8, 16, h, l).parameter_count(),
            RtmConfig::new(32, 8, 16, 1, 1).parameter_count()
        );
    }
}
