use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{finite_diff_check, finite_diff_check_params, worst};
use crate::params::VarStore;

fn toy_cfg(arrangement: Arrangement) -> DecoderConfig {
    DecoderConfig {
        arrangement,
        d_model: 16,
        vertex_count: 12,
        mamba: MambaConfig {
            state_dim: 4,
            ..MambaConfig::default()
        },
        ..DecoderConfig::default()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-scale..scale)).collect(), shape).unwrap()
}

/// Toy decoder with a random (non-zero) output head.
fn toy(arrangement: Arrangement, seed: u64) -> Decoder {
    let vs = VarStore::new(seed);
    let dec = Decoder::new(&vs.root().pp("decoder"), &toy_cfg(arrangement)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in dec.head.params() {
        p.set_data((0..p.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
    }
    dec
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn layer_stacks_match_figure_for_every_arrangement() {
    let m = "Mamba";
    let e = "MoE_Mamba";
    let t = "Transformer";
    let expected = [
        ("M-MoE", vec![m, e, m, t, e, m, e]),
        ("MoE-MoE", vec![e, m, e, t, e, m, e]),
        ("M-M", vec![m, e, m, t, m, e, m]),
        ("MoE-M", vec![e, m, e, t, m, e, m]),
    ];
    for (label, kinds) in expected {
        let a: Arrangement = label.parse().unwrap();
        assert_eq!(a.label(), label);
        let dec = toy(a, 1);
        assert_eq!(dec.layer_kinds(), kinds, "{label}");
        assert_eq!(dec.layers.len(), 7);
    }
}

#[test]
fn unknown_arrangement_and_reserved_fusion_are_config_errors() {
    assert!(matches!("M-X".parse::<Arrangement>(), Err(Error::Config(_))));
    let vs = VarStore::new(0);
    let cfg = DecoderConfig {
        fusion: Fusion::CrossAttention,
        ..toy_cfg(Arrangement::MM)
    };
    assert!(matches!(Decoder::new(&vs.root(), &cfg), Err(Error::Config(_))));
}

#[test]
fn arrangement_serde_uses_labels() {
    let s = serde_json::to_string(&Arrangement::MoeM).unwrap();
    assert_eq!(s, "\"MoE-M\"");
    let a: Arrangement = serde_json::from_str("\"M-MoE\"").unwrap();
    assert_eq!(a, Arrangement::MMoe);
}

#[test]
fn parameter_counts_differ_by_moe_substitution() {
    let d = 16;
    let (ne, hidden) = (4, 64);
    let expert = d * hidden + hidden + hidden * d + d;
    let per_moe_layer = d + d * ne + ne * expert;
    let counts: Vec<(usize, usize)> = Arrangement::ALL
        .iter()
        .map(|&a| {
            let dec = toy(a, 2);
            (dec.moe_layers().len(), dec.num_params())
        })
        .collect();
    let (base_moe, base_count) = counts[2];
    assert_eq!(base_moe, 2);
    assert_eq!(counts.iter().map(|c| c.0).collect::<Vec<_>>(), vec![3, 4, 2, 3]);
    for (n_moe, count) in counts {
        assert_eq!(count - base_count, (n_moe - base_moe) * per_moe_layer);
    }
}

#[test]
fn active_params_count_router_plus_k_experts() {
    let dec = toy(Arrangement::MoeMoe, 3);
    let moe = dec.moe_layers();
    let expert = moe[0].expert_params();
    assert_eq!(dec.num_params() - dec.active_params(), moe.len() * 2 * expert);
    for m in moe {
        assert_eq!(m.active_params(), m.router.numel() + 2 * expert);
    }
}

#[test]
fn periodic_encoding_repeats_with_period() {
    for t in [0, 3, 29, 31] {
        assert_eq!(periodic_encoding(t, 30, 16), periodic_encoding(t + 30, 30, 16));
    }
    let pe = periodic_encoding(0, 30, 4);
    assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0]);
    assert_ne!(periodic_encoding(1, 30, 16), periodic_encoding(2, 30, 16));
}

#[test]
fn embedding_composes_additively() {
    let dec = toy(Arrangement::MM, 4);
    let zero = Tensor::zeros(&[1, 3, 36]);
    dec.style.set_data(vec![0.0; 32]).unwrap();
    let e = dec.embed_motion(&zero, &[0], 5).unwrap();
    let ppe: Vec<f64> = (5..8).flat_map(|t| periodic_encoding(t, 30, 16)).collect();
    assert_eq!(e.to_vec(), ppe);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    dec.style.set_data((0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let motion = rand_tensor(&mut rng, &[1, 3, 36], 1.0);
    let a = dec.embed_motion(&motion, &[0], 0).unwrap();
    let b = dec.embed_motion(&motion, &[1], 0).unwrap();
    let sv = dec.style.to_vec();
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y - (sv[i % 16] - sv[16 + i % 16])).abs() < 1e-15);
    }
    assert!(matches!(dec.embed_motion(&motion, &[2], 0), Err(Error::Lookup(_))));
}

#[test]
fn ppe_toggle_removes_positional_term() {
    let vs = VarStore::new(6);
    let cfg = DecoderConfig {
        ppe: false,
        ..toy_cfg(Arrangement::MM)
    };
    let dec = Decoder::new(&vs.root(), &cfg).unwrap();
    dec.style.set_data(vec![0.0; 32]).unwrap();
    let e = dec.embed_motion(&Tensor::zeros(&[1, 2, 36]), &[0], 0).unwrap();
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn audio_fusion_is_additive_and_frame_local() {
    let dec = toy(Arrangement::MM, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens = rand_tensor(&mut rng, &[1, 4, 16], 1.0);
    let fused = dec.fuse_audio(&tokens, &Tensor::zeros(&[1, 4, 16])).unwrap();
    assert_eq!(fused.to_vec(), tokens.to_vec());

    let audio = rand_tensor(&mut rng, &[1, 4, 16], 1.0);
    let mut bumped = audio.to_vec();
    bumped[2 * 16 + 3] += 1.0;
    let a = dec.fuse_audio(&tokens, &audio).unwrap();
    let b = dec.fuse_audio(&tokens, &Tensor::new(bumped, &[1, 4, 16]).unwrap()).unwrap();
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert_eq!(x == y, i != 2 * 16 + 3);
    }
    let err = dec.fuse_audio(&tokens, &Tensor::zeros(&[1, 3, 16])).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn outputs_never_depend_on_later_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for a in Arrangement::ALL {
        let dec = toy(a, 10);
        let prev = rand_tensor(&mut rng, &[1, 8, 36], 0.5);
        let audio = rand_tensor(&mut rng, &[1, 8, 16], 0.5);
        let base = dec.forward(&prev, &audio, &[1]).unwrap();
        for t in [0, 3, 6] {
            let mut p2 = prev.to_vec();
            let mut a2 = audio.to_vec();
            for v in &mut p2[(t + 1) * 36..] {
                *v += 0.7;
            }
            for v in &mut a2[(t + 1) * 16..] {
                *v -= 0.9;
            }
            let out = dec
                .forward(&Tensor::new(p2, &[1, 8, 36]).unwrap(), &Tensor::new(a2, &[1, 8, 16]).unwrap(), &[1])
                .unwrap();
            assert_eq!(out.data()[..(t + 1) * 36], base.data()[..(t + 1) * 36], "{a} t={t}");
            assert_ne!(out.data()[(t + 1) * 36..], base.data()[(t + 1) * 36..]);
        }
    }
}

#[test]
fn generation_replays_under_teacher_forcing() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for a in Arrangement::ALL {
        let dec = toy(a, 12);
        let audio = rand_tensor(&mut rng, &[2, 7, 16], 0.5);
        let gen = dec.generate(&audio, &[0, 1], 7).unwrap();
        assert_eq!(gen.shape(), &[2, 7, 36]);
        let replay = dec.teacher_forced(&gen, &audio, &[0, 1]).unwrap();
        let err = max_diff(gen.data(), replay.data());
        assert!(err < 1e-8, "{a}: {err}");
    }
}

#[test]
fn first_frame_uses_zero_seed() {
    let dec = toy(Arrangement::MoeMoe, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let audio = rand_tensor(&mut rng, &[1, 3, 16], 0.5);
    let gen = dec.generate(&audio, &[0], 1).unwrap();
    let direct = dec
        .forward(&Tensor::zeros(&[1, 1, 36]), &audio.narrow(1, 0, 1).unwrap(), &[0])
        .unwrap();
    assert!(max_diff(gen.data(), direct.data()) < 1e-12);
}

#[test]
fn zero_weights_give_constant_bias_frames() {
    let dec = toy(Arrangement::MMoe, 15);
    for p in dec.params() {
        p.set_data(vec![0.0; p.numel()]).unwrap();
    }
    let bias: Vec<f64> = (0..36).map(|i| i as f64 * 0.1 - 1.0).collect();
    dec.head.bias.as_ref().unwrap().set_data(bias.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let audio = rand_tensor(&mut rng, &[1, 5, 16], 1.0);
    let gen = dec.generate(&audio, &[1], 5).unwrap();
    for frame in gen.data().chunks(36) {
        assert_eq!(frame, &bias[..]);
    }
}

#[test]
fn generation_is_deterministic_and_causal_in_audio() {
    let dec = toy(Arrangement::MoeM, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let audio = rand_tensor(&mut rng, &[1, 9, 16], 0.5);
    let a = dec.generate(&audio, &[0], 9).unwrap();
    let b = dec.generate(&audio, &[0], 9).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());

    let mut other = audio.to_vec();
    for v in &mut other[5 * 16..] {
        *v = rng.gen_range(-1.0..1.0);
    }
    let c = dec.generate(&Tensor::new(other, &[1, 9, 16]).unwrap(), &[0], 9).unwrap();
    assert_eq!(a.data()[..5 * 36], c.data()[..5 * 36]);
    assert_ne!(a.data()[5 * 36..], c.data()[5 * 36..]);
}

#[test]
fn generation_errors() {
    let dec = toy(Arrangement::MM, 19);
    let audio = Tensor::zeros(&[1, 3, 16]);
    assert!(matches!(dec.generate(&audio, &[0], 0), Err(Error::Contract(_))));
    assert!(matches!(dec.generate(&audio, &[0], 4), Err(Error::EndOfSequence)));
    assert!(matches!(dec.generate(&audio, &[5], 2), Err(Error::Lookup(_))));
    let mut s = dec.session(&audio, &[0]).unwrap();
    for _ in 0..3 {
        dec.decode_step(&mut s).unwrap();
    }
    assert_eq!(s.remaining(), 0);
    assert!(matches!(dec.decode_step(&mut s), Err(Error::EndOfSequence)));
}

#[test]
fn session_memory_split() {
    let dec = toy(Arrangement::MoeMoe, 20);
    let audio = Tensor::zeros(&[1, 6, 16]);
    let mut s = dec.session(&audio, &[0]).unwrap();
    let ssm0 = s.ssm_bytes();
    // 6 Mamba-family layers, each [1, 32, 4] state + [1, 3, 32] tail.
    assert_eq!(ssm0, 6 * (32 * 4 + 3 * 32) * 8);
    assert_eq!(s.kv_bytes(), 0);
    for t in 1..=6 {
        dec.decode_step(&mut s).unwrap();
        assert_eq!(s.ssm_bytes(), ssm0);
        // head_dim 4, 2 groups, keys and values, f64.
        assert_eq!(s.kv_bytes(), t * 4 * 2 * 2 * 8);
    }
}

#[test]
fn full_decoder_gradient_check() {
    let dec = toy(Arrangement::MoeMoe, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let gt = rand_tensor(&mut rng, &[1, 4, 36], 0.5);
    let audio = rand_tensor(&mut rng, &[1, 4, 16], 0.5);
    let loss = || -> Result<Tensor> {
        Ok(dec.teacher_forced(&gt, &audio, &[1])?.sub(&gt)?.square().mean_all())
    };
    let checks = finite_diff_check_params(loss, &dec.params(), Some(6), 0).unwrap();
    assert!(worst(&checks) < 1e-4, "{checks:?}");
    let ex = finite_diff_check(
        |a| Ok(dec.teacher_forced(&gt, a, &[1])?.sub(&gt)?.square().mean_all()),
        &audio,
    )
    .unwrap();
    assert!(ex < 1e-4);
}
