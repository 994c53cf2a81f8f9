use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{finite_diff_check, finite_diff_check_params, worst};
use crate::params::VarStore;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(rand_vec(rng, shape.iter().product()), shape).unwrap()
}

fn cfg(heads: usize, groups: usize) -> AttentionConfig {
    AttentionConfig {
        n_query_heads: heads,
        n_kv_groups: groups,
        ..AttentionConfig::default()
    }
}

fn block(d: usize, heads: usize, groups: usize, seed: u64) -> TransformerBlock {
    let vs = VarStore::new(seed);
    let b = TransformerBlock::new(&vs.root(), d, &cfg(heads, groups)).unwrap();
    // Non-trivial norm gains and biases so the oracle sees every parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in [&b.attn_norm.weight, &b.ffn_norm.weight] {
        p.set_data((0..d).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    }
    for p in [b.ffn.up.bias.as_ref().unwrap(), b.ffn.down.bias.as_ref().unwrap()] {
        p.set_data(rand_vec(&mut rng, p.numel())).unwrap();
    }
    b
}

/// `x[rows, n] @ w[n, m]` with plain loops.
fn mm(x: &[f64], w: &[f64], n: usize, m: usize) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|row| (0..m).map(move |j| (0..n).map(|i| row[i] * w[i * m + j]).sum::<f64>()))
        .collect()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.chunks(g.len())
        .flat_map(|row| {
            let s = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + crate::nn::RMS_EPS).sqrt();
            row.iter().zip(g).map(move |(v, w)| v / s * w)
        })
        .collect()
}

fn rotate(v: &mut [f64], pos: usize, base: f64) {
    let hd = v.len();
    for i in 0..hd / 2 {
        let th = base.powf(-2.0 * i as f64 / hd as f64);
        let ang = pos as f64 * th;
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * ang.cos() - b * ang.sin();
        v[2 * i + 1] = a * ang.sin() + b * ang.cos();
    }
}

/// Scalar-loop reference for one batch element `[T, d]`.
fn oracle(blk: &TransformerBlock, x: &[f64], t: usize) -> Vec<f64> {
    let d = blk.d_model;
    let (nh, ng, hd) = (blk.cfg.n_query_heads, blk.cfg.n_kv_groups, blk.head_dim());
    let xn = rms(x, &blk.attn_norm.weight.to_vec());
    let q = mm(&xn, &blk.wq.weight.to_vec(), d, nh * hd);
    let k = mm(&xn, &blk.wk.weight.to_vec(), d, ng * hd);
    let v = mm(&xn, &blk.wv.weight.to_vec(), d, ng * hd);
    let mut cat = vec![0.0; t * nh * hd];
    for h in 0..nh {
        let g = h / (nh / ng);
        for i in 0..t {
            let mut qi = q[i * nh * hd + h * hd..][..hd].to_vec();
            rotate(&mut qi, i, blk.cfg.rope_base);
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    let mut kj = k[j * ng * hd + g * hd..][..hd].to_vec();
                    rotate(&mut kj, j, blk.cfg.rope_base);
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, w) in e.iter().enumerate() {
                for c in 0..hd {
                    cat[i * nh * hd + h * hd + c] += w / z * v[j * ng * hd + g * hd + c];
                }
            }
        }
    }
    let o = mm(&cat, &blk.wo.weight.to_vec(), nh * hd, d);
    let h1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let hn = rms(&h1, &blk.ffn_norm.weight.to_vec());
    let hid = blk.ffn.up.d_out();
    let ub = blk.ffn.up.bias.as_ref().unwrap().to_vec();
    let db = blk.ffn.down.bias.as_ref().unwrap().to_vec();
    let u: Vec<f64> = mm(&hn, &blk.ffn.up.weight.to_vec(), d, hid)
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let z = v + ub[i % hid];
            z / (1.0 + (-z).exp())
        })
        .collect();
    let f = mm(&u, &blk.ffn.down.weight.to_vec(), hid, d);
    h1.iter().zip(&f).enumerate().map(|(i, (a, b))| a + b + db[i % d]).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn thetas_follow_geometric_schedule() {
    let th = rope_thetas(8, 10000.0).unwrap();
    assert_eq!(th.len(), 4);
    assert_eq!(th[0], 1.0);
    assert!((th[1] - 0.1).abs() < 1e-15);
    assert!((th[3] - 1e-3).abs() < 1e-15);
    assert!(matches!(rope_thetas(7, 10000.0), Err(Error::Config(_))));
}

#[test]
fn rope_at_origin_is_identity_and_preserves_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let th = rope_thetas(16, 10000.0).unwrap();
    let x = rand_tensor(&mut rng, &[3, 16]);
    assert_eq!(rope_rotate(&x, 0, &th).unwrap().to_vec(), x.to_vec());
    for m in [1, 7, 1000] {
        let r = rope_rotate(&x, m, &th).unwrap();
        for (a, b) in x.data().chunks(16).zip(r.data().chunks(16)) {
            let na: f64 = a.iter().map(|v| v * v).sum();
            let nb: f64 = b.iter().map(|v| v * v).sum();
            assert!((na - nb).abs() < 1e-12);
        }
    }
}

#[test]
fn rope_single_pair_rotation() {
    let th = rope_thetas(2, 10000.0).unwrap();
    let x = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
    let r = rope_rotate(&x, 1, &th).unwrap();
    assert!((r.data()[0] - 1f64.cos()).abs() < 1e-15);
    assert!((r.data()[1] - 1f64.sin()).abs() < 1e-15);
}

#[test]
fn rope_relative_property_holds_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let th = rope_thetas(16, 10000.0).unwrap();
    for _ in 0..100 {
        let q = rand_vec(&mut rng, 16);
        let k = rand_vec(&mut rng, 16);
        let (m, n, s) = (rng.gen_range(0..512), rng.gen_range(0..512), rng.gen_range(0..512));
        assert!(rope_relative_property_check(&q, &k, m, n, s, &th).unwrap());
    }
}

#[test]
fn rope_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let th = rope_thetas(4, 100.0).unwrap();
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[2, 3, 4]);
    let err = finite_diff_check(|t| Ok(rope_sequence(t, 5, &th)?.mul(&w)?.sum_all()), &x).unwrap();
    assert!(err < 1e-6);
}

#[test]
fn matches_scalar_oracle_for_gqa_mha_and_mqa() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (heads, groups) in [(4, 2), (4, 4), (4, 1), (2, 1)] {
        let blk = block(16, heads, groups, 10 + heads as u64 * 7 + groups as u64);
        let x = rand_tensor(&mut rng, &[2, 6, 16]);
        let y = blk.forward(&x).unwrap();
        for b in 0..2 {
            let xb = &x.data()[b * 96..(b + 1) * 96];
            let err = max_diff(&y.data()[b * 96..(b + 1) * 96], &oracle(&blk, xb, 6));
            assert!(err < 1e-12, "H={heads} G={groups}: {err}");
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let vs = VarStore::new(0);
    assert!(matches!(TransformerBlock::new(&vs.root(), 16, &cfg(4, 3)), Err(Error::Config(_))));
    assert!(matches!(TransformerBlock::new(&vs.root(), 15, &cfg(5, 1)), Err(Error::Config(_))));
    assert!(matches!(TransformerBlock::new(&vs.root(), 18, &cfg(3, 1)), Ok(_)));
    assert!(matches!(TransformerBlock::new(&vs.root(), 12, &cfg(4, 1)), Err(Error::Config(_))));
}

#[test]
fn single_position_attends_only_to_itself() {
    let blk = block(8, 2, 1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[1, 1, 8]);
    let p = blk.attention_probs(&x).unwrap();
    assert!(p.data().iter().all(|&v| v == 1.0));
    let err = max_diff(blk.forward(&x).unwrap().data(), &oracle(&blk, x.data(), 1));
    assert!(err < 1e-12);
}

#[test]
fn attention_rows_are_causal_distributions() {
    let blk = block(8, 4, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 5, 8]);
    let p = blk.attention_probs(&x).unwrap();
    for row in p.data().chunks(5).enumerate().map(|(i, r)| (i % 5, r)) {
        let (t, r) = row;
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r[t + 1..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn future_positions_do_not_affect_the_past() {
    let blk = block(8, 4, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[1, 6, 8]);
    let mut changed = x.to_vec();
    for v in &mut changed[4 * 8..] {
        *v += 3.0;
    }
    let a = blk.forward(&x).unwrap();
    let b = blk.forward(&Tensor::new(changed, &[1, 6, 8]).unwrap()).unwrap();
    assert_eq!(a.data()[..32], b.data()[..32]);
}

#[test]
fn kv_cache_replay_matches_full_forward() {
    let blk = block(16, 4, 2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[2, 9, 16]);
    let full = blk.forward(&x).unwrap();
    let mut cache = blk.new_cache(2);
    let mut outs = Vec::new();
    for t in 0..9 {
        let xt = x.narrow(1, t, 1).unwrap();
        outs.push(blk.forward_cached(&xt, Some(&mut cache)).unwrap());
    }
    let inc = Tensor::concat(&outs, 1).unwrap();
    assert!(max_diff(full.data(), inc.data()) < 1e-10);
    assert_eq!(cache.len(), 9);
    assert_eq!(cache.bytes(), 2 * 2 * 2 * 9 * 4 * 8);

    // A prefix chunk followed by single steps gives the same result.
    let mut cache = blk.new_cache(2);
    let head = blk.forward_cached(&x.narrow(1, 0, 4).unwrap(), Some(&mut cache)).unwrap();
    let tail = blk.forward_cached(&x.narrow(1, 4, 5).unwrap(), Some(&mut cache)).unwrap();
    let inc = Tensor::concat(&[head, tail], 1).unwrap();
    assert!(max_diff(full.data(), inc.data()) < 1e-10);
}

#[test]
fn kv_cache_overflow_is_an_error() {
    let vs = VarStore::new(0);
    let c = AttentionConfig {
        max_positions: 3,
        ..cfg(2, 1)
    };
    let blk = TransformerBlock::new(&vs.root(), 8, &c).unwrap();
    let mut cache = blk.new_cache(1);
    let x = Tensor::zeros(&[1, 3, 8]);
    blk.forward_cached(&x, Some(&mut cache)).unwrap();
    let err = blk.forward_cached(&Tensor::zeros(&[1, 1, 8]), Some(&mut cache)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn kv_parameters_scale_with_group_count() {
    let vs = VarStore::new(0);
    let mha = TransformerBlock::new(&vs.root().pp("a"), 64, &cfg(4, 4)).unwrap();
    let gqa = TransformerBlock::new(&vs.root().pp("b"), 64, &cfg(4, 2)).unwrap();
    let mqa = TransformerBlock::new(&vs.root().pp("c"), 64, &cfg(4, 1)).unwrap();
    assert_eq!(gqa.kv_params() * 2, mha.kv_params());
    assert_eq!(mqa.kv_params() * 4, mha.kv_params());
}

#[test]
fn pooling_averages_contiguous_heads() {
    let heads = Tensor::new((0..12).map(f64::from).collect(), &[4, 3]).unwrap();
    let g = mha_to_gqa_pool(&heads, 2).unwrap();
    assert_eq!(g.shape(), &[2, 3]);
    assert_eq!(g.to_vec(), vec![1.5, 2.5, 3.5, 7.5, 8.5, 9.5]);
    assert_eq!(mha_to_gqa_pool(&heads, 4).unwrap().to_vec(), heads.to_vec());
    assert!(mha_to_gqa_pool(&heads, 3).is_err());
}

#[test]
fn pooled_projection_reproduces_identical_heads() {
    // When heads inside a group are identical, pooling leaves them unchanged,
    // so the grouped block computes the same function as the original.
    let vs = VarStore::new(13);
    let mha = TransformerBlock::new(&vs.root().pp("m"), 8, &cfg(4, 4)).unwrap();
    let gqa = TransformerBlock::new(&vs.root().pp("g"), 8, &cfg(4, 2)).unwrap();
    let hd = 2;
    for (lin_m, lin_g) in [(&mha.wk, &gqa.wk), (&mha.wv, &gqa.wv)] {
        let w = lin_m.weight.to_vec();
        let mut tied = w.clone();
        for r in 0..8 {
            for h in [1, 3] {
                for c in 0..hd {
                    tied[r * 8 + h * hd + c] = w[r * 8 + (h - 1) * hd + c];
                }
            }
        }
        lin_m.weight.set_data(tied.clone()).unwrap();
        let pooled = pool_kv_projection(&Tensor::new(tied, &[8, 8]).unwrap(), 4, 2).unwrap();
        lin_g.weight.set_data(pooled.to_vec()).unwrap();
    }
    for (a, b) in mha.params().iter().zip(gqa.params()) {
        if !a.name().contains(".wk.") && !a.name().contains(".wv.") {
            b.set_data(a.to_vec()).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[1, 5, 8]);
    let err = max_diff(mha.forward(&x).unwrap().data(), gqa.forward(&x).unwrap().data());
    assert!(err < 1e-12);
}

#[test]
fn rope_can_be_disabled() {
    let vs = VarStore::new(15);
    let c = AttentionConfig {
        rope: false,
        ..cfg(2, 1)
    };
    let blk = TransformerBlock::new(&vs.root(), 8, &c).unwrap();
    // Without positions, identical tokens produce identical outputs.
    let x = Tensor::new([0.3, -0.2, 0.5, 0.1, 0.0, 0.9, -0.4, 0.2].repeat(3), &[1, 3, 8]).unwrap();
    let y = blk.forward(&x).unwrap();
    assert!(max_diff(&y.data()[..8], &y.data()[16..]) < 1e-12);
}

#[test]
fn block_gradient_check() {
    let blk = block(8, 4, 2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[1, 4, 8]);
    let w = rand_tensor(&mut rng, &[1, 4, 8]);
    let loss = || -> Result<Tensor> { Ok(blk.forward(&x)?.mul(&w)?.sum_all()) };
    let checks = finite_diff_check_params(loss, &blk.params(), Some(24), 0).unwrap();
    assert!(worst(&checks) < 1e-4, "{checks:?}");
    let ex = finite_diff_check(|t| Ok(blk.forward(t)?.mul(&w)?.sum_all()), &x).unwrap();
    assert!(ex < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rope_inner_products_depend_only_on_offset(
        seed in any::<u64>(), m in 0usize..2048, n in 0usize..2048, s in 0usize..2048,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let th = rope_thetas(16, 10000.0).unwrap();
        let q = rand_vec(&mut rng, 16);
        let k = rand_vec(&mut rng, 16);
        prop_assert!(rope_relative_property_check(&q, &k, m, n, s, &th).unwrap());
    }
}
