use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::finite_diff_check;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(&(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(), shape)
}

#[test]
fn matmul_identity_and_basis() {
    let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    assert_eq!(eye.matmul(&m).unwrap().data(), m.data());

    let row = t(&[1.0, 0.0], &[1, 2]);
    let col = t(&[0.0, 5.0], &[2, 1]);
    let out = row.matmul(&col).unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let c = a.matmul(&b).unwrap();
    let oracle = matmul_naive(a.data(), b.data(), 3, 4, 2);
    for (x, y) in c.data().iter().zip(&oracle) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_broadcasts_batch_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, &[2, 3, 4, 5]);
    let b = random(&mut rng, &[5, 2]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 3, 4, 2]);
    for bi in 0..6 {
        let want = matmul_naive(&a.data()[bi * 20..(bi + 1) * 20], b.data(), 4, 5, 2);
        assert_eq!(&c.data()[bi * 8..(bi + 1) * 8], want.as_slice());
    }
}

#[test]
fn softmax_examples() {
    let s = t(&[0.0, 0.0, 0.0], &[3]).softmax(-1).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = t(&[2.0, 0.0], &[2]).softmax(-1).unwrap();
    let e2 = 2f64.exp();
    assert!((s.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
    assert!((s.data()[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
    let s = t(&[1000.0, 0.0], &[2]).softmax(-1).unwrap();
    assert!(s.data().iter().all(|v| v.is_finite()));
    assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
}

#[test]
fn softmax_rejects_nan() {
    let r = t(&[f64::NAN, 0.0], &[2]).softmax(-1);
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn softmax_along_inner_axis() {
    let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
    let s = x.softmax(0).unwrap();
    for col in 0..2 {
        let sum: f64 = (0..3).map(|r| s.data()[r * 2 + col]).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_basic_rules() {
    let x = Tensor::leaf(vec![1.0, -2.0, 3.0, 0.5], &[2, 2]).unwrap();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);

    let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
    x.mul(&x).unwrap().sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(x.scale(2.0).backward(), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_across_shared_uses() {
    let x = Tensor::leaf(vec![3.0], &[1]).unwrap();
    let y = x.mul(&x).unwrap().add(&x.scale(4.0)).unwrap();
    y.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![10.0]);
}

#[test]
fn no_grad_skips_graph() {
    let x = Tensor::leaf(vec![1.0], &[1]).unwrap();
    let y = no_grad(|| x.scale(2.0));
    assert!(!y.requires_grad());
    assert!(x.scale(2.0).requires_grad());
}

#[test]
fn broadcast_follows_trailing_axes() {
    assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
    assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
    assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    let b = t(&[10.0, 20.0, 30.0], &[3]);
    assert_eq!(a.add(&b).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let c = t(&[1.0, 2.0], &[2, 1]);
    assert_eq!(a.mul(&c).unwrap().data(), &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);
}

#[test]
fn shape_ops_round_trip() {
    let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4]);
    let tr = x.transpose(0, 2);
    assert_eq!(tr.shape(), &[4, 3, 2]);
    assert_eq!(tr.data()[1], 12.0);
    assert_eq!(tr.transpose(0, 2).data(), x.data());
    let n = x.narrow(1, 1, 2).unwrap();
    assert_eq!(n.shape(), &[2, 2, 4]);
    assert_eq!(n.data()[0], 4.0);
    let c = Tensor::concat(&[x.narrow(1, 0, 1).unwrap(), n], 1).unwrap();
    assert_eq!(c.data(), x.data());
    let rows = x.reshape(&[6, 4]).unwrap().index_select(&[5, 0]).unwrap();
    assert_eq!(&rows.data()[..4], &[20.0, 21.0, 22.0, 23.0]);
    let back = rows.scatter_rows(&[5, 0], 6).unwrap();
    assert_eq!(&back.data()[20..24], &[20.0, 21.0, 22.0, 23.0]);
    assert!(back.data()[4..20].iter().all(|&v| v == 0.0));
}

// Each registered differentiable op, checked at 10 random points.
#[test]
fn every_op_passes_finite_differences() {
    type OpFn = Box<dyn Fn(&Tensor) -> Result<Tensor>>;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let other = random(&mut rng, &[3, 4]);
    let row = random(&mut rng, &[4]);
    let positive_row = t(&[1.5, 0.7, 2.2, 1.1], &[4]);
    let rhs = random(&mut rng, &[4, 2]);
    let cases: Vec<(&str, OpFn)> = vec![
        ("add", Box::new(move |x| Ok(x.add(&row)?.square().sum_all()))),
        ("sub", Box::new({
            let o = other.clone();
            move |x| Ok(o.sub(x)?.square().sum_all())
        })),
        ("mul", Box::new({
            let o = other.clone();
            move |x| Ok(x.mul(&o)?.mul(x)?.sum_all())
        })),
        ("div", Box::new(move |x| Ok(x.div(&positive_row)?.square().sum_all()))),
        ("div_rhs", Box::new(|x| {
            let d = x.square().add_scalar(1.0);
            Ok(Tensor::ones(&[3, 4]).div(&d)?.sum_all())
        })),
        ("matmul", Box::new(move |x| Ok(x.matmul(&rhs)?.square().sum_all()))),
        ("matmul_rhs", Box::new({
            let o = other.clone();
            move |x| Ok(o.transpose(0, 1).matmul(x)?.square().sum_all())
        })),
        ("softmax", Box::new({
            let o = other.clone();
            move |x| Ok(x.softmax(-1)?.mul(&o)?.sum_all())
        })),
        ("softmax_axis0", Box::new({
            let o = other.clone();
            move |x| Ok(x.softmax(0)?.mul(&o)?.sum_all())
        })),
        ("exp", Box::new(|x| Ok(x.exp().sum_all()))),
        ("ln", Box::new(|x| Ok(x.square().add_scalar(0.5).ln().sum_all()))),
        ("powf", Box::new(|x| Ok(x.square().add_scalar(0.3).powf(-0.5).sum_all()))),
        ("sigmoid", Box::new(|x| Ok(x.sigmoid().square().sum_all()))),
        ("silu", Box::new(|x| Ok(x.silu().square().sum_all()))),
        ("softplus", Box::new(|x| Ok(x.softplus().square().sum_all()))),
        ("sum_axis", Box::new(|x| Ok(x.sum_axis(0, false).square().sum_all()))),
        ("mean_axis", Box::new(|x| Ok(x.mean_axis(-1, true).square().sum_all()))),
        ("reshape", Box::new({
            let o = other.clone();
            move |x| Ok(x.reshape(&[4, 3])?.matmul(&o)?.sum_all())
        })),
        ("transpose", Box::new({
            let o = other.clone();
            move |x| Ok(x.transpose(0, 1).mul(&o.transpose(0, 1))?.sum_all())
        })),
        ("narrow", Box::new(|x| Ok(x.narrow(1, 1, 2)?.square().sum_all()))),
        ("concat", Box::new(|x| {
            Ok(Tensor::concat(&[x.clone(), x.scale(2.0)], 0)?.square().sum_all())
        })),
        ("index_select", Box::new(|x| Ok(x.index_select(&[2, 0, 2])?.square().sum_all()))),
        ("scatter_rows", Box::new(|x| Ok(x.scatter_rows(&[1, 1, 0], 2)?.square().sum_all()))),
        ("mul_const", Box::new(|x| {
            let mask: Vec<f64> = (0..12).map(|i| (i % 3) as f64).collect();
            Ok(x.mul_const(&mask)?.square().sum_all())
        })),
    ];
    for (name, f) in &cases {
        for _ in 0..10 {
            let x = random(&mut rng, &[3, 4]);
            let err = finite_diff_check(f, &x).unwrap();
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..32)) {
        let n = v.len();
        let s = Tensor::new(v, &[n]).unwrap().softmax(-1).unwrap();
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&p| p > 0.0 || n > 1));
    }

    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let c = a.matmul(&b).unwrap();
        let want = matmul_naive(a.data(), b.data(), m, k, n);
        for (x, y) in c.data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}
