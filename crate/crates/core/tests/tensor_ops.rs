mod common;

use common::{max_grad_error, random_const, random_var, rng};
use makgcn::tensor::{
    add, batch_norm, concat, leaky_relu, matmul_batched, mul, permute, pointwise_linear, reduce,
    reduce_max_with_indices, reshape, scale, softmax_cross_entropy, sum_all, BatchNormStats, Mode,
    ReduceKind, Tensor, BN_EPSILON, BN_MOMENTUM,
};
use makgcn::Error;
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const PER_OP_TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

/// Fixed random projection so every output element feeds the scalar loss.
fn project(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = random_const(&mut rng(seed), out.shape());
    sum_all(&mul(out, &w).unwrap())
}

#[test]
fn matmul_examples() {
    let id = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let b = t(&[3.0, 4.0], &[2, 1]);
    assert_eq!(matmul_batched(&id, &b).unwrap().to_vec(), vec![3.0, 4.0]);

    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
    assert_eq!(matmul_batched(&a, &b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);

    let z = Tensor::<f64>::zeros(&[1, 3, 2]);
    let r = random_const(&mut rng(1), &[1, 2, 4]);
    let out = matmul_batched(&z, &r).unwrap();
    assert_eq!(out.shape(), &[1, 3, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_errors_name_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    match matmul_batched(&a, &b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let a = Tensor::<f64>::zeros(&[2, 2, 3]);
    let b = Tensor::<f64>::zeros(&[3, 3, 1]);
    assert!(matmul_batched(&a, &b).is_err());
}

#[test]
fn matmul_broadcasts_leading_axes() {
    let mut r = rng(2);
    let a = random_const(&mut r, &[2, 1, 3, 4]);
    let b = random_const(&mut r, &[5, 4, 2]);
    let out = matmul_batched(&a, &b).unwrap();
    assert_eq!(out.shape(), &[2, 5, 3, 2]);
    // element (1, 3, 2, 1) by hand
    let (ai, bi) = (1, 3);
    let mut s = 0.0;
    for p in 0..4 {
        s += a.data()[ai * 12 + 2 * 4 + p] * b.data()[bi * 8 + p * 2 + 1];
    }
    let idx = ((1 * 5 + 3) * 3 + 2) * 2 + 1;
    assert!((out.data()[idx] - s).abs() < 1e-14);
}

#[test]
fn pointwise_linear_examples() {
    let mut r = rng(3);
    let x = random_const(&mut r, &[2, 3, 4, 5]);
    let id = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
    let zero = Tensor::zeros(&[3]);
    assert_eq!(pointwise_linear(&x, &id, Some(&zero)).unwrap().to_vec(), x.to_vec());

    let ones = Tensor::<f64>::ones(&[1, 2, 1, 1]);
    let w = t(&[1.0, 1.0, 2.0, 2.0], &[2, 2]);
    let b = t(&[0.0, 1.0], &[2]);
    assert_eq!(pointwise_linear(&ones, &w, Some(&b)).unwrap().to_vec(), vec![2.0, 5.0]);

    let w0 = Tensor::<f64>::zeros(&[2, 3]);
    let bias = t(&[-1.5, 4.0], &[2]);
    let out = pointwise_linear(&x, &w0, Some(&bias)).unwrap();
    assert_eq!(out.shape(), &[2, 2, 4, 5]);
    for (i, chunk) in out.data().chunks(20).enumerate() {
        assert!(chunk.iter().all(|&v| v == bias.data()[i % 2]));
    }

    let bad = Tensor::<f64>::zeros(&[2, 4]);
    assert!(matches!(pointwise_linear(&x, &bad, None), Err(Error::Shape { .. })));
}

#[test]
fn leaky_relu_examples() {
    let x = t(&[1.0, -1.0, 0.0], &[3]);
    assert_eq!(leaky_relu(&x, 0.2).to_vec(), vec![1.0, -0.2, 0.0]);
    let x = t(&[-5.0, 5.0], &[2]);
    assert_eq!(leaky_relu(&x, 0.0).to_vec(), vec![0.0, 5.0]);

    let v = Tensor::<f64>::variable(vec![-2.0, 0.0], &[2]).unwrap();
    sum_all(&leaky_relu(&v, 0.2)).backward().unwrap();
    assert_eq!(v.grad().unwrap().to_vec(), vec![0.2, 1.0]);
}

#[test]
fn reduce_examples() {
    let x = t(&[3.0, 1.0, 4.0, 1.0, 5.0], &[5]);
    let (m, arg) = reduce_max_with_indices(&x, 0).unwrap();
    assert_eq!((m.item(), arg), (5.0, vec![4]));

    let x = t(&[2.0, 4.0], &[2]);
    assert_eq!(reduce(&x, 0, ReduceKind::Mean).unwrap().item(), 3.0);

    let x = t(&[7.0; 4], &[4]);
    let (m, arg) = reduce_max_with_indices(&x, 0).unwrap();
    assert_eq!((m.item(), arg), (7.0, vec![0]));

    assert!(reduce(&x, 1, ReduceKind::Max).is_err());
    let empty = Tensor::<f64>::from_vec(vec![], &[2, 0]).unwrap();
    assert!(matches!(reduce(&empty, 1, ReduceKind::Mean), Err(Error::InvalidInput(_))));
}

#[test]
fn cross_entropy_examples() {
    let uniform = t(&[0.0, 0.0], &[1, 2]);
    let l = softmax_cross_entropy(&uniform, &[0]).unwrap().item();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

    let big = t(&[1000.0, 0.0], &[1, 2]);
    let l = softmax_cross_entropy(&big, &[0]).unwrap().item();
    assert!(l.is_finite() && l.abs() < 1e-12);

    let x = t(&[1.0, 2.0, 3.0], &[1, 3]);
    let l = softmax_cross_entropy(&x, &[2]).unwrap().item();
    let direct = -((3.0f64).exp() / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
    assert!((l - direct).abs() < 1e-14);
    assert!((l - 0.4076).abs() < 1e-4);

    assert!(matches!(softmax_cross_entropy(&x, &[3]), Err(Error::InvalidInput(_))));
}

#[test]
fn gradcheck_elementwise_and_shape_ops() {
    let mut r = rng(10);
    let a = random_var(&mut r, &[2, 3, 4]);
    let b = random_var(&mut r, &[2, 3, 4]);
    let err = max_grad_error(
        &[a, b],
        |v| {
            let s = add(&mul(&v[0], &v[1]).unwrap(), &scale(&v[0], 0.7)).unwrap();
            let p = permute(&s, &[2, 0, 1]).unwrap();
            let q = reshape(&p, &[4, 6]).unwrap();
            project(&q, 11)
        },
        STEP,
        FLOOR,
    );
    assert!(err < PER_OP_TOL, "max rel err {err}");
}

#[test]
fn gradcheck_matmul() {
    let mut r = rng(12);
    let a = random_var(&mut r, &[3, 2, 4]);
    let b = random_var(&mut r, &[4, 5]);
    let err = max_grad_error(&[a, b], |v| project(&matmul_batched(&v[0], &v[1]).unwrap(), 13), STEP, FLOOR);
    assert!(err < PER_OP_TOL, "max rel err {err}");
}

#[test]
fn gradcheck_pointwise_linear() {
    let mut r = rng(14);
    let x = random_var(&mut r, &[2, 3, 4, 2]);
    let w = random_var(&mut r, &[5, 3]);
    let b = random_var(&mut r, &[5]);
    let err = max_grad_error(
        &[x, w, b],
        |v| project(&pointwise_linear(&v[0], &v[1], Some(&v[2])).unwrap(), 15),
        STEP,
        FLOOR,
    );
    assert!(err < PER_OP_TOL, "max rel err {err}");
}

#[test]
fn gradcheck_batch_norm_both_modes() {
    for mode in [Mode::Train, Mode::Eval] {
        let mut r = rng(16);
        let x = random_var(&mut r, &[3, 2, 5]);
        let g = random_var(&mut r, &[2]);
        let b = random_var(&mut r, &[2]);
        let stats = BatchNormStats::from_parts(vec![0.1, -0.2], vec![0.5, 2.0]);
        let err = max_grad_error(
            &[x, g, b],
            |v| {
                // keep eval-mode statistics fixed across perturbations
                let s = BatchNormStats::from_parts(stats.mean(), stats.var());
                project(&batch_norm(&v[0], &v[1], &v[2], &s, mode, BN_MOMENTUM, BN_EPSILON).unwrap(), 17)
            },
            STEP,
            FLOOR,
        );
        assert!(err < PER_OP_TOL, "{mode:?}: max rel err {err}");
    }
}

#[test]
fn gradcheck_leaky_reduce_concat_xent() {
    let mut r = rng(18);
    let x = random_var(&mut r, &[2, 3, 4]);
    let y = random_var(&mut r, &[2, 1, 4]);
    let err = max_grad_error(
        &[x, y],
        |v| {
            let c = concat(&[v[0].clone(), v[1].clone()], 1).unwrap();
            let a = leaky_relu(&c, 0.2);
            let m = reduce(&a, 2, ReduceKind::Max).unwrap();
            let n = reduce(&a, 2, ReduceKind::Mean).unwrap();
            let logits = add(&m, &n).unwrap();
            softmax_cross_entropy(&logits, &[3, 1]).unwrap()
        },
        STEP,
        FLOOR,
    );
    assert!(err < PER_OP_TOL, "max rel err {err}");
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut r = rng(20);
    let x = random_const(&mut r, &[8, 3, 6]);
    let stats = BatchNormStats::new(3);
    let y = batch_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), &stats, Mode::Train, BN_MOMENTUM, BN_EPSILON)
        .unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..8).flat_map(|b| y.data()[(b * 3 + c) * 6..(b * 3 + c + 1) * 6].to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn reduce_max_gradient_is_one_hot_per_slice() {
    let mut r = rng(21);
    let x = random_var(&mut r, &[3, 5, 2]);
    let (m, arg) = reduce_max_with_indices(&x, 1).unwrap();
    let upstream = random_const(&mut r, m.shape());
    sum_all(&mul(&m, &upstream).unwrap()).backward().unwrap();
    let g = x.grad().unwrap();
    for o in 0..3 {
        for i in 0..2 {
            let slice: Vec<f64> = (0..5).map(|j| g.data()[(o * 5 + j) * 2 + i]).collect();
            let nonzero: Vec<usize> = (0..5).filter(|&j| slice[j] != 0.0).collect();
            assert_eq!(nonzero, vec![arg[o * 2 + i]]);
            assert_eq!(slice.iter().sum::<f64>(), upstream.data()[o * 2 + i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permute_round_trip_is_identity(
        dims in proptest::collection::vec(1usize..4, 1..5),
        seed in any::<u64>(),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut r = rng(seed);
        let x = random_const(&mut r, &dims);
        let mut axes: Vec<usize> = (0..dims.len()).collect();
        axes.shuffle(&mut rng(perm_seed));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let p = permute(&x, &axes).unwrap();
        let mut sorted_in = x.to_vec();
        let mut sorted_out = p.to_vec();
        sorted_in.sort_by(f64::total_cmp);
        sorted_out.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_in, sorted_out);
        let flat = reshape(&p, &[p.numel()]).unwrap();
        let back = permute(&reshape(&flat, p.shape()).unwrap(), &inverse).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn cross_entropy_is_shift_invariant(
        logits in proptest::collection::vec(-20.0f64..20.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let x = Tensor::from_vec(logits.clone(), &[3, 4]).unwrap();
        let shifted = Tensor::from_vec(logits.iter().map(|v| v + shift).collect(), &[3, 4]).unwrap();
        let labels = [0, 3, 2];
        let a = softmax_cross_entropy(&x, &labels).unwrap().item();
        let b = softmax_cross_entropy(&shifted, &labels).unwrap().item();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}
