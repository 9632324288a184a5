#![allow(dead_code)]

use makgcn::nn::Module;
use makgcn::tensor::{no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_var(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::variable(random_vec(rng, shape.iter().product()), shape).unwrap()
}

pub fn random_const(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(random_vec(rng, shape.iter().product()), shape).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Max relative error between backward() gradients and central differences
/// of the scalar `f` with respect to every element of every input.
pub fn max_grad_error(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    step: f64,
    floor: f64,
) -> f64 {
    for t in inputs {
        t.zero_grad();
    }
    f(inputs).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (which, t) in inputs.iter().enumerate() {
        let analytic = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let eval = |delta: f64| {
                let shifted: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        let mut d = u.to_vec();
                        if j == which {
                            d[i] += delta;
                        }
                        Tensor::from_vec(d, u.shape()).unwrap()
                    })
                    .collect();
                no_grad(|| f(&shifted)).item()
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i], numeric, floor));
        }
    }
    worst
}

/// Same as [`max_grad_error`] but over every element of every parameter of
/// `module`, perturbing the parameters in place.
pub fn max_param_grad_error<M: Module<f64>>(
    module: &mut M,
    f: impl Fn(&M) -> Tensor<f64>,
    step: f64,
    floor: f64,
) -> f64 {
    let mut ps = Vec::new();
    module.parameters(&mut ps);
    ps.iter().for_each(|p| p.zero_grad());
    f(module).backward().unwrap();
    let analytic: Vec<Vec<f64>> = ps.iter().map(|p| p.grad()).collect();
    let mut worst: f64 = 0.0;
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let mut eval = |delta: f64| {
                let mut ps = Vec::new();
                module.parameters_mut(&mut ps);
                ps[which].data_mut()[i] += delta;
                drop(ps);
                let v = no_grad(|| f(module)).item();
                let mut ps = Vec::new();
                module.parameters_mut(&mut ps);
                ps[which].data_mut()[i] -= delta;
                v
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            worst = worst.max(rel_err(a, numeric, floor));
        }
    }
    worst
}
