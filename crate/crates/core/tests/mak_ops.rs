mod common;

use common::{max_grad_error, max_param_grad_error, random_const, random_var, rng};
use makgcn::instrument;
use makgcn::mak::{apply_heads, DynamicKernelBank, MakConfig, MakLayer};
use makgcn::nn::{BatchNorm, Module};
use makgcn::tensor::{mul, scale, sum_all, Element, Mode, Tensor, BN_EPSILON};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn config(ci: usize, co: usize, g: usize, h: usize, mid: usize, residual: bool) -> MakConfig {
    MakConfig {
        in_channels: ci,
        out_channels: co,
        gen_in_channels: g,
        num_heads: h,
        mid_channels: mid,
        residual,
    }
}

/// Replaces zero biases, unit gains and default running statistics with
/// random values so every term of the layer is exercised.
fn randomize<T: Element, M: Module<T>>(m: &mut M, r: &mut ChaCha8Rng) {
    let mut ps = Vec::new();
    m.parameters_mut(&mut ps);
    for p in ps {
        let (lo, hi) = if p.name().ends_with(".gamma") { (0.5, 1.5) } else { (-0.5, 0.5) };
        if p.name().ends_with(".weight") {
            continue;
        }
        for v in p.data_mut() {
            *v = T::from_f64_lossy(r.gen_range(lo..hi));
        }
    }
    let mut bs = Vec::new();
    m.buffers(&mut bs);
    for (_, s) in bs {
        let c = s.channels();
        s.set(
            (0..c).map(|_| T::from_f64_lossy(r.gen_range(-0.5..0.5))).collect(),
            (0..c).map(|_| T::from_f64_lossy(r.gen_range(0.5..2.0))).collect(),
        );
    }
}

fn f<T: Element>(v: T) -> f64 {
    v.to_f64().unwrap()
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

fn bn_eval<T: Element>(bn: &BatchNorm<T>, c: usize, v: f64) -> f64 {
    let (mean, var) = (f(bn.stats.mean()[c]), f(bn.stats.var()[c]));
    (v - mean) / (var + BN_EPSILON).sqrt() * f(bn.gamma.data()[c]) + f(bn.beta.data()[c])
}

fn affine<T: Element>(w: &[T], b: &[T], rows: usize, input: &[f64]) -> Vec<f64> {
    let cols = input.len();
    (0..rows)
        .map(|r| f(b[r]) + (0..cols).map(|c| f(w[r * cols + c]) * input[c]).sum::<f64>())
        .collect()
}

/// Eval-mode layer output evaluated one grid cell at a time with scalar
/// arithmetic, looping explicitly over batch, point, neighbour and head.
fn loop_nest_oracle<T: Element>(layer: &MakLayer<T>, geo: &Tensor<T>, feat: &Tensor<T>) -> Vec<f64> {
    let cfg = *layer.config();
    let [b, cg, n, k] = geo.shape().try_into().unwrap();
    let (ci, co, h, m) = (cfg.in_channels, cfg.out_channels, cfg.num_heads, cfg.mid_channels);
    let gen = &layer.generator;
    let s = layer.slope;
    let at = |t: &Tensor<T>, ch: usize, bi: usize, i: usize, j: usize| f(t.data()[((bi * t.shape()[1] + ch) * n + i) * k + j]);
    let mut out = vec![0.0; b * co * n * k];
    for bi in 0..b {
        for i in 0..n {
            for j in 0..k {
                let g: Vec<f64> = (0..cg).map(|c| at(geo, c, bi, i, j)).collect();
                let x: Vec<f64> = (0..ci).map(|c| at(feat, c, bi, i, j)).collect();
                let y0: Vec<f64> = affine(gen.conv0.weight.data(), gen.conv0.bias.data(), m, &g)
                    .into_iter()
                    .enumerate()
                    .map(|(c, v)| leaky(bn_eval(&gen.bn0, c, v), s))
                    .collect();
                let y1: Vec<f64> = affine(gen.conv_mid.weight.data(), gen.conv_mid.bias.data(), m, &y0)
                    .into_iter()
                    .enumerate()
                    .map(|(c, v)| leaky(bn_eval(&gen.bn_mid, c, v), s))
                    .collect();
                let kernels = affine(gen.conv1.weight.data(), gen.conv1.bias.data(), co * ci * h, &y1);
                let mut filtered = vec![0.0; co];
                for hd in 0..h {
                    for o in 0..co {
                        for c in 0..ci {
                            filtered[o] += kernels[(o * ci + c) * h + hd] * x[c];
                        }
                    }
                }
                let identity: Vec<f64> = if !cfg.residual {
                    vec![0.0; co]
                } else if let Some(p) = &layer.projection {
                    affine(p.conv.weight.data(), p.conv.bias.data(), co, &x)
                        .into_iter()
                        .enumerate()
                        .map(|(c, v)| bn_eval(&p.bn, c, v))
                        .collect()
                } else {
                    x.clone()
                };
                for o in 0..co {
                    let v = bn_eval(&layer.bn_out, o, filtered[o] + identity[o]);
                    out[((bi * co + o) * n + i) * k + j] = leaky(v, s);
                }
            }
        }
    }
    out
}

fn max_rel(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (a - e).abs() / e.abs().max(floor))
        .fold(0.0, f64::max)
}

fn tensor_as<T: Element>(v: &[f64], shape: &[usize]) -> Tensor<T> {
    Tensor::from_f64(v, shape).unwrap()
}

/// `floor_to_scale` measures error relative to the largest output magnitude,
/// which is what single precision can resolve after cancellation.
fn check_against_oracle<T: Element>(dims: [usize; 7], residual: bool, seed: u64, tol: f64, floor_to_scale: bool) -> Result<(), TestCaseError> {
    let [b, n, k, h, ci, co, cg] = dims;
    let mut r = rng(seed);
    let mut layer = MakLayer::<T>::new("mak", config(ci, co, cg, h, 3, residual), &mut r).unwrap();
    randomize(&mut layer, &mut r);
    let geo: Tensor<T> = tensor_as(&common::random_vec(&mut r, b * cg * n * k), &[b, cg, n, k]);
    let feat: Tensor<T> = tensor_as(&common::random_vec(&mut r, b * ci * n * k), &[b, ci, n, k]);
    let expected = loop_nest_oracle(&layer, &geo, &feat);
    let fused = layer.forward(&geo, &feat, Mode::Eval).unwrap().to_f64_vec();
    let explicit = layer.forward_explicit(&geo, &feat, Mode::Eval).unwrap().to_f64_vec();
    let floor = if floor_to_scale { expected.iter().fold(1e-3, |m: f64, v| m.max(v.abs())) } else { 1e-3 };
    let (ef, ee) = (max_rel(&fused, &expected, floor), max_rel(&explicit, &expected, floor));
    prop_assert!(ef <= tol, "fused rel err {ef}");
    prop_assert!(ee <= tol, "explicit rel err {ee}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_loop_nest_oracle_f64(
        dims in proptest::array::uniform7(1usize..=4),
        residual in any::<bool>(),
        seed in any::<u64>(),
    ) {
        check_against_oracle::<f64>(dims, residual, seed, 1e-10, false)?;
    }

    #[test]
    fn forward_matches_loop_nest_oracle_f32(
        dims in proptest::array::uniform7(1usize..=4),
        residual in any::<bool>(),
        seed in any::<u64>(),
    ) {
        check_against_oracle::<f32>(dims, residual, seed, 1e-5, true)?;
    }

    #[test]
    fn head_sum_is_linear_in_the_bank(seed in any::<u64>(), alpha in -4.0f64..4.0) {
        let mut r = rng(seed);
        let (b, n, k, co, ci, h) = (2, 3, 2, 3, 2, 3);
        let w = random_const(&mut r, &[b, n, k, co, ci, h]);
        let x = random_const(&mut r, &[b, ci, n, k]);
        let base = apply_heads(&DynamicKernelBank::new(w.clone()).unwrap(), &x).unwrap();
        let scaled = apply_heads(&DynamicKernelBank::new(scale(&w, alpha)).unwrap(), &x).unwrap();
        for (u, v) in base.data().iter().zip(scaled.data()) {
            prop_assert!((alpha * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
        let halved = apply_heads(&DynamicKernelBank::new(scale(&w, 0.5)).unwrap(), &x).unwrap();
        for (u, v) in base.data().iter().zip(halved.data()) {
            prop_assert_eq!(0.5 * u, *v);
        }
    }

    #[test]
    fn point_permutation_permutes_output(seed in any::<u64>()) {
        let (b, n, k, cg, ci) = (2, 7, 3, 4, 3);
        let mut r = rng(seed);
        let mut layer = MakLayer::<f64>::new("mak", config(ci, 5, cg, 2, 4, true), &mut r).unwrap();
        randomize(&mut layer, &mut r);
        let geo = random_const(&mut r, &[b, cg, n, k]);
        let feat = random_const(&mut r, &[b, ci, n, k]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let move_points = |t: &Tensor<f64>| {
            let c = t.shape()[1];
            let mut out = vec![0.0; t.numel()];
            for bi in 0..b {
                for ch in 0..c {
                    for i in 0..n {
                        let src = ((bi * c + ch) * n + i) * k;
                        let dst = ((bi * c + ch) * n + perm[i]) * k;
                        out[dst..dst + k].copy_from_slice(&t.data()[src..src + k]);
                    }
                }
            }
            Tensor::from_vec(out, t.shape()).unwrap()
        };
        let y = layer.forward(&geo, &feat, Mode::Eval).unwrap();
        let py = layer.forward(&move_points(&geo), &move_points(&feat), Mode::Eval).unwrap();
        let moved = move_points(&y);
        prop_assert_eq!(moved.data(), py.data());
    }
}

#[test]
fn hand_evaluated_generator_chain() {
    let mut layer = MakLayer::<f64>::new("m", config(1, 1, 2, 1, 1, true), &mut rng(0)).unwrap();
    let g = &mut layer.generator;
    g.conv0.weight.data_mut().copy_from_slice(&[2.0, -1.0]);
    g.conv0.bias.data_mut()[0] = 0.5;
    g.conv_mid.weight.data_mut()[0] = 3.0;
    g.conv_mid.bias.data_mut()[0] = -1.0;
    g.conv1.weight.data_mut()[0] = 0.5;
    g.conv1.bias.data_mut()[0] = 0.25;
    let geo = Tensor::from_vec(vec![1.0, 4.0], &[1, 2, 1, 1]).unwrap();
    let bank = layer.generate_kernels(&geo, Mode::Eval).unwrap();
    assert_eq!(bank.weights().shape(), &[1, 1, 1, 1, 1, 1]);

    // 2*1 - 4 + 0.5 = -1.5, scaled by s, leaky -> -0.3 s
    // 3 * (-0.3 s) - 1, scaled by s, leaky -> 0.2 * (-0.9 s^2 - s)
    let s = 1.0 / (1.0 + BN_EPSILON).sqrt();
    let expected = 0.5 * 0.2 * (-0.9 * s * s - s) + 0.25;
    assert!((bank.weights().data()[0] - expected).abs() < 1e-15);
}

#[test]
fn fused_and_explicit_agree_in_train_mode_including_gradients() {
    let mut r = rng(7);
    let mut layer = MakLayer::<f64>::new("mak", config(3, 4, 5, 3, 4, true), &mut r).unwrap();
    randomize(&mut layer, &mut r);
    let geo = random_var(&mut r, &[2, 5, 6, 3]);
    let feat = random_var(&mut r, &[2, 3, 6, 3]);
    let w = random_const(&mut r, &[2, 4, 6, 3]);

    let run = |explicit: bool| {
        let mut ps = Vec::new();
        layer.parameters(&mut ps);
        ps.iter().for_each(|p| p.zero_grad());
        geo.zero_grad();
        feat.zero_grad();
        let y = if explicit {
            layer.forward_explicit(&geo, &feat, Mode::Train)
        } else {
            layer.forward(&geo, &feat, Mode::Train)
        }
        .unwrap();
        sum_all(&mul(&y, &w).unwrap()).backward().unwrap();
        let mut grads: Vec<Vec<f64>> = ps.iter().map(|p| p.grad()).collect();
        grads.push(geo.grad().unwrap().to_vec());
        grads.push(feat.grad().unwrap().to_vec());
        (y.to_vec(), grads)
    };
    let (ya, ga) = run(false);
    let (yb, gb) = run(true);
    assert!(max_rel(&ya, &yb, 1e-3) < 1e-12);
    for (a, b) in ga.iter().zip(&gb) {
        assert!(max_rel(a, b, 1e-3) < 1e-10);
    }
}

#[test]
fn gradcheck_layer_inputs_and_parameters() {
    for residual in [true, false] {
        let mut r = rng(8);
        let mut layer = MakLayer::<f64>::new("mak", config(2, 3, 4, 2, 3, residual), &mut r).unwrap();
        randomize(&mut layer, &mut r);
        let geo = random_var(&mut r, &[2, 4, 3, 2]);
        let feat = random_var(&mut r, &[2, 2, 3, 2]);
        let w = random_const(&mut r, &[2, 3, 3, 2]);

        let err = max_grad_error(
            &[geo.clone(), feat.clone()],
            |v| sum_all(&mul(&layer.forward(&v[0], &v[1], Mode::Train).unwrap(), &w).unwrap()),
            1e-5,
            1e-3,
        );
        assert!(err < 1e-6, "input grad rel err {err}");

        let (g, x) = (geo.detach(), feat.detach());
        let err = max_param_grad_error(
            &mut layer,
            |l| sum_all(&mul(&l.forward(&g, &x, Mode::Train).unwrap(), &w).unwrap()),
            1e-5,
            1e-3,
        );
        assert!(err < 1e-6, "parameter grad rel err {err}");
    }
}

#[test]
fn every_generator_parameter_receives_gradient() {
    let mut r = rng(9);
    let layer = MakLayer::<f32>::new("mak", config(6, 64, 6, 2, 8, true), &mut r).unwrap();
    let geo: Tensor<f32> = tensor_as(&common::random_vec(&mut r, 2 * 6 * 16 * 4), &[2, 6, 16, 4]);
    let w: Tensor<f32> = tensor_as(&common::random_vec(&mut r, 2 * 64 * 16 * 4), &[2, 64, 16, 4]);
    let y = layer.forward(&geo, &geo, Mode::Train).unwrap();
    sum_all(&mul(&y, &w).unwrap()).backward().unwrap();
    let mut ps = Vec::new();
    layer.generator.parameters(&mut ps);
    assert_eq!(ps.len(), 10);
    for p in ps {
        let norm: f32 = p.grad().iter().map(|g| g * g).sum();
        assert!(norm > 0.0, "{} has zero gradient", p.name());
    }
}

#[test]
fn parameter_count_is_affine_in_heads() {
    let (ci, co, mid) = (6, 64, 8);
    let counts: Vec<usize> = (1..=7)
        .map(|h| {
            let c = config(ci, co, 6, h, mid, true);
            let layer = MakLayer::<f32>::new("m", c, &mut rng(0)).unwrap();
            let mut ps = Vec::new();
            layer.parameters(&mut ps);
            let actual: usize = ps.iter().map(|p| p.numel()).sum();
            assert_eq!(actual, c.parameter_count());
            actual
        })
        .collect();
    for pair in counts.windows(2) {
        assert_eq!(pair[1] - pair[0], mid * co * ci + co * ci);
    }
}

#[test]
fn instrumented_macs_match_closed_form() {
    for c in [config(6, 64, 6, 2, 8, true), config(4, 4, 6, 3, 5, true), config(3, 7, 2, 1, 4, false)] {
        let layer = MakLayer::<f32>::new("m", c, &mut rng(0)).unwrap();
        let (b, n, k) = (3, 5, 4);
        let geo = Tensor::<f32>::ones(&[b, c.gen_in_channels, n, k]);
        let feat = Tensor::<f32>::ones(&[b, c.in_channels, n, k]);
        instrument::reset();
        layer.forward(&geo, &feat, Mode::Eval).unwrap();
        assert_eq!(instrument::snapshot().macs, (b * c.mac_count(n * k)) as u64);
    }
}
