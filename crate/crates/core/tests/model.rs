mod common;

use common::{max_param_grad_error, random_vec, rng};
use makgcn::graph::{graph_feature, knn};
use makgcn::instrument;
use makgcn::model::{count_macs, count_params, Model, ModelConfig, Variant};
use makgcn::tensor::{softmax_cross_entropy, Mode, Tensor};
use rand::seq::SliceRandom;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        k: 4,
        num_heads: 2,
        stage_widths: vec![4, 6, 8, 10],
        emb_dims: 12,
        fc_widths: vec![8, 6],
        num_classes: 3,
        variant,
        mak_mid_channels: 3,
        ..ModelConfig::default()
    }
}

fn cloud(seed: u64, b: usize, n: usize) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_f64(&random_vec(&mut r, b * 3 * n), &[b, 3, n]).unwrap()
}

#[test]
fn default_model_output_and_fusion_shapes() {
    let m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
    let trace = m.forward_traced(&cloud(1, 2, 128), Mode::Eval, None).unwrap();
    assert_eq!(trace.logits.shape(), &[2, 5]);
    assert_eq!(trace.fused.shape(), &[2, 512, 128]);
    let widths: Vec<usize> = trace.stage_outputs.iter().map(|t| t.shape()[1]).collect();
    assert_eq!(widths, [64, 64, 128, 256]);
}

#[test]
fn one_neighbour_search_per_forward_for_every_variant() {
    for v in Variant::ALL {
        let m = Model::<f32>::build(&small(v), 0).unwrap();
        instrument::reset();
        m.forward(&cloud(2, 2, 10), Mode::Eval, None).unwrap();
        assert_eq!(instrument::snapshot().knn_calls, 1, "{v}");
    }
}

#[test]
fn generation_input_stays_anchored_to_raw_points() {
    for v in [Variant::SequentialFF, Variant::MakFF] {
        let m = Model::<f64>::build(&small(v), 0).unwrap();
        let x = Tensor::<f64>::from_vec(random_vec(&mut rng(3), 2 * 3 * 9), &[2, 3, 9]).unwrap();
        let trace = m.forward_traced(&x, Mode::Eval, None).unwrap();
        let reference = graph_feature(&x, &knn(&x, 4).unwrap()).unwrap();
        assert!(trace.geo_inputs.len() >= 2);
        for geo in &trace.geo_inputs {
            assert_eq!(geo.data(), reference.data());
        }
    }
}

#[test]
fn eval_forward_is_pure() {
    let m = Model::<f32>::build(&small(Variant::SequentialFF), 4).unwrap();
    let x = cloud(5, 3, 12);
    let a = m.forward(&x, Mode::Eval, None).unwrap();
    let b = m.forward(&x, Mode::Eval, None).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn eval_logits_are_invariant_to_point_order() {
    let cfg = ModelConfig { num_classes: 4, ..ModelConfig::default() };
    let m = Model::<f32>::build(&cfg, 6).unwrap();
    let n = 48;
    let x = cloud(7, 2, n);
    let base = m.forward(&x, Mode::Eval, None).unwrap();
    let mut r = rng(8);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let mut moved = vec![0.0f32; x.numel()];
        for row in 0..6 {
            for i in 0..n {
                moved[row * n + perm[i]] = x.data()[row * n + i];
            }
        }
        let y = m.forward(&Tensor::from_vec(moved, &[2, 3, n]).unwrap(), Mode::Eval, None).unwrap();
        let dev = base.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(dev <= 1e-5, "max abs deviation {dev}");
    }
}

#[test]
fn every_variant_trains_one_step_and_matches_its_parameter_count() {
    for v in Variant::ALL {
        let cfg = small(v);
        let m = Model::<f32>::build(&cfg, 9).unwrap();
        assert_eq!(m.num_parameters(), count_params(&cfg).unwrap(), "{v}");
        let logits = m.forward(&cloud(10, 4, 10), Mode::Train, Some(&mut rng(11))).unwrap();
        softmax_cross_entropy(&logits, &[0, 1, 2, 1]).unwrap().backward().unwrap();
        let total: f32 = m.parameters().iter().map(|p| p.grad().iter().map(|g| g.abs()).sum::<f32>()).sum();
        assert!(total > 0.0 && total.is_finite(), "{v}");
    }
}

#[test]
fn parameter_count_ignores_k_and_is_affine_in_heads() {
    let base = ModelConfig::default();
    let counts: Vec<usize> = [5, 10, 15, 20, 25, 30, 35, 40]
        .iter()
        .map(|&k| count_params(&ModelConfig { k, ..base.clone() }).unwrap())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));

    let by_heads: Vec<usize> = (1..=7)
        .map(|h| count_params(&ModelConfig { num_heads: h, ..base.clone() }).unwrap())
        .collect();
    let step = by_heads[1] - by_heads[0];
    assert!(by_heads.windows(2).all(|w| w[1] - w[0] == step));
    // per adaptive stage: mid * Co * Ci + Co * Ci
    let expected: usize = [(6, 64), (128, 64)].iter().map(|&(ci, co)| 8 * co * ci + co * ci).sum();
    assert_eq!(step, expected);

    for h in [1, 3] {
        let cfg = ModelConfig { num_heads: h, ..small(Variant::SandwichFF) };
        assert_eq!(Model::<f32>::build(&cfg, 0).unwrap().num_parameters(), count_params(&cfg).unwrap());
    }
}

#[test]
fn doubling_classes_adds_only_head_weights() {
    let cfg = small(Variant::SequentialFF);
    let wide = ModelConfig { num_classes: 6, ..cfg.clone() };
    let last = *cfg.fc_widths.last().unwrap();
    let delta = Model::<f32>::build(&wide, 0).unwrap().num_parameters() - Model::<f32>::build(&cfg, 0).unwrap().num_parameters();
    assert_eq!(delta, 3 * last + 3);
    assert_eq!(count_params(&wide).unwrap() - count_params(&cfg).unwrap(), delta);
}

#[test]
fn mac_count_is_strictly_increasing_and_affine_in_k_and_heads() {
    let base = ModelConfig::default();
    let by_k: Vec<i128> = [5, 10, 15, 20, 25, 30, 35, 40]
        .iter()
        .map(|&k| count_macs(&ModelConfig { k, ..base.clone() }, 960).unwrap() as i128)
        .collect();
    assert!(by_k.windows(2).all(|w| w[1] > w[0]));
    assert!(by_k.windows(3).all(|w| w[2] - w[1] == w[1] - w[0]));

    let by_h: Vec<i128> = (1..=7)
        .map(|h| count_macs(&ModelConfig { num_heads: h, ..base.clone() }, 960).unwrap() as i128)
        .collect();
    assert!(by_h.windows(3).all(|w| w[2] - w[1] == w[1] - w[0]));
    // filtering N k Co Ci plus generator last stage N k mid Co Ci, per adaptive stage
    let grid = 960 * 20;
    let expected: i128 = [(6, 64), (128, 64)].iter().map(|&(ci, co)| (grid * co * ci * 9) as i128).sum();
    assert_eq!(by_h[1] - by_h[0], expected);
}

#[test]
fn mac_count_of_degenerate_network_matches_hand_enumeration() {
    let cfg = ModelConfig {
        in_channels: 1,
        k: 1,
        num_heads: 1,
        stage_widths: vec![1, 1, 1, 1],
        emb_dims: 1,
        fc_widths: vec![1, 1],
        num_classes: 2,
        mak_mid_channels: 1,
        ..ModelConfig::default()
    };
    // neighbour search 1
    // each adaptive stage (geo 2 -> mid 1 -> mid 1 -> 2 kernels, filter 2, projection 2): 2 + 1 + 2 + 2 + 2 = 9
    // each conventional stage 2 -> 1: 2
    // embedding 4 -> 1: 4
    // classifier 2 -> 1 -> 1 -> 2: 2 + 1 + 2
    assert_eq!(count_macs(&cfg, 1).unwrap(), 1 + 9 + 9 + 2 + 2 + 4 + 5);
}

#[test]
fn mac_count_matches_instrumented_forward() {
    for v in Variant::ALL {
        let cfg = small(v);
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        let (b, n) = (3, 11);
        instrument::reset();
        m.forward(&cloud(12, b, n), Mode::Eval, None).unwrap();
        assert_eq!(instrument::snapshot().macs, b as u64 * count_macs(&cfg, n).unwrap(), "{v}");
    }
}

#[test]
fn mac_count_rejects_too_few_points() {
    assert!(count_macs(&ModelConfig::default(), 19).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        k: 3,
        num_heads: 2,
        stage_widths: vec![3, 3, 4, 4],
        emb_dims: 4,
        fc_widths: vec![4],
        num_classes: 2,
        dropout: 0.0,
        mak_mid_channels: 2,
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::build(&cfg, 13).unwrap();
    let x = Tensor::from_vec(random_vec(&mut rng(14), 3 * 3 * 8), &[3, 3, 8]).unwrap();
    let labels = [0, 1, 1];
    let err = max_param_grad_error(
        &mut m,
        |m| softmax_cross_entropy(&m.forward(&x, Mode::Train, None).unwrap(), &labels).unwrap(),
        1e-5,
        1e-6,
    );
    assert!(err < 1e-4, "max rel err {err}");
}
