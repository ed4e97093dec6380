mod common;

use lfda_autograd::Array;
use lfda_core::datagen::{gen_split, DataConfig, Domain, Split};
use lfda_core::evaluation::{
    count_macs, count_params, depth_metrics, evaluate, mean_report, module_costs, resize_bilinear, toy_network,
    EVAL_DEPTH_FLOOR,
};
use lfda_core::layers::{seeded_rng, Conv2d, FeatureShape, Module};
use lfda_core::model::{InferenceRoute, LfdaModel, NetworkConfig, SubNet};
use lfda_core::normalization::SeparateBatchNorm;
use common::oracle::naive_metrics;
use proptest::prelude::*;
use rand::Rng;

fn map(values: Vec<f64>) -> Array {
    let n = values.len();
    Array::from_vec(&[1, 1, n], values).unwrap()
}

#[test]
fn identical_maps_have_zero_error() {
    let gt = map(vec![1.0, 2.0, 5.0, 30.0]);
    let m = depth_metrics(&gt, &gt, 80.0).unwrap();
    assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
    assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    assert_eq!(m.valid_pixels, 4);
}

#[test]
fn doubled_prediction_misses_every_threshold() {
    let gt = map(vec![1.0, 3.0, 7.5, 10.0]);
    let pred = gt.clone().scale(2.0);
    let m = depth_metrics(&pred, &gt, 80.0).unwrap();
    assert_eq!(m.abs_rel, 1.0);
    assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
}

#[test]
fn threshold_is_strict() {
    let gt = map(vec![4.0; 6]);
    let pred = map(vec![5.0; 6]);
    let m = depth_metrics(&pred, &gt, 80.0).unwrap();
    assert_eq!(m.abs_rel, 0.25);
    assert_eq!(m.rmse, 1.0);
    assert_eq!(m.delta1, 0.0);
    assert_eq!(m.delta2, 1.0);
}

#[test]
fn cap_and_invalid_pixels() {
    let gt = map(vec![0.0, -1.0, 90.0, 10.0]);
    let pred = map(vec![5.0, 5.0, 5.0, 200.0]);
    let m = depth_metrics(&pred, &gt, 80.0).unwrap();
    assert_eq!(m.valid_pixels, 1);
    // The prediction is clamped to the cap before comparison.
    assert!((m.abs_rel - 7.0).abs() < 1e-12);
    assert!(depth_metrics(&pred, &map(vec![0.0, 0.0, 81.0, -2.0]), 80.0).is_err());
    assert!(depth_metrics(&map(vec![1.0]), &gt, 80.0).is_err());
}

#[test]
fn zero_prediction_is_floored() {
    let m = depth_metrics(&map(vec![0.0]), &map(vec![1.0]), 80.0).unwrap();
    assert!((m.rmse_log - (1.0f64 / EVAL_DEPTH_FLOOR).ln()).abs() < 1e-9);
}

#[test]
fn random_maps_match_reference() {
    let mut rng = seeded_rng(11, "metric-oracle");
    for _ in 0..100 {
        let gt: Vec<f64> = (0..64)
            .map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(0.5..100.0) })
            .collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.random_range(0.5..1.8) + rng.random_range(-0.5..0.5)).collect();
        let a = Array::from_vec(&[1, 8, 8], pred.clone()).unwrap();
        let b = Array::from_vec(&[1, 8, 8], gt.clone()).unwrap();
        let m = depth_metrics(&a, &b, 80.0).unwrap();
        let r = naive_metrics(&pred, &gt, 80.0);
        let got = [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3];
        for (x, y) in got.iter().zip(r) {
            assert!((x - y).abs() <= 1e-9, "{got:?} vs {r:?}");
        }
    }
}

proptest! {
    #[test]
    fn deltas_are_ordered(values in prop::collection::vec((0.01f64..50.0, 0.01f64..50.0), 1..40)) {
        let (p, g): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
        let m = depth_metrics(&map(p), &map(g), 80.0).unwrap();
        prop_assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
        prop_assert!(m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.rmse >= 0.0 && m.rmse_log >= 0.0);
    }
}

#[test]
fn mean_report_averages_per_image() {
    let a = depth_metrics(&map(vec![2.0]), &map(vec![1.0]), 80.0).unwrap();
    let b = depth_metrics(&map(vec![1.0, 1.0, 1.0]), &map(vec![1.0, 1.0, 1.0]), 80.0).unwrap();
    let m = mean_report(&[a, b]).unwrap();
    assert_eq!(m.abs_rel, 0.5);
    assert_eq!(m.valid_pixels, 4);
    assert!(mean_report(&[]).is_err());
}

#[test]
fn resize_preserves_constants_and_shape() {
    let c = Array::full(&[1, 4, 6], 3.5);
    let r = resize_bilinear(&c, 8, 12).unwrap();
    assert_eq!(r.shape(), &[1, 8, 12]);
    assert!(r.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    let ramp = Array::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
    let r = resize_bilinear(&ramp, 1, 4).unwrap();
    assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn toy_network_counts() {
    let net = toy_network();
    // conv1: 3*3*3*8 + 8 = 224 params, 3*3*3*8 * 16*16 = 55,296 MACs.
    // conv2: 3*3*8*4 + 4 = 292 params, 3*3*8*4 * 8*8 = 18,432 MACs.
    let (params, macs) = module_costs(&net, FeatureShape::new(3, 16, 16)).unwrap();
    assert_eq!(params, 516);
    assert_eq!(macs, 73_728);
    let per_layer = net.costs(FeatureShape::new(3, 16, 16)).unwrap();
    assert_eq!(per_layer.iter().map(|c| (c.params, c.macs)).collect::<Vec<_>>(), vec![(224, 55_296), (292, 18_432)]);
}

#[test]
fn single_conv_counts() {
    let mut rng = seeded_rng(0, "single");
    let conv = vec![Conv2d::new("c", 1, 2, 3, 1, 1, true, &mut rng)];
    assert_eq!(conv.num_params(), 20);
    let one = vec![Conv2d::new("c", 1, 1, 3, 1, 1, false, &mut rng)];
    assert_eq!(module_costs(&one, FeatureShape::new(1, 4, 4)).unwrap().1, 144);
    let empty: Vec<Conv2d> = Vec::new();
    assert_eq!(empty.num_params(), 0);
    assert!(one.costs(FeatureShape::new(2, 4, 4)).is_err());
}

#[test]
fn separate_norm_affine_count() {
    let bn = SeparateBatchNorm::new("bn", 5, 2);
    let n: usize = bn.params().iter().map(|p| p.value().len()).sum();
    assert_eq!(n, 2 * 2 * 5);
}

fn small_net() -> NetworkConfig {
    NetworkConfig {
        encoder_channels: vec![4, 8],
        encoder_strides: vec![1, 2],
        style_channels: vec![4, 8],
        decoder_channels: vec![8, 4],
        generator_channels: vec![8, 4],
        disc_channels: vec![4],
        ..NetworkConfig::default()
    }
}

#[test]
fn model_counts_follow_inference_path() {
    let model = LfdaModel::new(&small_net(), 1.0, 20.0, 3).unwrap();
    let inference = count_params(&model, true);
    let by_net: u64 = SubNet::INFERENCE.iter().map(|n| model.count_params(&[*n])).sum();
    assert_eq!(inference, by_net);
    let all = count_params(&model, false);
    let excluded: u64 = [SubNet::Generator, SubNet::StyleSource]
        .iter()
        .chain(SubNet::DISCRIMINATORS.iter())
        .map(|n| model.count_params(&[*n]))
        .sum();
    assert_eq!(all, inference + excluded);
    assert!(excluded > 0);

    let layers = model.inference_costs(16, 24, InferenceRoute::TARGET).unwrap();
    let excluded_prefixes = ["generator", "style_source", "disc_"];
    for l in &layers {
        assert!(!excluded_prefixes.iter().any(|p| l.name.starts_with(p)), "{} on inference path", l.name);
    }
    let layer_params: u64 = layers.iter().map(|l| l.params).sum();
    assert_eq!(layer_params, inference);

    // Doubling the height doubles a fully convolutional MAC count.
    let a = count_macs(&model, 16, 24, InferenceRoute::TARGET).unwrap();
    let b = count_macs(&model, 32, 24, InferenceRoute::TARGET).unwrap();
    assert_eq!(b, 2 * a);
    assert!(count_macs(&model, 15, 24, InferenceRoute::TARGET).is_err());
    let without_style = count_macs(&model, 16, 24, InferenceRoute::SOURCE).unwrap();
    assert!(without_style < a);
}

#[test]
fn evaluation_is_deterministic_and_resizes() {
    let cfg = DataConfig {
        height: 16,
        width: 32,
        d_min: 2.0,
        d_max: 20.0,
        val_count: 3,
        ..DataConfig::default()
    };
    let samples = gen_split(&cfg, Domain::Target, Split::Val).unwrap();
    let model = LfdaModel::new(&small_net(), cfg.d_min, cfg.d_max, 5).unwrap();
    let a = evaluate(&model, &samples, InferenceRoute::TARGET, 80.0).unwrap();
    let b = evaluate(&model, &samples, InferenceRoute::TARGET, 80.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.images.len(), 3);
    assert!(evaluate(&model, &samples, InferenceRoute::SOURCE, 80.0).is_ok());

    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.csv");
    let p2 = dir.path().join("b.csv");
    a.write_csv(&p1).unwrap();
    b.write_csv(&p2).unwrap();
    let text = std::fs::read_to_string(&p1).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
}
