mod common;

use common::suites::{conv_oracle_error, graph_conv, toy_oracle_error};
use common::*;
use hrmark::graph::ResizeMode;
use hrmark::{build, ConvSpec, Graph, NetworkConfig};

#[test]
fn conv_matches_direct_loops() {
    let err = conv_oracle_error(60, 11);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn depthwise_conv_matches_direct_loops() {
    let mut r = rng(12);
    for stride in [1, 2] {
        let spec = ConvSpec::depthwise(6, 3, stride);
        let x = randn([3, 6, 9, 8], &mut r);
        let wt = randn(spec.weight_shape(), &mut r);
        let got = graph_conv(&x, &wt, None, spec);
        let want = conv(&Arr::of(&x), &Arr::of(&wt), None, stride, 1, 6);
        assert!(want.max_abs_diff(&got) < 1e-12);
    }
}

#[test]
fn resampling_matches_reference() {
    let mut r = rng(13);
    let x = randn([2, 3, 4, 6], &mut r);
    let a = Arr::of(&x);
    for f in [2, 4] {
        let mut g = Graph::<f64>::new();
        let v = g.input(x.clone());
        let up = g.resize(v, f, ResizeMode::Bilinear).unwrap();
        let nn = g.resize(v, f, ResizeMode::Nearest).unwrap();
        assert!(bilinear(&a, f).max_abs_diff(g.value(up)) < 1e-12);
        assert!(nearest(&a, f).max_abs_diff(g.value(nn)) < 1e-12);
    }
    let mut g = Graph::<f64>::new();
    let v = g.input(x.clone());
    let p = g.resize(v, 2, ResizeMode::AveragePool).unwrap();
    let s = g.shuffle(v, 3).unwrap();
    assert!(avg_pool(&a, 2).max_abs_diff(g.value(p)) < 1e-12);
    assert!(shuffle(&a, 3).max_abs_diff(g.value(s)) < 1e-15);
}

#[test]
fn toy_network_matches_straight_line_reference() {
    for seed in [0, 1, 2] {
        let err = toy_oracle_error(seed);
        assert!(err < 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn reference_is_sensitive_to_fusion_and_head_parameters() {
    let cfg = NetworkConfig::preset("toy").unwrap();
    let (model, mut params) = build::<f64>(&cfg, 3).unwrap();
    randomize(&mut params, 4);
    let img = uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng(5));
    let got = model.infer(&params, &img).unwrap().heatmaps;
    for name in ["stage0.module0.fusion.1to0.fc2.bias", "stage0.module0.fusion.0to1.fc1.weight", "head.b1.conv.bias"] {
        let mut moved = params.clone();
        for v in moved.get_mut(name).unwrap().data_mut() {
            *v += 0.5;
        }
        let err = toy_forward(&P(&moved), &Arr::of(&img)).max_abs_diff(&got);
        assert!(err > 1e-3, "{name} does not reach the output ({err})");
    }
}

#[test]
fn infer_uses_running_statistics() {
    let cfg = NetworkConfig::preset("toy").unwrap();
    let (model, mut params) = build::<f64>(&cfg, 4).unwrap();
    randomize(&mut params, 5);
    let img = uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng(6));
    let a = model.infer(&params, &img).unwrap();
    let want = toy_forward(&P(&params), &Arr::of(&img));
    assert!(want.max_abs_diff(&a.heatmaps) < 1e-10);
    assert_eq!(a.stride, 4);
}
