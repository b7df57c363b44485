mod common;

use common::suites::*;
use common::GradReport;
use hrmark::blocks::{FusionVariant, HeadVariant};

const TOL: f64 = 1e-5;

fn pass(name: &str, r: GradReport) {
    assert!(r.checked > 0, "{name}: nothing probed");
    assert!(r.max_rel < TOL, "{name}: max relative error {:e} at {}", r.max_rel, r.worst);
}

#[test]
fn stem_gradients() {
    pass("stem", grad_stem());
}

#[test]
fn transition_gradients() {
    pass("transition", grad_transition());
}

#[test]
fn ccw_gradients() {
    pass("ccw2", grad_ccw_two_branches());
    pass("ccw3", grad_ccw_three_branches());
}

#[test]
fn scaf_merge_gradients() {
    pass("low to high", grad_scaf_low_to_high());
    pass("high to low", grad_scaf_high_to_low());
}

#[test]
fn fusion_variant_gradients() {
    for v in FusionVariant::ALL {
        pass(v.as_str(), grad_fusion(v));
    }
}

#[test]
fn head_gradients() {
    for v in HeadVariant::ALL {
        pass(v.as_str(), grad_head(v));
    }
}

#[test]
fn loss_gradients() {
    pass("mse", grad_mse());
    pass("bce", grad_bce());
}

#[test]
fn whole_network_gradients() {
    pass("toy network", grad_toy_network());
}
