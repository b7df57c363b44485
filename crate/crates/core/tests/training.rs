mod common;

use hrmark::train::{synth_split, train, LandmarkSet, TrainConfig};
use hrmark::{build, Error, RunConfig};

fn short() -> (RunConfig, TrainConfig) {
    let rc = RunConfig::toy_train();
    let mut cfg = rc.train.clone();
    cfg.epochs = 3;
    cfg.milestones = vec![1, 2];
    (rc, cfg)
}

#[test]
fn short_run_is_reproducible_and_logs_every_epoch() {
    let (rc, cfg) = short();
    let (tr, val) = synth_split(24, 8, 5);
    let run = || {
        let (model, params) = build::<f32>(&rc.network, 5).unwrap();
        let mut seen = 0;
        let out = train(&model, params, &tr, Some(&val), &cfg, rc.norm().unwrap(), |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.len(), 3);
    let lrs: Vec<f64> = a.log.iter().map(|l| l.lr).collect();
    assert_eq!(common::suites::lr_decays(&lrs), Some(2));
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!((x.loss, x.val_nme), (y.loss, y.val_nme));
    }
    assert!(a.log.iter().all(|l| l.loss.is_finite() && l.val_nme.unwrap().is_finite()));
}

#[test]
fn non_finite_parameters_abort_with_numeric_error() {
    let (rc, cfg) = short();
    let (tr, _) = synth_split(8, 0, 6);
    let (model, mut params) = build::<f32>(&rc.network, 6).unwrap();
    params.get_mut("head.b0.conv.weight").unwrap().data_mut()[0] = f32::NAN;
    match train(&model, params, &tr, None, &cfg, rc.norm().unwrap(), |_| {}) {
        Err(Error::Numeric { op }) => assert!(!op.is_empty()),
        other => panic!("expected a numeric error, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn mismatched_inputs_are_config_errors() {
    let (rc, cfg) = short();
    let (model, params) = build::<f32>(&rc.network, 7).unwrap();
    let (mut tr, _) = synth_split(4, 0, 7);
    assert!(matches!(
        train(&model, params.clone(), &tr, None, &cfg, (0, 9), |_| {}),
        Err(Error::Config(_))
    ));
    tr.samples[1].landmarks = LandmarkSet::new(vec![[1.0, 1.0]; 3]);
    let e = train(&model, params.clone(), &tr, None, &cfg, (0, 1), |_| {}).unwrap_err();
    assert!(e.to_string().contains("3 landmarks"), "{e}");
    let mut bad = cfg.clone();
    bad.milestones = vec![2, 1];
    let e = train(&model, params, &tr, None, &bad, (0, 1), |_| {}).unwrap_err();
    assert!(e.to_string().contains("train.milestones"), "{e}");
}

#[test]
fn trained_parameters_survive_a_file_round_trip() {
    let (rc, mut cfg) = short();
    cfg.epochs = 1;
    cfg.milestones.clear();
    let (tr, _) = synth_split(8, 0, 8);
    let (model, params) = build::<f32>(&rc.network, 8).unwrap();
    let out = train(&model, params, &tr, None, &cfg, rc.norm().unwrap(), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    hrmark::network::write_params(&out.params, &path).unwrap();
    let back = hrmark::network::read_params::<f32>(&path).unwrap();
    assert_eq!(back, out.params);
    model.check_params(&back).unwrap();
}
