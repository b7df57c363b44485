//! Test batteries run both by the focused test files and by the acceptance target.

use hrmark::blocks::{
    ccw_block, declare_ccw, declare_fuse, declare_head, declare_scaf, declare_stem, declare_transition,
    fuse, head, scaf_merge_high_to_low, scaf_merge_low_to_high, stem, transition, FeaturePyramid,
    FusionVariant, HeadVariant, ScafConfig, StemSpec,
};
use hrmark::cost::{profile, trace_mismatch};
use hrmark::network::{ParamDecls, StageSpec};
use hrmark::{build, Graph, Mode, NetworkConfig, Tensor};
use rand::Rng;

use super::{conv, grad_check, randn, randomize, rng, toy_forward, uniform, Arr, GradReport, P};
use hrmark::ConvSpec;

const PROBES: usize = 6;

fn pyramid(widths: &[usize], top: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    widths
        .iter()
        .enumerate()
        .map(|(i, &c)| randn([2, c, top >> i, top >> i], &mut r))
        .collect()
}

fn in_both_modes(
    decls: &ParamDecls,
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&mut Graph<'_, f64>, &[hrmark::Var]) -> hrmark::Result<hrmark::Var> + Copy,
) -> GradReport {
    let a = grad_check(decls, inputs, Mode::Train, PROBES, seed, f);
    let b = grad_check(decls, inputs, Mode::Infer, PROBES, seed + 1, f);
    let checked = a.checked + b.checked;
    let mut worst = if a.max_rel >= b.max_rel { a } else { b };
    worst.checked = checked;
    worst
}

pub fn grad_stem() -> GradReport {
    let spec = StemSpec { in_channels: 3, stem_width: 4, out_width: 8 };
    let mut d = ParamDecls::new();
    d.scoped("stem", |d| declare_stem(d, &spec));
    let x = uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng(1));
    in_both_modes(&d, &[x], 1, move |g, v| {
        let p = g.scoped("stem", |g| stem(g, v[0], &spec))?;
        Ok(p.branches[0])
    })
}

pub fn grad_transition() -> GradReport {
    let mut d = ParamDecls::new();
    d.scoped("t", |d| declare_transition(d, 4, 8));
    in_both_modes(&d, &pyramid(&[4], 8, 2), 2, |g, v| {
        let p = g.scoped("t", |g| transition(g, &FeaturePyramid::new(v.to_vec()), 8))?;
        let a = g.spatial_gap(p.branches[0])?;
        let b = g.spatial_gap(p.branches[1])?;
        let a = g.sum(a)?;
        let b = g.sum(b)?;
        let b = g.scale(b, 0.7)?;
        g.add(a, b)
    })
}

fn ccw_case(widths: &'static [usize], r: usize, seed: u64) -> GradReport {
    let mut d = ParamDecls::new();
    d.scoped("ccw", |d| declare_ccw(d, widths, r));
    in_both_modes(&d, &pyramid(widths, 8, seed), seed, move |g, v| {
        let p = g.scoped("ccw", |g| ccw_block(g, &FeaturePyramid::new(v.to_vec()), r))?;
        flatten(g, &p)
    })
}

pub fn grad_ccw_two_branches() -> GradReport {
    ccw_case(&[4, 8], 2, 3)
}

pub fn grad_ccw_three_branches() -> GradReport {
    ccw_case(&[4, 8, 8], 4, 4)
}

/// Reduces a pyramid to one scalar with a distinct random weight per branch element.
fn flatten(g: &mut Graph<'_, f64>, p: &FeaturePyramid) -> hrmark::Result<hrmark::Var> {
    let mut total: Option<hrmark::Var> = None;
    for (i, &b) in p.branches.iter().enumerate() {
        let w = randn(g.shape(b), &mut rng(1000 + i as u64));
        let w = g.leaf(w, false);
        let y = g.mul(b, w)?;
        let s = g.sum(y)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("non-empty pyramid"))
}

pub fn grad_scaf_low_to_high() -> GradReport {
    let cfg = ScafConfig::new(2);
    let mut d = ParamDecls::new();
    d.scoped("m", |d| declare_scaf(d, 4, &cfg)).unwrap();
    let mut r = rng(5);
    let low = randn([2, 8, 2, 2], &mut r);
    let high = randn([2, 4, 8, 8], &mut r);
    in_both_modes(&d, &[low, high], 5, move |g, v| {
        g.scoped("m", |g| scaf_merge_low_to_high(g, v[0], v[1], &cfg))
    })
}

pub fn grad_scaf_high_to_low() -> GradReport {
    let cfg = ScafConfig::new(4);
    let mut d = ParamDecls::new();
    d.scoped("m", |d| declare_scaf(d, 8, &cfg)).unwrap();
    let mut r = rng(6);
    let high = randn([2, 4, 8, 8], &mut r);
    let low = randn([2, 8, 4, 4], &mut r);
    in_both_modes(&d, &[high, low], 6, move |g, v| {
        g.scoped("m", |g| scaf_merge_high_to_low(g, v[0], v[1], &cfg))
    })
}

pub fn grad_fusion(variant: FusionVariant) -> GradReport {
    let widths: &[usize] = &[4, 8, 8];
    let mut d = ParamDecls::new();
    d.scoped("f", |d| declare_fuse(d, widths, variant, 2)).unwrap();
    in_both_modes(&d, &pyramid(widths, 8, 7), 7, move |g, v| {
        let p = g.scoped("f", |g| fuse(g, &FeaturePyramid::new(v.to_vec()), variant, 2))?;
        flatten(g, &p)
    })
}

pub fn grad_head(variant: HeadVariant) -> GradReport {
    let widths: &[usize] = &[4, 6, 8];
    let mut d = ParamDecls::new();
    d.scoped("h", |d| declare_head(d, widths, variant, 3));
    in_both_modes(&d, &pyramid(widths, 8, 8), 8, move |g, v| {
        g.scoped("h", |g| head(g, &FeaturePyramid::new(v.to_vec()), variant, 3))
    })
}

fn loss_case(bce: bool) -> GradReport {
    let mut r = rng(9);
    let logits = randn([2, 3, 4, 4], &mut r);
    let target = uniform([2, 3, 4, 4], 0.0, 1.0, &mut r);
    let mask = vec![1.0, 0.0, 1.0, 1.0, 0.5, 1.0];
    let d = ParamDecls::new();
    grad_check(&d, &[logits], Mode::Train, 96, 9, move |g, v| {
        if bce {
            g.bce_with_logits(v[0], &target, Some(&mask))
        } else {
            g.mse_loss(v[0], &target, Some(&mask))
        }
    })
}

pub fn grad_mse() -> GradReport {
    loss_case(false)
}

pub fn grad_bce() -> GradReport {
    loss_case(true)
}

pub fn grad_toy_network() -> GradReport {
    let cfg = NetworkConfig::preset("toy").unwrap();
    let model = hrmark::Model::new(cfg).unwrap();
    let x = uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng(10));
    let m = &model;
    grad_check(model.declarations(), &[x], Mode::Train, 2, 10, move |g, v| m.forward(g, v[0]))
}

/// Every gradient battery with a display name.
pub fn gradient_cases() -> Vec<(&'static str, fn() -> GradReport)> {
    vec![
        ("stem", grad_stem),
        ("transition", grad_transition),
        ("ccw (2 branches)", grad_ccw_two_branches),
        ("ccw (3 branches)", grad_ccw_three_branches),
        ("SCAF low→high merge", grad_scaf_low_to_high),
        ("SCAF high→low merge", grad_scaf_high_to_low),
        ("fusion pw", || grad_fusion(FusionVariant::Pw)),
        ("fusion bottleneck", || grad_fusion(FusionVariant::Bottleneck)),
        ("fusion group_conv", || grad_fusion(FusionVariant::GroupConv)),
        ("fusion scaf", || grad_fusion(FusionVariant::Scaf)),
        ("head v1", || grad_head(HeadVariant::V1)),
        ("head v2", || grad_head(HeadVariant::V2)),
        ("head mr", || grad_head(HeadVariant::Mr)),
        ("mse loss", grad_mse),
        ("bce loss", grad_bce),
        ("toy network", grad_toy_network),
    ]
}

/// A valid network with random depth, widths, variants and resolution.
pub fn random_config(seed: u64) -> NetworkConfig {
    let mut r = rng(seed);
    let r_ratio = [2, 4][r.random_range(0..2)];
    let branches = r.random_range(2..=4);
    let mut widths = Vec::new();
    let mut w = 2 * r_ratio * r.random_range(1..=3);
    for _ in 0..branches {
        widths.push(w);
        w += 2 * r_ratio * r.random_range(0..=2);
    }
    let stages = (1..branches)
        .map(|_| StageSpec { modules: r.random_range(1..=2), ccw_per_module: r.random_range(1..=2) })
        .collect();
    let div = 4 << (branches - 1);
    let input_size = div * r.random_range(1..=3);
    NetworkConfig {
        input_size: input_size.max(16),
        stem_width: 2 * r.random_range(2..=6),
        branch_widths: widths,
        stages,
        fusion: FusionVariant::ALL[r.random_range(0..4)],
        head: HeadVariant::ALL[r.random_range(0..3)],
        landmarks: r.random_range(1..=12),
        reduction_ratio: r_ratio,
        dtype: hrmark::DType::F32,
    }
}

/// Runs `config` once and compares the executed trace with the static profile:
/// every row identical, and equal totals. Returns (executed MACs, profiled MACs).
pub fn cross_check(config: &NetworkConfig) -> Result<(u64, u64), String> {
    let (model, params) = build::<f32>(config, 0).map_err(|e| e.to_string())?;
    let s = config.input_size;
    let x = Tensor::<f32>::from_fn([1, 3, s, s], |_, c, h, w| ((c + h * 3 + w * 7) % 11) as f32 / 11.0);
    let mut g = Graph::with_params(&params);
    g.set_mode(Mode::Infer);
    let xv = g.input(x);
    model.forward(&mut g, xv).map_err(|e| e.to_string())?;
    let report = profile(config).map_err(|e| e.to_string())?;
    if let Some(m) = trace_mismatch(g.trace(), &report.rows) {
        return Err(m);
    }
    let executed: u64 = g.trace().iter().map(|r| r.macs).sum();
    if executed != report.total.macs {
        return Err(format!("executed {executed} MACs, profiled {}", report.total.macs));
    }
    if params.num_params() as u64 != report.total.params {
        return Err(format!("model has {} params, profiled {}", params.num_params(), report.total.params));
    }
    Ok((executed, report.total.macs))
}

/// One random (N, M, H, W, r) tuple per seed; checks the profiler's count for a
/// 1×1 convolution N→M on H×W against N·M·H·W, and its count for one SCAF
/// attention stack on M channels against 2·M²/r. Executed graph counts are
/// compared too.
pub fn formula_fidelity(tuples: usize, seed: u64) -> Result<(), String> {
    use hrmark::cost::Ledger;
    use hrmark::ConvSpec;
    let mut r = rng(seed);
    for t in 0..tuples {
        let n = r.random_range(1..=512usize);
        let rr = [1, 2, 4, 8, 16][r.random_range(0..5)];
        let m = rr * r.random_range(1..=64usize);
        let h = r.random_range(1..=96usize);
        let w = r.random_range(1..=96usize);

        let mut l = Ledger::new();
        l.conv([1, n, h, w], ConvSpec::pointwise(n, m)).map_err(|e| e.to_string())?;
        let pw = l.rows()[0].macs;
        if pw != (n * m * h * w) as u64 {
            return Err(format!("tuple {t}: 1x1 conv {n}->{m} on {h}x{w}: {pw} != NMHW"));
        }

        let mut l = Ledger::new();
        hrmark::cost::symbolic::scaf_attention(&mut l, [1, m, h, w], &ScafConfig::new(rr))
            .map_err(|e| e.to_string())?;
        let att: u64 = l.rows().iter().map(|row| row.macs).sum();
        if att != (2 * m * m / rr) as u64 {
            return Err(format!("tuple {t}: SCAF attention M={m} r={rr}: {att} != 2M^2/r"));
        }
        let formula = ScafConfig::new(rr).attention_macs(m).map_err(|e| e.to_string())?;
        if formula != att {
            return Err(format!("tuple {t}: ScafConfig::attention_macs {formula} != ledger {att}"));
        }

        // Executed graph for small tuples.
        if n * m * h * w <= 200_000 {
            let mut g = Graph::<f32>::new();
            let x = g.input(Tensor::zeros([1, n, h, w]));
            let wt = g.input(Tensor::zeros([m, n, 1, 1]));
            g.conv2d(x, wt, None, ConvSpec::pointwise(n, m)).map_err(|e| e.to_string())?;
            if g.trace()[0].macs != pw {
                return Err(format!("tuple {t}: executed 1x1 conv count {} != {pw}", g.trace()[0].macs));
            }
        }
    }
    Ok(())
}

/// Runs `config` and returns the fusion-scope trace records.
pub fn fusion_trace(config: &NetworkConfig) -> Vec<hrmark::graph::OpRecord> {
    let (model, params) = build::<f32>(config, 0).unwrap();
    let s = config.input_size;
    let mut g = Graph::with_params(&params);
    g.set_mode(Mode::Infer);
    let x = g.input(Tensor::zeros([1, 3, s, s]));
    model.forward(&mut g, x).unwrap();
    g.trace().iter().filter(|r| r.path.contains(".fusion")).cloned().collect()
}

/// The SCAF fusion path executes no spatial convolution of any kernel size;
/// its only affine maps are fully connected layers on pooled (N, C, 1, 1)
/// vectors. Returns (fusion ops, fully connected ops, channel means).
pub fn scaf_has_no_pointwise_conv(config: &NetworkConfig) -> Result<(usize, usize, usize), String> {
    use hrmark::graph::OpKind;
    let mut config = config.clone();
    config.fusion = FusionVariant::Scaf;
    let ops = fusion_trace(&config);
    if ops.is_empty() {
        return Err("no fusion ops executed".into());
    }
    for op in &ops {
        if matches!(op.kind, OpKind::Conv { .. }) {
            return Err(format!("{}: {} in SCAF fusion", op.path, op.kind.name()));
        }
        if op.kind == OpKind::Fc && (op.output[2], op.output[3]) != (1, 1) {
            return Err(format!("{}: fully connected on a spatial map {:?}", op.path, op.output));
        }
    }
    let fc = ops.iter().filter(|o| o.kind == OpKind::Fc).count();
    let cm = ops.iter().filter(|o| o.kind == OpKind::ChannelMean).count();
    if fc == 0 || cm == 0 {
        return Err(format!("expected attention and channel-mean ops, found {fc} fc / {cm} channel means"));
    }
    // The same inspection sees the pointwise convolutions of the PW baseline.
    config.fusion = FusionVariant::Pw;
    let pw = fusion_trace(&config).iter().filter(|o| o.kind.is_pointwise_conv()).count();
    if pw == 0 {
        return Err("inspection found no 1x1 convolution in the PW baseline either".into());
    }
    Ok((ops.len(), fc, cm))
}

fn random_landmarks(r: &mut impl Rng, l: usize) -> hrmark::train::LandmarkSet {
    hrmark::train::LandmarkSet::new(
        (0..l).map(|_| [r.random_range(-50.0..250.0), r.random_range(-50.0..250.0)]).collect(),
    )
}

/// NME straight from its definition, written out with plain loops.
pub fn nme_reference(pred: &[[f64; 2]], truth: &[[f64; 2]], norm: (usize, usize)) -> f64 {
    let mut sum = 0.0;
    for k in 0..truth.len() {
        let dx = pred[k][0] - truth[k][0];
        let dy = pred[k][1] - truth[k][1];
        sum += (dx * dx + dy * dy).sqrt();
    }
    let (a, b) = (truth[norm.0], truth[norm.1]);
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    sum / truth.len() as f64 / d
}

/// Largest gap between the evaluator and the loop reference over `samples`
/// random prediction/truth pairs.
pub fn nme_oracle_error(samples: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let l = r.random_range(3..=98);
        let truth = random_landmarks(&mut r, l);
        let pred = random_landmarks(&mut r, l);
        let norm = (r.random_range(0..l), r.random_range(0..l));
        if norm.0 == norm.1 {
            continue;
        }
        let got = hrmark::eval::nme(&pred, &truth, norm).unwrap();
        let want = nme_reference(&pred.points, &truth.points, norm);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    worst
}

/// Largest NME change when prediction and truth move together under a random
/// rotation, translation and uniform scale.
pub fn nme_rigid_error(samples: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let l = r.random_range(3..=98);
        let truth = random_landmarks(&mut r, l);
        let pred = hrmark::train::LandmarkSet::new(
            truth.points.iter().map(|&[x, y]| [x + r.random_range(-5.0..5.0), y + r.random_range(-5.0..5.0)]).collect(),
        );
        let norm = (0, l - 1);
        let before = hrmark::eval::nme(&pred, &truth, norm).unwrap();
        let theta: f64 = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let s: f64 = r.random_range(0.2..5.0);
        let (tx, ty): (f64, f64) = (r.random_range(-300.0..300.0), r.random_range(-300.0..300.0));
        let (sin, cos) = theta.sin_cos();
        let t = |[x, y]: [f64; 2]| [s * (cos * x - sin * y) + tx, s * (sin * x + cos * y) + ty];
        let after = hrmark::eval::nme(&pred.map(t), &truth.map(t), norm).unwrap();
        worst = worst.max((after - before).abs());
    }
    worst
}

/// The toy training recipe on a fresh synthetic 200/50 split.
pub fn toy_training_run(seed: u64) -> (hrmark::train::TrainOutcome<f32>, std::time::Duration) {
    let mut rc = hrmark::RunConfig::toy_train();
    rc.train.seed = seed;
    let (train, val) = hrmark::train::synth_split(200, 50, seed);
    let (model, params) = build::<f32>(&rc.network, seed).unwrap();
    let norm = rc.norm().unwrap();
    let t = std::time::Instant::now();
    let out = hrmark::train::train(&model, params, &train, Some(&val), &rc.train, norm, |_| {}).unwrap();
    (out, t.elapsed())
}

/// Number of strict decreases in an lr trace, or None if it ever rises.
pub fn lr_decays(trace: &[f64]) -> Option<usize> {
    let mut n = 0;
    for w in trace.windows(2) {
        if w[1] > w[0] {
            return None;
        }
        if w[1] < w[0] {
            n += 1;
        }
    }
    Some(n)
}

/// Largest gap between the graph convolution and direct loops over `cases`
/// random kernel, stride, padding and group settings.
pub fn conv_oracle_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let groups = [1, 2, 4][r.random_range(0..3)];
        let cin = groups * r.random_range(1..4);
        let cout = groups * r.random_range(1..4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2 + 1);
        let h = r.random_range(k.max(2)..10);
        let w = r.random_range(k.max(2)..10);
        let spec = ConvSpec::new(cin, cout, k)
            .stride(stride)
            .padding(pad)
            .groups(groups)
            .bias(r.random_bool(0.5));
        let x = randn([2, cin, h, w], &mut r);
        let wt = randn(spec.weight_shape(), &mut r);
        let b = spec.has_bias.then(|| randn([1, cout, 1, 1], &mut r));
        let got = graph_conv(&x, &wt, b.as_ref(), spec);
        let want = conv(&Arr::of(&x), &Arr::of(&wt), b.as_ref().map(|b| b.data()), stride, pad, groups);
        worst = worst.max(want.max_abs_diff(&got));
    }
    worst
}

/// Largest gap between the toy network and its straight-line reimplementation.
pub fn toy_oracle_error(seed: u64) -> f64 {
    let cfg = NetworkConfig::preset("toy").unwrap();
    let (model, mut params) = build::<f64>(&cfg, seed).unwrap();
    randomize(&mut params, seed + 1);
    let img = uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng(seed + 2));
    let mut g = Graph::with_params(&params);
    g.set_mode(Mode::Infer);
    let x = g.input(img.clone());
    let y = model.forward(&mut g, x).unwrap();
    toy_forward(&P(&params), &Arr::of(&img)).max_abs_diff(g.value(y))
}


pub fn graph_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv, spec).unwrap();
    g.value(y).clone()
}
