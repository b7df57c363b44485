//! Shape-level twins of the block forward functions, recording into a [`Ledger`].

use super::ledger::Ledger;
use crate::blocks::{ccw_hidden_widths, pair_scope, FusionVariant, HeadVariant, ScafConfig, StemSpec};
use crate::error::{Error, Result};
use crate::graph::ResizeMode;
use crate::network::{NetworkConfig, IMAGE_CHANNELS};
use crate::tensor::{ConvSpec, Shape};

fn ratio(high: Shape, low: Shape) -> Result<usize> {
    crate::blocks::resolution_ratio(high, low)
}

pub fn stem(l: &mut Ledger, image: Shape, spec: &StemSpec) -> Result<Vec<Shape>> {
    spec.validate()?;
    let h = spec.stem_width / 2;
    let half_out = spec.out_width / 2;
    let x = l.conv_bn(image, "conv1", ConvSpec::new(spec.in_channels, spec.stem_width, 3).stride(2), true)?;
    let a = l.split(x, h);
    let b = l.split(x, h);
    let a = l.scoped("branch_a", |l| {
        let a = l.conv_bn(a, "dw", ConvSpec::depthwise(h, 3, 2), false)?;
        l.conv_bn(a, "pw", ConvSpec::pointwise(h, half_out), true)
    })?;
    let b = l.scoped("branch_b", |l| {
        let b = l.conv_bn(b, "expand", ConvSpec::pointwise(h, h), true)?;
        let b = l.conv_bn(b, "dw", ConvSpec::depthwise(h, 3, 2), false)?;
        l.conv_bn(b, "pw", ConvSpec::pointwise(h, half_out), true)
    })?;
    let y = l.concat(&[a, b])?;
    Ok(vec![l.shuffle(y, 2)?])
}

pub fn ccw(l: &mut Ledger, p: &[Shape], reduction: usize) -> Result<Vec<Shape>> {
    let widths: Vec<usize> = p.iter().map(|s| s[1]).collect();
    if let Some((i, c)) = widths.iter().enumerate().find(|(_, c)| **c % 2 != 0) {
        return Err(Error::config(format!("branch {i} has odd width {c}")));
    }
    let (crw_hidden, sw_hidden) = ccw_hidden_widths(&widths, reduction);
    let mut x1 = Vec::new();
    let mut x2 = Vec::new();
    for &s in p {
        x1.push(l.split(s, s[1] / 2));
        x2.push(l.split(s, s[1] / 2));
    }
    let x2 = l.scoped("crw", |l| -> Result<Vec<Shape>> {
        let smallest = *x2.last().expect("at least one branch");
        let mut pooled = Vec::new();
        for &s in &x2 {
            pooled.push(l.resize(s, s[2] / smallest[2], ResizeMode::AveragePool)?);
        }
        let cat = l.concat(&pooled)?;
        let total = cat[1];
        let a = l.conv_named(cat, "conv1", ConvSpec::pointwise(total, crw_hidden).bias(true))?;
        let a = l.relu(a);
        let a = l.conv_named(a, "conv2", ConvSpec::pointwise(crw_hidden, total).bias(true))?;
        let a = l.sigmoid(a);
        let mut out = Vec::new();
        for &s in &x2 {
            let w = l.split(a, s[1]);
            let w = l.resize(w, s[2] / smallest[2], ResizeMode::Nearest)?;
            out.push(l.mul(s, w)?);
        }
        Ok(out)
    })?;
    let mut out = Vec::new();
    for (i, &s) in x2.iter().enumerate() {
        let h = s[1];
        let y = l.scoped(format!("b{i}"), |l| -> Result<Shape> {
            let y = l.conv_bn(s, "dw", ConvSpec::depthwise(h, 3, 1), false)?;
            l.scoped("sw", |l| {
                let pooled = l.spatial_gap(y);
                let a = l.gate(pooled, sw_hidden[i])?;
                l.mul(y, a)
            })
        })?;
        let cat = l.concat(&[x1[i], y])?;
        out.push(l.shuffle(cat, 2)?);
    }
    Ok(out)
}

pub fn transition(l: &mut Ledger, p: &[Shape], new_width: usize) -> Result<Vec<Shape>> {
    let last = *p.last().ok_or_else(|| Error::config("transition needs at least one branch"))?;
    let c = last[1];
    let y = l.conv_bn(last, "dw", ConvSpec::depthwise(c, 3, 2), false)?;
    let y = l.conv_bn(y, "pw", ConvSpec::pointwise(c, new_width), true)?;
    let mut out = p.to_vec();
    out.push(y);
    Ok(out)
}

fn aligned(
    l: &mut Ledger,
    x: Shape,
    out: usize,
    variant: FusionVariant,
    cfg: &ScafConfig,
) -> Result<Shape> {
    let cin = x[1];
    match variant {
        FusionVariant::Pw => l.conv_bn(x, "conv", ConvSpec::pointwise(cin, out), false),
        FusionVariant::Bottleneck => {
            let mid = cfg.hidden(out)?;
            let y = l.conv_bn(x, "reduce", ConvSpec::pointwise(cin, mid), true)?;
            l.conv_bn(y, "expand", ConvSpec::pointwise(mid, out), false)
        }
        FusionVariant::GroupConv => {
            let spec = ConvSpec::pointwise(cin, out).groups(cfg.reduction_ratio);
            l.conv_bn(x, "conv", spec, false)
        }
        FusionVariant::Scaf => unreachable!("SCAF has no channel alignment"),
    }
}

/// SCAF attention path of one merge: gap(receiver) → fc → relu → fc → sigmoid.
pub fn scaf_attention(l: &mut Ledger, receiver: Shape, cfg: &ScafConfig) -> Result<Shape> {
    let hidden = cfg.hidden(receiver[1])?;
    let pooled = l.spatial_gap(receiver);
    l.gate(pooled, hidden)
}

pub fn scaf_low_to_high(l: &mut Ledger, low: Shape, high: Shape, cfg: &ScafConfig) -> Result<Shape> {
    let f = ratio(high, low)?;
    let att = scaf_attention(l, high, cfg)?;
    let m = l.channel_mean(low);
    let w = l.mul(m, att)?;
    l.resize(w, f, ResizeMode::Nearest)
}

pub fn scaf_high_to_low(l: &mut Ledger, high: Shape, low: Shape, cfg: &ScafConfig) -> Result<Shape> {
    let f = ratio(high, low)?;
    let att = scaf_attention(l, low, cfg)?;
    let m = l.channel_mean(high);
    let m = l.resize(m, f, ResizeMode::AveragePool)?;
    l.mul(m, att)
}

pub fn fuse(l: &mut Ledger, p: &[Shape], variant: FusionVariant, reduction: usize) -> Result<Vec<Shape>> {
    let n = p.len();
    if n < 2 {
        return Ok(p.to_vec());
    }
    let cfg = ScafConfig::new(reduction);
    let mut out = p.to_vec();
    for to in 0..n {
        let mut acc = p[to];
        for from in (0..n).filter(|&j| j != to) {
            let (src, dst) = (p[from], p[to]);
            let c = l.scoped(pair_scope(from, to), |l| -> Result<Shape> {
                match (variant, from > to) {
                    (FusionVariant::Scaf, true) => scaf_low_to_high(l, src, dst, &cfg),
                    (FusionVariant::Scaf, false) => scaf_high_to_low(l, src, dst, &cfg),
                    (_, true) => {
                        let f = ratio(dst, src)?;
                        let y = aligned(l, src, dst[1], variant, &cfg)?;
                        l.resize(y, f, ResizeMode::Nearest)
                    }
                    (_, false) => {
                        let f = ratio(src, dst)?;
                        let y = l.resize(src, f, ResizeMode::AveragePool)?;
                        aligned(l, y, dst[1], variant, &cfg)
                    }
                }
            })?;
            acc = l.add(acc, c)?;
        }
        out[to] = acc;
    }
    Ok(out)
}

pub fn head(l: &mut Ledger, p: &[Shape], variant: HeadVariant, landmarks: usize) -> Result<Shape> {
    let top = p[0];
    match variant {
        HeadVariant::V1 => l.conv_named(top, "conv", ConvSpec::pointwise(top[1], landmarks).bias(true)),
        HeadVariant::V2 => {
            let mut ups = Vec::new();
            for &s in p {
                ups.push(l.resize(s, ratio(top, s)?, ResizeMode::Bilinear)?);
            }
            let cat = l.concat(&ups)?;
            let total = cat[1];
            let y = l.conv_bn(cat, "fuse", ConvSpec::pointwise(total, total), true)?;
            l.conv_named(y, "conv", ConvSpec::pointwise(total, landmarks).bias(true))
        }
        HeadVariant::Mr => {
            let mut acc: Option<Shape> = None;
            for (i, &s) in p.iter().enumerate() {
                let f = ratio(top, s)?;
                let y = l.scoped(format!("b{i}"), |l| {
                    l.conv_named(s, "conv", ConvSpec::pointwise(s[1], landmarks).bias(true))
                })?;
                let y = l.resize(y, f, ResizeMode::Bilinear)?;
                acc = Some(match acc {
                    Some(a) => l.add(a, y)?,
                    None => y,
                });
            }
            Ok(acc.expect("at least one branch"))
        }
    }
}

/// Whole network for one sample, same scope layout as `Model::forward`.
pub fn network(l: &mut Ledger, c: &NetworkConfig) -> Result<Shape> {
    c.validate()?;
    let image = [1, IMAGE_CHANNELS, c.input_size, c.input_size];
    let mut p = l.scoped("stem", |l| stem(l, image, &c.stem_spec()))?;
    for (si, stage) in c.stages.iter().enumerate() {
        p = l.scoped(format!("stage{si}"), |l| -> Result<Vec<Shape>> {
            let mut p = l.scoped("transition", |l| transition(l, &p, c.branch_widths[si + 1]))?;
            for m in 0..stage.modules {
                p = l.scoped(format!("module{m}"), |l| -> Result<Vec<Shape>> {
                    let mut p = p.clone();
                    for k in 0..stage.ccw_per_module {
                        p = l.scoped(format!("ccw{k}"), |l| ccw(l, &p, c.reduction_ratio))?;
                    }
                    l.scoped("fusion", |l| fuse(l, &p, c.fusion, c.reduction_ratio))
                })?;
            }
            Ok(p)
        })?;
    }
    l.scoped("head", |l| head(l, &p, c.head, c.landmarks))
}
