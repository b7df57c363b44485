use super::layers::{conv_bn, declare_conv_bn, declare_gate, gate};
use super::{resolution_ratio, FeaturePyramid, FusionVariant, ScafConfig};
use crate::error::Result;
use crate::graph::{Graph, ResizeMode, Var};
use crate::network::ParamDecls;
use crate::tensor::{ConvSpec, Scalar};

/// Scope of the parameters carrying branch `from` into branch `to`.
pub fn pair_scope(from: usize, to: usize) -> String {
    format!("{from}to{to}")
}

/// `upsample(channel_mean(low) ⊙ attention(high))`, shaped like `high`.
/// Attention parameters (`fc1`, `fc2`) are read from the current scope.
pub fn scaf_contribution_low_to_high<T: Scalar>(
    g: &mut Graph<'_, T>,
    low: Var,
    high: Var,
    cfg: &ScafConfig,
) -> Result<Var> {
    let factor = resolution_ratio(g.shape(high), g.shape(low))?;
    cfg.hidden(g.shape(high)[1])?;
    let pooled = g.spatial_gap(high)?;
    let att = gate(g, pooled)?;
    let m = g.channel_mean(low)?;
    let weighted = g.mul(m, att)?;
    g.resize(weighted, factor, ResizeMode::Nearest)
}

/// `avg_pool(channel_mean(high)) ⊙ attention(low)`, shaped like `low`.
pub fn scaf_contribution_high_to_low<T: Scalar>(
    g: &mut Graph<'_, T>,
    high: Var,
    low: Var,
    cfg: &ScafConfig,
) -> Result<Var> {
    let factor = resolution_ratio(g.shape(high), g.shape(low))?;
    cfg.hidden(g.shape(low)[1])?;
    let pooled = g.spatial_gap(low)?;
    let att = gate(g, pooled)?;
    let m = g.channel_mean(high)?;
    let m = g.resize(m, factor, ResizeMode::AveragePool)?;
    g.mul(m, att)
}

pub fn scaf_merge_low_to_high<T: Scalar>(
    g: &mut Graph<'_, T>,
    low: Var,
    high: Var,
    cfg: &ScafConfig,
) -> Result<Var> {
    let c = scaf_contribution_low_to_high(g, low, high, cfg)?;
    g.add(high, c)
}

pub fn scaf_merge_high_to_low<T: Scalar>(
    g: &mut Graph<'_, T>,
    high: Var,
    low: Var,
    cfg: &ScafConfig,
) -> Result<Var> {
    let c = scaf_contribution_high_to_low(g, high, low, cfg)?;
    g.add(low, c)
}

/// Attention stack of one SCAF merge whose receiving branch has `receiver_width` channels.
pub fn declare_scaf(d: &mut ParamDecls, receiver_width: usize, cfg: &ScafConfig) -> Result<()> {
    declare_gate(d, receiver_width, cfg.hidden(receiver_width)?);
    Ok(())
}

fn aligned<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    out: usize,
    variant: FusionVariant,
    cfg: &ScafConfig,
) -> Result<Var> {
    let cin = g.shape(x)[1];
    match variant {
        FusionVariant::Pw => conv_bn(g, x, "conv", ConvSpec::pointwise(cin, out), false),
        FusionVariant::Bottleneck => {
            let mid = cfg.hidden(out)?;
            let y = conv_bn(g, x, "reduce", ConvSpec::pointwise(cin, mid), true)?;
            conv_bn(g, y, "expand", ConvSpec::pointwise(mid, out), false)
        }
        FusionVariant::GroupConv => {
            let spec = ConvSpec::pointwise(cin, out).groups(cfg.reduction_ratio);
            spec.validate()?;
            conv_bn(g, x, "conv", spec, false)
        }
        FusionVariant::Scaf => unreachable!("SCAF has no channel alignment"),
    }
}

fn contribution<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FeaturePyramid,
    from: usize,
    to: usize,
    variant: FusionVariant,
    cfg: &ScafConfig,
) -> Result<Var> {
    let (src, dst) = (p.branches[from], p.branches[to]);
    let out = g.shape(dst)[1];
    g.scoped(pair_scope(from, to), |g| {
        if variant == FusionVariant::Scaf {
            return if from > to {
                scaf_contribution_low_to_high(g, src, dst, cfg)
            } else {
                scaf_contribution_high_to_low(g, src, dst, cfg)
            };
        }
        // Channel alignment always runs at the lower of the two resolutions.
        if from > to {
            let factor = resolution_ratio(g.shape(dst), g.shape(src))?;
            let y = aligned(g, src, out, variant, cfg)?;
            g.resize(y, factor, ResizeMode::Nearest)
        } else {
            let factor = resolution_ratio(g.shape(src), g.shape(dst))?;
            let y = g.resize(src, factor, ResizeMode::AveragePool)?;
            aligned(g, y, out, variant, cfg)
        }
    })
}

fn fuse_in_order<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FeaturePyramid,
    variant: FusionVariant,
    reduction: usize,
    reversed: bool,
) -> Result<FeaturePyramid> {
    p.validate(g)?;
    let n = p.len();
    if n == 1 {
        return Ok(p.clone());
    }
    let cfg = ScafConfig::new(reduction);
    let order: Vec<usize> = if reversed {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    let mut out = p.branches.clone();
    for &to in &order {
        let mut acc = p.branches[to];
        for &from in order.iter().filter(|&&j| j != to) {
            let c = contribution(g, p, from, to, variant, &cfg)?;
            acc = g.add(acc, c)?;
        }
        out[to] = acc;
    }
    Ok(FeaturePyramid::new(out))
}

/// Every branch plus one contribution from each other branch, all computed
/// from the incoming pyramid.
pub fn fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FeaturePyramid,
    variant: FusionVariant,
    reduction: usize,
) -> Result<FeaturePyramid> {
    fuse_in_order(g, p, variant, reduction, false)
}

/// [`fuse`] with receivers and contributions visited in reverse order.
pub fn fuse_reversed<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FeaturePyramid,
    variant: FusionVariant,
    reduction: usize,
) -> Result<FeaturePyramid> {
    fuse_in_order(g, p, variant, reduction, true)
}

pub fn declare_fuse(
    d: &mut ParamDecls,
    widths: &[usize],
    variant: FusionVariant,
    reduction: usize,
) -> Result<()> {
    let cfg = ScafConfig::new(reduction);
    let n = widths.len();
    if n < 2 {
        return Ok(());
    }
    for to in 0..n {
        for from in (0..n).filter(|&j| j != to) {
            let (cin, out) = (widths[from], widths[to]);
            d.scoped(pair_scope(from, to), |d| -> Result<()> {
                match variant {
                    FusionVariant::Scaf => declare_scaf(d, out, &cfg)?,
                    FusionVariant::Pw => declare_conv_bn(d, "conv", ConvSpec::pointwise(cin, out)),
                    FusionVariant::Bottleneck => {
                        let mid = cfg.hidden(out)?;
                        declare_conv_bn(d, "reduce", ConvSpec::pointwise(cin, mid));
                        declare_conv_bn(d, "expand", ConvSpec::pointwise(mid, out));
                    }
                    FusionVariant::GroupConv => {
                        let spec = ConvSpec::pointwise(cin, out).groups(reduction);
                        spec.validate()?;
                        declare_conv_bn(d, "conv", spec);
                    }
                }
                Ok(())
            })?;
        }
    }
    Ok(())
}
