use super::layers::{conv, conv_bn, declare_conv, declare_conv_bn};
use super::{resolution_ratio, FeaturePyramid, HeadVariant};
use crate::error::{Error, Result};
use crate::graph::{Graph, ResizeMode, Var};
use crate::network::ParamDecls;
use crate::tensor::{ConvSpec, Scalar};

/// Heatmap logits (N, L, H0, W0) at the resolution of branch 0.
pub fn head<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FeaturePyramid,
    variant: HeadVariant,
    landmarks: usize,
) -> Result<Var> {
    p.validate(g)?;
    if landmarks == 0 {
        return Err(Error::config("landmarks must be at least 1"));
    }
    let top = g.shape(p.branches[0]);
    match variant {
        HeadVariant::V1 => {
            let spec = ConvSpec::pointwise(top[1], landmarks).bias(true);
            conv(g, p.branches[0], "conv", spec)
        }
        HeadVariant::V2 => {
            let mut ups = Vec::with_capacity(p.len());
            for &b in &p.branches {
                let f = resolution_ratio(top, g.shape(b))?;
                ups.push(g.resize(b, f, ResizeMode::Bilinear)?);
            }
            let cat = g.concat(&ups)?;
            let total = g.shape(cat)[1];
            let y = conv_bn(g, cat, "fuse", ConvSpec::pointwise(total, total), true)?;
            conv(g, y, "conv", ConvSpec::pointwise(total, landmarks).bias(true))
        }
        HeadVariant::Mr => {
            let mut acc: Option<Var> = None;
            for (i, &b) in p.branches.iter().enumerate() {
                let s = g.shape(b);
                let f = resolution_ratio(top, s)?;
                let y = g.scoped(format!("b{i}"), |g| {
                    conv(g, b, "conv", ConvSpec::pointwise(s[1], landmarks).bias(true))
                })?;
                let y = g.resize(y, f, ResizeMode::Bilinear)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, y)?,
                    None => y,
                });
            }
            Ok(acc.expect("pyramid validated as non-empty"))
        }
    }
}

pub fn declare_head(d: &mut ParamDecls, widths: &[usize], variant: HeadVariant, landmarks: usize) {
    match variant {
        HeadVariant::V1 => {
            declare_conv(d, "conv", ConvSpec::pointwise(widths[0], landmarks).bias(true));
        }
        HeadVariant::V2 => {
            let total: usize = widths.iter().sum();
            declare_conv_bn(d, "fuse", ConvSpec::pointwise(total, total));
            declare_conv(d, "conv", ConvSpec::pointwise(total, landmarks).bias(true));
        }
        HeadVariant::Mr => {
            for (i, &c) in widths.iter().enumerate() {
                d.scoped(format!("b{i}"), |d| {
                    declare_conv(d, "conv", ConvSpec::pointwise(c, landmarks).bias(true));
                });
            }
        }
    }
}
