use super::layers::{conv, conv_bn, declare_conv, declare_conv_bn, declare_gate, gate};
use super::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{Graph, ResizeMode, Var};
use crate::network::ParamDecls;
use crate::tensor::{ConvSpec, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemSpec {
    pub in_channels: usize,
    pub stem_width: usize,
    pub out_width: usize,
}

impl StemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.stem_width % 2 != 0 {
            return Err(Error::config(format!(
                "stem_width must be a positive even number, got {}",
                self.stem_width
            )));
        }
        if self.out_width == 0 || self.out_width % 2 != 0 {
            return Err(Error::config(format!(
                "branch_widths[0] must be a positive even number, got {}",
                self.out_width
            )));
        }
        Ok(())
    }
}

/// 3×3 stride-2 conv, then a shuffle unit whose two halves each go through a
/// stride-2 depthwise stage: (N, 3, 4h, 4w) → one branch (N, c0, h, w).
pub fn stem<T: Scalar>(g: &mut Graph<'_, T>, image: Var, spec: &StemSpec) -> Result<FeaturePyramid> {
    spec.validate()?;
    let s = g.shape(image);
    if s[1] != spec.in_channels {
        return Err(Error::config(format!(
            "stem expects {} input channels, got {}",
            spec.in_channels, s[1]
        )));
    }
    if s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::config(format!(
            "input size {}x{} is not divisible by 4",
            s[2], s[3]
        )));
    }
    let w = spec.stem_width;
    let h = w / 2;
    let half_out = spec.out_width / 2;
    let x = conv_bn(g, image, "conv1", ConvSpec::new(spec.in_channels, w, 3).stride(2), true)?;
    let a = g.split(x, 0, h)?;
    let b = g.split(x, h, h)?;
    let a = g.scoped("branch_a", |g| {
        let a = conv_bn(g, a, "dw", ConvSpec::depthwise(h, 3, 2), false)?;
        conv_bn(g, a, "pw", ConvSpec::pointwise(h, half_out), true)
    })?;
    let b = g.scoped("branch_b", |g| {
        let b = conv_bn(g, b, "expand", ConvSpec::pointwise(h, h), true)?;
        let b = conv_bn(g, b, "dw", ConvSpec::depthwise(h, 3, 2), false)?;
        conv_bn(g, b, "pw", ConvSpec::pointwise(h, half_out), true)
    })?;
    let y = g.concat(&[a, b])?;
    let y = g.shuffle(y, 2)?;
    Ok(FeaturePyramid::new(vec![y]))
}

pub fn declare_stem(d: &mut ParamDecls, spec: &StemSpec) {
    let w = spec.stem_width;
    let h = w / 2;
    let half_out = spec.out_width / 2;
    declare_conv_bn(d, "conv1", ConvSpec::new(spec.in_channels, w, 3).stride(2));
    d.scoped("branch_a", |d| {
        declare_conv_bn(d, "dw", ConvSpec::depthwise(h, 3, 2));
        declare_conv_bn(d, "pw", ConvSpec::pointwise(h, half_out));
    });
    d.scoped("branch_b", |d| {
        declare_conv_bn(d, "expand", ConvSpec::pointwise(h, h));
        declare_conv_bn(d, "dw", ConvSpec::depthwise(h, 3, 2));
        declare_conv_bn(d, "pw", ConvSpec::pointwise(h, half_out));
    });
}

/// Hidden widths of the ccw attention stacks: the cross-resolution stack
/// (over all half-widths concatenated) and one spatial stack per branch.
pub fn ccw_hidden_widths(widths: &[usize], reduction: usize) -> (usize, Vec<usize>) {
    let r = reduction.max(1);
    let total: usize = widths.iter().map(|c| c / 2).sum();
    let crw = (total / r).max(1);
    let sw = widths.iter().map(|c| ((c / 2) / r).max(1)).collect();
    (crw, sw)
}

/// Conditional channel weighting unit applied to every branch at once.
pub fn ccw_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FeaturePyramid,
    reduction: usize,
) -> Result<FeaturePyramid> {
    p.validate(g)?;
    let widths = p.widths(g);
    if let Some((i, c)) = widths.iter().enumerate().find(|(_, c)| **c % 2 != 0) {
        return Err(Error::config(format!("branch {i} has odd width {c}")));
    }
    let (crw_hidden, _) = ccw_hidden_widths(&widths, reduction);
    let n = p.len();

    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    for (&b, &c) in p.branches.iter().zip(&widths) {
        x1.push(g.split(b, 0, c / 2)?);
        x2.push(g.split(b, c / 2, c / 2)?);
    }

    let x2 = g.scoped("crw", |g| {
        let smallest = g.shape(x2[n - 1]);
        let mut pooled = Vec::with_capacity(n);
        for &v in &x2 {
            let f = g.shape(v)[2] / smallest[2];
            pooled.push(g.resize(v, f, ResizeMode::AveragePool)?);
        }
        let cat = g.concat(&pooled)?;
        let total: usize = widths.iter().map(|c| c / 2).sum();
        let a = conv(g, cat, "conv1", ConvSpec::pointwise(total, crw_hidden).bias(true))?;
        let a = g.relu(a)?;
        let a = conv(g, a, "conv2", ConvSpec::pointwise(crw_hidden, total).bias(true))?;
        let a = g.sigmoid(a)?;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        for (&v, &c) in x2.iter().zip(&widths) {
            let w = g.split(a, start, c / 2)?;
            start += c / 2;
            let f = g.shape(v)[2] / smallest[2];
            let w = g.resize(w, f, ResizeMode::Nearest)?;
            out.push(g.mul(v, w)?);
        }
        Ok::<_, Error>(out)
    })?;

    let mut out = Vec::with_capacity(n);
    for (i, (&v, &c)) in x2.iter().zip(&widths).enumerate() {
        let h = c / 2;
        let y = g.scoped(format!("b{i}"), |g| {
            let y = conv_bn(g, v, "dw", ConvSpec::depthwise(h, 3, 1), false)?;
            g.scoped("sw", |g| {
                let pooled = g.spatial_gap(y)?;
                let a = gate(g, pooled)?;
                g.mul(y, a)
            })
        })?;
        let cat = g.concat(&[x1[i], y])?;
        out.push(g.shuffle(cat, 2)?);
    }
    Ok(FeaturePyramid::new(out))
}

pub fn declare_ccw(d: &mut ParamDecls, widths: &[usize], reduction: usize) {
    let (crw_hidden, sw_hidden) = ccw_hidden_widths(widths, reduction);
    let total: usize = widths.iter().map(|c| c / 2).sum();
    d.scoped("crw", |d| {
        declare_conv(d, "conv1", ConvSpec::pointwise(total, crw_hidden).bias(true));
        declare_conv(d, "conv2", ConvSpec::pointwise(crw_hidden, total).bias(true));
    });
    for (i, (&c, &hidden)) in widths.iter().zip(&sw_hidden).enumerate() {
        let h = c / 2;
        d.scoped(format!("b{i}"), |d| {
            declare_conv_bn(d, "dw", ConvSpec::depthwise(h, 3, 1));
            d.scoped("sw", |d| declare_gate(d, h, hidden));
        });
    }
}

/// Appends a branch at half the last branch's resolution with `new_width` channels.
pub fn transition<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FeaturePyramid,
    new_width: usize,
) -> Result<FeaturePyramid> {
    let &last = p
        .branches
        .last()
        .ok_or_else(|| Error::config("transition needs at least one branch"))?;
    let s = g.shape(last);
    if s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::config(format!(
            "cannot halve a {}x{} branch in a transition",
            s[2], s[3]
        )));
    }
    let c = s[1];
    let y = conv_bn(g, last, "dw", ConvSpec::depthwise(c, 3, 2), false)?;
    let y = conv_bn(g, y, "pw", ConvSpec::pointwise(c, new_width), true)?;
    let mut branches = p.branches.clone();
    branches.push(y);
    Ok(FeaturePyramid::new(branches))
}

pub fn declare_transition(d: &mut ParamDecls, last_width: usize, new_width: usize) {
    declare_conv_bn(d, "dw", ConvSpec::depthwise(last_width, 3, 2));
    declare_conv_bn(d, "pw", ConvSpec::pointwise(last_width, new_width));
}
