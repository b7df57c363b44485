//! Parameterized layers shared by every block: each forward helper has a
//! `declare_*` twin that registers the same names in a [`ParamDecls`].

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::network::ParamDecls;
use crate::tensor::{ConvSpec, Scalar};

pub fn conv<T: Scalar>(g: &mut Graph<'_, T>, x: Var, name: &str, spec: ConvSpec) -> Result<Var> {
    g.scoped(name, |g| {
        let w = g.param("weight")?;
        let b = if spec.has_bias {
            Some(g.param("bias")?)
        } else {
            None
        };
        g.conv2d(x, w, b, spec)
    })
}

pub fn declare_conv(d: &mut ParamDecls, name: &str, spec: ConvSpec) {
    d.scoped(name, |d| d.conv(&spec));
}

pub fn batch_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    g.scoped(name, |g| {
        let gamma = g.param("gamma")?;
        let beta = g.param("beta")?;
        match g.mode() {
            Mode::Infer => {
                let mean = g.buffer("running_mean")?;
                let var = g.buffer("running_var")?;
                Ok(g.batch_norm(x, gamma, beta, Some((mean.data(), var.data())))?.0)
            }
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, None)?;
                if let Some(stats) = stats {
                    let prefix = g.path("");
                    g.record_stat_update(prefix, stats);
                }
                Ok(y)
            }
        }
    })
}

pub fn declare_batch_norm(d: &mut ParamDecls, name: &str, channels: usize) {
    d.scoped(name, |d| d.batch_norm(channels));
}

/// Convolution (no bias) → batch norm → optional ReLU, all under scope `name`.
pub fn conv_bn<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    name: &str,
    spec: ConvSpec,
    relu: bool,
) -> Result<Var> {
    g.scoped(name, |g| {
        let w = g.param("weight")?;
        let y = g.conv2d(x, w, None, spec)?;
        let y = batch_norm(g, y, "bn")?;
        if relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    })
}

pub fn declare_conv_bn(d: &mut ParamDecls, name: &str, spec: ConvSpec) {
    d.scoped(name, |d| {
        d.conv(&spec.bias(false));
        d.scoped("bn", |d| d.batch_norm(spec.out_channels));
    });
}

/// Fully connected layer with bias on an (N, C, 1, 1) input.
pub fn fc<T: Scalar>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    g.scoped(name, |g| {
        let w = g.param("weight")?;
        let b = g.param("bias")?;
        g.fc(x, w, Some(b))
    })
}

pub fn declare_fc(d: &mut ParamDecls, name: &str, in_features: usize, out_features: usize) {
    d.scoped(name, |d| d.conv(&ConvSpec::pointwise(in_features, out_features).bias(true)));
}

/// Two-layer gate `sigmoid(fc2(relu(fc1(v))))` on a pooled (N, C, 1, 1) vector.
pub fn gate<T: Scalar>(g: &mut Graph<'_, T>, pooled: Var) -> Result<Var> {
    let h = fc(g, pooled, "fc1")?;
    let h = g.relu(h)?;
    let a = fc(g, h, "fc2")?;
    g.sigmoid(a)
}

pub fn declare_gate(d: &mut ParamDecls, channels: usize, hidden: usize) {
    declare_fc(d, "fc1", channels, hidden);
    declare_fc(d, "fc2", hidden, channels);
}
