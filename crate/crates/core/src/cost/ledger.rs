//! Shape-only mirror of the graph operations. Each call appends one row with
//! the same path, kind and per-sample counts that the executed graph records.

use serde::{Deserialize, Serialize};

use super::Family;
use crate::error::{Error, Result};
use crate::graph::{OpKind, ResizeMode};
use crate::kernels::Broadcast;
use crate::tensor::{numel, ConvSpec, Shape};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub path: String,
    pub family: Family,
    pub kind: OpKind,
    pub macs: u64,
    pub params: u64,
    pub overhead: u64,
    pub output: Shape,
}

#[derive(Debug, Default, Clone)]
pub struct Ledger {
    rows: Vec<CostRow>,
    scope: Vec<String>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[CostRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<CostRow> {
        self.rows
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn push(&mut self, kind: OpKind, out: Shape, macs: u64, params: u64, overhead: u64) -> Shape {
        let path = self.scope.join(".");
        self.rows.push(CostRow {
            family: Family::of_path(&path),
            path,
            kind,
            macs,
            params,
            overhead,
            output: out,
        });
        out
    }

    pub fn conv(&mut self, x: Shape, spec: ConvSpec) -> Result<Shape> {
        self.conv_like(x, spec, None)
    }

    fn conv_like(&mut self, x: Shape, spec: ConvSpec, kind: Option<OpKind>) -> Result<Shape> {
        spec.validate()?;
        if x[1] != spec.in_channels {
            return Err(Error::config(format!(
                "{}: input has {} channels, spec expects {}",
                self.scope.join("."),
                x[1],
                spec.in_channels
            )));
        }
        let (ho, wo) = spec.output_size(x[2], x[3])?;
        let out = [x[0], spec.out_channels, ho, wo];
        let kind = kind.unwrap_or(OpKind::Conv {
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            groups: spec.groups,
        });
        let overhead = if spec.has_bias { numel(out) as u64 } else { 0 };
        Ok(self.push(kind, out, spec.macs(ho, wo), spec.param_count(), overhead))
    }

    pub fn fc(&mut self, x: Shape, out_features: usize) -> Result<Shape> {
        if x[2] != 1 || x[3] != 1 {
            return Err(Error::config(format!(
                "fully connected input must be (N, C, 1, 1), got {x:?}"
            )));
        }
        let spec = ConvSpec::pointwise(x[1], out_features).bias(true);
        self.conv_like(x, spec, Some(OpKind::Fc))
    }

    pub fn batch_norm(&mut self, x: Shape) -> Shape {
        self.push(OpKind::BatchNorm, x, 0, 2 * x[1] as u64, numel(x) as u64)
    }

    pub fn relu(&mut self, x: Shape) -> Shape {
        self.push(OpKind::Relu, x, 0, 0, numel(x) as u64)
    }

    pub fn sigmoid(&mut self, x: Shape) -> Shape {
        self.push(OpKind::Sigmoid, x, 0, 0, numel(x) as u64)
    }

    pub fn add(&mut self, a: Shape, b: Shape) -> Result<Shape> {
        let out = Broadcast::resolve(a, b)?.out;
        Ok(self.push(OpKind::Add, out, 0, 0, numel(out) as u64))
    }

    pub fn mul(&mut self, a: Shape, b: Shape) -> Result<Shape> {
        let out = Broadcast::resolve(a, b)?.out;
        Ok(self.push(OpKind::Mul, out, 0, 0, numel(out) as u64))
    }

    pub fn channel_mean(&mut self, x: Shape) -> Shape {
        let out = [x[0], 1, x[2], x[3]];
        self.push(OpKind::ChannelMean, out, 0, 0, numel(out) as u64)
    }

    pub fn spatial_gap(&mut self, x: Shape) -> Shape {
        let out = [x[0], x[1], 1, 1];
        self.push(OpKind::SpatialGap, out, 0, 0, numel(out) as u64)
    }

    pub fn resize(&mut self, x: Shape, factor: usize, mode: ResizeMode) -> Result<Shape> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(Error::config(format!(
                "resize factor must be a power of two, got {factor}"
            )));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (out, kind) = match mode {
            ResizeMode::Nearest | ResizeMode::Bilinear => {
                ([x[0], x[1], x[2] * factor, x[3] * factor], OpKind::Upsample)
            }
            ResizeMode::AveragePool => {
                if x[2] % factor != 0 || x[3] % factor != 0 {
                    return Err(Error::config(format!(
                        "cannot average-pool {}x{} by {factor}",
                        x[2], x[3]
                    )));
                }
                ([x[0], x[1], x[2] / factor, x[3] / factor], OpKind::AvgPool)
            }
        };
        Ok(self.push(kind, out, 0, 0, numel(out) as u64))
    }

    pub fn split(&mut self, x: Shape, len: usize) -> Shape {
        self.push(OpKind::Split, [x[0], len, x[2], x[3]], 0, 0, 0)
    }

    pub fn concat(&mut self, xs: &[Shape]) -> Result<Shape> {
        let first = xs
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        if xs.iter().any(|s| s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
            return Err(Error::config(format!("cannot concat shapes {xs:?}")));
        }
        let c = xs.iter().map(|s| s[1]).sum();
        Ok(self.push(OpKind::Concat, [first[0], c, first[2], first[3]], 0, 0, 0))
    }

    pub fn shuffle(&mut self, x: Shape, groups: usize) -> Result<Shape> {
        if groups == 0 || x[1] % groups != 0 {
            return Err(Error::config(format!(
                "channel shuffle: {} channels not divisible by {groups} groups",
                x[1]
            )));
        }
        Ok(self.push(OpKind::Shuffle, x, 0, 0, 0))
    }

    // Layer helpers mirroring `blocks::layers`.

    pub fn conv_named(&mut self, x: Shape, name: &str, spec: ConvSpec) -> Result<Shape> {
        self.scoped(name, |l| l.conv(x, spec))
    }

    pub fn conv_bn(&mut self, x: Shape, name: &str, spec: ConvSpec, relu: bool) -> Result<Shape> {
        self.scoped(name, |l| {
            let y = l.conv(x, spec.bias(false))?;
            let y = l.scoped("bn", |l| l.batch_norm(y));
            Ok(if relu { l.relu(y) } else { y })
        })
    }

    pub fn fc_named(&mut self, x: Shape, name: &str, out_features: usize) -> Result<Shape> {
        self.scoped(name, |l| l.fc(x, out_features))
    }

    pub fn gate(&mut self, pooled: Shape, hidden: usize) -> Result<Shape> {
        let h = self.fc_named(pooled, "fc1", hidden)?;
        let h = self.relu(h);
        let a = self.fc_named(h, "fc2", pooled[1])?;
        Ok(self.sigmoid(a))
    }
}
