//! The five block families of the network: stem, conditional channel
//! weighting (ccw), transition, fusion and output head.
//!
//! Every block comes as a pair: a forward function that records onto a
//! [`Graph`] and reads parameters by scoped name, and a `declare_*` function
//! that registers exactly those names and shapes. Callers choose the scope
//! (`stem`, `stage0.module1.fusion`, ...); blocks only add sub-scopes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Scalar;

mod backbone;
mod fusion;
mod head;
pub mod layers;

pub use backbone::{ccw_block, declare_ccw, declare_stem, declare_transition, stem, transition};
pub use backbone::{ccw_hidden_widths, StemSpec};
pub use fusion::{
    declare_fuse, declare_scaf, fuse, fuse_reversed, pair_scope, scaf_contribution_high_to_low,
    scaf_contribution_low_to_high, scaf_merge_high_to_low, scaf_merge_low_to_high,
};
pub use head::{declare_head, head};

/// Parallel branches, branch `i` at 1/2^i of branch 0's resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub branches: Vec<Var>,
}

impl FeaturePyramid {
    pub fn new(branches: Vec<Var>) -> Self {
        FeaturePyramid { branches }
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn widths<T: Scalar>(&self, g: &Graph<'_, T>) -> Vec<usize> {
        self.branches.iter().map(|&v| g.shape(v)[1]).collect()
    }

    /// Checks shared batch size and exact halving of spatial size per branch.
    pub fn validate<T: Scalar>(&self, g: &Graph<'_, T>) -> Result<()> {
        let Some(&first) = self.branches.first() else {
            return Err(Error::config("feature pyramid has no branches"));
        };
        let s0 = g.shape(first);
        for (i, &b) in self.branches.iter().enumerate().skip(1) {
            let s = g.shape(b);
            let prev = g.shape(self.branches[i - 1]);
            if s[0] != s0[0] {
                return Err(Error::config(format!(
                    "branch {i} has batch {} but branch 0 has {}",
                    s[0], s0[0]
                )));
            }
            if prev[2] != 2 * s[2] || prev[3] != 2 * s[3] {
                return Err(Error::config(format!(
                    "branch {i} is {}x{}, expected half of {}x{}",
                    s[2], s[3], prev[2], prev[3]
                )));
            }
        }
        Ok(())
    }
}

/// Reduction ratio `r` of the SCAF attention stack M → M/r → M.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScafConfig {
    pub reduction_ratio: usize,
}

impl ScafConfig {
    pub fn new(reduction_ratio: usize) -> Self {
        ScafConfig { reduction_ratio }
    }

    /// Hidden width M/r; `r` must divide `m`.
    pub fn hidden(&self, m: usize) -> Result<usize> {
        let r = self.reduction_ratio;
        if r == 0 || m % r != 0 || m < r {
            return Err(Error::config(format!(
                "SCAF reduction ratio {r} does not divide branch width {m}"
            )));
        }
        Ok(m / r)
    }

    /// Multiply-accumulates of the attention path: 2·M²/r.
    pub fn attention_macs(&self, m: usize) -> Result<u64> {
        let h = self.hidden(m)?;
        Ok(2 * (m * h) as u64)
    }
}

/// How branches exchange information in a fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// 1×1 convolution channel alignment (baseline).
    Pw,
    /// 1×1 reduce to M/r, 1×1 expand to M.
    Bottleneck,
    /// Grouped 1×1 convolution with r groups.
    GroupConv,
    /// Channel-mean maps gated by sigmoid channel attention.
    Scaf,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Pw,
        FusionVariant::Bottleneck,
        FusionVariant::GroupConv,
        FusionVariant::Scaf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::Pw => "pw",
            FusionVariant::Bottleneck => "bottleneck",
            FusionVariant::GroupConv => "group_conv",
            FusionVariant::Scaf => "scaf",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::Pw => "PW Conv",
            FusionVariant::Bottleneck => "Bottleneck",
            FusionVariant::GroupConv => "Group Conv",
            FusionVariant::Scaf => "SCAF",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pw" => Ok(FusionVariant::Pw),
            "bottleneck" => Ok(FusionVariant::Bottleneck),
            "group_conv" | "groupconv" | "group" => Ok(FusionVariant::GroupConv),
            "scaf" => Ok(FusionVariant::Scaf),
            _ => Err(Error::config(format!("unknown fusion variant `{s}`"))),
        }
    }
}

/// Output module producing one heatmap per landmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// 1×1 projection of the highest-resolution branch only.
    V1,
    /// Upsample + concatenate all branches, then project.
    V2,
    /// Per-branch 1×1 projection, upsampled and summed.
    Mr,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 3] = [HeadVariant::V1, HeadVariant::V2, HeadVariant::Mr];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::V1 => "v1",
            HeadVariant::V2 => "v2",
            HeadVariant::Mr => "mr",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HeadVariant::V1 => "V1",
            HeadVariant::V2 => "V2",
            HeadVariant::Mr => "MR",
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(HeadVariant::V1),
            "v2" => Ok(HeadVariant::V2),
            "mr" => Ok(HeadVariant::Mr),
            _ => Err(Error::config(format!("unknown head variant `{s}`"))),
        }
    }
}

/// `high / low` spatial ratio, required to be an exact power of two.
pub(crate) fn resolution_ratio(high: [usize; 4], low: [usize; 4]) -> Result<usize> {
    let ok = low[2] > 0
        && low[3] > 0
        && high[2] % low[2] == 0
        && high[3] % low[3] == 0
        && high[2] / low[2] == high[3] / low[3]
        && (high[2] / low[2]).is_power_of_two();
    if !ok {
        return Err(Error::config(format!(
            "spatial sizes {}x{} and {}x{} are not a power-of-two pair",
            high[2], high[3], low[2], low[3]
        )));
    }
    Ok(high[2] / low[2])
}
