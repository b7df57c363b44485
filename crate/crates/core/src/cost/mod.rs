//! Static FLOPs / parameter ledger computed from a [`NetworkConfig`] alone.
//!
//! One multiply-accumulate counts as one FLOP. Biases, batch norm,
//! activations, elementwise ops, means, pooling and resizing are counted at
//! one op per output element in a separate `overhead` column and are not part
//! of the headline figure.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::blocks::{FusionVariant, HeadVariant};
use crate::error::{Error, Result};
use crate::graph::OpRecord;
use crate::network::NetworkConfig;

mod ledger;
pub mod symbolic;

pub use ledger::{CostRow, Ledger};

/// The five block families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Stem,
    Ccw,
    Transition,
    Fusion,
    Head,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Stem,
        Family::Ccw,
        Family::Transition,
        Family::Fusion,
        Family::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Stem => "stem",
            Family::Ccw => "ccw",
            Family::Transition => "transition",
            Family::Fusion => "fusion",
            Family::Head => "head",
        }
    }

    /// Classifies a dotted block path such as `stage1.module3.fusion.0to2.fc1`.
    pub fn of_path(path: &str) -> Family {
        let mut parts = path.split('.');
        match parts.next() {
            Some("head") => return Family::Head,
            Some(s) if s.starts_with("stage") => {}
            _ => return Family::Stem,
        }
        for p in parts {
            if p == "transition" {
                return Family::Transition;
            }
            if p == "fusion" {
                return Family::Fusion;
            }
            if p.starts_with("ccw") {
                return Family::Ccw;
            }
        }
        Family::Stem
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub macs: u64,
    pub params: u64,
    pub overhead: u64,
}

impl Totals {
    pub fn mflops(&self) -> f64 {
        self.macs as f64 / 1e6
    }

    fn add(&mut self, r: &CostRow) {
        self.macs += r.macs;
        self.params += r.params;
        self.overhead += r.overhead;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyTotal {
    pub family: Family,
    #[serde(flatten)]
    pub totals: Totals,
}

/// Per-op ledger for one sample, with per-family and overall totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: NetworkConfig,
    pub rows: Vec<CostRow>,
    /// In [`Family::ALL`] order.
    pub families: Vec<FamilyTotal>,
    pub total: Totals,
}

impl CostReport {
    pub fn from_rows(config: NetworkConfig, rows: Vec<CostRow>) -> Self {
        let mut families: Vec<FamilyTotal> = Family::ALL
            .iter()
            .map(|&family| FamilyTotal {
                family,
                totals: Totals::default(),
            })
            .collect();
        let mut total = Totals::default();
        for r in &rows {
            total.add(r);
            families[r.family as usize].totals.add(r);
        }
        CostReport {
            config,
            rows,
            families,
            total,
        }
    }

    pub fn family(&self, f: Family) -> Totals {
        self.families[f as usize].totals
    }

    /// Family totals sorted by MACs, largest first.
    pub fn breakdown(&self) -> Vec<FamilyTotal> {
        let mut v = self.families.clone();
        v.sort_by(|a, b| b.totals.macs.cmp(&a.totals.macs).then(a.family.cmp(&b.family)));
        v
    }

    /// Rows aggregated by block path prefix of `depth` segments.
    pub fn blocks(&self, depth: usize) -> Vec<(String, Family, Totals)> {
        let mut out: Vec<(String, Family, Totals)> = Vec::new();
        for r in &self.rows {
            let key: Vec<&str> = r.path.split('.').take(depth).collect();
            let key = key.join(".");
            match out.last_mut() {
                Some((k, _, t)) if *k == key => t.add(r),
                _ => {
                    let mut t = Totals::default();
                    t.add(r);
                    out.push((key, r.family, t));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: per-block rows, family totals and the headline.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let depth = 3;
        let blocks = self.blocks(depth);
        let w = blocks.iter().map(|b| b.0.len()).max().unwrap_or(5).max(10);
        let _ = writeln!(
            s,
            "{:<w$}  {:<10}  {:>12}  {:>10}  {:>12}",
            "block", "family", "MACs", "params", "overhead"
        );
        for (path, fam, t) in &blocks {
            let _ = writeln!(
                s,
                "{:<w$}  {:<10}  {:>12}  {:>10}  {:>12}",
                path, fam, t.macs, t.params, t.overhead
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12}  {:>12}  {:>8}  {:>10}", "family", "MACs", "share", "params");
        for f in self.breakdown() {
            let share = if self.total.macs > 0 {
                100.0 * f.totals.macs as f64 / self.total.macs as f64
            } else {
                0.0
            };
            let _ = writeln!(
                s,
                "{:<12}  {:>12}  {:>7.2}%  {:>10}",
                f.family, f.totals.macs, share, f.totals.params
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "total: {:.2} MFLOPs (MACs), {:.4}M params, {:.2} M overhead ops",
            self.total.mflops(),
            self.total.params as f64 / 1e6,
            self.total.overhead as f64 / 1e6
        );
        s
    }
}

/// Symbolic cost of one sample through the network described by `config`.
pub fn profile(config: &NetworkConfig) -> Result<CostReport> {
    let mut l = Ledger::new();
    symbolic::network(&mut l, config)?;
    Ok(CostReport::from_rows(config.clone(), l.into_rows()))
}

/// Per-family totals of `config`, largest first.
pub fn family_breakdown(config: &NetworkConfig) -> Result<Vec<FamilyTotal>> {
    Ok(profile(config)?.breakdown())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Fusion,
    Head,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Dimension::Fusion => "fusion",
            Dimension::Head => "head",
        })
    }
}

impl std::str::FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" | "fusion_variant" => Ok(Dimension::Fusion),
            "head" | "head_variant" => Ok(Dimension::Head),
            other => Err(Error::config(format!(
                "unknown dimension `{other}` (expected fusion or head)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub label: String,
    /// MACs of the family being varied (fusion or head).
    pub family_macs: u64,
    pub family_params: u64,
    pub total_macs: u64,
    pub total_params: u64,
    /// `family_macs / baseline family_macs`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dimension: Dimension,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, variant: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `family_macs(a) / family_macs(b)`.
    pub fn ratio(&self, a: &str, b: &str) -> Option<f64> {
        let (a, b) = (self.row(a)?, self.row(b)?);
        Some(a.family_macs as f64 / b.family_macs as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let fam = match self.dimension {
            Dimension::Fusion => "fusion",
            Dimension::Head => "head",
        };
        let _ = writeln!(
            s,
            "{:<12}  {:>14}  {:>12}  {:>14}  {:>12}  {:>10}",
            "variant",
            format!("{fam} MACs"),
            format!("{fam} params"),
            "total MACs",
            "total params",
            format!("vs {}", self.baseline)
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12}  {:>14}  {:>12}  {:>14}  {:>12}  {:>10.4}",
                r.label, r.family_macs, r.family_params, r.total_macs, r.total_params, r.ratio
            );
        }
        match self.dimension {
            Dimension::Fusion => {
                if let Some(x) = self.ratio("scaf", "pw") {
                    let _ = writeln!(s, "\nSCAF / PW fusion MACs = {x:.4} ({:.1}% reduction)", 100.0 * (1.0 - x));
                }
            }
            Dimension::Head => {
                if let Some(x) = self.ratio("mr", "v2") {
                    let _ = writeln!(s, "\nMR / V2 head MACs = {x:.4} (1/{:.2})", 1.0 / x);
                }
                if let Some(x) = self.ratio("mr", "v1") {
                    let _ = writeln!(s, "MR / V1 head MACs = {x:.4}");
                }
            }
        }
        s
    }
}

/// Profiles every fusion or head variant of `config`, ratios against PW or V1.
pub fn compare(config: &NetworkConfig, dimension: Dimension) -> Result<Comparison> {
    let mut reports = Vec::new();
    match dimension {
        Dimension::Fusion => {
            for v in FusionVariant::ALL {
                let c = NetworkConfig {
                    fusion: v,
                    ..config.clone()
                };
                reports.push((v.as_str(), v.label(), profile(&c)?, Family::Fusion));
            }
        }
        Dimension::Head => {
            for v in HeadVariant::ALL {
                let c = NetworkConfig {
                    head: v,
                    ..config.clone()
                };
                reports.push((v.as_str(), v.label(), profile(&c)?, Family::Head));
            }
        }
    }
    let base = reports[0].2.family(reports[0].3).macs as f64;
    let rows = reports
        .iter()
        .map(|(v, label, r, fam)| {
            let t = r.family(*fam);
            ComparisonRow {
                variant: v.to_string(),
                label: label.to_string(),
                family_macs: t.macs,
                family_params: t.params,
                total_macs: r.total.macs,
                total_params: r.total.params,
                ratio: t.macs as f64 / base,
            }
        })
        .collect();
    Ok(Comparison {
        dimension,
        baseline: reports[0].0.to_string(),
        rows,
    })
}

/// First difference between an executed trace and the symbolic ledger, if any.
pub fn trace_mismatch(trace: &[OpRecord], rows: &[CostRow]) -> Option<String> {
    for (i, (t, r)) in trace.iter().zip(rows).enumerate() {
        let out = [1, t.output[1], t.output[2], t.output[3]];
        if t.path != r.path
            || t.kind != r.kind
            || t.macs != r.macs
            || t.overhead != r.overhead
            || out != r.output
        {
            return Some(format!(
                "op {i}: executed {} {:?} macs={} overhead={} out={:?}; ledger {} {:?} macs={} overhead={} out={:?}",
                t.path, t.kind, t.macs, t.overhead, out, r.path, r.kind, r.macs, r.overhead, r.output
            ));
        }
    }
    if trace.len() != rows.len() {
        return Some(format!(
            "executed {} ops but ledger has {} rows",
            trace.len(),
            rows.len()
        ));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_of_path() {
        assert_eq!(Family::of_path("stem.conv1.bn"), Family::Stem);
        assert_eq!(Family::of_path("stage0.transition.dw"), Family::Transition);
        assert_eq!(Family::of_path("stage1.module2.ccw0.crw.conv1"), Family::Ccw);
        assert_eq!(Family::of_path("stage1.module2.fusion.0to1.fc1"), Family::Fusion);
        assert_eq!(Family::of_path("stage1.module2.fusion"), Family::Fusion);
        assert_eq!(Family::of_path("head.b2.conv"), Family::Head);
    }

    #[test]
    fn totals_conserve_rows() {
        let r = profile(&NetworkConfig::preset("plus-S").unwrap()).unwrap();
        let sum: u64 = r.rows.iter().map(|x| x.macs).sum();
        assert_eq!(sum, r.total.macs);
        let fam: u64 = r.families.iter().map(|f| f.totals.macs).sum();
        assert_eq!(fam, r.total.macs);
    }

    #[test]
    fn dimension_parse() {
        assert_eq!("head".parse::<Dimension>().unwrap(), Dimension::Head);
        assert!("depth".parse::<Dimension>().is_err());
    }
}
