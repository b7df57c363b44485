//! Network configuration, parameter initialization and the assembled model:
//! stem → per stage (transition → modules of ccw ×k → fusion) → head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    ccw_block, declare_ccw, declare_fuse, declare_head, declare_stem, declare_transition, fuse,
    head, stem, transition, FeaturePyramid, FusionVariant, HeadVariant, StemSpec,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::HeatmapBatch;

mod io;
mod params;

pub use io::{read_params, write_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use params::{Init, ModelParams, ParamDecl, ParamDecls, Slot};

/// Input image channels (RGB).
pub const IMAGE_CHANNELS: usize = 3;
/// Input pixels per heatmap cell.
pub const HEATMAP_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub modules: usize,
    pub ccw_per_module: usize,
}

/// Declarative description of a network. Stage `s` adds branch `s + 1`, so
/// `branch_widths` has one more entry than `stages`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub stem_width: usize,
    pub branch_widths: Vec<usize>,
    pub stages: Vec<StageSpec>,
    pub fusion: FusionVariant,
    pub head: HeadVariant,
    pub landmarks: usize,
    pub reduction_ratio: usize,
    #[serde(default)]
    pub dtype: DType,
}

impl NetworkConfig {
    pub const PRESETS: [&'static str; 3] = ["plus-L", "plus-S", "toy"];

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "plus-L" | "plus-l" => NetworkConfig {
                input_size: 96,
                stem_width: 16,
                branch_widths: vec![64, 176, 192],
                stages: vec![
                    StageSpec { modules: 3, ccw_per_module: 1 },
                    StageSpec { modules: 12, ccw_per_module: 1 },
                ],
                fusion: FusionVariant::Scaf,
                head: HeadVariant::Mr,
                landmarks: 98,
                reduction_ratio: 4,
                dtype: DType::F32,
            },
            "plus-S" | "plus-s" => NetworkConfig {
                input_size: 96,
                stem_width: 16,
                branch_widths: vec![32, 80, 160],
                stages: vec![
                    StageSpec { modules: 2, ccw_per_module: 1 },
                    StageSpec { modules: 12, ccw_per_module: 1 },
                ],
                fusion: FusionVariant::Scaf,
                head: HeadVariant::Mr,
                landmarks: 98,
                reduction_ratio: 8,
                dtype: DType::F32,
            },
            "toy" => NetworkConfig {
                input_size: 32,
                stem_width: 8,
                branch_widths: vec![8, 16],
                stages: vec![StageSpec { modules: 1, ccw_per_module: 1 }],
                fusion: FusionVariant::Scaf,
                head: HeadVariant::Mr,
                landmarks: 5,
                reduction_ratio: 4,
                dtype: DType::F64,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (known: {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: NetworkConfig =
            toml::from_str(s).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
            .map_err(|e| Error::config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_branches(&self) -> usize {
        self.stages.len() + 1
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / HEATMAP_STRIDE
    }

    pub fn stem_spec(&self) -> StemSpec {
        StemSpec {
            in_channels: IMAGE_CHANNELS,
            stem_width: self.stem_width,
            out_width: self.branch_widths.first().copied().unwrap_or(0),
        }
    }

    /// Checks every invariant, naming the first failing field.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("{field}: {msg}")));
        if self.reduction_ratio == 0 {
            return fail("reduction_ratio", "must be at least 1".into());
        }
        if self.landmarks == 0 {
            return fail("landmarks", "must be at least 1".into());
        }
        if self.stem_width == 0 || self.stem_width % 2 != 0 {
            return fail("stem_width", format!("{} is not a positive even number", self.stem_width));
        }
        if self.branch_widths.len() != self.stages.len() + 1 {
            return fail(
                "branch_widths",
                format!(
                    "{} widths given but {} stages need {}",
                    self.branch_widths.len(),
                    self.stages.len(),
                    self.stages.len() + 1
                ),
            );
        }
        for (i, &c) in self.branch_widths.iter().enumerate() {
            if c == 0 || c % 2 != 0 {
                return fail(&format!("branch_widths[{i}]"), format!("{c} is not a positive even number"));
            }
            if c % self.reduction_ratio != 0 {
                return fail(
                    &format!("branch_widths[{i}]"),
                    format!("{c} is not divisible by reduction_ratio {}", self.reduction_ratio),
                );
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.modules == 0 {
                return fail(&format!("stages[{i}].modules"), "must be at least 1".into());
            }
            if s.ccw_per_module == 0 {
                return fail(&format!("stages[{i}].ccw_per_module"), "must be at least 1".into());
            }
        }
        let div = HEATMAP_STRIDE << (self.num_branches() - 1);
        if self.input_size == 0 || self.input_size % div != 0 {
            return fail(
                "input_size",
                format!("{} is not a positive multiple of {div}", self.input_size),
            );
        }
        Ok(())
    }

    /// Parameter declarations in forward order.
    pub fn declarations(&self) -> Result<ParamDecls> {
        self.validate()?;
        let mut d = ParamDecls::new();
        d.scoped("stem", |d| declare_stem(d, &self.stem_spec()));
        for (s, stage) in self.stages.iter().enumerate() {
            let widths = &self.branch_widths[..s + 2];
            d.scoped(format!("stage{s}"), |d| -> Result<()> {
                d.scoped("transition", |d| declare_transition(d, widths[s], widths[s + 1]));
                for m in 0..stage.modules {
                    d.scoped(format!("module{m}"), |d| -> Result<()> {
                        for k in 0..stage.ccw_per_module {
                            d.scoped(format!("ccw{k}"), |d| {
                                declare_ccw(d, widths, self.reduction_ratio)
                            });
                        }
                        d.scoped("fusion", |d| {
                            declare_fuse(d, widths, self.fusion, self.reduction_ratio)
                        })
                    })?;
                }
                Ok(())
            })?;
        }
        d.scoped("head", |d| {
            declare_head(d, &self.branch_widths, self.head, self.landmarks)
        });
        Ok(d)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// A validated configuration together with its parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    config: NetworkConfig,
    decls: ParamDecls,
}

/// Builds the model and initializes its parameters from `seed`.
pub fn build<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<(Model, ModelParams<T>)> {
    let model = Model::new(config.clone())?;
    let params = ModelParams::from_decls(&model.decls, seed)?;
    Ok((model, params))
}

impl Model {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let decls = config.declarations()?;
        Ok(Model { config, decls })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn declarations(&self) -> &ParamDecls {
        &self.decls
    }

    /// Verifies that `params` holds exactly the declared names with the
    /// declared shapes, reporting the first offending entry in forward order.
    pub fn check_params<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        let mut expected = 0;
        for d in self.decls.entries() {
            let found = match d.slot {
                Slot::Param => params.get(&d.name),
                Slot::Buffer => params.buffer(&d.name),
            };
            match found {
                None => return Err(Error::Load(format!("missing parameter `{}`", d.name))),
                Some(t) if t.shape() != d.shape => {
                    return Err(Error::Load(format!(
                        "shape mismatch for parameter `{}`: file has {:?}, model expects {:?}",
                        d.name,
                        t.shape(),
                        d.shape
                    )))
                }
                Some(_) => {}
            }
            if d.slot == Slot::Param {
                expected += 1;
            }
        }
        let have = params.names().count();
        if have != expected {
            let extra = params
                .names()
                .find(|n| !self.decls.entries().iter().any(|d| &d.name == *n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Load(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Records the full forward pass on `g` and returns the heatmap logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(images);
        if s[1] != IMAGE_CHANNELS || s[2] != c.input_size || s[3] != c.input_size {
            return Err(Error::config(format!(
                "expected images (N, {IMAGE_CHANNELS}, {0}, {0}), got {s:?}",
                c.input_size
            )));
        }
        let mut p: FeaturePyramid = g.scoped("stem", |g| stem(g, images, &c.stem_spec()))?;
        for (si, stage) in c.stages.iter().enumerate() {
            p = g.scoped(format!("stage{si}"), |g| -> Result<FeaturePyramid> {
                let mut p = g.scoped("transition", |g| transition(g, &p, c.branch_widths[si + 1]))?;
                for m in 0..stage.modules {
                    p = g.scoped(format!("module{m}"), |g| -> Result<FeaturePyramid> {
                        let mut p = p.clone();
                        for k in 0..stage.ccw_per_module {
                            p = g.scoped(format!("ccw{k}"), |g| ccw_block(g, &p, c.reduction_ratio))?;
                        }
                        g.scoped("fusion", |g| fuse(g, &p, c.fusion, c.reduction_ratio))
                    })?;
                }
                Ok(p)
            })?;
        }
        g.scoped("head", |g| head(g, &p, c.head, c.landmarks))
    }

    /// Inference-mode forward pass (running batch-norm statistics).
    pub fn infer<T: Scalar>(&self, params: &ModelParams<T>, images: &Tensor<T>) -> Result<HeatmapBatch<T>> {
        let mut g = Graph::with_params(params);
        g.set_mode(Mode::Infer);
        let x = g.input(images.clone());
        let y = self.forward(&mut g, x)?;
        let heatmaps = g.value(y).clone();
        Ok(HeatmapBatch::new(heatmaps, HEATMAP_STRIDE))
    }
}
