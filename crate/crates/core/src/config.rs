//! Experiment configuration (the JSON accepted by `mims --config`).
//!
//! Every field has a default, so `{}` is a valid configuration describing
//! full MIMS with top-5 pooling on the default synthetic benchmark.
//!
//! ```json
//! {
//!   "variant": "mims",
//!   "pool": "topk",
//!   "k": 5,
//!   "scales": [0.5, 0.75, 1.0],
//!   "kernel_groups": [{"size": 2, "out_channels": 8}, {"size": 3, "out_channels": 10}],
//!   "lr": 0.001,
//!   "epochs": 12,
//!   "batch_bags": 4,
//!   "seed": 0,
//!   "dataset": "data/",
//!   "backbone_lr_factor": 0.5
//! }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{PoolKind, DEFAULT_DECAY, DEFAULT_K};
use crate::msconv::{KernelGroup, MsConvConfig, DEFAULT_KERNEL_GROUPS, DEFAULT_SCALES};
use crate::tensor::Real;

/// Model variants: the full model and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Multi-scale conv with normalization and scale weights.
    #[serde(rename = "mims")]
    Mims,
    /// Full multi-scale conv block but a single unit scale.
    #[serde(rename = "mims-noresizing")]
    MimsNoResizing,
    /// Multi-scale conv without normalization and scale weights.
    #[serde(rename = "si-cnn")]
    SiCnn,
    /// A single plain convolution on the primary maps.
    #[serde(rename = "mi-pre-conv")]
    MiPreConv,
    /// Primary maps pooled and classified directly.
    #[serde(rename = "mi-pre")]
    MiPre,
    /// `mi-pre` fed an input pyramid of {0.5, 0.75, 1.0} resized instances.
    #[serde(rename = "pyramid-input")]
    PyramidInput,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Mims,
        Variant::MimsNoResizing,
        Variant::SiCnn,
        Variant::MiPreConv,
        Variant::MiPre,
        Variant::PyramidInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mims => "mims",
            Variant::MimsNoResizing => "mims-noresizing",
            Variant::SiCnn => "si-cnn",
            Variant::MiPreConv => "mi-pre-conv",
            Variant::MiPre => "mi-pre",
            Variant::PyramidInput => "pyramid-input",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Bag aggregation schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolScheme {
    #[serde(rename = "topk")]
    TopK,
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "max")]
    Max,
    /// Classify each instance, take the largest probability.
    #[serde(rename = "max-inst")]
    MaxInst,
    /// Classify each instance, average the probabilities.
    #[serde(rename = "patchcls-mean")]
    PatchclsMean,
}

impl PoolScheme {
    pub const ALL: [PoolScheme; 5] = [
        PoolScheme::TopK,
        PoolScheme::Mean,
        PoolScheme::Max,
        PoolScheme::MaxInst,
        PoolScheme::PatchclsMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolScheme::TopK => "topk",
            PoolScheme::Mean => "mean",
            PoolScheme::Max => "max",
            PoolScheme::MaxInst => "max-inst",
            PoolScheme::PatchclsMean => "patchcls-mean",
        }
    }

    /// Instance-level schemes classify every instance separately.
    pub fn is_instance_level(self) -> bool {
        matches!(self, PoolScheme::MaxInst | PoolScheme::PatchclsMean)
    }

    /// Aggregation applied to feature maps (within an instance for the
    /// instance-level schemes, across the whole bag otherwise).
    pub fn feature_pool(self) -> PoolKind {
        match self {
            PoolScheme::Mean => PoolKind::Mean,
            PoolScheme::Max => PoolKind::Max,
            _ => PoolKind::TopK,
        }
    }
}

impl fmt::Display for PoolScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolScheme::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pool scheme `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

fn d_k() -> usize {
    DEFAULT_K
}
fn d_scales() -> Vec<f64> {
    DEFAULT_SCALES.to_vec()
}
fn d_groups() -> Vec<KernelGroup> {
    DEFAULT_KERNEL_GROUPS.to_vec()
}
fn d_lr() -> Real {
    1e-3
}
fn d_epochs() -> usize {
    12
}
fn d_batch() -> usize {
    4
}
fn d_backbone() -> Real {
    0.5
}
fn d_stem() -> Vec<usize> {
    vec![8, 16, 32]
}
fn d_decay() -> Real {
    DEFAULT_DECAY
}
fn d_in_channels() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_pool")]
    pub pool: PoolScheme,
    #[serde(default = "d_k")]
    pub k: usize,
    /// Isotropic msconv resize factors.
    #[serde(default = "d_scales")]
    pub scales: Vec<f64>,
    #[serde(default = "d_groups")]
    pub kernel_groups: Vec<KernelGroup>,
    #[serde(default = "d_lr")]
    pub lr: Real,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_bags: usize,
    #[serde(default)]
    pub seed: u64,
    /// Dataset root holding `train/` and `test/` (see [`crate::data`]).
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Learning-rate multiplier for the stem parameters.
    #[serde(default = "d_backbone")]
    pub backbone_lr_factor: Real,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_stem")]
    pub stem_channels: Vec<usize>,
    #[serde(default = "d_in_channels")]
    pub in_channels: usize,
    /// Initial decay rate of the top-k weights.
    #[serde(default = "d_decay")]
    pub topk_decay: Real,
    /// Also feed {0.5, 0.75} resized copies of every instance as extra instances.
    #[serde(default)]
    pub input_pyramid: bool,
}

fn default_variant() -> Variant {
    Variant::Mims
}
fn default_pool() -> PoolScheme {
    PoolScheme::TopK
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Resize factors of the input pyramid.
pub const PYRAMID_SCALES: [f64; 3] = [0.5, 0.75, 1.0];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("lr must be >= 0".into()));
        }
        if self.batch_bags == 0 {
            return Err(Error::Config("batch_bags must be >= 1".into()));
        }
        if !(self.backbone_lr_factor >= 0.0) {
            return Err(Error::Config("backbone_lr_factor must be >= 0".into()));
        }
        if self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return Err(Error::Config("stem_channels must be non-empty and positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if let Some(ms) = self.msconv() {
            ms.validate()?;
        }
        Ok(())
    }

    /// Whether instances are fed as a {0.5, 0.75, 1.0} pyramid.
    pub fn uses_input_pyramid(&self) -> bool {
        self.input_pyramid || self.variant == Variant::PyramidInput
    }

    /// The multi-scale layer implied by the variant, or `None` when the
    /// primary maps are pooled directly.
    pub fn msconv(&self) -> Option<MsConvConfig> {
        let groups = &self.kernel_groups;
        match self.variant {
            Variant::Mims => Some(MsConvConfig::isotropic(&self.scales, groups, true, true)),
            Variant::MimsNoResizing => Some(MsConvConfig::isotropic(&[1.0], groups, true, true)),
            Variant::SiCnn => Some(MsConvConfig::isotropic(&self.scales, groups, false, false)),
            Variant::MiPreConv => Some(MsConvConfig::isotropic(&[1.0], groups, false, false)),
            Variant::MiPre | Variant::PyramidInput => None,
        }
    }
}
