//! Multi-instance multi-scale CNN building blocks.
//!
//! The crate trains and evaluates bag-level image classifiers whose
//! discriminative patterns appear at unknown positions, slices and sizes:
//!
//! * [`autodiff`] and [`nn`]: a define-by-run reverse-mode engine with the
//!   convolution, resize, batch normalization and loss layers it needs.
//! * [`msconv`]: a convolution layer that resizes its input to several scales
//!   and applies the same kernels to each, with per-(scale, channel)
//!   normalization and learnable scalar weights.
//! * [`mil`]: top-k pooling with learnable simplex weights plus mean, max and
//!   instance-max baselines.
//! * [`model`]: the stem → multi-scale conv → pooling → classifier pipeline
//!   and its ablations.
//! * [`localization`]: gradient × input heatmaps written as NetPBM images.
//! * [`data`]: a seeded generator of weakly-labeled ring/disk bags.
//! * [`harness`]: training, AUROC, pooling comparisons, feature correlation
//!   and the `mims` command line.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod localization;
pub mod mil;
pub mod model;
pub mod msconv;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use config::{ExperimentConfig, PoolScheme, Variant};
pub use error::{Error, Result};
pub use model::{Bag, BagForward, BatchForward, MimsModel};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
