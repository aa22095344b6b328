//! Seeded synthetic benchmark and dataset serialization.

mod io;
pub mod rng;
mod synth;

use std::path::Path;

pub use io::{load_dataset, save_dataset, MANIFEST, TRUTH};
pub use synth::{
    generate, matched_disk_radius, ring_thickness, scale_bin, BagTruth, GroundTruth, RoiTruth, Shape, SyntheticSpec,
    SCALE_BINS,
};

use crate::error::Result;
use crate::model::Bag;

/// Bags plus the generator's ground truth when available.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub truth: Option<GroundTruth>,
}

/// Train and test splits of one benchmark.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Dataset,
    pub test: Dataset,
}

/// Stream tag mixed into the seed of the test split.
pub const TEST_SPLIT_TAG: u64 = 0x5445_5354;

impl Benchmark {
    /// The default benchmark: 400 training bags and a scale-stratified test
    /// split of 200 bags generated from `seed ^ TEST_SPLIT_TAG`.
    pub fn generate(seed: u64) -> Result<Self> {
        Self::generate_sized(seed, 400, 200)
    }

    pub fn generate_sized(seed: u64, n_train: usize, n_test: usize) -> Result<Self> {
        Self::from_spec(&SyntheticSpec::default(), seed, n_train, n_test)
    }

    pub fn from_spec(spec: &SyntheticSpec, seed: u64, n_train: usize, n_test: usize) -> Result<Self> {
        let train_spec = SyntheticSpec {
            n_bags: n_train,
            scale_stratified: false,
            ..spec.clone()
        };
        let test_spec = SyntheticSpec {
            n_bags: n_test,
            scale_stratified: true,
            ..spec.clone()
        };
        let (train, train_truth) = generate(&train_spec, seed)?;
        let (test, test_truth) = generate(&test_spec, seed ^ TEST_SPLIT_TAG)?;
        Ok(Benchmark {
            train: Dataset {
                bags: train,
                truth: Some(train_truth),
            },
            test: Dataset {
                bags: test,
                truth: Some(test_truth),
            },
        })
    }

    /// Writes `train/` and `test/` under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        save_dataset(&self.train, &root.join("train"))?;
        save_dataset(&self.test, &root.join("test"))
    }

    pub fn load(root: &Path) -> Result<Self> {
        Ok(Benchmark {
            train: load_dataset(&root.join("train"))?,
            test: load_dataset(&root.join("test"))?,
        })
    }
}
