//! On-disk dataset layout, all paths relative to the dataset root:
//!
//! ```text
//! manifest.csv          bag_id,instance_path,label  (one row per instance)
//! truth.json            ground truth (optional on load)
//! instances/<bag>_<i>.rtf
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::GroundTruth;
use super::Dataset;
use crate::error::{Error, Result};
use crate::model::Bag;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";
pub const TRUTH: &str = "truth.json";
const HEADER: [&str; 3] = ["bag_id", "instance_path", "label"];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    bag_id: String,
    instance_path: String,
    label: String,
}

pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let inst_dir = root.join("instances");
    fs::create_dir_all(&inst_dir).map_err(|e| Error::io(&inst_dir, e))?;
    let manifest = root.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest)?;
    for bag in &dataset.bags {
        for (i, inst) in bag.instances.iter().enumerate() {
            let rel = format!("instances/{}_{i}.rtf", bag.id);
            inst.save_rtf(&root.join(&rel))?;
            w.serialize(Row {
                bag_id: bag.id.clone(),
                instance_path: rel,
                label: bag.label.to_string(),
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    if let Some(truth) = &dataset.truth {
        let path = root.join(TRUTH);
        let text = serde_json::to_string_pretty(truth)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Loads a dataset from its root directory or from the manifest path.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (root, manifest) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")), path.to_path_buf())
    };
    if !manifest.exists() {
        return Err(Error::io(
            &manifest,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let fmt = |reason: String| Error::Format {
        path: manifest.clone(),
        reason,
    };
    let mut r = csv::Reader::from_path(&manifest)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(fmt(format!("expected header `{}`, found `{}`", HEADER.join(","), header.join(","))));
    }
    let mut bags: Vec<(String, u8, Vec<Tensor>)> = Vec::new();
    for (line, row) in r.deserialize::<Row>().enumerate() {
        let row = row?;
        let label = match row.label.trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(fmt(format!("row {}: label `{other}` is not 0 or 1", line + 2))),
        };
        let tensor = Tensor::load_rtf(&root.join(&row.instance_path))?;
        match bags.iter_mut().find(|(id, _, _)| *id == row.bag_id) {
            Some((_, l, insts)) => {
                if *l != label {
                    return Err(fmt(format!("row {}: bag `{}` has conflicting labels", line + 2, row.bag_id)));
                }
                insts.push(tensor);
            }
            None => bags.push((row.bag_id, label, vec![tensor])),
        }
    }
    let bags = bags
        .into_iter()
        .map(|(id, label, insts)| Bag::new(id, insts, label))
        .collect::<Result<Vec<_>>>()?;
    let truth_path = root.join(TRUTH);
    let truth = if truth_path.exists() {
        let text = fs::read_to_string(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
        Some(serde_json::from_str::<GroundTruth>(&text).map_err(|e| Error::Format {
            path: truth_path.clone(),
            reason: e.to_string(),
        })?)
    } else {
        None
    };
    Ok(Dataset { bags, truth })
}
