//! Dataset directory layout shared by the commands.
//!
//! A dataset directory holds `case_XXX_img.mvol` / `case_XXX_lab.mvol`
//! pairs plus `splits.json` (train/val/test case indices). Prediction
//! directories hold `<case_id>_pred.mvol` files (plain `_lab.mvol`
//! files are also accepted so a ground-truth directory can be compared
//! against itself).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use alamo::volume::{LabelMap, Volume};
use alamo::{mvol, Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

pub fn img_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}_img.mvol", case_id(index)))
}

pub fn lab_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}_lab.mvol", case_id(index)))
}

pub fn load_splits(dir: &Path) -> Result<Splits> {
    let path = dir.join("splits.json");
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::config(format!("missing splits.json in {}", dir.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("malformed splits.json: {e}")))
}

pub fn load_pair(dir: &Path, index: usize) -> Result<(Volume, LabelMap)> {
    let v = mvol::load_volume(img_path(dir, index))?;
    let l = mvol::load_labels(lab_path(dir, index))?;
    if v.dims != l.dims {
        return Err(Error::shape(format!(
            "case {index}: image dims {:?} differ from label dims {:?}",
            v.dims, l.dims
        )));
    }
    Ok((v, l))
}

/// Map case id -> label file for a prediction or ground-truth
/// directory; `_pred.mvol` wins over `_lab.mvol` for the same id.
pub fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::config(format!("{} is not a directory", dir.display())));
    }
    let mut out = BTreeMap::new();
    let mut preds = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name.strip_suffix("_pred.mvol") {
            preds.insert(id.to_string(), path);
        } else if let Some(id) = name.strip_suffix("_lab.mvol") {
            out.insert(id.to_string(), path);
        }
    }
    out.extend(preds);
    if out.is_empty() {
        return Err(Error::config(format!(
            "no *_pred.mvol or *_lab.mvol files in {}",
            dir.display()
        )));
    }
    Ok(out)
}
