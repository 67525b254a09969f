use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Manifest;

/// Subject-level k-fold partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

/// Sample indices of one train/test split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the sorted subject list with `seed` and deals it round-robin
/// into `k` folds.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    let mut subjects = manifest.subjects();
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {k}")));
    }
    if k > subjects.len() {
        return Err(Error::Argument(format!(
            "{k} folds requested but only {} subjects",
            subjects.len()
        )));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k))
        .collect();
    Ok(FoldPlan { k, assignment })
}

impl FoldPlan {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Data(format!("fold plan has k = {}", self.k)));
        }
        if let Some((s, f)) = self.assignment.iter().find(|(_, &f)| f >= self.k) {
            return Err(Error::Data(format!("subject `{s}` assigned to fold {f} of {}", self.k)));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: FoldPlan = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("fold plan serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Subjects of fold `fold`, sorted.
    pub fn fold_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Fold `fold` is the test set; every other fold trains. Every manifest
    /// subject must appear in the plan.
    pub fn split(&self, manifest: &Manifest, fold: usize) -> Result<Split> {
        if fold >= self.k {
            return Err(Error::Argument(format!("fold {fold} out of range for k = {}", self.k)));
        }
        let mut split = Split {
            train: Vec::new(),
            test: Vec::new(),
        };
        for (i, s) in manifest.samples().iter().enumerate() {
            let f = *self.assignment.get(&s.subject_id).ok_or_else(|| {
                Error::Data(format!("subject `{}` of video `{}` is not in the fold plan", s.subject_id, s.id))
            })?;
            if f == fold {
                split.test.push(i);
            } else {
                split.train.push(i);
            }
        }
        Ok(split)
    }
}
