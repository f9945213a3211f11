use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_features, load_interactions, split_interactions, DataError, FeatureMatrix, InteractionDataset};

/// JSON description of a dataset on disk. Relative paths are resolved
/// against the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub interactions: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_features: Option<PathBuf>,
    pub num_users: usize,
    pub num_items: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

/// A split dataset with the feature matrices the model is built over.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: InteractionDataset,
    pub user_features: FeatureMatrix,
    pub item_features: FeatureMatrix,
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.resolve_paths(base);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.interactions);
        if let Some(p) = self.user_features.as_mut() {
            fix(p);
        }
        if let Some(p) = self.item_features.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(DataError::Manifest("num_users and num_items must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DataError::Manifest(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    /// Loads interactions, splits them, and loads or synthesizes features.
    pub fn load(&self) -> Result<LoadedData, DataError> {
        self.validate()?;
        let raw = load_interactions(&self.interactions, self.num_users, self.num_items)?;
        let dataset = split_interactions(&raw, self.test_fraction, self.seed)?;
        dataset.stats().check_consistent()?;
        let user_features = match &self.user_features {
            Some(p) => load_features(p, self.num_users)?,
            None => FeatureMatrix::identity(self.num_users),
        };
        let item_features = match &self.item_features {
            Some(p) => load_features(p, self.num_items)?,
            None => FeatureMatrix::identity(self.num_items),
        };
        Ok(LoadedData {
            dataset,
            user_features,
            item_features,
        })
    }
}
