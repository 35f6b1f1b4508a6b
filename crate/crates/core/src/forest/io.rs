use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Forest, ForestConfig, Tree, TreeNode};
use crate::dataset::DatasetMeta;
use crate::{Error, Result};

pub const FOREST_SCHEMA_VERSION: u32 = 1;

/// Model file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestFile {
    pub schema_version: u32,
    pub kind: String,
    /// How the impurity-decrease gate weights nodes.
    pub impurity_weighting: String,
    pub config: ForestConfig,
    pub beam_count: usize,
    pub dataset_hash: String,
    #[serde(default)]
    pub dataset: Option<DatasetMeta>,
    pub trees: Vec<TreeNode>,
}

const KIND: &str = "random_forest_regressor";
const WEIGHTING: &str = "node_fraction";

impl ForestFile {
    pub fn from_forest(f: &Forest) -> Self {
        ForestFile {
            schema_version: FOREST_SCHEMA_VERSION,
            kind: KIND.into(),
            impurity_weighting: WEIGHTING.into(),
            config: f.config.clone(),
            beam_count: f.n_features,
            dataset_hash: f.dataset_hash.clone(),
            dataset: f.dataset_meta.clone(),
            trees: f.trees.iter().map(Tree::to_node).collect(),
        }
    }

    pub fn into_forest(self) -> Result<Forest> {
        if self.schema_version != FOREST_SCHEMA_VERSION {
            return Err(Error::Model(format!(
                "unsupported forest schema version {} (expected {FOREST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.kind != KIND {
            return Err(Error::Model(format!("not a forest model file (kind {:?})", self.kind)));
        }
        if self.impurity_weighting != WEIGHTING {
            return Err(Error::Model(format!(
                "unsupported impurity weighting {:?}",
                self.impurity_weighting
            )));
        }
        if let Some(meta) = &self.dataset {
            if meta.beam_count != self.beam_count {
                return Err(Error::BeamCount {
                    expected: meta.beam_count,
                    actual: self.beam_count,
                });
            }
        }
        if self.trees.is_empty() {
            return Err(Error::Model("forest has no trees".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            if let Some(f) = t.max_feature() {
                if f >= self.beam_count {
                    return Err(Error::Model(format!(
                        "tree {i} splits on feature {f} but beam_count is {}",
                        self.beam_count
                    )));
                }
            }
        }
        let trees = self.trees.iter().map(Tree::from_node).collect();
        Ok(Forest::from_parts(
            self.config,
            self.beam_count,
            trees,
            self.dataset_hash,
            self.dataset,
        ))
    }
}

pub fn save_forest(forest: &Forest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&ForestFile::from_forest(forest)).map_err(|e| Error::parse("forest", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<Forest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    forest_from_json(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub(crate) fn forest_from_json(text: &str) -> Result<Forest> {
    let mut de = serde_json::Deserializer::from_str(text);
    de.disable_recursion_limit();
    let file = ForestFile::deserialize(&mut de).map_err(|e| Error::parse("forest", e))?;
    file.into_forest()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{fit_forest_matrix, FeatureMatrix};

    fn small_forest() -> Forest {
        let rows: Vec<[f64; 3]> = (0..40)
            .map(|i| {
                let v = i as f64;
                [v.sin() * 10.0, (v * 0.3).cos() * 5.0, v]
            })
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| (r[0] * 0.05).tanh()).collect();
        fit_forest_matrix(
            &FeatureMatrix::from_rows(&rows),
            &y,
            &ForestConfig { n_trees: 7, min_impurity_decrease: 0.0, seed: 3, ..Default::default() },
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let f = small_forest();
        let text = serde_json::to_string(&ForestFile::from_forest(&f)).unwrap();
        let back = forest_from_json(&text).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn tampered_beam_count_rejected() {
        let f = small_forest();
        let mut file = ForestFile::from_forest(&f);
        file.beam_count = 0;
        let text = serde_json::to_string(&file).unwrap();
        assert!(forest_from_json(&text).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        let mut file = ForestFile::from_forest(&small_forest());
        file.schema_version = 99;
        let text = serde_json::to_string(&file).unwrap();
        let err = forest_from_json(&text).unwrap_err();
        assert!(err.to_string().contains("schema version"));
    }
}
