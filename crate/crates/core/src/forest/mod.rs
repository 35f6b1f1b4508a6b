//! Bagged random forest regressor with per-prediction ensemble statistics.
//!
//! Tree `i` is fit on `B` rows drawn with replacement using its own ChaCha
//! stream `(seed, i)`, so training is deterministic and parallel fitting
//! gives the same forest as sequential fitting.

mod io;
mod tree;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta};
use crate::{Error, Result};

pub use io::{load_forest, save_forest, ForestFile, FOREST_SCHEMA_VERSION};
pub use tree::{fit_tree, improves, midpoint, FeatureMatrix, Tree, TreeNode, TreeParams, TIE_TOLERANCE};

/// Default regularizer in the CoV denominator.
pub const DEFAULT_COV_EPS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Rows drawn per tree; `None` uses the dataset size.
    pub bootstrap_size: Option<usize>,
    /// When false every tree sees the full dataset in order.
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub max_features_fraction: f64,
    pub min_impurity_decrease: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            bootstrap_size: None,
            bootstrap: true,
            min_samples_split: 2,
            max_features_fraction: 1.0,
            min_impurity_decrease: 0.001,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if self.bootstrap_size == Some(0) {
            return Err(Error::Config("bootstrap_size must be at least 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(Error::Config("min_samples_split must be at least 2".into()));
        }
        if !(self.max_features_fraction > 0.0 && self.max_features_fraction <= 1.0) {
            return Err(Error::Config("max_features_fraction must be in (0, 1]".into()));
        }
        if !(self.min_impurity_decrease >= 0.0) {
            return Err(Error::Config("min_impurity_decrease must be non-negative".into()));
        }
        Ok(())
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            min_samples_split: self.min_samples_split,
            max_features_fraction: self.max_features_fraction,
            min_impurity_decrease: self.min_impurity_decrease,
        }
    }
}

/// Ensemble statistics for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionStats {
    /// Mean of the per-tree predictions.
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single tree.
    pub std: f64,
    /// `std / (|mean| + eps)`.
    pub cov: f64,
    /// Trees further than two standard deviations from the mean.
    pub odd_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_tree: Option<Vec<f64>>,
}

impl PredictionStats {
    pub fn from_outputs(outputs: &[f64], eps: f64) -> Self {
        let n = outputs.len();
        assert!(n > 0, "no tree outputs");
        let naive = outputs.iter().sum::<f64>() / n as f64;
        // second pass removes most of the rounding left in the naive mean
        let mean = naive + compensated_sum(outputs.iter().map(|v| v - naive)) / n as f64;
        let std = if n >= 2 {
            let ss: f64 = outputs.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let odd_count = if std > 0.0 {
            outputs.iter().filter(|v| (*v - mean).abs() > 2.0 * std).count()
        } else {
            0
        };
        PredictionStats {
            mean,
            std,
            cov: std / (mean.abs() + eps),
            odd_count,
            per_tree: None,
        }
    }
}

fn compensated_sum(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in it {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    config: ForestConfig,
    n_features: usize,
    trees: Vec<Tree>,
    dataset_hash: String,
    dataset_meta: Option<DatasetMeta>,
}

impl Forest {
    pub(crate) fn from_parts(
        config: ForestConfig,
        n_features: usize,
        trees: Vec<Tree>,
        dataset_hash: String,
        dataset_meta: Option<DatasetMeta>,
    ) -> Self {
        Forest {
            config,
            n_features,
            trees,
            dataset_hash,
            dataset_meta,
        }
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    pub fn dataset_meta(&self) -> Option<&DatasetMeta> {
        self.dataset_meta.as_ref()
    }

    pub fn tree_outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::BeamCount {
                expected: self.n_features,
                actual: x.len(),
            });
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let outputs = self.tree_outputs(x)?;
        Ok(outputs.iter().sum::<f64>() / outputs.len() as f64)
    }

    pub fn predict_with_stats(&self, x: &[f64], eps: f64) -> Result<PredictionStats> {
        let outputs = self.tree_outputs(x)?;
        Ok(PredictionStats::from_outputs(&outputs, eps))
    }

    /// Like [`Forest::predict_with_stats`] but keeps the per-tree outputs.
    pub fn predict_with_trees(&self, x: &[f64], eps: f64) -> Result<PredictionStats> {
        let outputs = self.tree_outputs(x)?;
        let mut stats = PredictionStats::from_outputs(&outputs, eps);
        stats.per_tree = Some(outputs);
        Ok(stats)
    }
}

/// Fits a forest on raw features and targets.
pub fn fit_forest_matrix(x: &FeatureMatrix, y: &[f64], cfg: &ForestConfig) -> Result<Forest> {
    let n = x.n_samples();
    let b = cfg.bootstrap_size.unwrap_or(n);
    fit_forest_with(x, y, cfg, |rng: &mut ChaCha8Rng| {
        if cfg.bootstrap {
            (0..b).map(|_| rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        }
    })
}

/// Fits a forest using `draw` to pick each tree's training rows from that
/// tree's rng stream.
pub fn fit_forest_with<F>(x: &FeatureMatrix, y: &[f64], cfg: &ForestConfig, draw: F) -> Result<Forest>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<usize> + Sync,
{
    cfg.validate()?;
    if x.n_samples() == 0 {
        return Err(Error::Dataset("cannot fit a forest on an empty dataset".into()));
    }
    if y.len() != x.n_samples() {
        return Err(Error::Dimension {
            expected: x.n_samples(),
            actual: y.len(),
        });
    }
    let params = cfg.tree_params();
    let trees: Vec<Tree> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree_rng(cfg.seed, i);
            let sample = draw(&mut rng);
            fit_tree(x, y, &sample, &params, &mut rng)
        })
        .collect();
    Ok(Forest::from_parts(cfg.clone(), x.n_features(), trees, String::new(), None))
}

/// Independent rng stream for tree `index`.
pub fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn fit_forest(data: &Dataset, cfg: &ForestConfig) -> Result<Forest> {
    let x = data.feature_matrix();
    let y = data.targets();
    let mut forest = fit_forest_matrix(&x, &y, cfg)?;
    forest.dataset_hash = data.content_hash();
    forest.dataset_meta = Some(data.meta.clone());
    Ok(forest)
}
