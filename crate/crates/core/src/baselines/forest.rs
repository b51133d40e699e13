//! Bagged CART forest. Tree `t` draws its bootstrap sample and its split
//! candidates from a stream derived from `(seed, t)`, so forests are
//! reproducible regardless of how many threads grow them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{DecisionTree, FeatureMatrix, TreeParams};
use crate::error::{Error, Result};
use crate::rng;

const TREE_STREAM: u64 = 0x7EE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per split; `None` means `ceil(sqrt(n_features))`.
    pub features_per_split: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            features_per_split: None,
            max_depth: None,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(self, seed: u64) -> Self {
        ForestParams { seed, ..self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    n_classes: usize,
    n_features: usize,
    features_per_split: usize,
    seed: u64,
    /// Set when training saw a single class; the forest is a constant leaf.
    constant: bool,
}

pub fn default_features_per_split(n_features: usize) -> usize {
    ((n_features as f64).sqrt().ceil() as usize).max(1)
}

impl RandomForest {
    pub fn fit(x: &FeatureMatrix, y: &[usize], n_classes: usize, params: &ForestParams) -> Result<Self> {
        if x.n_rows() != y.len() {
            return Err(Error::Training(format!(
                "{} rows but {} targets",
                x.n_rows(),
                y.len()
            )));
        }
        if x.n_rows() < 2 {
            return Err(Error::Training("forest needs at least 2 samples".into()));
        }
        if params.n_trees == 0 {
            return Err(Error::Training("forest needs at least one tree".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Training(format!("class id {bad} out of range")));
        }
        let n_features = x.n_cols();
        let features_per_split = params
            .features_per_split
            .unwrap_or_else(|| default_features_per_split(n_features))
            .clamp(1, n_features.max(1));
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_samples_leaf: params.min_samples_leaf,
            features_per_split: Some(features_per_split),
        };

        let mut counts = vec![0usize; n_classes];
        for &c in y {
            counts[c] += 1;
        }
        if counts.iter().filter(|&&c| c > 0).count() < 2 {
            let probs = counts.iter().map(|&c| c as f64 / y.len() as f64).collect();
            return Ok(RandomForest {
                trees: vec![DecisionTree::constant(probs, n_features, tree_params)],
                n_classes,
                n_features,
                features_per_split,
                seed: params.seed,
                constant: true,
            });
        }

        let n = x.n_rows();
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::stream(params.seed, &[TREE_STREAM, t as u64]);
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                DecisionTree::fit(x, y, n_classes, &rows, tree_params, &mut rng)
            })
            .collect();
        Ok(RandomForest {
            trees,
            n_classes,
            n_features,
            features_per_split,
            seed: params.seed,
            constant: false,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    /// Mean of the trees' leaf distributions.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for tree in &self.trees {
            for (a, p) in acc.iter_mut().zip(tree.leaf(x)) {
                *a += p;
            }
        }
        let k = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }

    /// Most probable class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}
