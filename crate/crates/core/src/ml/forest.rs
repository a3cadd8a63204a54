//! Random forests of CART trees.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binning::{Binned, MAX_BINS};
use super::tree::{grow_classification_tree, Tree, TreeParams};
use super::LabelledMatrix;
use crate::error::Result;
use crate::race::{RaceVector, NUM_RACES};
use crate::rng::{derive_seed, rng_from};
use crate::tables::{FeatureVector, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of features tried at each split; 1 disables subsampling.
    pub feature_subsample: f64,
    /// Bootstrap sample size as a fraction of the rows; `None` uses every row once.
    pub row_subsample: Option<f64>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 10,
            min_leaf: 5,
            feature_subsample: 0.5,
            row_subsample: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub layout: Layout,
    pub trees: Vec<Tree<RaceVector>>,
    pub tree_seeds: Vec<u64>,
}

impl ForestModel {
    /// Unweighted mean of the tree outputs.
    pub fn predict_row(&self, x: &[f64]) -> RaceVector {
        let mut sum = [0.0; NUM_RACES];
        for t in &self.trees {
            let p = t.predict(x);
            for r in 0..NUM_RACES {
                sum[r] += p[r];
            }
        }
        let n = self.trees.len() as f64;
        sum.map(|s| s / n)
    }
}

pub fn predict_forest(m: &ForestModel, x: &FeatureVector) -> Result<RaceVector> {
    super::check_layout(m.layout, x)?;
    Ok(m.predict_row(&x.values))
}

/// Train `n_trees` trees concurrently; tree `t` draws its bootstrap sample and
/// split features from a stream derived from `(seed, t)`.
pub fn train_forest(data: &LabelledMatrix, params: &ForestParams, seed: u64) -> ForestModel {
    let binned = Binned::new(data, MAX_BINS);
    let d = data.dim();
    let k = ((params.feature_subsample * d as f64).ceil() as usize).clamp(1, d);
    let features_per_split = (k < d).then_some(k);
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    };
    let n = data.len();
    let tree_seeds: Vec<u64> = (0..params.n_trees as u64)
        .map(|t| derive_seed(seed, t))
        .collect();
    let trees = tree_seeds
        .par_iter()
        .map(|&ts| {
            let weights = params.row_subsample.map(|frac| {
                let mut rng = rng_from(derive_seed(ts, 1));
                let draws = ((frac * n as f64).round() as usize).max(1);
                let mut w = vec![0u32; n];
                for _ in 0..draws {
                    w[rng.random_range(0..n)] += 1;
                }
                w
            });
            let rng = features_per_split.map(|_| rng_from(derive_seed(ts, 2)));
            grow_classification_tree(
                &binned,
                data.labels(),
                weights.as_deref(),
                &tree_params,
                features_per_split,
                rng,
            )
        })
        .collect();
    ForestModel {
        layout: data.layout(),
        trees,
        tree_seeds,
    }
}
