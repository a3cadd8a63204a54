//! CART classification trees with Gini impurity.

use serde::{Deserialize, Serialize};

use super::binning::{Binned, GrowParams, Grower, Stats, MAX_BINS};
use super::LabelledMatrix;
use crate::race::{RaceVector, NUM_RACES};
use crate::tables::Layout;

/// Tree node; children are indices into [`Tree::nodes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node<V> {
    Leaf(V),
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<V> {
    pub nodes: Vec<Node<V>>,
}

impl<V> Tree<V> {
    pub fn predict(&self, x: &[f64]) -> &V {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk<V>(t: &Tree<V>, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 8,
            min_leaf: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub layout: Layout,
    pub tree: Tree<RaceVector>,
}

/// Weighted class counts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct ClassStats(pub [f64; NUM_RACES]);

impl Stats for ClassStats {
    fn add(&mut self, other: &Self) {
        for r in 0..NUM_RACES {
            self.0[r] += other.0[r];
        }
    }

    fn sub(&self, other: &Self) -> Self {
        ClassStats(std::array::from_fn(|r| self.0[r] - other.0[r]))
    }

    fn mass(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `-n * gini`, so that split gain is the weighted impurity decrease.
pub(crate) fn gini_score(s: &ClassStats) -> f64 {
    let n = s.mass();
    if n <= 0.0 {
        return 0.0;
    }
    s.0.iter().map(|c| c * c).sum::<f64>() / n - n
}

pub(crate) fn class_distribution(s: &ClassStats) -> RaceVector {
    let n = s.mass();
    if n <= 0.0 {
        return [1.0 / NUM_RACES as f64; NUM_RACES];
    }
    s.0.map(|c| c / n)
}

pub(crate) const MIN_GINI_GAIN: f64 = 1e-9;

/// Grow one CART tree on `binned` over rows with positive `weights`.
pub(crate) fn grow_classification_tree(
    binned: &Binned,
    labels: &[usize],
    weights: Option<&[u32]>,
    params: &TreeParams,
    features_per_split: Option<usize>,
    rng: Option<rand_chacha::ChaCha8Rng>,
) -> Tree<RaceVector> {
    let stats: Vec<ClassStats> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut c = [0.0; NUM_RACES];
            c[l] = weights.map_or(1.0, |w| w[i] as f64);
            ClassStats(c)
        })
        .collect();
    let rows: Vec<u32> = (0..labels.len() as u32)
        .filter(|&i| weights.is_none_or(|w| w[i as usize] > 0))
        .collect();
    Grower {
        binned,
        stats: &stats,
        params: GrowParams {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf.max(1) as f64,
            features_per_split,
        },
        score: gini_score,
        min_gain: MIN_GINI_GAIN,
        leaf: class_distribution,
        rng,
        _v: std::marker::PhantomData,
    }
    .grow(rows)
}

/// Greedy CART tree. Splits are searched over at most 255 bins per feature;
/// features with fewer distinct values split at midpoints between them. Ties
/// keep the first split found (lowest feature, then lowest threshold). The
/// result does not depend on `seed`.
pub fn train_tree(data: &LabelledMatrix, params: &TreeParams, _seed: u64) -> TreeModel {
    let binned = Binned::new(data, MAX_BINS);
    TreeModel {
        layout: data.layout(),
        tree: grow_classification_tree(&binned, data.labels(), None, params, None, None),
    }
}
