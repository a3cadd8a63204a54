//! Feature binning and greedy histogram tree growth shared by the tree families.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::tree::{Node, Tree};
use super::LabelledMatrix;

pub(crate) const MAX_BINS: usize = 255;

/// Feature codes in column-major order plus the split threshold after each bin.
///
/// A value `v` falls in bin `b` when `thresholds[b - 1] < v <= thresholds[b]`,
/// so "go left" at bin `b` is the same test as `v <= thresholds[b]`.
pub(crate) struct Binned {
    pub n_rows: usize,
    pub codes: Vec<u8>,
    pub thresholds: Vec<Vec<f64>>,
}

fn thresholds_for(mut values: Vec<f64>, max_bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut distinct = values.clone();
    distinct.dedup();
    if distinct.len() <= max_bins {
        return distinct
            .windows(2)
            .map(|w| w[0] + (w[1] - w[0]) / 2.0)
            .collect();
    }
    let n = values.len();
    let mut out = Vec::with_capacity(max_bins - 1);
    for b in 1..max_bins {
        let upper = values[b * n / max_bins - 1];
        let next = distinct.partition_point(|&v| v <= upper);
        if next < distinct.len() {
            let t = upper + (distinct[next] - upper) / 2.0;
            if out.last().is_none_or(|&last| t > last) {
                out.push(t);
            }
        }
    }
    out
}

impl Binned {
    pub fn new(data: &LabelledMatrix, max_bins: usize) -> Self {
        let d = data.dim();
        let n = data.len();
        let mut codes = vec![0u8; n * d];
        let mut thresholds = Vec::with_capacity(d);
        for j in 0..d {
            let column: Vec<f64> = (0..n).map(|i| data.row(i)[j]).collect();
            let t = thresholds_for(column.clone(), max_bins);
            for (i, v) in column.iter().enumerate() {
                codes[j * n + i] = t.partition_point(|&th| th < *v) as u8;
            }
            thresholds.push(t);
        }
        Binned {
            n_rows: n,
            codes,
            thresholds,
        }
    }

    pub fn dim(&self) -> usize {
        self.thresholds.len()
    }

    fn code(&self, feature: usize, row: usize) -> usize {
        self.codes[feature * self.n_rows + row] as usize
    }
}

/// Additive node statistics.
pub(crate) trait Stats: Copy + Default + Send + Sync {
    fn add(&mut self, other: &Self);
    fn sub(&self, other: &Self) -> Self;
    /// Row mass used for the minimum-leaf check.
    fn mass(&self) -> f64;
}

pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_leaf: f64,
    /// Number of features tried per split; all when `None`.
    pub features_per_split: Option<usize>,
}

pub(crate) struct Grower<'a, S, V, F, L> {
    pub binned: &'a Binned,
    pub stats: &'a [S],
    pub params: GrowParams,
    /// Node score; a split's gain is `score(left) + score(right) - score(parent)`.
    pub score: F,
    /// A split must beat this gain.
    pub min_gain: f64,
    pub leaf: L,
    pub rng: Option<ChaCha8Rng>,
    pub _v: std::marker::PhantomData<V>,
}

struct Best {
    feature: usize,
    bin: usize,
    gain: f64,
}

impl<S, V, F, L> Grower<'_, S, V, F, L>
where
    S: Stats,
    F: Fn(&S) -> f64,
    L: Fn(&S) -> V,
{
    pub fn grow(mut self, rows: Vec<u32>) -> Tree<V> {
        let mut nodes = Vec::new();
        self.node(rows, 0, &mut nodes);
        Tree { nodes }
    }

    fn total(&self, rows: &[u32]) -> S {
        let mut s = S::default();
        for &r in rows {
            s.add(&self.stats[r as usize]);
        }
        s
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let d = self.binned.dim();
        match (self.params.features_per_split, self.rng.as_mut()) {
            (Some(k), Some(rng)) if k < d => {
                let mut f = sample(rng, d, k).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        }
    }

    fn best_split(&mut self, rows: &[u32], parent: &S) -> Option<Best> {
        let parent_score = (self.score)(parent);
        let mut best: Option<Best> = None;
        let mut best_gain = self.min_gain;
        for j in self.candidate_features() {
            let nb = self.binned.thresholds[j].len() + 1;
            if nb < 2 {
                continue;
            }
            let mut hist = vec![S::default(); nb];
            for &r in rows {
                hist[self.binned.code(j, r as usize)].add(&self.stats[r as usize]);
            }
            let mut left = S::default();
            for (b, h) in hist.iter().enumerate().take(nb - 1) {
                left.add(h);
                let right = parent.sub(&left);
                if left.mass() < self.params.min_leaf || right.mass() < self.params.min_leaf {
                    continue;
                }
                let gain = (self.score)(&left) + (self.score)(&right) - parent_score;
                if gain > best_gain {
                    best_gain = gain;
                    best = Some(Best {
                        feature: j,
                        bin: b,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn node(&mut self, rows: Vec<u32>, depth: usize, nodes: &mut Vec<Node<V>>) -> usize {
        let id = nodes.len();
        let total = self.total(&rows);
        nodes.push(Node::Leaf((self.leaf)(&total)));
        if depth >= self.params.max_depth || total.mass() < 2.0 * self.params.min_leaf {
            return id;
        }
        let Some(best) = self.best_split(&rows, &total) else {
            return id;
        };
        debug_assert!(best.gain > self.min_gain);
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows
            .into_iter()
            .partition(|&r| self.binned.code(best.feature, r as usize) <= best.bin);
        let left = self.node(left_rows, depth + 1, nodes);
        let right = self.node(right_rows, depth + 1, nodes);
        nodes[id] = Node::Split {
            feature: best.feature,
            threshold: self.binned.thresholds[best.feature][best.bin],
            left,
            right,
        };
        id
    }
}
