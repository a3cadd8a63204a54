//! Gradient-boosted trees with a softmax link and second-order leaf weights.
//!
//! The model keeps one additive score `F_k` per class on top of the log base
//! rates, so `P(k | x) ∝ n_k * exp(F_k(x))` where `n_k` is the training count
//! of class `k`. Each iteration fits one regression tree per class to the
//! gradient `p - y` and hessian `2p(1 - p)` of the multinomial log-loss. A
//! split gains `½[G_L²/(H_L+λ) + G_R²/(H_R+λ) - G²/(H+λ)] - γ`, and a leaf
//! outputs `-η G/(H+λ)` for learning rate `η`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binning::{Binned, GrowParams, Grower, Stats, MAX_BINS};
use super::tree::Tree;
use super::LabelledMatrix;
use crate::error::{Error, Result};
use crate::race::{RaceVector, NUM_RACES};
use crate::tables::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub iterations: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Penalty per leaf (γ).
    pub gamma: f64,
    /// Squared leaf-weight penalty (λ).
    pub leaf_penalty: f64,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            iterations: 100,
            learning_rate: 0.1,
            max_depth: 4,
            min_leaf: 20,
            gamma: 0.0,
            leaf_penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub layout: Layout,
    pub params: GbmParams,
    /// Training class counts; their logs are the initial scores.
    pub class_counts: RaceVector,
    /// `iterations * 5` trees, iteration-major.
    pub trees: Vec<Tree<f64>>,
    /// Training log-loss before the first and after every iteration.
    pub train_loss: Vec<f64>,
}

fn probabilities(counts: &RaceVector, f: &[f64]) -> RaceVector {
    let m = (0..NUM_RACES)
        .filter(|&k| counts[k] > 0.0)
        .map(|k| f[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let w: RaceVector = std::array::from_fn(|k| {
        if counts[k] > 0.0 {
            counts[k] * (f[k] - m).exp()
        } else {
            0.0
        }
    });
    let z: f64 = w.iter().sum();
    w.map(|v| v / z)
}

impl GbmModel {
    pub fn predict_row(&self, x: &[f64]) -> RaceVector {
        let mut f = [0.0; NUM_RACES];
        for (i, t) in self.trees.iter().enumerate() {
            f[i % NUM_RACES] += t.predict(x);
        }
        probabilities(&self.class_counts, &f)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct GradStats {
    g: f64,
    h: f64,
    n: f64,
}

impl Stats for GradStats {
    fn add(&mut self, o: &Self) {
        self.g += o.g;
        self.h += o.h;
        self.n += o.n;
    }

    fn sub(&self, o: &Self) -> Self {
        GradStats {
            g: self.g - o.g,
            h: self.h - o.h,
            n: self.n - o.n,
        }
    }

    fn mass(&self) -> f64 {
        self.n
    }
}

fn validate(p: &GbmParams) -> Result<()> {
    let ok = p.learning_rate >= 0.0
        && p.learning_rate.is_finite()
        && p.gamma >= 0.0
        && p.gamma.is_finite()
        && p.leaf_penalty >= 0.0
        && p.leaf_penalty.is_finite();
    if !ok {
        return Err(Error::Config(format!("invalid boosting parameters {p:?}")));
    }
    Ok(())
}

fn mean_log_loss(counts: &RaceVector, scores: &[f64], labels: &[usize]) -> f64 {
    let total: f64 = scores
        .par_chunks(NUM_RACES)
        .zip(labels.par_iter())
        .with_min_len(4096)
        .map(|(f, &y)| -probabilities(counts, f)[y].max(1e-300).ln())
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / labels.len() as f64
}

pub fn train_gbm(data: &LabelledMatrix, params: &GbmParams, _seed: u64) -> Result<GbmModel> {
    validate(params)?;
    if data.is_empty() {
        return Err(Error::Data("cannot boost on an empty matrix".into()));
    }
    let n = data.len();
    let labels = data.labels();
    let class_counts: RaceVector = data.class_counts().map(|c| c as f64);
    let binned = Binned::new(data, MAX_BINS);
    let lambda = params.leaf_penalty;
    let eta = params.learning_rate;

    let mut scores = vec![0.0; n * NUM_RACES];
    let mut trees = Vec::with_capacity(params.iterations * NUM_RACES);
    let mut train_loss = vec![mean_log_loss(&class_counts, &scores, labels)];

    for it in 0..params.iterations {
        let probs: Vec<RaceVector> = scores
            .par_chunks(NUM_RACES)
            .map(|f| probabilities(&class_counts, f))
            .collect();
        let round: Vec<Tree<f64>> = (0..NUM_RACES)
            .into_par_iter()
            .map(|k| {
                let stats: Vec<GradStats> = probs
                    .iter()
                    .zip(labels)
                    .map(|(p, &y)| GradStats {
                        g: p[k] - if y == k { 1.0 } else { 0.0 },
                        h: 2.0 * p[k] * (1.0 - p[k]),
                        n: 1.0,
                    })
                    .collect();
                Grower {
                    binned: &binned,
                    stats: &stats,
                    params: GrowParams {
                        max_depth: params.max_depth,
                        min_leaf: params.min_leaf.max(1) as f64,
                        features_per_split: None,
                    },
                    score: |s: &GradStats| {
                        let den = s.h + lambda;
                        if den > 0.0 {
                            0.5 * s.g * s.g / den
                        } else {
                            0.0
                        }
                    },
                    min_gain: params.gamma + 1e-12,
                    leaf: |s: &GradStats| {
                        let den = s.h + lambda;
                        if den > 0.0 {
                            -eta * s.g / den
                        } else {
                            0.0
                        }
                    },
                    rng: None,
                    _v: std::marker::PhantomData,
                }
                .grow((0..n as u32).collect())
            })
            .collect();
        scores
            .par_chunks_mut(NUM_RACES)
            .enumerate()
            .for_each(|(i, f)| {
                let x = data.row(i);
                for (k, t) in round.iter().enumerate() {
                    f[k] += t.predict(x);
                }
            });
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "boosting scores became non-finite at iteration {}",
                it + 1
            )));
        }
        trees.extend(round);
        train_loss.push(mean_log_loss(&class_counts, &scores, labels));
    }
    Ok(GbmModel {
        layout: data.layout(),
        params: *params,
        class_counts,
        trees,
        train_loss,
    })
}
