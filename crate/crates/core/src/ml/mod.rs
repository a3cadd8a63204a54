//! Supervised classifiers over probability feature vectors.
//!
//! All families consume a [`LabelledMatrix`] built from the tables module and
//! produce a [`Model`] that maps a feature row to a race distribution.

mod binning;
pub mod forest;
pub mod gbm;
pub mod loso;
pub mod mlr;
pub mod tree;
pub mod tune;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bisg::PosteriorDistribution;
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::method::Method;
use crate::race::{RaceVector, NUM_RACES};
use crate::tables::{write_features, FeatureVector, Layout, TableRefs};

pub use forest::{predict_forest, train_forest, ForestModel, ForestParams};
pub use gbm::{train_gbm, GbmModel, GbmParams};
pub use loso::{run_loso, LosoConfig, LosoFold, LosoManifest, StateData};
pub use mlr::{predict_mlr, train_mlr, ElasticNetConfig, MlrFit, MlrModel, OptimizerConfig};
pub use tree::{train_tree, Node, Tree, TreeModel, TreeParams};
pub use tune::{tune, tune_points, CvRow, CvTable, ParamRange, ParamScale, TuneSpec};

/// Grouping key of a training row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKey {
    pub state: String,
    pub tract: String,
}

/// Row-major feature matrix with one label and group key per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledMatrix {
    layout: Layout,
    x: Vec<f64>,
    y: Vec<usize>,
    groups: Vec<GroupKey>,
}

impl LabelledMatrix {
    pub fn new(layout: Layout, x: Vec<f64>, y: Vec<usize>, groups: Vec<GroupKey>) -> Result<Self> {
        let d = layout.dim();
        if x.len() != y.len() * d || groups.len() != y.len() {
            return Err(Error::Config(format!(
                "matrix shape mismatch: {} values, {} labels, {} groups for {d} features",
                x.len(),
                y.len(),
                groups.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature in row {}", i / d)));
        }
        if let Some(&l) = y.iter().find(|&&l| l >= NUM_RACES) {
            return Err(Error::Data(format!("label index {l} out of range")));
        }
        Ok(LabelledMatrix {
            layout,
            x,
            y,
            groups,
        })
    }

    /// Matrix without meaningful group keys, for fixtures.
    pub fn from_rows(layout: Layout, x: Vec<f64>, y: Vec<usize>) -> Result<Self> {
        let groups = vec![
            GroupKey {
                state: String::new(),
                tract: String::new(),
            };
            y.len()
        ];
        Self::new(layout, x, y, groups)
    }

    /// Featurize labelled records. Records without a known label are an error.
    pub fn from_dataset(d: &Dataset, tables: &TableRefs<'_>, layout: Layout) -> Result<Self> {
        let dim = layout.dim();
        let mut x = vec![0.0; d.len() * dim];
        x.par_chunks_mut(dim)
            .zip(d.records.par_iter())
            .try_for_each(|(row, rec)| write_features(rec, tables, layout, row))?;
        let mut y = Vec::with_capacity(d.len());
        let mut groups = Vec::with_capacity(d.len());
        for rec in &d.records {
            y.push(rec.label_index().ok_or_else(|| {
                Error::Data(format!("record {} has no known label", rec.record_id))
            })?);
            groups.push(GroupKey {
                state: rec.state.clone(),
                tract: rec.tract_id().to_string(),
            });
        }
        Self::new(layout, x, y, groups)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn values(&self) -> &[f64] {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn groups(&self) -> &[GroupKey] {
        &self.groups
    }

    pub fn class_counts(&self) -> [usize; NUM_RACES] {
        let mut c = [0; NUM_RACES];
        for &l in &self.y {
            c[l] += 1;
        }
        c
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> LabelledMatrix {
        let d = self.dim();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        LabelledMatrix {
            layout: self.layout,
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
        }
    }

    /// Stack matrices of the same layout.
    pub fn concat(parts: &[LabelledMatrix]) -> Result<LabelledMatrix> {
        let layout = parts
            .first()
            .map(|p| p.layout)
            .ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.layout != layout) {
            return Err(Error::Config(
                "cannot stack matrices of different layouts".into(),
            ));
        }
        let mut out = LabelledMatrix {
            layout,
            x: Vec::new(),
            y: Vec::new(),
            groups: Vec::new(),
        };
        for p in parts {
            out.x.extend_from_slice(&p.x);
            out.y.extend_from_slice(&p.y);
            out.groups.extend(p.groups.iter().cloned());
        }
        Ok(out)
    }
}

/// Mean multinomial log-loss of `probs` against `labels`, clipping at 1e-15.
pub fn log_loss(probs: &[RaceVector], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -p[l].max(1e-15).ln())
        .sum();
    total / labels.len() as f64
}

/// Hyperparameters of one model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Hyperparams {
    Mlr,
    Elnet(ElasticNetConfig),
    Tree(TreeParams),
    Forest(ForestParams),
    Gbm(GbmParams),
}

impl Hyperparams {
    pub fn method(&self) -> Method {
        match self {
            Hyperparams::Mlr => Method::Mlr,
            Hyperparams::Elnet(_) => Method::Elnet,
            Hyperparams::Tree(_) => Method::Tree,
            Hyperparams::Forest(_) => Method::Forest,
            Hyperparams::Gbm(_) => Method::Gbm,
        }
    }

    /// Defaults of a supervised family.
    pub fn default_for(method: Method) -> Result<Self> {
        Ok(match method {
            Method::Mlr => Hyperparams::Mlr,
            Method::Elnet => Hyperparams::Elnet(ElasticNetConfig::default()),
            Method::Tree => Hyperparams::Tree(TreeParams::default()),
            Method::Forest => Hyperparams::Forest(ForestParams::default()),
            Method::Gbm => Hyperparams::Gbm(GbmParams::default()),
            other => return Err(Error::Config(format!("{other} is not a trainable family"))),
        })
    }

    /// Override named fields; unknown names are a configuration error.
    pub fn with(mut self, name: &str, value: f64) -> Result<Self> {
        let method = self.method();
        let bad = || Error::Config(format!("unknown hyperparameter {name:?} for {method}"));
        let as_usize = |v: f64| v.round().max(0.0) as usize;
        match &mut self {
            Hyperparams::Mlr => return Err(bad()),
            Hyperparams::Elnet(c) => match name {
                "lambda" => c.lambda = value,
                "delta" => c.delta = value,
                _ => return Err(bad()),
            },
            Hyperparams::Tree(p) => match name {
                "max_depth" => p.max_depth = as_usize(value),
                "min_leaf" => p.min_leaf = as_usize(value).max(1),
                _ => return Err(bad()),
            },
            Hyperparams::Forest(p) => match name {
                "n_trees" => p.n_trees = as_usize(value).max(1),
                "max_depth" => p.max_depth = as_usize(value),
                "min_leaf" => p.min_leaf = as_usize(value).max(1),
                "feature_subsample" => p.feature_subsample = value,
                "row_subsample" => p.row_subsample = Some(value),
                _ => return Err(bad()),
            },
            Hyperparams::Gbm(p) => match name {
                "iterations" => p.iterations = as_usize(value),
                "learning_rate" => p.learning_rate = value,
                "max_depth" => p.max_depth = as_usize(value),
                "min_leaf" => p.min_leaf = as_usize(value).max(1),
                "gamma" => p.gamma = value,
                "leaf_penalty" => p.leaf_penalty = value,
                _ => return Err(bad()),
            },
        }
        Ok(self)
    }

    /// Named numeric values, in a fixed order.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        match self {
            Hyperparams::Mlr => vec![],
            Hyperparams::Elnet(c) => vec![("lambda", c.lambda), ("delta", c.delta)],
            Hyperparams::Tree(p) => vec![
                ("max_depth", p.max_depth as f64),
                ("min_leaf", p.min_leaf as f64),
            ],
            Hyperparams::Forest(p) => vec![
                ("n_trees", p.n_trees as f64),
                ("max_depth", p.max_depth as f64),
                ("min_leaf", p.min_leaf as f64),
                ("feature_subsample", p.feature_subsample),
                ("row_subsample", p.row_subsample.unwrap_or(0.0)),
            ],
            Hyperparams::Gbm(p) => vec![
                ("iterations", p.iterations as f64),
                ("learning_rate", p.learning_rate),
                ("max_depth", p.max_depth as f64),
                ("min_leaf", p.min_leaf as f64),
                ("gamma", p.gamma),
                ("leaf_penalty", p.leaf_penalty),
            ],
        }
    }
}

/// A trained classifier of any family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Mlr(MlrModel),
    Tree(TreeModel),
    Forest(ForestModel),
    Gbm(GbmModel),
}

impl Model {
    pub fn layout(&self) -> Layout {
        match self {
            Model::Mlr(m) => m.layout,
            Model::Tree(m) => m.layout,
            Model::Forest(m) => m.layout,
            Model::Gbm(m) => m.layout,
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Model::Mlr(m) => m.method,
            Model::Tree(_) => Method::Tree,
            Model::Forest(_) => Method::Forest,
            Model::Gbm(_) => Method::Gbm,
        }
    }

    /// Class distribution for a raw feature row of the model's layout.
    pub fn predict_row(&self, x: &[f64]) -> RaceVector {
        match self {
            Model::Mlr(m) => m.predict_row(x),
            Model::Tree(m) => *m.tree.predict(x),
            Model::Forest(m) => m.predict_row(x),
            Model::Gbm(m) => m.predict_row(x),
        }
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<PosteriorDistribution> {
        check_layout(self.layout(), x)?;
        Ok(PosteriorDistribution::new(
            self.predict_row(&x.values),
            self.method(),
        ))
    }

    /// Predictions for every row of `m`, in row order.
    pub fn predict_matrix(&self, m: &LabelledMatrix) -> Result<Vec<RaceVector>> {
        if m.layout() != self.layout() {
            return Err(layout_error(self.layout(), m.layout()));
        }
        Ok(m.values()
            .par_chunks(m.dim())
            .map(|row| self.predict_row(row))
            .collect())
    }
}

fn layout_error(model: Layout, data: Layout) -> Error {
    Error::Config(format!(
        "model expects the {} layout but features use the {} layout",
        model.as_str(),
        data.as_str()
    ))
}

pub(crate) fn check_layout(model: Layout, x: &FeatureVector) -> Result<()> {
    if model != x.layout || x.values.len() != model.dim() {
        return Err(layout_error(model, x.layout));
    }
    Ok(())
}

/// Train one model with the given hyperparameters.
pub fn train(h: &Hyperparams, data: &LabelledMatrix, seed: u64) -> Result<Model> {
    Ok(match h {
        Hyperparams::Mlr => {
            Model::Mlr(train_mlr(data, None, &OptimizerConfig::default(), seed)?.model)
        }
        Hyperparams::Elnet(c) => {
            Model::Mlr(train_mlr(data, Some(*c), &OptimizerConfig::default(), seed)?.model)
        }
        Hyperparams::Tree(p) => Model::Tree(train_tree(data, p, seed)),
        Hyperparams::Forest(p) => Model::Forest(train_forest(data, p, seed)),
        Hyperparams::Gbm(p) => Model::Gbm(train_gbm(data, p, seed)?),
    })
}

pub const MODEL_FORMAT: &str = "bisgml-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Serialized model with the provenance needed to audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub family: Method,
    pub layout: Layout,
    pub hyperparameters: Hyperparams,
    pub seed: u64,
    pub training_states: Vec<String>,
    pub model: Model,
}

impl ModelFile {
    pub fn new(
        model: Model,
        hyperparameters: Hyperparams,
        seed: u64,
        training_states: Vec<String>,
    ) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            family: model.method(),
            layout: model.layout(),
            hyperparameters,
            seed,
            training_states,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: ModelFile = serde_json::from_str(&text)?;
        if f.format != MODEL_FORMAT || f.version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                f.format,
                f.version
            )));
        }
        if f.layout != f.model.layout() {
            return Err(Error::Config(format!(
                "{}: header and model layouts differ",
                path.display()
            )));
        }
        Ok(f)
    }
}
