//! Latin hypercube search with stratified k-fold cross-validation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{log_loss, train, Hyperparams, LabelledMatrix};
use crate::error::{Error, Result};
use crate::method::Method;
use crate::race::NUM_RACES;
use crate::rng::{derive_named, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamScale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub scale: ParamScale,
    pub integer: bool,
}

impl ParamRange {
    pub fn new(name: &str, lo: f64, hi: f64, scale: ParamScale, integer: bool) -> Self {
        ParamRange {
            name: name.into(),
            lo,
            hi,
            scale,
            integer,
        }
    }

    /// Map `u` in [0, 1] onto the range.
    fn at(&self, u: f64) -> f64 {
        let v = match self.scale {
            ParamScale::Linear => self.lo + u * (self.hi - self.lo),
            ParamScale::Log => (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp(),
        };
        let v = v.clamp(self.lo, self.hi);
        if self.integer {
            v.round()
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSpec {
    pub ranges: Vec<ParamRange>,
    /// Number of hypercube points.
    pub samples: usize,
    pub folds: usize,
    /// Rows drawn from the training data for tuning.
    pub sample_size: usize,
    pub seed: u64,
}

impl TuneSpec {
    /// Documented default search box of a family.
    pub fn default_for(family: Method) -> Self {
        use ParamScale::*;
        let ranges = match family {
            Method::Elnet => vec![
                ParamRange::new("lambda", 1e-6, 1e1, Log, false),
                ParamRange::new("delta", 0.0, 1.0, Linear, false),
            ],
            Method::Tree => vec![
                ParamRange::new("max_depth", 2.0, 10.0, Linear, true),
                ParamRange::new("min_leaf", 1.0, 100.0, Log, true),
            ],
            Method::Forest => vec![
                ParamRange::new("n_trees", 50.0, 500.0, Linear, true),
                ParamRange::new("max_depth", 2.0, 10.0, Linear, true),
                ParamRange::new("feature_subsample", 0.2, 1.0, Linear, false),
            ],
            Method::Gbm => vec![
                ParamRange::new("iterations", 50.0, 300.0, Linear, true),
                ParamRange::new("learning_rate", 0.01, 0.3, Log, false),
                ParamRange::new("max_depth", 2.0, 8.0, Linear, true),
                ParamRange::new("gamma", 0.0, 1.0, Linear, false),
                ParamRange::new("leaf_penalty", 0.1, 10.0, Log, false),
            ],
            _ => vec![],
        };
        TuneSpec {
            ranges,
            samples: 20,
            folds: 5,
            sample_size: 100_000,
            seed: 0,
        }
    }

    pub fn validate(&self, family: Method) -> Result<()> {
        if self.folds < 2 || self.samples == 0 {
            return Err(Error::Config(
                "tuning needs folds >= 2 and samples >= 1".into(),
            ));
        }
        if self.ranges.is_empty() && family != Method::Mlr {
            return Err(Error::Config(format!(
                "empty hyperparameter range box for {family}"
            )));
        }
        for r in &self.ranges {
            let ok = r.lo.is_finite()
                && r.hi.is_finite()
                && r.lo <= r.hi
                && (r.scale == ParamScale::Linear || r.lo > 0.0);
            if !ok {
                return Err(Error::Config(format!(
                    "empty or invalid range for {}: [{}, {}]",
                    r.name, r.lo, r.hi
                )));
            }
        }
        Ok(())
    }

    /// Latin hypercube sample of the range box, one value per range per point.
    pub fn hypercube(&self) -> Vec<Vec<f64>> {
        let m = self.samples;
        let mut rng = rng_from(derive_named(self.seed, "tune/hypercube"));
        let mut points = vec![Vec::with_capacity(self.ranges.len()); m];
        for r in &self.ranges {
            let mut strata: Vec<usize> = (0..m).collect();
            strata.shuffle(&mut rng);
            for (p, s) in points.iter_mut().zip(strata) {
                let u = (s as f64 + rng.random::<f64>()) / m as f64;
                p.push(r.at(u));
            }
        }
        points
    }
}

/// Label-stratified fold assignment.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(derive_named(seed, "tune/folds"));
    let mut fold = vec![0; labels.len()];
    for class in 0..NUM_RACES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    fold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub point: usize,
    pub params: Hyperparams,
    pub fold_losses: Vec<f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
    /// Index of the row with the lowest mean loss (first on ties).
    pub best: usize,
}

impl CvTable {
    pub fn best_params(&self) -> &Hyperparams {
        &self.rows[self.best].params
    }

    /// One row per point: `point,<params...>,fold_1..fold_k,mean_logloss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("point");
        let names: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.params.values().into_iter().map(|(n, _)| n).collect())
            .unwrap_or_default();
        for n in &names {
            let _ = write!(out, ",{n}");
        }
        let k = self.rows.first().map_or(0, |r| r.fold_losses.len());
        for f in 1..=k {
            let _ = write!(out, ",fold_{f}");
        }
        out.push_str(",mean_logloss\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.point);
            for (_, v) in r.params.values() {
                let _ = write!(out, ",{v}");
            }
            for l in &r.fold_losses {
                let _ = write!(out, ",{l}");
            }
            let _ = writeln!(out, ",{}", r.mean_loss);
        }
        out
    }
}

/// Mean held-fold log-loss of each candidate over the same stratified folds.
pub fn tune_points(
    points: &[Hyperparams],
    data: &LabelledMatrix,
    folds: usize,
    seed: u64,
) -> Result<CvTable> {
    if points.is_empty() {
        return Err(Error::Config("no hyperparameter points to evaluate".into()));
    }
    if folds < 2 || data.len() < folds {
        return Err(Error::Config(format!(
            "need at least {folds} rows and 2 folds, got {} rows",
            data.len()
        )));
    }
    let assignment = stratified_folds(data.labels(), folds, seed);
    let splits: Vec<(LabelledMatrix, LabelledMatrix)> = (0..folds)
        .map(|f| {
            let (held, train): (Vec<usize>, Vec<usize>) =
                (0..data.len()).partition(|&i| assignment[i] == f);
            (data.subset(&train), data.subset(&held))
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..folds).map(move |f| (p, f)))
        .collect();
    let losses = jobs
        .par_iter()
        .map(|&(p, f)| {
            let (train_m, held) = &splits[f];
            let model = train(
                &points[p],
                train_m,
                derive_named(seed, &format!("tune/{p}/{f}")),
            )?;
            let probs = model.predict_matrix(held)?;
            Ok(log_loss(&probs, held.labels()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows: Vec<CvRow> = points
        .iter()
        .enumerate()
        .map(|(p, params)| {
            let fold_losses = losses[p * folds..(p + 1) * folds].to_vec();
            let mean_loss = fold_losses.iter().sum::<f64>() / folds as f64;
            CvRow {
                point: p,
                params: params.clone(),
                fold_losses,
                mean_loss,
            }
        })
        .collect();
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.mean_loss < rows[best].mean_loss {
            best = i;
        }
    }
    Ok(CvTable { rows, best })
}

/// Sample the range box, cross-validate every point on (a sample of) `data`
/// and return the table, whose `best` row holds the selected point.
pub fn tune(spec: &TuneSpec, family: Method, data: &LabelledMatrix) -> Result<CvTable> {
    spec.validate(family)?;
    let base = Hyperparams::default_for(family)?;
    let points: Vec<Hyperparams> = if spec.ranges.is_empty() {
        vec![base]
    } else {
        spec.hypercube()
            .into_iter()
            .map(|values| {
                spec.ranges
                    .iter()
                    .zip(values)
                    .try_fold(base.clone(), |h, (r, v)| h.with(&r.name, v))
            })
            .collect::<Result<_>>()?
    };
    let sample;
    let data = if data.len() > spec.sample_size {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng_from(derive_named(spec.seed, "tune/sample")));
        idx.truncate(spec.sample_size);
        idx.sort_unstable();
        sample = data.subset(&idx);
        &sample
    } else {
        data
    };
    tune_points(&points, data, spec.folds, spec.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml::fixtures::blobs;
    use crate::ml::{ElasticNetConfig, TreeParams};

    #[test]
    fn hypercube_fills_every_stratum() {
        let spec = TuneSpec {
            samples: 8,
            ..TuneSpec::default_for(Method::Elnet)
        };
        let pts = spec.hypercube();
        assert_eq!(pts.len(), 8);
        let mut strata: Vec<usize> = pts.iter().map(|p| (p[1] * 8.0).floor() as usize).collect();
        strata.sort_unstable();
        assert_eq!(strata, (0..8).collect::<Vec<_>>());
        for p in &pts {
            assert!((1e-6..=10.0).contains(&p[0]));
        }
        assert_eq!(pts, spec.hypercube());
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<usize> = (0..103).map(|i| if i < 10 { 3 } else { i % 3 }).collect();
        let f = stratified_folds(&labels, 5, 1);
        for fold in 0..5 {
            let rare = (0..103).filter(|&i| labels[i] == 3 && f[i] == fold).count();
            assert_eq!(rare, 2);
        }
    }

    #[test]
    fn single_point_and_empty_box() {
        let data = blobs(200, 1, 2.0);
        let spec = TuneSpec {
            samples: 1,
            folds: 3,
            ..TuneSpec::default_for(Method::Tree)
        };
        let table = tune(&spec, Method::Tree, &data).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.best, 0);
        assert_eq!(table.to_csv().lines().count(), 2);
        let empty = TuneSpec {
            ranges: vec![],
            ..spec.clone()
        };
        assert!(matches!(
            tune(&empty, Method::Tree, &data),
            Err(Error::Config(_))
        ));
        let inverted = TuneSpec {
            ranges: vec![ParamRange::new(
                "max_depth",
                5.0,
                2.0,
                ParamScale::Linear,
                true,
            )],
            ..spec
        };
        assert!(matches!(
            tune(&inverted, Method::Tree, &data),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dominant_point_wins() {
        let data = blobs(400, 2, 2.0);
        let points = vec![
            Hyperparams::Tree(TreeParams {
                max_depth: 0,
                min_leaf: 1,
            }),
            Hyperparams::Mlr,
        ];
        let table = tune_points(&points, &data, 5, 3).unwrap();
        assert!(table.rows[1]
            .fold_losses
            .iter()
            .zip(&table.rows[0].fold_losses)
            .all(|(a, b)| a < b));
        assert_eq!(table.best, 1);
        assert_eq!(table, tune_points(&points, &data, 5, 3).unwrap());
    }

    #[test]
    fn elnet_selection_beats_worst() {
        let data = blobs(600, 4, 3.0);
        let spec = TuneSpec {
            ranges: vec![ParamRange::new("lambda", 1e-6, 1e1, ParamScale::Log, false)],
            samples: 8,
            folds: 5,
            sample_size: 100_000,
            seed: 5,
        };
        let table = tune(&spec, Method::Elnet, &data).unwrap();
        let worst = table
            .rows
            .iter()
            .map(|r| r.mean_loss)
            .fold(f64::MIN, f64::max);
        assert!(table.rows[table.best].mean_loss < worst);
        assert!(matches!(
            table.best_params(),
            Hyperparams::Elnet(ElasticNetConfig { delta, .. }) if *delta == 0.5
        ));
    }
}
