//! Leave-one-state-out training and prediction.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, tune, CvTable, Hyperparams, LabelledMatrix, Model, ModelFile, TuneSpec};
use crate::bisg::predict_batch;
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::method::Method;
use crate::race::RaceVector;
use crate::rng::{derive_named, rng_from};
use crate::tables::{
    build_name_table, write_features, GeoTable, Layout, NameSlot, SurnameTable, TableRefs,
};

/// Labelled records of one state with that state's block table.
#[derive(Debug, Clone)]
pub struct StateData {
    pub code: String,
    pub dataset: Dataset,
    pub geo: GeoTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoConfig {
    /// A supervised family, or `bisg`/`extended` for the unsupervised baselines.
    pub family: Method,
    pub layout: Layout,
    /// Tune before training; `None` trains with `params` (or family defaults).
    pub tune: Option<TuneSpec>,
    pub params: Option<Hyperparams>,
    /// Multiplier applied to `tune_rows` and `train_rows`.
    pub scale: f64,
    pub tune_rows: usize,
    pub train_rows: usize,
    /// Smoothing floor of the given-name tables.
    pub name_floor: f64,
    pub seed: u64,
}

impl LosoConfig {
    pub fn new(family: Method, layout: Layout) -> Self {
        LosoConfig {
            family,
            layout,
            tune: None,
            params: None,
            scale: 1.0,
            tune_rows: 100_000,
            train_rows: 1_000_000,
            name_floor: 1.0,
            seed: 0,
        }
    }

    fn scaled(&self, rows: usize) -> usize {
        ((rows as f64 * self.scale).round() as usize).max(1)
    }

    fn effective_layout(&self) -> Layout {
        match self.family {
            Method::Bisg => Layout::Base,
            Method::Extended => Layout::Extended,
            _ => self.layout,
        }
    }
}

/// What went into one held-out run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoManifest {
    pub held_out: String,
    pub family: Method,
    pub layout: Layout,
    pub training_states: Vec<String>,
    pub name_table_states: Vec<String>,
    pub training_records: usize,
    pub tuning_records: usize,
    pub held_out_records: usize,
    /// Set once the leakage checks have passed.
    pub held_out_absent_from_training: bool,
}

#[derive(Debug, Clone)]
pub struct LosoFold {
    pub manifest: LosoManifest,
    pub model: Option<ModelFile>,
    pub cv_table: Option<CvTable>,
    /// Posteriors for every held-out record, in record order.
    pub predictions: Vec<RaceVector>,
}

/// Fail if any held-out row can be found in the training inputs, either by
/// its state code or by its record id.
pub fn check_no_leakage(held: &StateData, training: &[&StateData]) -> Result<()> {
    let held_ids: HashSet<&str> = held
        .dataset
        .records
        .iter()
        .map(|r| r.record_id.as_str())
        .collect();
    for s in training {
        if s.code == held.code {
            return Err(Error::Leakage(format!(
                "held-out state {} listed as a training state",
                held.code
            )));
        }
        for r in &s.dataset.records {
            if r.state == held.code {
                return Err(Error::Leakage(format!(
                    "record {} in training input {} belongs to held-out state {}",
                    r.record_id, s.code, held.code
                )));
            }
            if held_ids.contains(r.record_id.as_str()) {
                return Err(Error::Leakage(format!(
                    "record {} appears in held-out state {} and training input {}",
                    r.record_id, held.code, s.code
                )));
            }
        }
    }
    Ok(())
}

fn feature_rows(d: &Dataset, t: &TableRefs<'_>, layout: Layout) -> Result<Vec<f64>> {
    let dim = layout.dim();
    let mut x = vec![0.0; d.len() * dim];
    x.par_chunks_mut(dim)
        .zip(d.records.par_iter())
        .try_for_each(|(row, rec)| write_features(rec, t, layout, row))?;
    Ok(x)
}

/// Run the protocol for every state in turn: build given-name tables from
/// the other states, tune and train on samples of their records, and predict
/// the held-out state.
pub fn run_loso(
    states: &[StateData],
    surnames: &SurnameTable,
    cfg: &LosoConfig,
) -> Result<Vec<LosoFold>> {
    if states.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-state-out needs at least 2 states, got {}",
            states.len()
        )));
    }
    let mut codes: Vec<&str> = states.iter().map(|s| s.code.as_str()).collect();
    codes.sort_unstable();
    codes.dedup();
    if codes.len() != states.len() {
        return Err(Error::Config("state codes must be distinct".into()));
    }
    if !(cfg.family.is_supervised() || matches!(cfg.family, Method::Bisg | Method::Extended)) {
        return Err(Error::Config(format!(
            "{} cannot be run leave-one-state-out",
            cfg.family
        )));
    }
    states
        .iter()
        .map(|held| run_fold(states, held, surnames, cfg))
        .collect()
}

fn run_fold(
    states: &[StateData],
    held: &StateData,
    surnames: &SurnameTable,
    cfg: &LosoConfig,
) -> Result<LosoFold> {
    let training: Vec<&StateData> = states.iter().filter(|s| s.code != held.code).collect();
    check_no_leakage(held, &training)?;
    let layout = cfg.effective_layout();
    let training_sets: Vec<Dataset> = training.iter().map(|s| s.dataset.clone()).collect();
    let names = if layout == Layout::Extended {
        Some((
            build_name_table(
                &training_sets,
                NameSlot::First,
                cfg.name_floor,
                Some(&held.code),
            )?,
            build_name_table(
                &training_sets,
                NameSlot::Middle,
                cfg.name_floor,
                Some(&held.code),
            )?,
        ))
    } else {
        None
    };
    let (first, middle) = match &names {
        Some((f, m)) => (Some(f), Some(m)),
        None => (None, None),
    };
    let refs = |geo| TableRefs {
        surnames,
        geo,
        first,
        middle,
    };
    let mut manifest = LosoManifest {
        held_out: held.code.clone(),
        family: cfg.family,
        layout,
        training_states: training.iter().map(|s| s.code.clone()).collect(),
        name_table_states: names
            .as_ref()
            .map(|n| n.0.training_states().to_vec())
            .unwrap_or_default(),
        training_records: 0,
        tuning_records: 0,
        held_out_records: held.dataset.len(),
        held_out_absent_from_training: false,
    };

    if !cfg.family.is_supervised() {
        let (posts, _) = predict_batch(&held.dataset, cfg.family, &refs(&held.geo))?;
        manifest.held_out_absent_from_training = true;
        return Ok(LosoFold {
            manifest,
            model: None,
            cv_table: None,
            predictions: posts.into_iter().map(|p| p.probs).collect(),
        });
    }

    // Shared shuffled pool; the tuning sample is a prefix of the training sample.
    let mut pool: Vec<(usize, usize)> = training
        .iter()
        .enumerate()
        .flat_map(|(s, st)| (0..st.dataset.len()).map(move |i| (s, i)))
        .collect();
    pool.shuffle(&mut rng_from(derive_named(
        cfg.seed,
        &format!("loso/sample/{}", held.code),
    )));
    let matrix_of = |picks: &[(usize, usize)]| -> Result<LabelledMatrix> {
        let mut picks = picks.to_vec();
        picks.sort_unstable();
        let parts = (0..training.len())
            .map(|s| {
                let records = picks
                    .iter()
                    .filter(|p| p.0 == s)
                    .map(|&(_, i)| training[s].dataset.records[i].clone())
                    .collect();
                LabelledMatrix::from_dataset(
                    &Dataset::new(records),
                    &refs(&training[s].geo),
                    layout,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        LabelledMatrix::concat(&parts)
    };
    let train_n = cfg.scaled(cfg.train_rows).min(pool.len());
    let train_m = matrix_of(&pool[..train_n])?;
    manifest.training_records = train_m.len();

    let (params, cv_table) = match &cfg.tune {
        Some(spec) => {
            let tune_n = cfg.scaled(cfg.tune_rows).min(pool.len());
            let tune_m = matrix_of(&pool[..tune_n])?;
            manifest.tuning_records = tune_m.len();
            let spec = TuneSpec {
                seed: derive_named(cfg.seed, &format!("loso/tune/{}", held.code)),
                sample_size: tune_n,
                ..spec.clone()
            };
            let table = tune(&spec, cfg.family, &tune_m)?;
            (table.best_params().clone(), Some(table))
        }
        None => (
            match &cfg.params {
                Some(p) => p.clone(),
                None => Hyperparams::default_for(cfg.family)?,
            },
            None,
        ),
    };
    if params.method() != cfg.family {
        return Err(Error::Config(format!(
            "hyperparameters for {} given to a {} run",
            params.method(),
            cfg.family
        )));
    }
    let seed = derive_named(cfg.seed, &format!("loso/train/{}", held.code));
    let model: Model = train(&params, &train_m, seed)?;

    let x = feature_rows(&held.dataset, &refs(&held.geo), layout)?;
    let predictions = x
        .par_chunks(layout.dim())
        .map(|row| model.predict_row(row))
        .collect();
    manifest.held_out_absent_from_training = true;
    Ok(LosoFold {
        model: Some(ModelFile::new(
            model,
            params,
            seed,
            manifest.training_states.clone(),
        )),
        manifest,
        cv_table,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GenerativeSpec};
    use crate::tables::SurnameTable;

    fn tiny_states() -> (Vec<StateData>, SurnameTable) {
        let mut spec = GenerativeSpec::default_four_state(3);
        for s in &mut spec.states {
            s.tracts = 4;
            s.records = 300;
        }
        let corpus = generate(&spec).unwrap();
        let rows = corpus
            .national_surname_counts()
            .into_iter()
            .map(|(n, c)| {
                let t: f64 = c.iter().sum();
                (n, c.map(|v| v / t))
            })
            .collect();
        let surnames = SurnameTable::from_rows(rows, None).unwrap();
        let states = corpus
            .states
            .iter()
            .map(|s| StateData {
                code: s.code.clone(),
                dataset: s.dataset.clone(),
                geo: GeoTable::from_counts(
                    s.blocks
                        .iter()
                        .map(|(b, c)| (b.clone(), c.map(|x| x as f64))),
                )
                .unwrap(),
            })
            .collect();
        (states, surnames)
    }

    #[test]
    fn four_states_give_four_folds() {
        let (states, surnames) = tiny_states();
        let mut cfg = LosoConfig::new(Method::Tree, Layout::Extended);
        cfg.scale = 0.0005;
        let folds = run_loso(&states, &surnames, &cfg).unwrap();
        assert_eq!(folds.len(), 4);
        for (f, s) in folds.iter().zip(&states) {
            assert_eq!(f.manifest.training_states.len(), 3);
            assert!(!f.manifest.training_states.contains(&s.code));
            let mut sorted = f.manifest.training_states.clone();
            sorted.sort();
            assert_eq!(f.manifest.name_table_states, sorted);
            assert_eq!(f.predictions.len(), s.dataset.len());
            assert_eq!(f.manifest.training_records, 500);
            assert!(f.manifest.held_out_absent_from_training);
        }
        let again = run_loso(&states, &surnames, &cfg).unwrap();
        assert_eq!(again[2].predictions, folds[2].predictions);
    }

    #[test]
    fn injected_rows_are_leakage() {
        let (mut states, surnames) = tiny_states();
        let cfg = LosoConfig {
            scale: 0.0005,
            ..LosoConfig::new(Method::Mlr, Layout::Base)
        };
        let mut stolen = states[3].dataset.records[7].clone();
        states[0].dataset.records.push(stolen.clone());
        assert!(matches!(
            run_loso(&states, &surnames, &cfg),
            Err(Error::Leakage(_))
        ));
        states[0].dataset.records.pop();
        // Relabelled state, same id.
        stolen.state = states[0].code.clone();
        states[0].dataset.records.push(stolen);
        assert!(matches!(
            run_loso(&states, &surnames, &cfg),
            Err(Error::Leakage(_))
        ));
    }

    #[test]
    fn needs_two_states() {
        let (states, surnames) = tiny_states();
        let cfg = LosoConfig::new(Method::Bisg, Layout::Base);
        assert!(matches!(
            run_loso(&states[..1], &surnames, &cfg),
            Err(Error::Config(_))
        ));
        let folds = run_loso(&states[..2], &surnames, &cfg).unwrap();
        assert_eq!(folds.len(), 2);
        assert!(folds[0].model.is_none());
    }
}
