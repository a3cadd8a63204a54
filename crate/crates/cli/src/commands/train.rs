//! `train` and `tune`: fit or search one supervised family on labelled records.

use bisgml_core::ingest::Dataset;
use bisgml_core::ml::{log_loss, train, tune, Hyperparams, LabelledMatrix, ModelFile, TuneSpec};
use bisgml_core::rng::{derive_named, rng_from};
use bisgml_core::tables::Layout;
use bisgml_core::{Error, Method, Result};
use rand::seq::SliceRandom;
use serde::Serialize;

use super::{
    column_mapping, load_analysis_records, require_file, scaled, single_layout, single_method,
    LoadedTables, OutDir,
};
use crate::config::Config;
use crate::error::CliError;

/// Labelled records from `data.input`, or from the person files of
/// `data.states`.
fn training_records(cfg: &Config) -> Result<Dataset> {
    let mapping = column_mapping(cfg)?;
    let mut paths = Vec::new();
    if let Some(p) = cfg.path("data.input") {
        paths.push(p);
    } else {
        let states = cfg.states();
        let codes = cfg.list("data.states");
        if codes.is_empty() {
            return Err(Error::Config("set data.input or data.states".into()));
        }
        for c in codes {
            let p = states
                .get(&c)
                .and_then(|f| f.person_file.clone())
                .ok_or_else(|| Error::Config(format!("state {c} has no state.{c}.person_file")))?;
            paths.push(p);
        }
    }
    let mut records = Vec::new();
    for p in &paths {
        require_file(p, "training input")?;
        records.extend(load_analysis_records(p, &mapping)?.records);
    }
    let d = Dataset::new(records);
    d.check_unique_ids()?;
    Ok(d)
}

/// Refuse training rows from a state held out by config or by the tables.
fn check_held_out(cfg: &Config, d: &Dataset, tables: &LoadedTables) -> Result<()> {
    let mut held: Vec<&str> = cfg.get("data.held_out").into_iter().collect();
    held.extend(
        tables
            .first
            .iter()
            .chain(&tables.middle)
            .filter_map(|t| t.held_out()),
    );
    for h in held {
        if let Some(r) = d.records.iter().find(|r| r.state == h) {
            return Err(Error::Leakage(format!(
                "training record {} belongs to held-out state {h}",
                r.record_id
            )));
        }
    }
    Ok(())
}

/// A seeded sample of `n` rows, kept in input order.
fn sample(d: &Dataset, n: usize, seed: u64, stream: &str) -> Dataset {
    if n >= d.len() {
        return d.clone();
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut rng_from(derive_named(seed, stream)));
    idx.truncate(n);
    idx.sort_unstable();
    Dataset::new(idx.into_iter().map(|i| d.records[i].clone()).collect())
}

struct Prepared {
    method: Method,
    layout: Layout,
    seed: u64,
    data: Dataset,
    tables: LoadedTables,
}

fn prepare(cfg: &Config) -> Result<Prepared> {
    let method = single_method(cfg)?;
    if !method.is_supervised() {
        return Err(Error::Config(format!("{method} is not a trainable family")));
    }
    let layout = single_layout(cfg, Layout::Base)?;
    let tables = LoadedTables::load(&cfg.require_path("tables.dir")?)?;
    if !tables.refs().supports(layout) {
        return Err(Error::Config(
            "extended layout needs first- and middle-name tables".into(),
        ));
    }
    let data = training_records(cfg)?;
    check_held_out(cfg, &data, &tables)?;
    Ok(Prepared {
        method,
        layout,
        seed: cfg.value("run.seed")?,
        data,
        tables,
    })
}

pub fn hyperparameters(cfg: &Config, method: Method) -> Result<Hyperparams> {
    let mut h = Hyperparams::default_for(method)?;
    for (name, v) in cfg.hyperparameter_overrides()? {
        h = h.with(&name, v)?;
    }
    Ok(h)
}

#[derive(Serialize)]
struct TrainSummary {
    family: Method,
    layout: Layout,
    rows: usize,
    class_counts: [usize; bisgml_core::NUM_RACES],
    training_log_loss: f64,
    hyperparameters: Hyperparams,
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let out = OutDir::check(cfg)?;
    let p = prepare(cfg)?;
    let h = hyperparameters(cfg, p.method)?;
    let d = sample(
        &p.data,
        scaled(cfg, "sample.train_rows")?,
        p.seed,
        "train/sample",
    );
    let m = LabelledMatrix::from_dataset(&d, &p.tables.refs(), p.layout)?;
    let model = train(&h, &m, derive_named(p.seed, "train/model"))?;
    let loss = log_loss(&model.predict_matrix(&m)?, m.labels());

    out.create(cfg)?;
    let file = ModelFile::new(model, h.clone(), p.seed, d.provenance.clone());
    file.save(&out.file("model.json"))?;
    out.write_json(
        "train_summary.json",
        &TrainSummary {
            family: p.method,
            layout: p.layout,
            rows: m.len(),
            class_counts: m.class_counts(),
            training_log_loss: loss,
            hyperparameters: h,
        },
    )?;
    println!(
        "trained {} ({}) on {} rows from {}: training log-loss {loss:.5}",
        p.method,
        p.layout.as_str(),
        m.len(),
        d.provenance.join(",")
    );
    Ok(())
}

/// Search box from `tune.*`. Configured ranges replace the family's default
/// box; with `strict` off, ranges the family does not use are skipped.
pub fn tune_spec(
    cfg: &Config,
    method: Method,
    seed: u64,
    rows: usize,
    strict: bool,
) -> Result<TuneSpec> {
    let mut spec = TuneSpec::default_for(method);
    let mut ranges = cfg.tune_ranges()?;
    let defaults = Hyperparams::default_for(method)?;
    if strict {
        for r in &ranges {
            defaults.clone().with(&r.name, r.lo)?;
        }
    } else {
        ranges.retain(|r| defaults.clone().with(&r.name, r.lo).is_ok());
    }
    if !ranges.is_empty() {
        spec.ranges = ranges;
    }
    spec.samples = cfg.value("tune.samples")?;
    spec.folds = cfg.value("tune.folds")?;
    spec.sample_size = rows;
    spec.seed = seed;
    spec.validate(method)?;
    Ok(spec)
}

pub fn run_tune(cfg: &Config) -> Result<(), CliError> {
    let out = OutDir::check(cfg)?;
    let p = prepare(cfg)?;
    let d = sample(
        &p.data,
        scaled(cfg, "sample.tune_rows")?,
        p.seed,
        "tune/sample",
    );
    let spec = tune_spec(cfg, p.method, derive_named(p.seed, "tune"), d.len(), true)?;
    let m = LabelledMatrix::from_dataset(&d, &p.tables.refs(), p.layout)?;
    let table = tune(&spec, p.method, &m)?;

    out.create(cfg)?;
    out.write("cv_table.csv", &table.to_csv())?;
    out.write_json("best_params.json", table.best_params())?;
    let best = &table.rows[table.best];
    println!(
        "evaluated {} points x {} folds on {} rows; best point {} mean log-loss {:.5}",
        table.rows.len(),
        spec.folds,
        m.len(),
        best.point,
        best.mean_loss
    );
    Ok(())
}
