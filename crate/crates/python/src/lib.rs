//! Python bindings: tables, BISG scoring, supervised models, metrics and the
//! synthetic corpus with its exact oracle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bisgml_core::bisg::predict_batch;
use bisgml_core::eval::{auc_one_vs_rest, calibration_curve, full_report, AggregationMode, MethodPosteriors};
use bisgml_core::ingest::{
    canonicalize_name as core_canonicalize, filter_for_analysis, parse_person_file, write_person_file, ColumnMapping,
    Dataset as CoreDataset, PersonRecord,
};
use bisgml_core::ml::{self, Hyperparams, LabelledMatrix, ModelFile};
use bisgml_core::synth::{self, GenerativeSpec};
use bisgml_core::tables::{
    build_name_table, build_surname_table, load_table, make_features, read_block_counts, save_table, GeoTable,
    Layout, NameGivenRaceTable, NameSlot, SurnameTable, TableRefs,
};
use bisgml_core::{Error, Method, RaceCategory, RaceVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(bisgml, BisgmlError, PyException);
create_exception!(bisgml, ConfigError, BisgmlError);
create_exception!(bisgml, DataError, BisgmlError);
create_exception!(bisgml, LeakageError, BisgmlError);
create_exception!(bisgml, DivergenceError, BisgmlError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) => ConfigError::new_err(msg),
        Error::Data(_) | Error::UndefinedMetric(_) | Error::Csv { .. } | Error::Serde(_) => DataError::new_err(msg),
        Error::Leakage(_) => LeakageError::new_err(msg),
        Error::Divergence(_) => DivergenceError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| ConfigError::new_err(e.to_string()))
}

const SURNAME_TABLE: &str = "surnames.json";
const GEO_TABLE: &str = "geo.json";
const FIRST_TABLE: &str = "first_names.json";
const MIDDLE_TABLE: &str = "middle_names.json";

fn field(d: &Bound<'_, PyDict>, key: &str) -> PyResult<String> {
    match d.get_item(key)? {
        Some(v) if !v.is_none() => v.extract(),
        _ => Ok(String::new()),
    }
}

fn record_from_dict(d: &Bound<'_, PyDict>) -> PyResult<PersonRecord> {
    let race = field(d, "race")?;
    let label = if race.is_empty() {
        None
    } else {
        Some(parse::<RaceCategory>(&race)?)
    };
    Ok(PersonRecord {
        record_id: field(d, "record_id")?,
        surname: core_canonicalize(&field(d, "surname")?),
        first_name: core_canonicalize(&field(d, "first_name")?),
        middle_name: core_canonicalize(&field(d, "middle_name")?),
        state: field(d, "state")?,
        block_id: field(d, "block_id")?,
        label,
    })
}

fn record_to_dict<'py>(py: Python<'py>, r: &PersonRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("record_id", &r.record_id)?;
    d.set_item("surname", &r.surname)?;
    d.set_item("first_name", &r.first_name)?;
    d.set_item("middle_name", &r.middle_name)?;
    d.set_item("state", &r.state)?;
    d.set_item("block_id", &r.block_id)?;
    d.set_item("race", r.label.map(|l| l.as_str()))?;
    Ok(d)
}

/// Canonical form used to match names against reference tables.
#[pyfunction]
fn canonicalize_name(name: &str) -> String {
    core_canonicalize(name)
}

/// Person records in input order.
#[pyclass(module = "bisgml")]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Build from a list of dicts with keys record_id, surname, first_name,
    /// middle_name, state, block_id and optionally race.
    #[new]
    fn new(records: Vec<Bound<'_, PyDict>>) -> PyResult<Self> {
        let recs = records.iter().map(record_from_dict).collect::<PyResult<Vec<_>>>()?;
        Ok(Dataset {
            inner: CoreDataset::new(recs),
        })
    }

    /// Read a comma-separated person file; returns the dataset and the
    /// number of malformed rows skipped.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<(Dataset, usize)> {
        let out = parse_person_file(&path, &ColumnMapping::default()).map_err(to_py)?;
        Ok((Dataset { inner: out.dataset }, out.malformed.len()))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_person_file(&self.inner, &path, b',').map_err(to_py)
    }

    /// Records usable for analysis, and removal counts by reason.
    fn filter(&self) -> (Dataset, BTreeMap<&'static str, usize>) {
        let (kept, report) = filter_for_analysis(&self.inner);
        let counts = BTreeMap::from([
            ("unknown", report.unknown),
            ("empty_surname", report.empty_surname),
            ("bad_block", report.bad_block),
        ]);
        (Dataset { inner: kept }, counts)
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.records.iter().map(|r| record_to_dict(py, r)).collect()
    }

    fn labels(&self) -> Vec<Option<&'static str>> {
        self.inner.records.iter().map(|r| r.label.map(|l| l.as_str())).collect()
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.inner.provenance.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} records from {})", self.inner.len(), self.inner.provenance.join(","))
    }
}

/// Surname, block and optional given-name tables.
#[pyclass(module = "bisgml")]
struct Tables {
    surnames: SurnameTable,
    geo: GeoTable,
    first: Option<NameGivenRaceTable>,
    middle: Option<NameGivenRaceTable>,
}

impl Tables {
    fn refs(&self) -> TableRefs<'_> {
        TableRefs {
            surnames: &self.surnames,
            geo: &self.geo,
            first: self.first.as_ref(),
            middle: self.middle.as_ref(),
        }
    }
}

fn load_optional(dir: &Path, file: &str, kind: &str) -> PyResult<Option<NameGivenRaceTable>> {
    let p = dir.join(file);
    if p.exists() {
        load_table(&p, kind).map(Some).map_err(to_py)
    } else {
        Ok(None)
    }
}

#[pymethods]
impl Tables {
    /// Build tables from a surname list and block files. Given-name tables
    /// are built from `training` when it is supplied; records of `held_out`
    /// in it raise LeakageError.
    #[staticmethod]
    #[pyo3(signature = (surname_file, block_files, training=None, held_out=None, name_floor=1.0))]
    fn build(
        surname_file: PathBuf,
        block_files: Vec<PathBuf>,
        training: Option<Vec<Dataset>>,
        held_out: Option<String>,
        name_floor: f64,
    ) -> PyResult<Tables> {
        let surnames = build_surname_table(&surname_file).map_err(to_py)?;
        let mut blocks = Vec::new();
        for f in &block_files {
            blocks.extend(read_block_counts(f).map_err(to_py)?);
        }
        let geo = GeoTable::from_counts(blocks).map_err(to_py)?;
        let (first, middle) = match training {
            Some(t) => {
                let sets: Vec<CoreDataset> = t.into_iter().map(|d| filter_for_analysis(&d.inner).0).collect();
                let h = held_out.as_deref();
                (
                    Some(build_name_table(&sets, NameSlot::First, name_floor, h).map_err(to_py)?),
                    Some(build_name_table(&sets, NameSlot::Middle, name_floor, h).map_err(to_py)?),
                )
            }
            None => (None, None),
        };
        Ok(Tables {
            surnames,
            geo,
            first,
            middle,
        })
    }

    /// Load tables written by `bisgml build-tables`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Tables> {
        Ok(Tables {
            surnames: load_table(&dir.join(SURNAME_TABLE), "surname").map_err(to_py)?,
            geo: load_table(&dir.join(GEO_TABLE), "geo").map_err(to_py)?,
            first: load_optional(&dir, FIRST_TABLE, "first_name")?,
            middle: load_optional(&dir, MIDDLE_TABLE, "middle_name")?,
        })
    }

    /// Write the tables into `dir` under the names `load` expects.
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(|e| to_py(Error::io(&dir, e)))?;
        save_table(&self.surnames, &dir.join(SURNAME_TABLE)).map_err(to_py)?;
        save_table(&self.geo, &dir.join(GEO_TABLE)).map_err(to_py)?;
        if let (Some(f), Some(m)) = (&self.first, &self.middle) {
            save_table(f, &dir.join(FIRST_TABLE)).map_err(to_py)?;
            save_table(m, &dir.join(MIDDLE_TABLE)).map_err(to_py)?;
        }
        Ok(())
    }

    #[getter]
    fn has_name_tables(&self) -> bool {
        self.refs().supports(Layout::Extended)
    }

    /// P(race | surname) row used for `surname`, and whether it matched.
    fn surname_prior(&self, surname: &str) -> (RaceVector, bool) {
        let (v, matched) = self.surnames.lookup(&core_canonicalize(surname));
        (*v, matched)
    }

    /// P(block | race) column entries of one block, if present.
    fn block_likelihood(&self, block_id: &str) -> Option<RaceVector> {
        self.geo.get(block_id).copied()
    }

    /// Feature vector of one record in the `base` or `extended` layout.
    #[pyo3(signature = (record, layout="base"))]
    fn features(&self, record: Bound<'_, PyDict>, layout: &str) -> PyResult<Vec<f64>> {
        let layout: Layout = parse(layout)?;
        let r = record_from_dict(&record)?;
        Ok(make_features(&r, &self.refs(), layout).map_err(to_py)?.values)
    }

    /// Posterior probabilities (white, black, hispanic, asian, other) for
    /// every record with `bisg` or `extended`, plus per-record fallback flags.
    #[pyo3(signature = (data, method="bisg"))]
    fn predict(&self, py: Python<'_>, data: &Dataset, method: &str) -> PyResult<(Vec<RaceVector>, Vec<String>)> {
        let method: Method = parse(method)?;
        if !matches!(method, Method::Bisg | Method::Extended) {
            return Err(PyValueError::new_err(format!("{method} needs a trained Model")));
        }
        let refs = self.refs();
        let (posts, _) = py
            .allow_threads(|| predict_batch(&data.inner, method, &refs))
            .map_err(to_py)?;
        Ok(posts.into_iter().map(|p| (p.probs, p.flags.to_string())).unzip())
    }
}

/// A trained supervised model.
#[pyclass(module = "bisgml")]
struct Model {
    file: ModelFile,
}

#[pymethods]
impl Model {
    /// Train `method` (mlr, elnet, tree, forest, gbm) on the labelled,
    /// analysis-ready records of `data`. `params` overrides hyperparameters.
    #[staticmethod]
    #[pyo3(signature = (tables, data, method, layout="base", seed=0, params=None))]
    fn train(
        py: Python<'_>,
        tables: &Tables,
        data: &Dataset,
        method: &str,
        layout: &str,
        seed: u64,
        params: Option<BTreeMap<String, f64>>,
    ) -> PyResult<Model> {
        let method: Method = parse(method)?;
        let layout: Layout = parse(layout)?;
        let mut h = Hyperparams::default_for(method).map_err(to_py)?;
        for (k, v) in params.unwrap_or_default() {
            h = h.with(&k, v).map_err(to_py)?;
        }
        let refs = tables.refs();
        let (d, _) = filter_for_analysis(&data.inner);
        let file = py
            .allow_threads(|| {
                let m = LabelledMatrix::from_dataset(&d, &refs, layout)?;
                let model = ml::train(&h, &m, seed)?;
                Ok(ModelFile::new(model, h.clone(), seed, d.provenance.clone()))
            })
            .map_err(to_py)?;
        Ok(Model { file })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        Ok(Model {
            file: ModelFile::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.file.save(&path).map_err(to_py)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.file.family.as_str()
    }

    #[getter]
    fn layout(&self) -> &'static str {
        self.file.layout.as_str()
    }

    #[getter]
    fn hyperparameters(&self) -> BTreeMap<&'static str, f64> {
        self.file.hyperparameters.values().into_iter().collect()
    }

    #[getter]
    fn training_states(&self) -> Vec<String> {
        self.file.training_states.clone()
    }

    /// Class probabilities for every record of `data`.
    fn predict(&self, py: Python<'_>, tables: &Tables, data: &Dataset) -> PyResult<Vec<RaceVector>> {
        let refs = tables.refs();
        py.allow_threads(|| {
            data.inner
                .records
                .iter()
                .map(|r| {
                    let x = make_features(r, &refs, self.file.layout)?;
                    Ok(self.file.model.predict(&x)?.probs)
                })
                .collect::<Result<Vec<_>, Error>>()
        })
        .map_err(to_py)
    }
}

/// One-vs-rest AUC with ties counted one half.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    auc_one_vs_rest(&scores, &labels).map_err(to_py)
}

/// Decile calibration bins as (lower, upper, count, mean_predicted, observed).
#[pyfunction]
#[allow(clippy::type_complexity)]
fn calibration(scores: Vec<f64>, labels: Vec<bool>) -> Vec<(f64, f64, usize, Option<f64>, Option<f64>)> {
    calibration_curve(&scores, &labels)
        .bins
        .into_iter()
        .map(|b| (b.lower, b.upper, b.count, b.mean_predicted, b.observed))
        .collect()
}

/// AUC, tract RMSE and tract bias per method and race against the labels of
/// `data`. `methods` maps a label to one probability vector per record.
#[pyfunction]
#[pyo3(signature = (data, methods, agg="prob"))]
fn evaluate(
    data: &Dataset,
    methods: BTreeMap<String, Vec<RaceVector>>,
    agg: &str,
) -> PyResult<BTreeMap<String, BTreeMap<&'static str, (Option<f64>, f64, f64)>>> {
    let mode: AggregationMode = parse(agg)?;
    let sets: Vec<MethodPosteriors> = methods
        .into_iter()
        .map(|(label, posteriors)| MethodPosteriors {
            label,
            layout: String::new(),
            posteriors,
        })
        .collect();
    let rs = full_report(&data.inner, &sets, mode).map_err(to_py)?;
    let mut out = BTreeMap::new();
    for (report, m) in rs.rows() {
        out.entry(report.method.clone())
            .or_insert_with(BTreeMap::new)
            .insert(m.race.as_str(), (m.auc, m.rmse, m.bias));
    }
    Ok(out)
}

/// Synthetic multi-state population with an exact posterior oracle.
#[pyclass(module = "bisgml")]
struct SynthCorpus {
    corpus: synth::SynthCorpus,
    oracle: synth::Oracle,
}

#[pymethods]
impl SynthCorpus {
    /// `preset` is `default` (four states) or `micro`; `records` overrides
    /// the per-state record count.
    #[new]
    #[pyo3(signature = (seed=0, preset="default", knob=0.0, records=None, states=None))]
    fn new(
        py: Python<'_>,
        seed: u64,
        preset: &str,
        knob: f64,
        records: Option<usize>,
        states: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let mut spec = match preset {
            "default" => GenerativeSpec::default_four_state(seed),
            "micro" => GenerativeSpec::micro(seed),
            other => return Err(ConfigError::new_err(format!("unknown preset {other:?}"))),
        };
        if let Some(keep) = states {
            spec.states.retain(|s| keep.contains(&s.code));
        }
        for s in &mut spec.states {
            s.records = records.unwrap_or(s.records);
        }
        spec.knob = knob;
        let corpus = py.allow_threads(|| synth::generate(&spec)).map_err(to_py)?;
        let oracle = corpus.oracle();
        Ok(SynthCorpus { corpus, oracle })
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.corpus.states.iter().map(|s| s.code.clone()).collect()
    }

    fn dataset(&self, state: &str) -> PyResult<Dataset> {
        self.corpus
            .state(state)
            .map(|s| Dataset {
                inner: s.dataset.clone(),
            })
            .ok_or_else(|| PyValueError::new_err(format!("no state {state}")))
    }

    /// Write every corpus file into `dir`; returns the written paths.
    fn write(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        self.corpus.write(&dir).map_err(to_py)
    }

    /// Exact posterior of one cell; omitted names are marginalized.
    #[pyo3(signature = (state, surname, block_id, first_name=None, middle_name=None))]
    fn oracle_posterior(
        &self,
        state: &str,
        surname: &str,
        block_id: &str,
        first_name: Option<&str>,
        middle_name: Option<&str>,
    ) -> PyResult<RaceVector> {
        self.oracle
            .posterior(state, surname, block_id, first_name, middle_name)
            .map_err(to_py)
    }

    /// Oracle posteriors for every record of `data`.
    #[pyo3(signature = (data, with_names=false))]
    fn oracle_predict(&self, data: &Dataset, with_names: bool) -> PyResult<Vec<RaceVector>> {
        data.inner
            .records
            .iter()
            .map(|r| self.oracle.posterior_of(r, with_names))
            .collect::<Result<Vec<_>, Error>>()
            .map_err(to_py)
    }
}

#[pymodule]
fn bisgml(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("RACES", RaceCategory::ALL[..bisgml_core::NUM_RACES].iter().map(|r| r.as_str()).collect::<Vec<_>>())?;
    m.add("BisgmlError", py.get_type::<BisgmlError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("LeakageError", py.get_type::<LeakageError>())?;
    m.add("DivergenceError", py.get_type::<DivergenceError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Tables>()?;
    m.add_class::<Model>()?;
    m.add_class::<SynthCorpus>()?;
    m.add_function(wrap_pyfunction!(canonicalize_name, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(calibration, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
