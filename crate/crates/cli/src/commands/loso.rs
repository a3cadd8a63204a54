//! `loso`: leave-one-state-out runs for every requested method and layout,
//! with one report set per held-out state.

use std::path::Path;

use bisgml_core::eval::{full_report, AggregationMode, MethodPosteriors, Metric};
use bisgml_core::ml::{run_loso, Hyperparams, LosoConfig, LosoFold, StateData};
use bisgml_core::synth::{generate, GenerativeSpec, Oracle};
use bisgml_core::tables::{build_geo_table, build_surname_table, Layout};
use bisgml_core::{Error, Method, Result};
use rayon::prelude::*;

use super::evaluate::write_report;
use super::train::tune_spec;
use super::{column_mapping, load_analysis_records, require_file, OutDir};
use crate::config::Config;
use crate::error::CliError;

struct Run {
    label: String,
    cfg: LosoConfig,
}

fn file_label(label: &str) -> String {
    label.replace('/', "_")
}

/// Family defaults with those `model.*` overrides the family understands.
fn family_params(cfg: &Config, method: Method) -> Result<Hyperparams> {
    let mut h = Hyperparams::default_for(method)?;
    for (name, v) in cfg.hyperparameter_overrides()? {
        if let Ok(next) = h.clone().with(&name, v) {
            h = next;
        }
    }
    Ok(h)
}

fn plan(cfg: &Config) -> Result<Vec<Run>> {
    let methods: Vec<Method> = cfg
        .list("run.method")
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Config("missing required key run.method".into()));
    }
    let layouts: Vec<Layout> = match cfg.list("run.layout") {
        l if l.is_empty() => vec![Layout::Base, Layout::Extended],
        l => l.iter().map(|s| s.parse()).collect::<Result<_>>()?,
    };
    let supervised: Vec<Method> = methods
        .iter()
        .copied()
        .filter(|m| m.is_supervised())
        .collect();
    for (name, _) in cfg.hyperparameter_overrides()? {
        let used = supervised.iter().any(|&m| {
            Hyperparams::default_for(m)
                .and_then(|h| h.with(&name, 1.0))
                .is_ok()
        });
        if !used {
            return Err(Error::Config(format!(
                "model.{name} does not apply to any requested family"
            )));
        }
    }
    let tuned = cfg.bool("tune.enabled")?;
    let seed: u64 = cfg.value("run.seed")?;
    let mut runs = Vec::new();
    for m in methods {
        let layouts = match m {
            Method::Bisg => vec![Layout::Base],
            Method::Extended => vec![Layout::Extended],
            m if m.is_supervised() => layouts.clone(),
            other => {
                return Err(Error::Config(format!(
                    "{other} cannot be run leave-one-state-out"
                )))
            }
        };
        for layout in layouts {
            let mut c = LosoConfig::new(m, layout);
            c.scale = cfg.value("run.scale")?;
            c.tune_rows = cfg.value("sample.tune_rows")?;
            c.train_rows = cfg.value("sample.train_rows")?;
            c.name_floor = cfg.value("tables.name_floor")?;
            c.seed = seed;
            if m.is_supervised() {
                c.params = Some(family_params(cfg, m)?);
                if tuned {
                    c.tune = Some(tune_spec(cfg, m, seed, 0, false)?);
                }
            }
            let label = if m.is_supervised() {
                format!("{m}/{}", layout.as_str())
            } else {
                m.to_string()
            };
            runs.push(Run { label, cfg: c });
        }
    }
    Ok(runs)
}

fn load_states(cfg: &Config) -> Result<Vec<StateData>> {
    let mapping = column_mapping(cfg)?;
    let files = cfg.states();
    if files.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-state-out needs at least 2 configured states, got {}",
            files.len()
        )));
    }
    let mut paths = Vec::new();
    for (code, f) in &files {
        let person = f
            .person_file
            .clone()
            .ok_or_else(|| Error::Config(format!("missing state.{code}.person_file")))?;
        let block = f
            .block_file
            .clone()
            .ok_or_else(|| Error::Config(format!("missing state.{code}.block_file")))?;
        require_file(&person, &format!("state.{code}.person_file"))?;
        require_file(&block, &format!("state.{code}.block_file"))?;
        paths.push((code.clone(), person, block));
    }
    paths
        .par_iter()
        .map(|(code, person, block)| {
            Ok(StateData {
                code: code.clone(),
                dataset: load_analysis_records(person, &mapping)?,
                geo: build_geo_table(block)?,
            })
        })
        .collect()
}

fn oracle_from(spec_path: &Path) -> Result<Oracle> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: GenerativeSpec = serde_json::from_str(&text)?;
    Ok(generate(&spec)?.oracle())
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let out = OutDir::check(cfg)?;
    let mode: AggregationMode = cfg.require("run.agg")?.parse()?;
    let runs = plan(cfg)?;
    let surname_path = cfg.require_path("data.surname_file")?;
    require_file(&surname_path, "data.surname_file")?;
    let surnames = build_surname_table(&surname_path)?;
    let states = load_states(cfg)?;
    let oracle = match cfg.path("data.synth_spec") {
        Some(p) => {
            require_file(&p, "data.synth_spec")?;
            Some(oracle_from(&p)?)
        }
        None => None,
    };

    // Everything is computed before the first file is written.
    let mut results: Vec<(String, Vec<LosoFold>)> = Vec::new();
    for r in &runs {
        eprintln!("running {}", r.label);
        results.push((r.label.clone(), run_loso(&states, &surnames, &r.cfg)?));
    }
    let extended_oracle = runs
        .iter()
        .any(|r| r.cfg.layout == Layout::Extended || r.cfg.family == Method::Extended);
    let mut reports = Vec::new();
    for (i, st) in states.iter().enumerate() {
        let mut methods: Vec<MethodPosteriors> = results
            .iter()
            .map(|(label, folds)| MethodPosteriors {
                label: label.clone(),
                layout: folds[i].manifest.layout.as_str().into(),
                posteriors: folds[i].predictions.clone(),
            })
            .collect();
        if let Some(o) = &oracle {
            let mut with = vec![false];
            if extended_oracle {
                with.push(true);
            }
            for names in with {
                let posteriors = st
                    .dataset
                    .records
                    .par_iter()
                    .map(|r| o.posterior_of(r, names))
                    .collect::<Result<Vec<_>>>()?;
                methods.push(MethodPosteriors {
                    label: if names { "oracle/extended" } else { "oracle" }.into(),
                    layout: if names { "extended" } else { "base" }.into(),
                    posteriors,
                });
            }
        }
        reports.push(full_report(&st.dataset, &methods, mode)?);
    }

    out.create(cfg)?;
    let mut all_metrics = String::new();
    let mut text = String::new();
    for (i, (st, rs)) in states.iter().zip(&reports).enumerate() {
        let prefix = format!("{}/", st.code);
        write_report(&out, &prefix, rs)?;
        for (label, folds) in &results {
            let f = &folds[i];
            let name = file_label(label);
            out.write_json(&format!("{prefix}manifest_{name}.json"), &f.manifest)?;
            if let Some(t) = &f.cv_table {
                out.write(&format!("{prefix}cv_{name}.csv"), &t.to_csv())?;
            }
            if let Some(m) = &f.model {
                m.save(&out.file(&format!("{prefix}model_{name}.json")))?;
            }
        }
        let csv = rs.to_csv();
        let body = if i == 0 {
            csv.as_str()
        } else {
            csv.split_once('\n').map_or("", |(_, b)| b)
        };
        all_metrics.push_str(body);
        for m in Metric::ALL {
            text.push_str(&rs.comparison_text(m));
            text.push('\n');
        }
    }
    out.write("metrics.csv", &all_metrics)?;
    out.write("comparison.txt", &text)?;
    print!("{text}");
    Ok(())
}
