//! `build-tables`: surname, block and given-name tables plus a manifest.

use std::path::PathBuf;

use bisgml_core::tables::{
    build_name_table, build_surname_table, read_block_counts, save_table, GeoTable, NameSlot,
};
use bisgml_core::{Error, Result};
use serde::Serialize;

use super::{
    column_mapping, load_analysis_records, require_file, sha256_file, OutDir, FIRST_TABLE,
    GEO_TABLE, MIDDLE_TABLE, SURNAME_TABLE, TABLE_MANIFEST,
};
use crate::config::Config;
use crate::error::CliError;

#[derive(Debug, Serialize)]
struct InputFile {
    role: String,
    state: Option<String>,
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct OutputFile {
    name: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    format: &'static str,
    inputs: Vec<InputFile>,
    block_states: Vec<String>,
    training_states: Vec<String>,
    held_out: Option<String>,
    name_floor: f64,
    tables: Vec<OutputFile>,
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let out = OutDir::check(cfg)?;
    let mapping = column_mapping(cfg)?;
    let floor: f64 = cfg.value("tables.name_floor")?;
    let held_out = cfg.get("data.held_out").map(String::from);
    let states = cfg.states();

    let mut training: Vec<String> = if cfg.get("data.states").is_some() {
        cfg.list("data.states")
    } else {
        states
            .iter()
            .filter(|(_, f)| f.person_file.is_some())
            .map(|(c, _)| c.clone())
            .filter(|c| Some(c) != held_out.as_ref())
            .collect()
    };
    training.sort();
    training.dedup();
    if let Some(h) = &held_out {
        if training.contains(h) {
            return Err(
                Error::Leakage(format!("held-out state {h} is listed in data.states")).into(),
            );
        }
    }

    // Every input is checked and parsed before anything is written.
    let surname_path = cfg.require_path("data.surname_file")?;
    require_file(&surname_path, "data.surname_file")?;
    let mut inputs = vec![(String::from("surnames"), None, surname_path.clone())];
    let mut block_states = Vec::new();
    for (code, files) in &states {
        if let Some(p) = &files.block_file {
            require_file(p, &format!("state.{code}.block_file"))?;
            inputs.push(("blocks".into(), Some(code.clone()), p.clone()));
            block_states.push(code.clone());
        }
    }
    if block_states.is_empty() {
        return Err(Error::Config("no state.<ST>.block_file configured".into()).into());
    }
    let mut person_paths = Vec::new();
    for code in &training {
        let p = states
            .get(code)
            .and_then(|f| f.person_file.clone())
            .ok_or_else(|| {
                Error::Config(format!(
                    "training state {code} has no state.{code}.person_file"
                ))
            })?;
        require_file(&p, &format!("state.{code}.person_file"))?;
        inputs.push(("persons".into(), Some(code.clone()), p.clone()));
        person_paths.push(p);
    }

    let surnames = build_surname_table(&surname_path)?;
    let mut counts = Vec::new();
    for (_, _, p) in inputs.iter().filter(|(role, _, _)| role == "blocks") {
        counts.extend(read_block_counts(p)?);
    }
    let geo = GeoTable::from_counts(counts)?;
    for w in geo.warnings() {
        eprintln!("warning: {w}");
    }
    let names = if person_paths.is_empty() {
        None
    } else {
        let sets = person_paths
            .iter()
            .map(|p| load_analysis_records(p, &mapping))
            .collect::<Result<Vec<_>>>()?;
        let held = held_out.as_deref();
        Some((
            build_name_table(&sets, NameSlot::First, floor, held)?,
            build_name_table(&sets, NameSlot::Middle, floor, held)?,
        ))
    };

    out.create(cfg)?;
    save_table(&surnames, &out.file(SURNAME_TABLE))?;
    save_table(&geo, &out.file(GEO_TABLE))?;
    let mut written = vec![SURNAME_TABLE, GEO_TABLE];
    if let Some((first, middle)) = &names {
        save_table(first, &out.file(FIRST_TABLE))?;
        save_table(middle, &out.file(MIDDLE_TABLE))?;
        written.extend([FIRST_TABLE, MIDDLE_TABLE]);
    }

    let manifest = Manifest {
        format: "bisgml-tables",
        inputs: inputs
            .into_iter()
            .map(|(role, state, path)| {
                Ok(InputFile {
                    sha256: sha256_file(&path)?,
                    role,
                    state,
                    path,
                })
            })
            .collect::<Result<_>>()?,
        block_states,
        training_states: names
            .as_ref()
            .map(|(f, _)| f.training_states().to_vec())
            .unwrap_or_default(),
        held_out,
        name_floor: floor,
        tables: written
            .iter()
            .map(|name| {
                Ok(OutputFile {
                    name: name.to_string(),
                    sha256: sha256_file(&out.file(name))?,
                })
            })
            .collect::<Result<_>>()?,
    };
    out.write_json(TABLE_MANIFEST, &manifest)?;
    println!(
        "built {} surnames, {} blocks{}",
        surnames.len(),
        geo.len(),
        match &names {
            Some((f, m)) => format!(
                ", {} first and {} middle names from {}",
                f.len(),
                m.len(),
                training.join(",")
            ),
            None => String::new(),
        }
    );
    Ok(())
}
