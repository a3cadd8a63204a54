//! `synth`: write a synthetic corpus, or one corpus per knob value.

use bisgml_core::synth::{generate, GenerativeSpec};
use bisgml_core::{Error, Result};
use serde::Serialize;

use super::{sha256_file, OutDir};
use crate::config::Config;
use crate::error::CliError;

#[derive(Serialize)]
struct FileSum {
    name: String,
    sha256: String,
}

fn base_spec(cfg: &Config) -> Result<GenerativeSpec> {
    let seed: u64 = cfg.value("run.seed")?;
    let mut spec = match cfg.require("synth.preset")? {
        "default" => GenerativeSpec::default_four_state(seed),
        "micro" => GenerativeSpec::micro(seed),
        other => {
            return Err(Error::Config(format!(
                "synth.preset: unknown preset {other:?}"
            )))
        }
    };
    let keep = cfg.list("synth.states");
    if !keep.is_empty() {
        if let Some(missing) = keep.iter().find(|c| spec.state(c).is_none()) {
            return Err(Error::Config(format!(
                "synth.states: {missing} is not in the preset"
            )));
        }
        spec.states.retain(|s| keep.contains(&s.code));
    }
    let records: Option<usize> = cfg.opt_value("synth.records")?;
    let scale: f64 = cfg.value("run.scale")?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!(
            "run.scale must be positive, got {scale}"
        )));
    }
    for s in &mut spec.states {
        let n = records.unwrap_or(s.records);
        s.records = ((n as f64 * scale).round() as usize).max(1);
    }
    spec.knob = cfg.value("synth.knob")?;
    Ok(spec)
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let out = OutDir::check(cfg)?;
    let spec = base_spec(cfg)?;
    let knobs: Vec<f64> = cfg
        .list("synth.knobs")
        .iter()
        .map(|k| {
            k.parse()
                .map_err(|_| Error::Config(format!("synth.knobs: cannot parse {k:?}")))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(String, GenerativeSpec)> = if knobs.is_empty() {
        vec![(String::new(), spec)]
    } else {
        knobs
            .iter()
            .map(|&k| {
                (
                    format!("knob_{k}/"),
                    GenerativeSpec {
                        knob: k,
                        ..spec.clone()
                    },
                )
            })
            .collect()
    };
    for (_, s) in &jobs {
        s.validate()?;
    }
    out.create(cfg)?;
    for (prefix, s) in &jobs {
        let corpus = generate(s)?;
        let dir = out.file(prefix);
        let files = corpus.write(&dir)?;
        let sums = files
            .iter()
            .map(|p| {
                Ok(FileSum {
                    name: p
                        .file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.write_json(&format!("{prefix}checksums.json"), &sums)?;
        let records: usize = corpus.states.iter().map(|st| st.dataset.len()).sum();
        println!(
            "{}: {} states, {records} records, knob {}",
            dir.display(),
            corpus.states.len(),
            s.knob
        );
    }
    Ok(())
}
