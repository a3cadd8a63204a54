//! `evaluate`: AUC, calibration and tract RMSE/bias against self-reported labels.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use bisgml_core::bisg::predict_batch;
use bisgml_core::eval::{full_report, AggregationMode, MethodPosteriors, Metric, ReportSet};
use bisgml_core::ingest::{is_valid_block_id, ColumnMapping, Dataset, PersonRecord, RowSchema};
use bisgml_core::{Error, Method, RaceVector, Result, NUM_RACES};

use super::predict::PRED_COLUMNS;
use super::{column_mapping, load_analysis_records, require_file, LoadedTables, OutDir};
use crate::config::Config;
use crate::error::CliError;

/// Write the long, calibration and per-metric comparison tables of a report
/// set under `prefix`.
pub fn write_report(out: &OutDir, prefix: &str, rs: &ReportSet) -> Result<()> {
    out.write(&format!("{prefix}metrics.csv"), &rs.to_csv())?;
    out.write(&format!("{prefix}calibration.csv"), &rs.calibration_csv())?;
    let mut text = String::new();
    for m in Metric::ALL {
        out.write(
            &format!("{prefix}comparison_{}.csv", m.as_str()),
            &rs.comparison_csv(m),
        )?;
        text.push_str(&rs.comparison_text(m));
        text.push('\n');
    }
    out.write(&format!("{prefix}comparison.txt"), &text)
}

/// Records and their scored posteriors from a `predict` output file. Rows
/// that were not scored, are unlabelled or fail the analysis filter are
/// dropped.
fn read_predictions(path: &Path, mapping: &ColumnMapping) -> Result<(Dataset, Vec<RaceVector>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let schema = RowSchema::resolve(&headers, mapping)?;
    if !schema.has_labels() {
        return Err(Error::Data(format!(
            "{}: no {} column to evaluate against",
            path.display(),
            mapping.race
        )));
    }
    let mut cols = [0; NUM_RACES];
    for (c, name) in cols.iter_mut().zip(PRED_COLUMNS) {
        *c = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column {name}", path.display())))?;
    }
    let mut records: Vec<PersonRecord> = Vec::new();
    let mut probs = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let Ok(rec) = schema.parse(&row) else {
            continue;
        };
        let mut p = [0.0; NUM_RACES];
        let mut ok = true;
        for (slot, &c) in p.iter_mut().zip(&cols) {
            match row.get(c).and_then(|v| v.parse::<f64>().ok()) {
                Some(v) => *slot = v,
                None => ok = false,
            }
        }
        // Same rule as the analysis filter, plus a known label.
        let usable = rec.label_index().is_some()
            && !rec.surname.is_empty()
            && is_valid_block_id(&rec.block_id);
        if ok && usable {
            records.push(rec);
            probs.push(p);
        }
    }
    Ok((Dataset::new(records), probs))
}

fn label_of(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "predictions" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let out = OutDir::check(cfg)?;
    let mapping = column_mapping(cfg)?;
    let mode: AggregationMode = cfg.require("run.agg")?.parse()?;
    let files = cfg.list("evaluate.predictions");

    let (data, methods) = if files.is_empty() {
        let input = cfg.require_path("data.input")?;
        require_file(&input, "data.input")?;
        let tables = LoadedTables::load(&cfg.require_path("tables.dir")?)?;
        let d = load_analysis_records(&input, &mapping)?;
        let mut methods = Vec::new();
        for m in cfg.list("run.method") {
            let method: Method = m.parse()?;
            if !matches!(method, Method::Bisg | Method::Extended) {
                return Err(Error::Config(format!(
                    "evaluate scores {method} only through evaluate.predictions files"
                ))
                .into());
            }
            let (posts, _) = predict_batch(&d, method, &tables.refs())?;
            methods.push(MethodPosteriors {
                label: method.to_string(),
                layout: if method == Method::Bisg {
                    "base"
                } else {
                    "extended"
                }
                .into(),
                posteriors: posts.into_iter().map(|p| p.probs).collect(),
            });
        }
        if methods.is_empty() {
            return Err(Error::Config("set run.method or evaluate.predictions".into()).into());
        }
        (d, methods)
    } else {
        let mut data: Option<Dataset> = None;
        let mut methods = Vec::new();
        for f in &files {
            let path = Path::new(f);
            require_file(path, "evaluate.predictions entry")?;
            let (d, posteriors) = read_predictions(path, &mapping)?;
            match &data {
                None => data = Some(d),
                Some(first) => {
                    let same = first.len() == d.len()
                        && first
                            .records
                            .iter()
                            .zip(&d.records)
                            .all(|(a, b)| a.record_id == b.record_id);
                    if !same {
                        return Err(Error::Data(format!(
                            "{f}: records differ from the first predictions file"
                        ))
                        .into());
                    }
                }
            }
            methods.push(MethodPosteriors {
                label: label_of(path),
                layout: String::new(),
                posteriors,
            });
        }
        (data.expect("at least one file"), methods)
    };

    let report = full_report(&data, &methods, mode)?;
    out.create(cfg)?;
    write_report(&out, "", &report)?;
    out.write_json("report.json", &report)?;
    for m in Metric::ALL {
        print!("{}", report.comparison_text(m));
    }
    Ok(())
}
