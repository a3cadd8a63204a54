//! `predict`: stream a person file through BISG, extended BISG or a model.
//!
//! Rows are read in chunks of `predict.chunk_rows`, scored in parallel and
//! written back in input order, so memory is bounded by the chunk size plus
//! the tables and the output is independent of the thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use bisgml_core::bisg::{posterior, BatchReport, FallbackFlags};
use bisgml_core::ingest::{ColumnMapping, PersonRecord, RowSchema};
use bisgml_core::ml::ModelFile;
use bisgml_core::tables::{write_features, Layout, TableRefs};
use bisgml_core::{Error, Method, RaceCategory, Result, NUM_RACES};
use rayon::prelude::*;
use serde::Serialize;

use super::{column_mapping, require_file, single_layout, single_method, LoadedTables, OutDir};
use crate::config::Config;
use crate::error::CliError;

pub const PREDICTIONS: &str = "predictions.csv";
pub const PRED_COLUMNS: [&str; NUM_RACES] = [
    "pred_white",
    "pred_black",
    "pred_hispanic",
    "pred_asian",
    "pred_other",
];

/// Rows per unit of parallel work inside a chunk.
const SLICE_ROWS: usize = 2048;

#[derive(Debug, Serialize)]
struct Summary {
    method: Method,
    layout: Layout,
    rows: usize,
    malformed: usize,
    fallbacks: BatchReport,
    seconds: f64,
    rows_per_second: f64,
    peak_rss_mb: Option<f64>,
    memory_bound_mb: f64,
}

enum Scorer<'a> {
    Bayes(Method, TableRefs<'a>),
    Model(&'a ModelFile, TableRefs<'a>),
}

impl Scorer<'_> {
    fn score(
        &self,
        rec: &PersonRecord,
        buf: &mut Vec<f64>,
    ) -> Result<([f64; NUM_RACES], FallbackFlags)> {
        match self {
            Scorer::Bayes(m, t) => {
                let p = posterior(rec, *m, t)?;
                Ok((p.probs, p.flags))
            }
            Scorer::Model(f, t) => {
                let layout = f.layout;
                buf.resize(layout.dim(), 0.0);
                write_features(rec, t, layout, buf)?;
                let bayes = if layout == Layout::Extended {
                    Method::Extended
                } else {
                    Method::Bisg
                };
                let flags = posterior(rec, bayes, t)?.flags;
                Ok((f.model.predict_row(buf), flags))
            }
        }
    }
}

/// Peak resident set size of this process, from `/proc/self/status`.
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn score_slice(
    rows: &[csv::StringRecord],
    schema: &RowSchema,
    scorer: &Scorer<'_>,
    delimiter: u8,
) -> Result<(Vec<u8>, BatchReport, usize)> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(Vec::with_capacity(rows.len() * 128));
    let mut report = BatchReport::default();
    let mut malformed = 0;
    let mut buf = Vec::new();
    let mut num = ryu::Buffer::new();
    let err = |e| Error::csv("<predictions>", e);
    for row in rows {
        for f in row {
            w.write_field(f).map_err(err)?;
        }
        match schema.parse(row) {
            Ok(rec) => {
                let (p, flags) = scorer.score(&rec, &mut buf)?;
                report.add(flags);
                for x in p {
                    w.write_field(num.format(x)).map_err(err)?;
                }
                w.write_field(RaceCategory::ALL[bisgml_core::race::argmax(&p)].as_str())
                    .map_err(err)?;
                w.write_field(flags.to_string()).map_err(err)?;
            }
            Err(_) => {
                malformed += 1;
                for _ in 0..=NUM_RACES {
                    w.write_field("").map_err(err)?;
                }
                w.write_field("malformed").map_err(err)?;
            }
        }
        w.write_record(std::iter::empty::<&[u8]>()).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("cannot buffer predictions: {e}")))?;
    Ok((bytes, report, malformed))
}

/// Score `input` into `output`; returns fallback counts and the number of
/// malformed rows.
pub fn stream_predictions(
    input: &Path,
    output: &Path,
    mapping: &ColumnMapping,
    scorer_tables: &LoadedTables,
    method: Method,
    model: Option<&ModelFile>,
    chunk_rows: usize,
) -> Result<(BatchReport, usize)> {
    let refs = scorer_tables.refs();
    let scorer = match model {
        Some(m) => Scorer::Model(m, refs),
        None => Scorer::Bayes(method, refs),
    };
    let file = File::open(input).map_err(|e| Error::io(input, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter)
        .flexible(true)
        .from_reader(BufReader::with_capacity(1 << 20, file));
    let headers = reader.headers().map_err(|e| Error::csv(input, e))?.clone();
    let schema = RowSchema::resolve(&headers, mapping)?;

    let out_file = File::create(output).map_err(|e| Error::io(output, e))?;
    let mut out = BufWriter::with_capacity(1 << 20, out_file);
    {
        let mut w = csv::WriterBuilder::new()
            .delimiter(mapping.delimiter)
            .from_writer(&mut out);
        let header = headers
            .iter()
            .chain(PRED_COLUMNS)
            .chain(["pred_race", "fallback_flags"]);
        w.write_record(header).map_err(|e| Error::csv(output, e))?;
        w.flush().map_err(|e| Error::io(output, e))?;
    }

    let mut report = BatchReport::default();
    let mut malformed = 0;
    let mut chunk: Vec<csv::StringRecord> = Vec::with_capacity(chunk_rows);
    loop {
        chunk.clear();
        while chunk.len() < chunk_rows {
            let mut row = csv::StringRecord::new();
            match reader.read_record(&mut row) {
                Ok(true) => chunk.push(row),
                Ok(false) => break,
                Err(e) if e.is_io_error() => return Err(Error::csv(input, e)),
                // Unparseable lines are kept as empty rows and flagged.
                Err(_) => chunk.push(csv::StringRecord::new()),
            }
        }
        if chunk.is_empty() {
            break;
        }
        let parts = chunk
            .par_chunks(SLICE_ROWS)
            .map(|rows| score_slice(rows, &schema, &scorer, mapping.delimiter))
            .collect::<Result<Vec<_>>>()?;
        for (bytes, r, m) in parts {
            out.write_all(&bytes).map_err(|e| Error::io(output, e))?;
            report.merge(&r);
            malformed += m;
        }
        if chunk.len() < chunk_rows {
            break;
        }
    }
    out.flush().map_err(|e| Error::io(output, e))?;
    Ok((report, malformed))
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let out = OutDir::check(cfg)?;
    let mapping = column_mapping(cfg)?;
    let input = cfg.require_path("data.input")?;
    require_file(&input, "data.input")?;
    let tables = LoadedTables::load(&cfg.require_path("tables.dir")?)?;
    let chunk_rows: usize = cfg.value("predict.chunk_rows")?;
    let bound_mb: f64 = cfg.value("predict.memory_bound_mb")?;
    if chunk_rows == 0 {
        return Err(Error::Config("predict.chunk_rows must be positive".into()).into());
    }

    let method = single_method(cfg)?;
    let model = match method {
        Method::Bisg | Method::Extended => None,
        m if m.is_supervised() => {
            let f = ModelFile::load(&cfg.require_path("model.file")?)?;
            if f.family != m {
                return Err(Error::Config(format!(
                    "run.method is {m} but the model file holds a {} model",
                    f.family
                ))
                .into());
            }
            Some(f)
        }
        other => return Err(Error::Config(format!("cannot predict with {other}")).into()),
    };
    let layout = match (&model, method) {
        (Some(f), _) => f.layout,
        (None, Method::Extended) => Layout::Extended,
        _ => Layout::Base,
    };
    if cfg.get("run.layout").is_some() && single_layout(cfg, layout)? != layout {
        return Err(Error::Config(format!(
            "run.layout does not match the {} layout of {method}",
            layout.as_str()
        ))
        .into());
    }
    if !tables.refs().supports(layout) {
        return Err(Error::Config(format!(
            "{} layout needs first- and middle-name tables in tables.dir",
            layout.as_str()
        ))
        .into());
    }

    out.create(cfg)?;
    let start = Instant::now();
    let (report, malformed) = stream_predictions(
        &input,
        &out.file(PREDICTIONS),
        &mapping,
        &tables,
        method,
        model.as_ref(),
        chunk_rows,
    )?;
    let seconds = start.elapsed().as_secs_f64();
    let rows = report.records + malformed;
    let peak = peak_rss_mb();
    let summary = Summary {
        method,
        layout,
        rows,
        malformed,
        fallbacks: report,
        seconds,
        rows_per_second: rows as f64 / seconds.max(1e-9),
        peak_rss_mb: peak,
        memory_bound_mb: bound_mb,
    };
    out.write_json("predict_summary.json", &summary)?;
    println!("{report}");
    if malformed > 0 {
        println!("{malformed} malformed rows left unscored");
    }
    println!(
        "{rows} rows in {seconds:.2}s ({:.0} rows/s), peak RSS {}",
        summary.rows_per_second,
        peak.map(|p| format!("{p:.1} MB"))
            .unwrap_or_else(|| "unknown".into())
    );
    if let Some(p) = peak {
        if p > bound_mb {
            return Err(CliError::MemoryBound {
                peak_mb: p,
                bound_mb,
            });
        }
    }
    Ok(())
}
