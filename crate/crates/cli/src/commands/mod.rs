pub mod build_tables;
pub mod evaluate;
pub mod loso;
pub mod predict;
pub mod synth;
pub mod train;

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use bisgml_core::ingest::{filter_for_analysis, parse_person_file, ColumnMapping, Dataset};
use bisgml_core::tables::{
    load_table, GeoTable, Layout, NameGivenRaceTable, SurnameTable, TableRefs,
};
use bisgml_core::{Error, Method, Result};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const SURNAME_TABLE: &str = "surnames.json";
pub const GEO_TABLE: &str = "geo.json";
pub const FIRST_TABLE: &str = "first_names.json";
pub const MIDDLE_TABLE: &str = "middle_names.json";
pub const TABLE_MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved";

/// Run output directory. Outputs are write-once: an existing non-empty
/// directory is refused.
pub struct OutDir {
    path: PathBuf,
}

impl OutDir {
    /// Check the target without creating anything.
    pub fn check(cfg: &Config) -> Result<Self> {
        let path = cfg.require_path("run.out")?;
        if path.exists() {
            let busy = std::fs::read_dir(&path)
                .map_err(|e| Error::io(&path, e))?
                .next()
                .is_some();
            if busy {
                return Err(Error::Config(format!(
                    "output directory {} is not empty",
                    path.display()
                )));
            }
        }
        Ok(OutDir { path })
    }

    /// Create the directory and record the resolved config in it.
    pub fn create(&self, cfg: &Config) -> Result<()> {
        std::fs::create_dir_all(&self.path).map_err(|e| Error::io(&self.path, e))?;
        self.write(RESOLVED_CONFIG, &cfg.resolved())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }
}

pub fn column_mapping(cfg: &Config) -> Result<ColumnMapping> {
    let delimiter = match cfg.require("columns.delimiter")? {
        "tab" | "\\t" => b'\t',
        d if d.len() == 1 => d.as_bytes()[0],
        other => {
            return Err(Error::Config(format!(
                "columns.delimiter: unsupported {other:?}"
            )))
        }
    };
    Ok(ColumnMapping {
        record_id: cfg.require("columns.record_id")?.into(),
        surname: cfg.require("columns.surname")?.into(),
        first_name: cfg.require("columns.first_name")?.into(),
        middle_name: cfg.require("columns.middle_name")?.into(),
        state: cfg.require("columns.state")?.into(),
        block_id: cfg.require("columns.block_id")?.into(),
        race: cfg.require("columns.race")?.into(),
        delimiter,
    })
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

/// Parse a person file and apply the analysis filter, reporting what was
/// dropped on stderr.
pub fn load_analysis_records(path: &Path, mapping: &ColumnMapping) -> Result<Dataset> {
    let parsed = parse_person_file(path, mapping)?;
    if !parsed.malformed.is_empty() {
        eprintln!(
            "{}: skipped {} malformed rows",
            path.display(),
            parsed.malformed.len()
        );
    }
    let (kept, removed) = filter_for_analysis(&parsed.dataset);
    if removed.total() > 0 {
        eprintln!("{}: {removed}", path.display());
    }
    Ok(kept)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Tables written by `build-tables`.
pub struct LoadedTables {
    pub surnames: SurnameTable,
    pub geo: GeoTable,
    pub first: Option<NameGivenRaceTable>,
    pub middle: Option<NameGivenRaceTable>,
}

impl LoadedTables {
    pub fn load(dir: &Path) -> Result<Self> {
        let optional = |name: &str, kind: &str| -> Result<Option<NameGivenRaceTable>> {
            let p = dir.join(name);
            if p.exists() {
                load_table(&p, kind).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(LoadedTables {
            surnames: load_table(&dir.join(SURNAME_TABLE), "surname")?,
            geo: load_table(&dir.join(GEO_TABLE), "geo")?,
            first: optional(FIRST_TABLE, "first_name")?,
            middle: optional(MIDDLE_TABLE, "middle_name")?,
        })
    }

    pub fn refs(&self) -> TableRefs<'_> {
        TableRefs {
            surnames: &self.surnames,
            geo: &self.geo,
            first: self.first.as_ref(),
            middle: self.middle.as_ref(),
        }
    }
}

pub fn single_method(cfg: &Config) -> Result<Method> {
    let methods = cfg.list("run.method");
    match methods.as_slice() {
        [one] => one.parse(),
        [] => Err(Error::Config("missing required key run.method".into())),
        _ => Err(Error::Config(
            "this command takes a single run.method".into(),
        )),
    }
}

pub fn single_layout(cfg: &Config, default: Layout) -> Result<Layout> {
    let layouts = cfg.list("run.layout");
    match layouts.as_slice() {
        [one] => one.parse(),
        [] => Ok(default),
        _ => Err(Error::Config(
            "this command takes a single run.layout".into(),
        )),
    }
}

/// Scaled sample size from a base row count.
pub fn scaled(cfg: &Config, key: &str) -> Result<usize> {
    let base: usize = cfg.value(key)?;
    let scale: f64 = cfg.value("run.scale")?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!(
            "run.scale must be positive, got {scale}"
        )));
    }
    Ok(((base as f64 * scale).round() as usize).max(1))
}
