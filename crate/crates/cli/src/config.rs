//! Flat `section.key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; relative paths are taken relative to the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bisgml_core::ml::{ParamRange, ParamScale};
use bisgml_core::{Error, Result};

/// Keys with a default value, written into every resolved config.
const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.scale", "1"),
    ("run.threads", "0"),
    ("run.agg", "prob"),
    ("columns.record_id", "record_id"),
    ("columns.surname", "surname"),
    ("columns.first_name", "first_name"),
    ("columns.middle_name", "middle_name"),
    ("columns.state", "state"),
    ("columns.block_id", "block_id"),
    ("columns.race", "race"),
    ("columns.delimiter", ","),
    ("tables.name_floor", "1"),
    ("tune.enabled", "false"),
    ("tune.samples", "20"),
    ("tune.folds", "5"),
    ("sample.tune_rows", "100000"),
    ("sample.train_rows", "1000000"),
    ("predict.chunk_rows", "65536"),
    ("predict.memory_bound_mb", "1024"),
    ("synth.preset", "default"),
    ("synth.knob", "0"),
];

/// Keys without a default.
const OPTIONAL: &[&str] = &[
    "run.out",
    "run.method",
    "run.layout",
    "data.surname_file",
    "data.input",
    "data.states",
    "data.held_out",
    "data.synth_spec",
    "tables.dir",
    "model.file",
    "synth.knobs",
    "synth.states",
    "synth.records",
    "evaluate.predictions",
];

/// Keys holding file or directory paths.
const PATH_KEYS: &[&str] = &[
    "run.out",
    "data.surname_file",
    "data.input",
    "data.synth_spec",
    "tables.dir",
    "model.file",
];

pub const HYPERPARAMETERS: &[&str] = &[
    "lambda",
    "delta",
    "max_depth",
    "min_leaf",
    "n_trees",
    "feature_subsample",
    "row_subsample",
    "iterations",
    "learning_rate",
    "gamma",
    "leaf_penalty",
];

const INTEGER_HYPERPARAMETERS: &[&str] = &["max_depth", "min_leaf", "n_trees", "iterations"];

fn is_state_code(s: &str) -> bool {
    s.len() == 2 && s.bytes().all(|b| b.is_ascii_uppercase())
}

fn known_key(key: &str) -> bool {
    if DEFAULTS.iter().any(|(k, _)| *k == key) || OPTIONAL.contains(&key) {
        return true;
    }
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        ["state", code, "person_file" | "block_file"] => is_state_code(code),
        ["model", name] | ["tune", "range", name] => HYPERPARAMETERS.contains(name),
        _ => false,
    }
}

/// Comma-separated lists of paths.
const PATH_LIST_KEYS: &[&str] = &["evaluate.predictions"];

fn is_path_key(key: &str) -> bool {
    PATH_KEYS.contains(&key) || (key.starts_with("state.") && key.ends_with("_file"))
}

/// Files configured for one state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateFiles {
    pub person_file: Option<PathBuf>,
    pub block_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

impl Config {
    /// Parse config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Config {
            values: BTreeMap::new(),
            base: base.to_path_buf(),
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if cfg.values.contains_key(key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    i + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::parse(&text, &base)
    }

    /// Set a key, replacing any previous value. Paths are made absolute.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        let absolute = |v: &str| {
            let p = Path::new(v);
            let p = if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.base.join(p)
            };
            p.to_string_lossy().into_owned()
        };
        let value = if is_path_key(key) && !value.is_empty() {
            absolute(value)
        } else if PATH_LIST_KEYS.contains(&key) {
            value
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(absolute)
                .collect::<Vec<_>>()
                .join(",")
        } else {
            value.to_string()
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Set a key from the command line; relative paths resolve against the
    /// working directory.
    pub fn set_from_cli(&mut self, key: &str, value: &str) -> Result<()> {
        let base = std::mem::replace(&mut self.base, PathBuf::new());
        let out = self.set(key, value);
        self.base = base;
        out
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(known_key(key), "{key}");
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| DEFAULTS.iter().find(|(k, _)| *k == key).map(|(_, v)| *v))
            .filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    /// Parse a typed value; keys with defaults always resolve.
    pub fn value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    pub fn opt_value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            Some(_) => self.value(key).map(Some),
            None => Ok(None),
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(Error::Config(format!(
                "{key}: expected true or false, got {other:?}"
            ))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    /// Comma-separated list; empty when the key is unset.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Per-state files, keyed by state code.
    pub fn states(&self) -> BTreeMap<String, StateFiles> {
        let mut out: BTreeMap<String, StateFiles> = BTreeMap::new();
        for (k, v) in &self.values {
            let parts: Vec<&str> = k.split('.').collect();
            if let ["state", code, field] = parts.as_slice() {
                let e = out.entry(code.to_string()).or_default();
                let p = Some(PathBuf::from(v));
                if *field == "person_file" {
                    e.person_file = p;
                } else {
                    e.block_file = p;
                }
            }
        }
        out
    }

    /// `model.<name>` overrides, in key order.
    pub fn hyperparameter_overrides(&self) -> Result<Vec<(String, f64)>> {
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|name| (name, v)))
            .filter(|(name, _)| HYPERPARAMETERS.contains(name))
            .map(|(name, v)| {
                v.parse::<f64>()
                    .map(|x| (name.to_string(), x))
                    .map_err(|_| Error::Config(format!("model.{name}: cannot parse {v:?}")))
            })
            .collect()
    }

    /// `tune.range.<name> = lo hi [log]` entries, in key order.
    pub fn tune_ranges(&self) -> Result<Vec<ParamRange>> {
        let mut out = Vec::new();
        for (k, v) in &self.values {
            let Some(name) = k.strip_prefix("tune.range.") else {
                continue;
            };
            let bad = || Error::Config(format!("{k}: expected `lo hi [log|linear]`, got {v:?}"));
            let fields: Vec<&str> = v.split_whitespace().collect();
            let (lo, hi, scale) = match fields.as_slice() {
                [lo, hi] => (lo, hi, ParamScale::Linear),
                [lo, hi, "linear"] => (lo, hi, ParamScale::Linear),
                [lo, hi, "log"] => (lo, hi, ParamScale::Log),
                _ => return Err(bad()),
            };
            let lo: f64 = lo.parse().map_err(|_| bad())?;
            let hi: f64 = hi.parse().map_err(|_| bad())?;
            out.push(ParamRange::new(
                name,
                lo,
                hi,
                scale,
                INTEGER_HYPERPARAMETERS.contains(&name),
            ));
        }
        Ok(out)
    }

    /// All explicit keys plus defaults, one `key = value` per line, sorted.
    pub fn resolved(&self) -> String {
        let mut all: BTreeMap<&str, &str> = DEFAULTS.iter().copied().collect();
        for (k, v) in &self.values {
            all.insert(k, v);
        }
        let mut out = String::new();
        for (k, v) in all {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_defaults() {
        let cfg = Config::parse(
            "# run\nrun.seed = 7\n\nstate.FL.person_file = fl.csv\nmodel.lambda = 0.01\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.value::<u64>("run.seed").unwrap(), 7);
        assert_eq!(cfg.value::<f64>("run.scale").unwrap(), 1.0);
        assert_eq!(
            cfg.states()["FL"].person_file.as_deref(),
            Some(Path::new("/base/fl.csv"))
        );
        assert_eq!(
            cfg.hyperparameter_overrides().unwrap(),
            vec![("lambda".to_string(), 0.01)]
        );
        assert!(cfg.get("run.out").is_none());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        for text in [
            "run.sed = 1",
            "seed = 1",
            "state.fl.person_file = x",
            "state.FL.census = x",
            "model.depth = 3",
            "run.seed = 1\nrun.seed = 2",
            "run.seed",
        ] {
            let err = Config::parse(text, Path::new(".")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn tune_ranges_parse_scale_and_integrality() {
        let cfg = Config::parse(
            "tune.range.lambda = 1e-6 10 log\ntune.range.max_depth = 2 8",
            Path::new("."),
        )
        .unwrap();
        let r = cfg.tune_ranges().unwrap();
        assert_eq!(r[0].name, "lambda");
        assert_eq!(r[0].scale, ParamScale::Log);
        assert!(!r[0].integer);
        assert_eq!(r[1].name, "max_depth");
        assert!(r[1].integer);
        let bad = Config::parse("tune.range.lambda = 1", Path::new(".")).unwrap();
        assert!(bad.tune_ranges().is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let cfg = Config::parse("run.method = bisg\nrun.out = /tmp/x", Path::new(".")).unwrap();
        let again = Config::parse(&cfg.resolved(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again.resolved(), cfg.resolved());
        assert_eq!(again.get("run.method"), Some("bisg"));
        assert_eq!(again.get("tune.folds"), Some("5"));
    }
}
