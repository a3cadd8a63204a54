//! Probability lookup tables and feature assembly.
//!
//! Four tables feed every method in the crate:
//!
//! * [`SurnameTable`]: P(race | surname), from a Census-style surname list.
//! * [`GeoTable`]: P(block | race), from per-block race counts.
//! * [`NameGivenRaceTable`] (first and middle slot): P(name | race), counted
//!   from labelled records of the training states.
//!
//! [`make_features`] concatenates rows of these tables into the fixed
//! [`FeatureVector`] layout consumed by the supervised models.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{canonicalize_name, is_valid_block_id, Dataset, PersonRecord, TRACT_ID_LEN};
use crate::race::{RaceCategory, RaceVector, NUM_RACES};

/// Suppression marker used in Census surname lists.
pub const SUPPRESSED: &str = "(S)";

/// Canonical key of the Census "ALL OTHER NAMES" row.
const RESIDUAL_KEY: &str = "ALLOTHERNAMES";

const ZERO: RaceVector = [0.0; NUM_RACES];

/// Pick the most frequent of the supported delimiters in the header line.
pub(crate) fn sniff_delimiter(path: &Path) -> Result<u8> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = String::new();
    BufReader::new(file)
        .read_line(&mut header)
        .map_err(|e| Error::io(path, e))?;
    Ok([b',', b'\t', b'|', b';']
        .into_iter()
        .max_by_key(|d| header.bytes().filter(|b| b == d).count())
        .unwrap_or(b','))
}

fn open_reference(path: &Path) -> Result<(csv::Reader<BufReader<File>>, Vec<String>)> {
    let delimiter = sniff_delimiter(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    Ok((reader, headers))
}

fn column(headers: &[String], names: &[&str]) -> Option<usize> {
    names
        .iter()
        .find_map(|n| headers.iter().position(|h| h == n))
}

fn require_column(headers: &[String], names: &[&str], path: &Path) -> Result<usize> {
    column(headers, names)
        .ok_or_else(|| Error::Config(format!("{}: missing column {:?}", path.display(), names[0])))
}

fn line_of(row: &csv::StringRecord) -> u64 {
    row.position().map(|p| p.line()).unwrap_or(0)
}

/// Parse a non-negative count cell. Returns `None` for a suppressed or blank cell.
fn parse_count(cell: &str, line: u64, path: &Path) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell == SUPPRESSED {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| {
        Error::Data(format!(
            "{}:{line}: invalid number {cell:?}",
            path.display()
        ))
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Data(format!(
            "{}:{line}: negative or non-finite count {cell:?}",
            path.display()
        )));
    }
    Ok(Some(v))
}

fn normalize(v: RaceVector) -> Option<RaceVector> {
    let total: f64 = v.iter().sum();
    (total > 0.0).then(|| v.map(|x| x / total))
}

/// Read the five per-race count columns of a block or name count file.
fn race_count_columns(headers: &[String], path: &Path) -> Result<[usize; NUM_RACES]> {
    let mut cols = [0; NUM_RACES];
    for (slot, race) in cols.iter_mut().zip(RaceCategory::ALL) {
        *slot = require_column(headers, &[race.as_str()], path)?;
    }
    Ok(cols)
}

// ---------------------------------------------------------------------------
// Surname table
// ---------------------------------------------------------------------------

/// P(race | surname) with a residual row for unmatched surnames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurnameTable {
    rows: BTreeMap<String, RaceVector>,
    residual: RaceVector,
}

impl SurnameTable {
    /// Build from already-normalized rows. Each row is renormalized; a
    /// missing residual becomes the unweighted mean of the rows.
    pub fn from_rows(
        rows: BTreeMap<String, RaceVector>,
        residual: Option<RaceVector>,
    ) -> Result<Self> {
        let mut normalized = BTreeMap::new();
        for (name, v) in rows {
            let v = normalize(v)
                .ok_or_else(|| Error::Data(format!("surname {name} has no probability mass")))?;
            normalized.insert(name, v);
        }
        let residual = match residual {
            Some(r) => normalize(r)
                .ok_or_else(|| Error::Data("residual row has no probability mass".into()))?,
            None => {
                if normalized.is_empty() {
                    return Err(Error::Data("surname table has no rows".into()));
                }
                let mut mean = ZERO;
                for v in normalized.values() {
                    for (m, x) in mean.iter_mut().zip(v) {
                        *m += x;
                    }
                }
                normalize(mean).expect("mean of distributions has unit mass")
            }
        };
        Ok(SurnameTable {
            rows: normalized,
            residual,
        })
    }

    /// P(race | surname) for a canonical surname.
    pub fn get(&self, surname: &str) -> Option<&RaceVector> {
        self.rows.get(surname)
    }

    /// Row for `surname`, or the residual row; the flag is true on a match.
    pub fn lookup(&self, surname: &str) -> (&RaceVector, bool) {
        match self.rows.get(surname) {
            Some(v) => (v, true),
            None => (&self.residual, false),
        }
    }

    pub fn residual(&self) -> &RaceVector {
        &self.residual
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RaceVector)> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Layout of a surname list: which columns feed which race, and the row total.
enum SurnameColumns {
    /// Census percentage columns; every row totals 100.
    Percent { races: Vec<(usize, usize)> },
    /// Per-race counts, optionally with a `count` total used to resolve suppression.
    Counts {
        races: Vec<(usize, usize)>,
        total: Option<usize>,
    },
}

fn surname_columns(headers: &[String], path: &Path) -> Result<SurnameColumns> {
    if column(headers, &["pctwhite"]).is_some() {
        let mut races = vec![
            (require_column(headers, &["pctwhite"], path)?, 0),
            (require_column(headers, &["pctblack"], path)?, 1),
            (require_column(headers, &["pcthispanic"], path)?, 2),
            (require_column(headers, &["pctapi", "pctasian"], path)?, 3),
        ];
        let others: Vec<_> = ["pctaian", "pct2prace", "pctother"]
            .iter()
            .filter_map(|c| column(headers, &[c]))
            .map(|c| (c, 4))
            .collect();
        if others.is_empty() {
            return Err(Error::Config(format!(
                "{}: percentage surname list needs pctother, pctaian or pct2prace",
                path.display()
            )));
        }
        races.extend(others);
        Ok(SurnameColumns::Percent { races })
    } else {
        let mut races = Vec::with_capacity(NUM_RACES);
        for race in RaceCategory::ALL {
            races.push((
                require_column(headers, &[race.as_str()], path)?,
                race.index().unwrap(),
            ));
        }
        Ok(SurnameColumns::Counts {
            races,
            total: column(headers, &["count", "total"]),
        })
    }
}

/// Build P(race | surname) from a Census-style surname list.
///
/// Two layouts are accepted: the Census percentage layout (`pctwhite`,
/// `pctblack`, `pcthispanic`, `pctapi`, plus any of `pctaian`, `pct2prace`,
/// `pctother` folded into Other) or per-race count columns named after the
/// categories with an optional `count` total. Suppressed cells (`(S)` or
/// blank) share the row's unaccounted mass equally. The row named
/// `ALL OTHER NAMES`, when present, becomes the residual.
pub fn build_surname_table(path: &Path) -> Result<SurnameTable> {
    let (mut reader, headers) = open_reference(path)?;
    let name_col = require_column(&headers, &["name", "surname"], path)?;
    let layout = surname_columns(&headers, path)?;

    let mut rows = BTreeMap::new();
    let mut residual = None;
    let mut row = csv::StringRecord::new();
    while reader
        .read_record(&mut row)
        .map_err(|e| Error::csv(path, e))?
    {
        let line = line_of(&row);
        let name = canonicalize_name(row.get(name_col).unwrap_or(""));
        if name.is_empty() {
            return Err(Error::Data(format!(
                "{}:{line}: empty surname",
                path.display()
            )));
        }
        let (races, total) = match &layout {
            SurnameColumns::Percent { races } => (races, Some(100.0)),
            SurnameColumns::Counts { races, total } => {
                let t = match total {
                    Some(c) => parse_count(row.get(*c).unwrap_or(""), line, path)?,
                    None => None,
                };
                (races, t)
            }
        };
        let mut cells = Vec::with_capacity(races.len());
        for &(col, race) in races {
            cells.push((race, parse_count(row.get(col).unwrap_or(""), line, path)?));
        }
        let known: f64 = cells.iter().filter_map(|(_, v)| *v).sum();
        let suppressed = cells.iter().filter(|(_, v)| v.is_none()).count();
        let fill = if suppressed == 0 {
            0.0
        } else {
            let total = total.ok_or_else(|| {
                Error::Data(format!(
                    "{}:{line}: suppressed cells need a row total to redistribute",
                    path.display()
                ))
            })?;
            (total - known).max(0.0) / suppressed as f64
        };
        let mut v = ZERO;
        for (race, value) in cells {
            v[race] += value.unwrap_or(fill);
        }
        let v = normalize(v).ok_or_else(|| {
            Error::Data(format!(
                "{}:{line}: surname {name} has zero mass",
                path.display()
            ))
        })?;
        if name == RESIDUAL_KEY {
            residual = Some(v);
        } else if rows.insert(name.clone(), v).is_some() {
            return Err(Error::Data(format!(
                "{}:{line}: duplicate surname {name}",
                path.display()
            )));
        }
    }
    SurnameTable::from_rows(rows, residual)
}

// ---------------------------------------------------------------------------
// Geography table
// ---------------------------------------------------------------------------

/// P(block | race) over a reference region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoTable {
    blocks: BTreeMap<String, RaceVector>,
    totals: RaceVector,
    #[serde(skip)]
    warnings: Vec<String>,
}

impl GeoTable {
    /// Build from per-block race counts. Denominators are the per-race totals
    /// over the supplied blocks; a race with zero total gets an all-zero
    /// column and a warning.
    pub fn from_counts<I>(counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, RaceVector)>,
    {
        let mut raw: BTreeMap<String, RaceVector> = BTreeMap::new();
        for (block, c) in counts {
            if !is_valid_block_id(&block) {
                return Err(Error::Data(format!("malformed block GEOID {block:?}")));
            }
            if c.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Data(format!(
                    "block {block}: negative or non-finite count"
                )));
            }
            if raw.insert(block.clone(), c).is_some() {
                return Err(Error::Data(format!("duplicate block {block}")));
            }
        }
        let mut totals = ZERO;
        for c in raw.values() {
            for (t, x) in totals.iter_mut().zip(c) {
                *t += x;
            }
        }
        let mut warnings = Vec::new();
        for (race, t) in RaceCategory::ALL.iter().zip(&totals) {
            if *t == 0.0 {
                warnings.push(format!(
                    "race {race} has zero total in the reference region"
                ));
            }
        }
        let blocks = raw
            .into_iter()
            .map(|(b, c)| {
                let mut p = ZERO;
                for r in 0..NUM_RACES {
                    if totals[r] > 0.0 {
                        p[r] = c[r] / totals[r];
                    }
                }
                (b, p)
            })
            .collect();
        Ok(GeoTable {
            blocks,
            totals,
            warnings,
        })
    }

    pub fn get(&self, block_id: &str) -> Option<&RaceVector> {
        self.blocks.get(block_id)
    }

    /// Per-race population totals of the reference region.
    pub fn totals(&self) -> &RaceVector {
        &self.totals
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RaceVector)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Blocks nested in a tract, in GEOID order.
    pub fn blocks_in_tract<'a>(&'a self, tract_id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.blocks
            .range::<str, _>((
                std::ops::Bound::Included(tract_id),
                std::ops::Bound::Unbounded,
            ))
            .map(|(k, _)| k.as_str())
            .take_while(move |k| k.get(..TRACT_ID_LEN) == Some(tract_id))
    }
}

/// Read per-block race counts from a block composition file with a GEOID
/// column (`block_id`, `geoid`) and one count column per race.
pub fn read_block_counts(path: &Path) -> Result<Vec<(String, RaceVector)>> {
    let (mut reader, headers) = open_reference(path)?;
    let geo_col = require_column(&headers, &["block_id", "geoid", "geoid20", "block"], path)?;
    let cols = race_count_columns(&headers, path)?;
    let mut counts = Vec::new();
    let mut row = csv::StringRecord::new();
    while reader
        .read_record(&mut row)
        .map_err(|e| Error::csv(path, e))?
    {
        let line = line_of(&row);
        let block = row.get(geo_col).unwrap_or("").trim();
        if !is_valid_block_id(block) {
            return Err(Error::Data(format!(
                "{}:{line}: malformed block GEOID {block:?}",
                path.display()
            )));
        }
        let mut c = ZERO;
        for (slot, col) in c.iter_mut().zip(cols) {
            *slot = parse_count(row.get(col).unwrap_or(""), line, path)?.unwrap_or(0.0);
        }
        counts.push((block.to_string(), c));
    }
    Ok(counts)
}

/// Build P(block | race) from one block composition file.
pub fn build_geo_table(path: &Path) -> Result<GeoTable> {
    GeoTable::from_counts(read_block_counts(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        e => e,
    })
}

// ---------------------------------------------------------------------------
// Name-given-race tables
// ---------------------------------------------------------------------------

/// Which given-name field a [`NameGivenRaceTable`] covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NameSlot {
    First,
    Middle,
}

impl NameSlot {
    pub fn of(self, record: &PersonRecord) -> &str {
        match self {
            NameSlot::First => &record.first_name,
            NameSlot::Middle => &record.middle_name,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NameSlot::First => "first",
            NameSlot::Middle => "middle",
        }
    }
}

/// Smoothed P(name | race) for first or middle names.
///
/// With per-race counts `c(name, r)`, vocabulary size `V - 1` and floor `f`:
/// `P(name | r) = (c(name, r) + f) / (sum_names c(., r) + f * V)`. The extra
/// bucket is the out-of-vocabulary entry, so each race's column sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameGivenRaceTable {
    slot: NameSlot,
    probs: BTreeMap<String, RaceVector>,
    oov: RaceVector,
    floor: f64,
    training_states: Vec<String>,
    held_out: Option<String>,
}

impl NameGivenRaceTable {
    /// Build from per-race name counts (counts may be fractional expectations).
    pub fn from_counts(
        slot: NameSlot,
        counts: BTreeMap<String, RaceVector>,
        floor: f64,
        training_states: Vec<String>,
        held_out: Option<String>,
    ) -> Result<Self> {
        if !floor.is_finite() || floor < 0.0 {
            return Err(Error::Config(format!(
                "smoothing floor must be >= 0, got {floor}"
            )));
        }
        if let Some(h) = &held_out {
            if training_states.contains(h) {
                return Err(Error::Leakage(format!(
                    "{} name table: held-out state {h} is among the training states",
                    slot.as_str()
                )));
            }
        }
        let mut totals = ZERO;
        for (name, c) in &counts {
            if c.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Data(format!(
                    "name {name}: negative or non-finite count"
                )));
            }
            for (t, x) in totals.iter_mut().zip(c) {
                *t += x;
            }
        }
        let vocab = counts.len() as f64 + 1.0;
        let denom = totals.map(|t| t + floor * vocab);
        let scale = |c: f64, r: usize| {
            if denom[r] > 0.0 {
                (c + floor) / denom[r]
            } else {
                0.0
            }
        };
        let probs = counts
            .into_iter()
            .map(|(name, c)| {
                let mut p = ZERO;
                for r in 0..NUM_RACES {
                    p[r] = scale(c[r], r);
                }
                (name, p)
            })
            .collect();
        let mut oov = ZERO;
        for (r, o) in oov.iter_mut().enumerate() {
            *o = scale(0.0, r);
        }
        Ok(NameGivenRaceTable {
            slot,
            probs,
            oov,
            floor,
            training_states,
            held_out,
        })
    }

    /// P(name | race), falling back to the out-of-vocabulary vector for
    /// unseen or empty names; the flag is true when the fallback was used.
    pub fn lookup(&self, name: &str) -> (&RaceVector, bool) {
        match self.probs.get(name) {
            Some(p) if !name.is_empty() => (p, false),
            _ => (&self.oov, true),
        }
    }

    pub fn oov(&self) -> &RaceVector {
        &self.oov
    }

    pub fn slot(&self) -> NameSlot {
        self.slot
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn training_states(&self) -> &[String] {
        &self.training_states
    }

    pub fn held_out(&self) -> Option<&str> {
        self.held_out.as_deref()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RaceVector)> {
        self.probs.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Count names by race over labelled training records and smooth.
///
/// Fails with a leakage error if any training record belongs to `held_out`.
pub fn build_name_table(
    training: &[Dataset],
    slot: NameSlot,
    floor: f64,
    held_out: Option<&str>,
) -> Result<NameGivenRaceTable> {
    let mut counts: BTreeMap<String, RaceVector> = BTreeMap::new();
    let mut states = std::collections::BTreeSet::new();
    for d in training {
        for r in &d.records {
            if Some(r.state.as_str()) == held_out {
                return Err(Error::Leakage(format!(
                    "{} name table: record {} from held-out state {} in training input",
                    slot.as_str(),
                    r.record_id,
                    r.state
                )));
            }
            let race = r.label_index().ok_or_else(|| {
                Error::Data(format!(
                    "{} name table: training record {} has no known label",
                    slot.as_str(),
                    r.record_id
                ))
            })?;
            states.insert(r.state.clone());
            let name = slot.of(r);
            if !name.is_empty() {
                counts.entry(name.to_string()).or_insert(ZERO)[race] += 1.0;
            }
        }
    }
    NameGivenRaceTable::from_counts(
        slot,
        counts,
        floor,
        states.into_iter().collect(),
        held_out.map(String::from),
    )
}

/// Load a name table from a `name,white,black,hispanic,asian,other` count file.
pub fn build_name_table_from_count_file(
    path: &Path,
    slot: NameSlot,
    floor: f64,
    training_states: Vec<String>,
    held_out: Option<String>,
) -> Result<NameGivenRaceTable> {
    let (mut reader, headers) = open_reference(path)?;
    let name_col = require_column(&headers, &["name"], path)?;
    let cols = race_count_columns(&headers, path)?;
    let mut counts = BTreeMap::new();
    let mut row = csv::StringRecord::new();
    while reader
        .read_record(&mut row)
        .map_err(|e| Error::csv(path, e))?
    {
        let line = line_of(&row);
        let name = canonicalize_name(row.get(name_col).unwrap_or(""));
        let mut c = ZERO;
        for (slot, col) in c.iter_mut().zip(cols) {
            *slot = parse_count(row.get(col).unwrap_or(""), line, path)?.unwrap_or(0.0);
        }
        if name.is_empty() {
            continue;
        }
        if counts.insert(name.clone(), c).is_some() {
            return Err(Error::Data(format!(
                "{}:{line}: duplicate name {name}",
                path.display()
            )));
        }
    }
    NameGivenRaceTable::from_counts(slot, counts, floor, training_states, held_out)
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Predictor layout: surname and block only, or with first and middle names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Base,
    Extended,
}

impl Layout {
    pub fn dim(self) -> usize {
        match self {
            Layout::Base => 2 * NUM_RACES,
            Layout::Extended => 4 * NUM_RACES,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Layout::Base => "base",
            Layout::Extended => "extended",
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "base" => Ok(Layout::Base),
            "extended" => Ok(Layout::Extended),
            other => Err(Error::Config(format!("unknown layout {other:?}"))),
        }
    }
}

/// Predictor vector: `[P(G|R=1..5), P(R=1..5|S)]`, extended with
/// `[P(first|R=1..5), P(middle|R=1..5)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

/// Borrowed view of the tables needed to featurize or score one region.
#[derive(Debug, Clone, Copy)]
pub struct TableRefs<'a> {
    pub surnames: &'a SurnameTable,
    pub geo: &'a GeoTable,
    pub first: Option<&'a NameGivenRaceTable>,
    pub middle: Option<&'a NameGivenRaceTable>,
}

impl<'a> TableRefs<'a> {
    pub fn base(surnames: &'a SurnameTable, geo: &'a GeoTable) -> Self {
        TableRefs {
            surnames,
            geo,
            first: None,
            middle: None,
        }
    }

    pub fn supports(&self, layout: Layout) -> bool {
        layout == Layout::Base || (self.first.is_some() && self.middle.is_some())
    }
}

/// Write the features of `p` into `out`, which must have `layout.dim()` slots.
pub fn write_features(
    p: &PersonRecord,
    t: &TableRefs<'_>,
    layout: Layout,
    out: &mut [f64],
) -> Result<()> {
    debug_assert_eq!(out.len(), layout.dim());
    let geo = t.geo.get(&p.block_id).unwrap_or(&ZERO);
    out[..NUM_RACES].copy_from_slice(geo);
    out[NUM_RACES..2 * NUM_RACES].copy_from_slice(t.surnames.lookup(&p.surname).0);
    if layout == Layout::Extended {
        let (Some(first), Some(middle)) = (t.first, t.middle) else {
            return Err(Error::Config(
                "extended layout requires first- and middle-name tables".into(),
            ));
        };
        out[2 * NUM_RACES..3 * NUM_RACES].copy_from_slice(first.lookup(&p.first_name).0);
        out[3 * NUM_RACES..].copy_from_slice(middle.lookup(&p.middle_name).0);
    }
    Ok(())
}

/// Assemble the predictor vector of one record.
///
/// Unknown blocks give a zero geography block, unmatched surnames the
/// residual row, and missing or unseen given names the out-of-vocabulary row.
pub fn make_features(p: &PersonRecord, t: &TableRefs<'_>, layout: Layout) -> Result<FeatureVector> {
    let mut values = vec![0.0; layout.dim()];
    write_features(p, t, layout, &mut values)?;
    Ok(FeatureVector { layout, values })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Current on-disk table format version.
pub const TABLE_FORMAT_VERSION: u32 = 1;

/// Tables that can be written with [`save_table`].
pub trait StoredTable: Serialize + DeserializeOwned {
    /// Kind tag stored in the file header.
    fn kind(&self) -> String;
    fn training_states(&self) -> Vec<String> {
        Vec::new()
    }
}

impl StoredTable for SurnameTable {
    fn kind(&self) -> String {
        "surname".into()
    }
}

impl StoredTable for GeoTable {
    fn kind(&self) -> String {
        "geo".into()
    }
}

impl StoredTable for NameGivenRaceTable {
    fn kind(&self) -> String {
        format!("{}_name", self.slot.as_str())
    }
    fn training_states(&self) -> Vec<String> {
        self.training_states.clone()
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile<T> {
    format: String,
    version: u32,
    kind: String,
    training_states: Vec<String>,
    table: T,
}

/// Write a table as versioned JSON with its kind and training-state manifest.
pub fn save_table<T: StoredTable>(table: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let envelope = TableFile {
        format: "bisgml-table".into(),
        version: TABLE_FORMAT_VERSION,
        kind: table.kind(),
        training_states: table.training_states(),
        table,
    };
    serde_json::to_writer(&mut w, &envelope)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a table written by [`save_table`], checking format version and kind.
pub fn load_table<T: StoredTable>(path: &Path, expected_kind: &str) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let envelope: TableFile<T> = serde_json::from_reader(BufReader::new(file))?;
    if envelope.format != "bisgml-table" || envelope.version != TABLE_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported table format {} v{}",
            path.display(),
            envelope.format,
            envelope.version
        )));
    }
    if envelope.kind != expected_kind {
        return Err(Error::Config(format!(
            "{}: expected a {expected_kind} table, found {}",
            path.display(),
            envelope.kind
        )));
    }
    Ok(envelope.table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::PersonRecord;
    use proptest::prelude::*;

    fn tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn surname_counts_normalize() {
        let f = tmp("name,white,black,hispanic,asian,other\nSMITH,90,5,3,1,1\n");
        let t = build_surname_table(f.path()).unwrap();
        assert_close(
            t.get("SMITH").unwrap(),
            &[0.9, 0.05, 0.03, 0.01, 0.01],
            1e-15,
        );
        // Residual is the unweighted mean when no ALL OTHER NAMES row exists.
        assert_eq!(t.lookup("ZZZ"), (t.residual(), false));
        assert_close(t.residual(), &[0.9, 0.05, 0.03, 0.01, 0.01], 1e-15);
    }

    #[test]
    fn suppressed_cells_share_remaining_mass() {
        // total 100, known 80 and 10, two suppressed, other explicitly 0:
        // remaining 10 split 5/5.
        let f = tmp("name,count,white,black,hispanic,asian,other\nLEE,100,80,10,(S),(S),0\n");
        let t = build_surname_table(f.path()).unwrap();
        assert_close(t.get("LEE").unwrap(), &[0.8, 0.1, 0.05, 0.05, 0.0], 1e-15);
    }

    #[test]
    fn census_percent_layout_with_residual() {
        let f = tmp(
            "name,rank,count,prop100k,cum_prop100k,pctwhite,pctblack,pctapi,pctaian,pct2prace,pcthispanic\n\
             GARCIA,8,1166120,395.32,5.58,5.38,0.44,1.41,0.47,(S),92.03\n\
             ALL OTHER NAMES,0,29312001,9936.97,100,66.65,8.53,7.97,0.86,2.32,13.67\n",
        );
        let t = build_surname_table(f.path()).unwrap();
        assert_eq!(t.len(), 1);
        let g = t.get("GARCIA").unwrap();
        // 2prace is suppressed: 100 - 99.73 = 0.27 goes to Other with aian.
        assert_close(g, &[0.0538, 0.0044, 0.9203, 0.0141, 0.0047 + 0.0027], 1e-12);
        assert_close(
            t.residual(),
            &normalize([66.65, 8.53, 13.67, 7.97, 0.86 + 2.32]).unwrap(),
            1e-15,
        );
    }

    #[test]
    fn surname_errors() {
        let neg = tmp("name,white,black,hispanic,asian,other\nA,1,-1,0,0,0\n");
        assert!(matches!(
            build_surname_table(neg.path()),
            Err(Error::Data(_))
        ));
        let dup = tmp("name,white,black,hispanic,asian,other\nA,1,0,0,0,0\na,0,1,0,0,0\n");
        let err = build_surname_table(dup.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn geo_table_from_file() {
        let f = tmp("block_id,white,black,hispanic,asian,other\n\
             370010201001000,30,0,1,0,0\n\
             370010201001001,70,4,0,0,0\n\
             370010201002000,0,0,0,0,0\n");
        let g = build_geo_table(f.path()).unwrap();
        assert_close(&g.get("370010201001000").unwrap()[..1], &[0.3], 1e-15);
        assert_close(&g.get("370010201001001").unwrap()[..1], &[0.7], 1e-15);
        assert_eq!(g.get("370010201002000").unwrap(), &[0.0; 5]);
        // Asian and Other have no population: zero columns plus warnings.
        assert_eq!(g.warnings().len(), 2);
        let in_tract: Vec<_> = g.blocks_in_tract("37001020100").collect();
        assert_eq!(in_tract.len(), 3);
    }

    #[test]
    fn geo_columns_sum_to_one_against_brute_force() {
        let counts = [
            ("060372073011000", [12.0, 3.0, 40.0, 7.0, 1.0]),
            ("060372073011001", [5.0, 0.0, 9.0, 30.0, 2.0]),
            ("060372073012000", [80.0, 11.0, 2.0, 3.0, 4.0]),
        ];
        let g = GeoTable::from_counts(counts.iter().map(|(b, c)| (b.to_string(), *c))).unwrap();
        for r in 0..NUM_RACES {
            // Brute-force oracle: hand-summed race totals.
            let total: f64 = counts.iter().map(|(_, c)| c[r]).sum();
            let col: f64 = g.iter().map(|(_, p)| p[r]).sum();
            assert!((col - 1.0).abs() <= 1e-12);
            for (b, c) in &counts {
                assert!((g.get(b).unwrap()[r] - c[r] / total).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn malformed_geoid_reports_line() {
        let f = tmp("geoid,white,black,hispanic,asian,other\n370010201001000,1,1,1,1,1\n3700102010010,1,1,1,1,1\n");
        let err = build_geo_table(f.path()).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains(":3:")), "{err}");
    }

    fn person(id: &str, state: &str, first: &str, race: RaceCategory) -> PersonRecord {
        PersonRecord {
            record_id: id.into(),
            surname: "X".into(),
            first_name: first.into(),
            middle_name: String::new(),
            state: state.into(),
            block_id: "370010201001000".into(),
            label: Some(race),
        }
    }

    #[test]
    fn name_table_without_smoothing() {
        let d = Dataset::new(vec![
            person("1", "NC", "A", RaceCategory::White),
            person("2", "NC", "A", RaceCategory::White),
            person("3", "NC", "B", RaceCategory::White),
            person("4", "NC", "B", RaceCategory::White),
            person("5", "NC", "", RaceCategory::White),
        ]);
        let t = build_name_table(&[d], NameSlot::First, 0.0, Some("CA")).unwrap();
        assert_eq!(t.lookup("A").0[0], 0.5);
        assert_eq!(t.lookup("B").0[0], 0.5);
        assert_eq!(t.training_states(), ["NC"]);
    }

    #[test]
    fn name_table_add_one_hand_computed() {
        // Two races, counts A:(3,1), B:(1,3); floor 1 and V = 3.
        let mut records = Vec::new();
        let mut id = 0;
        for (name, w, b) in [("A", 3, 1), ("B", 1, 3)] {
            for (race, n) in [(RaceCategory::White, w), (RaceCategory::Black, b)] {
                for _ in 0..n {
                    id += 1;
                    records.push(person(&id.to_string(), "GA", name, race));
                }
            }
        }
        let t =
            build_name_table(&[Dataset::new(records)], NameSlot::First, 1.0, Some("FL")).unwrap();
        assert!((t.lookup("A").0[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((t.lookup("B").0[1] - 4.0 / 7.0).abs() < 1e-15);
        let (oov, flag) = t.lookup("NEVERSEEN");
        assert!(flag);
        assert!((oov[0] - 1.0 / 7.0).abs() < 1e-15);
        // A race with no training records: smoothing still gives positive mass.
        assert!(t.lookup("A").0[3] > 0.0);
        for r in 0..NUM_RACES {
            let s: f64 = t.iter().map(|(_, p)| p[r]).sum::<f64>() + t.oov()[r];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn held_out_state_in_training_is_leakage() {
        let d = Dataset::new(vec![person("1", "CA", "A", RaceCategory::Asian)]);
        assert!(matches!(
            build_name_table(&[d], NameSlot::Middle, 1.0, Some("CA")),
            Err(Error::Leakage(_))
        ));
    }

    proptest! {
        #[test]
        fn name_columns_are_distributions(
            rows in proptest::collection::vec(("[A-E]{1,2}", 0usize..5), 1..60),
            floor in 0.0f64..3.0,
        ) {
            let records: Vec<_> = rows.iter().enumerate()
                .map(|(i, (n, r))| person(&i.to_string(), "NC", n, RaceCategory::ALL[*r]))
                .collect();
            let t = build_name_table(&[Dataset::new(records.clone())], NameSlot::First, floor, Some("CA")).unwrap();
            for r in 0..NUM_RACES {
                let present = records.iter().any(|p| p.label_index() == Some(r));
                let s: f64 = t.iter().map(|(_, p)| p[r]).sum::<f64>() + t.oov()[r];
                if present || floor > 0.0 {
                    prop_assert!((s - 1.0).abs() < 1e-9, "race {} sums to {}", r, s);
                }
                prop_assert!(t.iter().all(|(_, p)| p[r] >= 0.0));
            }
        }

        #[test]
        fn surname_rows_are_distributions(counts in proptest::collection::vec(proptest::array::uniform5(0.0f64..1e6), 1..20)) {
            let rows: BTreeMap<_, _> = counts.iter().enumerate()
                .filter(|(_, c)| c.iter().sum::<f64>() > 0.0)
                .map(|(i, c)| (format!("N{i}"), *c)).collect();
            prop_assume!(!rows.is_empty());
            let t = SurnameTable::from_rows(rows, None).unwrap();
            for (_, v) in t.iter().chain(std::iter::once(("", t.residual()))) {
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(v.iter().all(|x| *x >= 0.0));
            }
        }
    }

    fn fixture_tables() -> (
        SurnameTable,
        GeoTable,
        NameGivenRaceTable,
        NameGivenRaceTable,
    ) {
        let surnames = SurnameTable::from_rows(
            [("SMITH".to_string(), [0.7, 0.2, 0.05, 0.03, 0.02])]
                .into_iter()
                .collect(),
            Some([0.6, 0.1, 0.2, 0.05, 0.05]),
        )
        .unwrap();
        let geo = GeoTable::from_counts(vec![
            ("370010201001000".to_string(), [1.0, 3.0, 1.0, 1.0, 1.0]),
            ("370010201001001".to_string(), [3.0, 1.0, 1.0, 3.0, 1.0]),
        ])
        .unwrap();
        let first = NameGivenRaceTable::from_counts(
            NameSlot::First,
            [("JOHN".to_string(), [2.0, 1.0, 0.0, 0.0, 1.0])]
                .into_iter()
                .collect(),
            1.0,
            vec!["GA".into()],
            Some("NC".into()),
        )
        .unwrap();
        let middle = NameGivenRaceTable::from_counts(
            NameSlot::Middle,
            [("LEE".to_string(), [1.0, 1.0, 1.0, 1.0, 1.0])]
                .into_iter()
                .collect(),
            1.0,
            vec!["GA".into()],
            Some("NC".into()),
        )
        .unwrap();
        (surnames, geo, first, middle)
    }

    #[test]
    fn features_concatenate_table_rows() {
        let (s, g, f, m) = fixture_tables();
        let mut p = person("1", "NC", "JOHN", RaceCategory::White);
        p.surname = "SMITH".into();
        p.middle_name = String::new();
        let refs = TableRefs {
            surnames: &s,
            geo: &g,
            first: Some(&f),
            middle: Some(&m),
        };
        let base = make_features(&p, &refs, Layout::Base).unwrap();
        assert_eq!(&base.values[..5], g.get("370010201001000").unwrap());
        assert_eq!(&base.values[5..], s.get("SMITH").unwrap());

        let ext = make_features(&p, &refs, Layout::Extended).unwrap();
        // Hand-concatenated expectation: JOHN is (c+1)/(N_r+2) per race, with
        // N = (2,1,0,0,1); the empty middle name takes the OOV row 1/(N_r+2)
        // with N = (1,1,1,1,1).
        let expected: Vec<f64> = [
            *g.get("370010201001000").unwrap(),
            [0.7, 0.2, 0.05, 0.03, 0.02],
            [3.0 / 4.0, 2.0 / 3.0, 1.0 / 2.0, 1.0 / 2.0, 2.0 / 3.0],
            [1.0 / 3.0; 5],
        ]
        .concat();
        assert_eq!(ext.values.len(), 20);
        assert_close(&ext.values, &expected, 1e-15);
        assert_eq!(ext, make_features(&p, &refs, Layout::Extended).unwrap());

        p.block_id = "999999999999999".into();
        p.surname = "NOBODY".into();
        let unknown = make_features(&p, &refs, Layout::Base).unwrap();
        assert_eq!(&unknown.values[..5], &[0.0; 5]);
        assert_eq!(&unknown.values[5..], s.residual());

        let err = make_features(&p, &TableRefs::base(&s, &g), Layout::Extended).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tables_roundtrip_through_files() {
        let (s, g, f, _) = fixture_tables();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        save_table(&s, &p).unwrap();
        assert_eq!(load_table::<SurnameTable>(&p, "surname").unwrap(), s);
        assert!(load_table::<GeoTable>(&p, "geo").is_err());
        save_table(&g, &p).unwrap();
        assert_eq!(load_table::<GeoTable>(&p, "geo").unwrap().iter().count(), 2);
        save_table(&f, &p).unwrap();
        let back: NameGivenRaceTable = load_table(&p, "first_name").unwrap();
        assert_eq!(back, f);
        assert_eq!(back.training_states(), ["GA"]);
    }
}
