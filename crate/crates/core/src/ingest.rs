//! Person-record ingestion: name canonicalization, voter-file parsing and the
//! analysis filter.
//!
//! Canonical names are uppercase ASCII `A`-`Z` only, so they can be matched
//! against Census-style name lists without locale-dependent comparisons.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::race::RaceCategory;

/// Generational suffixes dropped when they trail a multi-token name.
const SUFFIXES: [&str; 5] = ["JR", "SR", "II", "III", "IV"];

/// Length of a Census block GEOID.
pub const BLOCK_ID_LEN: usize = 15;
/// Length of the tract GEOID prefix of a block GEOID.
pub const TRACT_ID_LEN: usize = 11;

/// Normalize a raw name to the canonical matching key.
///
/// Diacritics are folded to ASCII and the result is uppercased. Trailing
/// generational suffix tokens (`JR`, `SR`, `II`, `III`, `IV`) are removed as
/// long as another token precedes them. Every character outside `A`-`Z` is
/// then dropped, which removes apostrophes, hyphens, periods and spaces.
///
/// ```
/// use bisgml_core::ingest::canonicalize_name;
/// assert_eq!(canonicalize_name("García-Lopez"), "GARCIALOPEZ");
/// assert_eq!(canonicalize_name("o'neil jr"), "ONEIL");
/// ```
pub fn canonicalize_name(raw: &str) -> String {
    let folded = deunicode::deunicode(raw).to_ascii_uppercase();
    let mut tokens: Vec<String> = folded
        .split_whitespace()
        .map(|t| {
            t.chars()
                .filter(char::is_ascii_uppercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect();
    while tokens.len() > 1 && SUFFIXES.contains(&tokens[tokens.len() - 1].as_str()) {
        tokens.pop();
    }
    tokens.concat()
}

/// True for a 15-digit block GEOID.
pub fn is_valid_block_id(block_id: &str) -> bool {
    block_id.len() == BLOCK_ID_LEN && block_id.bytes().all(|b| b.is_ascii_digit())
}

fn is_valid_state(state: &str) -> bool {
    state.len() == 2 && state.bytes().all(|b| b.is_ascii_uppercase())
}

/// One voter-file row after canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub record_id: String,
    pub surname: String,
    pub first_name: String,
    pub middle_name: String,
    pub state: String,
    pub block_id: String,
    pub label: Option<RaceCategory>,
}

impl PersonRecord {
    /// The tract GEOID, i.e. the first 11 characters of the block GEOID
    /// (empty when the block id is too short).
    pub fn tract_id(&self) -> &str {
        self.block_id.get(..TRACT_ID_LEN).unwrap_or("")
    }

    /// Vector index of the label, if the record carries a known category.
    pub fn label_index(&self) -> Option<usize> {
        self.label.and_then(RaceCategory::index)
    }
}

/// An ordered collection of person records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<PersonRecord>,
    /// Distinct source states, sorted.
    pub provenance: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<PersonRecord>) -> Self {
        let provenance = records
            .iter()
            .map(|r| r.state.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Dataset {
            records,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fails with a data error listing every record id that occurs more than once.
    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(self.records.len());
        for r in &self.records {
            *seen.entry(r.record_id.as_str()).or_default() += 1;
        }
        let mut dups: Vec<&str> = seen
            .into_iter()
            .filter(|(_, n)| *n > 1)
            .map(|(id, _)| id)
            .collect();
        if dups.is_empty() {
            return Ok(());
        }
        dups.sort_unstable();
        Err(Error::Data(format!(
            "duplicate record_id values: {}",
            dups.join(", ")
        )))
    }
}

/// Maps logical person fields onto column names of a delimited file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub record_id: String,
    pub surname: String,
    pub first_name: String,
    pub middle_name: String,
    pub state: String,
    pub block_id: String,
    pub race: String,
    pub delimiter: u8,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            record_id: "record_id".into(),
            surname: "surname".into(),
            first_name: "first_name".into(),
            middle_name: "middle_name".into(),
            state: "state".into(),
            block_id: "block_id".into(),
            race: "race".into(),
            delimiter: b',',
        }
    }
}

/// Column positions resolved against a concrete header row.
#[derive(Debug, Clone)]
pub struct RowSchema {
    record_id: usize,
    surname: usize,
    first_name: Option<usize>,
    middle_name: Option<usize>,
    state: usize,
    block_id: usize,
    race: Option<usize>,
}

impl RowSchema {
    /// Resolve the mapping. Required columns are record_id, surname,
    /// block_id and state; the rest are used when present.
    pub fn resolve(headers: &csv::StringRecord, mapping: &ColumnMapping) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let require = |name: &str| {
            find(name).ok_or_else(|| Error::Config(format!("missing required column {name:?}")))
        };
        Ok(RowSchema {
            record_id: require(&mapping.record_id)?,
            surname: require(&mapping.surname)?,
            block_id: require(&mapping.block_id)?,
            state: require(&mapping.state)?,
            first_name: find(&mapping.first_name),
            middle_name: find(&mapping.middle_name),
            race: find(&mapping.race),
        })
    }

    pub fn has_labels(&self) -> bool {
        self.race.is_some()
    }

    /// Build a canonical record from one row, or describe why it is malformed.
    pub fn parse(&self, row: &csv::StringRecord) -> std::result::Result<PersonRecord, String> {
        let cell = |i: usize| row.get(i).map(str::trim);
        let required =
            |i: usize, what: &str| cell(i).ok_or_else(|| format!("missing {what} field"));

        let record_id = required(self.record_id, "record_id")?;
        if record_id.is_empty() {
            return Err("empty record_id".into());
        }
        let block_id = required(self.block_id, "block_id")?;
        if !block_id.is_empty() && !is_valid_block_id(block_id) {
            return Err(format!("block_id {block_id:?} is not a 15-digit GEOID"));
        }
        let state = required(self.state, "state")?.to_ascii_uppercase();
        if !is_valid_state(&state) {
            return Err(format!("state {state:?} is not a 2-letter code"));
        }
        let label = match self.race {
            Some(i) => Some(cell(i).unwrap_or("").parse::<RaceCategory>()?),
            None => None,
        };
        let optional_name = |i: Option<usize>| {
            i.and_then(|i| cell(i))
                .map(canonicalize_name)
                .unwrap_or_default()
        };
        Ok(PersonRecord {
            record_id: record_id.to_string(),
            surname: canonicalize_name(required(self.surname, "surname")?),
            first_name: optional_name(self.first_name),
            middle_name: optional_name(self.middle_name),
            state,
            block_id: block_id.to_string(),
            label,
        })
    }
}

/// A row rejected during parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MalformedRow {
    /// 1-based line number in the source file.
    pub line: u64,
    pub reason: String,
}

/// Result of [`parse_person_file`]: surviving records plus rejected rows.
#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub dataset: Dataset,
    pub malformed: Vec<MalformedRow>,
}

/// Read a delimited person file with a header row.
///
/// Names are canonicalized and input order is preserved. Rows with a
/// malformed block id, state or record id are reported and skipped; an empty
/// block id is kept so the analysis filter can count it.
pub fn parse_person_file(path: &Path, mapping: &ColumnMapping) -> Result<ParseOutcome> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let schema = RowSchema::resolve(&headers, mapping)?;

    let mut records = Vec::new();
    let mut malformed = Vec::new();
    let mut row = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {
                let line = row.position().map(|p| p.line()).unwrap_or(0);
                match schema.parse(&row) {
                    Ok(rec) => records.push(rec),
                    Err(reason) => malformed.push(MalformedRow { line, reason }),
                }
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                if e.is_io_error() {
                    return Err(Error::csv(path, e));
                }
                malformed.push(MalformedRow {
                    line,
                    reason: e.to_string(),
                });
            }
        }
    }
    let dataset = Dataset::new(records);
    dataset.check_unique_ids()?;
    Ok(ParseOutcome { dataset, malformed })
}

/// Write a dataset in the default column layout.
///
/// The `race` column is emitted when any record carries a label; unlabelled
/// records then get an empty cell.
pub fn write_person_file(dataset: &Dataset, path: &Path, delimiter: u8) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(BufWriter::new(file));
    let labelled = dataset.records.iter().any(|r| r.label.is_some());
    let mut header = vec![
        "record_id",
        "surname",
        "first_name",
        "middle_name",
        "state",
        "block_id",
    ];
    if labelled {
        header.push("race");
    }
    let to_err = |e| Error::csv(path, e);
    w.write_record(&header).map_err(to_err)?;
    for r in &dataset.records {
        let mut fields = vec![
            r.record_id.as_str(),
            &r.surname,
            &r.first_name,
            &r.middle_name,
            &r.state,
            &r.block_id,
        ];
        if labelled {
            fields.push(r.label.map(RaceCategory::as_str).unwrap_or(""));
        }
        w.write_record(&fields).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

/// Counts of records dropped by [`filter_for_analysis`].
///
/// A record with several defects is counted once, under the first matching
/// reason in the order unknown label, empty surname, bad block id.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub unknown: usize,
    pub empty_surname: usize,
    pub bad_block: usize,
}

impl RemovalReport {
    pub fn total(&self) -> usize {
        self.unknown + self.empty_surname + self.bad_block
    }
}

impl fmt::Display for RemovalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "removed {} records", self.total())?;
        writeln!(f, "  unknown label:  {}", self.unknown)?;
        writeln!(f, "  empty surname:  {}", self.empty_surname)?;
        write!(f, "  bad block id:   {}", self.bad_block)
    }
}

/// Drop records that cannot enter the analysis, preserving order.
pub fn filter_for_analysis(dataset: &Dataset) -> (Dataset, RemovalReport) {
    let mut report = RemovalReport::default();
    let kept = dataset
        .records
        .iter()
        .filter(|r| {
            if r.label == Some(RaceCategory::Unknown) {
                report.unknown += 1;
                false
            } else if r.surname.is_empty() {
                report.empty_surname += 1;
                false
            } else if !is_valid_block_id(&r.block_id) {
                report.bad_block += 1;
                false
            } else {
                true
            }
        })
        .cloned()
        .collect();
    (Dataset::new(kept), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, surname: &str, block: &str, label: Option<RaceCategory>) -> PersonRecord {
        PersonRecord {
            record_id: id.into(),
            surname: surname.into(),
            first_name: String::new(),
            middle_name: String::new(),
            state: "NC".into(),
            block_id: block.into(),
            label,
        }
    }

    const BLOCK: &str = "370010201001000";

    /// Character-level reference: fold by a fixed table, uppercase, split on
    /// whitespace, strip suffix tokens, keep A-Z.
    fn reference_canonical(s: &str) -> String {
        let upper: String = s
            .to_lowercase()
            .chars()
            .map(|c| match c {
                'á' | 'à' | 'ä' | 'â' => 'A',
                'é' | 'è' | 'ë' | 'ê' => 'E',
                'í' | 'ï' => 'I',
                'ó' | 'ö' | 'ô' => 'O',
                'ú' | 'ü' => 'U',
                'ñ' => 'N',
                'ç' => 'C',
                c => c.to_ascii_uppercase(),
            })
            .collect();
        let mut toks: Vec<String> = upper
            .split(' ')
            .map(|t| {
                t.chars()
                    .filter(|c| c.is_ascii_uppercase())
                    .collect::<String>()
            })
            .filter(|t| !t.is_empty())
            .collect();
        while toks.len() > 1
            && ["JR", "SR", "II", "III", "IV"].contains(&toks.last().unwrap().as_str())
        {
            toks.pop();
        }
        toks.concat()
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize_name("García-Lopez"), "GARCIALOPEZ");
        assert_eq!(canonicalize_name(""), "");
        assert_eq!(canonicalize_name("o'neil jr"), "ONEIL");
        assert_eq!(reference_canonical("o'neil jr"), "ONEIL");
        assert_eq!(canonicalize_name("St. John III"), "STJOHN");
        assert_eq!(canonicalize_name("de la Cruz"), "DELACRUZ");
        assert_eq!(canonicalize_name("Smith Jr. II"), "SMITH");
        // A lone suffix-like token is a name, not a suffix.
        assert_eq!(canonicalize_name("Iv"), "IV");
    }

    #[test]
    fn canonicalize_agrees_with_reference_on_latin_names() {
        for s in [
            "Muñoz",
            "peña jr",
            "José María",
            "van der berg",
            "D'Angelo-Ruiz sr",
            "ÁLVAREZ",
            "Çelik iii",
            "O'Brien",
            "mc donald iv",
        ] {
            assert_eq!(canonicalize_name(s), reference_canonical(s), "{s}");
        }
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(s in "\\PC{0,24}") {
            let once = canonicalize_name(&s);
            prop_assert_eq!(canonicalize_name(&once), once.clone());
            prop_assert!(once.bytes().all(|b| b.is_ascii_uppercase()));
        }

        #[test]
        fn filter_is_idempotent_and_order_preserving(
            specs in proptest::collection::vec((0u8..4, any::<bool>(), any::<bool>()), 0..40)
        ) {
            let records: Vec<_> = specs.iter().enumerate().map(|(i, (lab, empty, bad))| {
                let label = Some([RaceCategory::White, RaceCategory::Asian, RaceCategory::Unknown, RaceCategory::Other][*lab as usize]);
                record(&i.to_string(), if *empty { "" } else { "SMITH" }, if *bad { "123" } else { BLOCK }, label)
            }).collect();
            let d = Dataset::new(records);
            let (once, report) = filter_for_analysis(&d);
            let (twice, report2) = filter_for_analysis(&once);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(report2.total(), 0);
            prop_assert_eq!(once.len() + report.total(), d.len());
            let ids: Vec<usize> = once.records.iter().map(|r| r.record_id.parse().unwrap()).collect();
            prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn filter_counts_unknowns() {
        let mut records: Vec<_> = (0..10)
            .map(|i| record(&i.to_string(), "SMITH", BLOCK, Some(RaceCategory::White)))
            .collect();
        let (same, rep) = filter_for_analysis(&Dataset::new(records.clone()));
        assert_eq!(same.records, records);
        assert_eq!(rep.total(), 0);
        for r in records.iter_mut().take(3) {
            r.label = Some(RaceCategory::Unknown);
        }
        let (kept, rep) = filter_for_analysis(&Dataset::new(records));
        assert_eq!(kept.len(), 7);
        assert_eq!(
            rep,
            RemovalReport {
                unknown: 3,
                ..Default::default()
            }
        );
    }

    #[test]
    fn overlapping_defects_counted_once_unknown_first() {
        let d = Dataset::new(vec![
            record("a", "", "bad", Some(RaceCategory::Unknown)),
            record("b", "", "bad", Some(RaceCategory::Black)),
            record("c", "X", "", Some(RaceCategory::Black)),
            record("d", "X", BLOCK, Some(RaceCategory::Black)),
        ]);
        let (kept, rep) = filter_for_analysis(&d);
        assert_eq!(kept.len(), 1);
        assert_eq!(
            rep,
            RemovalReport {
                unknown: 1,
                empty_surname: 1,
                bad_block: 1
            }
        );
        assert!(rep.to_string().contains("unknown label:  1"));
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_well_formed_file_in_order() {
        let f = write_tmp(
            "record_id,surname,first_name,state,block_id,race\n\
             3,García,ana,fl,120860001001000,H\n\
             1,Smith jr,John,FL,120860001001001,white\n\
             2,Nguyen,,FL,120860001001002,\n",
        );
        let out = parse_person_file(f.path(), &ColumnMapping::default()).unwrap();
        assert!(out.malformed.is_empty());
        let ids: Vec<_> = out
            .dataset
            .records
            .iter()
            .map(|r| r.record_id.as_str())
            .collect();
        assert_eq!(ids, ["3", "1", "2"]);
        let r = &out.dataset.records[0];
        assert_eq!(
            (r.surname.as_str(), r.first_name.as_str(), r.state.as_str()),
            ("GARCIA", "ANA", "FL")
        );
        assert_eq!(r.tract_id(), "12086000100");
        assert_eq!(r.label, Some(RaceCategory::Hispanic));
        assert_eq!(out.dataset.records[1].surname, "SMITH");
        assert_eq!(out.dataset.records[2].label, Some(RaceCategory::Unknown));
        assert_eq!(out.dataset.provenance, ["FL"]);
    }

    #[test]
    fn missing_required_column_names_it() {
        let f = write_tmp("record_id,surname,state\n1,A,FL\n");
        let err = parse_person_file(f.path(), &ColumnMapping::default()).unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.contains("block_id")),
            "{err}"
        );
    }

    #[test]
    fn short_block_id_row_reported_others_kept() {
        let f = write_tmp(
            "record_id,surname,state,block_id\n\
             1,A,NC,370010201001000\n\
             2,B,NC,37001020100100\n\
             3,C,NC,370010201001002\n",
        );
        let out = parse_person_file(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(out.dataset.len(), 2);
        assert_eq!(out.malformed.len(), 1);
        assert_eq!(out.malformed[0].line, 3);
    }

    #[test]
    fn duplicate_ids_are_a_data_error() {
        let f = write_tmp(
            "record_id,surname,state,block_id\n7,A,NC,370010201001000\n7,B,NC,370010201001000\n",
        );
        let err = parse_person_file(f.path(), &ColumnMapping::default()).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains('7')), "{err}");
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = parse_person_file(Path::new("/nonexistent/x.csv"), &ColumnMapping::default())
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn custom_mapping_and_delimiter() {
        let f = write_tmp("id;last;geoid;st\nx;Lee;060372073011000;ca\n");
        let mapping = ColumnMapping {
            record_id: "id".into(),
            surname: "last".into(),
            block_id: "geoid".into(),
            state: "st".into(),
            delimiter: b';',
            ..Default::default()
        };
        let out = parse_person_file(f.path(), &mapping).unwrap();
        assert_eq!(out.dataset.records[0].surname, "LEE");
        assert_eq!(out.dataset.records[0].label, None);
    }

    fn name_strategy() -> impl Strategy<Value = String> {
        "[A-Z]{0,8}"
    }

    proptest! {
        #[test]
        fn write_then_parse_roundtrips(
            rows in proptest::collection::vec((name_strategy(), name_strategy(), name_strategy(), 0usize..6, "[0-9]{15}"), 0..12),
            labelled in any::<bool>(),
        ) {
            let records: Vec<_> = rows.into_iter().enumerate().map(|(i, (s, f, m, lab, block))| PersonRecord {
                record_id: format!("r{i}"),
                surname: s,
                first_name: f,
                middle_name: m,
                state: "GA".into(),
                block_id: block,
                label: labelled.then(|| [RaceCategory::White, RaceCategory::Black, RaceCategory::Hispanic, RaceCategory::Asian, RaceCategory::Other, RaceCategory::Unknown][lab]),
            }).collect();
            let d = Dataset::new(records);
            let f = tempfile::NamedTempFile::new().unwrap();
            write_person_file(&d, f.path(), b',').unwrap();
            let back = parse_person_file(f.path(), &ColumnMapping::default()).unwrap();
            prop_assert!(back.malformed.is_empty());
            prop_assert_eq!(back.dataset.records, d.records);
        }
    }
}
