//! Synthetic labelled populations with a known generative process.
//!
//! Each state is a grid of tracts and blocks. Block race counts are integer
//! draws around a Dirichlet composition; a record picks a (block, race) cell
//! in proportion to those counts, then a surname, first name and middle name
//! conditionally on race. With `knob > 0` the surname also depends on the
//! block, which breaks the independence assumption behind BISG.
//!
//! [`Oracle`] enumerates the same process to give the exact posterior of any
//! vocabulary cell. It does its own arithmetic and does not call into
//! [`crate::bisg`].

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_person_file, Dataset, PersonRecord};
use crate::race::{RaceCategory, RaceVector, NUM_RACES};
use crate::rng::{derive_named, rng_from};

/// A block of names sharing a stem and a per-race affinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameGroup {
    pub stem: String,
    pub size: usize,
    /// Relative weight of the group for each race; all entries positive.
    pub affinity: RaceVector,
}

impl NameGroup {
    pub fn new(stem: &str, size: usize, affinity: RaceVector) -> Self {
        NameGroup {
            stem: stem.to_string(),
            size,
            affinity,
        }
    }
}

/// Name vocabulary. Within a group the i-th name has weight `(i + 1)^-zipf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub groups: Vec<NameGroup>,
    pub zipf: f64,
}

fn letters(mut i: usize, width: usize) -> String {
    let mut out = vec![b'A'; width];
    for slot in out.iter_mut().rev() {
        *slot = b'A' + (i % 26) as u8;
        i /= 26;
    }
    String::from_utf8(out).unwrap()
}

impl Vocabulary {
    /// Names and their unnormalized per-race weights, in group order.
    pub fn expand(&self) -> (Vec<String>, Vec<RaceVector>) {
        let mut names = Vec::new();
        let mut weights = Vec::new();
        for g in &self.groups {
            let mut width = 1;
            while 26usize.pow(width as u32) < g.size {
                width += 1;
            }
            for i in 0..g.size {
                let base = (i as f64 + 1.0).powf(-self.zipf);
                names.push(format!("{}{}", g.stem, letters(i, width)));
                weights.push(g.affinity.map(|a| a * base));
            }
        }
        (names, weights)
    }

    /// P(name | race) for every name, in expansion order.
    pub fn conditional(&self) -> (Vec<String>, Vec<RaceVector>) {
        let (names, mut w) = self.expand();
        let mut totals = [0.0; NUM_RACES];
        for row in &w {
            for r in 0..NUM_RACES {
                totals[r] += row[r];
            }
        }
        for row in &mut w {
            for r in 0..NUM_RACES {
                row[r] /= totals[r];
            }
        }
        (names, w)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.groups.is_empty() || !self.zipf.is_finite() || self.zipf < 0.0 {
            return Err(Error::Config(format!(
                "{what}: needs groups and a finite zipf >= 0"
            )));
        }
        for g in &self.groups {
            if g.size == 0 || g.stem.is_empty() || !g.stem.bytes().all(|b| b.is_ascii_uppercase()) {
                return Err(Error::Config(format!(
                    "{what}: group {:?} needs an uppercase stem and size >= 1",
                    g.stem
                )));
            }
            if g.affinity.iter().any(|a| !a.is_finite() || *a <= 0.0) {
                return Err(Error::Config(format!(
                    "{what}: group {} has a non-positive weight",
                    g.stem
                )));
            }
        }
        let (names, _) = self.expand();
        let mut seen = std::collections::BTreeSet::new();
        for n in names {
            if !seen.insert(n.clone()) {
                return Err(Error::Config(format!("{what}: name {n} generated twice")));
            }
        }
        Ok(())
    }
}

/// One synthetic state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    /// Two-letter postal code.
    pub code: String,
    /// Two-digit state FIPS prefix of the block GEOIDs.
    pub fips: String,
    pub tracts: usize,
    pub blocks_per_tract: usize,
    /// Mean people per block; actual sizes vary uniformly within ±50%.
    pub block_population: usize,
    /// Dirichlet concentration of block composition around `mixture`.
    pub concentration: f64,
    /// Statewide race mixture; entries may be zero.
    pub mixture: RaceVector,
    pub records: usize,
    pub surnames: Vocabulary,
}

/// Full generative specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub states: Vec<StateSpec>,
    pub first_names: Vocabulary,
    pub middle_names: Vocabulary,
    /// Probability that a record has no middle name, independent of race.
    pub middle_missing: f64,
    pub seed: u64,
    /// Surname/block coupling strength; 0 keeps them independent given race.
    pub knob: f64,
}

fn surname_vocab(hispanic_stem: &str) -> Vocabulary {
    Vocabulary {
        zipf: 1.0,
        groups: vec![
            NameGroup::new("HAL", 150, [1.0, 0.7, 0.04, 0.03, 0.5]),
            NameGroup::new("OKO", 40, [0.04, 1.0, 0.01, 0.01, 0.2]),
            NameGroup::new(hispanic_stem, 60, [0.03, 0.02, 1.0, 0.01, 0.2]),
            NameGroup::new("TAK", 50, [0.01, 0.005, 0.01, 1.0, 0.2]),
        ],
    }
}

fn state(code: &str, fips: &str, mixture: RaceVector, hispanic_stem: &str) -> StateSpec {
    StateSpec {
        code: code.into(),
        fips: fips.into(),
        tracts: 40,
        blocks_per_tract: 8,
        block_population: 250,
        concentration: 2.0,
        mixture,
        records: 100_000,
        surnames: surname_vocab(hispanic_stem),
    }
}

impl GenerativeSpec {
    /// Four states: a Hispanic-heavy one with its own Hispanic surname stock,
    /// a Black-heavy one, a mostly White one, and one with a large Asian and
    /// Hispanic share.
    pub fn default_four_state(seed: u64) -> Self {
        GenerativeSpec {
            states: vec![
                state("FL", "12", [0.60, 0.14, 0.18, 0.04, 0.04], "REYV"),
                state("GA", "13", [0.52, 0.32, 0.05, 0.05, 0.06], "GARZ"),
                state("NC", "37", [0.64, 0.22, 0.05, 0.04, 0.05], "GARZ"),
                state("CA", "06", [0.40, 0.06, 0.26, 0.13, 0.15], "GARZ"),
            ],
            first_names: Vocabulary {
                zipf: 1.0,
                groups: vec![
                    NameGroup::new("LAR", 60, [1.0, 0.6, 0.2, 0.2, 0.6]),
                    NameGroup::new("DEM", 30, [0.05, 1.0, 0.03, 0.02, 0.3]),
                    NameGroup::new("JOS", 40, [0.03, 0.03, 1.0, 0.02, 0.3]),
                    NameGroup::new("MEI", 30, [0.02, 0.01, 0.01, 1.0, 0.3]),
                ],
            },
            middle_names: Vocabulary {
                zipf: 0.8,
                groups: vec![
                    NameGroup::new("ANN", 30, [1.0, 1.0, 0.5, 0.5, 1.0]),
                    NameGroup::new("MAR", 20, [0.05, 0.05, 1.0, 0.05, 0.3]),
                    NameGroup::new("LIN", 10, [0.05, 0.05, 0.05, 1.0, 0.3]),
                ],
            },
            middle_missing: 0.2,
            seed,
            knob: 0.0,
        }
    }

    /// One small state whose full (surname, block, first, middle) grid has
    /// 4 * 10 * 7 * 7 = 1960 cells.
    pub fn micro(seed: u64) -> Self {
        GenerativeSpec {
            states: vec![StateSpec {
                code: "MC".into(),
                fips: "99".into(),
                tracts: 2,
                blocks_per_tract: 2,
                block_population: 100,
                concentration: 1.0,
                mixture: [0.4, 0.2, 0.2, 0.1, 0.1],
                records: 2_000,
                surnames: Vocabulary {
                    zipf: 0.5,
                    groups: vec![
                        NameGroup::new("SA", 4, [1.0, 0.5, 0.1, 0.1, 0.4]),
                        NameGroup::new("SB", 3, [0.1, 0.2, 1.0, 0.1, 0.4]),
                        NameGroup::new("SC", 3, [0.1, 0.1, 0.1, 1.0, 0.4]),
                    ],
                },
            }],
            first_names: Vocabulary {
                zipf: 0.5,
                groups: vec![
                    NameGroup::new("FA", 4, [1.0, 0.3, 0.2, 0.2, 0.5]),
                    NameGroup::new("FB", 3, [0.1, 1.0, 0.5, 0.3, 0.5]),
                ],
            },
            middle_names: Vocabulary {
                zipf: 0.5,
                groups: vec![
                    NameGroup::new("MA", 4, [1.0, 1.0, 0.3, 0.3, 0.6]),
                    NameGroup::new("MB", 3, [0.2, 0.2, 1.0, 1.0, 0.6]),
                ],
            },
            middle_missing: 0.1,
            seed,
            knob: 0.0,
        }
    }

    pub fn state(&self, code: &str) -> Option<&StateSpec> {
        self.states.iter().find(|s| s.code == code)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::Config("synthetic spec has no states".into()));
        }
        if !self.knob.is_finite() || !(0.0..1.0).contains(&self.middle_missing) {
            return Err(Error::Config(
                "knob must be finite and middle_missing in [0, 1)".into(),
            ));
        }
        let mut codes = std::collections::BTreeSet::new();
        for s in &self.states {
            let ok_code = s.code.len() == 2 && s.code.bytes().all(|b| b.is_ascii_uppercase());
            let ok_fips = s.fips.len() == 2 && s.fips.bytes().all(|b| b.is_ascii_digit());
            if !ok_code || !ok_fips || !codes.insert((s.code.clone(), s.fips.clone())) {
                return Err(Error::Config(format!(
                    "state {:?}: bad or duplicate code/fips",
                    s.code
                )));
            }
            if s.tracts == 0
                || s.tracts > 999_999
                || s.blocks_per_tract == 0
                || s.blocks_per_tract > 9_999
            {
                return Err(Error::Config(format!(
                    "state {}: tract/block counts out of range",
                    s.code
                )));
            }
            if s.block_population == 0 || !(s.concentration > 0.0 && s.concentration.is_finite()) {
                return Err(Error::Config(format!(
                    "state {}: block population and concentration must be positive",
                    s.code
                )));
            }
            if s.mixture.iter().any(|m| !m.is_finite() || *m < 0.0)
                || s.mixture.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::Config(format!(
                    "state {}: invalid race mixture",
                    s.code
                )));
            }
            s.surnames.validate(&format!("state {} surnames", s.code))?;
        }
        let codes: std::collections::BTreeSet<_> = self.states.iter().map(|s| &s.code).collect();
        if codes.len() != self.states.len() {
            return Err(Error::Config("duplicate state code".into()));
        }
        self.first_names.validate("first names")?;
        self.middle_names.validate("middle names")
    }

    /// Races whose first-name distribution is at total-variation distance at
    /// least `threshold` from the mixture-weighted pooled distribution.
    pub fn informative_first_name_races(&self, threshold: f64) -> Vec<usize> {
        let (_, p) = self.first_names.conditional();
        let mut mix = [0.0; NUM_RACES];
        for s in &self.states {
            for r in 0..NUM_RACES {
                mix[r] += s.mixture[r];
            }
        }
        let total: f64 = mix.iter().sum();
        let pooled: Vec<f64> = p
            .iter()
            .map(|row| (0..NUM_RACES).map(|r| row[r] * mix[r] / total).sum())
            .collect();
        (0..NUM_RACES)
            .filter(|&r| {
                let tv: f64 = p
                    .iter()
                    .zip(&pooled)
                    .map(|(row, q)| (row[r] - q).abs())
                    .sum::<f64>()
                    / 2.0;
                tv >= threshold
            })
            .collect()
    }
}

/// Deterministic surname score in [-1, 1] used by the coupling knob.
pub fn surname_phase(index: usize) -> f64 {
    ((index * 37 + 11) % 101) as f64 / 50.0 - 1.0
}

/// Deterministic block score in [-1, 1] used by the coupling knob.
pub fn block_phase(index: usize) -> f64 {
    ((index * 53 + 7) % 97) as f64 / 48.0 - 1.0
}

fn block_id(fips: &str, block: usize, blocks_per_tract: usize) -> String {
    let tract = block / blocks_per_tract;
    let within = block % blocks_per_tract;
    format!("{fips}001{:06}{:04}", tract + 1, within + 1000)
}

/// Exact generated population and sampled records of one state.
#[derive(Debug, Clone)]
pub struct SynthState {
    pub code: String,
    pub dataset: Dataset,
    /// Integer race counts per block, in block order.
    pub blocks: Vec<(String, [u64; NUM_RACES])>,
    /// Expected surname counts per race over the block population.
    pub surname_counts: BTreeMap<String, RaceVector>,
    pub first_counts: BTreeMap<String, RaceVector>,
    pub middle_counts: BTreeMap<String, RaceVector>,
}

impl SynthState {
    pub fn race_totals(&self) -> [u64; NUM_RACES] {
        let mut t = [0; NUM_RACES];
        for (_, c) in &self.blocks {
            for r in 0..NUM_RACES {
                t[r] += c[r];
            }
        }
        t
    }
}

/// Everything produced by [`generate`].
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: GenerativeSpec,
    pub states: Vec<SynthState>,
}

fn block_counts(s: &StateSpec, rng: &mut impl Rng) -> Vec<[u64; NUM_RACES]> {
    let n_blocks = s.tracts * s.blocks_per_tract;
    let total_mix: f64 = s.mixture.iter().sum();
    (0..n_blocks)
        .map(|_| {
            let lo = (s.block_population / 2).max(1);
            let pop = rng.random_range(lo..=s.block_population + s.block_population / 2);
            let mut comp = [0.0; NUM_RACES];
            for r in 0..NUM_RACES {
                let shape = s.concentration * s.mixture[r] / total_mix;
                if shape > 0.0 {
                    comp[r] = Gamma::new(shape, 1.0).unwrap().sample(rng);
                }
            }
            let sum: f64 = comp.iter().sum();
            if !(sum > 0.0) {
                comp = s.mixture;
            }
            let sum: f64 = comp.iter().sum();
            // Largest-remainder rounding to exactly `pop` people.
            let exact = comp.map(|c| c / sum * pop as f64);
            let mut counts = exact.map(|x| x.floor() as u64);
            let assigned: u64 = counts.iter().sum();
            let mut order: Vec<usize> = (0..NUM_RACES).filter(|&r| s.mixture[r] > 0.0).collect();
            order.sort_by(|&a, &b| {
                (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor()))
            });
            for &r in order.iter().cycle().take((pop as u64 - assigned) as usize) {
                counts[r] += 1;
            }
            counts
        })
        .collect()
}

/// Per-state surname model: P(s | r, g) = w_r(s) exp(knob φ(s) ψ(g)) / Z(r, g).
struct SurnameModel {
    names: Vec<String>,
    /// P(s | r) when the knob is zero.
    base: Vec<RaceVector>,
    knob: f64,
}

impl SurnameModel {
    fn new(v: &Vocabulary, knob: f64) -> Self {
        let (names, base) = v.conditional();
        SurnameModel { names, base, knob }
    }

    fn weights(&self, race: usize, block: usize) -> Vec<f64> {
        let psi = block_phase(block);
        let raw: Vec<f64> = self
            .base
            .iter()
            .enumerate()
            .map(|(i, w)| w[race] * (self.knob * surname_phase(i) * psi).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / z).collect()
    }
}

fn generate_state(spec: &GenerativeSpec, s: &StateSpec) -> SynthState {
    let mut block_rng = rng_from(derive_named(spec.seed, &format!("synth/blocks/{}", s.code)));
    let counts = block_counts(s, &mut block_rng);
    let blocks: Vec<(String, [u64; NUM_RACES])> = counts
        .iter()
        .enumerate()
        .map(|(g, c)| (block_id(&s.fips, g, s.blocks_per_tract), *c))
        .collect();

    let surnames = SurnameModel::new(&s.surnames, spec.knob);
    let (first_names, first_p) = spec.first_names.conditional();
    let (middle_names, middle_p) = spec.middle_names.conditional();

    // Exact expected counts over the block population.
    let mut surname_counts: BTreeMap<String, RaceVector> = surnames
        .names
        .iter()
        .map(|n| (n.clone(), [0.0; NUM_RACES]))
        .collect();
    let mut totals = [0.0; NUM_RACES];
    for (g, c) in counts.iter().enumerate() {
        for r in 0..NUM_RACES {
            if c[r] == 0 {
                continue;
            }
            totals[r] += c[r] as f64;
            let w = if spec.knob == 0.0 {
                None
            } else {
                Some(surnames.weights(r, g))
            };
            for (i, name) in surnames.names.iter().enumerate() {
                let p = w.as_ref().map_or(surnames.base[i][r], |w| w[i]);
                surname_counts.get_mut(name).unwrap()[r] += c[r] as f64 * p;
            }
        }
    }
    if spec.knob == 0.0 {
        // Single product per cell keeps the file exactly T_r * P(s | r).
        for (i, name) in surnames.names.iter().enumerate() {
            let row = surname_counts.get_mut(name).unwrap();
            for r in 0..NUM_RACES {
                row[r] = totals[r] * surnames.base[i][r];
            }
        }
    }
    let name_counts =
        |names: &[String], p: &[RaceVector], keep: f64| -> BTreeMap<String, RaceVector> {
            names
                .iter()
                .zip(p)
                .map(|(n, row)| {
                    (
                        n.clone(),
                        std::array::from_fn(|r| totals[r] * keep * row[r]),
                    )
                })
                .collect()
        };
    let first_counts = name_counts(&first_names, &first_p, 1.0);
    let middle_counts = name_counts(&middle_names, &middle_p, 1.0 - spec.middle_missing);

    // Sampling.
    let mut rng = rng_from(derive_named(
        spec.seed,
        &format!("synth/records/{}", s.code),
    ));
    let cell_weights: Vec<f64> = counts.iter().flat_map(|c| c.map(|x| x as f64)).collect();
    let cells = WeightedIndex::new(&cell_weights).expect("positive population");
    let race_dist =
        |p: &[RaceVector], r: usize| WeightedIndex::new(p.iter().map(|row| row[r])).unwrap();
    let first_dist: Vec<_> = (0..NUM_RACES).map(|r| race_dist(&first_p, r)).collect();
    let middle_dist: Vec<_> = (0..NUM_RACES).map(|r| race_dist(&middle_p, r)).collect();
    let base_surname: Vec<_> = (0..NUM_RACES)
        .map(|r| race_dist(&surnames.base, r))
        .collect();
    let mut coupled: HashMap<(usize, usize), WeightedIndex<f64>> = HashMap::new();

    let records = (0..s.records)
        .map(|i| {
            let cell = cells.sample(&mut rng);
            let (g, r) = (cell / NUM_RACES, cell % NUM_RACES);
            let si = if spec.knob == 0.0 {
                base_surname[r].sample(&mut rng)
            } else {
                coupled
                    .entry((g, r))
                    .or_insert_with(|| WeightedIndex::new(surnames.weights(r, g)).unwrap())
                    .sample(&mut rng)
            };
            let fi = first_dist[r].sample(&mut rng);
            let middle = if rng.random::<f64>() < spec.middle_missing {
                String::new()
            } else {
                middle_names[middle_dist[r].sample(&mut rng)].clone()
            };
            PersonRecord {
                record_id: format!("{}{:08}", s.code, i + 1),
                surname: surnames.names[si].clone(),
                first_name: first_names[fi].clone(),
                middle_name: middle,
                state: s.code.clone(),
                block_id: blocks[g].0.clone(),
                label: RaceCategory::from_index(r),
            }
        })
        .collect();

    SynthState {
        code: s.code.clone(),
        dataset: Dataset::new(records),
        blocks,
        surname_counts,
        first_counts,
        middle_counts,
    }
}

/// Generate every state of `spec`, in spec order.
pub fn generate(spec: &GenerativeSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let states = spec
        .states
        .par_iter()
        .map(|s| generate_state(spec, s))
        .collect();
    Ok(SynthCorpus {
        spec: spec.clone(),
        states,
    })
}

fn write_count_file<'a, I>(path: &Path, key: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, RaceVector)>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{key},white,black,hispanic,asian,other").map_err(io)?;
    for (name, c) in rows {
        writeln!(w, "{name},{},{},{},{},{}", c[0], c[1], c[2], c[3], c[4]).map_err(io)?;
    }
    w.flush().map_err(io)
}

impl SynthCorpus {
    pub fn state(&self, code: &str) -> Option<&SynthState> {
        self.states.iter().find(|s| s.code == code)
    }

    /// Surname counts pooled over all states.
    pub fn national_surname_counts(&self) -> BTreeMap<String, RaceVector> {
        let mut out: BTreeMap<String, RaceVector> = BTreeMap::new();
        for s in &self.states {
            for (name, c) in &s.surname_counts {
                let e = out.entry(name.clone()).or_insert([0.0; NUM_RACES]);
                for r in 0..NUM_RACES {
                    e[r] += c[r];
                }
            }
        }
        out
    }

    pub fn oracle(&self) -> Oracle {
        Oracle::new(self)
    }

    /// Write all files into `dir` and return their paths in write order.
    ///
    /// Per state `ST`: `persons_ST.csv`, `blocks_ST.csv`, `surnames_ST.csv`,
    /// `first_names_ST.csv`, `middle_names_ST.csv`; plus
    /// `surnames_national.csv` and `spec.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for s in &self.states {
            let p = dir.join(format!("persons_{}.csv", s.code));
            write_person_file(&s.dataset, &p, b',')?;
            written.push(p);
            let p = dir.join(format!("blocks_{}.csv", s.code));
            write_count_file(
                &p,
                "block_id",
                s.blocks
                    .iter()
                    .map(|(b, c)| (b.as_str(), c.map(|x| x as f64))),
            )?;
            written.push(p);
            for (prefix, counts) in [
                ("surnames", &s.surname_counts),
                ("first_names", &s.first_counts),
                ("middle_names", &s.middle_counts),
            ] {
                let p = dir.join(format!("{prefix}_{}.csv", s.code));
                write_count_file(&p, "name", counts.iter().map(|(n, c)| (n.as_str(), *c)))?;
                written.push(p);
            }
        }
        let national = self.national_surname_counts();
        let p = dir.join("surnames_national.csv");
        write_count_file(&p, "name", national.iter().map(|(n, c)| (n.as_str(), *c)))?;
        written.push(p);
        let p = dir.join("spec.json");
        let json = serde_json::to_string_pretty(&self.spec)?;
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(written)
    }
}

struct OracleState {
    blocks: HashMap<String, (usize, [u64; NUM_RACES])>,
    surnames: HashMap<String, usize>,
    surname_weights: Vec<RaceVector>,
    knob: f64,
}

/// Exact P(race | surname, block [, first, middle]) by enumeration.
pub struct Oracle {
    states: BTreeMap<String, OracleState>,
    first: HashMap<String, RaceVector>,
    middle: HashMap<String, RaceVector>,
}

impl Oracle {
    pub fn new(corpus: &SynthCorpus) -> Self {
        let spec = &corpus.spec;
        let states = spec
            .states
            .iter()
            .zip(&corpus.states)
            .map(|(ss, st)| {
                let (names, weights) = ss.surnames.expand();
                let state = OracleState {
                    blocks: st
                        .blocks
                        .iter()
                        .enumerate()
                        .map(|(g, (id, c))| (id.clone(), (g, *c)))
                        .collect(),
                    surnames: names.into_iter().enumerate().map(|(i, n)| (n, i)).collect(),
                    surname_weights: weights,
                    knob: spec.knob,
                };
                (ss.code.clone(), state)
            })
            .collect();
        let table = |v: &Vocabulary| {
            let (names, p) = v.conditional();
            names.into_iter().zip(p).collect()
        };
        Oracle {
            states,
            first: table(&spec.first_names),
            middle: table(&spec.middle_names),
        }
    }

    /// Posterior for one cell; an empty or `None` name marginalizes that field.
    pub fn posterior(
        &self,
        state: &str,
        surname: &str,
        block: &str,
        first: Option<&str>,
        middle: Option<&str>,
    ) -> Result<RaceVector> {
        let st = self
            .states
            .get(state)
            .ok_or_else(|| Error::Data(format!("oracle: state {state} not in spec")))?;
        let &(g, counts) = st
            .blocks
            .get(block)
            .ok_or_else(|| Error::Data(format!("oracle: block {block} not in spec")))?;
        let &si = st
            .surnames
            .get(surname)
            .ok_or_else(|| Error::Data(format!("oracle: surname {surname} not in spec")))?;
        let name_factor =
            |table: &HashMap<String, RaceVector>, name: Option<&str>, what: &str| match name {
                None | Some("") => Ok(None),
                Some(n) => table
                    .get(n)
                    .copied()
                    .map(Some)
                    .ok_or_else(|| Error::Data(format!("oracle: {what} name {n} not in spec"))),
            };
        let f = name_factor(&self.first, first, "first")?;
        let m = name_factor(&self.middle, middle, "middle")?;

        let psi = block_phase(g);
        let mut joint = [0.0; NUM_RACES];
        for r in 0..NUM_RACES {
            if counts[r] == 0 {
                continue;
            }
            // Normalizer of the surname distribution for this (race, block).
            let mut z = 0.0;
            for (i, w) in st.surname_weights.iter().enumerate() {
                z += w[r] * (st.knob * surname_phase(i) * psi).exp();
            }
            let p_s = st.surname_weights[si][r] * (st.knob * surname_phase(si) * psi).exp() / z;
            let mut cell = counts[r] as f64 * p_s;
            if let Some(f) = f {
                cell *= f[r];
            }
            if let Some(m) = m {
                cell *= m[r];
            }
            joint[r] = cell;
        }
        let total: f64 = joint.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Data(format!(
                "oracle: cell ({surname}, {block}) has zero probability"
            )));
        }
        Ok(joint.map(|x| x / total))
    }

    /// Oracle posterior for a generated record.
    pub fn posterior_of(&self, p: &PersonRecord, with_names: bool) -> Result<RaceVector> {
        if with_names {
            self.posterior(
                &p.state,
                &p.surname,
                &p.block_id,
                Some(&p.first_name),
                Some(&p.middle_name),
            )
        } else {
            self.posterior(&p.state, &p.surname, &p.block_id, None, None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> GenerativeSpec {
        let mut spec = GenerativeSpec::micro(seed);
        spec.states[0].records = 500;
        spec
    }

    #[test]
    fn default_spec_is_valid_and_mixtures_as_intended() {
        let spec = GenerativeSpec::default_four_state(1);
        spec.validate().unwrap();
        let asian = |c: &str| spec.state(c).unwrap().mixture[3];
        let others = (asian("FL") + asian("GA") + asian("NC")) / 3.0;
        assert!((asian("CA") / others - 3.0).abs() < 1e-9);
        let (names, p) = spec.first_names.conditional();
        assert_eq!(names.len(), 160);
        for r in 0..NUM_RACES {
            assert!((p.iter().map(|row| row[r]).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let inf = spec.informative_first_name_races(0.2);
        assert!(inf.contains(&1) && inf.contains(&2) && inf.contains(&3));
    }

    #[test]
    fn record_counts_and_determinism() {
        let spec = tiny(5);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.states[0].dataset.len(), 500);
        assert_eq!(a.states[0].dataset, b.states[0].dataset);
        let c = generate(&tiny(6)).unwrap();
        assert_ne!(a.states[0].dataset, c.states[0].dataset);
        let pop: u64 = a.states[0].race_totals().iter().sum();
        assert!(pop >= 4 * 50);
    }

    #[test]
    fn single_race_spec_gives_identical_labels() {
        let mut spec = tiny(2);
        spec.states[0].mixture = [0.0, 0.0, 1.0, 0.0, 0.0];
        let corpus = generate(&spec).unwrap();
        assert!(corpus.states[0]
            .dataset
            .records
            .iter()
            .all(|r| r.label == Some(RaceCategory::Hispanic)));
    }

    #[test]
    fn out_of_vocabulary_oracle_query_fails() {
        let corpus = generate(&tiny(1)).unwrap();
        let o = corpus.oracle();
        let rec = &corpus.states[0].dataset.records[0];
        assert!(o
            .posterior("MC", "NOSUCH", &rec.block_id, None, None)
            .is_err());
        assert!(o
            .posterior("MC", &rec.surname, "999999999999999", None, None)
            .is_err());
        assert!(o
            .posterior("MC", &rec.surname, &rec.block_id, Some("NOSUCH"), None)
            .is_err());
        assert!(o
            .posterior("ZZ", &rec.surname, &rec.block_id, None, None)
            .is_err());
        let p = o.posterior_of(rec, true).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Two races, two blocks, two surnames: enumerate the 8-cell joint by hand.
    #[test]
    fn micro_joint_table_by_hand() {
        let spec = GenerativeSpec {
            states: vec![StateSpec {
                code: "ZZ".into(),
                fips: "98".into(),
                tracts: 1,
                blocks_per_tract: 2,
                block_population: 10,
                concentration: 1.0,
                mixture: [0.5, 0.5, 0.0, 0.0, 0.0],
                records: 10,
                surnames: Vocabulary {
                    zipf: 0.0,
                    groups: vec![
                        NameGroup::new("P", 1, [3.0, 1.0, 1.0, 1.0, 1.0]),
                        NameGroup::new("Q", 1, [1.0, 1.0, 1.0, 1.0, 1.0]),
                    ],
                },
            }],
            ..tiny(3)
        };
        let mut corpus = generate(&spec).unwrap();
        // Overwrite the composition with known counts.
        corpus.states[0].blocks[0].1 = [6, 2, 0, 0, 0];
        corpus.states[0].blocks[1].1 = [1, 3, 0, 0, 0];
        let o = corpus.oracle();
        // P(P|W) = 3/4, P(Q|W) = 1/4, P(P|B) = P(Q|B) = 1/2.
        // Joint (block 0, P): W 6 * 3/4 = 4.5, B 2 * 1/2 = 1 -> 4.5 / 5.5.
        let b0 = corpus.states[0].blocks[0].0.clone();
        let b1 = corpus.states[0].blocks[1].0.clone();
        let post = o.posterior("ZZ", "PA", &b0, None, None).unwrap();
        assert!((post[0] - 4.5 / 5.5).abs() < 1e-15);
        assert!((post[1] - 1.0 / 5.5).abs() < 1e-15);
        // (block 1, Q): W 1 * 1/4 = 0.25, B 3 * 1/2 = 1.5.
        let post = o.posterior("ZZ", "QA", &b1, None, None).unwrap();
        assert!((post[0] - 0.25 / 1.75).abs() < 1e-15);
        assert_eq!(&post[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn uninformative_geography_gives_surname_posterior() {
        let mut corpus = generate(&tiny(4)).unwrap();
        for (_, c) in corpus.states[0].blocks.iter_mut() {
            *c = [40, 20, 20, 10, 10];
        }
        let o = corpus.oracle();
        let (names, p) = corpus.spec.states[0].surnames.conditional();
        let counts = [40.0, 20.0, 20.0, 10.0, 10.0];
        for (i, n) in names.iter().enumerate() {
            let joint: Vec<f64> = (0..NUM_RACES).map(|r| counts[r] * p[i][r]).collect();
            let z: f64 = joint.iter().sum();
            for (_, (b, _)) in corpus.states[0]
                .blocks
                .iter()
                .enumerate()
                .map(|(i, x)| (i, x))
            {
                let post = o.posterior("MC", n, b, None, None).unwrap();
                for r in 0..NUM_RACES {
                    assert!((post[r] - joint[r] / z).abs() < 1e-14);
                }
            }
        }
    }

    fn within_race_correlation(corpus: &SynthCorpus, s: usize) -> f64 {
        let (names, _) = corpus.spec.states[s].surnames.expand();
        let index: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let block_index: HashMap<&str, usize> = corpus.states[s]
            .blocks
            .iter()
            .enumerate()
            .map(|(i, (b, _))| (b.as_str(), i))
            .collect();
        let mut by_race: Vec<Vec<(f64, f64)>> = vec![Vec::new(); NUM_RACES];
        for rec in &corpus.states[s].dataset.records {
            let x = surname_phase(index[rec.surname.as_str()]);
            let y = block_phase(block_index[rec.block_id.as_str()]);
            by_race[rec.label_index().unwrap()].push((x, y));
        }
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for pts in by_race.iter().filter(|p| !p.is_empty()) {
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            for (x, y) in pts {
                sxy += (x - mx) * (y - my);
                sxx += (x - mx).powi(2);
                syy += (y - my).powi(2);
            }
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn knob_zero_has_no_surname_block_correlation() {
        let mut spec = GenerativeSpec::default_four_state(11);
        spec.states.truncate(1);
        let corpus = generate(&spec).unwrap();
        assert_eq!(corpus.states[0].dataset.len(), 100_000);
        let r = within_race_correlation(&corpus, 0);
        assert!(r.abs() < 0.02, "correlation {r}");
        spec.knob = 2.0;
        spec.states[0].records = 20_000;
        let coupled = generate(&spec).unwrap();
        assert!(within_race_correlation(&coupled, 0) > 0.1);
    }

    #[test]
    fn written_files_parse_back() {
        let corpus = generate(&tiny(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = corpus.write(dir.path()).unwrap();
        assert_eq!(files.len(), 7);
        let parsed = crate::ingest::parse_person_file(
            &dir.path().join("persons_MC.csv"),
            &crate::ingest::ColumnMapping::default(),
        )
        .unwrap();
        assert!(parsed.malformed.is_empty());
        assert_eq!(parsed.dataset, corpus.states[0].dataset);
        let geo = crate::tables::build_geo_table(&dir.path().join("blocks_MC.csv")).unwrap();
        assert_eq!(geo.len(), 4);
        let s = crate::tables::build_surname_table(&dir.path().join("surnames_MC.csv")).unwrap();
        assert_eq!(s.len(), 10);
        let spec: GenerativeSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("spec.json")).unwrap())
                .unwrap();
        assert_eq!(spec, corpus.spec);
    }
}
