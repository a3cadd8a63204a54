//! Bayesian Improved Surname Geocoding.
//!
//! BISG multiplies the geography likelihood P(block | race) into the surname
//! prior P(race | surname) and renormalizes over the five categories. The
//! extended form multiplies in further likelihoods, here P(first | race) and
//! P(middle | race), under conditional independence given race.
//!
//! A missing attribute (unknown block, empty given name, or a likelihood row
//! with no mass) drops its factor instead of zeroing the product, and the
//! corresponding fallback flag is set. When every category ends with zero
//! mass the posterior is uniform with all flags set.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, PersonRecord};
use crate::method::Method;
use crate::race::{argmax, RaceCategory, RaceVector, NUM_RACES};
use crate::tables::{GeoTable, NameGivenRaceTable, SurnameTable, TableRefs};

/// Which fallbacks were taken while scoring one record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FallbackFlags(u8);

impl FallbackFlags {
    pub const SURNAME_RESIDUAL: FallbackFlags = FallbackFlags(1);
    pub const GEO_MISSING: FallbackFlags = FallbackFlags(1 << 1);
    pub const FIRST_NAME_OOV: FallbackFlags = FallbackFlags(1 << 2);
    pub const MIDDLE_NAME_OOV: FallbackFlags = FallbackFlags(1 << 3);
    pub const ZERO_MASS: FallbackFlags = FallbackFlags(1 << 4);
    pub const ALL: FallbackFlags = FallbackFlags(0b1_1111);

    const NAMES: [(FallbackFlags, &'static str); 5] = [
        (Self::SURNAME_RESIDUAL, "surname_residual"),
        (Self::GEO_MISSING, "geo_missing"),
        (Self::FIRST_NAME_OOV, "first_name_oov"),
        (Self::MIDDLE_NAME_OOV, "middle_name_oov"),
        (Self::ZERO_MASS, "zero_mass"),
    ];

    pub fn empty() -> Self {
        FallbackFlags(0)
    }

    pub fn contains(self, other: FallbackFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: FallbackFlags) {
        self.0 |= other.0;
    }

    fn set_if(&mut self, cond: bool, other: FallbackFlags) {
        if cond {
            self.insert(other);
        }
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Self {
        FallbackFlags(bits & Self::ALL.0)
    }
}

impl fmt::Display for FallbackFlags {
    /// Pipe-separated flag names, empty when no fallback was taken.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (flag, name) in Self::NAMES {
            if self.contains(flag) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

/// A distribution over the five race categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDistribution {
    pub probs: RaceVector,
    pub source: Method,
    pub flags: FallbackFlags,
}

impl PosteriorDistribution {
    pub fn new(probs: RaceVector, source: Method) -> Self {
        PosteriorDistribution {
            probs,
            source,
            flags: FallbackFlags::empty(),
        }
    }

    /// Most probable category; ties go to the earliest category.
    pub fn argmax(&self) -> RaceCategory {
        RaceCategory::ALL[argmax(&self.probs)]
    }
}

/// A likelihood row that carries information, i.e. has some positive entry.
fn informative(v: Option<&RaceVector>) -> Option<&RaceVector> {
    v.filter(|v| v.iter().any(|x| *x > 0.0))
}

/// Multiply the present factors into the prior and normalize. Returns `None`
/// when the product has no mass.
fn combine(prior: &RaceVector, factors: &[Option<&RaceVector>]) -> Option<RaceVector> {
    let mut acc = *prior;
    for f in factors.iter().flatten() {
        for r in 0..NUM_RACES {
            acc[r] *= f[r];
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 && total.is_finite() {
        Some(acc.map(|x| x / total))
    } else {
        None
    }
}

fn finish(
    prior: &RaceVector,
    factors: &[Option<&RaceVector>],
    source: Method,
    mut flags: FallbackFlags,
) -> PosteriorDistribution {
    match combine(prior, factors) {
        Some(probs) => PosteriorDistribution {
            probs,
            source,
            flags,
        },
        None => {
            flags.insert(FallbackFlags::ALL);
            PosteriorDistribution {
                probs: [1.0 / NUM_RACES as f64; NUM_RACES],
                source,
                flags,
            }
        }
    }
}

/// P(race | surname, block) ∝ P(block | race) · P(race | surname).
pub fn bisg_posterior(
    p: &PersonRecord,
    surnames: &SurnameTable,
    geo: &GeoTable,
) -> PosteriorDistribution {
    let (prior, matched) = surnames.lookup(&p.surname);
    let geo = informative(geo.get(&p.block_id));
    let mut flags = FallbackFlags::empty();
    flags.set_if(!matched, FallbackFlags::SURNAME_RESIDUAL);
    flags.set_if(geo.is_none(), FallbackFlags::GEO_MISSING);
    finish(prior, &[geo], Method::Bisg, flags)
}

fn name_factor<'a>(table: &'a NameGivenRaceTable, name: &str) -> (Option<&'a RaceVector>, bool) {
    if name.is_empty() {
        return (None, true);
    }
    let (v, oov) = table.lookup(name);
    (informative(Some(v)), oov)
}

/// Extended posterior with first- and middle-name likelihoods:
/// P(race | s, g, first, middle) ∝ P(g | r) · P(first | r) · P(middle | r) · P(r | s).
///
/// With both given names empty this is bitwise identical to [`bisg_posterior`]
/// apart from the source tag.
pub fn extended_posterior(
    p: &PersonRecord,
    surnames: &SurnameTable,
    geo: &GeoTable,
    first: &NameGivenRaceTable,
    middle: &NameGivenRaceTable,
) -> PosteriorDistribution {
    let (prior, matched) = surnames.lookup(&p.surname);
    let geo = informative(geo.get(&p.block_id));
    let (first_f, first_oov) = name_factor(first, &p.first_name);
    let (middle_f, middle_oov) = name_factor(middle, &p.middle_name);
    let mut flags = FallbackFlags::empty();
    flags.set_if(!matched, FallbackFlags::SURNAME_RESIDUAL);
    flags.set_if(geo.is_none(), FallbackFlags::GEO_MISSING);
    flags.set_if(first_oov, FallbackFlags::FIRST_NAME_OOV);
    flags.set_if(middle_oov, FallbackFlags::MIDDLE_NAME_OOV);
    finish(prior, &[geo, first_f, middle_f], Method::Extended, flags)
}

/// Score one record with BISG or extended BISG.
pub fn posterior(
    p: &PersonRecord,
    method: Method,
    tables: &TableRefs<'_>,
) -> Result<PosteriorDistribution> {
    match method {
        Method::Bisg => Ok(bisg_posterior(p, tables.surnames, tables.geo)),
        Method::Extended => match (tables.first, tables.middle) {
            (Some(f), Some(m)) => Ok(extended_posterior(p, tables.surnames, tables.geo, f, m)),
            _ => Err(Error::Config(
                "extended BISG requires first- and middle-name tables".into(),
            )),
        },
        other => Err(Error::Config(format!("{other} is not a Bayesian method"))),
    }
}

/// Per-flag counts over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReport {
    pub records: usize,
    pub surname_residual: usize,
    pub geo_missing: usize,
    pub first_name_oov: usize,
    pub middle_name_oov: usize,
    pub zero_mass: usize,
}

impl BatchReport {
    pub fn add(&mut self, flags: FallbackFlags) {
        self.records += 1;
        let bump = |flag, counter: &mut usize| {
            if flags.contains(flag) {
                *counter += 1;
            }
        };
        bump(FallbackFlags::SURNAME_RESIDUAL, &mut self.surname_residual);
        bump(FallbackFlags::GEO_MISSING, &mut self.geo_missing);
        bump(FallbackFlags::FIRST_NAME_OOV, &mut self.first_name_oov);
        bump(FallbackFlags::MIDDLE_NAME_OOV, &mut self.middle_name_oov);
        bump(FallbackFlags::ZERO_MASS, &mut self.zero_mass);
    }

    pub fn merge(&mut self, other: &BatchReport) {
        self.records += other.records;
        self.surname_residual += other.surname_residual;
        self.geo_missing += other.geo_missing;
        self.first_name_oov += other.first_name_oov;
        self.middle_name_oov += other.middle_name_oov;
        self.zero_mass += other.zero_mass;
    }
}

impl fmt::Display for BatchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} records: surname_residual={} geo_missing={} first_name_oov={} middle_name_oov={} zero_mass={}",
            self.records,
            self.surname_residual,
            self.geo_missing,
            self.first_name_oov,
            self.middle_name_oov,
            self.zero_mass
        )
    }
}

/// Score every record, in input order.
pub fn predict_batch(
    d: &Dataset,
    method: Method,
    tables: &TableRefs<'_>,
) -> Result<(Vec<PosteriorDistribution>, BatchReport)> {
    if method == Method::Extended && !tables.supports(crate::tables::Layout::Extended) {
        return Err(Error::Config(
            "extended BISG requires first- and middle-name tables".into(),
        ));
    }
    let out = d
        .records
        .par_iter()
        .map(|p| posterior(p, method, tables))
        .collect::<Result<Vec<_>>>()?;
    let mut report = BatchReport::default();
    for p in &out {
        report.add(p.flags);
    }
    Ok((out, report))
}
