use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of race/ethnicity categories carried by every probability vector.
pub const NUM_RACES: usize = 5;

/// A probability (or score) vector indexed by [`RaceCategory::index`].
pub type RaceVector = [f64; NUM_RACES];

/// Self-reported race/ethnicity.
///
/// The five analysis categories are ordered White, Black, Hispanic, Asian,
/// Other; that order indexes every [`RaceVector`] in the crate. `Unknown` is an
/// ingestion-only sentinel and is removed by
/// [`filter_for_analysis`](crate::ingest::filter_for_analysis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaceCategory {
    White,
    Black,
    Hispanic,
    Asian,
    Other,
    Unknown,
}

impl RaceCategory {
    /// The analysis categories in vector order.
    pub const ALL: [RaceCategory; NUM_RACES] = [
        RaceCategory::White,
        RaceCategory::Black,
        RaceCategory::Hispanic,
        RaceCategory::Asian,
        RaceCategory::Other,
    ];

    /// Position in a [`RaceVector`]; `None` for `Unknown`.
    pub fn index(self) -> Option<usize> {
        match self {
            RaceCategory::White => Some(0),
            RaceCategory::Black => Some(1),
            RaceCategory::Hispanic => Some(2),
            RaceCategory::Asian => Some(3),
            RaceCategory::Other => Some(4),
            RaceCategory::Unknown => None,
        }
    }

    pub fn from_index(i: usize) -> Option<RaceCategory> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RaceCategory::White => "white",
            RaceCategory::Black => "black",
            RaceCategory::Hispanic => "hispanic",
            RaceCategory::Asian => "asian",
            RaceCategory::Other => "other",
            RaceCategory::Unknown => "unknown",
        }
    }
}

impl fmt::Display for RaceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RaceCategory {
    type Err = String;

    /// Accepts full names and the one-letter voter-file codes, case-insensitive.
    /// Blank cells and explicit missing markers map to `Unknown`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        Ok(match t.as_str() {
            "white" | "w" | "nh_white" => RaceCategory::White,
            "black" | "b" | "nh_black" => RaceCategory::Black,
            "hispanic" | "h" | "latino" => RaceCategory::Hispanic,
            "asian" | "a" | "api" => RaceCategory::Asian,
            "other" | "o" => RaceCategory::Other,
            "unknown" | "u" | "" | "na" | "missing" => RaceCategory::Unknown,
            _ => return Err(format!("unrecognized race label {s:?}")),
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &RaceVector) -> usize {
    let mut best = 0;
    for i in 1..NUM_RACES {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
