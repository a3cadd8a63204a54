use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Every way the crate can produce a race posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Surname and block via Bayes' rule.
    Bisg,
    /// Bayes' rule with first- and middle-name likelihoods added.
    Extended,
    /// Multinomial logistic regression.
    Mlr,
    /// Elastic-net penalized multinomial logistic regression.
    Elnet,
    /// Single classification tree.
    Tree,
    /// Random forest.
    Forest,
    /// Gradient-boosted trees.
    Gbm,
    /// Exact posterior of a synthetic generative process.
    Oracle,
}

impl Method {
    pub const SUPERVISED: [Method; 5] = [
        Method::Mlr,
        Method::Elnet,
        Method::Tree,
        Method::Forest,
        Method::Gbm,
    ];

    pub fn is_supervised(self) -> bool {
        Self::SUPERVISED.contains(&self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bisg => "bisg",
            Method::Extended => "extended",
            Method::Mlr => "mlr",
            Method::Elnet => "elnet",
            Method::Tree => "tree",
            Method::Forest => "forest",
            Method::Gbm => "gbm",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "bisg" => Method::Bisg,
            "extended" | "bisg_extended" => Method::Extended,
            "mlr" | "logit" => Method::Mlr,
            "elnet" | "elasticnet" => Method::Elnet,
            "tree" => Method::Tree,
            "forest" | "rf" => Method::Forest,
            "gbm" | "gb" => Method::Gbm,
            "oracle" => Method::Oracle,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}
