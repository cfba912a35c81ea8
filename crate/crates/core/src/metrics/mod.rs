//! Saliency evaluation: per-map scores, per-sample reports and aggregates.

pub mod report;
pub mod scores;

#[cfg(test)]
mod tests;

pub use report::{evaluate, Aggregate, EvalInput, MetricReport, MetricRow, OVERALL};
pub use scores::{
    auc_borji, auc_judd, borji_negatives, cc, kld, nss, roc_numerator, sim, to_distribution, Score, ScoreFlag,
    DEFAULT_BORJI_SPLITS, DISTRIBUTION_EPSILON,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Nss,
    Cc,
    Kld,
    Sim,
    AucBorji,
    AucJudd,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Nss,
        Metric::Cc,
        Metric::Kld,
        Metric::Sim,
        Metric::AucBorji,
        Metric::AucJudd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Nss => "nss",
            Metric::Cc => "cc",
            Metric::Kld => "kld",
            Metric::Sim => "sim",
            Metric::AucBorji => "auc_borji",
            Metric::AucJudd => "auc_judd",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }

    /// Scores one prediction against its ground truth. `borji_seed` seeds the
    /// negative sampling of AUC-Borji and is ignored by the other metrics.
    pub fn score(self, pred: &[f64], density: &[f64], fixations: &[f64], borji_splits: usize, borji_seed: u64) -> Result<Score> {
        match self {
            Metric::Nss => nss(pred, fixations),
            Metric::Cc => cc(pred, density),
            Metric::Kld => kld(pred, density),
            Metric::Sim => sim(pred, density),
            Metric::AucBorji => auc_borji(pred, fixations, borji_splits, borji_seed),
            Metric::AucJudd => auc_judd(pred, fixations),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::usage(format!("unknown metric `{s}`; valid metrics: {}", Self::valid_names())))
    }
}
