//! Classification metrics of the filter. The positive class is weak.
//!
//! Ratios with a zero denominator are `None` (serialized as null).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::PathScorer;
use crate::oracle::TabularOracle;
use crate::space::Architecture;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_labels(predicted: &[bool], truth: &[bool]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
        }
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Precision, recall and F1 with their confusion counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub confusion: Confusion,
}

impl From<Confusion> for Scores {
    fn from(c: Confusion) -> Self {
        Scores {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            confusion: c,
        }
    }
}

/// Scores `scorer` on every architecture of the oracle's space against the
/// ground-truth split with good fraction `good_fraction`.
pub fn full_space_scores<S: PathScorer + ?Sized>(
    scorer: &S,
    oracle: &TabularOracle,
    good_fraction: f64,
    threshold: f64,
) -> Result<Scores> {
    let split = oracle.ground_truth(good_fraction)?;
    let all = oracle.space().enumerate()?;
    let phi = scorer.score(&all)?;
    let predicted: Vec<bool> = phi.iter().map(|&p| p > threshold).collect();
    Ok(Confusion::from_labels(&predicted, &split.weak)?.into())
}

/// Mean and median of percentile ranks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

pub fn rank_summary(ranks: &[f64]) -> Option<RankSummary> {
    if ranks.is_empty() {
        return None;
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Some(RankSummary {
        count: n,
        mean: ranks.iter().sum::<f64>() / n as f64,
        median,
    })
}

/// Percentile ranks of `paths` under the oracle (0 is best).
pub fn percentile_ranks(oracle: &TabularOracle, paths: &[Architecture]) -> Result<Vec<f64>> {
    paths.iter().map(|a| oracle.percentile_rank(a)).collect()
}

/// Counts of values in `[0,1]` over `bins` equal buckets; 1.0 lands in the last.
pub fn histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins.max(1)];
    let b = counts.len();
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * b as f64) as usize).min(b - 1);
        counts[i] += 1;
    }
    counts
}

pub fn histogram_csv(counts: &[u64]) -> String {
    let b = counts.len();
    let total: u64 = counts.iter().sum();
    let mut out = String::from("bin_start,bin_end,count,fraction\n");
    for (i, &c) in counts.iter().enumerate() {
        let frac = if total > 0 { c as f64 / total as f64 } else { 0.0 };
        out.push_str(&format!("{},{},{},{}\n", i as f64 / b as f64, (i + 1) as f64 / b as f64, c, frac));
    }
    out
}
