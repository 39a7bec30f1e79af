//! Greedy supernet training with a path filter, and filter-assisted
//! evolutionary search.

mod evo;
mod greedy;
mod protocol;

pub use evo::{dominates, non_dominated_sort, nsga2_search, EvoConfig, EvoResult, Individual};
pub use greedy::{
    report_percentile_histogram, run_greedy_training, GreedyTrainer, HistogramReport, LogEvent,
    RoundSummary, RunLog, TrainConfig, TrainOutcome, TrainState,
};
pub use protocol::{train_on_labeled_fraction, FractionProtocol, ProtocolResult};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::filter::PathScorer;
use crate::oracle::hash_ops;
use crate::space::{Architecture, SearchSpace};

/// Independent RNG stream for `(seed, tag, index)`.
pub(crate) fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_ops(seed, tag, &[index as usize]))
}

/// A path drawn by rejection sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accepted {
    pub arch: Architecture,
    pub rejections: usize,
    /// True when every draw was rejected and the least-weak one was returned.
    pub fallback: bool,
}

/// Draws uniform paths until one is not weak. After `max_rejections` weak
/// draws, returns the draw with the lowest score.
pub fn sample_accepted<S, R>(
    space: &SearchSpace,
    scorer: &S,
    threshold: f64,
    max_rejections: usize,
    rng: &mut R,
) -> Result<Accepted>
where
    S: PathScorer + ?Sized,
    R: Rng + ?Sized,
{
    let mut best: Option<(f64, Architecture)> = None;
    for rejections in 0..max_rejections.max(1) {
        let a = space.sample_uniform(rng);
        let phi = scorer.score_one(&a)?;
        if phi <= threshold {
            return Ok(Accepted {
                arch: a,
                rejections,
                fallback: false,
            });
        }
        if best.as_ref().is_none_or(|(b, _)| phi < *b) {
            best = Some((phi, a));
        }
    }
    Ok(Accepted {
        arch: best.unwrap().1,
        rejections: max_rejections.max(1),
        fallback: true,
    })
}
