use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{AdamConfig, FilterNet, ScoreTable};
use crate::metrics::{full_space_scores, Scores};
use crate::oracle::TabularOracle;
use crate::pu::{train_filter_round, LossParts, Objective, PuDatasets, RoundConfig};
use crate::search::stream;

const TAG_DATA: u64 = 0xda_7a;
const TAG_TRAIN: u64 = 0x7a_17;

/// Offline filter training on a labeled fraction of a materialized benchmark.
///
/// A random `data_fraction` of the space is labeled against the ground-truth
/// split, a `flip_rate` share of those labels is inverted, and the filter is
/// trained once. PU objectives see the labeled-weak paths as positives plus
/// uniform unlabeled draws; PN sees labeled-weak and labeled-good paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FractionProtocol {
    pub good_fraction: f64,
    pub data_fraction: f64,
    pub flip_rate: f64,
    pub unlabeled_multiplier: usize,
    pub hidden: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub threshold: f64,
}

impl Default for FractionProtocol {
    fn default() -> Self {
        FractionProtocol {
            good_fraction: 0.1,
            data_fraction: 0.1,
            flip_rate: 0.0,
            unlabeled_multiplier: 10,
            hidden: 16,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            batch_size: 128,
            iterations: 400,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    pub scores: Scores,
    pub net: FilterNet,
    pub last_loss: LossParts,
    pub positives: usize,
}

pub fn train_on_labeled_fraction(
    oracle: &TabularOracle,
    objective: &Objective,
    proto: &FractionProtocol,
    seed: u64,
) -> Result<ProtocolResult> {
    if !(proto.data_fraction > 0.0 && proto.data_fraction <= 1.0) || !(0.0..=1.0).contains(&proto.flip_rate) {
        return Err(Error::Config(format!("invalid protocol {proto:?}")));
    }
    let split = oracle.ground_truth(proto.good_fraction)?;
    let space = oracle.space();
    let n = split.weak.len();
    let n_labeled = ((proto.data_fraction * n as f64).round() as usize).clamp(2, n);

    let mut rng = stream(seed, TAG_DATA, 0);
    let picked = sample(&mut rng, n, n_labeled).into_vec();
    let mut labels: Vec<bool> = picked.iter().map(|&r| split.weak[r]).collect();
    let n_flip = (proto.flip_rate * n_labeled as f64).round() as usize;
    for i in sample(&mut rng, n_labeled, n_flip) {
        labels[i] = !labels[i];
    }

    let mut data = PuDatasets::new(usize::MAX);
    let mut negatives = Vec::new();
    for (&r, &weak) in picked.iter().zip(&labels) {
        let a = space.unrank_u64(r as u64)?;
        if weak {
            data.add_positive(a, 0);
        } else {
            negatives.push(a);
        }
    }
    for _ in 0..data.positives.len() * proto.unlabeled_multiplier {
        data.add_unlabeled(space.sample_uniform(&mut rng), 0);
    }
    data.negatives = Some(negatives);

    let mut net = FilterNet::for_space(space, proto.hidden, seed)?;
    let mut adam = net.new_adam(proto.adam);
    let mut train_rng = stream(seed, TAG_TRAIN, 0);
    let trace = train_filter_round(
        &mut net,
        &mut adam,
        &data,
        &RoundConfig {
            objective: objective.clone(),
            batch_size: proto.batch_size,
            iterations: proto.iterations,
        },
        &mut train_rng,
    )?;
    let table = ScoreTable::build(&net, space)?;
    Ok(ProtocolResult {
        scores: full_space_scores(&table, oracle, proto.good_fraction, proto.threshold)?,
        net,
        last_loss: trace.rows.last().copied().unwrap_or_default(),
        positives: data.positives.len(),
    })
}
