use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{config_hash, TOOL_VERSION};
use crate::error::{Error, Result};
use crate::filter::{AdamConfig, FilterCheckpoint, FilterNet, PathScorer, ScoreTable};
use crate::metrics::{full_space_scores, histogram, rank_summary, RankSummary, Scores};
use crate::oracle::{NoiseSchedule, SimState, SupernetSim, TabularOracle};
use crate::pu::{train_filter_round, LossParts, Objective, PuDatasets, RoundConfig, VpuConfig};
use crate::search::{sample_accepted, stream};
use crate::shrinkage::{agreement_on, label_weak_round, merge_similar_ops, MergeRecord, QSchedule, StoppingRule};
use crate::space::{Architecture, SearchSpace};

const TAG_SAMPLE: u64 = 0x5a_11;
const TAG_ROUND: u64 = 0x7e_a1;
const TAG_PROBE: u64 = 0x9b_0e;
const TAG_INIT: u64 = 0x1f_17;
const TAG_SIM: u64 = 0x3c_5d;

/// Largest space scored exhaustively after each retrain.
const TABLE_LIMIT: u64 = 1 << 20;

/// Greedy training schedule. Epoch-valued fields are in units of
/// `total_iterations / epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub epochs: f64,
    pub warmup_epochs: f64,
    pub interval_epochs: f64,
    /// Weak fraction over epochs since the start of training.
    pub q: QSchedule,
    /// Paths evaluated per labeling round.
    pub paths_per_round: usize,
    /// Unlabeled paths drawn per new positive.
    pub unlabeled_multiplier: usize,
    pub unlabeled_cap: usize,
    pub max_rejections: usize,
    pub threshold: f64,
    pub merge: bool,
    pub similarity_threshold: f64,
    pub stopping: StoppingRule,
    /// Only act on the stopping rule once the q ramp has finished.
    pub stop_after_ramp: bool,
    /// Good fraction of the ground-truth split used for per-round metrics.
    pub good_fraction: Option<f64>,
    pub hidden: usize,
    pub adam: AdamConfig,
    pub vpu: VpuConfig,
    pub noise: NoiseSchedule,
    /// Keep every accepted path in the run log.
    pub record_accepted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iterations: 24_000,
            epochs: 120.0,
            warmup_epochs: 20.0,
            interval_epochs: 5.0,
            q: QSchedule::default(),
            paths_per_round: 1000,
            unlabeled_multiplier: 10,
            unlabeled_cap: crate::pu::UNLABELED_CAP,
            max_rejections: 100,
            threshold: 0.5,
            merge: true,
            similarity_threshold: 0.8,
            stopping: StoppingRule::default(),
            stop_after_ramp: true,
            good_fraction: Some(0.1),
            hidden: 128,
            adam: AdamConfig::default(),
            vpu: VpuConfig::default(),
            noise: NoiseSchedule::default(),
            record_accepted: true,
        }
    }
}

impl TrainConfig {
    /// Small filter and short rounds that finish in a couple of minutes on
    /// one core for the 6561-path space.
    pub fn desk() -> Self {
        TrainConfig {
            total_iterations: 12_000,
            hidden: 16,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            vpu: VpuConfig {
                batch_size: 128,
                iterations: 150,
                ..VpuConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn epoch_len(&self) -> f64 {
        self.total_iterations as f64 / self.epochs
    }

    pub fn warmup_iterations(&self) -> u64 {
        ((self.warmup_epochs * self.epoch_len()).round() as u64).min(self.total_iterations)
    }

    pub fn interval_iterations(&self) -> u64 {
        ((self.interval_epochs * self.epoch_len()).round() as u64).max(1)
    }

    pub fn epoch_at(&self, iteration: u64) -> f64 {
        iteration as f64 / self.epoch_len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.total_iterations == 0 || !(self.epochs > 0.0) {
            return bad("total_iterations and epochs must be positive");
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs) {
            return bad("warm-up must lie within the run");
        }
        if !(self.interval_epochs > 0.0) {
            return bad("interval_epochs must be positive");
        }
        if self.paths_per_round < 2 {
            return bad("paths_per_round must be at least 2");
        }
        if self.max_rejections == 0 {
            return bad("max_rejections must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0,1)");
        }
        if !(self.similarity_threshold > -1.0 && self.similarity_threshold <= 1.0) {
            return bad("similarity_threshold must lie in (-1,1]");
        }
        if self.hidden == 0 || self.unlabeled_multiplier == 0 || self.unlabeled_cap == 0 {
            return bad("hidden, unlabeled_multiplier and unlabeled_cap must be positive");
        }
        if let Some(g) = self.good_fraction {
            if !(g > 0.0 && g < 1.0) {
                return bad("good_fraction must lie in (0,1)");
            }
        }
        self.q.validate()?;
        self.stopping.validate()?;
        self.vpu.validate()?;
        self.noise.validate()
    }
}

/// Summary of one filter round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub iteration: u64,
    pub epoch: f64,
    pub q: f64,
    pub sigma: f64,
    pub positives_added: usize,
    pub capped: bool,
    pub positives_total: usize,
    pub unlabeled_total: usize,
    pub loss_first: LossParts,
    pub loss_last: LossParts,
    pub merges: Vec<MergeRecord>,
    pub active_ops: usize,
    pub agreement: Option<f64>,
    pub stop: bool,
    pub scores: Option<Scores>,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Start {
        tool_version: String,
        config_hash: String,
        seed: u64,
        total_iterations: u64,
        warmup_iterations: u64,
        interval_iterations: u64,
    },
    Round(RoundSummary),
    Interval {
        start: u64,
        end: u64,
        filtered: bool,
        rejections: u64,
        fallbacks: u64,
        accepted: Vec<Architecture>,
    },
    Finish {
        iterations: u64,
        rounds: u32,
        stopped_early: bool,
        merged_ops: usize,
        space_size: String,
    },
}

/// Line-delimited JSON events of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub events: Vec<LogEvent>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(RunLog { events })
    }

    pub fn rounds(&self) -> impl Iterator<Item = &RoundSummary> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Round(r) => Some(r),
            _ => None,
        })
    }

    /// Accepted training paths, optionally only those drawn through the filter.
    pub fn accepted(&self, filtered_only: bool) -> Vec<&Architecture> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Interval {
                    filtered, accepted, ..
                } if *filtered || !filtered_only => Some(accepted),
                _ => None,
            })
            .flatten()
            .collect()
    }
}

/// Everything needed to continue a run from a round boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub iteration: u64,
    pub round: u32,
    pub filter: Option<FilterCheckpoint>,
    pub previous: Option<FilterCheckpoint>,
    pub data: PuDatasets,
    pub space: SearchSpace,
    pub sim: SimState,
    pub finished: bool,
    pub stopped_early: bool,
    pub log: RunLog,
}

const STATE_FORMAT: &str = "pathshrink-train-state";

impl TrainState {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s: TrainState = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.format != STATE_FORMAT {
            return Err(Error::Format(format!("unknown state format {:?}", s.format)));
        }
        Ok(s)
    }
}

/// Scores paths through a full-space table when the space is small enough.
enum Scorer {
    Table(ScoreTable),
    Net(FilterNet),
}

impl Scorer {
    fn build(net: &FilterNet, full: &SearchSpace) -> Result<Self> {
        Ok(match full.full_size_u64() {
            Some(n) if n <= TABLE_LIMIT => Scorer::Table(ScoreTable::build(net, full)?),
            _ => Scorer::Net(net.clone()),
        })
    }
}

impl PathScorer for Scorer {
    fn score(&self, batch: &[Architecture]) -> Result<Vec<f64>> {
        match self {
            Scorer::Table(t) => t.score(batch),
            Scorer::Net(n) => n.score(batch),
        }
    }
}

/// Resumable greedy training loop.
pub struct GreedyTrainer {
    state: TrainState,
    oracle: Arc<TabularOracle>,
    net: Option<(FilterNet, crate::filter::AdamState)>,
    scorer: Option<Scorer>,
    prev_scorer: Option<Scorer>,
}

impl GreedyTrainer {
    pub fn new(oracle: Arc<TabularOracle>, space: SearchSpace, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        check_space(&oracle, &space)?;
        let sim = SupernetSim::new(
            oracle.clone(),
            config.noise,
            crate::oracle::hash_ops(seed, TAG_SIM, &[]),
            config.total_iterations,
        )?;
        let log = RunLog {
            events: vec![LogEvent::Start {
                tool_version: TOOL_VERSION.into(),
                config_hash: config_hash(&config)?,
                seed,
                total_iterations: config.total_iterations,
                warmup_iterations: config.warmup_iterations(),
                interval_iterations: config.interval_iterations(),
            }],
        };
        let state = TrainState {
            format: STATE_FORMAT.into(),
            data: PuDatasets::new(config.unlabeled_cap),
            config,
            seed,
            iteration: 0,
            round: 0,
            filter: None,
            previous: None,
            space,
            sim: sim.state(),
            finished: false,
            stopped_early: false,
            log,
        };
        Self::from_state(oracle, state)
    }

    pub fn from_state(oracle: Arc<TabularOracle>, state: TrainState) -> Result<Self> {
        state.config.validate()?;
        check_space(&oracle, &state.space)?;
        let net = match &state.filter {
            Some(ck) => {
                let (net, adam) = ck.restore()?;
                let adam = adam.ok_or_else(|| Error::Format("filter checkpoint lacks optimizer state".into()))?;
                Some((net, adam))
            }
            None => None,
        };
        let scorer = net.as_ref().map(|(n, _)| Scorer::build(n, oracle.space())).transpose()?;
        let prev_scorer = match &state.previous {
            Some(ck) => Some(Scorer::build(&ck.restore()?.0, oracle.space())?),
            None => None,
        };
        Ok(GreedyTrainer {
            state,
            oracle,
            net,
            scorer,
            prev_scorer,
        })
    }

    /// Snapshot at the current boundary.
    pub fn state(&self) -> TrainState {
        let mut s = self.state.clone();
        s.filter = self.net.as_ref().map(|(n, a)| FilterCheckpoint::new(n, Some(a)));
        s
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    pub fn rounds_done(&self) -> u32 {
        self.state.round
    }

    pub fn net(&self) -> Option<&FilterNet> {
        self.net.as_ref().map(|(n, _)| n)
    }

    pub fn space(&self) -> &SearchSpace {
        &self.state.space
    }

    pub fn log(&self) -> &RunLog {
        &self.state.log
    }

    fn next_boundary(&self) -> u64 {
        let cfg = &self.state.config;
        let warm = cfg.warmup_iterations();
        if self.state.iteration < warm {
            warm
        } else {
            warm + self.state.round as u64 * cfg.interval_iterations()
        }
    }

    /// Runs up to the next round boundary: the pending filter round, if
    /// any, then the sampling interval that follows it.
    pub fn step(&mut self) -> Result<()> {
        if self.state.finished {
            return Ok(());
        }
        let total = self.state.config.total_iterations;
        if self.state.iteration >= self.state.config.warmup_iterations()
            && self.state.iteration == self.next_boundary()
            && self.state.iteration < total
            && self.filter_round()?
        {
            self.state.stopped_early = true;
            return self.finish();
        }
        let end = self.next_boundary().min(total);
        self.sample_interval(end)?;
        if self.state.iteration >= total {
            self.finish()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.state.finished {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            net: self.net.map(|(n, _)| n),
            space: self.state.space,
            log: self.state.log,
            stopped_early: self.state.stopped_early,
        }
    }

    fn sim(&self) -> Result<SupernetSim> {
        SupernetSim::from_state(self.oracle.clone(), self.state.sim)
    }

    fn sample_interval(&mut self, end: u64) -> Result<()> {
        let start = self.state.iteration;
        if end <= start {
            return Ok(());
        }
        let cfg = &self.state.config;
        // Warm-up uses index 0; the interval after round r uses r + 1.
        let idx = if self.net.is_some() { self.state.round as u64 } else { 0 };
        let mut rng = stream(self.state.seed, TAG_SAMPLE, idx);
        let mut sim = self.sim()?;
        let (mut rejections, mut fallbacks) = (0u64, 0u64);
        let mut accepted = Vec::new();
        for _ in start..end {
            let a = match &self.scorer {
                Some(s) => {
                    let acc = sample_accepted(&self.state.space, s, cfg.threshold, cfg.max_rejections, &mut rng)?;
                    rejections += acc.rejections as u64;
                    fallbacks += acc.fallback as u64;
                    acc.arch
                }
                None => self.state.space.sample_uniform(&mut rng),
            };
            debug_assert!(self.state.space.check(&a, true).is_ok());
            if cfg.record_accepted {
                accepted.push(a);
            }
            sim.advance(1);
        }
        self.state.sim = sim.state();
        self.state.iteration = end;
        self.state.log.events.push(LogEvent::Interval {
            start,
            end,
            filtered: self.scorer.is_some(),
            rejections,
            fallbacks,
            accepted,
        });
        Ok(())
    }

    /// Labels, retrains, merges and checks agreement. Returns the stop signal.
    fn filter_round(&mut self) -> Result<bool> {
        let cfg = self.state.config.clone();
        let round = self.state.round;
        let epoch = cfg.epoch_at(self.state.iteration);
        let q = cfg.q.value(epoch);
        let sim = self.sim()?;
        let mut rng = stream(self.state.seed, TAG_ROUND, round as u64);

        let labels = label_weak_round(&sim, &self.state.space, cfg.paths_per_round, q, (round as u64) << 32, &mut rng)?;
        if labels.capped() {
            log::info!("round {round}: weak count capped at {}", labels.positives);
        }
        for (a, _) in labels.weak() {
            self.state.data.add_positive(a.clone(), round);
        }
        for _ in 0..labels.positives * cfg.unlabeled_multiplier {
            let a = self.state.space.sample_uniform(&mut rng);
            self.state.data.add_unlabeled(a, round);
        }

        let (net, adam) = match &mut self.net {
            Some(pair) => pair,
            None => {
                let net = FilterNet::for_space(
                    &self.state.space,
                    cfg.hidden,
                    crate::oracle::hash_ops(self.state.seed, TAG_INIT, &[]),
                )?;
                let adam = net.new_adam(cfg.adam);
                self.net.insert((net, adam))
            }
        };
        let trace = train_filter_round(
            net,
            adam,
            &self.state.data,
            &RoundConfig {
                objective: Objective::vpu(&cfg.vpu),
                batch_size: cfg.vpu.batch_size,
                iterations: cfg.vpu.iterations,
            },
            &mut rng,
        )?;
        let scorer = Scorer::build(net, self.oracle.space())?;

        let merges = if cfg.merge {
            merge_similar_ops(&mut self.state.space, net, cfg.similarity_threshold, round)?
        } else {
            Vec::new()
        };

        let agreement = match &self.prev_scorer {
            Some(prev) => {
                let mut prng = stream(self.state.seed, TAG_PROBE, round as u64);
                let probes: Vec<Architecture> = (0..cfg.stopping.probes)
                    .map(|_| self.state.space.sample_uniform(&mut prng))
                    .collect();
                Some(agreement_on(&scorer, prev, &probes, cfg.threshold)?)
            }
            None => None,
        };
        let stop = agreement.is_some_and(|u| cfg.stopping.fires(u))
            && (!cfg.stop_after_ramp || cfg.q.ramp_done(epoch));

        let scores = match cfg.good_fraction {
            Some(g) if self.oracle.is_materialized() => {
                Some(full_space_scores(&scorer, &self.oracle, g, cfg.threshold)?)
            }
            _ => None,
        };

        self.state.log.events.push(LogEvent::Round(RoundSummary {
            round,
            iteration: self.state.iteration,
            epoch,
            q,
            sigma: sim.sigma(),
            positives_added: labels.positives,
            capped: labels.capped(),
            positives_total: self.state.data.positives.len(),
            unlabeled_total: self.state.data.unlabeled.len(),
            loss_first: trace.rows.first().copied().unwrap_or_default(),
            loss_last: trace.rows.last().copied().unwrap_or_default(),
            merges,
            active_ops: (0..self.state.space.num_layers())
                .map(|l| self.state.space.active_ops(l).len())
                .sum(),
            agreement,
            stop,
            scores,
        }));

        self.state.previous = Some(FilterCheckpoint::new(net, None));
        self.prev_scorer = Some(Scorer::build(net, self.oracle.space())?);
        self.scorer = Some(scorer);
        self.state.round += 1;
        Ok(stop)
    }

    fn finish(&mut self) -> Result<()> {
        self.state.finished = true;
        self.state.log.events.push(LogEvent::Finish {
            iterations: self.state.iteration,
            rounds: self.state.round,
            stopped_early: self.state.stopped_early,
            merged_ops: self.state.space.merged_count(),
            space_size: self.state.space.space_size().to_string(),
        });
        Ok(())
    }
}

fn check_space(oracle: &TabularOracle, space: &SearchSpace) -> Result<()> {
    let full = oracle.space();
    let same = full.num_layers() == space.num_layers()
        && (0..full.num_layers()).all(|l| full.num_ops(l) == space.num_ops(l));
    if !same {
        return Err(Error::InvalidSpace("search space does not match the benchmark".into()));
    }
    Ok(())
}

/// Result of a complete greedy run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Option<FilterNet>,
    pub space: SearchSpace,
    pub log: RunLog,
    pub stopped_early: bool,
}

/// Runs greedy training to completion from a fresh state.
pub fn run_greedy_training(
    oracle: Arc<TabularOracle>,
    space: SearchSpace,
    config: TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut t = GreedyTrainer::new(oracle, space, config, seed)?;
    t.run()?;
    Ok(t.into_outcome())
}

/// Histogram of percentile ranks of accepted training paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub counts: Vec<u64>,
    pub summary: Option<RankSummary>,
}

pub fn report_percentile_histogram(
    log: &RunLog,
    oracle: &TabularOracle,
    bins: usize,
    filtered_only: bool,
) -> Result<HistogramReport> {
    let ranks = log
        .accepted(filtered_only)
        .into_iter()
        .map(|a| oracle.percentile_rank(a))
        .collect::<Result<Vec<_>>>()?;
    Ok(HistogramReport {
        counts: histogram(&ranks, bins),
        summary: rank_summary(&ranks),
    })
}
