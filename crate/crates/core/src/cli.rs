//! Command-line interface. Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::confidence::{confidence_curve, confidence_good, confidence_weak, curve_csv, ConfidenceQuery};
use crate::config::{csv_stamp, preset, RunConfig, Stamped};
use crate::error::{Error, Result};
use crate::filter::{FilterCheckpoint, FilterNet, ScoreTable};
use crate::metrics::{full_space_scores, histogram_csv, RankSummary, Scores};
use crate::oracle::{hash_ops, DuplicatePair, GeneratorParams, SupernetSim, TabularOracle};
use crate::pu::Objective;
use crate::search::{
    nsga2_search, report_percentile_histogram, train_on_labeled_fraction, EvoResult, GreedyTrainer, Individual,
    RunLog, TrainState,
};
use crate::shrinkage::merge_log_csv;
use crate::space::SearchSpace;

pub const STATE_FILE: &str = "state.json";
pub const FILTER_FILE: &str = "filter.json";
pub const SPACE_FILE: &str = "space.json";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const MERGES_FILE: &str = "merges.csv";
pub const RESULTS_FILE: &str = "results.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const CONFIDENCE_FILE: &str = "confidence.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

const TAG_SEARCH_SIM: u64 = 0x5e_a5;

#[derive(Debug, Parser)]
#[command(name = "pathshrink", version, about = "Search-space shrinkage with a learned path filter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic benchmark.
    GenBenchmark(GenArgs),
    /// Convert a NAS-Bench-Macro style JSON into a benchmark file.
    ImportBenchmark(ImportArgs),
    /// Greedy supernet training with the path filter.
    Train(TrainArgs),
    /// NSGA-II search, optionally filtered.
    Search(SearchArgs),
    /// Metrics and plot data from a finished run.
    Report(ReportArgs),
    /// Binomial-tail confidence of multi-path sampling.
    Confidence(ConfidenceArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Space preset (nas-bench-macro, mb-se) or a TOML/JSON space file.
    #[arg(long, default_value = "nas-bench-macro")]
    pub space: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub interaction: f64,
    /// In every layer, make the last op a duplicate of the one before it.
    #[arg(long)]
    pub duplicate_ops: bool,
    /// Explicit duplicate as LAYER:SOURCE:COPY; repeatable.
    #[arg(long = "duplicate", value_name = "LAYER:SOURCE:COPY")]
    pub duplicates: Vec<String>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long, default_value = "nas-bench-macro")]
    pub space: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.vpu.iterations=300.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides output_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Validate the configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Continue from the state file in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many filter rounds in this invocation.
    #[arg(long)]
    pub max_rounds: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Search without the path filter.
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub cost_limit: Option<f64>,
    /// Filter checkpoint; defaults to the one in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Confidence curve sample size.
    #[arg(long, default_value_t = 10)]
    pub m: u64,
    /// Confidence curve threshold count.
    #[arg(long, default_value_t = 5)]
    pub k: u64,
    #[arg(long, default_value_t = 101)]
    pub points: usize,
    /// Also train VPU, uPU and PN filters offline and tabulate them.
    #[arg(long)]
    pub compare_baselines: bool,
}

#[derive(Debug, Args)]
pub struct ConfidenceArgs {
    #[arg(long)]
    pub m: u64,
    #[arg(long)]
    pub k: u64,
    /// Good-path prior; required unless --curve is given.
    #[arg(long)]
    pub p: Option<f64>,
    /// Confidence of drawing at least k weak paths instead of good ones.
    #[arg(long)]
    pub weak: bool,
    /// Print a CSV curve over this many priors instead of one value.
    #[arg(long)]
    pub curve: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenBenchmark(a) => cmd_gen_benchmark(&a),
        Command::ImportBenchmark(a) => cmd_import_benchmark(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Search(a) => cmd_search(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a).map(|_| ()),
        Command::Confidence(a) => cmd_confidence(&a),
    }
}

fn load_space(spec: &str) -> Result<SearchSpace> {
    let path = Path::new(spec);
    if path.exists() {
        SearchSpace::load(path)
    } else {
        preset(spec)
    }
}

fn parse_duplicate(s: &str) -> Result<DuplicatePair> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad duplicate {s:?}, expected LAYER:SOURCE:COPY")))?;
    match nums.as_slice() {
        [layer, source, copy] => Ok(DuplicatePair {
            layer: *layer,
            source: *source,
            copy: *copy,
        }),
        _ => Err(Error::Config(format!("bad duplicate {s:?}, expected LAYER:SOURCE:COPY"))),
    }
}

fn print_quality_summary(oracle: &TabularOracle) {
    println!("space size: {}", oracle.space().space_size());
    if let Some(t) = oracle.table() {
        let min = t.iter().copied().fold(f64::INFINITY, f64::min);
        let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        println!("quality: min {min:.6} mean {mean:.6} max {max:.6}");
    }
}

pub fn cmd_gen_benchmark(args: &GenArgs) -> Result<()> {
    let space = load_space(&args.space)?;
    let mut duplicates: Vec<DuplicatePair> = args.duplicates.iter().map(|d| parse_duplicate(d)).collect::<Result<_>>()?;
    if args.duplicate_ops {
        for layer in 0..space.num_layers() {
            let n = space.num_ops(layer);
            if n >= 2 {
                duplicates.push(DuplicatePair {
                    layer,
                    source: n - 2,
                    copy: n - 1,
                });
            }
        }
    }
    let params = GeneratorParams {
        seed: args.seed,
        interaction: args.interaction,
        duplicates,
    };
    let oracle = TabularOracle::generate(&space, params.clone())?;
    let hash = crate::config::config_hash(&(space.to_def(), &params))?;
    oracle.save_stamped(&args.output, Some(&hash))?;
    print_quality_summary(&oracle);
    println!("wrote {}", args.output.display());
    Ok(())
}

pub fn cmd_import_benchmark(args: &ImportArgs) -> Result<()> {
    let space = load_space(&args.space)?;
    let text = fs::read_to_string(&args.input)?;
    let oracle = TabularOracle::import_macro_json(&space, &text)?;
    let hash = crate::config::config_hash(&(space.to_def(), args.input.display().to_string()))?;
    oracle.save_stamped(&args.output, Some(&hash))?;
    print_quality_summary(&oracle);
    println!("wrote {}", args.output.display());
    Ok(())
}

/// Hash of the parts of a config that affect results (not the output location).
pub fn semantic_hash(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    c.hash()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_oracle(cfg: &RunConfig) -> Result<(SearchSpace, Arc<TabularOracle>)> {
    let space = cfg.space.load()?;
    let oracle = cfg.benchmark.load(&space)?;
    Ok((space, Arc::new(oracle)))
}

/// Outcome summary of `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub finished: bool,
    pub rounds: u32,
    pub output_dir: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let cfg = args.config.resolve()?;
    if args.dry_run {
        println!("configuration ok ({})", semantic_hash(&cfg)?);
        return Ok(TrainReport {
            finished: false,
            rounds: 0,
            output_dir: cfg.output_dir,
        });
    }
    let hash = semantic_hash(&cfg)?;
    let (space, oracle) = load_oracle(&cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let state_path = out.join(STATE_FILE);

    let mut trainer = if args.resume && state_path.exists() {
        let stamped: Stamped<TrainState> = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
        if stamped.config_hash != hash {
            return Err(Error::Config("state file was written with a different configuration".into()));
        }
        GreedyTrainer::from_state(oracle.clone(), stamped.body)?
    } else {
        GreedyTrainer::new(oracle.clone(), space, cfg.train.clone(), cfg.seed)?
    };

    let start_rounds = trainer.rounds_done();
    while !trainer.is_finished() {
        if args.max_rounds.is_some_and(|m| trainer.rounds_done() - start_rounds >= m) {
            break;
        }
        trainer.step()?;
        write_json(&state_path, &Stamped::new(trainer.state(), &hash))?;
        log::info!("iteration {} rounds {}", trainer.state().iteration, trainer.rounds_done());
    }

    let finished = trainer.is_finished();
    if finished {
        let state = trainer.state();
        if let Some(ck) = &state.filter {
            write_json(&out.join(FILTER_FILE), &Stamped::new(ck, &hash))?;
        }
        write_json(&out.join(SPACE_FILE), &Stamped::new(&state.space, &hash))?;
        let merges: Vec<_> = state.log.rounds().flat_map(|r| r.merges.clone()).collect();
        fs::write(out.join(MERGES_FILE), csv_stamp(&hash) + &merge_log_csv(&merges))?;
        fs::write(out.join(RUNLOG_FILE), state.log.to_jsonl()?)?;
        for r in state.log.rounds() {
            if let Some(s) = &r.scores {
                println!(
                    "round {:>3} q {:.3} precision {} recall {}",
                    r.round,
                    r.q,
                    fmt_opt(s.precision),
                    fmt_opt(s.recall)
                );
            }
        }
        println!("finished after {} rounds; merged ops: {}", state.round, state.space.merged_count());
    } else {
        println!("paused after {} rounds; resume with --resume", trainer.rounds_done());
    }
    Ok(TrainReport {
        finished,
        rounds: trainer.rounds_done(),
        output_dir: out.clone(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn load_filter(path: &Path) -> Result<FilterNet> {
    if !path.exists() {
        return Err(Error::Config(format!("filter checkpoint {} does not exist", path.display())));
    }
    Ok(FilterCheckpoint::load(path)?.restore()?.0)
}

/// Search results as written to `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub use_filter: bool,
    pub budget: usize,
    pub result: EvoResult,
    /// Highest evaluated quality on the front within the cost limit.
    pub best_under_constraint: Option<Individual>,
}

pub fn cmd_search(args: &SearchArgs) -> Result<SearchReport> {
    let mut cfg = args.config.resolve()?;
    if let Some(b) = args.budget {
        cfg.search.budget = b;
    }
    if args.cost_limit.is_some() {
        cfg.search.cost_limit = args.cost_limit;
    }
    if args.no_filter {
        cfg.search.use_filter = false;
    }
    cfg.validate()?;
    let hash = semantic_hash(&cfg)?;
    let (space, oracle) = load_oracle(&cfg)?;
    let out = &cfg.output_dir;
    let merged = out.join(SPACE_FILE);
    let space = if merged.exists() { SearchSpace::load(&merged)? } else { space };
    let net = if cfg.search.use_filter {
        let path = args.checkpoint.clone().unwrap_or_else(|| out.join(FILTER_FILE));
        Some(load_filter(&path)?)
    } else {
        None
    };
    let table = match &net {
        Some(n) if oracle.is_materialized() => Some(ScoreTable::build(n, oracle.space())?),
        _ => None,
    };
    let sim = SupernetSim::new(
        oracle.clone(),
        cfg.train.noise,
        hash_ops(cfg.seed, TAG_SEARCH_SIM, &[]),
        1,
    )?;
    let result = match (&table, &net) {
        (Some(t), _) => nsga2_search(&space, &sim, Some(t), &cfg.search, cfg.seed, |_, _| {})?,
        (None, Some(n)) => nsga2_search(&space, &sim, Some(n), &cfg.search, cfg.seed, |_, _| {})?,
        (None, None) => nsga2_search(&space, &sim, None::<&FilterNet>, &cfg.search, cfg.seed, |_, _| {})?,
    };
    let best_under_constraint = result
        .front
        .iter()
        .filter(|i| cfg.search.cost_limit.is_none_or(|l| i.cost <= l))
        .max_by(|a, b| a.quality.total_cmp(&b.quality))
        .cloned();
    let report = SearchReport {
        use_filter: cfg.search.use_filter,
        budget: cfg.search.budget,
        result,
        best_under_constraint,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join(RESULTS_FILE), &Stamped::new(&report, &hash))?;
    println!(
        "evaluations: {} / {}; front size {}",
        report.result.evaluations,
        report.budget,
        report.result.front.len()
    );
    if let Some(b) = &report.best_under_constraint {
        println!("best: {} quality {:.5} cost {}", b.arch, b.quality, b.cost);
    }
    Ok(report)
}

/// Per-round filter metrics from the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    pub iteration: u64,
    pub q: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub agreement: Option<f64>,
    pub merges: usize,
}

/// Filter metrics of a run. The positive class is weak.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub good_fraction: f64,
    pub threshold: f64,
    /// Final filter on every architecture of the benchmark.
    pub final_scores: Option<Scores>,
    /// Percentile ranks of paths accepted through the filter.
    pub accepted_filtered: Option<RankSummary>,
    /// Percentile ranks of all training paths, warm-up included.
    pub accepted_all: Option<RankSummary>,
    pub rounds: Vec<RoundTrace>,
    pub baselines: Option<Vec<BaselineRow>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub objective: String,
    pub scores: Scores,
}

pub fn cmd_report(args: &ReportArgs) -> Result<MetricsReport> {
    let cfg = args.config.resolve()?;
    let hash = semantic_hash(&cfg)?;
    let (_, oracle) = load_oracle(&cfg)?;
    let out = &cfg.output_dir;
    let log_path = out.join(RUNLOG_FILE);
    if !log_path.exists() {
        return Err(Error::Config(format!("run log {} does not exist", log_path.display())));
    }
    let log = RunLog::from_jsonl(&fs::read_to_string(&log_path)?)?;
    let good_fraction = cfg.train.good_fraction.unwrap_or(0.1);
    let threshold = cfg.train.threshold;

    let filter_path = out.join(FILTER_FILE);
    let final_scores = if filter_path.exists() && oracle.is_materialized() {
        let net = load_filter(&filter_path)?;
        Some(full_space_scores(&ScoreTable::build(&net, oracle.space())?, &oracle, good_fraction, threshold)?)
    } else {
        None
    };
    let filtered = report_percentile_histogram(&log, &oracle, args.bins, true)?;
    let all = report_percentile_histogram(&log, &oracle, args.bins, false)?;
    let rounds = log
        .rounds()
        .map(|r| RoundTrace {
            round: r.round,
            iteration: r.iteration,
            q: r.q,
            precision: r.scores.as_ref().and_then(|s| s.precision),
            recall: r.scores.as_ref().and_then(|s| s.recall),
            f1: r.scores.as_ref().and_then(|s| s.f1),
            agreement: r.agreement,
            merges: r.merges.len(),
        })
        .collect();

    let baselines = if args.compare_baselines {
        let mut rows = Vec::new();
        let prior = 1.0 - cfg.baselines.good_fraction;
        let objectives = [
            ("vpu", Objective::vpu(&cfg.train.vpu)),
            ("upu", Objective::Upu { prior }),
            ("pn", Objective::Pn { prior }),
        ];
        for (name, obj) in objectives {
            let r = train_on_labeled_fraction(&oracle, &obj, &cfg.baselines, cfg.seed)?;
            rows.push(BaselineRow {
                objective: name.into(),
                scores: r.scores,
            });
        }
        let mut csv = csv_stamp(&hash) + "objective,precision,recall,f1\n";
        for r in &rows {
            csv += &format!(
                "{},{},{},{}\n",
                r.objective,
                opt_csv(r.scores.precision),
                opt_csv(r.scores.recall),
                opt_csv(r.scores.f1)
            );
        }
        fs::write(out.join(COMPARISON_FILE), csv)?;
        Some(rows)
    } else {
        None
    };

    let report = MetricsReport {
        good_fraction,
        threshold,
        final_scores,
        accepted_filtered: filtered.summary,
        accepted_all: all.summary,
        rounds,
        baselines,
    };
    write_json(&out.join(METRICS_FILE), &Stamped::new(&report, &hash))?;
    let hist = if filtered.summary.is_some() { &filtered } else { &all };
    fs::write(out.join(HISTOGRAM_FILE), csv_stamp(&hash) + &histogram_csv(&hist.counts))?;
    let curve = confidence_curve(args.m, args.k, args.points)?;
    fs::write(out.join(CONFIDENCE_FILE), csv_stamp(&hash) + &curve_csv(&curve))?;
    if let Some(s) = &report.final_scores {
        println!(
            "final filter: precision {} recall {} f1 {}",
            fmt_opt(s.precision),
            fmt_opt(s.recall),
            fmt_opt(s.f1)
        );
    }
    if let Some(s) = &report.accepted_filtered {
        println!("accepted paths: mean percentile {:.4} (n = {})", s.mean, s.count);
    }
    Ok(report)
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn cmd_confidence(args: &ConfidenceArgs) -> Result<()> {
    if let Some(points) = args.curve {
        print!("{}", curve_csv(&confidence_curve(args.m, args.k, points)?));
        return Ok(());
    }
    let p = args
        .p
        .ok_or_else(|| Error::Config("--p is required without --curve".into()))?;
    let q = ConfidenceQuery::new(args.m, args.k, p)?;
    let v = if args.weak { confidence_weak(&q)? } else { confidence_good(&q)? };
    println!("{v:.6}");
    Ok(())
}
