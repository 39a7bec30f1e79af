//! Tabular ground truth and a noisy "supernet" evaluation view.
//!
//! Qualities come either from an imported table or from a seeded additive
//! utility model: per-(layer, op) utilities, interaction terms between
//! adjacent layers and a deterministic hash term, squashed into (0, 1).
//! [`SupernetSim`] perturbs `1 - quality` with Gaussian noise whose scale
//! decays with training progress.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{Architecture, SearchSpace, SpaceDef};

/// Spaces up to this many architectures get a materialized quality table.
pub const MATERIALIZE_LIMIT: u64 = 1 << 22;

/// Sample count for percentile estimates on spaces too large to materialize.
pub const PERCENTILE_SAMPLES: usize = 100_000;

const SCORE_GAIN: f64 = 1.5;
const HASH_AMPLITUDE: f64 = 0.5;

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a seed, a stream tag and an op vector.
pub(crate) fn hash_ops(seed: u64, tag: u64, ops: &[usize]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(tag));
    for &op in ops {
        h = splitmix64(h ^ op as u64);
    }
    h
}

/// Two ops of one layer that contribute identically to quality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub layer: usize,
    /// Op whose contribution is copied.
    pub source: usize,
    /// Op made identical to `source`.
    pub copy: usize,
}

/// Parameters that regenerate a synthetic benchmark exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub interaction: f64,
    #[serde(default)]
    pub duplicates: Vec<DuplicatePair>,
}

/// Seeded additive-utility quality model.
#[derive(Clone, Debug)]
pub struct UtilityModel {
    params: GeneratorParams,
    utilities: Vec<Vec<f64>>,
    /// `pairs[i][x][y]`: interaction of op `x` at layer `i` with op `y` at layer `i + 1`.
    pairs: Vec<Vec<Vec<f64>>>,
}

impl UtilityModel {
    pub fn generate(space: &SearchSpace, params: GeneratorParams) -> Result<Self> {
        if !(params.interaction >= 0.0) || !params.interaction.is_finite() {
            return Err(Error::Config(format!(
                "interaction strength {} must be finite and >= 0",
                params.interaction
            )));
        }
        for d in &params.duplicates {
            if d.layer >= space.num_layers()
                || d.source >= space.num_ops(d.layer)
                || d.copy >= space.num_ops(d.layer)
                || d.source == d.copy
            {
                return Err(Error::Config(format!("invalid duplicate pair {d:?}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let layers = space.num_layers();
        let util_scale = 1.0 / (layers as f64).sqrt();
        let utilities: Vec<Vec<f64>> = (0..layers)
            .map(|l| {
                (0..space.num_ops(l))
                    .map(|_| util_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let pair_scale = 1.0 / ((layers.max(2) - 1) as f64).sqrt();
        let pairs = (0..layers.saturating_sub(1))
            .map(|l| {
                (0..space.num_ops(l))
                    .map(|_| {
                        (0..space.num_ops(l + 1))
                            .map(|_| pair_scale * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut model = UtilityModel {
            params,
            utilities,
            pairs,
        };
        // Duplicates read through `canonical`; mirroring the tables keeps
        // `utility` honest for callers that inspect it.
        for d in model.params.duplicates.clone() {
            model.utilities[d.layer][d.copy] = model.utilities[d.layer][d.source];
        }
        Ok(model)
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn utility(&self, layer: usize, op: usize) -> f64 {
        self.utilities[layer][op]
    }

    fn canonical(&self, a: &Architecture) -> Vec<usize> {
        let mut ops = a.ops().to_vec();
        for d in &self.params.duplicates {
            if ops[d.layer] == d.copy {
                ops[d.layer] = d.source;
            }
        }
        ops
    }

    /// Sum of per-op utilities (the interaction-free part of the score).
    pub fn additive_score(&self, a: &Architecture) -> f64 {
        let ops = self.canonical(a);
        ops.iter()
            .enumerate()
            .map(|(l, &op)| self.utilities[l][op])
            .sum()
    }

    pub fn quality(&self, a: &Architecture) -> f64 {
        let ops = self.canonical(a);
        let mut score: f64 = ops
            .iter()
            .enumerate()
            .map(|(l, &op)| self.utilities[l][op])
            .sum();
        if self.params.interaction > 0.0 {
            let pair: f64 = ops
                .windows(2)
                .enumerate()
                .map(|(l, w)| self.pairs[l][w[0]][w[1]])
                .sum();
            let h = hash_ops(self.params.seed, 0x51_7e, &ops);
            let u = (h >> 11) as f64 / (1u64 << 53) as f64;
            let hashed = HASH_AMPLITUDE * (2.0 * u - 1.0) * 3f64.sqrt();
            score += self.params.interaction * (pair + hashed);
        }
        1.0 / (1.0 + (-SCORE_GAIN * score).exp())
    }
}

#[derive(Clone, Debug)]
enum Source {
    Generated(UtilityModel),
    Imported,
}

/// Ground-truth quality per architecture of the original (unmerged) space.
#[derive(Clone, Debug)]
pub struct TabularOracle {
    space: SearchSpace,
    source: Source,
    /// Qualities indexed by canonical rank, when materialized.
    table: Option<Vec<f64>>,
    /// `position[rank]`: 0 for the best architecture.
    position: Option<Vec<u32>>,
}

/// Good/weak labels of the full space; weak is the positive class.
#[derive(Clone, Debug)]
pub struct GroundTruthSplit {
    pub good_fraction: f64,
    /// `weak[rank]`.
    pub weak: Vec<bool>,
    pub good_count: usize,
}

impl GroundTruthSplit {
    pub fn is_weak(&self, rank: u64) -> bool {
        self.weak[rank as usize]
    }
}

impl TabularOracle {
    /// Builds a synthetic benchmark. The space is taken with all ops active.
    pub fn generate(space: &SearchSpace, params: GeneratorParams) -> Result<Self> {
        let space = SearchSpace::from_def(strip_masks(space.to_def()))?;
        let model = UtilityModel::generate(&space, params)?;
        let table = match space.full_size_u64() {
            Some(n) if n <= MATERIALIZE_LIMIT => Some(
                (0..n)
                    .map(|r| model.quality(&space.unrank_u64(r).unwrap()))
                    .collect::<Vec<_>>(),
            ),
            _ => None,
        };
        Ok(TabularOracle::assemble(space, Source::Generated(model), table))
    }

    /// Wraps an explicit table indexed by canonical rank.
    pub fn from_table(space: &SearchSpace, qualities: Vec<f64>) -> Result<Self> {
        let space = SearchSpace::from_def(strip_masks(space.to_def()))?;
        let n = space
            .full_size_u64()
            .ok_or_else(|| Error::Format("space too large for a table".into()))?;
        if qualities.len() as u64 != n {
            return Err(Error::Format(format!(
                "table has {} entries, space has {n}",
                qualities.len()
            )));
        }
        if let Some(q) = qualities.iter().find(|q| !q.is_finite()) {
            return Err(Error::Format(format!("non-finite quality {q}")));
        }
        Ok(TabularOracle::assemble(space, Source::Imported, Some(qualities)))
    }

    fn assemble(space: SearchSpace, source: Source, table: Option<Vec<f64>>) -> Self {
        let position = table.as_ref().map(|t| {
            let mut order: Vec<u32> = (0..t.len() as u32).collect();
            // Higher quality first; ties by lower rank.
            order.sort_by(|&a, &b| {
                t[b as usize]
                    .total_cmp(&t[a as usize])
                    .then_with(|| a.cmp(&b))
            });
            let mut pos = vec![0u32; t.len()];
            for (i, &r) in order.iter().enumerate() {
                pos[r as usize] = i as u32;
            }
            pos
        });
        TabularOracle {
            space,
            source,
            table,
            position,
        }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn generator(&self) -> Option<&GeneratorParams> {
        match &self.source {
            Source::Generated(m) => Some(m.params()),
            Source::Imported => None,
        }
    }

    pub fn model(&self) -> Option<&UtilityModel> {
        match &self.source {
            Source::Generated(m) => Some(m),
            Source::Imported => None,
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.table.is_some()
    }

    pub fn table(&self) -> Option<&[f64]> {
        self.table.as_deref()
    }

    pub fn len(&self) -> Option<u64> {
        self.table.as_ref().map(|t| t.len() as u64)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True quality of any architecture of the original space.
    pub fn quality(&self, a: &Architecture) -> Result<f64> {
        self.space.check(a, false)?;
        Ok(self.quality_unchecked(a))
    }

    fn quality_unchecked(&self, a: &Architecture) -> f64 {
        match (&self.table, &self.source) {
            (Some(t), _) => t[self.space.rank_u64(a).unwrap() as usize],
            (None, Source::Generated(m)) => m.quality(a),
            (None, Source::Imported) => unreachable!("imported oracles are always tabulated"),
        }
    }

    /// Best-first position among all architectures (0 = best).
    pub fn position(&self, a: &Architecture) -> Result<Option<u64>> {
        self.space.check(a, false)?;
        Ok(self
            .position
            .as_ref()
            .map(|p| u64::from(p[self.space.rank_u64(a).unwrap() as usize])))
    }

    /// Fraction of architectures strictly ahead of `a` (better quality, or
    /// equal quality with lower rank). 0 is the best architecture.
    pub fn percentile_rank(&self, a: &Architecture) -> Result<f64> {
        match (self.position(a)?, &self.table) {
            (Some(p), Some(t)) => Ok(p as f64 / t.len() as f64),
            _ => Ok(self.percentile_rank_estimate(a, PERCENTILE_SAMPLES, 0)?.0),
        }
    }

    /// Monte-Carlo percentile rank against `samples` uniform draws from the
    /// original space. Returns the estimate and its binomial standard error.
    pub fn percentile_rank_estimate(
        &self,
        a: &Architecture,
        samples: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        let qa = self.quality(a)?;
        let ra = self.space.rank(a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ahead = 0usize;
        for _ in 0..samples {
            let b = self.space.sample_uniform(&mut rng);
            let qb = self.quality_unchecked(&b);
            if qb > qa || (qb == qa && self.space.rank(&b) < ra) {
                ahead += 1;
            }
        }
        let p = ahead as f64 / samples as f64;
        Ok((p, (p * (1.0 - p) / samples as f64).sqrt()))
    }

    /// Top `ceil(g * n)` architectures are good, the rest weak.
    pub fn ground_truth(&self, good_fraction: f64) -> Result<GroundTruthSplit> {
        if !(good_fraction > 0.0 && good_fraction < 1.0) {
            return Err(Error::Config(format!(
                "good fraction {good_fraction} outside (0,1)"
            )));
        }
        let pos = self
            .position
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth("benchmark is not materialized".into()))?;
        let n = pos.len();
        let good_count = (good_fraction * n as f64).ceil() as usize;
        Ok(GroundTruthSplit {
            good_fraction,
            weak: pos.iter().map(|&p| p as usize >= good_count).collect(),
            good_count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_stamped(path, None)
    }

    /// Saves with the tool version and a config hash recorded in the file.
    pub fn save_stamped(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let file = BenchmarkFile {
            format: BENCHMARK_FORMAT.into(),
            version: 1,
            tool_version: config_hash.map(|_| crate::config::TOOL_VERSION.to_string()),
            config_hash: config_hash.map(str::to_string),
            space: self.space.to_def(),
            generator: self.generator().cloned(),
            qualities: self.table.clone().map(RankTable),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: BenchmarkFile = serde_json::from_str(&text)?;
        if file.format != BENCHMARK_FORMAT {
            return Err(Error::Format(format!("unknown format {:?}", file.format)));
        }
        let space = SearchSpace::from_def(file.space)?;
        match (file.qualities, file.generator) {
            (Some(RankTable(t)), Some(g)) => {
                let model = UtilityModel::generate(&space, g)?;
                let n = space.full_size_u64().unwrap_or(0);
                if t.len() as u64 != n {
                    return Err(Error::Format("table size does not match space".into()));
                }
                Ok(TabularOracle::assemble(space, Source::Generated(model), Some(t)))
            }
            (Some(RankTable(t)), None) => TabularOracle::from_table(&space, t),
            (None, Some(g)) => TabularOracle::generate(&space, g),
            (None, None) => Err(Error::Format(
                "benchmark has neither qualities nor generator".into(),
            )),
        }
    }

    /// Imports a NAS-Bench-Macro style JSON: keys are op-index strings with one
    /// digit per layer, values are accuracies (number, or an object with
    /// `mean_acc`/`acc`). Percent accuracies are scaled to [0,1].
    pub fn import_macro_json(space: &SearchSpace, text: &str) -> Result<Self> {
        let raw: HashMap<String, serde_json::Value> = serde_json::from_str(text)?;
        let n = space
            .full_size_u64()
            .ok_or_else(|| Error::Format("space too large to import".into()))?;
        let mut table = vec![f64::NAN; n as usize];
        for (key, value) in &raw {
            let ops: Vec<usize> = key
                .chars()
                .map(|c| {
                    c.to_digit(36)
                        .map(|d| d as usize)
                        .ok_or_else(|| Error::Format(format!("bad arch key {key:?}")))
                })
                .collect::<Result<_>>()?;
            let a = Architecture(ops);
            space.check(&a, false)?;
            let acc = match value {
                serde_json::Value::Number(x) => x.as_f64(),
                serde_json::Value::Object(o) => o
                    .get("mean_acc")
                    .or_else(|| o.get("acc"))
                    .and_then(|v| v.as_f64()),
                _ => None,
            }
            .ok_or_else(|| Error::Format(format!("no accuracy for {key:?}")))?;
            let q = if acc > 1.0 { acc / 100.0 } else { acc };
            table[space.rank_u64(&a).unwrap() as usize] = q;
        }
        if let Some(missing) = table.iter().position(|q| q.is_nan()) {
            return Err(Error::Format(format!(
                "architecture {} missing from import",
                space.unrank_u64(missing as u64)?
            )));
        }
        TabularOracle::from_table(space, table)
    }
}

fn strip_masks(mut def: SpaceDef) -> SpaceDef {
    for l in &mut def.layer {
        l.active = None;
    }
    def
}

const BENCHMARK_FORMAT: &str = "pathshrink-benchmark";

#[derive(Serialize, Deserialize)]
struct BenchmarkFile {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    space: SpaceDef,
    #[serde(default)]
    generator: Option<GeneratorParams>,
    #[serde(default)]
    qualities: Option<RankTable>,
}

/// Quality table serialized as a JSON object keyed by decimal rank, in rank order.
struct RankTable(Vec<f64>);

impl Serialize for RankTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (r, q) in self.0.iter().enumerate() {
            map.serialize_entry(&r.to_string(), q)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for RankTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw: HashMap<String, f64> = HashMap::deserialize(d)?;
        let mut t = vec![f64::NAN; raw.len()];
        for (k, v) in raw {
            let r: usize = k
                .parse()
                .map_err(|_| D::Error::custom(format!("bad rank key {k:?}")))?;
            if r >= t.len() {
                return Err(D::Error::custom(format!("rank {r} out of range")));
            }
            t[r] = v;
        }
        Ok(RankTable(t))
    }
}

/// Evaluation-noise scale as a function of training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_start: f64,
    pub sigma_end: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_start: 0.1,
            sigma_end: 0.01,
        }
    }
}

impl NoiseSchedule {
    pub fn noiseless() -> Self {
        NoiseSchedule {
            sigma_start: 0.0,
            sigma_end: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_start >= 0.0 && self.sigma_end >= 0.0) || self.sigma_end > self.sigma_start
        {
            return Err(Error::Config(format!(
                "noise schedule must be nonnegative and nonincreasing: {self:?}"
            )));
        }
        Ok(())
    }

    /// Linear decay over progress `tau` in [0,1].
    pub fn sigma(&self, tau: f64) -> f64 {
        let tau = tau.clamp(0.0, 1.0);
        self.sigma_start + (self.sigma_end - self.sigma_start) * tau
    }
}

/// Progress and seed of a [`SupernetSim`]; the serializable part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub steps: u64,
    pub total_steps: u64,
}

/// Noisy evaluation view of a tabular oracle.
#[derive(Clone, Debug)]
pub struct SupernetSim {
    oracle: Arc<TabularOracle>,
    state: SimState,
}

impl SupernetSim {
    pub fn new(
        oracle: Arc<TabularOracle>,
        schedule: NoiseSchedule,
        seed: u64,
        total_steps: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        Ok(SupernetSim {
            oracle,
            state: SimState {
                seed,
                schedule,
                steps: 0,
                total_steps: total_steps.max(1),
            },
        })
    }

    pub fn from_state(oracle: Arc<TabularOracle>, state: SimState) -> Result<Self> {
        state.schedule.validate()?;
        Ok(SupernetSim { oracle, state })
    }

    pub fn state(&self) -> SimState {
        self.state
    }

    pub fn oracle(&self) -> &TabularOracle {
        &self.oracle
    }

    pub fn oracle_arc(&self) -> &Arc<TabularOracle> {
        &self.oracle
    }

    /// One supernet training step on some path.
    pub fn advance(&mut self, steps: u64) {
        self.state.steps = (self.state.steps + steps).min(self.state.total_steps);
    }

    pub fn set_progress(&mut self, tau: f64) {
        self.state.steps = (tau.clamp(0.0, 1.0) * self.state.total_steps as f64).round() as u64;
    }

    pub fn progress(&self) -> f64 {
        self.state.steps as f64 / self.state.total_steps as f64
    }

    pub fn sigma(&self) -> f64 {
        self.state.schedule.sigma(self.progress())
    }

    /// Validation loss `1 - quality + sigma * z`, with `z` standard normal
    /// drawn from `(seed, event, a)`.
    pub fn eval_noisy(&self, a: &Architecture, event: u64) -> Result<f64> {
        let q = self.oracle.quality(a)?;
        let sigma = self.sigma();
        let loss = 1.0 - q;
        if sigma == 0.0 {
            return Ok(loss);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash_ops(self.state.seed, event, a.ops()));
        let z: f64 = rng.sample(StandardNormal);
        Ok(loss + sigma * z)
    }
}
