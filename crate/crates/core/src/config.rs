//! Run configuration, provenance stamps and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracle::{GeneratorParams, TabularOracle};
use crate::search::{EvoConfig, FractionProtocol, TrainConfig};
use crate::space::SearchSpace;

pub const TOOL_VERSION: &str = concat!("pathshrink ", env!("CARGO_PKG_VERSION"));

/// Hex SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Where the search space comes from: a named preset or a TOML/JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpaceSource {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
}

impl Default for SpaceSource {
    fn default() -> Self {
        SpaceSource {
            preset: Some("nas-bench-macro".into()),
            file: None,
        }
    }
}

impl SpaceSource {
    pub fn load(&self) -> Result<SearchSpace> {
        match (&self.file, &self.preset) {
            (Some(f), _) => SearchSpace::load(f),
            (None, Some(p)) => preset(p),
            (None, None) => Err(Error::Config("no search space given".into())),
        }
    }
}

pub fn preset(name: &str) -> Result<SearchSpace> {
    match name {
        "nas-bench-macro" => Ok(SearchSpace::nas_bench_macro()),
        "mb-se" => Ok(SearchSpace::mb_se()),
        other => Err(Error::Config(format!(
            "unknown space preset {other:?} (expected nas-bench-macro or mb-se)"
        ))),
    }
}

/// A benchmark file, or generator parameters when no file is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSource {
    pub file: Option<PathBuf>,
    pub generator: GeneratorParams,
}

impl Default for BenchmarkSource {
    fn default() -> Self {
        BenchmarkSource {
            file: None,
            generator: GeneratorParams {
                seed: 0,
                interaction: 0.3,
                duplicates: vec![],
            },
        }
    }
}

impl BenchmarkSource {
    pub fn load(&self, space: &SearchSpace) -> Result<TabularOracle> {
        match &self.file {
            Some(f) => {
                if !f.exists() {
                    return Err(Error::Config(format!("benchmark file {} does not exist", f.display())));
                }
                TabularOracle::load(f)
            }
            None => TabularOracle::generate(space, self.generator.clone()),
        }
    }
}

/// Complete configuration of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub space: SpaceSource,
    pub benchmark: BenchmarkSource,
    pub train: TrainConfig,
    pub search: EvoConfig,
    /// Offline protocol used when comparing PU and PN filters.
    pub baselines: FractionProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            space: SpaceSource::default(),
            benchmark: BenchmarkSource::default(),
            train: TrainConfig::desk(),
            search: EvoConfig::default(),
            baselines: FractionProtocol::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML run file. Keys it omits keep the values of
    /// [`RunConfig::default`], including inside partially given tables.
    pub fn from_toml(text: &str) -> Result<Self> {
        let given: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut root = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut root, toml::Value::Table(given));
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `train.vpu.iterations` and `value` is a TOML literal (bare words are
    /// taken as strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside a table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.search.validate()
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Provenance fields stamped onto JSON outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub tool_version: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Stamped<T> {
    pub fn new(body: T, config_hash: &str) -> Self {
        Stamped {
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            body,
        }
    }
}

/// Leading comment line for CSV outputs.
pub fn csv_stamp(config_hash: &str) -> String {
    format!("# {TOOL_VERSION} config {config_hash}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_tables_keep_run_defaults() {
        let cfg = RunConfig::from_toml("[train]\ntotal_iterations = 1200\n[train.vpu]\nlambda = 0.5\n").unwrap();
        let desk = TrainConfig::desk();
        assert_eq!(cfg.train.total_iterations, 1200);
        assert_eq!(cfg.train.hidden, desk.hidden);
        assert_eq!(cfg.train.vpu.batch_size, desk.vpu.batch_size);
        assert_eq!(cfg.train.vpu.lambda, 0.5);
        assert!(RunConfig::from_toml("seed = \"x\"").is_err());
    }

    #[test]
    fn overrides_set_nested_fields() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "train.vpu.iterations=7".into(),
                "seed = 42".into(),
                "output_dir=out/x".into(),
                "search.cost_limit=330.0".into(),
            ])
            .unwrap();
        assert_eq!(cfg.train.vpu.iterations, 7);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.search.cost_limit, Some(330.0));
        assert!(RunConfig::default().with_overrides(&["nonsense".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed=\"x\"".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn stamped_output_still_reads_as_body() {
        let space = SearchSpace::nas_bench_macro();
        let text = serde_json::to_string(&Stamped::new(&space, "abc")).unwrap();
        assert!(text.contains("\"config_hash\":\"abc\""));
        let back: SearchSpace = serde_json::from_str(&text).unwrap();
        assert_eq!(back, space);
    }

    #[test]
    fn missing_benchmark_file_errors() {
        let src = BenchmarkSource {
            file: Some("/nonexistent/bench.json".into()),
            ..BenchmarkSource::default()
        };
        assert!(src.load(&SearchSpace::nas_bench_macro()).is_err());
        assert!(preset("nope").is_err());
    }
}
