//! Layered discrete search spaces and the architectures sampled from them.
//!
//! An architecture picks one operation per layer. Operations are addressed by
//! their position in the layer's original candidate list; merging only flips
//! the layer's active mask, so indices stay valid for embeddings and tables.

use std::fmt;
use std::path::Path;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One candidate operation of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpDesc {
    pub name: String,
    /// Abstract FLOP units, never negative.
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    ops: Vec<OpDesc>,
    active: Vec<bool>,
    /// Cached indices of active ops, ascending.
    active_ids: Vec<usize>,
}

impl Layer {
    fn new(ops: Vec<OpDesc>, active: Vec<bool>) -> Self {
        let active_ids = active
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
            .collect();
        Layer {
            ops,
            active,
            active_ids,
        }
    }
}

/// A choice of one operation index per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Architecture(pub Vec<usize>);

impl Architecture {
    pub fn new(ops: Vec<usize>) -> Self {
        Architecture(ops)
    }

    pub fn ops(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, op) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{op}")?;
        }
        write!(f, ")")
    }
}

/// Serialized description of one or more identical layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerDef {
    pub ops: Vec<OpDesc>,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active: Option<Vec<bool>>,
}

fn one() -> usize {
    1
}

/// On-disk form of a search space (TOML or JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub layer: Vec<LayerDef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    name: Option<String>,
    layers: Vec<Layer>,
}

impl SearchSpace {
    /// Builds a space with every operation active.
    pub fn new(layers: Vec<Vec<OpDesc>>) -> Result<Self> {
        let layers = layers
            .into_iter()
            .map(|ops| {
                let n = ops.len();
                Layer::new(ops, vec![true; n])
            })
            .collect();
        let space = SearchSpace { name: None, layers };
        space.validate()?;
        Ok(space)
    }

    /// `layers` copies of the same operation list.
    pub fn uniform(layers: usize, ops: &[(&str, f64)]) -> Result<Self> {
        let ops: Vec<OpDesc> = ops
            .iter()
            .map(|(name, cost)| OpDesc {
                name: name.to_string(),
                cost: *cost,
            })
            .collect();
        SearchSpace::new(vec![ops; layers])
    }

    /// 8 layers x 3 ops, the shape of NAS-Bench-Macro (6561 architectures).
    pub fn nas_bench_macro() -> Self {
        let mut s =
            SearchSpace::uniform(8, &[("id", 0.0), ("mb3_k3", 6.0), ("mb6_k5", 20.0)]).unwrap();
        s.name = Some("nas-bench-macro".into());
        s
    }

    /// 21 layers x 13 ops, the shape of the MobileNetV2-SE space.
    pub fn mb_se() -> Self {
        let mut ops = Vec::with_capacity(13);
        for expand in [3u32, 6] {
            for se in [false, true] {
                for k in [3u32, 5, 7] {
                    let base = f64::from(expand) * f64::from(k * k) / 9.0 * 3.0;
                    let cost = if se { base * 1.1 } else { base };
                    let name = if se {
                        format!("mb{expand}_k{k}_se")
                    } else {
                        format!("mb{expand}_k{k}")
                    };
                    ops.push(OpDesc { name, cost });
                }
            }
        }
        ops.push(OpDesc {
            name: "id".into(),
            cost: 0.0,
        });
        let mut s = SearchSpace::new(vec![ops; 21]).unwrap();
        s.name = Some("mb-se".into());
        s
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpace("no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.ops.is_empty() {
                return Err(Error::InvalidSpace(format!("layer {i} has no operations")));
            }
            if layer.active.len() != layer.ops.len() {
                return Err(Error::InvalidSpace(format!(
                    "layer {i}: active mask length {} != {} ops",
                    layer.active.len(),
                    layer.ops.len()
                )));
            }
            if layer.active_ids.is_empty() {
                return Err(Error::InvalidSpace(format!("layer {i} has no active op")));
            }
            if let Some(op) = layer.ops.iter().find(|op| !(op.cost >= 0.0) || !op.cost.is_finite()) {
                return Err(Error::InvalidSpace(format!(
                    "layer {i}: op {} has invalid cost {}",
                    op.name, op.cost
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Original candidate count of `layer`.
    pub fn num_ops(&self, layer: usize) -> usize {
        self.layers[layer].ops.len()
    }

    /// Largest candidate count over layers; the embedding table's N.
    pub fn max_ops(&self) -> usize {
        self.layers.iter().map(|l| l.ops.len()).max().unwrap_or(0)
    }

    pub fn op(&self, layer: usize, op: usize) -> &OpDesc {
        &self.layers[layer].ops[op]
    }

    pub fn is_active(&self, layer: usize, op: usize) -> bool {
        self.layers
            .get(layer)
            .and_then(|l| l.active.get(op).copied())
            .unwrap_or(false)
    }

    pub fn active_ops(&self, layer: usize) -> &[usize] {
        &self.layers[layer].active_ids
    }

    /// Number of deactivated operations over all layers.
    pub fn merged_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.ops.len() - l.active_ids.len())
            .sum()
    }

    /// Deactivates `op` in `layer`. Refuses to empty a layer.
    pub fn deactivate(&mut self, layer: usize, op: usize) -> Result<()> {
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidSpace(format!("layer {layer} out of range")))?;
        if op >= l.ops.len() {
            return Err(Error::InvalidSpace(format!(
                "op {op} out of range in layer {layer}"
            )));
        }
        if !l.active[op] {
            return Ok(());
        }
        if l.active_ids.len() == 1 {
            return Err(Error::InvalidSpace(format!(
                "deactivating op {op} would empty layer {layer}"
            )));
        }
        l.active[op] = false;
        l.active_ids.retain(|&i| i != op);
        Ok(())
    }

    /// Checks shape and index range; with `require_active` also rejects merged ops.
    pub fn check(&self, a: &Architecture, require_active: bool) -> Result<()> {
        if a.len() != self.num_layers() {
            return Err(Error::InvalidArchitecture(format!(
                "length {} != {} layers",
                a.len(),
                self.num_layers()
            )));
        }
        for (i, (&op, layer)) in a.ops().iter().zip(&self.layers).enumerate() {
            if op >= layer.ops.len() {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i}: op {op} out of range ({} ops)",
                    layer.ops.len()
                )));
            }
            if require_active && !layer.active[op] {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i}: op {op} has been merged away"
                )));
            }
        }
        Ok(())
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Architecture {
        Architecture(
            self.layers
                .iter()
                .map(|l| l.active_ids[rng.random_range(0..l.active_ids.len())])
                .collect(),
        )
    }

    pub fn arch_cost(&self, a: &Architecture) -> Result<f64> {
        self.check(a, true)?;
        Ok(a
            .ops()
            .iter()
            .zip(&self.layers)
            .map(|(&op, l)| l.ops[op].cost)
            .sum())
    }

    /// Number of sampleable architectures: product of active counts.
    pub fn space_size(&self) -> BigUint {
        self.layers
            .iter()
            .fold(BigUint::one(), |acc, l| acc * BigUint::from(l.active_ids.len()))
    }

    /// Size of the space before any merging.
    pub fn full_size(&self) -> BigUint {
        self.layers
            .iter()
            .fold(BigUint::one(), |acc, l| acc * BigUint::from(l.ops.len()))
    }

    /// `full_size` when it fits in a `u64`.
    pub fn full_size_u64(&self) -> Option<u64> {
        self.layers
            .iter()
            .try_fold(1u64, |acc, l| acc.checked_mul(l.ops.len() as u64))
    }

    /// Mixed-radix rank over the original candidate lists; layer 0 is the most
    /// significant digit, so rank order equals lexicographic order.
    pub fn rank(&self, a: &Architecture) -> BigUint {
        let mut r = BigUint::zero();
        for (&op, l) in a.ops().iter().zip(&self.layers) {
            r = r * BigUint::from(l.ops.len()) + BigUint::from(op);
        }
        r
    }

    pub fn rank_u64(&self, a: &Architecture) -> Option<u64> {
        let mut r = 0u64;
        for (&op, l) in a.ops().iter().zip(&self.layers) {
            r = r.checked_mul(l.ops.len() as u64)?.checked_add(op as u64)?;
        }
        Some(r)
    }

    pub fn unrank(&self, rank: &BigUint) -> Result<Architecture> {
        if rank >= &self.full_size() {
            return Err(Error::InvalidArchitecture(format!("rank {rank} out of range")));
        }
        let mut ops = vec![0usize; self.num_layers()];
        let mut r = rank.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let n = BigUint::from(l.ops.len());
            ops[i] = (&r % &n).to_usize().unwrap();
            r /= n;
        }
        Ok(Architecture(ops))
    }

    pub fn unrank_u64(&self, mut rank: u64) -> Result<Architecture> {
        match self.full_size_u64() {
            Some(n) if rank < n => {}
            _ => {
                return Err(Error::InvalidArchitecture(format!(
                    "rank {rank} out of range"
                )))
            }
        }
        let mut ops = vec![0usize; self.num_layers()];
        for (i, l) in self.layers.iter().enumerate().rev() {
            let n = l.ops.len() as u64;
            ops[i] = (rank % n) as usize;
            rank /= n;
        }
        Ok(Architecture(ops))
    }

    /// Every architecture of the original space in rank order. Only sensible
    /// for small spaces.
    pub fn enumerate(&self) -> Result<Vec<Architecture>> {
        let n = self
            .full_size_u64()
            .filter(|&n| n <= 1 << 24)
            .ok_or_else(|| Error::InvalidSpace("space too large to enumerate".into()))?;
        (0..n).map(|r| self.unrank_u64(r)).collect()
    }

    pub fn from_def(def: SpaceDef) -> Result<Self> {
        let mut layers = Vec::new();
        for ld in def.layer {
            let active = match ld.active {
                Some(mask) => mask,
                None => vec![true; ld.ops.len()],
            };
            for _ in 0..ld.repeat {
                layers.push(Layer::new(ld.ops.clone(), active.clone()));
            }
        }
        let space = SearchSpace {
            name: def.name,
            layers,
        };
        space.validate()?;
        Ok(space)
    }

    /// Per-layer definition including the current active masks.
    pub fn to_def(&self) -> SpaceDef {
        SpaceDef {
            name: self.name.clone(),
            layer: self
                .layers
                .iter()
                .map(|l| LayerDef {
                    ops: l.ops.clone(),
                    repeat: 1,
                    active: Some(l.active.clone()),
                })
                .collect(),
        }
    }

    /// Reads a TOML or JSON definition, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let def: SpaceDef = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => {
                toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            }
            _ => serde_json::from_str(&text)?,
        };
        SearchSpace::from_def(def)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_def())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

impl Serialize for SearchSpace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_def().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let def = SpaceDef::deserialize(d)?;
        SearchSpace::from_def(def).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn macro_space() -> SearchSpace {
        SearchSpace::uniform(8, &[("a", 0.0), ("b", 1.0), ("c", 2.0)]).unwrap()
    }

    #[test]
    fn degenerate_space_samples_unique_arch() {
        let s = SearchSpace::uniform(3, &[("only", 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(s.sample_uniform(&mut rng), Architecture(vec![0, 0, 0]));
        }
    }

    #[test]
    fn uniform_marginals() {
        let s = macro_space();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 300_000;
        let mut counts = vec![[0usize; 3]; 8];
        for _ in 0..draws {
            let a = s.sample_uniform(&mut rng);
            for (l, &op) in a.ops().iter().enumerate() {
                counts[l][op] += 1;
            }
        }
        for layer in &counts {
            for &c in layer {
                let f = c as f64 / draws as f64;
                assert!((f - 1.0 / 3.0).abs() < 0.01, "freq {f}");
            }
        }
    }

    #[test]
    fn merged_op_never_sampled() {
        let mut s = macro_space();
        s.deactivate(0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50_000 {
            assert_ne!(s.sample_uniform(&mut rng).ops()[0], 2);
        }
    }

    #[test]
    fn cost_sums() {
        let s = SearchSpace::new(vec![
            vec![
                OpDesc { name: "x".into(), cost: 1.0 },
                OpDesc { name: "y".into(), cost: 2.0 },
            ],
            vec![
                OpDesc { name: "x".into(), cost: 3.0 },
                OpDesc { name: "y".into(), cost: 4.0 },
            ],
        ])
        .unwrap();
        assert_eq!(s.arch_cost(&Architecture(vec![1, 0])).unwrap(), 5.0);
        let zero = SearchSpace::uniform(4, &[("a", 0.0), ("b", 0.0)]).unwrap();
        assert_eq!(zero.arch_cost(&Architecture(vec![1, 0, 1, 1])).unwrap(), 0.0);
    }

    #[test]
    fn cost_rejects_bad_arch() {
        let mut s = macro_space();
        assert!(matches!(
            s.arch_cost(&Architecture(vec![3; 8])),
            Err(Error::InvalidArchitecture(_))
        ));
        assert!(s.arch_cost(&Architecture(vec![0; 7])).is_err());
        s.deactivate(1, 1).unwrap();
        assert!(s.arch_cost(&Architecture(vec![1; 8])).is_err());
    }

    #[test]
    fn cost_matches_independent_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let costs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect();
        let s = SearchSpace::new(
            costs
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&c| OpDesc { name: "o".into(), cost: c })
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        for _ in 0..100 {
            let a = s.sample_uniform(&mut rng);
            let mut expected = 0.0;
            for l in 0..6 {
                expected += costs[l][a.ops()[l]];
            }
            assert_eq!(s.arch_cost(&a).unwrap(), expected);
        }
    }

    #[test]
    fn sizes() {
        assert_eq!(macro_space().space_size(), BigUint::from(6561u32));
        assert_eq!(
            SearchSpace::uniform(5, &[("a", 0.0)]).unwrap().space_size(),
            BigUint::one()
        );
        let mb = SearchSpace::mb_se();
        let expected = BigUint::from(13u32).pow(21);
        assert_eq!(mb.space_size(), expected);
        assert_eq!(expected.to_string(), "247064529073450392704413");
        assert!(mb.full_size_u64().is_none());
    }

    #[test]
    fn size_shrinks_on_merge() {
        let mut s = macro_space();
        let before = s.space_size();
        s.deactivate(3, 0).unwrap();
        assert!(s.space_size() < before);
        s.deactivate(3, 1).unwrap();
        assert!(s.deactivate(3, 2).is_err());
        assert_eq!(s.active_ops(3), &[2]);
    }

    #[test]
    fn rank_round_trip_exhaustive() {
        let s = macro_space();
        for r in 0..6561u64 {
            let a = s.unrank_u64(r).unwrap();
            assert_eq!(s.rank_u64(&a), Some(r));
            assert_eq!(s.rank(&a), BigUint::from(r));
        }
        assert!(s.unrank_u64(6561).is_err());
    }

    #[test]
    fn def_round_trip_keeps_mask() {
        let mut s = macro_space();
        s.deactivate(2, 1).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: SearchSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn toml_definition() {
        let text = r#"
            name = "tiny"
            [[layer]]
            repeat = 4
            ops = [{ name = "id", cost = 0.0 }, { name = "conv", cost = 2.5 }]
        "#;
        let def: SpaceDef = toml::from_str(text).unwrap();
        let s = SearchSpace::from_def(def).unwrap();
        assert_eq!(s.num_layers(), 4);
        assert_eq!(s.space_size(), BigUint::from(16u32));
    }

    proptest! {
        #[test]
        fn sampling_respects_random_merges(
            merges in proptest::collection::vec((0usize..8, 0usize..3), 0..20),
            seed in any::<u64>(),
        ) {
            let mut s = macro_space();
            for (l, op) in merges {
                let _ = s.deactivate(l, op);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let a = s.sample_uniform(&mut rng);
                prop_assert!(s.check(&a, true).is_ok());
            }
        }
    }
}
