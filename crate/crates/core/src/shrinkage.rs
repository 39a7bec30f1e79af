//! Weak-path labeling, operation merging and the stopping rule.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterNet, PathScorer};
use crate::oracle::SupernetSim;
use crate::space::{Architecture, SearchSpace};

/// Number of positives for `m` paths at weak fraction `q`: `ceil(q * m)`.
/// A tiny slack absorbs products such as `0.07 * 100 = 7.000000000000001`.
pub fn weak_count(m: usize, q: f64) -> usize {
    ((q * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m)
}

/// One multi-path evaluation with its weak labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelRound {
    /// Paths with their evaluated loss, ascending by loss.
    pub paths: Vec<(Architecture, f64)>,
    pub q: f64,
    /// `ceil(q * m)` before capping.
    pub requested: usize,
    /// Positives actually labeled; at most `m - 1`.
    pub positives: usize,
}

impl WeakLabelRound {
    pub fn capped(&self) -> bool {
        self.positives < self.requested
    }

    /// The labeled weak paths: the tail of the sorted list.
    pub fn weak(&self) -> &[(Architecture, f64)] {
        &self.paths[self.paths.len() - self.positives..]
    }

    pub fn rest(&self) -> &[(Architecture, f64)] {
        &self.paths[..self.paths.len() - self.positives]
    }
}

/// Samples `m` uniform paths from `space`, evaluates each once on `sim`
/// (events `event_base..event_base + m`) and labels the highest-loss
/// `min(ceil(q * m), m - 1)` as weak. Equal losses order by canonical rank.
pub fn label_weak_round<R: Rng + ?Sized>(
    sim: &SupernetSim,
    space: &SearchSpace,
    m: usize,
    q: f64,
    event_base: u64,
    rng: &mut R,
) -> Result<WeakLabelRound> {
    if m < 2 {
        return Err(Error::Config(format!("m = {m} must be at least 2")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("weak fraction {q} outside (0,1)")));
    }
    let mut paths = Vec::with_capacity(m);
    for i in 0..m {
        let a = space.sample_uniform(rng);
        let loss = sim.eval_noisy(&a, event_base + i as u64)?;
        paths.push((a, loss));
    }
    // Lexicographic order on op indices is the canonical rank order.
    paths.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
    let requested = weak_count(m, q);
    Ok(WeakLabelRound {
        paths,
        q,
        requested,
        positives: requested.min(m - 1),
    })
}

/// Linear ramp of the weak fraction, clamped at both ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QSchedule {
    pub start: f64,
    pub end: f64,
    /// Ramp length in the caller's time unit.
    pub ramp: f64,
}

impl Default for QSchedule {
    fn default() -> Self {
        QSchedule {
            start: 0.5,
            end: 0.99,
            ramp: 90.0,
        }
    }
}

impl QSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.start > 0.0 && self.end < 1.0 && self.start <= self.end && self.ramp >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid q schedule {self:?}")));
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        if self.ramp <= 0.0 {
            return self.end;
        }
        let frac = (t / self.ramp).clamp(0.0, 1.0);
        self.start + (self.end - self.start) * frac
    }

    pub fn ramp_done(&self, t: f64) -> bool {
        t >= self.ramp
    }
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {}", x.len(), y.len())));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate("zero vector in cosine similarity".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// One op removed in favor of a cheaper op of the same layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub round: u32,
    pub layer: usize,
    pub kept: usize,
    pub removed: usize,
    /// Similarity between the kept and removed embeddings. Inside a
    /// transitive group this can be below the threshold.
    pub similarity: f64,
}

/// Pairwise similarities of all ops in `layer`; `None` for zero embeddings.
pub fn similarity_matrix(net: &FilterNet, layer: usize, ops: usize) -> Result<Vec<Vec<Option<f64>>>> {
    let mut out = vec![vec![None; ops]; ops];
    for (j, row) in out.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            *cell = cosine_similarity(net.embedding_of(layer, j)?, net.embedding_of(layer, k)?).ok();
        }
    }
    Ok(out)
}

pub fn similarity_csv(matrix: &[Vec<Option<f64>>]) -> String {
    let n = matrix.len();
    let mut out = String::from("op");
    for k in 0..n {
        let _ = write!(out, ",{k}");
    }
    out.push('\n');
    for (j, row) in matrix.iter().enumerate() {
        let _ = write!(out, "{j}");
        for v in row {
            match v {
                Some(s) => {
                    let _ = write!(out, ",{s}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn merge_log_csv(records: &[MergeRecord]) -> String {
    let mut out = String::from("round,layer,kept,removed,similarity\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.round, r.layer, r.kept, r.removed, r.similarity);
    }
    out
}

/// Groups of `items` connected by the edges `(i, j)` where `linked(i, j)`,
/// each sorted, in order of their smallest member.
pub fn connected_groups<F: FnMut(usize, usize) -> bool>(n: usize, mut linked: F) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if linked(i, j) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// Merges active ops whose embeddings have similarity above `s_thrd`.
///
/// Similar pairs are grouped transitively per layer; each group keeps its
/// cheapest op (lowest id on ties) and deactivates the rest. Pairs involving
/// a zero embedding never merge. Records come out by layer, then removed op.
pub fn merge_similar_ops(
    space: &mut SearchSpace,
    net: &FilterNet,
    s_thrd: f64,
    round: u32,
) -> Result<Vec<MergeRecord>> {
    if !(s_thrd > -1.0 && s_thrd <= 1.0) {
        return Err(Error::Config(format!("similarity threshold {s_thrd} outside (-1,1]")));
    }
    let dims = net.dims();
    if dims.layers != space.num_layers() || dims.ops < space.max_ops() {
        return Err(Error::Shape("filter does not match the search space".into()));
    }
    let mut records = Vec::new();
    for layer in 0..space.num_layers() {
        let active = space.active_ops(layer).to_vec();
        let emb: Vec<&[f64]> = active
            .iter()
            .map(|&op| net.embedding_of(layer, op))
            .collect::<Result<_>>()?;
        let groups = connected_groups(active.len(), |i, j| {
            matches!(cosine_similarity(emb[i], emb[j]), Ok(s) if s > s_thrd)
        });
        let mut layer_records = Vec::new();
        for g in groups.iter().filter(|g| g.len() > 1) {
            let keep = *g
                .iter()
                .min_by(|&&i, &&j| {
                    let (ci, cj) = (space.op(layer, active[i]).cost, space.op(layer, active[j]).cost);
                    ci.total_cmp(&cj).then(active[i].cmp(&active[j]))
                })
                .unwrap();
            for &i in g.iter().filter(|&&i| i != keep) {
                layer_records.push(MergeRecord {
                    round,
                    layer,
                    kept: active[keep],
                    removed: active[i],
                    similarity: cosine_similarity(emb[keep], emb[i])?,
                });
            }
        }
        layer_records.sort_by_key(|r| r.removed);
        for r in layer_records {
            // The kept op stays active, so a layer can never be emptied here.
            space.deactivate(layer, r.removed)?;
            records.push(r);
        }
    }
    Ok(records)
}

/// Fraction of `probes` on which the thresholded predictions agree.
pub fn agreement_on<A, B>(current: &A, previous: &B, probes: &[Architecture], threshold: f64) -> Result<f64>
where
    A: PathScorer + ?Sized,
    B: PathScorer + ?Sized,
{
    if probes.is_empty() {
        return Err(Error::EmptyBatch("probe set"));
    }
    let cur = current.score(probes)?;
    let prev = previous.score(probes)?;
    let same = cur
        .iter()
        .zip(&prev)
        .filter(|(c, p)| (**c > threshold) == (**p > threshold))
        .count();
    Ok(same as f64 / probes.len() as f64)
}

/// Agreement `u` of two filters on `m` fresh uniform probes from `space`.
pub fn stopping_agreement<A, B, R>(
    current: &A,
    previous: &B,
    space: &SearchSpace,
    m: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<f64>
where
    A: PathScorer + ?Sized,
    B: PathScorer + ?Sized,
    R: Rng + ?Sized,
{
    let probes: Vec<Architecture> = (0..m).map(|_| space.sample_uniform(rng)).collect();
    agreement_on(current, previous, &probes, threshold)
}

/// Stopping rule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub beta: f64,
    pub probes: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule {
            beta: 0.9,
            probes: 10_000,
        }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        if self.probes == 0 || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("invalid stopping rule {self:?}")));
        }
        Ok(())
    }

    pub fn fires(&self, u: f64) -> bool {
        u > self.beta
    }
}
