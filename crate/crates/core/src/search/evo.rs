use std::cmp::Ordering;
use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::PathScorer;
use crate::oracle::SupernetSim;
use crate::search::stream;
use crate::space::{Architecture, SearchSpace};

const TAG_EVO: u64 = 0xe7_0a;

/// NSGA-II settings. Objectives: maximize evaluated quality, minimize cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub population: usize,
    /// Oracle evaluations allowed; filter predictions are free.
    pub budget: usize,
    pub crossover_rate: f64,
    /// Per-gene mutation probability; `None` means `1 / layers`.
    pub mutation_rate: Option<f64>,
    /// Hard upper bound on architecture cost.
    pub cost_limit: Option<f64>,
    pub use_filter: bool,
    pub threshold: f64,
    /// Attempts per offspring before a filtered candidate is taken anyway.
    pub filter_retries: usize,
    /// Draws allowed while building the initial population.
    pub init_attempts: usize,
    pub max_generations: usize,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population: 50,
            budget: 500,
            crossover_rate: 0.9,
            mutation_rate: None,
            cost_limit: None,
            use_filter: true,
            threshold: 0.5,
            filter_retries: 50,
            init_attempts: 100_000,
            max_generations: 10_000,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 || !self.population.is_multiple_of(2) {
            return Err(Error::Config("population must be even and at least 4".into()));
        }
        if self.budget == 0 || self.filter_retries == 0 || self.init_attempts == 0 {
            return Err(Error::Config("budget, filter_retries and init_attempts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || self.mutation_rate.is_some_and(|m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::Config("rates must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub arch: Architecture,
    /// `1 - noisy loss` at the end of supernet training.
    pub quality: f64,
    pub cost: f64,
    pub rank: usize,
    pub crowding: f64,
}

/// `a` dominates `b`: no worse in both objectives and better in one.
pub fn dominates(a: &Individual, b: &Individual) -> bool {
    a.quality >= b.quality && a.cost <= b.cost && (a.quality > b.quality || a.cost < b.cost)
}

/// Fronts as index lists, best first.
pub fn non_dominated_sort(pop: &[Individual]) -> Vec<Vec<usize>> {
    let n = pop.len();
    let mut dominated_by = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates(&pop[i], &pop[j]) {
                dominated_by[i].push(j);
            } else if i != j && dominates(&pop[j], &pop[i]) {
                count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

fn assign_crowding(pop: &mut [Individual], front: &[usize]) {
    for &i in front {
        pop[i].crowding = 0.0;
    }
    if front.len() <= 2 {
        for &i in front {
            pop[i].crowding = f64::INFINITY;
        }
        return;
    }
    let objectives: [fn(&Individual) -> f64; 2] = [|x| x.quality, |x| x.cost];
    for f in objectives {
        let mut idx = front.to_vec();
        idx.sort_by(|&a, &b| f(&pop[a]).total_cmp(&f(&pop[b])).then(a.cmp(&b)));
        let (lo, hi) = (f(&pop[idx[0]]), f(&pop[*idx.last().unwrap()]));
        pop[idx[0]].crowding = f64::INFINITY;
        pop[*idx.last().unwrap()].crowding = f64::INFINITY;
        if hi > lo {
            for w in 1..idx.len() - 1 {
                let d = (f(&pop[idx[w + 1]]) - f(&pop[idx[w - 1]])) / (hi - lo);
                pop[idx[w]].crowding += d;
            }
        }
    }
}

/// Ranks and crowding for every member, then keeps the best `keep`.
fn select(mut pop: Vec<Individual>, keep: usize) -> Vec<Individual> {
    let fronts = non_dominated_sort(&pop);
    for (r, front) in fronts.iter().enumerate() {
        for &i in front {
            pop[i].rank = r;
        }
        assign_crowding(&mut pop, front);
    }
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| better(&pop[a], &pop[b]).then(pop[a].arch.cmp(&pop[b].arch)));
    order.truncate(keep);
    order.sort_unstable();
    order.into_iter().map(|i| pop[i].clone()).collect()
}

/// Crowded-comparison order: lower rank, then larger crowding distance.
fn better(a: &Individual, b: &Individual) -> Ordering {
    a.rank.cmp(&b.rank).then(b.crowding.total_cmp(&a.crowding))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvoResult {
    /// Non-dominated members of the final population, by cost.
    pub front: Vec<Individual>,
    pub evaluations: usize,
    pub generations: usize,
    /// Candidates discarded because the filter judged them weak.
    pub filtered: u64,
    /// Candidates discarded for exceeding the cost limit.
    pub infeasible: u64,
    /// Evaluated architecture with the highest evaluated quality.
    pub best: Individual,
    /// Highest ground-truth quality among all evaluated architectures.
    pub best_true_quality: f64,
}

struct Search<'a, S: PathScorer + ?Sized> {
    space: &'a SearchSpace,
    sim: SupernetSim,
    filter: Option<&'a S>,
    cfg: &'a EvoConfig,
    rng: ChaCha8Rng,
    seen: HashSet<Architecture>,
    evaluations: usize,
    filtered: u64,
    infeasible: u64,
    best: Option<Individual>,
    best_true: f64,
}

impl<S: PathScorer + ?Sized> Search<'_, S> {
    /// Draws candidates from `make` until one is feasible, unseen and not
    /// weak. A weak one is accepted once the retries run out.
    fn propose<F>(&mut self, mut make: F) -> Result<Option<Architecture>>
    where
        F: FnMut(&mut ChaCha8Rng) -> Architecture,
    {
        let mut fallback = None;
        for _ in 0..self.cfg.filter_retries {
            let a = make(&mut self.rng);
            if let Some(limit) = self.cfg.cost_limit {
                if self.space.arch_cost(&a)? > limit {
                    self.infeasible += 1;
                    continue;
                }
            }
            if self.seen.contains(&a) {
                continue;
            }
            if let Some(f) = self.filter {
                if f.score_one(&a)? > self.cfg.threshold {
                    self.filtered += 1;
                    fallback.get_or_insert(a);
                    continue;
                }
            }
            return Ok(Some(a));
        }
        Ok(fallback)
    }

    fn evaluate(&mut self, a: Architecture) -> Result<Individual> {
        let loss = self.sim.eval_noisy(&a, self.evaluations as u64)?;
        self.evaluations += 1;
        self.best_true = self.best_true.max(self.sim.oracle().quality(&a)?);
        self.seen.insert(a.clone());
        let ind = Individual {
            cost: self.space.arch_cost(&a)?,
            arch: a,
            quality: 1.0 - loss,
            rank: 0,
            crowding: 0.0,
        };
        if self.best.as_ref().is_none_or(|b| ind.quality > b.quality) {
            self.best = Some(ind.clone());
        }
        Ok(ind)
    }

    fn tournament<'p>(&mut self, pop: &'p [Individual]) -> &'p Individual {
        let a = &pop[self.rng.random_range(0..pop.len())];
        let b = &pop[self.rng.random_range(0..pop.len())];
        if better(b, a) == Ordering::Less {
            b
        } else {
            a
        }
    }

    fn offspring(&mut self, pop: &[Individual]) -> Result<Option<Architecture>> {
        let p1 = self.tournament(pop).arch.clone();
        let p2 = self.tournament(pop).arch.clone();
        let layers = self.space.num_layers();
        let pm = self.cfg.mutation_rate.unwrap_or(1.0 / layers as f64);
        let cx = self.cfg.crossover_rate;
        let space = self.space;
        self.propose(|rng| {
            let mut child: Vec<usize> = if rng.random::<f64>() < cx {
                (0..layers)
                    .map(|l| if rng.random::<bool>() { p1.ops()[l] } else { p2.ops()[l] })
                    .collect()
            } else {
                p1.ops().to_vec()
            };
            for (l, g) in child.iter_mut().enumerate() {
                let active = space.active_ops(l);
                if active.len() > 1 && rng.random::<f64>() < pm {
                    let others: Vec<usize> = active.iter().copied().filter(|&o| o != *g).collect();
                    *g = others[rng.random_range(0..others.len())];
                }
            }
            Architecture(child)
        })
    }
}

fn min_cost(space: &SearchSpace) -> f64 {
    (0..space.num_layers())
        .map(|l| {
            space
                .active_ops(l)
                .iter()
                .map(|&o| space.op(l, o).cost)
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Filter-assisted NSGA-II over the active ops of `space`.
///
/// Evaluations use `sim` at full training progress and stop at exactly
/// `cfg.budget` unless the space runs out of unseen candidates first.
/// `audit` sees every generation's surviving population.
pub fn nsga2_search<S, F>(
    space: &SearchSpace,
    sim: &SupernetSim,
    filter: Option<&S>,
    cfg: &EvoConfig,
    seed: u64,
    mut audit: F,
) -> Result<EvoResult>
where
    S: PathScorer + ?Sized,
    F: FnMut(usize, &[Individual]),
{
    cfg.validate()?;
    if let Some(limit) = cfg.cost_limit {
        if min_cost(space) > limit {
            return Err(Error::Infeasible(format!(
                "cheapest architecture costs {} > limit {limit}",
                min_cost(space)
            )));
        }
    }
    let mut sim = sim.clone();
    sim.set_progress(1.0);
    let mut s = Search {
        space,
        sim,
        filter: if cfg.use_filter { filter } else { None },
        cfg,
        rng: stream(seed, TAG_EVO, 0),
        seen: HashSet::new(),
        evaluations: 0,
        filtered: 0,
        infeasible: 0,
        best: None,
        best_true: f64::NEG_INFINITY,
    };

    let mut pop = Vec::new();
    let mut attempts = 0;
    while pop.len() < cfg.population && s.evaluations < cfg.budget && attempts < cfg.init_attempts {
        attempts += cfg.filter_retries;
        if let Some(a) = s.propose(|rng| space.sample_uniform(rng))? {
            pop.push(s.evaluate(a)?);
        } else if space.full_size_u64().is_some_and(|n| s.seen.len() as u64 >= n) {
            break;
        }
    }
    if pop.is_empty() {
        return Err(Error::Infeasible("no feasible architecture found during initialization".into()));
    }
    pop = select(pop, cfg.population);
    audit(0, &pop);

    let mut generations = 0;
    while s.evaluations < cfg.budget && generations < cfg.max_generations {
        let mut children = Vec::new();
        let mut misses = 0;
        while children.len() < cfg.population && s.evaluations < cfg.budget && misses < cfg.population {
            match s.offspring(&pop)? {
                Some(a) => children.push(s.evaluate(a)?),
                None => misses += 1,
            }
        }
        generations += 1;
        if children.is_empty() {
            break;
        }
        pop.extend(children);
        pop = select(pop, cfg.population);
        audit(generations, &pop);
    }

    let mut front: Vec<Individual> = pop.iter().filter(|i| i.rank == 0).cloned().collect();
    front.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.arch.cmp(&b.arch)));
    Ok(EvoResult {
        front,
        evaluations: s.evaluations,
        generations,
        filtered: s.filtered,
        infeasible: s.infeasible,
        best: s.best.expect("at least one evaluation"),
        best_true_quality: s.best_true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::ConstantScorer;
    use crate::oracle::{GeneratorParams, NoiseSchedule, TabularOracle};
    use crate::space::OpDesc;
    use std::sync::Arc;

    fn sim_for(space: &SearchSpace) -> SupernetSim {
        let o = TabularOracle::generate(
            space,
            GeneratorParams {
                seed: 4,
                interaction: 0.2,
                duplicates: vec![],
            },
        )
        .unwrap();
        SupernetSim::new(Arc::new(o), NoiseSchedule::default(), 2, 10).unwrap()
    }

    fn ind(q: f64, c: f64) -> Individual {
        Individual {
            arch: Architecture(vec![]),
            quality: q,
            cost: c,
            rank: 0,
            crowding: 0.0,
        }
    }

    #[test]
    fn dominance_rules() {
        assert!(dominates(&ind(0.9, 1.0), &ind(0.8, 1.0)));
        assert!(dominates(&ind(0.9, 1.0), &ind(0.9, 2.0)));
        assert!(!dominates(&ind(0.9, 1.0), &ind(0.9, 1.0)));
        assert!(!dominates(&ind(0.9, 2.0), &ind(0.8, 1.0)));
    }

    #[test]
    fn sort_matches_brute_force_layers() {
        let mut rng = stream(1, 1, 1);
        for _ in 0..50 {
            let pop: Vec<Individual> = (0..30)
                .map(|_| ind(rng.random_range(0..5) as f64, rng.random_range(0..5) as f64))
                .collect();
            let fronts = non_dominated_sort(&pop);
            let mut remaining: Vec<usize> = (0..pop.len()).collect();
            for front in fronts {
                let expect: Vec<usize> = remaining
                    .iter()
                    .copied()
                    .filter(|&i| !remaining.iter().any(|&j| dominates(&pop[j], &pop[i])))
                    .collect();
                let mut got = front.clone();
                got.sort_unstable();
                assert_eq!(got, expect);
                remaining.retain(|i| !front.contains(i));
            }
            assert!(remaining.is_empty());
        }
    }

    #[test]
    fn exact_budget_and_non_dominated_generations() {
        let space = SearchSpace::nas_bench_macro();
        let sim = sim_for(&space);
        let mut audits = 0;
        let res = nsga2_search(&space, &sim, None::<&ConstantScorer>, &EvoConfig::default(), 3, |_, pop| {
            audits += 1;
            let front: Vec<&Individual> = pop.iter().filter(|i| i.rank == 0).collect();
            for a in &front {
                for b in &front {
                    assert!(!dominates(a, b));
                }
                assert!(!pop.iter().any(|p| dominates(p, a)));
            }
        })
        .unwrap();
        assert_eq!(res.evaluations, 500);
        assert_eq!(audits, res.generations + 1);
        assert!(!res.front.is_empty());
    }

    #[test]
    fn single_architecture_space() {
        let space = SearchSpace::uniform(4, &[("only", 1.0)]).unwrap();
        let sim = sim_for(&space);
        let res = nsga2_search(&space, &sim, None::<&ConstantScorer>, &EvoConfig::default(), 0, |_, _| {}).unwrap();
        assert_eq!(res.front.len(), 1);
        assert_eq!(res.evaluations, 1);
        assert_eq!(res.front[0].arch, Architecture(vec![0; 4]));
    }

    #[test]
    fn cost_limit_is_respected() {
        let space = SearchSpace::nas_bench_macro();
        let sim = sim_for(&space);
        let cfg = EvoConfig {
            cost_limit: Some(60.0),
            budget: 200,
            ..EvoConfig::default()
        };
        let res = nsga2_search(&space, &sim, None::<&ConstantScorer>, &cfg, 1, |_, pop| {
            assert!(pop.iter().all(|i| i.cost <= 60.0));
        })
        .unwrap();
        assert_eq!(res.evaluations, 200);
        assert!(res.infeasible > 0);
    }

    #[test]
    fn impossible_limit_errors() {
        let ops = vec![
            OpDesc {
                name: "a".into(),
                cost: 5.0,
            },
            OpDesc {
                name: "b".into(),
                cost: 7.0,
            },
        ];
        let space = SearchSpace::new(vec![ops; 3]).unwrap();
        let sim = sim_for(&space);
        let cfg = EvoConfig {
            cost_limit: Some(10.0),
            ..EvoConfig::default()
        };
        let res = nsga2_search(&space, &sim, None::<&ConstantScorer>, &cfg, 1, |_, _| {});
        assert!(matches!(res, Err(Error::Infeasible(_))));
    }

    #[test]
    fn all_weak_filter_still_progresses() {
        let space = SearchSpace::nas_bench_macro();
        let sim = sim_for(&space);
        let cfg = EvoConfig {
            budget: 100,
            ..EvoConfig::default()
        };
        let res = nsga2_search(&space, &sim, Some(&ConstantScorer(0.9)), &cfg, 1, |_, _| {}).unwrap();
        assert_eq!(res.evaluations, 100);
        assert!(res.filtered >= 100);
    }

    #[test]
    fn deterministic_for_seed() {
        let space = SearchSpace::nas_bench_macro();
        let sim = sim_for(&space);
        let run = || nsga2_search(&space, &sim, None::<&ConstantScorer>, &EvoConfig::default(), 8, |_, _| {}).unwrap();
        assert_eq!(run(), run());
    }
}
