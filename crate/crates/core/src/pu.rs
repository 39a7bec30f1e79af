//! Positive-unlabeled objectives for the path filter and the training round.
//!
//! Positive means weak. The primary objective is the variational loss
//! `log mean_U phi - mean_P log phi` plus a MixUp consistency term computed on
//! mixed embedded sequences; uPU and fully supervised PN are baselines.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{AdamConfig, AdamState, FilterNet, Gradients, Input, PathScorer};
use crate::space::Architecture;

/// Default cap on the accumulated unlabeled set.
pub const UNLABELED_CAP: usize = 50_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpuConfig {
    /// Beta(sigma, sigma) parameter of the MixUp weight.
    pub mix_beta: f64,
    /// Weight of the consistency term.
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for VpuConfig {
    fn default() -> Self {
        VpuConfig {
            mix_beta: 0.3,
            lambda: 0.2,
            batch_size: 1024,
            iterations: 3000,
        }
    }
}

impl VpuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mix_beta > 0.0) || !(self.lambda >= 0.0) || self.batch_size < 2 {
            return Err(Error::Config(format!("invalid VPU config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpuConfig {
    /// Class prior of positives in the unlabeled distribution.
    pub prior: f64,
}

impl UpuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::Config(format!("class prior {} outside (0,1)", self.prior)));
        }
        Ok(())
    }
}

/// Which objective a training round minimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    Vpu { mix_beta: f64, lambda: f64 },
    Upu { prior: f64 },
    Pn { prior: f64 },
}

impl Objective {
    pub fn vpu(cfg: &VpuConfig) -> Self {
        Objective::Vpu {
            mix_beta: cfg.mix_beta,
            lambda: cfg.lambda,
        }
    }
}

/// Positive (weak) and unlabeled paths, with the round each came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PuDatasets {
    pub positives: Vec<Architecture>,
    pub positive_rounds: Vec<u32>,
    pub unlabeled: VecDeque<Architecture>,
    pub unlabeled_rounds: VecDeque<u32>,
    /// Ground-truth negatives; only the supervised baseline reads them.
    #[serde(default)]
    pub negatives: Option<Vec<Architecture>>,
    pub unlabeled_cap: usize,
}

impl PuDatasets {
    pub fn new(unlabeled_cap: usize) -> Self {
        PuDatasets {
            unlabeled_cap: unlabeled_cap.max(1),
            ..Default::default()
        }
    }

    pub fn add_positive(&mut self, a: Architecture, round: u32) {
        self.positives.push(a);
        self.positive_rounds.push(round);
    }

    /// Appends unlabeled paths, evicting the oldest beyond the cap.
    pub fn add_unlabeled(&mut self, a: Architecture, round: u32) {
        self.unlabeled.push_back(a);
        self.unlabeled_rounds.push_back(round);
        while self.unlabeled.len() > self.unlabeled_cap {
            self.unlabeled.pop_front();
            self.unlabeled_rounds.pop_front();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::EmptyBatch("positive set"));
        }
        if self.unlabeled.is_empty() {
            return Err(Error::EmptyBatch("unlabeled set"));
        }
        Ok(())
    }
}

/// Variational loss from filter outputs: `log(sum_U phi / |U|) - sum_P log(phi) / |P|`.
/// Returns the loss and `d loss / d phi` for both batches.
pub fn variational_loss(phi_p: &[f64], phi_u: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if phi_p.is_empty() {
        return Err(Error::EmptyBatch("positive batch"));
    }
    if phi_u.is_empty() {
        return Err(Error::EmptyBatch("unlabeled batch"));
    }
    let sum_u: f64 = phi_u.iter().sum();
    let log_mean_u = sum_u.ln() - (phi_u.len() as f64).ln();
    let mean_log_p = phi_p.iter().map(|p| p.ln()).sum::<f64>() / phi_p.len() as f64;
    let bp = phi_p.len() as f64;
    let dp = phi_p.iter().map(|p| -1.0 / (bp * p)).collect();
    let du = vec![1.0 / sum_u; phi_u.len()];
    Ok((log_mean_u - mean_log_p, dp, du))
}

/// Consistency term for one mixed pair: `(log target - log phi_mix)^2`.
/// Returns the loss and its derivative with respect to `phi_mix`.
pub fn mixup_term(phi_mix: f64, target: f64) -> (f64, f64) {
    let diff = target.ln() - phi_mix.ln();
    (diff * diff, -2.0 * diff / phi_mix)
}

/// MixUp target: `gamma * 1 + (1 - gamma) * phi(unlabeled)`.
pub fn mixup_target(gamma: f64, phi_unl: f64) -> f64 {
    gamma + (1.0 - gamma) * phi_unl
}

/// uPU risk from outputs with logistic losses `l+ = -log phi`, `l- = -log(1 - phi)`.
pub fn upu_risk_values(phi_p: &[f64], phi_u: &[f64], prior: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if phi_p.is_empty() || phi_u.is_empty() {
        return Err(Error::EmptyBatch("uPU batch"));
    }
    let bp = phi_p.len() as f64;
    let bu = phi_u.len() as f64;
    let mut risk = 0.0;
    let mut dp = Vec::with_capacity(phi_p.len());
    for &p in phi_p {
        risk += prior * (-p.ln() + (1.0 - p).ln()) / bp;
        dp.push(prior * (-1.0 / p - 1.0 / (1.0 - p)) / bp);
    }
    let mut du = Vec::with_capacity(phi_u.len());
    for &p in phi_u {
        risk += -(1.0 - p).ln() / bu;
        du.push(1.0 / ((1.0 - p) * bu));
    }
    Ok((risk, dp, du))
}

/// Class-weighted cross-entropy `prior * E_P[-log phi] + (1 - prior) * E_N[-log(1 - phi)]`.
pub fn pn_loss_values(phi_p: &[f64], phi_n: &[f64], prior: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if phi_p.is_empty() || phi_n.is_empty() {
        return Err(Error::EmptyBatch("PN batch"));
    }
    let bp = phi_p.len() as f64;
    let bn = phi_n.len() as f64;
    let mut loss = 0.0;
    let dp = phi_p
        .iter()
        .map(|&p| {
            loss += -prior * p.ln() / bp;
            -prior / (p * bp)
        })
        .collect();
    let dn = phi_n
        .iter()
        .map(|&p| {
            loss += -(1.0 - prior) * (1.0 - p).ln() / bn;
            (1.0 - prior) / ((1.0 - p) * bn)
        })
        .collect();
    Ok((loss, dp, dn))
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Variational term (VPU), risk (uPU) or cross-entropy (PN).
    pub main: f64,
    /// MixUp consistency term; zero for the baselines.
    pub reg: f64,
    pub total: f64,
}

/// One MixUp pairing: positive index, unlabeled index, weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixPair {
    pub pos: usize,
    pub unl: usize,
    pub gamma: f64,
}

/// Draws one pair per positive, matched with the unlabeled item at the same
/// index (wrapping), with `gamma ~ Beta(sigma, sigma)`.
pub fn draw_mix_pairs<R: Rng + ?Sized>(n_pos: usize, n_unl: usize, sigma: f64, rng: &mut R) -> Result<Vec<MixPair>> {
    let beta = Beta::new(sigma, sigma).map_err(|e| Error::Config(format!("beta({sigma}): {e}")))?;
    Ok((0..n_pos)
        .map(|i| MixPair {
            pos: i,
            unl: i % n_unl,
            gamma: beta.sample(rng),
        })
        .collect())
}

/// Full VPU objective `L_var + lambda * L_reg` and its gradient.
///
/// Targets of the consistency term use `phi` of the unlabeled items from the
/// same forward pass, treated as constants. `frozen_targets` overrides them,
/// which lets a finite-difference check hold the targets fixed.
pub fn vpu_objective(
    net: &FilterNet,
    batch_p: &[Architecture],
    batch_u: &[Architecture],
    pairs: &[MixPair],
    lambda: f64,
    frozen_targets: Option<&[f64]>,
) -> Result<(LossParts, Gradients, Vec<f64>)> {
    if batch_p.is_empty() {
        return Err(Error::EmptyBatch("positive batch"));
    }
    if batch_u.is_empty() {
        return Err(Error::EmptyBatch("unlabeled batch"));
    }
    let use_reg = lambda != 0.0 && !pairs.is_empty();
    let mut inputs: Vec<Input> = batch_p.iter().map(Input::Path).collect();
    inputs.extend(batch_u.iter().map(Input::Path));
    if use_reg {
        inputs.extend(pairs.iter().map(|m| Input::Mixed {
            pos: &batch_p[m.pos],
            unl: &batch_u[m.unl],
            gamma: m.gamma,
        }));
    }
    let tape = net.forward_tape(&inputs)?;
    let phi = tape.phi();
    let (np, nu) = (batch_p.len(), batch_u.len());
    let (phi_p, phi_u) = (&phi[..np], &phi[np..np + nu]);
    let (l_var, dp, du) = variational_loss(phi_p, phi_u)?;
    let mut dphi = Vec::with_capacity(phi.len());
    dphi.extend(dp);
    dphi.extend(du);

    let mut targets = Vec::new();
    let mut l_reg = 0.0;
    if use_reg {
        let phi_mix = &phi[np + nu..];
        let n = pairs.len() as f64;
        for (i, m) in pairs.iter().enumerate() {
            let t = match frozen_targets {
                Some(ts) => ts[i],
                None => mixup_target(m.gamma, phi_u[m.unl]),
            };
            targets.push(t);
            let (l, d) = mixup_term(phi_mix[i], t);
            l_reg += l / n;
            dphi.push(lambda * d / n);
        }
    }
    let grads = net.backward(&tape, &dphi)?;
    Ok((
        LossParts {
            main: l_var,
            reg: l_reg,
            total: l_var + lambda * l_reg,
        },
        grads,
        targets,
    ))
}

/// Baseline objectives (uPU on P/U, PN on P/N) and their gradients.
pub fn baseline_objective(
    net: &FilterNet,
    batch_p: &[Architecture],
    batch_other: &[Architecture],
    objective: &Objective,
) -> Result<(LossParts, Gradients)> {
    let mut inputs: Vec<Input> = batch_p.iter().map(Input::Path).collect();
    inputs.extend(batch_other.iter().map(Input::Path));
    let tape = net.forward_tape(&inputs)?;
    let phi = tape.phi();
    let (phi_p, phi_o) = phi.split_at(batch_p.len());
    let (loss, dp, dother) = match objective {
        Objective::Upu { prior } => upu_risk_values(phi_p, phi_o, *prior)?,
        Objective::Pn { prior } => pn_loss_values(phi_p, phi_o, *prior)?,
        Objective::Vpu { .. } => {
            return Err(Error::Config("VPU is not a baseline objective".into()))
        }
    };
    let mut dphi = dp;
    dphi.extend(dother);
    let grads = net.backward(&tape, &dphi)?;
    Ok((
        LossParts {
            main: loss,
            reg: 0.0,
            total: loss,
        },
        grads,
    ))
}

/// Value-only uPU risk of `net` on two batches.
pub fn upu_risk(net: &FilterNet, batch_p: &[Architecture], batch_u: &[Architecture], cfg: &UpuConfig) -> Result<f64> {
    cfg.validate()?;
    let phi_p = net.forward(batch_p)?;
    let phi_u = net.forward(batch_u)?;
    Ok(upu_risk_values(&phi_p, &phi_u, cfg.prior)?.0)
}

/// Value-only supervised loss; fails without ground-truth negatives.
pub fn pn_supervised_loss(
    net: &FilterNet,
    batch_p: &[Architecture],
    batch_n: Option<&[Architecture]>,
    prior: f64,
) -> Result<f64> {
    let batch_n = batch_n.ok_or_else(|| Error::MissingGroundTruth("PN needs negatives".into()))?;
    let phi_p = net.forward(batch_p)?;
    let phi_n = net.forward(batch_n)?;
    Ok(pn_loss_values(&phi_p, &phi_n, prior)?.0)
}

/// Value-only VPU loss with fresh MixUp weights.
pub fn vpu_total_loss<R: Rng + ?Sized>(
    net: &FilterNet,
    batch_p: &[Architecture],
    batch_u: &[Architecture],
    cfg: &VpuConfig,
    rng: &mut R,
) -> Result<LossParts> {
    let pairs = draw_mix_pairs(batch_p.len(), batch_u.len(), cfg.mix_beta, rng)?;
    Ok(vpu_objective(net, batch_p, batch_u, &pairs, cfg.lambda, None)?.0)
}

/// Per-iteration loss components of a training round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<LossParts>,
}

impl LossTrace {
    /// CSV with columns iteration, L_var, L_reg, total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,L_var,L_reg,total\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", i, r.main, r.reg, r.total);
        }
        out
    }
}

/// Settings of one filter-training round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub iterations: usize,
}

fn draw_batch<R: Rng + ?Sized>(pool: &[Architecture], n: usize, rng: &mut R) -> Vec<Architecture> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
}

/// Runs `iterations` Adam steps. Each step draws equal-size batches with
/// replacement from the positive set and from the unlabeled set (or the
/// negative set for PN). The net keeps any previous weights.
pub fn train_filter_round<R: Rng + ?Sized>(
    net: &mut FilterNet,
    adam: &mut AdamState,
    data: &PuDatasets,
    cfg: &RoundConfig,
    rng: &mut R,
) -> Result<LossTrace> {
    let mut trace = LossTrace::default();
    if cfg.iterations == 0 {
        return Ok(trace);
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch size must be >= 2".into()));
    }
    if data.positives.is_empty() {
        return Err(Error::EmptyBatch("positive set"));
    }
    let other: Vec<Architecture> = match &cfg.objective {
        Objective::Pn { prior } => {
            UpuConfig { prior: *prior }.validate()?;
            data.negatives
                .clone()
                .filter(|n| !n.is_empty())
                .ok_or_else(|| Error::MissingGroundTruth("PN training needs negatives".into()))?
        }
        Objective::Upu { prior } => {
            UpuConfig { prior: *prior }.validate()?;
            data.unlabeled.iter().cloned().collect()
        }
        Objective::Vpu { .. } => data.unlabeled.iter().cloned().collect(),
    };
    if other.is_empty() {
        return Err(Error::EmptyBatch("unlabeled set"));
    }
    for _ in 0..cfg.iterations {
        let bp = draw_batch(&data.positives, cfg.batch_size, rng);
        let bo = draw_batch(&other, cfg.batch_size, rng);
        let (parts, grads) = match &cfg.objective {
            Objective::Vpu { mix_beta, lambda } => {
                let pairs = draw_mix_pairs(bp.len(), bo.len(), *mix_beta, rng)?;
                let (parts, grads, _) = vpu_objective(net, &bp, &bo, &pairs, *lambda, None)?;
                (parts, grads)
            }
            obj => baseline_objective(net, &bp, &bo, obj)?,
        };
        net.adam_step(adam, &grads)?;
        trace.rows.push(parts);
    }
    Ok(trace)
}

/// Fresh Adam state for `net`.
pub fn new_optimizer(net: &FilterNet, cfg: AdamConfig) -> AdamState {
    net.new_adam(cfg)
}

/// Weak-path decision `phi(a) > threshold`.
pub fn is_weak<S: PathScorer + ?Sized>(scorer: &S, a: &Architecture, threshold: f64) -> Result<bool> {
    Ok(scorer.score_one(a)? > threshold)
}
