//! A small linear-feature instance on which plain DPO collapses the winner
//! probability, and the DPO vs constrained comparison run on it.
//!
//! Each prompt owns a block of `K` weights. One response per prompt is a
//! *sink* with feature `(1+γ)·e_s`; the tracked loser is uncoupled (`e_l`);
//! every other response, the winner included, has `e_y + γ·e_s`. Pushing the
//! winner up along `Φ_w − Φ_l` then raises the sink logit by `γ(1+γ)`,
//! faster than the winner's own `1+γ²`, so mass drains into the sink.
//! The sink carries the lowest latent reward of its prompt.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSpec;
use crate::data::{LatentRewardTable, PreferenceRecord};
use crate::error::{Error, Result};
use crate::model::{ModelPair, PolicyModel, PromptSpace};
use crate::rng::{rng_from_seed, worker_rng};
use crate::trainer::{collapse_metrics, train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingInstance {
    pub space: PromptSpace,
    pub gamma: f64,
    pub reference: PolicyModel,
    pub sinks: Vec<usize>,
    pub rewards: LatentRewardTable,
    /// One winner/loser pair per prompt.
    pub pairs: Vec<PreferenceRecord>,
}

/// Builds the instance deterministically from `seed`. Reference logits are
/// standard normal draws.
pub fn build_coupling_instance(prompts: usize, k: usize, gamma: f64, seed: u64) -> Result<CouplingInstance> {
    if k < 3 {
        return Err(Error::config(format!("coupling instance needs k >= 3 (sink, winner, loser), got {k}")));
    }
    if !gamma.is_finite() {
        return Err(Error::config("gamma must be finite"));
    }
    let space = PromptSpace::new(prompts, k).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let d = prompts * k;
    let mut features = Vec::with_capacity(prompts);
    let mut weights = vec![0.0; d];
    let mut sinks = Vec::with_capacity(prompts);
    let mut rewards = Vec::with_capacity(prompts);
    let mut pairs = Vec::with_capacity(prompts);
    for x in 0..prompts {
        let base = x * k;
        let sink = rng.random_range(0..k);
        let logits: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let mut r: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let others: Vec<usize> = (0..k).filter(|&y| y != sink).collect();
        let min = others.iter().map(|&y| r[y]).fold(f64::INFINITY, f64::min);
        r[sink] = min - 1.0;
        let winner = *others.iter().max_by(|&&a, &&b| r[a].total_cmp(&r[b])).expect("k >= 3");
        let losers: Vec<usize> = others.iter().copied().filter(|&y| y != winner).collect();
        let loser = losers[rng.random_range(0..losers.len())];

        let mut rows = vec![vec![0.0; d]; k];
        for (y, row) in rows.iter_mut().enumerate() {
            if y == sink {
                row[base + sink] = 1.0 + gamma;
            } else if y == loser {
                row[base + y] = 1.0;
            } else {
                row[base + y] = 1.0;
                row[base + sink] = gamma;
            }
        }
        let w_sink = logits[sink] / (1.0 + gamma);
        for y in 0..k {
            weights[base + y] = if y == sink {
                w_sink
            } else if y == loser {
                logits[y]
            } else {
                logits[y] - gamma * w_sink
            };
        }
        features.push(rows);
        sinks.push(sink);
        rewards.push(r);
        pairs.push(PreferenceRecord::pair(x, winner, loser)?);
    }
    Ok(CouplingInstance {
        space,
        gamma,
        reference: PolicyModel::linear(features, weights)?,
        sinks,
        rewards: LatentRewardTable::new(rewards)?,
        pairs,
    })
}

/// `mean_x Σ_y π(y|x) r*(x, y)`.
pub fn expected_reward(model: &PolicyModel, rewards: &LatentRewardTable) -> Result<f64> {
    let n = model.space().num_prompts();
    let mut total = 0.0;
    for x in 0..n {
        let p = model.probs(x)?;
        total += p.iter().zip(rewards.row(x)?).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Head-to-head outcome counted in half wins so ties split exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinRate {
    pub half_wins: u64,
    pub total_half: u64,
}

impl WinRate {
    pub fn value(&self) -> f64 {
        self.half_wins as f64 / self.total_half as f64
    }
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Uniform pairs for [`win_rate_with_draws`]: `samples` per prompt.
pub fn draw_uniforms<R: Rng + ?Sized>(prompts: usize, samples: usize, rng: &mut R) -> Vec<(f64, f64)> {
    (0..prompts * samples).map(|_| (rng.random(), rng.random())).collect()
}

/// `P(r*(Y_A) > r*(Y_B)) + ½ P(=)` with `Y_A` drawn from `a` by inverse CDF
/// of the first uniform and `Y_B` from `b` by the second. Passing the same
/// draws with components swapped to `(b, a)` gives exactly the complement.
pub fn win_rate_with_draws(
    a: &PolicyModel,
    b: &PolicyModel,
    rewards: &LatentRewardTable,
    draws: &[(f64, f64)],
) -> Result<WinRate> {
    let n = a.space().num_prompts();
    if b.space() != a.space() || rewards.space() != a.space() {
        return Err(Error::config("win rate needs models and rewards over the same prompt space"));
    }
    if draws.is_empty() || !draws.len().is_multiple_of(n) {
        return Err(Error::config("draw count must be a positive multiple of the prompt count"));
    }
    let per = draws.len() / n;
    let mut half_wins = 0u64;
    for x in 0..n {
        let (pa, pb, r) = (a.probs(x)?, b.probs(x)?, rewards.row(x)?);
        for &(ua, ub) in &draws[x * per..(x + 1) * per] {
            let (ra, rb) = (r[inverse_cdf(&pa, ua)], r[inverse_cdf(&pb, ub)]);
            half_wins += if ra > rb {
                2
            } else if ra == rb {
                1
            } else {
                0
            };
        }
    }
    Ok(WinRate { half_wins, total_half: 2 * draws.len() as u64 })
}

/// Monte-Carlo win rate of `a` over `b`, averaged over prompts.
pub fn win_rate_proxy<R: Rng + ?Sized>(
    a: &PolicyModel,
    b: &PolicyModel,
    rewards: &LatentRewardTable,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::config("samples must be positive"));
    }
    let draws = draw_uniforms(a.space().num_prompts(), samples, rng);
    Ok(win_rate_with_draws(a, b, rewards, &draws)?.value())
}

fn default_prompts() -> usize {
    4
}
fn default_k() -> usize {
    8
}
fn default_gamma() -> f64 {
    1.5
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_lambdas() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0]
}
fn default_variants() -> Vec<String> {
    ConstraintSpec::VARIANTS.iter().map(|s| s.to_string()).collect()
}
fn default_beta() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    0.5
}
fn default_steps() -> usize {
    3000
}
fn default_samples() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseConfig {
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_samples")]
    pub win_rate_samples: usize,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            prompts: default_prompts(),
            k: default_k(),
            gamma: default_gamma(),
            seeds: default_seeds(),
            lambdas: default_lambdas(),
            variants: default_variants(),
            beta: default_beta(),
            learning_rate: default_lr(),
            steps: default_steps(),
            momentum: 0.0,
            win_rate_samples: default_samples(),
        }
    }
}

impl CollapseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        for v in &self.variants {
            if ConstraintSpec::from_variant_name(v, 0.0).is_none() {
                return Err(Error::config(format!("unknown constrained variant \"{v}\"")));
            }
        }
        for &l in &self.lambdas {
            ConstraintSpec::from_variant_name("c3dpo_log_l2", l).expect("known")?;
        }
        if self.win_rate_samples == 0 {
            return Err(Error::config("win_rate_samples must be positive"));
        }
        self.train_config("dpo", 0.0, 0).validate()?;
        Ok(())
    }

    pub fn train_config(&self, loss: &str, lambda: f64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(loss, self.beta, self.learning_rate, self.steps);
        cfg.lambda = lambda;
        cfg.seed = seed;
        cfg.momentum = self.momentum;
        cfg.log_every = (self.steps / 100).max(1);
        cfg
    }
}

/// Outcome of one training run in the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    /// `"dpo"` for the baseline, otherwise a constrained variant name.
    pub variant: String,
    pub lambda: f64,
    /// Smallest final `π_θ(y_w)/π_ref(y_w)` over tracked pairs.
    pub final_winner_ratio: f64,
    /// Largest final `π_θ(y_l)/π_ref(y_l)` over tracked pairs.
    pub final_loser_ratio: f64,
    pub collapse: bool,
    pub expected_reward: f64,
    /// Win-rate proxy against the DPO model of the same seed.
    pub win_rate_vs_dpo: f64,
    #[serde(skip)]
    pub model: Option<PolicyModel>,
}

impl RunOutcome {
    /// No collapse and every tracked loser below its reference probability.
    pub fn rescued(&self) -> bool {
        !self.collapse && self.final_loser_ratio < 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub dpo_collapsed: bool,
    /// Variants with at least one rescued λ.
    pub rescued_variants: Vec<String>,
    /// Rescued run with the highest expected latent reward.
    pub best_variant: Option<String>,
    pub best_lambda: Option<f64>,
    pub best_win_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseResults {
    pub runs: Vec<RunOutcome>,
    pub seeds: Vec<SeedSummary>,
}

fn run_one(inst: &CollapseInstanceRef<'_>, loss: &str, lambda: f64, cfg: &CollapseConfig) -> Result<RunOutcome> {
    let mut pair = ModelPair::from_reference(inst.instance.reference.clone());
    let report = train(&mut pair, &inst.instance.pairs, &cfg.train_config(loss, lambda, inst.seed))?;
    let summary = collapse_metrics(&report)?;
    let final_winner_ratio = summary.pairs.iter().map(|p| p.final_winner_ratio).fold(f64::INFINITY, f64::min);
    let final_loser_ratio = summary.pairs.iter().map(|p| p.final_loser_ratio).fold(0.0, f64::max);
    Ok(RunOutcome {
        seed: inst.seed,
        variant: loss.to_string(),
        lambda,
        final_winner_ratio,
        final_loser_ratio,
        collapse: summary.any_collapse,
        expected_reward: expected_reward(pair.theta(), &inst.instance.rewards)?,
        win_rate_vs_dpo: f64::NAN,
        model: Some(pair.theta().clone()),
    })
}

struct CollapseInstanceRef<'a> {
    seed: u64,
    instance: &'a CouplingInstance,
}

/// Runs DPO plus every (variant, λ) on each seed's instance, then scores
/// every run against that seed's DPO model with common random numbers.
pub fn run_collapse_experiment(cfg: &CollapseConfig) -> Result<CollapseResults> {
    cfg.validate()?;
    let instances: Vec<CouplingInstance> = cfg
        .seeds
        .iter()
        .map(|&s| build_coupling_instance(cfg.prompts, cfg.k, cfg.gamma, s))
        .collect::<Result<_>>()?;
    let mut jobs: Vec<(usize, String, f64)> = Vec::new();
    for i in 0..cfg.seeds.len() {
        jobs.push((i, "dpo".to_string(), 0.0));
        for v in &cfg.variants {
            for &l in &cfg.lambdas {
                jobs.push((i, v.clone(), l));
            }
        }
    }
    let mut runs: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|(i, loss, lambda)| {
            let inst = CollapseInstanceRef { seed: cfg.seeds[*i], instance: &instances[*i] };
            run_one(&inst, loss, *lambda, cfg)
        })
        .collect::<Result<_>>()?;

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let inst = &instances[i];
        let draws = draw_uniforms(cfg.prompts, cfg.win_rate_samples, &mut worker_rng(seed, 1));
        let dpo = runs
            .iter()
            .find(|r| r.seed == seed && r.variant == "dpo")
            .and_then(|r| r.model.clone())
            .expect("baseline run present");
        for r in runs.iter_mut().filter(|r| r.seed == seed) {
            let m = r.model.as_ref().expect("model kept");
            r.win_rate_vs_dpo = win_rate_with_draws(m, &dpo, &inst.rewards, &draws)?.value();
        }
        let seed_runs: Vec<&RunOutcome> = runs.iter().filter(|r| r.seed == seed).collect();
        let dpo_collapsed = seed_runs.iter().any(|r| r.variant == "dpo" && r.collapse);
        let rescued_variants = cfg
            .variants
            .iter()
            .filter(|v| seed_runs.iter().any(|r| &r.variant == *v && r.rescued()))
            .cloned()
            .collect();
        let best = seed_runs
            .iter()
            .filter(|r| r.variant != "dpo" && r.rescued())
            .max_by(|a, b| a.expected_reward.total_cmp(&b.expected_reward));
        seeds.push(SeedSummary {
            seed,
            dpo_collapsed,
            rescued_variants,
            best_variant: best.map(|r| r.variant.clone()),
            best_lambda: best.map(|r| r.lambda),
            best_win_rate: best.map(|r| r.win_rate_vs_dpo),
        });
    }
    Ok(CollapseResults { runs, seeds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_logits_match_construction() {
        let inst = build_coupling_instance(3, 5, 1.5, 4).unwrap();
        for x in 0..3 {
            let (w, l) = inst.pairs[x].winner_loser().unwrap();
            let s = inst.sinks[x];
            assert!(s != w && s != l);
            let r = inst.rewards.row(x).unwrap();
            assert!(r.iter().enumerate().all(|(y, &v)| y == s || v > r[s]));
            assert!(r.iter().enumerate().all(|(y, &v)| y == s || v <= r[w]));
        }
    }

    #[test]
    fn small_k_rejected() {
        assert!(matches!(build_coupling_instance(2, 2, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_cdf_edges() {
        assert_eq!(inverse_cdf(&[0.5, 0.5], 0.0), 0);
        assert_eq!(inverse_cdf(&[0.5, 0.5], 0.5), 1);
        assert_eq!(inverse_cdf(&[0.5, 0.5], 0.999_999_999), 1);
    }
}
