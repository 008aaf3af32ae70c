//! Self-checks run by the `verify` command.
//!
//! Every check compares the library against an independent evaluation:
//! loss formulas written with explicitly exponentiated probability ratios,
//! central finite differences, or the brute-force solvers in [`crate::oracle`].

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::constraints::{check_lemma1, ConstraintSpec};
use crate::data::PreferenceRecord;
use crate::error::Result;
use crate::losses::Preset;
use crate::model::{ModelPair, PolicyModel};
use crate::oracle::{self, PairLoss};
use crate::rng::{rng_from_seed, LabRng};
use crate::trainer::{loss_and_grad, Objective, PenaltyReduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check_name: String,
    pub status: Status,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { check_name: name.to_string(), status: if pass { Status::Pass } else { Status::Fail }, detail }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const EQUIVALENCE_INSTANCES: usize = 1000;
pub const LEMMA_TOL: f64 = 1e-12;
pub const LEMMA_SAMPLES: usize = 10_000;
pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_INSTANCES: usize = 50;
pub const PROPOSITION_TRIALS: usize = 100;
pub const GRID_RESOLUTION: usize = 1000;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn normal_row(rng: &mut LabRng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.sample(StandardNormal)).collect()
}

fn softmax_naive(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

struct Instance {
    pair: ModelPair,
    /// π_θ(y) / π_ref(y), from exponentiated probabilities.
    ratio: Vec<f64>,
    beta: f64,
}

fn random_instance(rng: &mut LabRng, k: usize) -> Instance {
    let theta = normal_row(rng, k);
    let reference = normal_row(rng, k);
    let (pt, pr) = (softmax_naive(&theta), softmax_naive(&reference));
    let ratio = pt.iter().zip(&pr).map(|(a, b)| a / b).collect();
    let beta = 10f64.powf(rng.random_range(-2.0..=1.0));
    let pair = ModelPair::new(
        PolicyModel::tabular(vec![theta]).expect("shape"),
        PolicyModel::tabular(vec![reference]).expect("shape"),
    )
    .expect("same space");
    Instance { pair, ratio, beta }
}

fn distinct(rng: &mut LabRng, k: usize, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, k, n).into_vec()
}

/// `log(1 + (ratio_l / ratio_w)^β)`, the DPO summand.
fn naive_dpo(ratio_w: f64, ratio_l: f64, beta: f64) -> f64 {
    ((ratio_l / ratio_w).powf(beta)).ln_1p()
}

/// Checks each preset's value against its textbook formula.
pub fn check_loss_equivalence(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng_from_seed(seed);
    let k = 6;
    let mut worst = [0.0f64; 6];
    for _ in 0..EQUIVALENCE_INSTANCES {
        let inst = random_instance(&mut rng, k);
        let ys = distinct(&mut rng, k, 2);
        let (w, l) = (ys[0], ys[1]);
        let (rw, rl, b) = (inst.ratio[w], inst.ratio[l], inst.beta);
        let rec = PreferenceRecord::pair(0, w, l)?;

        let dpo = Preset::Dpo.loss(&inst.pair, b, &rec)?;
        worst[0] = worst[0].max(rel_err(dpo, naive_dpo(rw, rl, b)));

        let eps = rng.random_range(0.01..0.49);
        let cdpo = Preset::Cdpo { epsilon: eps }.loss(&inst.pair, b, &rec)?;
        let cdpo_ref = (1.0 - eps) * naive_dpo(rw, rl, b) + eps * naive_dpo(rl, rw, b);
        worst[1] = worst[1].max(rel_err(cdpo, cdpo_ref));

        let rho = rw / rl;
        let ipo = Preset::Ipo.loss(&inst.pair, b, &rec)?;
        let ipo_ref = b * b * (rho.ln() - 1.0 / (2.0 * b)).powi(2);
        worst[2] = worst[2].max(rel_err(ipo, ipo_ref));

        let n = rng.random_range(2..=5);
        let ranking = distinct(&mut rng, k, n);
        let list = PreferenceRecord::list(0, ranking.clone())?;
        let pl = Preset::DpoPl.loss(&inst.pair, b, &list)?;
        // −log Π_i ρ_i^β / Σ_{j≥i} ρ_j^β, one log1p term per stage.
        let pl_ref: f64 = (0..n - 1)
            .map(|i| {
                let head = inst.ratio[ranking[i]];
                ranking[i + 1..].iter().map(|&y| (inst.ratio[y] / head).powf(b)).sum::<f64>().ln_1p()
            })
            .sum();
        worst[3] = worst[3].max(rel_err(pl, pl_ref));

        let (sw, sl): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let scored = PreferenceRecord::scored(0, w, l, sw, sl)?;
        let distilled = Preset::DistilledDpo.loss(&inst.pair, b, &scored)?;
        let distilled_ref = (b * rho.ln() - (sw - sl)).powi(2);
        worst[4] = worst[4].max(rel_err(distilled, distilled_ref));

        let rpo = Preset::Rpo.loss(&inst.pair, b, &scored)?;
        let (tw, tl) = (sw.exp() / (sw.exp() + sl.exp()), sl.exp() / (sw.exp() + sl.exp()));
        let kl = tw * (tw.ln() + naive_dpo(rw, rl, b)) + tl * (tl.ln() + naive_dpo(rl, rw, b));
        let entropy = -(tw * tw.ln() + tl * tl.ln());
        worst[5] = worst[5].max(rel_err(rpo, kl + entropy));
    }
    let names = [
        "loss_equivalence_dpo",
        "loss_equivalence_cdpo",
        "loss_equivalence_ipo",
        "loss_equivalence_plackett_luce",
        "loss_equivalence_distilled_dpo",
        "loss_equivalence_rpo",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(name, e)| {
            CheckResult::new(
                name,
                e <= EQUIVALENCE_TOL,
                format!("max rel error {e:.3e} over {EQUIVALENCE_INSTANCES} instances (tol {EQUIVALENCE_TOL:e})"),
            )
        })
        .collect())
}

pub fn check_lemma(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..LEMMA_SAMPLES {
        let a = 10f64.powf(rng.random_range(-8.0..=8.0));
        let b = 10f64.powf(rng.random_range(-8.0..=8.0));
        worst = worst.max(check_lemma1(a, b)?);
    }
    Ok(CheckResult::new(
        "log_sum_identity",
        worst <= LEMMA_TOL,
        format!("max defect {worst:.3e} over {LEMMA_SAMPLES} pairs in [1e-8, 1e8]^2 (tol {LEMMA_TOL:e})"),
    ))
}

/// Random model pair over `prompts × k` responses; linear models use
/// `dim`-dimensional Gaussian features.
pub fn random_model_pair(rng: &mut LabRng, prompts: usize, k: usize, linear: Option<usize>) -> ModelPair {
    let make = |rng: &mut LabRng| match linear {
        None => PolicyModel::tabular((0..prompts).map(|_| normal_row(rng, k)).collect()).expect("shape"),
        Some(d) => {
            let features = (0..prompts).map(|_| (0..k).map(|_| normal_row(rng, d)).collect()).collect();
            PolicyModel::linear(features, normal_row(rng, d)).expect("shape")
        }
    };
    let theta = make(rng);
    let reference = make(rng);
    match (linear, theta) {
        (Some(_), t) => {
            // Share features so θ and ref differ only in weights.
            let w = t.parameters().to_vec();
            let mut th = reference.clone();
            th.parameters_mut().copy_from_slice(&w);
            ModelPair::new(th, reference).expect("same space")
        }
        (None, t) => ModelPair::new(t, reference).expect("same space"),
    }
}

/// Records of the shape `objective` consumes.
pub fn random_records(rng: &mut LabRng, objective: &Objective, prompts: usize, k: usize, n: usize) -> Vec<PreferenceRecord> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0..prompts);
            match objective.base {
                Preset::DpoPl => {
                    let len = rng.random_range(2..=k);
                    PreferenceRecord::list(x, distinct(rng, k, len)).expect("distinct")
                }
                Preset::Rpo | Preset::DistilledDpo => {
                    let ys = distinct(rng, k, 2);
                    PreferenceRecord::scored(x, ys[0], ys[1], rng.sample(StandardNormal), rng.sample(StandardNormal))
                        .expect("distinct")
                }
                _ => {
                    let ys = distinct(rng, k, 2);
                    PreferenceRecord::pair(x, ys[0], ys[1]).expect("distinct")
                }
            }
        })
        .collect()
}

/// Max-norm relative error between the analytic gradient and central
/// differences, or `None` when an ℓ1 residual sits within 1e-8 of its kink.
pub fn gradient_error(pair: &ModelPair, beta: f64, objective: &Objective, records: &[PreferenceRecord]) -> Result<Option<f64>> {
    let refs: Vec<&PreferenceRecord> = records.iter().collect();
    if let Some(c) = objective.constraint {
        if c.norm == crate::constraints::Norm::L1 {
            for r in records {
                if crate::constraints::residual(pair, r, c.phi)?.abs() < 1e-8 {
                    return Ok(None);
                }
            }
        }
    }
    let (_, grad) = loss_and_grad(pair, beta, objective, &refs)?;
    let mut probe = pair.clone();
    let mut fd = vec![0.0; grad.len()];
    for (i, slot) in fd.iter_mut().enumerate() {
        let orig = probe.theta().parameters()[i];
        probe.theta_mut().parameters_mut()[i] = orig + GRAD_STEP;
        let up = loss_and_grad(&probe, beta, objective, &refs)?.0;
        probe.theta_mut().parameters_mut()[i] = orig - GRAD_STEP;
        let down = loss_and_grad(&probe, beta, objective, &refs)?.0;
        probe.theta_mut().parameters_mut()[i] = orig;
        *slot = (up - down) / (2.0 * GRAD_STEP);
    }
    let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = grad.iter().chain(&fd).map(|v| v.abs()).fold(0.0, f64::max);
    Ok(Some(if scale == 0.0 { diff } else { diff / scale }))
}

/// All six presets and four constrained variants, on tabular and linear models.
pub fn gradient_objectives(rng: &mut LabRng) -> Vec<Objective> {
    let mut out: Vec<Objective> = Preset::NAMES
        .iter()
        .map(|n| Objective::plain(Preset::from_name(n, rng.random_range(0.05..0.45)).expect("known")))
        .collect();
    for name in ConstraintSpec::VARIANTS {
        let cons = ConstraintSpec::from_variant_name(name, rng.random_range(0.1..1.0)).expect("known").expect("valid");
        out.push(Objective::constrained(Preset::Dpo, cons, PenaltyReduction::PerExample).expect("pair base"));
    }
    out
}

pub fn check_gradients(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_from_seed(seed);
    let (prompts, k, dim) = (2, 5, 4);
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut count = 0usize;
    let mut skipped = 0usize;
    for linear in [None, Some(dim)] {
        for objective in gradient_objectives(&mut rng) {
            for _ in 0..GRAD_INSTANCES {
                let pair = random_model_pair(&mut rng, prompts, k, linear);
                let records = random_records(&mut rng, &objective, prompts, k, 3);
                let beta = rng.random_range(0.2..2.0);
                match gradient_error(&pair, beta, &objective, &records)? {
                    Some(e) => {
                        count += 1;
                        if e > worst {
                            worst = e;
                            worst_name = format!("{} ({})", objective.name(), if linear.is_some() { "linear" } else { "tabular" });
                        }
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    Ok(CheckResult::new(
        "gradient_finite_difference",
        worst <= GRAD_TOL,
        format!(
            "max rel error {worst:.3e} at {worst_name} over {count} instances, {skipped} skipped at an l1 kink (tol {GRAD_TOL:e}, step {GRAD_STEP:e})"
        ),
    ))
}

pub fn check_underspecified_optimum() -> Result<CheckResult> {
    let inst = oracle::remark3_instance();
    let eta = oracle::eta(&inst);
    let cases = oracle::verify_remark3();
    let grid = oracle::grid_solve(&inst, PairLoss::SoftLabelKl, None, GRID_RESOLUTION)?;
    let max_dev = grid.near_optimal.iter().map(|p| ((p.q_w / p.q_l - eta) / eta).abs()).fold(0.0, f64::max);
    let decades = grid.q_w_decades();
    let pass = eta == 20.0
        && cases[0].on_line
        && !cases[1].on_line
        && cases[1].ratio == 5.0
        && cases[2].on_line
        && decades >= 2.0
        && max_dev <= 0.02;
    Ok(CheckResult::new(
        "underspecified_optimum",
        pass,
        format!(
            "eta = {eta}; (0.4, 0.02) on line: {}; (0.001, 0.0002) ratio {} on line: {}; (0.004, 0.0002) on line: {}; \
             near-optimal set of {} points spans {decades:.2} decades of q_w with max |q_w/q_l - eta|/eta = {max_dev:.3e}",
            cases[0].on_line,
            cases[1].ratio,
            cases[1].on_line,
            cases[2].on_line,
            grid.near_optimal.len()
        ),
    ))
}

/// Constrained pair trials (winner up, loser down, unique optimum)
/// and the identity-constraint conservation bound on the same trials.
pub fn check_proposition(seed: u64) -> Result<(CheckResult, CheckResult)> {
    let mut rng = rng_from_seed(seed);
    let report = oracle::verify_proposition(PROPOSITION_TRIALS, GRID_RESOLUTION, &mut rng)?;
    let violations = report.violations();
    let ratio = report.max_diameter_ratio();
    let prop = CheckResult::new(
        "constrained_optimum_direction",
        violations.is_empty() && ratio <= 0.5,
        match violations.first() {
            None => format!(
                "{} trials ({} instances x 4 phi): winner up and loser down in all; max diameter ratio {ratio:.4} when resolution doubles",
                report.trials.len(),
                PROPOSITION_TRIALS
            ),
            Some(v) => format!("{} violations, first: {v:?}; max diameter ratio {ratio:.4}", violations.len()),
        },
    );
    let identity: Vec<_> = report.trials.iter().filter(|t| t.conservation_defect.is_some()).collect();
    let defect = identity.iter().filter_map(|t| t.conservation_defect).fold(0.0, f64::max);
    let bounded = identity.iter().all(|t| t.gain_bounded == Some(true));
    let cons = CheckResult::new(
        "identity_conservation",
        defect <= 1e-10 && bounded,
        format!(
            "{} identity trials: max |q_w + q_l - ref_w - ref_l| = {defect:.3e}, winner gain bounded by ref_l in all: {bounded}",
            identity.len()
        ),
    );
    Ok((prop, cons))
}

/// Every check in order, with elapsed seconds appended to each detail.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
        let t = Instant::now();
        let out = f()?;
        Ok((out, t.elapsed().as_secs_f64()))
    }
    let stamp = |mut c: CheckResult, s: f64| {
        c.detail.push_str(&format!(" [{s:.2}s]"));
        c
    };
    let mut out = Vec::new();
    let (eq, s) = timed(|| check_loss_equivalence(seed))?;
    out.extend(eq.into_iter().map(|c| stamp(c, s)));
    let (c, s) = timed(|| check_lemma(seed))?;
    out.push(stamp(c, s));
    let (c, s) = timed(|| check_gradients(seed))?;
    out.push(stamp(c, s));
    let (c, s) = timed(check_underspecified_optimum)?;
    out.push(stamp(c, s));
    let ((p, c), s) = timed(|| check_proposition(seed))?;
    out.push(stamp(p, s));
    out.push(stamp(c, s));
    Ok(out)
}
