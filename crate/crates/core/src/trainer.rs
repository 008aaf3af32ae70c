//! Gradient descent on the trainable policy for any composed objective.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::constraints::{evaluate_residual, penalty, penalty_derivative, ConstraintSpec, Phi};
use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::losses::Preset;
use crate::model::{ModelPair, PolicyModel};
use crate::rng::rng_from_seed;

/// How per-record penalties are combined over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyReduction {
    /// Mean over records of `λ · penalty(r_i)`.
    #[default]
    PerExample,
    /// `λ · penalty(mean_i r_i)`.
    BatchMean,
}

/// A preset loss, optionally with a constraint penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub base: Preset,
    pub constraint: Option<ConstraintSpec>,
    pub reduction: PenaltyReduction,
}

impl Objective {
    pub fn plain(base: Preset) -> Self {
        Self { base, constraint: None, reduction: PenaltyReduction::PerExample }
    }

    pub fn constrained(base: Preset, constraint: ConstraintSpec, reduction: PenaltyReduction) -> Result<Self> {
        if !base.is_pair_preset() {
            return Err(Error::config(format!(
                "{} needs a pair preset as its base, got \"{}\"",
                constraint.variant_name(),
                base.name()
            )));
        }
        Ok(Self { base, constraint: Some(constraint), reduction })
    }

    /// Name used in configs: the variant name if constrained, else the preset.
    pub fn name(&self) -> &'static str {
        match &self.constraint {
            Some(c) => c.variant_name(),
            None => self.base.name(),
        }
    }

    /// `φ` used for the logged mean residual.
    pub fn residual_phi(&self) -> Phi {
        self.constraint.map_or(Phi::Log, |c| c.phi)
    }

    fn active_constraint(&self) -> Option<ConstraintSpec> {
        self.constraint.filter(|c| c.lambda != 0.0)
    }
}

/// Mean objective over `records` and its gradient w.r.t. θ's parameters.
pub fn loss_and_grad(
    pair: &ModelPair,
    beta: f64,
    objective: &Objective,
    records: &[&PreferenceRecord],
) -> Result<(f64, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::config("cannot evaluate an empty batch"));
    }
    let theta = pair.theta();
    let mut grad = vec![0.0; theta.num_parameters()];
    let inv_n = 1.0 / records.len() as f64;
    let cons = objective.active_constraint();
    let mut total = 0.0;
    let mut residual_sum = 0.0;
    let mut residual_grads = Vec::new();
    for rec in records {
        let eval = objective.base.evaluate(pair, beta, rec)?;
        let mut loss = eval.loss;
        let mut coeffs = eval.coeffs;
        if let Some(c) = cons {
            let (w, l) = rec.winner_loser().expect("pair preset");
            let r = evaluate_residual(pair, rec, c.phi)?;
            match objective.reduction {
                PenaltyReduction::PerExample => {
                    loss += c.lambda * penalty(r.value, c.norm);
                    let g = c.lambda * penalty_derivative(r.value, c.norm);
                    coeffs.push((w, g * r.d_winner));
                    coeffs.push((l, g * r.d_loser));
                }
                PenaltyReduction::BatchMean => {
                    residual_sum += r.value;
                    residual_grads.push((rec.prompt(), w, l, r.d_winner, r.d_loser));
                }
            }
        }
        total += loss;
        for c in coeffs.iter_mut() {
            c.1 *= inv_n;
        }
        theta.accumulate_grad(rec.prompt(), &coeffs, &mut grad)?;
    }
    let mut mean = total * inv_n;
    if let (Some(c), PenaltyReduction::BatchMean) = (cons, objective.reduction) {
        let r_bar = residual_sum * inv_n;
        mean += c.lambda * penalty(r_bar, c.norm);
        let g = c.lambda * penalty_derivative(r_bar, c.norm) * inv_n;
        for (x, w, l, dw, dl) in residual_grads {
            theta.accumulate_grad(x, &[(w, g * dw), (l, g * dl)], &mut grad)?;
        }
    }
    Ok((mean, grad))
}

/// Mean objective value over `records`.
pub fn objective_value(pair: &ModelPair, beta: f64, objective: &Objective, records: &[&PreferenceRecord]) -> Result<f64> {
    // Shares the gradient path so logged losses match what is optimized.
    Ok(loss_and_grad(pair, beta, objective, records)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Size(usize),
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Size(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = BatchSize;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"full\" or a positive integer")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<BatchSize, E> {
                if v == "full" {
                    Ok(BatchSize::Full)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<BatchSize, E> {
                if v == 0 {
                    return Err(E::invalid_value(de::Unexpected::Unsigned(v), &self));
                }
                Ok(BatchSize::Size(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<BatchSize, E> {
                if v <= 0 {
                    return Err(E::invalid_value(de::Unexpected::Signed(v), &self));
                }
                Ok(BatchSize::Size(v as usize))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// Full-data objective, lower is better.
    Loss,
    /// Mean tracked winner probability, higher is better.
    WinnerProb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub metric: StopMetric,
    /// Logging intervals without improvement before stopping.
    pub patience: usize,
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    ConstraintSpec::DEFAULT_LAMBDA
}
fn default_base() -> String {
    "dpo".to_string()
}
fn default_batch() -> BatchSize {
    BatchSize::Full
}
fn default_log_every() -> usize {
    10
}
fn default_max_tracked() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// A preset name (`"dpo"`, ...) or a constrained variant (`"c3dpo_log_l2"`, ...).
    pub loss: String,
    /// Base preset for constrained variants.
    #[serde(default = "default_base")]
    pub base_loss: String,
    /// Label smoothing for `cdpo`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: BatchSize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
    #[serde(default)]
    pub penalty_reduction: PenaltyReduction,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_max_tracked")]
    pub max_tracked: usize,
}

impl TrainConfig {
    pub fn new(loss: &str, beta: f64, learning_rate: f64, steps: usize) -> Self {
        Self {
            loss: loss.to_string(),
            base_loss: default_base(),
            epsilon: default_epsilon(),
            lambda: default_lambda(),
            beta,
            learning_rate,
            steps,
            batch_size: BatchSize::Full,
            seed: 0,
            momentum: 0.0,
            early_stop: None,
            penalty_reduction: PenaltyReduction::PerExample,
            log_every: default_log_every(),
            max_tracked: default_max_tracked(),
        }
    }

    pub fn objective(&self) -> Result<Objective> {
        match ConstraintSpec::from_variant_name(&self.loss, self.lambda) {
            Some(cons) => {
                let base = Preset::from_name(&self.base_loss, self.epsilon)?;
                Objective::constrained(base, cons?, self.penalty_reduction)
            }
            None => Ok(Objective::plain(Preset::from_name(&self.loss, self.epsilon)?)),
        }
    }

    pub fn validate(&self) -> Result<Objective> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.beta) {
            return Err(Error::config(format!("beta must be finite and positive, got {}", self.beta)));
        }
        if !finite_pos(self.learning_rate) {
            return Err(Error::config(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 {
                return Err(Error::config("early_stop.patience must be positive"));
            }
        }
        self.objective()
    }
}

/// A pair whose probabilities are logged at every report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrackedPair {
    pub prompt: usize,
    pub winner: usize,
    pub loser: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairState {
    pub prob_w: f64,
    pub prob_l: f64,
    pub rhat_w: f64,
    pub rhat_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub loss: f64,
    pub mean_residual: f64,
    pub pairs: Vec<PairState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub beta: f64,
    pub tracked: Vec<TrackedPair>,
    pub rows: Vec<ReportRow>,
    /// Step whose parameters ended up in θ (differs from the last row only
    /// after early stopping).
    pub best_step: usize,
    #[serde(skip)]
    pub final_model: Option<PolicyModel>,
}

pub const CSV_HEADER: [&str; 8] = ["step", "loss", "mean_residual", "pair_id", "prob_w", "prob_l", "rhat_w", "rhat_l"];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    loss: f64,
    mean_residual: f64,
    pair_id: usize,
    prob_w: f64,
    prob_l: f64,
    rhat_w: f64,
    rhat_l: f64,
}

impl TrainReport {
    pub fn final_row(&self) -> Option<&ReportRow> {
        self.rows.iter().rev().find(|r| r.step == self.best_step).or(self.rows.last())
    }

    /// One row per tracked pair per logged step.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            for (pair_id, p) in row.pairs.iter().enumerate() {
                w.serialize(CsvRow {
                    step: row.step,
                    loss: row.loss,
                    mean_residual: row.mean_residual,
                    pair_id,
                    prob_w: p.prob_w,
                    prob_l: p.prob_l,
                    rhat_w: p.rhat_w,
                    rhat_l: p.rhat_l,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds the rows of a report written by [`Self::write_csv`]. Tracked
    /// pair identities and the model are not stored in the CSV.
    pub fn read_csv(path: &Path, beta: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(Error::Parse { line: 1, message: format!("unexpected metrics header {headers:?}") });
        }
        let mut rows: Vec<ReportRow> = Vec::new();
        for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
            let r = rec.map_err(|e| Error::Parse { line: i + 2, message: e.to_string() })?;
            let state = PairState { prob_w: r.prob_w, prob_l: r.prob_l, rhat_w: r.rhat_w, rhat_l: r.rhat_l };
            match rows.last_mut() {
                Some(last) if last.step == r.step => {
                    if r.pair_id != last.pairs.len() {
                        return Err(Error::Parse { line: i + 2, message: "pair ids out of order".into() });
                    }
                    last.pairs.push(state);
                }
                _ => {
                    if rows.last().is_some_and(|l| l.step >= r.step) || r.pair_id != 0 {
                        return Err(Error::Parse { line: i + 2, message: "steps must strictly increase".into() });
                    }
                    rows.push(ReportRow { step: r.step, loss: r.loss, mean_residual: r.mean_residual, pairs: vec![state] });
                }
            }
        }
        let best_step = rows.last().map_or(0, |r| r.step);
        Ok(Self { beta, tracked: Vec::new(), rows, best_step, final_model: None })
    }
}

/// Unique winner/loser pairs in data order; lists contribute (top, bottom).
pub fn tracked_pairs(records: &[PreferenceRecord], max: usize) -> Vec<TrackedPair> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in records {
        if out.len() >= max {
            break;
        }
        let (winner, loser) = match rec {
            PreferenceRecord::List { ranking, .. } => (ranking[0], ranking[ranking.len() - 1]),
            _ => rec.winner_loser().expect("pair-shaped"),
        };
        let t = TrackedPair { prompt: rec.prompt(), winner, loser };
        if seen.insert(t) {
            out.push(t);
        }
    }
    out
}

fn snapshot(
    pair: &ModelPair,
    beta: f64,
    objective: &Objective,
    all: &[&PreferenceRecord],
    tracked: &[TrackedPair],
    step: usize,
) -> Result<ReportRow> {
    let loss = objective_value(pair, beta, objective, all)?;
    let phi = objective.residual_phi();
    let mut sum = 0.0;
    let mut count = 0usize;
    for rec in all {
        if rec.winner_loser().is_some() {
            sum += evaluate_residual(pair, rec, phi)?.value;
            count += 1;
        }
    }
    let mean_residual = if count == 0 { 0.0 } else { sum / count as f64 };
    let mut pairs = Vec::with_capacity(tracked.len());
    for t in tracked {
        let lp = pair.theta().log_probs(t.prompt)?;
        pairs.push(PairState {
            prob_w: lp[t.winner].exp(),
            prob_l: lp[t.loser].exp(),
            rhat_w: pair.implicit_reward(beta, t.prompt, t.winner)?,
            rhat_l: pair.implicit_reward(beta, t.prompt, t.loser)?,
        });
    }
    Ok(ReportRow { step, loss, mean_residual, pairs })
}

fn stop_score(metric: StopMetric, row: &ReportRow) -> f64 {
    match metric {
        StopMetric::Loss => row.loss,
        StopMetric::WinnerProb => {
            if row.pairs.is_empty() {
                return 0.0;
            }
            -row.pairs.iter().map(|p| p.prob_w).sum::<f64>() / row.pairs.len() as f64
        }
    }
}

const STOP_TOL: f64 = 1e-12;

/// Runs `config.steps` descent updates on θ in place. With early stopping,
/// θ is left at the best logged parameters.
pub fn train(pair: &mut ModelPair, data: &[PreferenceRecord], config: &TrainConfig) -> Result<TrainReport> {
    let objective = config.validate()?;
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    let space = pair.space();
    for (i, rec) in data.iter().enumerate() {
        if !objective.base.accepts(rec.variant()) {
            return Err(Error::config(format!(
                "record {i} is a {} record, which loss \"{}\" cannot use",
                rec.variant().name(),
                objective.name()
            )));
        }
        rec.validate_in(space).map_err(|e| Error::config(format!("record {i}: {e}")))?;
    }
    let beta = config.beta;
    let all: Vec<&PreferenceRecord> = data.iter().collect();
    let tracked = tracked_pairs(data, config.max_tracked);
    let mut report = TrainReport { beta, tracked: tracked.clone(), rows: Vec::new(), best_step: 0, final_model: None };

    let fail = |report: &TrainReport, step: usize, detail: String| Error::NumericalFailure {
        step,
        detail,
        partial: Box::new(report.clone()),
    };

    let first = snapshot(pair, beta, &objective, &all, &tracked, 0)?;
    if !first.loss.is_finite() {
        return Err(fail(&report, 0, format!("initial loss is {}", first.loss)));
    }
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0usize;
    if let Some(es) = config.early_stop {
        best = Some((stop_score(es.metric, &first), 0, pair.theta().parameters().to_vec()));
    }
    report.rows.push(first);

    let batch = match config.batch_size {
        BatchSize::Full => data.len(),
        BatchSize::Size(b) => b.min(data.len()),
    };
    let mut rng = rng_from_seed(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut velocity = vec![0.0; pair.theta().num_parameters()];

    for step in 1..=config.steps {
        let batch_refs: Vec<&PreferenceRecord> = if batch == data.len() {
            all.clone()
        } else {
            if cursor + batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let out = order[cursor..cursor + batch].iter().map(|&i| &data[i]).collect();
            cursor += batch;
            out
        };
        let (loss, grad) = loss_and_grad(pair, beta, &objective, &batch_refs)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(fail(&report, step, format!("non-finite loss or gradient (loss = {loss})")));
        }
        let lr = config.learning_rate;
        let params = pair.theta_mut().parameters_mut();
        if config.momentum == 0.0 {
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        } else {
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(fail(&report, step, "parameters became non-finite".into()));
        }

        if step % config.log_every == 0 || step == config.steps {
            let row = snapshot(pair, beta, &objective, &all, &tracked, step)?;
            if !row.loss.is_finite() {
                return Err(fail(&report, step, format!("loss is {}", row.loss)));
            }
            let mut stop = false;
            if let (Some(es), Some((best_score, best_step, best_params))) = (config.early_stop, best.as_mut()) {
                let score = stop_score(es.metric, &row);
                if score < *best_score - STOP_TOL {
                    *best_score = score;
                    *best_step = step;
                    best_params.copy_from_slice(pair.theta().parameters());
                    since_best = 0;
                } else {
                    since_best += 1;
                    stop = since_best >= es.patience;
                }
            }
            report.rows.push(row);
            if stop {
                break;
            }
        }
    }

    report.best_step = report.rows.last().map_or(0, |r| r.step);
    if let Some((_, best_step, params)) = best {
        pair.theta_mut().parameters_mut().copy_from_slice(&params);
        report.best_step = best_step;
    }
    report.final_model = Some(pair.theta().clone());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCollapse {
    pub pair_id: usize,
    /// `min_t π_θ(y_w|x) / π_ref(y_w|x)` over logged steps.
    pub min_winner_ratio: f64,
    pub final_winner_ratio: f64,
    pub final_loser_ratio: f64,
    /// Final winner ratio below 1.
    pub collapsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub pairs: Vec<PairCollapse>,
    pub any_collapse: bool,
}

/// Collapse diagnostics from a report. Ratios are recovered from implicit
/// rewards as `exp(r̂ / β)`.
pub fn collapse_metrics(report: &TrainReport) -> Result<CollapseSummary> {
    let last = report.final_row().ok_or_else(|| Error::config("report has no rows"))?;
    let beta = report.beta;
    let ratio = |r: f64| (r / beta).exp();
    let mut pairs = Vec::with_capacity(last.pairs.len());
    for (pair_id, fin) in last.pairs.iter().enumerate() {
        let min_winner_ratio = report
            .rows
            .iter()
            .filter(|r| r.step <= last.step)
            .filter_map(|r| r.pairs.get(pair_id))
            .map(|p| ratio(p.rhat_w))
            .fold(f64::INFINITY, f64::min);
        let final_winner_ratio = ratio(fin.rhat_w);
        pairs.push(PairCollapse {
            pair_id,
            min_winner_ratio,
            final_winner_ratio,
            final_loser_ratio: ratio(fin.rhat_l),
            collapsed: final_winner_ratio < 1.0,
        });
    }
    let any_collapse = pairs.iter().any(|p| p.collapsed);
    Ok(CollapseSummary { pairs, any_collapse })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ModelPair, Vec<PreferenceRecord>) {
        let pair = ModelPair::from_reference(PolicyModel::tabular(vec![vec![0.0, 0.0]]).unwrap());
        (pair, vec![PreferenceRecord::pair(0, 0, 1).unwrap()])
    }

    #[test]
    fn zero_steps_only_logs_initial_row() {
        let (mut pair, data) = toy();
        let before = pair.theta().clone();
        let report = train(&mut pair, &data, &TrainConfig::new("dpo", 1.0, 0.1, 0)).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(pair.theta(), &before);
        let summary = collapse_metrics(&report).unwrap();
        assert_eq!(summary.pairs[0].final_winner_ratio, 1.0);
        assert_eq!(summary.pairs[0].final_loser_ratio, 1.0);
        assert!(!summary.any_collapse);
    }

    #[test]
    fn log_rows_and_final_step() {
        let (mut pair, data) = toy();
        let report = train(&mut pair, &data, &TrainConfig::new("dpo", 1.0, 0.1, 25)).unwrap();
        let steps: Vec<usize> = report.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
    }

    #[test]
    fn rejects_incompatible_records() {
        let (mut pair, _) = toy();
        let list = vec![PreferenceRecord::list(0, vec![0, 1]).unwrap()];
        assert!(matches!(train(&mut pair, &list, &TrainConfig::new("dpo", 1.0, 0.1, 1)), Err(Error::Config(_))));
        let pairs = vec![PreferenceRecord::pair(0, 0, 1).unwrap()];
        assert!(matches!(
            train(&mut pair, &pairs, &TrainConfig::new("rpo", 1.0, 0.1, 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(train(&mut pair, &[], &TrainConfig::new("dpo", 1.0, 0.1, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn bad_hyperparameters() {
        let (mut pair, data) = toy();
        for cfg in [
            TrainConfig::new("dpo", 0.0, 0.1, 1),
            TrainConfig::new("dpo", 1.0, f64::NAN, 1),
            TrainConfig::new("nope", 1.0, 0.1, 1),
        ] {
            assert!(matches!(train(&mut pair, &data, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn divergence_reports_partial_rows() {
        let (mut pair, data) = toy();
        let mut cfg = TrainConfig::new("ipo", 1.0, 1e300, 50);
        cfg.log_every = 1;
        match train(&mut pair, &data, &cfg) {
            Err(Error::NumericalFailure { partial, step, .. }) => {
                assert!(!partial.rows.is_empty());
                assert!(partial.rows.iter().all(|r| r.step < step));
            }
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn batch_size_serde() {
        let full: BatchSize = serde_json::from_str("\"full\"").unwrap();
        assert_eq!(full, BatchSize::Full);
        let n: BatchSize = serde_json::from_str("4").unwrap();
        assert_eq!(n, BatchSize::Size(4));
        assert!(serde_json::from_str::<BatchSize>("0").is_err());
        assert!(serde_json::from_str::<BatchSize>("\"half\"").is_err());
    }

    #[test]
    fn early_stop_keeps_best() {
        let (mut pair, data) = toy();
        let mut cfg = TrainConfig::new("ipo", 1.0, 0.9, 400);
        cfg.early_stop = Some(EarlyStop { metric: StopMetric::Loss, patience: 2 });
        let report = train(&mut pair, &data, &cfg).unwrap();
        let best = report.rows.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        let kept = report.rows.iter().find(|r| r.step == report.best_step).unwrap();
        assert!(kept.loss <= best + STOP_TOL);
    }
}
