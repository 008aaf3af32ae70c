//! DPO-style algorithms as classification.
//!
//! The classifier assigns each candidate response a score
//! `h_y = β · (log π_θ(y|x) − log π_ref(y|x))` (the implicit reward) and
//! predicts `softmax(h)` over the candidates; the prompt partition function
//! never appears. A DPO-style loss is then a target label distribution plus
//! a classification loss, see [`Preset`].
//!
//! All class probabilities and losses are computed from score differences
//! through log-sigmoid / log-sum-exp.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{check_distinct, PreferenceRecord, RecordVariant};
use crate::error::{Error, Result};
use crate::math::{log_sigmoid, log_softmax, sigmoid};
use crate::model::ModelPair;

/// How the target class distribution is built from a record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelSpec {
    /// `(1, 0)`.
    Hard,
    /// `(1 − ε, ε)` with `0 < ε < 1/2`.
    SoftEps(f64),
    /// `(σ(1/2), σ(−1/2))`.
    Ipo,
    /// `softmax(s_w, s_l)` from auxiliary scores.
    ScoreDerived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredLogRatio,
}

/// Classifier output over a set of candidates, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProb {
    scores: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ClassProb {
    /// Softmax of `scores`. Pairs use `log σ(±(h_w − h_l))` so that both
    /// components are accurate even when one of them is tiny.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let log_probs = if scores.len() == 2 {
            let d = scores[0] - scores[1];
            vec![log_sigmoid(d), log_sigmoid(-d)]
        } else {
            log_softmax(&scores)
        };
        Self { scores, log_probs }
    }

    /// Pair classifier whose winner-minus-loser score difference is `margin`.
    pub fn from_margin(margin: f64) -> Self {
        Self::from_scores(vec![margin, 0.0])
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_pair(&self) -> bool {
        self.scores.len() == 2
    }

    /// Implicit rewards `h_y` in candidate order.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        if self.is_pair() {
            vec![self.p_w(), self.p_l()]
        } else {
            self.log_probs.iter().map(|l| l.exp()).collect()
        }
    }

    pub fn p_w(&self) -> f64 {
        sigmoid(self.scores[0] - self.scores[1])
    }

    pub fn p_l(&self) -> f64 {
        sigmoid(self.scores[1] - self.scores[0])
    }

    /// `log(p_w / p_l) = h_w − h_l` for pairs.
    pub fn log_odds(&self) -> Option<f64> {
        self.is_pair().then(|| self.scores[0] - self.scores[1])
    }
}

/// Target distribution on the simplex, with its exact log-odds for pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    probs: Vec<f64>,
    log_odds: Option<f64>,
}

impl Target {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("target must be a probability vector with at least 2 entries"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("target sums to {total}, not 1")));
        }
        let log_odds = (probs.len() == 2).then(|| probs[0].ln() - probs[1].ln());
        Ok(Self { probs, log_odds })
    }

    fn pair(p_w: f64, p_l: f64, log_odds: f64) -> Self {
        Self { probs: vec![p_w, p_l], log_odds: Some(log_odds) }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_odds(&self) -> Option<f64> {
        self.log_odds
    }

    pub fn entropy(&self) -> f64 {
        crate::math::entropy(&self.probs)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("beta must be positive and finite, got {beta}")))
    }
}

/// `h_y = β (log π_θ(y|x) − log π_ref(y|x))` for each `y` in `ys`.
pub fn implicit_rewards(pair: &ModelPair, beta: f64, x: usize, ys: &[usize]) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let theta = pair.theta().log_probs(x)?;
    let reference = pair.reference().log_probs(x)?;
    ys.iter()
        .map(|&y| {
            pair.space().check_response(y)?;
            Ok(beta * (theta[y] - reference[y]))
        })
        .collect()
}

/// Pair classifier `p_θ = softmax(h_w, h_l)`.
pub fn classifier_prob_pair(pair: &ModelPair, beta: f64, record: &PreferenceRecord) -> Result<ClassProb> {
    let (w, l) = record
        .winner_loser()
        .ok_or_else(|| Error::UnsupportedForm("pair classifier needs a pair-shaped record".into()))?;
    record.validate()?;
    let h = implicit_rewards(pair, beta, record.prompt(), &[w, l])?;
    Ok(ClassProb::from_scores(h))
}

/// List classifier: softmax of the implicit rewards over `candidates`.
pub fn classifier_prob_list(pair: &ModelPair, beta: f64, x: usize, candidates: &[usize]) -> Result<ClassProb> {
    check_distinct(candidates)?;
    let h = implicit_rewards(pair, beta, x, candidates)?;
    Ok(ClassProb { log_probs: log_softmax(&h), scores: h })
}

pub fn make_labels(spec: LabelSpec, record: &PreferenceRecord) -> Result<Target> {
    if let PreferenceRecord::List { ranking, .. } = record {
        return match spec {
            LabelSpec::Hard => {
                let mut p = vec![0.0; ranking.len()];
                p[0] = 1.0;
                Ok(Target { probs: p, log_odds: (ranking.len() == 2).then_some(f64::INFINITY) })
            }
            LabelSpec::ScoreDerived => Err(Error::MissingScore),
            _ => Err(Error::UnsupportedForm("soft pair labels on a list record".into())),
        };
    }
    Ok(match spec {
        LabelSpec::Hard => Target::pair(1.0, 0.0, f64::INFINITY),
        LabelSpec::SoftEps(eps) => {
            if !(eps > 0.0 && eps < 0.5) {
                return Err(Error::domain(format!("epsilon must lie in (0, 1/2), got {eps}")));
            }
            Target::pair(1.0 - eps, eps, (-eps).ln_1p() - eps.ln())
        }
        LabelSpec::Ipo => Target::pair(sigmoid(0.5), sigmoid(-0.5), 0.5),
        LabelSpec::ScoreDerived => match record {
            PreferenceRecord::ScoredPair { score_w, score_l, .. } => {
                let d = score_w - score_l;
                Target::pair(sigmoid(d), sigmoid(-d), d)
            }
            _ => return Err(Error::MissingScore),
        },
    })
}

fn check_dims(p: &ClassProb, t: &Target) -> Result<()> {
    if p.len() != t.probs.len() {
        return Err(Error::domain(format!(
            "model has {} classes but target has {}",
            p.len(),
            t.probs.len()
        )));
    }
    Ok(())
}

/// Cross entropy `−Σ t_i log p_i`.
pub fn ce_loss(p_model: &ClassProb, target: &Target) -> Result<f64> {
    check_dims(p_model, target)?;
    Ok(-target
        .probs
        .iter()
        .zip(&p_model.log_probs)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| t * lp)
        .sum::<f64>())
}

/// Cross entropy minus the target entropy, i.e. `KL(target ‖ model)`.
/// Zero exactly when the model matches the target.
pub fn excess_ce_loss(p_model: &ClassProb, target: &Target) -> Result<f64> {
    check_dims(p_model, target)?;
    Ok(target
        .probs
        .iter()
        .zip(&p_model.log_probs)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| t * (t.ln() - lp))
        .sum::<f64>())
}

/// `(log(p_w/p_l) − log(t_w/t_l))²`, pairs only.
pub fn slr_loss(p_model: &ClassProb, target: &Target) -> Result<f64> {
    let (Some(model_odds), Some(target_odds)) = (p_model.log_odds(), target.log_odds) else {
        return Err(Error::UnsupportedForm("squared log-ratio loss is defined for pairs only".into()));
    };
    if !target_odds.is_finite() {
        return Err(Error::UnsupportedForm("squared log-ratio loss needs soft labels".into()));
    }
    let d = model_odds - target_odds;
    Ok(d * d)
}

/// Plackett–Luce list loss: hard-label cross entropy summed over the
/// suffixes `{y_n, …, y_N}` for `n < N`.
pub fn list_loss_pl(pair: &ModelPair, beta: f64, record: &PreferenceRecord) -> Result<f64> {
    Ok(list_eval(pair, beta, record)?.loss)
}

/// Loss value plus `∂loss/∂ log π_θ(y|x)` for each involved response.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub coeffs: Vec<(usize, f64)>,
}

fn list_eval(pair: &ModelPair, beta: f64, record: &PreferenceRecord) -> Result<LossEval> {
    let PreferenceRecord::List { prompt, ranking } = record else {
        return Err(Error::UnsupportedForm("Plackett–Luce loss needs a list record".into()));
    };
    let h = implicit_rewards(pair, beta, *prompt, {
        check_distinct(ranking)?;
        ranking
    })?;
    let n = h.len();
    let mut loss = 0.0;
    let mut dh = vec![0.0; n];
    for start in 0..n - 1 {
        let suffix = ClassProb::from_scores(h[start..].to_vec());
        let mut label = vec![0.0; n - start];
        label[0] = 1.0;
        let target = Target { probs: label, log_odds: None };
        loss += ce_loss(&suffix, &target)?;
        for (j, p) in suffix.probs().into_iter().enumerate() {
            dh[start + j] += p;
        }
        dh[start] -= 1.0;
    }
    let coeffs = ranking.iter().zip(dh).map(|(&y, g)| (y, beta * g)).collect();
    Ok(LossEval { loss, coeffs })
}

/// Named DPO-style algorithms expressed as (labels, loss, record shape).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preset {
    Dpo,
    Cdpo { epsilon: f64 },
    Ipo,
    DpoPl,
    Rpo,
    DistilledDpo,
}

impl Preset {
    pub const NAMES: [&'static str; 6] = ["dpo", "cdpo", "ipo", "dpo_pl", "rpo", "distilled_dpo"];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Dpo => "dpo",
            Preset::Cdpo { .. } => "cdpo",
            Preset::Ipo => "ipo",
            Preset::DpoPl => "dpo_pl",
            Preset::Rpo => "rpo",
            Preset::DistilledDpo => "distilled_dpo",
        }
    }

    /// Parses a config name; `epsilon` is only used by `cdpo`.
    pub fn from_name(name: &str, epsilon: f64) -> Result<Self> {
        Ok(match name {
            "dpo" => Preset::Dpo,
            "cdpo" => {
                if !(epsilon > 0.0 && epsilon < 0.5) {
                    return Err(Error::config(format!("cdpo epsilon must lie in (0, 1/2), got {epsilon}")));
                }
                Preset::Cdpo { epsilon }
            }
            "ipo" => Preset::Ipo,
            "dpo_pl" => Preset::DpoPl,
            "rpo" => Preset::Rpo,
            "distilled_dpo" => Preset::DistilledDpo,
            other => {
                return Err(Error::config(format!(
                    "unknown loss preset \"{other}\" (expected one of {:?})",
                    Self::NAMES
                )))
            }
        })
    }

    pub fn spec(&self) -> (LabelSpec, LossKind, RecordVariant) {
        match *self {
            Preset::Dpo => (LabelSpec::Hard, LossKind::CrossEntropy, RecordVariant::Pair),
            Preset::Cdpo { epsilon } => (LabelSpec::SoftEps(epsilon), LossKind::CrossEntropy, RecordVariant::Pair),
            Preset::Ipo => (LabelSpec::Ipo, LossKind::SquaredLogRatio, RecordVariant::Pair),
            Preset::DpoPl => (LabelSpec::Hard, LossKind::CrossEntropy, RecordVariant::List),
            Preset::Rpo => (LabelSpec::ScoreDerived, LossKind::CrossEntropy, RecordVariant::ScoredPair),
            Preset::DistilledDpo => (LabelSpec::ScoreDerived, LossKind::SquaredLogRatio, RecordVariant::ScoredPair),
        }
    }

    /// Pair presets also accept scored pairs (the scores are ignored).
    pub fn accepts(&self, variant: RecordVariant) -> bool {
        let wanted = self.spec().2;
        wanted == variant || (wanted == RecordVariant::Pair && variant == RecordVariant::ScoredPair)
    }

    pub fn is_pair_preset(&self) -> bool {
        self.spec().2 != RecordVariant::List
    }

    /// Loss and its coefficients with respect to the policy log-probs.
    pub fn evaluate(&self, pair: &ModelPair, beta: f64, record: &PreferenceRecord) -> Result<LossEval> {
        if !self.accepts(record.variant()) {
            return Err(Error::UnsupportedForm(format!(
                "preset \"{}\" cannot use a {} record",
                self.name(),
                record.variant().name()
            )));
        }
        let (labels, kind, _) = self.spec();
        if *self == Preset::DpoPl {
            return list_eval(pair, beta, record);
        }
        let (w, l) = record.winner_loser().expect("pair-shaped record");
        let p = classifier_prob_pair(pair, beta, record)?;
        let target = make_labels(labels, record)?;
        let (loss, dh_w) = match kind {
            LossKind::CrossEntropy => {
                let (t_w, t_l) = (target.probs[0], target.probs[1]);
                // ∂CE/∂h_w = p_w − t_w, written to avoid cancellation.
                (ce_loss(&p, &target)?, t_l * p.p_w() - t_w * p.p_l())
            }
            LossKind::SquaredLogRatio => {
                let resid = p.log_odds().expect("pair") - target.log_odds.expect("pair");
                (slr_loss(&p, &target)?, 2.0 * resid)
            }
        };
        Ok(LossEval { loss, coeffs: vec![(w, beta * dh_w), (l, -beta * dh_w)] })
    }

    pub fn loss(&self, pair: &ModelPair, beta: f64, record: &PreferenceRecord) -> Result<f64> {
        Ok(self.evaluate(pair, beta, record)?.loss)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    /// `cdpo` parsed this way uses ε = 0.1.
    fn from_str(s: &str) -> Result<Self> {
        Preset::from_name(s, 0.1)
    }
}

/// RPO in its KL form, `KL(softmax(s) ‖ p_θ)`. Differs from the
/// [`Preset::Rpo`] cross entropy by the label entropy, a θ-constant.
pub fn rpo_kl_loss(pair: &ModelPair, beta: f64, record: &PreferenceRecord) -> Result<f64> {
    let p = classifier_prob_pair(pair, beta, record)?;
    excess_ce_loss(&p, &make_labels(LabelSpec::ScoreDerived, record)?)
}
