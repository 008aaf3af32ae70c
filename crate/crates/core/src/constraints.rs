//! Winner/loser mass-conservation constraints and their penalties.
//!
//! A constraint function `φ` ties the trained pair to the reference pair:
//! `φ(π_θ(y_w)) + φ(π_θ(y_l)) = φ(π_ref(y_w)) + φ(π_ref(y_l))`. The signed
//! deviation from that law is the *residual*. Training adds
//! `λ · penalty(residual)` to a DPO-style loss.
//!
//! Norm naming follows the math: ℓ1 is `|r|`, ℓ2 is `r²`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::losses::Preset;
use crate::math::{log_sigmoid, sigmoid};
use crate::model::ModelPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    Log,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub phi: Phi,
    pub norm: Norm,
    pub lambda: f64,
}

impl ConstraintSpec {
    /// λ used for all four variants in the large-model experiments.
    pub const DEFAULT_LAMBDA: f64 = 2e-4;

    pub const VARIANTS: [&'static str; 4] = ["c3dpo_log_l1", "c3dpo_log_l2", "c3dpo_i_l1", "c3dpo_i_l2"];

    pub fn new(phi: Phi, norm: Norm, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(Self { phi, norm, lambda })
    }

    pub fn variant_name(&self) -> &'static str {
        match (self.phi, self.norm) {
            (Phi::Log, Norm::L1) => "c3dpo_log_l1",
            (Phi::Log, Norm::L2) => "c3dpo_log_l2",
            (Phi::Identity, Norm::L1) => "c3dpo_i_l1",
            (Phi::Identity, Norm::L2) => "c3dpo_i_l2",
        }
    }

    /// `None` if `name` is not one of [`Self::VARIANTS`].
    pub fn from_variant_name(name: &str, lambda: f64) -> Option<Result<Self>> {
        let (phi, norm) = match name {
            "c3dpo_log_l1" => (Phi::Log, Norm::L1),
            "c3dpo_log_l2" => (Phi::Log, Norm::L2),
            "c3dpo_i_l1" => (Phi::Identity, Norm::L1),
            "c3dpo_i_l2" => (Phi::Identity, Norm::L2),
            _ => return None,
        };
        Some(Self::new(phi, norm, lambda))
    }
}

impl fmt::Display for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(λ={})", self.variant_name(), self.lambda)
    }
}

/// Residual value and `∂residual/∂ log π_θ(y|x)` for the winner and loser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEval {
    pub value: f64,
    pub d_winner: f64,
    pub d_loser: f64,
}

fn pair_log_probs(pair: &ModelPair, record: &PreferenceRecord) -> Result<([f64; 2], [f64; 2])> {
    let (w, l) = record
        .winner_loser()
        .ok_or_else(|| Error::UnsupportedForm("winner/loser constraints need a pair-shaped record".into()))?;
    record.validate()?;
    let x = record.prompt();
    pair.space().check_response(w)?;
    pair.space().check_response(l)?;
    let theta = pair.theta().log_probs(x)?;
    let reference = pair.reference().log_probs(x)?;
    Ok(([theta[w], theta[l]], [reference[w], reference[l]]))
}

/// `log a − log σ(log a − log b) = log(a + b)`, evaluated from log inputs.
fn log_pair_mass(log_w: f64, log_l: f64) -> f64 {
    log_w - log_sigmoid(log_w - log_l)
}

pub fn evaluate_residual(pair: &ModelPair, record: &PreferenceRecord, phi: Phi) -> Result<ResidualEval> {
    let ([tw, tl], [rw, rl]) = pair_log_probs(pair, record)?;
    Ok(match phi {
        Phi::Log => ResidualEval { value: (tw + tl) - (rw + rl), d_winner: 1.0, d_loser: 1.0 },
        Phi::Identity => ResidualEval {
            value: log_pair_mass(tw, tl) - log_pair_mass(rw, rl),
            d_winner: sigmoid(tw - tl),
            d_loser: sigmoid(tl - tw),
        },
    })
}

/// `[log π_θ(y_w) + log π_θ(y_l)] − [log π_ref(y_w) + log π_ref(y_l)]`.
pub fn residual_log(pair: &ModelPair, record: &PreferenceRecord) -> Result<f64> {
    Ok(evaluate_residual(pair, record, Phi::Log)?.value)
}

/// `log(π_θ(y_w) + π_θ(y_l)) − log(π_ref(y_w) + π_ref(y_l))`, computed in
/// log space through the log-sigmoid identity.
pub fn residual_identity(pair: &ModelPair, record: &PreferenceRecord) -> Result<f64> {
    Ok(evaluate_residual(pair, record, Phi::Identity)?.value)
}

pub fn residual(pair: &ModelPair, record: &PreferenceRecord, phi: Phi) -> Result<f64> {
    Ok(evaluate_residual(pair, record, phi)?.value)
}

/// Absolute defect of `log(a+b) = log a − log σ(log a − log b)`, with the
/// left side taken directly.
pub fn check_lemma1(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::domain(format!("log-sum inputs must be positive and finite, got ({a}, {b})")));
    }
    Ok(((a + b).ln() - log_pair_mass(a.ln(), b.ln())).abs())
}

pub fn penalty(residual: f64, norm: Norm) -> f64 {
    match norm {
        Norm::L1 => residual.abs(),
        Norm::L2 => residual * residual,
    }
}

/// Derivative of [`penalty`]; the ℓ1 subgradient at 0 is 0.
pub fn penalty_derivative(residual: f64, norm: Norm) -> f64 {
    match norm {
        Norm::L1 => {
            if residual > 0.0 {
                1.0
            } else if residual < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Norm::L2 => 2.0 * residual,
    }
}

/// `base loss + λ · penalty(residual_φ)` for one pair record.
pub fn c3dpo_loss(
    pair: &ModelPair,
    beta: f64,
    record: &PreferenceRecord,
    base: Preset,
    cons: &ConstraintSpec,
) -> Result<f64> {
    if !base.is_pair_preset() || record.winner_loser().is_none() {
        return Err(Error::UnsupportedForm(format!(
            "{} constrains a winner/loser pair; got preset \"{}\" with a {} record",
            cons.variant_name(),
            base.name(),
            record.variant().name()
        )));
    }
    let base_loss = base.loss(pair, beta, record)?;
    let r = residual(pair, record, cons.phi)?;
    Ok(base_loss + cons.lambda * penalty(r, cons.norm))
}

/// The Log-ℓ2 DPO objective written with implicit rewards:
/// `−log σ(r̂_w − r̂_l) + (λ/β²)(r̂_w + r̂_l)²`.
pub fn implicit_reward_form(pair: &ModelPair, beta: f64, record: &PreferenceRecord, lambda: f64) -> Result<f64> {
    let (w, l) = record
        .winner_loser()
        .ok_or_else(|| Error::UnsupportedForm("implicit-reward form needs a pair record".into()))?;
    let x = record.prompt();
    let rw = pair.implicit_reward(beta, x, w)?;
    let rl = pair.implicit_reward(beta, x, l)?;
    let s = rw + rl;
    Ok(-log_sigmoid(rw - rl) + (lambda / (beta * beta)) * s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyModel;

    fn worked_pair() -> ModelPair {
        let theta = PolicyModel::tabular(vec![vec![0.4f64.ln(), 0.02f64.ln(), 0.58f64.ln()]]).unwrap();
        let reference = PolicyModel::tabular(vec![vec![0.02f64.ln(), 0.01f64.ln(), 0.97f64.ln()]]).unwrap();
        ModelPair::new(theta, reference).unwrap()
    }

    fn rec() -> PreferenceRecord {
        PreferenceRecord::pair(0, 0, 1).unwrap()
    }

    #[test]
    fn residuals_vanish_at_reference() {
        let pair = ModelPair::from_reference(PolicyModel::tabular(vec![vec![0.5, -0.2, 1.0]]).unwrap());
        assert_eq!(residual_log(&pair, &rec()).unwrap(), 0.0);
        assert_eq!(residual_identity(&pair, &rec()).unwrap(), 0.0);
    }

    #[test]
    fn worked_pair_residuals() {
        let pair = worked_pair();
        assert!((residual_log(&pair, &rec()).unwrap() - 3.688_879_454_113_936).abs() < 1e-12);
        assert!((residual_identity(&pair, &rec()).unwrap() - 2.639_057_329_615_258_4).abs() < 1e-12);
    }

    #[test]
    fn swapping_models_negates_residuals() {
        let (t, r) = worked_pair().into_parts();
        let a = ModelPair::new(t.clone(), r.clone()).unwrap();
        let b = ModelPair::new(r, t).unwrap();
        for phi in [Phi::Log, Phi::Identity] {
            let ra = residual(&a, &rec(), phi).unwrap();
            let rb = residual(&b, &rec(), phi).unwrap();
            assert!((ra + rb).abs() < 1e-14);
        }
    }

    #[test]
    fn log_sum_identity_examples() {
        assert!(check_lemma1(1.0, 1.0).unwrap() <= 1e-15);
        assert!(check_lemma1(1e8, 1e-8).unwrap() <= 1e-12);
        assert!(check_lemma1(0.0, 1.0).is_err());
        assert!(check_lemma1(1.0, -2.0).is_err());
    }

    #[test]
    fn penalties() {
        for norm in [Norm::L1, Norm::L2] {
            assert_eq!(penalty(0.0, norm), 0.0);
            assert_eq!(penalty_derivative(0.0, norm), 0.0);
        }
        assert_eq!(penalty(-3.0, Norm::L2), 9.0);
        assert_eq!(penalty(-3.0, Norm::L1), 3.0);
    }

    #[test]
    fn log_l2_on_worked_pair() {
        let cons = ConstraintSpec::new(Phi::Log, Norm::L2, 2e-4).unwrap();
        let v = c3dpo_loss(&worked_pair(), 1.0, &rec(), Preset::Dpo, &cons).unwrap();
        // −log(10/11) + 2e-4 · (log 40)²
        let expected = -(10.0f64 / 11.0).ln() + 2e-4 * 40f64.ln().powi(2);
        assert!((v - expected).abs() < 1e-14);
        assert!((v - 0.098_031_7).abs() < 1e-6);
    }

    #[test]
    fn zero_lambda_is_the_base_loss() {
        let pair = worked_pair();
        for name in ConstraintSpec::VARIANTS {
            let cons = ConstraintSpec::from_variant_name(name, 0.0).unwrap().unwrap();
            for base in [Preset::Dpo, Preset::Ipo, Preset::Cdpo { epsilon: 0.2 }] {
                let a = c3dpo_loss(&pair, 0.8, &rec(), base, &cons).unwrap();
                let b = base.loss(&pair, 0.8, &rec()).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn equal_policies_cost_log2() {
        let pair = ModelPair::from_reference(PolicyModel::tabular(vec![vec![0.1, 0.9, -0.4]]).unwrap());
        for name in ConstraintSpec::VARIANTS {
            let cons = ConstraintSpec::from_variant_name(name, 0.37).unwrap().unwrap();
            let v = c3dpo_loss(&pair, 2.0, &rec(), Preset::Dpo, &cons).unwrap();
            assert!((v - 2f64.ln()).abs() < 1e-15);
        }
        assert!((implicit_reward_form(&pair, 2.0, &rec(), 0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn list_records_are_unsupported() {
        let cons = ConstraintSpec::new(Phi::Log, Norm::L2, 1.0).unwrap();
        let list = PreferenceRecord::list(0, vec![0, 1, 2]).unwrap();
        assert!(matches!(
            c3dpo_loss(&worked_pair(), 1.0, &list, Preset::DpoPl, &cons),
            Err(Error::UnsupportedForm(_))
        ));
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ConstraintSpec::VARIANTS {
            assert_eq!(ConstraintSpec::from_variant_name(name, 1.0).unwrap().unwrap().variant_name(), name);
        }
        assert!(ConstraintSpec::from_variant_name("dpo", 1.0).is_none());
        assert!(ConstraintSpec::new(Phi::Log, Norm::L1, -1.0).is_err());
    }
}
