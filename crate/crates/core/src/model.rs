//! Softmax policies over a finite prompt/response space.
//!
//! A [`PolicyModel`] is either a free logit table or a linear-feature model
//! whose logits are `Φ[x][y] · w` for fixed features `Φ` and trainable
//! weights `w`. In both cases `π(y|x) = softmax_y(logits(x, ·))`, so the
//! simplex constraint holds structurally.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_softmax;

/// Dense index spaces for prompts `[0, num_prompts)` and responses `[0, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpace {
    num_prompts: usize,
    k: usize,
}

impl PromptSpace {
    pub fn new(num_prompts: usize, k: usize) -> Result<Self> {
        if num_prompts == 0 {
            return Err(Error::domain("num_prompts must be positive"));
        }
        if k < 2 {
            return Err(Error::domain(format!("need at least 2 responses per prompt, got {k}")));
        }
        Ok(Self { num_prompts, k })
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn check_prompt(&self, x: usize) -> Result<()> {
        if x >= self.num_prompts {
            return Err(Error::Index { what: "prompt", index: x, len: self.num_prompts });
        }
        Ok(())
    }

    pub fn check_response(&self, y: usize) -> Result<()> {
        if y >= self.k {
            return Err(Error::Index { what: "response", index: y, len: self.k });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Tabular,
    LinearFeature,
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    /// Row-major `num_prompts × k` logits.
    Tabular { logits: Vec<f64> },
    /// Row-major `num_prompts × k × dim` features and `dim` weights.
    Linear { dim: usize, features: Vec<f64>, weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    space: PromptSpace,
    params: Params,
}

impl PolicyModel {
    /// Tabular model from one logit row per prompt.
    pub fn tabular(logits: Vec<Vec<f64>>) -> Result<Self> {
        let k = logits.first().map_or(0, Vec::len);
        let space = PromptSpace::new(logits.len(), k)?;
        if logits.iter().any(|row| row.len() != k) {
            return Err(Error::domain("ragged logit rows"));
        }
        let flat: Vec<f64> = logits.into_iter().flatten().collect();
        check_finite(&flat, "logits")?;
        Ok(Self { space, params: Params::Tabular { logits: flat } })
    }

    pub fn tabular_zeros(space: PromptSpace) -> Self {
        Self {
            space,
            params: Params::Tabular { logits: vec![0.0; space.num_prompts * space.k] },
        }
    }

    /// Linear-feature model; `features[x][y]` is the feature vector of
    /// response `y` to prompt `x`.
    pub fn linear(features: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> Result<Self> {
        let k = features.first().map_or(0, Vec::len);
        let space = PromptSpace::new(features.len(), k)?;
        let dim = weights.len();
        if dim == 0 {
            return Err(Error::domain("linear model needs at least one weight"));
        }
        let mut flat = Vec::with_capacity(space.num_prompts * k * dim);
        for row in features {
            if row.len() != k {
                return Err(Error::domain("ragged feature rows"));
            }
            for phi in row {
                if phi.len() != dim {
                    return Err(Error::domain(format!(
                        "feature vector has dimension {} but there are {dim} weights",
                        phi.len()
                    )));
                }
                flat.extend(phi);
            }
        }
        check_finite(&flat, "features")?;
        check_finite(&weights, "weights")?;
        Ok(Self { space, params: Params::Linear { dim, features: flat, weights } })
    }

    pub fn space(&self) -> PromptSpace {
        self.space
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            Params::Tabular { .. } => ModelKind::Tabular,
            Params::Linear { .. } => ModelKind::LinearFeature,
        }
    }

    /// Trainable parameters: the logit table or the weight vector.
    pub fn parameters(&self) -> &[f64] {
        match &self.params {
            Params::Tabular { logits } => logits,
            Params::Linear { weights, .. } => weights,
        }
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        match &mut self.params {
            Params::Tabular { logits } => logits,
            Params::Linear { weights, .. } => weights,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().len()
    }

    /// Feature vector `Φ[x][y]` (linear models only).
    pub fn feature(&self, x: usize, y: usize) -> Option<&[f64]> {
        match &self.params {
            Params::Linear { dim, features, .. } => {
                let start = (x * self.space.k + y) * dim;
                features.get(start..start + dim)
            }
            Params::Tabular { .. } => None,
        }
    }

    pub fn logits(&self, x: usize) -> Result<Vec<f64>> {
        self.space.check_prompt(x)?;
        let k = self.space.k;
        Ok(match &self.params {
            Params::Tabular { logits } => logits[x * k..(x + 1) * k].to_vec(),
            Params::Linear { dim, features, weights } => (0..k)
                .map(|y| {
                    let start = (x * k + y) * dim;
                    dot(&features[start..start + dim], weights)
                })
                .collect(),
        })
    }

    /// Log-probabilities of every response to prompt `x`.
    pub fn log_probs(&self, x: usize) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(x)?))
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        self.space.check_response(y)?;
        Ok(self.log_probs(x)?[y])
    }

    pub fn probs(&self, x: usize) -> Result<Vec<f64>> {
        Ok(self.log_probs(x)?.into_iter().map(f64::exp).collect())
    }

    /// Dense gradient of `log π(y|x)` with respect to [`Self::parameters`].
    pub fn grad_log_prob(&self, x: usize, y: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_parameters()];
        self.accumulate_grad(x, &[(y, 1.0)], &mut out)?;
        Ok(out)
    }

    /// Adds `Σ_i c_i ∇ log π(y_i|x)` into `out`.
    ///
    /// The softmax is evaluated once per call, so callers should group all
    /// coefficients for one prompt together.
    pub fn accumulate_grad(&self, x: usize, coeffs: &[(usize, f64)], out: &mut [f64]) -> Result<()> {
        if out.len() != self.num_parameters() {
            return Err(Error::domain("gradient buffer has wrong length"));
        }
        for &(y, _) in coeffs {
            self.space.check_response(y)?;
        }
        let k = self.space.k;
        let probs: Vec<f64> = self.log_probs(x)?.into_iter().map(f64::exp).collect();
        let total: f64 = coeffs.iter().map(|&(_, c)| c).sum();
        match &self.params {
            Params::Tabular { .. } => {
                let row = &mut out[x * k..(x + 1) * k];
                for &(y, c) in coeffs {
                    row[y] += c;
                }
                for (g, p) in row.iter_mut().zip(&probs) {
                    *g -= total * p;
                }
            }
            Params::Linear { dim, features, .. } => {
                let block = &features[x * k * dim..(x + 1) * k * dim];
                for &(y, c) in coeffs {
                    for (g, f) in out.iter_mut().zip(&block[y * dim..(y + 1) * dim]) {
                        *g += c * f;
                    }
                }
                for (yp, p) in probs.iter().enumerate() {
                    let w = total * p;
                    for (g, f) in out.iter_mut().zip(&block[yp * dim..(yp + 1) * dim]) {
                        *g -= w * f;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} must be finite")))
    }
}

/// On-disk shape. serde_json writes the shortest decimal that round-trips,
/// so f64 parameters survive save/load bit-for-bit.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum ModelFile {
    Tabular {
        num_prompts: usize,
        k: usize,
        logits: Vec<Vec<f64>>,
    },
    Linear {
        num_prompts: usize,
        k: usize,
        features: Vec<Vec<Vec<f64>>>,
        weights: Vec<f64>,
    },
}

impl From<&PolicyModel> for ModelFile {
    fn from(m: &PolicyModel) -> Self {
        let (n, k) = (m.space.num_prompts, m.space.k);
        match &m.params {
            Params::Tabular { logits } => ModelFile::Tabular {
                num_prompts: n,
                k,
                logits: logits.chunks(k).map(<[f64]>::to_vec).collect(),
            },
            Params::Linear { dim, features, weights } => ModelFile::Linear {
                num_prompts: n,
                k,
                features: features
                    .chunks(k * dim)
                    .map(|row| row.chunks(*dim).map(<[f64]>::to_vec).collect())
                    .collect(),
                weights: weights.clone(),
            },
        }
    }
}

impl TryFrom<ModelFile> for PolicyModel {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        let (model, n, k) = match file {
            ModelFile::Tabular { num_prompts, k, logits } => (PolicyModel::tabular(logits)?, num_prompts, k),
            ModelFile::Linear { num_prompts, k, features, weights } => {
                (PolicyModel::linear(features, weights)?, num_prompts, k)
            }
        };
        if model.space != PromptSpace::new(n, k)? {
            return Err(Error::domain(format!(
                "declared shape {n}×{k} does not match parameters {}×{}",
                model.space.num_prompts, model.space.k
            )));
        }
        Ok(model)
    }
}

/// Trainable policy `θ` together with its frozen reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    theta: PolicyModel,
    reference: PolicyModel,
}

impl ModelPair {
    pub fn new(theta: PolicyModel, reference: PolicyModel) -> Result<Self> {
        if theta.space != reference.space {
            return Err(Error::domain("theta and reference live on different prompt spaces"));
        }
        Ok(Self { theta, reference })
    }

    /// Starts training from the reference checkpoint.
    pub fn from_reference(reference: PolicyModel) -> Self {
        Self { theta: reference.clone(), reference }
    }

    pub fn theta(&self) -> &PolicyModel {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut PolicyModel {
        &mut self.theta
    }

    pub fn reference(&self) -> &PolicyModel {
        &self.reference
    }

    pub fn space(&self) -> PromptSpace {
        self.theta.space
    }

    pub fn into_parts(self) -> (PolicyModel, PolicyModel) {
        (self.theta, self.reference)
    }

    /// `β · (log π_θ(y|x) − log π_ref(y|x))`.
    pub fn implicit_reward(&self, beta: f64, x: usize, y: usize) -> Result<f64> {
        Ok(beta * self.log_ratio(x, y)?)
    }

    /// `log π_θ(y|x) − log π_ref(y|x)`.
    pub fn log_ratio(&self, x: usize, y: usize) -> Result<f64> {
        Ok(self.theta.log_prob(x, y)? - self.reference.log_prob(x, y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_tabular_log_prob() {
        let m = PolicyModel::tabular_zeros(PromptSpace::new(2, 4).unwrap());
        for y in 0..4 {
            assert!(close(m.log_prob(1, y).unwrap(), -1.386_294_361_119_890_6, 1e-15));
        }
    }

    #[test]
    fn constructed_probability_log() {
        // π(0|x) = 0.02, the rest spread over three responses.
        let rest = 0.98f64 / 3.0;
        let m = PolicyModel::tabular(vec![vec![0.02f64.ln(), rest.ln(), rest.ln(), rest.ln()]]).unwrap();
        assert!(close(m.log_prob(0, 0).unwrap(), -3.912_023_005_428_146, 1e-12));
    }

    #[test]
    fn zero_features_give_uniform() {
        let m = PolicyModel::linear(vec![vec![vec![0.0; 3]; 5]], vec![1.0, -2.0, 0.5]).unwrap();
        assert!(close(m.log_prob(0, 2).unwrap(), (0.2f64).ln(), 1e-15));
    }

    #[test]
    fn out_of_range_is_an_index_error() {
        let m = PolicyModel::tabular_zeros(PromptSpace::new(2, 3).unwrap());
        assert!(matches!(m.log_prob(2, 0), Err(Error::Index { what: "prompt", .. })));
        assert!(matches!(m.log_prob(0, 3), Err(Error::Index { what: "response", .. })));
    }

    #[test]
    fn k_must_be_at_least_two() {
        assert!(PromptSpace::new(1, 1).is_err());
        assert!(PolicyModel::tabular(vec![vec![0.0]]).is_err());
    }

    #[test]
    fn uniform_pair_gradient() {
        let m = PolicyModel::tabular_zeros(PromptSpace::new(2, 2).unwrap());
        let g = m.grad_log_prob(1, 0).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.5, -0.5]);
    }

    #[test]
    fn implicit_reward_examples() {
        let reference = PolicyModel::tabular(vec![vec![0.02f64.ln(), 0.01f64.ln(), 0.97f64.ln()]]).unwrap();
        let theta = PolicyModel::tabular(vec![vec![0.4f64.ln(), 0.02f64.ln(), 0.58f64.ln()]]).unwrap();
        let pair = ModelPair::new(theta, reference.clone()).unwrap();
        assert!(close(pair.implicit_reward(1.0, 0, 0).unwrap(), 20f64.ln(), 1e-12));
        let r1 = pair.implicit_reward(0.7, 0, 1).unwrap();
        let r2 = pair.implicit_reward(1.4, 0, 1).unwrap();
        assert!(close(r2, 2.0 * r1, 1e-15));

        let same = ModelPair::from_reference(reference);
        for y in 0..3 {
            assert_eq!(same.implicit_reward(2.5, 0, y).unwrap(), 0.0);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = PolicyModel::linear(
            vec![vec![vec![0.1, 1.0 / 3.0], vec![-2.5e-300, 7.0]], vec![vec![1e300, -0.0], vec![f64::MIN_POSITIVE, 2.0]]],
            vec![std::f64::consts::PI, -1e-17],
        )
        .unwrap();
        let back = PolicyModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let t = PolicyModel::tabular(vec![vec![0.1 + 0.2, 1.0 / 7.0]]).unwrap();
        let json = t.to_json().unwrap();
        assert!(json.starts_with(r#"{"kind":"tabular","num_prompts":1,"k":2,"logits":"#));
        assert_eq!(PolicyModel::from_json(&json).unwrap(), t);
    }

    #[test]
    fn json_rejects_bad_shapes_and_unknown_keys() {
        assert!(PolicyModel::from_json(r#"{"kind":"tabular","num_prompts":2,"k":2,"logits":[[0,0]]}"#).is_err());
        assert!(PolicyModel::from_json(r#"{"kind":"tabular","num_prompts":1,"k":2,"logits":[[0,0]],"x":1}"#).is_err());
        assert!(PolicyModel::from_json(r#"{"kind":"cubic","num_prompts":1,"k":2}"#).is_err());
    }
}
