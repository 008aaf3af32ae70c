#![allow(dead_code)]

use c3dpo::rng::{rng_from_seed, LabRng};
use c3dpo::{ModelPair, PolicyModel};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> LabRng {
    rng_from_seed(seed)
}

pub fn normal_row(rng: &mut LabRng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_tabular(rng: &mut LabRng, prompts: usize, k: usize) -> PolicyModel {
    PolicyModel::tabular((0..prompts).map(|_| normal_row(rng, k)).collect()).unwrap()
}

pub fn random_linear(rng: &mut LabRng, prompts: usize, k: usize, dim: usize) -> PolicyModel {
    let features = (0..prompts).map(|_| (0..k).map(|_| normal_row(rng, dim)).collect()).collect();
    PolicyModel::linear(features, normal_row(rng, dim)).unwrap()
}

/// θ and ref over the same space; linear pairs share features.
pub fn random_pair(rng: &mut LabRng, prompts: usize, k: usize, linear: Option<usize>) -> ModelPair {
    match linear {
        None => ModelPair::new(random_tabular(rng, prompts, k), random_tabular(rng, prompts, k)).unwrap(),
        Some(d) => {
            let reference = random_linear(rng, prompts, k, d);
            let mut theta = reference.clone();
            for w in theta.parameters_mut() {
                *w += rng.sample::<f64, _>(StandardNormal);
            }
            ModelPair::new(theta, reference).unwrap()
        }
    }
}

/// Plain softmax with explicit exponentials.
pub fn naive_probs(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Central differences of `f` over the θ parameters of `pair`.
pub fn finite_diff(pair: &ModelPair, step: f64, f: impl Fn(&ModelPair) -> f64) -> Vec<f64> {
    let mut probe = pair.clone();
    let n = probe.theta().num_parameters();
    (0..n)
        .map(|i| {
            let orig = probe.theta().parameters()[i];
            probe.theta_mut().parameters_mut()[i] = orig + step;
            let up = f(&probe);
            probe.theta_mut().parameters_mut()[i] = orig - step;
            let down = f(&probe);
            probe.theta_mut().parameters_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Max-norm relative distance between two gradient vectors.
pub fn grad_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
