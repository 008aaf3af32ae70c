use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use c3dpo::collapse::CollapseConfig;
use c3dpo::data::{self, GeneratedDataset, GeneratorSpec, PreferenceRecord};
use c3dpo::rng::worker_rng;
use c3dpo::trainer::TrainConfig;
use c3dpo::{ModelPair, PolicyModel, PromptSpace};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub generator: GeneratorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// JSONL file, relative to the config file.
    Path(PathBuf),
    Generate(GeneratorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub prompts: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTabular {
    pub prompts: usize,
    pub k: usize,
    #[serde(default = "default_std")]
    pub std: f64,
}

fn default_std() -> f64 {
    1.0
}

/// Reference policy; θ starts as a copy of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// Model JSON file, relative to the config file.
    Path(PathBuf),
    Uniform(Shape),
    /// Tabular logits drawn from N(0, std²).
    RandomTabular(RandomTabular),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub model: ModelSource,
    pub train: TrainConfig,
}

impl RunConfig {
    /// `--seed` replaces every seed in the config.
    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let DatasetSource::Generate(g) = &mut self.dataset {
            g.seed = seed;
        }
    }

    pub fn load_dataset(&self, base: &Path) -> Result<(Vec<PreferenceRecord>, Option<GeneratedDataset>)> {
        match &self.dataset {
            DatasetSource::Path(p) => {
                let path = base.join(p);
                let recs = data::read_jsonl(&path).with_context(|| format!("reading dataset {}", path.display()))?;
                Ok((recs, None))
            }
            DatasetSource::Generate(spec) => {
                let g = data::generate(spec)?;
                Ok((g.records.clone(), Some(g)))
            }
        }
    }

    pub fn load_model(&self, base: &Path) -> Result<ModelPair> {
        let reference = match &self.model {
            ModelSource::Path(p) => {
                let path = base.join(p);
                PolicyModel::load(&path).with_context(|| format!("reading model {}", path.display()))?
            }
            ModelSource::Uniform(s) => PolicyModel::tabular_zeros(PromptSpace::new(s.prompts, s.k)?),
            ModelSource::RandomTabular(r) => {
                if !(r.std.is_finite() && r.std >= 0.0) {
                    bail!(c3dpo::Error::Config(format!("model std must be finite and non-negative, got {}", r.std)));
                }
                PromptSpace::new(r.prompts, r.k)?;
                let mut rng = worker_rng(self.train.seed, 1);
                let logits = (0..r.prompts)
                    .map(|_| (0..r.k).map(|_| r.std * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect();
                PolicyModel::tabular(logits)?
            }
        };
        Ok(ModelPair::from_reference(reference))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub collapse: CollapseConfig,
}

impl SweepConfig {
    /// `--seed s` turns the seed list into `s, s+1, ...` of the same length.
    pub fn apply_seed(&mut self, seed: u64) {
        let n = self.collapse.seeds.len().max(1) as u64;
        self.collapse.seeds = (0..n).map(|i| seed + i).collect();
    }
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| c3dpo::Error::Config(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

pub fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
