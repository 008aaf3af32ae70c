//! Preference records, JSONL persistence and synthetic preference sampling.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_softmax, sigmoid};
use crate::model::PromptSpace;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordVariant {
    Pair,
    List,
    ScoredPair,
}

impl RecordVariant {
    pub fn name(self) -> &'static str {
        match self {
            RecordVariant::Pair => "pair",
            RecordVariant::List => "list",
            RecordVariant::ScoredPair => "scored_pair",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PreferenceRecord {
    Pair {
        prompt: usize,
        winner: usize,
        loser: usize,
    },
    /// Best first: `ranking[0] ≻ ranking[1] ≻ …`.
    List { prompt: usize, ranking: Vec<usize> },
    ScoredPair {
        prompt: usize,
        winner: usize,
        loser: usize,
        score_w: f64,
        score_l: f64,
    },
}

impl PreferenceRecord {
    pub fn pair(prompt: usize, winner: usize, loser: usize) -> Result<Self> {
        let r = PreferenceRecord::Pair { prompt, winner, loser };
        r.validate()?;
        Ok(r)
    }

    pub fn list(prompt: usize, ranking: Vec<usize>) -> Result<Self> {
        let r = PreferenceRecord::List { prompt, ranking };
        r.validate()?;
        Ok(r)
    }

    pub fn scored(prompt: usize, winner: usize, loser: usize, score_w: f64, score_l: f64) -> Result<Self> {
        let r = PreferenceRecord::ScoredPair { prompt, winner, loser, score_w, score_l };
        r.validate()?;
        Ok(r)
    }

    pub fn prompt(&self) -> usize {
        match self {
            PreferenceRecord::Pair { prompt, .. }
            | PreferenceRecord::List { prompt, .. }
            | PreferenceRecord::ScoredPair { prompt, .. } => *prompt,
        }
    }

    pub fn variant(&self) -> RecordVariant {
        match self {
            PreferenceRecord::Pair { .. } => RecordVariant::Pair,
            PreferenceRecord::List { .. } => RecordVariant::List,
            PreferenceRecord::ScoredPair { .. } => RecordVariant::ScoredPair,
        }
    }

    /// `(winner, loser)` for pair-shaped records.
    pub fn winner_loser(&self) -> Option<(usize, usize)> {
        match self {
            PreferenceRecord::Pair { winner, loser, .. } | PreferenceRecord::ScoredPair { winner, loser, .. } => {
                Some((*winner, *loser))
            }
            PreferenceRecord::List { .. } => None,
        }
    }

    /// Intrinsic invariants: distinct ids, list length, finite scores.
    pub fn validate(&self) -> Result<()> {
        match self {
            PreferenceRecord::Pair { winner, loser, .. } => {
                if winner == loser {
                    return Err(Error::invalid(format!("winner == loser ({winner})")));
                }
            }
            PreferenceRecord::ScoredPair { winner, loser, score_w, score_l, .. } => {
                if winner == loser {
                    return Err(Error::invalid(format!("winner == loser ({winner})")));
                }
                if !score_w.is_finite() || !score_l.is_finite() {
                    return Err(Error::invalid("scores must be finite"));
                }
            }
            PreferenceRecord::List { ranking, .. } => check_distinct(ranking)?,
        }
        Ok(())
    }

    /// [`Self::validate`] plus range checks against a prompt space.
    pub fn validate_in(&self, space: PromptSpace) -> Result<()> {
        self.validate()?;
        space.check_prompt(self.prompt())?;
        match self {
            PreferenceRecord::Pair { winner, loser, .. } | PreferenceRecord::ScoredPair { winner, loser, .. } => {
                space.check_response(*winner)?;
                space.check_response(*loser)?;
            }
            PreferenceRecord::List { ranking, .. } => {
                if ranking.len() > space.k() {
                    return Err(Error::invalid(format!("list of {} exceeds k = {}", ranking.len(), space.k())));
                }
                for &y in ranking {
                    space.check_response(y)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_distinct(ids: &[usize]) -> Result<()> {
    if ids.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 responses, got {}", ids.len())));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for &y in ids {
        if !seen.insert(y) {
            return Err(Error::invalid(format!("duplicate response {y}")));
        }
    }
    Ok(())
}

/// Flat JSONL line. Keys irrelevant to the variant must be absent.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    variant: RecordVariant,
    prompt: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    winner: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loser: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranking: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score_l: Option<f64>,
}

impl From<&PreferenceRecord> for RawRecord {
    fn from(r: &PreferenceRecord) -> Self {
        let mut raw = RawRecord {
            variant: r.variant(),
            prompt: r.prompt(),
            winner: None,
            loser: None,
            ranking: None,
            score_w: None,
            score_l: None,
        };
        match r {
            PreferenceRecord::Pair { winner, loser, .. } => {
                raw.winner = Some(*winner);
                raw.loser = Some(*loser);
            }
            PreferenceRecord::List { ranking, .. } => raw.ranking = Some(ranking.clone()),
            PreferenceRecord::ScoredPair { winner, loser, score_w, score_l, .. } => {
                raw.winner = Some(*winner);
                raw.loser = Some(*loser);
                raw.score_w = Some(*score_w);
                raw.score_l = Some(*score_l);
            }
        }
        raw
    }
}

impl TryFrom<RawRecord> for PreferenceRecord {
    type Error = String;

    fn try_from(raw: RawRecord) -> std::result::Result<Self, String> {
        fn need<T>(v: Option<T>, key: &str) -> std::result::Result<T, String> {
            v.ok_or_else(|| format!("missing key \"{key}\""))
        }
        fn forbid<T>(v: &Option<T>, key: &str, variant: RecordVariant) -> std::result::Result<(), String> {
            match v {
                Some(_) => Err(format!("key \"{key}\" is not allowed for variant \"{}\"", variant.name())),
                None => Ok(()),
            }
        }
        let v = raw.variant;
        Ok(match v {
            RecordVariant::Pair => {
                forbid(&raw.ranking, "ranking", v)?;
                forbid(&raw.score_w, "score_w", v)?;
                forbid(&raw.score_l, "score_l", v)?;
                PreferenceRecord::Pair {
                    prompt: raw.prompt,
                    winner: need(raw.winner, "winner")?,
                    loser: need(raw.loser, "loser")?,
                }
            }
            RecordVariant::List => {
                forbid(&raw.winner, "winner", v)?;
                forbid(&raw.loser, "loser", v)?;
                forbid(&raw.score_w, "score_w", v)?;
                forbid(&raw.score_l, "score_l", v)?;
                PreferenceRecord::List { prompt: raw.prompt, ranking: need(raw.ranking, "ranking")? }
            }
            RecordVariant::ScoredPair => {
                forbid(&raw.ranking, "ranking", v)?;
                PreferenceRecord::ScoredPair {
                    prompt: raw.prompt,
                    winner: need(raw.winner, "winner")?,
                    loser: need(raw.loser, "loser")?,
                    score_w: need(raw.score_w, "score_w")?,
                    score_l: need(raw.score_l, "score_l")?,
                }
            }
        })
    }
}

/// One JSON object per line, LF-terminated.
pub fn write_jsonl(records: &[PreferenceRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &RawRecord::from(r))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let record =
            PreferenceRecord::try_from(raw).map_err(|message| Error::Parse { line: lineno, message })?;
        record
            .validate()
            .map_err(|e| Error::InvalidRecord(format!("line {lineno}: {}", inner_message(&e))))?;
        records.push(record);
    }
    Ok(records)
}

fn inner_message(e: &Error) -> String {
    match e {
        Error::InvalidRecord(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Ground-truth annotator reward `r*(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentRewardTable {
    rewards: Vec<Vec<f64>>,
}

impl LatentRewardTable {
    pub fn new(rewards: Vec<Vec<f64>>) -> Result<Self> {
        let k = rewards.first().map_or(0, Vec::len);
        PromptSpace::new(rewards.len(), k)?;
        if rewards.iter().any(|r| r.len() != k) {
            return Err(Error::domain("ragged reward table"));
        }
        if rewards.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::domain("latent rewards must be finite"));
        }
        Ok(Self { rewards })
    }

    /// Rewards drawn i.i.d. from N(0, 1).
    pub fn standard_normal<R: Rng + ?Sized>(space: PromptSpace, rng: &mut R) -> Self {
        let rewards = (0..space.num_prompts())
            .map(|_| (0..space.k()).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        Self { rewards }
    }

    pub fn space(&self) -> PromptSpace {
        PromptSpace::new(self.rewards.len(), self.rewards[0].len()).expect("validated on construction")
    }

    pub fn get(&self, x: usize, y: usize) -> Result<f64> {
        let space = self.space();
        space.check_prompt(x)?;
        space.check_response(y)?;
        Ok(self.rewards[x][y])
    }

    pub fn row(&self, x: usize) -> Result<&[f64]> {
        self.space().check_prompt(x)?;
        Ok(&self.rewards[x])
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rewards
    }
}

/// Bradley–Terry draw: `y_a` wins with probability `σ(r*(x,y_a) − r*(x,y_b))`.
pub fn sample_pair<R: Rng + ?Sized>(
    r_star: &LatentRewardTable,
    x: usize,
    y_a: usize,
    y_b: usize,
    rng: &mut R,
) -> Result<PreferenceRecord> {
    if y_a == y_b {
        return Err(Error::invalid(format!("cannot compare response {y_a} with itself")));
    }
    let p_a = sigmoid(r_star.get(x, y_a)? - r_star.get(x, y_b)?);
    let u: f64 = rng.random();
    let (winner, loser) = if u < p_a { (y_a, y_b) } else { (y_b, y_a) };
    Ok(PreferenceRecord::Pair { prompt: x, winner, loser })
}

/// Plackett–Luce draw: repeatedly picks the next-best item from the softmax
/// of `r*` over the candidates not yet ranked.
pub fn sample_list<R: Rng + ?Sized>(
    r_star: &LatentRewardTable,
    x: usize,
    candidates: &[usize],
    rng: &mut R,
) -> Result<PreferenceRecord> {
    check_distinct(candidates)?;
    let row = r_star.row(x)?;
    for &y in candidates {
        r_star.space().check_response(y)?;
    }
    let mut remaining = candidates.to_vec();
    let mut ranking = Vec::with_capacity(candidates.len());
    while remaining.len() > 1 {
        let logits: Vec<f64> = remaining.iter().map(|&y| row[y]).collect();
        let probs: Vec<f64> = log_softmax(&logits).into_iter().map(f64::exp).collect();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        ranking.push(remaining.remove(pick));
    }
    ranking.push(remaining[0]);
    Ok(PreferenceRecord::List { prompt: x, ranking })
}

fn default_records_per_prompt() -> usize {
    1
}

fn default_score_noise() -> f64 {
    0.5
}

/// Synthetic dataset description. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub prompts: usize,
    pub k: usize,
    /// Records per prompt (pairs, scored pairs or lists).
    #[serde(default = "default_records_per_prompt")]
    pub pairs_per_prompt: usize,
    #[serde(default = "default_variant")]
    pub variant: RecordVariant,
    /// Candidates per list record; defaults to `k`.
    #[serde(default)]
    pub list_len: Option<usize>,
    /// Std of the Gaussian noise added to `r*` to form auxiliary scores.
    #[serde(default = "default_score_noise")]
    pub score_noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_variant() -> RecordVariant {
    RecordVariant::Pair
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<PromptSpace> {
        let space = PromptSpace::new(self.prompts, self.k).map_err(|e| Error::config(e.to_string()))?;
        if self.pairs_per_prompt == 0 {
            return Err(Error::config("pairs_per_prompt must be positive"));
        }
        match self.variant {
            RecordVariant::Pair | RecordVariant::ScoredPair => {
                let max_pairs = self.k * (self.k - 1) / 2;
                if self.pairs_per_prompt > max_pairs {
                    return Err(Error::config(format!(
                        "pairs_per_prompt = {} exceeds the {max_pairs} distinct pairs available with k = {}",
                        self.pairs_per_prompt, self.k
                    )));
                }
            }
            RecordVariant::List => {
                let n = self.list_len.unwrap_or(self.k);
                if n < 2 || n > self.k {
                    return Err(Error::config(format!("list_len must be in [2, {}], got {n}", self.k)));
                }
            }
        }
        if !(self.score_noise_std >= 0.0 && self.score_noise_std.is_finite()) {
            return Err(Error::config("score_noise_std must be finite and non-negative"));
        }
        Ok(space)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub rewards: LatentRewardTable,
    pub records: Vec<PreferenceRecord>,
}

/// Draws `r* ~ N(0,1)`, then per prompt samples candidate pairs uniformly
/// without replacement and labels them with Bradley–Terry (or ranks
/// candidate lists with Plackett–Luce).
pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedDataset> {
    let space = spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let rewards = LatentRewardTable::standard_normal(space, &mut rng);
    let k = spec.k;
    let all_pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    let noise = Normal::new(0.0, spec.score_noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut records = Vec::with_capacity(spec.prompts * spec.pairs_per_prompt);
    for x in 0..spec.prompts {
        match spec.variant {
            RecordVariant::Pair | RecordVariant::ScoredPair => {
                for i in sample_indices(&mut rng, all_pairs.len(), spec.pairs_per_prompt) {
                    let (a, b) = all_pairs[i];
                    let rec = sample_pair(&rewards, x, a, b, &mut rng)?;
                    let rec = if spec.variant == RecordVariant::ScoredPair {
                        let (w, l) = rec.winner_loser().expect("pair record");
                        let score_w = rewards.get(x, w)? + noise.sample(&mut rng);
                        let score_l = rewards.get(x, l)? + noise.sample(&mut rng);
                        PreferenceRecord::ScoredPair { prompt: x, winner: w, loser: l, score_w, score_l }
                    } else {
                        rec
                    };
                    records.push(rec);
                }
            }
            RecordVariant::List => {
                let n = spec.list_len.unwrap_or(k);
                for _ in 0..spec.pairs_per_prompt {
                    let cands = sample_indices(&mut rng, k, n).into_vec();
                    records.push(sample_list(&rewards, x, &cands, &mut rng)?);
                }
            }
        }
    }
    Ok(GeneratedDataset { rewards, records })
}
