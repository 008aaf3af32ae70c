use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use c3dpo::collapse::{run_collapse_experiment, CollapseResults};
use c3dpo::data;
use c3dpo::trainer::{collapse_metrics, TrainReport};
use c3dpo::verify;
use serde::Serialize;

use crate::config::{config_dir, read_config, GenConfig, RunConfig, SweepConfig};
use crate::manifest::Manifest;
use crate::{ensure_out_dir, CheckFailure};

const DATA_FILE: &str = "data.jsonl";
const REWARDS_FILE: &str = "rewards.json";
const METRICS_FILE: &str = "metrics.csv";
const MODEL_FILE: &str = "model.json";
const REFERENCE_FILE: &str = "reference.json";
const VERIFY_FILE: &str = "verify.json";
const SWEEP_FILE: &str = "sweep.csv";
const SUMMARY_FILE: &str = "summary.json";
const REPORT_FILE: &str = "report.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct RewardsFile<'a> {
    rewards: &'a [Vec<f64>],
}

pub fn gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: GenConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.generator.seed = s;
    }
    let generated = data::generate(&cfg.generator)?;
    ensure_out_dir(out)?;
    data::write_jsonl(&generated.records, &out.join(DATA_FILE))?;
    write_json(&out.join(REWARDS_FILE), &RewardsFile { rewards: generated.rewards.rows() })?;
    // No wall time here: repeated runs must produce identical files.
    Manifest::new("gen", cfg.generator.seed, &cfg, &[DATA_FILE, REWARDS_FILE])?.write(out)?;
    println!("wrote {} records to {}", generated.records.len(), out.join(DATA_FILE).display());
    Ok(())
}

pub fn train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let mut cfg: RunConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    let base = config_dir(config);
    let (records, generated) = cfg.load_dataset(&base)?;
    let mut pair = cfg.load_model(&base)?;
    ensure_out_dir(out)?;
    let mut files = vec![METRICS_FILE, MODEL_FILE, REFERENCE_FILE];
    if let Some(g) = &generated {
        data::write_jsonl(&g.records, &out.join(DATA_FILE))?;
        write_json(&out.join(REWARDS_FILE), &RewardsFile { rewards: g.rewards.rows() })?;
        files.extend([DATA_FILE, REWARDS_FILE]);
    }
    pair.reference().save(&out.join(REFERENCE_FILE))?;
    let mut manifest = Manifest::new("train", cfg.train.seed, &cfg, &files)?;
    let report = match c3dpo::train(&mut pair, &records, &cfg.train) {
        Ok(r) => r,
        Err(err) => {
            if let c3dpo::Error::NumericalFailure { partial, .. } = &err {
                partial.write_csv(&out.join(METRICS_FILE))?;
                manifest.wall_time_s = Some(start.elapsed().as_secs_f64());
                manifest.write(out)?;
            }
            return Err(err.into());
        }
    };
    report.write_csv(&out.join(METRICS_FILE))?;
    pair.theta().save(&out.join(MODEL_FILE))?;
    manifest.wall_time_s = Some(start.elapsed().as_secs_f64());
    manifest.write(out)?;
    let last = report.final_row().expect("initial row always logged");
    println!(
        "trained {} for {} steps: loss {:.6}, mean residual {:.6}",
        cfg.train.loss, last.step, last.loss, last.mean_residual
    );
    Ok(())
}

#[derive(Serialize)]
struct VerifyConfig {
    seed: u64,
}

pub fn verify(out: Option<&Path>, seed: u64) -> Result<()> {
    let start = Instant::now();
    let checks = verify::run_all(seed)?;
    println!("{}", serde_json::to_string_pretty(&checks)?);
    if let Some(dir) = out {
        ensure_out_dir(dir)?;
        write_json(&dir.join(VERIFY_FILE), &checks)?;
        let mut manifest = Manifest::new("verify", seed, &VerifyConfig { seed }, &[VERIFY_FILE])?;
        manifest.wall_time_s = Some(start.elapsed().as_secs_f64());
        manifest.write(dir)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.check_name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CheckFailure(format!("failed checks: {}", failed.join(", "))).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    seed: u64,
    variant: &'a str,
    lambda: f64,
    final_winner_ratio: f64,
    final_loser_ratio: f64,
    collapse: bool,
    expected_reward: f64,
    win_rate_vs_dpo: f64,
}

pub fn sweep(config: &Path, out: &Path, seed: Option<u64>, jobs: Option<usize>) -> Result<()> {
    let start = Instant::now();
    let mut cfg: SweepConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            anyhow::bail!(c3dpo::Error::Config("--jobs must be positive".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build()?;
    let results = pool.install(|| run_collapse_experiment(&cfg.collapse))?;
    ensure_out_dir(out)?;
    let mut w = csv::Writer::from_path(out.join(SWEEP_FILE))?;
    for r in &results.runs {
        w.serialize(SweepRow {
            seed: r.seed,
            variant: &r.variant,
            lambda: r.lambda,
            final_winner_ratio: r.final_winner_ratio,
            final_loser_ratio: r.final_loser_ratio,
            collapse: r.collapse,
            expected_reward: r.expected_reward,
            win_rate_vs_dpo: r.win_rate_vs_dpo,
        })?;
    }
    w.flush()?;
    write_json(&out.join(SUMMARY_FILE), &results)?;
    let seed0 = cfg.collapse.seeds.first().copied().unwrap_or(0);
    let mut manifest = Manifest::new("sweep", seed0, &cfg, &[SWEEP_FILE, SUMMARY_FILE])?;
    manifest.wall_time_s = Some(start.elapsed().as_secs_f64());
    manifest.write(out)?;
    print_sweep(&results);
    Ok(())
}

fn print_sweep(results: &CollapseResults) {
    for s in &results.seeds {
        let best = match (&s.best_variant, s.best_lambda, s.best_win_rate) {
            (Some(v), Some(l), Some(w)) => format!("best {v} (lambda {l}) wins {w:.3} vs dpo"),
            _ => "no constrained run avoided collapse".to_string(),
        };
        println!(
            "seed {}: dpo collapsed: {}; rescued variants: [{}]; {best}",
            s.seed,
            s.dpo_collapsed,
            s.rescued_variants.join(", ")
        );
    }
}

#[derive(Serialize)]
struct ReportRow {
    step: usize,
    loss: f64,
    mean_residual: f64,
    mean_prob_w: f64,
    mean_prob_l: f64,
    mean_rhat_w: f64,
    mean_rhat_l: f64,
}

fn report_train(run_dir: &Path, manifest: &Manifest) -> Result<()> {
    let beta = manifest
        .config
        .pointer("/train/beta")
        .and_then(|v| v.as_f64())
        .context("manifest config has no train.beta")?;
    let report = TrainReport::read_csv(&run_dir.join(METRICS_FILE), beta)?;
    let summary = collapse_metrics(&report)?;
    let mut w = csv::Writer::from_path(run_dir.join(REPORT_FILE))?;
    for row in &report.rows {
        let n = row.pairs.len().max(1) as f64;
        let mean = |f: fn(&c3dpo::trainer::PairState) -> f64| row.pairs.iter().map(f).sum::<f64>() / n;
        w.serialize(ReportRow {
            step: row.step,
            loss: row.loss,
            mean_residual: row.mean_residual,
            mean_prob_w: mean(|p| p.prob_w),
            mean_prob_l: mean(|p| p.prob_l),
            mean_rhat_w: mean(|p| p.rhat_w),
            mean_rhat_l: mean(|p| p.rhat_l),
        })?;
    }
    w.flush()?;
    let last = report.rows.last().expect("read_csv rejects empty files");
    println!("run: train ({})", manifest.config.pointer("/train/loss").and_then(|v| v.as_str()).unwrap_or("?"));
    println!("steps logged: {}, final step {}", report.rows.len(), last.step);
    println!("final loss {:.6}, mean residual {:.6}", last.loss, last.mean_residual);
    for p in &summary.pairs {
        println!(
            "pair {}: winner ratio final {:.4} (min {:.4}), loser ratio final {:.4}{}",
            p.pair_id,
            p.final_winner_ratio,
            p.min_winner_ratio,
            p.final_loser_ratio,
            if p.collapsed { "  COLLAPSED" } else { "" }
        );
    }
    println!("collapse: {}", summary.any_collapse);
    println!("wrote {}", run_dir.join(REPORT_FILE).display());
    Ok(())
}

pub fn report(run_dir: &Path) -> Result<()> {
    let manifest = Manifest::read(run_dir)?;
    match manifest.command.as_str() {
        "train" => report_train(run_dir, &manifest),
        "sweep" => {
            let text = std::fs::read_to_string(run_dir.join(SUMMARY_FILE))?;
            let results: CollapseResults = serde_json::from_str(&text)?;
            println!("run: sweep ({} runs)", results.runs.len());
            print_sweep(&results);
            Ok(())
        }
        "verify" => {
            let text = std::fs::read_to_string(run_dir.join(VERIFY_FILE))?;
            let checks: Vec<serde_json::Value> = serde_json::from_str(&text)?;
            for c in &checks {
                println!("{:5} {}", c["status"].as_str().unwrap_or("?"), c["check_name"].as_str().unwrap_or("?"));
            }
            Ok(())
        }
        "gen" => {
            let records = data::read_jsonl(&run_dir.join(DATA_FILE))?;
            println!("run: gen, {} records, seed {}", records.len(), manifest.seed);
            Ok(())
        }
        other => anyhow::bail!("unknown command \"{other}\" in manifest"),
    }
}

