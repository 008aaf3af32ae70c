mod common;

use c3dpo::constraints::ConstraintSpec;
use c3dpo::data::{generate, GeneratorSpec, RecordVariant};
use c3dpo::trainer::{collapse_metrics, BatchSize, EarlyStop, StopMetric, TrainReport};
use c3dpo::{train, Error, ModelPair, PolicyModel, PreferenceRecord, TrainConfig};
use common::*;

fn dataset(seed: u64, variant: RecordVariant) -> Vec<PreferenceRecord> {
    let spec = GeneratorSpec {
        prompts: 4,
        k: 5,
        pairs_per_prompt: 6,
        variant,
        list_len: None,
        score_noise_std: 0.5,
        seed,
    };
    generate(&spec).unwrap().records
}

fn start(seed: u64) -> ModelPair {
    ModelPair::from_reference(random_tabular(&mut rng(seed), 4, 5))
}

#[test]
fn training_is_bit_reproducible() {
    let data = dataset(1, RecordVariant::Pair);
    let mut cfg = TrainConfig::new("c3dpo_i_l1", 0.5, 0.2, 200);
    cfg.batch_size = BatchSize::Size(5);
    cfg.momentum = 0.5;
    cfg.lambda = 0.1;
    let run = || {
        let mut pair = start(2);
        let report = train(&mut pair, &data, &cfg).unwrap();
        (report, pair.theta().parameters().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(
        pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn minibatch_order_depends_on_seed() {
    let data = dataset(1, RecordVariant::Pair);
    let mut cfg = TrainConfig::new("dpo", 0.5, 0.2, 50);
    cfg.batch_size = BatchSize::Size(3);
    let mut p1 = start(3);
    let mut p2 = start(3);
    train(&mut p1, &data, &cfg).unwrap();
    cfg.seed = 99;
    train(&mut p2, &data, &cfg).unwrap();
    assert_ne!(p1.theta().parameters(), p2.theta().parameters());
}

#[test]
fn tabular_probabilities_stay_normalized() {
    for loss in ["dpo", "ipo", "cdpo", "c3dpo_log_l2", "c3dpo_i_l1"] {
        let data = dataset(4, RecordVariant::Pair);
        let mut pair = start(5);
        train(&mut pair, &data, &TrainConfig::new(loss, 0.3, 0.5, 300)).unwrap();
        for x in 0..4 {
            let s: f64 = pair.theta().probs(x).unwrap().iter().sum();
            assert!((s - 1.0).abs() <= 1e-10, "{loss}: {s}");
        }
    }
}

#[test]
fn zero_lambda_matches_plain_dpo_bit_for_bit() {
    let data = dataset(6, RecordVariant::Pair);
    let mut base = TrainConfig::new("dpo", 0.4, 0.3, 150);
    base.batch_size = BatchSize::Size(7);
    base.log_every = 5;
    let mut p0 = start(7);
    let r0 = train(&mut p0, &data, &base).unwrap();
    for name in ConstraintSpec::VARIANTS {
        let mut cfg = base.clone();
        cfg.loss = name.to_string();
        cfg.lambda = 0.0;
        let mut p = start(7);
        let r = train(&mut p, &data, &cfg).unwrap();
        assert_eq!(p.theta().parameters(), p0.theta().parameters(), "{name}");
        for (a, b) in r.rows.iter().zip(&r0.rows) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.pairs, b.pairs);
        }
    }
}

#[test]
fn two_response_dpo_raises_winner_monotonically() {
    let reference = PolicyModel::tabular(vec![vec![0.0, 0.0]]).unwrap();
    let mut pair = ModelPair::from_reference(reference);
    let data = vec![PreferenceRecord::pair(0, 0, 1).unwrap()];
    let mut cfg = TrainConfig::new("dpo", 1.0, 0.1, 500);
    cfg.log_every = 1;
    let report = train(&mut pair, &data, &cfg).unwrap();
    assert_eq!(report.rows.len(), 501);
    for w in report.rows.windows(2) {
        assert!(w[1].pairs[0].prob_w > w[0].pairs[0].prob_w);
        assert!(w[1].loss < w[0].loss);
    }
    assert!(report.final_row().unwrap().pairs[0].prob_w > 0.5);
}

#[test]
fn rows_cover_start_interval_and_end() {
    let data = dataset(8, RecordVariant::Pair);
    let mut cfg = TrainConfig::new("dpo", 1.0, 0.1, 25);
    cfg.log_every = 10;
    let report = train(&mut start(9), &data, &cfg).unwrap();
    let steps: Vec<usize> = report.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 25]);
}

#[test]
fn early_stopping_restores_best_parameters() {
    let data = dataset(10, RecordVariant::Pair);
    let mut cfg = TrainConfig::new("dpo", 0.5, 5.0, 2000);
    cfg.log_every = 1;
    cfg.early_stop = Some(EarlyStop { metric: StopMetric::WinnerProb, patience: 3 });
    let mut pair = start(11);
    let report = train(&mut pair, &data, &cfg).unwrap();
    let last = report.final_row().unwrap().step;
    assert!(last < 2000, "never stopped");
    assert!(report.best_step <= last);
    let best_row = report.rows.iter().find(|r| r.step == report.best_step).unwrap();
    let mean = |r: &c3dpo::trainer::ReportRow| r.pairs.iter().map(|p| p.prob_w).sum::<f64>() / r.pairs.len() as f64;
    assert!(report.rows.iter().all(|r| mean(r) <= mean(best_row) + 1e-12));
    let model = report.final_model.as_ref().unwrap();
    assert_eq!(model.parameters(), pair.theta().parameters());
}

#[test]
fn csv_round_trip() {
    let data = dataset(12, RecordVariant::Pair);
    let report = train(&mut start(13), &data, &TrainConfig::new("c3dpo_log_l2", 0.5, 0.2, 40)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    report.write_csv(&path).unwrap();
    let back = TrainReport::read_csv(&path, 0.5).unwrap();
    assert_eq!(back.rows, report.rows);
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("step,loss,mean_residual,pair_id,prob_w,prob_l,rhat_w,rhat_l\n"));
}

#[test]
fn collapse_metrics_from_rewards() {
    let data = dataset(14, RecordVariant::Pair);
    let report = train(&mut start(15), &data, &TrainConfig::new("dpo", 0.5, 0.2, 40)).unwrap();
    let summary = collapse_metrics(&report).unwrap();
    let last = report.final_row().unwrap();
    for (p, s) in summary.pairs.iter().zip(&last.pairs) {
        assert!(rel(p.final_winner_ratio, (s.rhat_w / 0.5).exp()) < 1e-15);
        assert_eq!(p.collapsed, p.final_winner_ratio < 1.0);
        assert!(p.min_winner_ratio <= p.final_winner_ratio);
    }
    assert!(rel(summary.pairs[0].min_winner_ratio, 1.0) < 1e-12 || summary.pairs[0].min_winner_ratio < 1.0);
}

#[test]
fn list_records_need_a_list_loss() {
    let data = dataset(16, RecordVariant::List);
    let err = train(&mut start(17), &data, &TrainConfig::new("dpo", 0.5, 0.2, 5)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    train(&mut start(17), &data, &TrainConfig::new("dpo_pl", 0.5, 0.2, 5)).unwrap();
}

#[test]
fn scored_pairs_train_with_distillation() {
    let data = dataset(18, RecordVariant::ScoredPair);
    train(&mut start(19), &data, &TrainConfig::new("distilled_dpo", 0.5, 0.2, 20)).unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let data = dataset(20, RecordVariant::Pair);
    let bad = [
        TrainConfig::new("dpo", 0.0, 0.1, 5),
        TrainConfig::new("dpo", 1.0, -0.1, 5),
        TrainConfig::new("nope", 1.0, 0.1, 5),
        TrainConfig { lambda: -1.0, ..TrainConfig::new("c3dpo_log_l1", 1.0, 0.1, 5) },
        TrainConfig { momentum: 1.0, ..TrainConfig::new("dpo", 1.0, 0.1, 5) },
    ];
    for cfg in bad {
        assert!(matches!(train(&mut start(21), &data, &cfg), Err(Error::Config(_))), "{cfg:?}");
    }
    assert!(matches!(train(&mut start(21), &[], &TrainConfig::new("dpo", 1.0, 0.1, 5)), Err(Error::Config(_))));
}

#[test]
fn divergence_reports_partial_metrics() {
    let data = dataset(22, RecordVariant::Pair);
    let mut cfg = TrainConfig::new("ipo", 1.0, 1e300, 50);
    cfg.log_every = 1;
    match train(&mut start(23), &data, &cfg) {
        Err(Error::NumericalFailure { step, partial, .. }) => {
            assert!(step >= 1);
            assert!(!partial.rows.is_empty());
        }
        other => panic!("expected numerical failure, got {other:?}"),
    }
}

#[test]
fn config_json_defaults_and_unknown_keys() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"loss":"c3dpo_i_l2","beta":0.1,"learning_rate":0.01,"steps":10}"#).unwrap();
    assert_eq!(cfg.lambda, 2e-4);
    assert_eq!(cfg.batch_size, BatchSize::Full);
    let err = serde_json::from_str::<TrainConfig>(r#"{"loss":"dpo","beta":0.1,"learning_rate":0.01,"steps":10,"lr":1}"#);
    assert!(err.is_err());
    let b: TrainConfig =
        serde_json::from_str(r#"{"loss":"dpo","beta":0.1,"learning_rate":0.01,"steps":10,"batch_size":8}"#).unwrap();
    assert_eq!(b.batch_size, BatchSize::Size(8));
}
