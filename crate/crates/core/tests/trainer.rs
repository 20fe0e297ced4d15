//! Training harness: run directories, evaluation fixtures, ablation
//! bookkeeping and config handling.

use std::fs;

use dart_core::perception::{SegNet, SegNetConfig};
use dart_core::toy_env::{make_splits, scripted_action, SplitName};
use dart_core::trainer::{
    config_diff, evaluate, evaluate_run, evaluate_with, run_ablation, run_training, Agent, RunOptions, TrainConfig, TrainError,
    Variant, CSV_HEADER,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn segnet() -> SegNet {
    SegNet::new(
        SegNetConfig {
            hidden: 8,
            feature_dim: 8,
            head_hidden: 8,
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap()
}

/// A run small enough for a unit-test budget.
fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig {
        total_steps: 400,
        eval_every: 200,
        eval_episodes: 2,
        warmup_steps: 100,
        batch_size: 16,
        buffer_capacity: 1000,
        critic_hidden: vec![16],
        ..TrainConfig::default()
    };
    cfg.diffusion.hidden = vec![16];
    cfg.diffusion.time_dim = 4;
    cfg.encoder.d_model = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.layers = 1;
    cfg.encoder.ffn_dim = 8;
    cfg.planner.hidden = 8;
    cfg.planner.feature_dim = 8;
    cfg.planner.head_hidden = 8;
    cfg.env.horizon = 60;
    cfg
}

#[test]
fn zero_budget_writes_initial_checkpoints_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        total_steps: 0,
        ..tiny()
    };
    let out = run_training(
        &cfg,
        segnet(),
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            verbose: false,
        },
    )
    .unwrap();
    assert!(out.history.is_empty());
    for f in ["seg.ckpt", "policy.ckpt", "critic.ckpt", "cp.ckpt", "encoder.ckpt", "manifest.json", "vocab.json", "splits.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert!(!dir.path().join("metrics.csv").exists());
    let (agent, manifest) = Agent::load(dir.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(agent.obs_dim(), manifest.obs_dim);
}

#[test]
fn scripted_controller_solves_every_split() {
    let cfg = TrainConfig::default();
    let splits = make_splits(8, 4, 0).unwrap();
    let phi = cfg.formula().unwrap();
    for name in [SplitName::Seen, SplitName::Unseen, SplitName::Transfer] {
        let res = evaluate_with(splits.get(name), 30, &cfg.env, &phi, 7, |env, _, _| {
            Ok(scripted_action(&env.state, &env.object, &env.config).to_vec())
        })
        .unwrap();
        assert_eq!(res.success_rate, 1.0, "{}", name.as_str());
        assert!(res.avg_success_steps <= cfg.env.horizon as f64);
    }
}

#[test]
fn random_weights_rarely_succeed() {
    let cfg = TrainConfig::default();
    let splits = make_splits(8, 4, 0).unwrap();
    let mut agent = Agent::new(&cfg, segnet(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let res = evaluate(&mut agent, &splits.seen, 100, &cfg.env, &cfg.formula().unwrap(), 11).unwrap();
    assert!(res.success_rate <= 0.05, "success {}", res.success_rate);
}

#[test]
fn zero_episodes_is_an_error() {
    let cfg = TrainConfig::default();
    let splits = make_splits(2, 2, 0).unwrap();
    let mut agent = Agent::new(&cfg, segnet(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let err = evaluate(&mut agent, &splits.seen, 0, &cfg.env, &cfg.formula().unwrap(), 0);
    assert!(matches!(err, Err(TrainError::Config(_))));
}

#[test]
fn dropping_affordance_shrinks_observation_by_two() {
    let base = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = Agent::new(&Variant::Dart.apply(&base), segnet(), &mut rng).unwrap();
    let no_aff = Agent::new(&Variant::WithoutAffordance.apply(&base), segnet(), &mut rng).unwrap();
    let no_ltl = Agent::new(&Variant::WithoutLtl.apply(&base), segnet(), &mut rng).unwrap();
    assert_eq!(no_aff.obs_dim(), full.obs_dim() - 2);
    assert_eq!(no_ltl.obs_dim(), full.obs_dim());
}

#[test]
fn ablation_variants_differ_only_in_their_flags() {
    let base = TrainConfig::default();
    assert!(config_diff(&base, &Variant::Dart.apply(&base)).unwrap().is_empty());
    assert_eq!(config_diff(&base, &Variant::WithoutAffordance.apply(&base)).unwrap(), vec!["use_affordance"]);
    assert_eq!(config_diff(&base, &Variant::WithoutLtl.apply(&base)).unwrap(), vec!["use_ltl"]);
    let mut both = config_diff(&base, &Variant::WithoutBoth.apply(&base)).unwrap();
    both.sort();
    assert_eq!(both, vec!["use_affordance", "use_ltl"]);
}

#[test]
fn config_validation() {
    let ok = TrainConfig::from_json(r#"{"seed": 3, "env": {"horizon": 50}}"#).unwrap();
    assert_eq!(ok.seed, 3);
    assert_eq!(ok.env.horizon, 50);
    assert_eq!(ok.env.a_max, TrainConfig::default().env.a_max);
    assert!(TrainConfig::from_json(r#"{"task": "F door_opened"}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"task": "F(lid_grasped"}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"no_such_field": 1}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
    let text = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), TrainConfig::default());
}

#[test]
fn short_run_writes_metrics_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let out = run_training(
        &cfg,
        segnet(),
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            verbose: false,
        },
    )
    .unwrap();
    assert_eq!(out.history.len(), 6);
    for r in &out.history {
        assert!((0.0..=1.0).contains(&r.success_rate));
        assert!(r.avg_success_steps <= cfg.env.horizon as f64);
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 7);
    let res = evaluate_run(dir.path(), SplitName::Unseen, 3, 0).unwrap();
    assert_eq!(res.episodes, 3);
}

#[test]
fn ablation_runs_every_variant_on_the_same_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        total_steps: 150,
        eval_every: 150,
        eval_episodes: 1,
        warmup_steps: 100,
        ..tiny()
    };
    let rows = run_ablation(
        &cfg,
        &[4, 9],
        &Variant::ALL,
        &segnet(),
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            verbose: false,
        },
    )
    .unwrap();
    assert_eq!(rows.len(), 4 * 2 * 3);
    for v in Variant::ALL {
        let mut seeds: Vec<u64> = rows.iter().filter(|r| r.variant == v.name()).map(|r| r.seed).collect();
        seeds.dedup();
        assert_eq!(seeds, vec![4, 9]);
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["changed_fields"]["wo_ltl"], serde_json::json!(["use_ltl"]));
    assert!(dir.path().join("ablation.csv").exists());
    assert!(dir.path().join("wo_aff").join("seed9").join("policy.ckpt").exists());
}
