//! End-to-end training smoke tests on the synthetic corpus.

use std::collections::BTreeSet;
use std::path::Path;

use endosr_core::denoiser::{Denoiser, DenoiserConfig};
use endosr_core::imaging::synth_toy_dataset;
use endosr_core::rng::Rng;
use endosr_core::schedule::NoiseSchedule;
use endosr_core::training::{checkpoint, train_loop, CorpusSource, TrainConfig};

fn tiny_denoiser_config(input_size: usize) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        res_blocks_per_level: 1,
        attention_resolutions: BTreeSet::new(),
        dropout_p: 0.0,
        groups: 4,
        gamma_embed_dim: 8,
        input_size,
        in_channels: 6,
        out_channels: 3,
    }
}

fn toy_cfg(iters: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        base_lr: 1e-3,
        lr_milestones: vec![],
        lr_factor: 0.5,
        total_iters: iters,
        val_every: 100,
        ema_decay: Some(0.9),
        clip_max_norm: Some(1.0),
        p_norm: 2,
        seed,
        val_steps: Some(10),
        val_items: 2,
    }
}

fn run_train(corpus: &Path, out: &Path, iters: u64, seed: u64) -> endosr_core::training::TrainSummary {
    let sched = NoiseSchedule::linear(50, 1e-3, 5e-2).unwrap();
    let mut rng = Rng::new(seed);
    let mut model = Denoiser::<f32>::build(tiny_denoiser_config(16), &mut rng).unwrap();
    let mut data = CorpusSource::load(corpus, 16, 2).unwrap();
    let cfg = toy_cfg(iters, seed);
    let (_, summary) =
        train_loop(&mut model, &mut data, &sched, &cfg, out, "test echo").unwrap();
    summary
}

#[test]
fn toy_training_beats_predict_zero_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    synth_toy_dataset(&corpus, 24, 16, &mut Rng::new(11)).unwrap();

    let out = dir.path().join("run");
    let summary = run_train(&corpus, &out, 200, 7);
    assert_eq!(summary.losses.len(), 200);

    let first: f64 = summary.losses[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = summary.losses[150..].iter().sum::<f64>() / 50.0;
    assert!(
        last < 0.9 * first,
        "training made no progress: first-50 mean {first}, last-50 mean {last}"
    );

    // a checkpoint and a complete metrics log exist
    let latest = summary.latest_checkpoint.expect("latest checkpoint");
    let loaded = checkpoint::load(&latest).unwrap();
    assert_eq!(loaded.state.step, 200);
    assert_eq!(loaded.config_echo, "test echo");
    let log = std::fs::read_to_string(&summary.metrics_path).unwrap();
    assert_eq!(log.lines().count(), 201, "header + one row per step");
    // validation columns filled on validation steps
    let val_row = log.lines().nth(100).unwrap();
    assert!(!val_row.ends_with("-\t-"), "step 99 row should hold validation metrics: {val_row}");
    assert!(summary.best_checkpoint.is_some());
    assert!(summary.best_val_psnr.is_some());
}

#[test]
fn same_seed_byte_identical_metrics_log() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    synth_toy_dataset(&corpus, 16, 16, &mut Rng::new(3)).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let sa = run_train(&corpus, &out_a, 60, 42);
    let sb = run_train(&corpus, &out_b, 60, 42);
    let log_a = std::fs::read(&sa.metrics_path).unwrap();
    let log_b = std::fs::read(&sb.metrics_path).unwrap();
    assert_eq!(log_a, log_b, "same seed must produce identical logs");

    let out_c = dir.path().join("c");
    let sc = run_train(&corpus, &out_c, 60, 43);
    let log_c = std::fs::read(&sc.metrics_path).unwrap();
    assert_ne!(log_a, log_c, "different seed must actually change the run");
}

#[test]
fn zero_iterations_returns_initial_state_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    synth_toy_dataset(&corpus, 8, 16, &mut Rng::new(5)).unwrap();

    let sched = NoiseSchedule::linear(50, 1e-3, 5e-2).unwrap();
    let mut rng = Rng::new(1);
    let mut model = Denoiser::<f32>::build(tiny_denoiser_config(16), &mut rng).unwrap();
    let initial = model.params().clone();
    let mut data = CorpusSource::load(&corpus, 16, 2).unwrap();
    let out = dir.path().join("run");
    let (state, summary) = train_loop(
        &mut model,
        &mut data,
        &sched,
        &toy_cfg(0, 1),
        &out,
        "",
    )
    .unwrap();
    assert_eq!(state.step, 0);
    assert_eq!(summary.losses.len(), 0);
    assert!(summary.latest_checkpoint.is_none());
    assert_eq!(model.params(), &initial);
    assert!(!out.join("latest.ckpt").exists());
}
