//! Runner error paths and file-format round trips that the acceptance
//! suite does not already cover.

use freqlab::config::ExperimentConfig;
use freqlab::manifest::{RunManifest, StageStatus};
use freqlab::runner::{Runner, Stage};
use std::path::PathBuf;

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("freqlab-runner-{}-{name}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn quick_config(extra: &str) -> ExperimentConfig {
    let base = "
dataset.train_per_class = 6
dataset.val_per_class = 4
dataset.test_per_class = 4
models = cnn
model.cnn.width = 4
train.epochs = 1
attack.images = 2
attack.lambdas = 1
attack.max_iterations = 5
analysis.images = 4
";
    ExperimentConfig::from_str(&format!("{base}\n{extra}")).unwrap()
}

#[test]
fn missing_checkpoint_with_training_disabled_fails_models_stage() {
    let out = tmp("no-ckpt");
    let cfg = quick_config("train.enabled = false");
    let mut runner = Runner::new(cfg, &out).unwrap();
    runner.quiet = true;
    let err = runner.run(&[Stage::Dataset, Stage::Models, Stage::Attack]).unwrap_err();
    assert_eq!(err.stage, "models");

    let manifest = RunManifest::load(&out).unwrap();
    let models = manifest.stages.iter().find(|s| s.name == "models").unwrap();
    assert!(matches!(models.status, StageStatus::Failed(_)));
    // Later stages are skipped, not silently dropped.
    let attack = manifest.stages.iter().find(|s| s.name == "attack").unwrap();
    assert!(matches!(attack.status, StageStatus::Skipped));
    assert!(manifest.any_failed());
}

#[test]
fn report_without_sweeps_fails() {
    let out = tmp("no-sweeps");
    let cfg = quick_config("");
    let mut runner = Runner::new(cfg, &out).unwrap();
    runner.quiet = true;
    let err = runner.run(&[Stage::Report]).unwrap_err();
    assert_eq!(err.stage, "report");
}

#[test]
fn pipeline_reuses_checkpoints_across_runs() {
    let out = tmp("reuse");
    let cfg = quick_config("");
    let mut first = Runner::new(cfg.clone(), &out).unwrap();
    first.quiet = true;
    first.run(&[Stage::Dataset, Stage::Models]).unwrap();
    let ckpt = out.join("model_cnn.ckpt");
    assert!(ckpt.exists());
    let stamp = std::fs::metadata(&ckpt).unwrap().modified().unwrap();

    // Second run with training disabled must load, not retrain.
    let cfg2 = quick_config("train.enabled = false");
    let mut second = Runner::new(cfg2, &out).unwrap();
    second.quiet = true;
    second.run(&[Stage::Dataset, Stage::Models, Stage::Attack]).unwrap();
    assert_eq!(std::fs::metadata(&ckpt).unwrap().modified().unwrap(), stamp);
    assert!(out.join("attack_results_cnn_phase.csv").exists()
        || out.join("attack_results_cnn_mag.csv").exists());
}

#[test]
fn idx_dataset_end_to_end() {
    let out = tmp("idx");
    // Synthesize a small IDX pair: 2 classes of constant-brightness 16x16
    // images (class 0 dark, class 1 bright).
    let n = 24usize;
    let (rows, cols) = (16usize, 16usize);
    let mut img = Vec::new();
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::new();
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 2;
        let level = if class == 0 { 60u8 } else { 190u8 };
        img.extend((0..rows * cols).map(|p| level.wrapping_add((p % 7) as u8)));
        lab.push(class as u8);
    }
    let img_path = out.join("train-images.idx");
    let lab_path = out.join("train-labels.idx");
    std::fs::write(&img_path, &img).unwrap();
    std::fs::write(&lab_path, &lab).unwrap();

    let text = format!(
        "
dataset.kind = idx
dataset.classes = 2
dataset.train_images = {}
dataset.train_labels = {}
dataset.test_images = {}
dataset.test_labels = {}
models = cnn
model.cnn.width = 4
train.epochs = 2
attack.images = 2
attack.lambdas = 1
attack.max_iterations = 5
",
        img_path.display(),
        lab_path.display(),
        img_path.display(),
        lab_path.display()
    );
    let cfg = ExperimentConfig::from_str(&text).unwrap();
    let mut runner = Runner::new(cfg, &out).unwrap();
    runner.quiet = true;
    runner.run(&[Stage::Dataset, Stage::Models, Stage::Attack]).unwrap();
    let manifest = RunManifest::load(&out).unwrap();
    assert!(!manifest.any_failed());
    assert!(manifest.verify(&out).unwrap().is_empty());
}
