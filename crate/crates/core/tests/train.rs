use std::fs;
use std::path::Path;

use cacvit_core::data::{build_split, SceneSpec};
use cacvit_core::model::{Model, ModelConfig};
use cacvit_core::train::{
    evaluate, load_split, parse_metrics_csv, prepare_samples, train, OptimConfig, Sample, TrainOptions,
    BEST_CHECKPOINT, METRICS_FILE, STATE_FILE,
};

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        exemplar_w: 8,
        exemplar_h: 8,
        exemplar_patch: 4,
        channels: 3,
        depth: 2,
        dim: 16,
        heads: 2,
        extra_depth: 1,
        extra_dim: 8,
        extra_heads: 2,
        decoder_dim: 8,
        k_shots: 2,
        use_cls: true,
        use_se: true,
        use_me: true,
        seed: 3,
    }
}

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        canvas: 16,
        n_min: 2,
        n_max: 3,
        radius_min: 1.5,
        radius_max: 2.0,
        distractor_max: 1,
        k_shots: 2,
        seed,
        ..SceneSpec::default()
    }
}

fn split(dir: &Path, seed: u64, n: usize) -> Vec<Sample> {
    build_split(&small_spec(seed), n, dir).unwrap();
    load_split(dir).unwrap()
}

fn optim(epochs: usize) -> OptimConfig {
    OptimConfig { batch_size: 2, epochs, warmup_epochs: 1, seed: 9, ..OptimConfig::desk() }
}

#[test]
fn a_few_steps_on_one_image_reduce_its_loss() {
    let dir = tempfile::tempdir().unwrap();
    let samples = split(&dir.path().join("d"), 1, 1);
    let mut model = Model::new(tiny()).unwrap();
    let input = &prepare_samples(&model, &samples).unwrap()[0];
    let (before, _) = model.loss_and_grads(input, &samples[0].density).unwrap();
    let opt = OptimConfig { batch_size: 1, epochs: 20, warmup_epochs: 0, ..OptimConfig::desk() };
    let opts = TrainOptions { out_dir: dir.path().join("run"), ..TrainOptions::default() };
    let res = train(&mut model, &samples, &samples, &opt, &opts, |_| {}).unwrap();
    let (after, _) = res.last.loss_and_grads(input, &samples[0].density).unwrap();
    assert!(after < before, "{after} vs {before}");
    assert_eq!(res.metrics.len(), 20);
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let tr = split(&dir.path().join("train"), 2, 6);
    let va = split(&dir.path().join("val"), 3, 3);

    let full = dir.path().join("full");
    let mut m = Model::new(tiny()).unwrap();
    train(&mut m, &tr, &va, &optim(4), &TrainOptions { out_dir: full.clone(), ..TrainOptions::default() }, |_| {})
        .unwrap();

    let part = dir.path().join("part");
    let mut m = Model::new(tiny()).unwrap();
    let first = TrainOptions { out_dir: part.clone(), resume: false, stop_after: Some(2) };
    let r = train(&mut m, &tr, &va, &optim(4), &first, |_| {}).unwrap();
    assert_eq!(r.metrics.len(), 2);
    let mut fresh = Model::new(tiny()).unwrap();
    let second = TrainOptions { out_dir: part.clone(), resume: true, stop_after: None };
    train(&mut fresh, &tr, &va, &optim(4), &second, |_| {}).unwrap();

    for f in [BEST_CHECKPOINT, METRICS_FILE, STATE_FILE] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
    let rows = parse_metrics_csv(&fs::read_to_string(full.join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn resume_without_state_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let tr = split(&dir.path().join("train"), 2, 2);
    let mut m = Model::new(tiny()).unwrap();
    let opts = TrainOptions { out_dir: dir.path().join("run"), resume: true, stop_after: None };
    assert!(train(&mut m, &tr, &tr, &optim(1), &opts, |_| {}).is_err());
}

#[test]
fn evaluation_ignores_sample_order() {
    let dir = tempfile::tempdir().unwrap();
    let samples = split(dir.path(), 4, 5);
    let model = Model::new(tiny()).unwrap();
    let a = evaluate(&model, &samples, Some(2.5)).unwrap();
    let mut rev = samples.clone();
    rev.reverse();
    let b = evaluate(&model, &rev, Some(2.5)).unwrap();
    assert_eq!(a.mae, b.mae);
    assert_eq!(a.rmse, b.rmse);
    assert!(a.rmse >= a.mae);
}

#[test]
fn csv_footer_agrees_with_rows() {
    let dir = tempfile::tempdir().unwrap();
    let samples = split(dir.path(), 5, 6);
    let model = Model::new(tiny()).unwrap();
    let report = evaluate(&model, &samples, Some(2.5)).unwrap();
    let csv = report.to_csv();
    let errs: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<f64> = l.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
            assert_eq!((f[0] - f[1]).abs(), f[2]);
            f[2]
        })
        .collect();
    assert_eq!(errs.len(), 6);
    let mae = errs.iter().sum::<f64>() / 6.0;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / 6.0).sqrt();
    assert!((mae - report.mae).abs() < 1e-9);
    assert!((rmse - report.rmse).abs() < 1e-9);
    let footer = csv.lines().find(|l| l.starts_with("# all")).unwrap();
    assert!(footer.contains("n=6"), "{footer}");
}

#[test]
fn missing_manifest_error_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_split(dir.path()).unwrap_err().to_string();
    assert!(err.contains("manifest"), "{err}");
}
