use std::fmt::Write as _;

use qft::network::ModelConfig;
use qft::trainer::{load_checkpoint, train, OptimizerKind, TrainConfig, METRICS_HEADER};
use qft::Tensor;

fn csv_dataset(rows: usize) -> String {
    let mut out = String::from("a,b,c,target\n");
    for i in 0..rows {
        let a = ((i * 7) % 13) as f32 / 13.0 - 0.5;
        let b = ((i * 5) % 11) as f32 / 11.0 - 0.5;
        let c = ((i * 3) % 17) as f32 / 17.0 - 0.5;
        let _ = writeln!(out, "{a},{b},{c},{}", 0.8 * a - 0.3 * b + 0.5 * c);
    }
    out
}

#[test]
fn csv_to_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    std::fs::write(&data, csv_dataset(200)).unwrap();
    let out = dir.path().join("run");
    let cfg = TrainConfig {
        model: ModelConfig::new(vec![3, 16, 1]).with_seed(2),
        steps_per_epoch: 40,
        epochs: 2,
        batch_size: 16,
        micro_batches: 2,
        dataset: Some(data.to_str().unwrap().into()),
        output_dir: Some(out.clone()),
        ..TrainConfig::default()
    };
    let outcome = train(&cfg).unwrap();
    assert!(outcome.final_loss < outcome.initial_loss);

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let steps: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=80).collect::<Vec<_>>());

    let ck = load_checkpoint(&out.join("final.qftc")).unwrap();
    assert_eq!(ck.step, 80);
    let epoch2 = load_checkpoint(&out.join("epoch-2.qftc")).unwrap();
    assert_eq!(epoch2.model, ck.model);
    let x = Tensor::from_rows(&[&[0.1, -0.2, 0.3], &[0.0, 0.4, -0.1]]);
    let y = ck.model.predict(&x).unwrap();
    assert!(y.data().iter().all(|v| v.is_finite()));
}

#[test]
fn fp_runs_write_metrics_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        model: ModelConfig::new(vec![4, 8, 1]),
        optimizer: OptimizerKind::FpAdam,
        steps_per_epoch: 5,
        dataset: Some("synthetic:reg-4-1-n64".into()),
        output_dir: Some(dir.path().to_path_buf()),
        ..TrainConfig::default()
    };
    let outcome = train(&cfg).unwrap();
    assert_eq!(outcome.optimizer, OptimizerKind::FpAdam);
    assert!(dir.path().join("metrics.csv").exists());
    assert!(!dir.path().join("final.qftc").exists());
}

#[test]
fn dimension_mismatch_is_reported() {
    let cfg = TrainConfig {
        model: ModelConfig::new(vec![4, 8, 1]),
        dataset: Some("synthetic:reg-5-1-n64".into()),
        ..TrainConfig::default()
    };
    assert!(train(&cfg).is_err());
}
