use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qft"))
        .args(args)
        .output()
        .expect("spawn qft")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "qft failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
}

#[test]
fn profile_all_methods_in_report_and_csv() {
    let text = stdout(&qft(&["profile", "--params", "1000000"]));
    for m in ["adam", "adam-mixed", "bitsandbytes", "lion", "qft"] {
        assert!(text.contains(&format!("method={m}\n")), "{m} missing");
    }
    let csv = stdout(&qft(&["profile", "--params", "1000000", "--method", "qft", "--csv"]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,component,bytes"));
    assert!(lines.all(|l| l.starts_with("qft,") && l.split(',').count() == 3));
}

#[test]
fn profile_gb_units_are_decimal() {
    let gib = stdout(&qft(&["profile", "--params", "1000000000", "--method", "adam"]));
    let gb = stdout(&qft(&["profile", "--params", "1000000000", "--method", "adam", "--units", "gb"]));
    let w_gib: f64 = value(&gib, "weights").parse().unwrap();
    let w_gb: f64 = value(&gb, "weights").parse().unwrap();
    assert!((w_gb - 4.0).abs() < 1e-9);
    assert!((w_gib - 4.0 / 1.073741824).abs() < 1e-4);
}

#[test]
fn sweep_prints_one_row_per_fraction() {
    let csv = stdout(&qft(&["sweep", "--weights", "synthetic:heavy-8x512", "--fractions", "0,0.01,0.05"]));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "fraction,nnz,bytes,l2");
    assert_eq!(rows.len(), 4);
    let l2: Vec<f64> = rows[1..].iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(l2[0] > l2[1] && l2[1] >= l2[2]);
}

#[test]
fn stats_reports_range_ratio() {
    let normal = stdout(&qft(&["stats", "--tensor", "synthetic:normal-16x1024"]));
    let heavy = stdout(&qft(&["stats", "--tensor", "synthetic:heavy-16x1024"]));
    let r = |t: &str| value(t, "range_ratio").parse::<f64>().unwrap();
    assert!(r(&normal) < 2.0);
    assert!(r(&heavy) > 50.0);
}

#[test]
fn train_then_inspect_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = dir.path().join("train.toml");
    fs::write(
        &cfg,
        format!(
            "dataset = \"synthetic:reg-8-1-n256\"\nsteps_per_epoch = 20\nepochs = 2\noutlier_fraction = 0.1\noutput_dir = {:?}\n\n[model]\nlayer_dims = [8, 16, 1]\n",
            out_dir.display().to_string()
        ),
    )
    .unwrap();
    let text = stdout(&qft(&["train", "--config", cfg.to_str().unwrap()]));
    assert_eq!(value(&text, "steps"), "40");
    let ckpt = out_dir.join("final.qftc");
    for name in ["metrics.csv", "epoch-1.qftc", "epoch-2.qftc", "final.qftc"] {
        assert!(Path::new(&out_dir).join(name).exists(), "{name} missing");
    }
    let stats = stdout(&qft(&["stats", "--tensor", ckpt.to_str().unwrap(), "--layer", "2"]));
    assert_eq!(value(&stats, "count"), "16");
    let sweep = stdout(&qft(&["sweep", "--weights", ckpt.to_str().unwrap(), "--fractions", "0,0.1"]));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn bad_input_exits_nonzero_with_message() {
    let cases: &[&[&str]] = &[
        &["profile", "--params", "100", "--method", "sgd"],
        &["profile", "--params", "100", "--units", "kb"],
        &["profile", "--params", "100", "--outlier-fraction", "1.5"],
        &["sweep", "--weights", "synthetic:heavy-4x64", "--fractions", "0.05,0.01"],
        &["sweep", "--weights", "synthetic:heavy-4x64", "--rule", "magic"],
        &["stats", "--tensor", "synthetic:normal-4x4", "--k", "0"],
        &["stats", "--tensor", "/no/such/file.qftc"],
        &["train", "--config", "/no/such/config.toml"],
    ];
    for args in cases {
        let out = qft(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error: "), "{args:?}: {err}");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let out = qft(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}
