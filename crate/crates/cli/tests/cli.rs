use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0, 1]

[data.generator]
n_patients = 240

[model]
embed_dim = 8
encoder_hidden = 8
decoder_hidden = 8
head_hidden = 4
miss_dim = 4
miss_hidden = 4
heads = 2

[training]
max_epochs = 2
learning_rate = 0.001

[rectifier]
min_support = 5
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crl-mmnar"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&["gen-data", "-c", s(&cfg), "--seed", "4", "-o", s(&a)]);
    run(&["gen-data", "-c", s(&cfg), "--seed", "4", "-o", s(&b)]);
    let (fa, fb) = (std::fs::read(a.join("data.jsonl")).unwrap(), std::fs::read(b.join("data.jsonl")).unwrap());
    assert_eq!(fa, fb);
    assert_eq!(fa.iter().filter(|&&c| c == b'\n').count(), 240);
    assert!(!String::from_utf8_lossy(&fa).contains("\"hidden\""));
    run(&["gen-data", "-c", s(&cfg), "--with-oracle", "-o", s(&a)]);
    assert!(std::fs::read_to_string(a.join("data.jsonl")).unwrap().contains("\"hidden\""));
}

#[test]
fn unknown_flags_print_usage_and_fail() {
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin().args(["baseline", "--kind", "median"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("median"));
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[training]\nlearnng_rate = 0.1\n");
    let out = bin().args(["train", "-c", s(&cfg), "-o", s(dir.path())]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnng_rate"));
}

#[test]
fn train_then_evaluate_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("run");
    run(&["train", "-c", s(&cfg), "-o", s(&out)]);
    for f in ["config.toml", "aggregate.csv", "aggregate.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let seed = out.join("seed-1");
    for f in ["checkpoint.bin", "model.json", "rectifier.tsv", "metrics.json", "metrics.csv", "curve.csv", "test.jsonl"] {
        assert!(seed.join(f).exists(), "{f}");
    }
    let eval = dir.path().join("eval");
    run(&[
        "evaluate",
        "-c",
        s(&cfg),
        "--checkpoint",
        s(&seed.join("checkpoint.bin")),
        "--data",
        s(&seed.join("test.jsonl")),
        "-o",
        s(&eval),
    ]);
    assert_eq!(
        std::fs::read_to_string(eval.join("metrics.csv")).unwrap(),
        std::fs::read_to_string(seed.join("metrics.csv")).unwrap()
    );

    let other = config(dir.path(), &TINY.replace("min_support = 5", "min_support = 6"));
    let args = |force: bool| {
        let mut a = vec![
            "evaluate".to_string(),
            "-c".into(),
            s(&other).into(),
            "--checkpoint".into(),
            s(&seed.join("checkpoint.bin")).into(),
            "--data".into(),
            s(&seed.join("test.jsonl")).into(),
            "-o".into(),
            s(&eval).into(),
        ];
        if force {
            a.push("--force".into());
        }
        a
    };
    let refused = bin().args(args(false)).output().unwrap();
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("hash"));
    assert!(bin().args(args(true)).output().unwrap().status.success());
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&["train", "-c", s(&cfg), "--seed", "5", "-o", s(&a)]);
    run(&["train", "-c", s(&cfg), "--seed", "5", "-o", s(&b)]);
    for f in ["metrics.csv", "metrics.json", "curve.csv", "checkpoint.bin", "rectifier.tsv"] {
        assert_eq!(
            std::fs::read(a.join("seed-5").join(f)).unwrap(),
            std::fs::read(b.join("seed-5").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn baseline_rectify_probe_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let base = dir.path().join("base");
    run(&["baseline", "-c", s(&cfg), "--seed", "0", "--kind", "zero_fill", "-o", s(&base)]);
    let meta = std::fs::read_to_string(base.join("seed-0/model.json")).unwrap();
    assert!(meta.contains("zero_fill"));

    let full = dir.path().join("full");
    run(&["train", "-c", s(&cfg), "--seed", "0", "-o", s(&full)]);
    let ckpt = full.join("seed-0/checkpoint.bin");
    let rect = dir.path().join("rect");
    run(&["rectify", "-c", s(&cfg), "--checkpoint", s(&ckpt), "-o", s(&rect)]);
    assert_eq!(
        std::fs::read(rect.join("rectifier.tsv")).unwrap(),
        std::fs::read(full.join("seed-0/rectifier.tsv")).unwrap()
    );
    let probe = dir.path().join("probe");
    run(&["probe", "-c", s(&cfg), "--checkpoint", s(&ckpt), "-o", s(&probe)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(probe.join("probe.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
    let base_probe = bin()
        .args(["probe", "-c", s(&cfg), "--checkpoint", s(&base.join("seed-0/checkpoint.bin")), "-o", s(&probe)])
        .output()
        .unwrap();
    assert!(!base_probe.status.success());

    let sw = dir.path().join("sweep");
    run(&["sweep", "-c", s(&cfg), "--seed", "0", "--param", "dropout", "-o", s(&sw)]);
    let csv = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    run(&["sweep", "-c", s(&cfg), "--seed", "0", "--param", "lambda_rec", "--values", "0.5,1", "-o", s(&sw)]);
    assert_eq!(std::fs::read_to_string(sw.join("sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &TINY.replace("max_epochs = 2", "max_epochs = 1"));
    let out = dir.path().join("abl");
    let stdout = run(&["ablate", "-c", s(&cfg), "-o", s(&out)]).stdout;
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["base", "+mmnar_fusion", "+reconstruction", "+rectifier"]);
    assert!(String::from_utf8_lossy(&stdout).contains("ΔAUC"));
}
