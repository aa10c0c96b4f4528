use std::path::Path;
use std::process::{Command, Output};

use rtransfer_cli::artifacts::{read_metrics, Phase, SpectralRecord, METRICS_HEADER};
use rtransfer_cli::plot::read_sweep_csv;

const TINY: &str = r#"
seed = 3

[data]
format = "glyphs"
per_class = 24
test_per_class = 8
seed = 5

[arch]
family = "small-cnn"
depth = 4
width = 1

[source]
mode = "at"
epochs = 2
batch_size = 32
attack = { epsilon = 0.1, alpha = 0.05, steps = 2 }

[transfer]
mode = "vanilla"
k = 2
epochs = 1
batch_size = 32

[eval]
attack = { epsilon = 0.1, alpha = 0.05, steps = 3 }
"#;

fn rtransfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtransfer")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = rtransfer(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn source_transfer_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    ok(&["--config", &cfg, "--out", s(&out), "train-source"]);
    for f in ["source.ckpt", "metrics.csv", "manifest.json", "config.resolved.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));

    ok(&["--config", &cfg, "--out", s(&out), "transfer", "--mode", "neft", "--k", "2", "--beta", "0.4"]);
    let mut spectral = csv::Reader::from_path(out.join("spectral.csv")).unwrap();
    let rows: Vec<SpectralRecord> = spectral.deserialize().map(Result::unwrap).collect();
    assert!(rows.len() >= 2);
    for r in &rows {
        assert!((r.svd_norm - 0.4).abs() < 0.02 * 0.4, "{r:?}");
    }

    let first = ok(&["--config", &cfg, "--out", s(&out), "eval"]);
    let second = ok(&["--config", &cfg, "--out", s(&out), "eval"]);
    assert_eq!(first, second);
    let metrics = read_metrics(&out.join("metrics.csv")).unwrap();
    let phases: Vec<Phase> = metrics.iter().map(|m| m.phase).collect();
    assert!(phases.windows(2).all(|w| w[0] <= w[1]), "{phases:?}");
    assert_eq!(phases.iter().filter(|p| **p == Phase::Eval).count(), 2);

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let commands: Vec<&str> = manifest["runs"].as_array().unwrap().iter().map(|r| r["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["train-source", "transfer", "eval"]);

    let table = ok(&["report", s(&out)]);
    assert!(table.contains("| AT+NEFT | 2 |"), "{table}");
    assert!(table.contains("b3.l1.weight"), "{table}");
    assert!(out.join("report.csv").exists());
}

#[test]
fn resolved_config_reproduces_the_source_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--config", &cfg, "--out", s(&a), "train-source"]);
    let resolved = a.join("config.resolved.toml");
    ok(&["--config", s(&resolved), "--out", s(&b), "train-source"]);
    assert_eq!(std::fs::read(a.join("source.ckpt")).unwrap(), std::fs::read(b.join("source.ckpt")).unwrap());
    let resolved_text = std::fs::read_to_string(&resolved).unwrap();
    assert!(resolved_text.contains("steps = 2") && resolved_text.contains("fraction = 1.0"), "{resolved_text}");
}

#[test]
fn zero_budget_evaluation_matches_clean_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    ok(&["--config", &cfg, "--out", s(&out), "train-source"]);
    ok(&["--config", &cfg, "--out", s(&out), "eval", "--eps", "0", "--alpha", "0.01", "--steps", "5"]);
    let mut r = csv::Reader::from_path(out.join("eval.csv")).unwrap();
    let row: rtransfer_cli::artifacts::EvalRecord = r.deserialize().next().unwrap().unwrap();
    assert_eq!(row.checkpoint, "source.ckpt");
    assert_eq!(row.clean_acc, row.robust_acc);
}

#[test]
fn standard_training_on_blobs_improves_accuracy() {
    let text = r#"
        [data]
        format = "blobs"
        per_class = 100
        test_per_class = 20
        dims = 10
        separation = 0.4
        noise = 0.1

        [arch]
        family = "mlp"
        depth = 3
        width = 16

        [source]
        mode = "standard"
        epochs = 10
        batch_size = 16

        [transfer]
        mode = "vanilla"
        k = 1
        epochs = 1
    "#;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join("run");
    ok(&["--config", &cfg, "--out", s(&out), "train-source"]);
    let m = read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(m.len(), 10);
    assert!(m.iter().all(|r| r.phase == Phase::Source && r.source_mode == "standard"));
    let first = m[0].clean_acc.unwrap();
    let last = m[9].clean_acc.unwrap();
    assert!(last > first + 0.2, "{first} -> {last}");
}

#[test]
fn adversarial_source_is_more_robust_than_standard_source() {
    let base = r#"
        seed = 1

        [data]
        format = "blobs"
        per_class = 200
        test_per_class = 100
        dims = 10
        separation = 0.5
        noise = 0.08

        [arch]
        family = "mlp"
        depth = 3
        width = 32

        [source]
        mode = "MODE"
        epochs = 8
        batch_size = 32
        attack = { epsilon = 0.12, alpha = 0.03, steps = 7 }

        [transfer]
        mode = "vanilla"
        k = 1
        epochs = 1

        [eval]
        attack = { epsilon = 0.12, alpha = 0.03, steps = 20 }
    "#;
    let dir = tempfile::tempdir().unwrap();
    let mut robust = Vec::new();
    for mode in ["standard", "at"] {
        let out = dir.path().join(mode);
        std::fs::create_dir_all(&out).unwrap();
        let cfg = write_config(&out, &base.replace("MODE", mode));
        ok(&["--config", &cfg, "--out", s(&out), "train-source"]);
        ok(&["--config", &cfg, "--out", s(&out), "eval"]);
        let m = read_metrics(&out.join("metrics.csv")).unwrap();
        robust.push(m.last().unwrap().robust_acc.unwrap());
    }
    assert!(robust[1] > robust[0], "standard {} vs adversarial {}", robust[0], robust[1]);
}

#[test]
fn sweeps_write_one_row_per_point_and_a_reproducible_plot() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[sweep]\naxis = \"k\"\nvalues = [1, 2]\n");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("run");
    ok(&["--config", &cfg, "--out", s(&out), "--workers", "2", "sweep"]);
    assert!(out.join("source.ckpt").exists());
    let rows = read_sweep_csv(&out.join("sweep-k.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), [1, 2]);
    let svg = std::fs::read(out.join("sweep-k.svg")).unwrap();
    ok(&["--config", &cfg, "--out", s(&out), "sweep", "--replot"]);
    assert_eq!(std::fs::read(out.join("sweep-k.svg")).unwrap(), svg);
    assert!(out.join("sweep-k/vanilla-2/target.ckpt").exists());

    let lwf = text.replace("[sweep]\naxis = \"k\"\nvalues = [1, 2]", "[sweep]\naxis = \"lambda_d\"\nvalues = [0.1, 0.01, 0.005, 0.001]\nmodes = [\"lwf\"]");
    let cfg = write_config(dir.path(), &lwf);
    ok(&["--config", &cfg, "--out", s(&out), "sweep"]);
    let rows = read_sweep_csv(&out.join("sweep-lambda_d.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.lambda_d).collect::<Vec<_>>(), [0.1, 0.01, 0.005, 0.001]);
    assert!(rows.iter().all(|r| r.k == 4 && r.mode == "lwf"));

    let frac = text.replace("[sweep]\naxis = \"k\"\nvalues = [1, 2]", "[sweep]\naxis = \"fraction\"\nvalues = [0.5, 0.2, 0.1]\nmodes = [\"vanilla\", \"neft\"]");
    let cfg = write_config(dir.path(), &frac);
    ok(&["--config", &cfg, "--out", s(&out), "sweep"]);
    let rows = read_sweep_csv(&out.join("sweep-fraction.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    for f in [0.5, 0.2, 0.1] {
        assert_eq!(rows.iter().filter(|r| r.fraction == f).count(), 2);
    }
}

#[test]
fn schema_violations_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cases = [
        (TINY.replace("mode = \"at\"", "mode = \"at_fdm\"\nk = 2"), "source.lambda"),
        (TINY.replace("width = 1", "width = 1\ncolour = 2"), "colour"),
        (TINY.replace("mode = \"vanilla\"", "mode = \"lwf\""), "lwf"),
        (TINY.replace("epochs = 2", "epochs = 2\nbatch_size = 1"), "duplicate"),
    ];
    for (text, needle) in cases {
        let cfg = write_config(dir.path(), &text);
        let o = rtransfer(&["--config", &cfg, "--out", s(&out), "train-source"]);
        assert_eq!(code(&o), 2, "{needle}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).contains(needle), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!out.exists(), "no work may start on an invalid config");

    let cfg = write_config(dir.path(), TINY);
    let o = rtransfer(&["--config", &cfg, "--out", s(&out), "transfer", "--mode", "lwf", "--k", "2"]);
    assert_eq!(code(&o), 2);
    let o = rtransfer(&["--out", s(&out), "train-source"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn neft_with_a_different_split_than_the_source_penalty_warns() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("mode = \"at\"", "mode = \"at_fdm\"\nk = 2\nlambda = 0.01")
        .replace("epochs = 2", "epochs = 1");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("run");
    ok(&["--config", &cfg, "--out", s(&out), "train-source"]);
    let o = rtransfer(&["--config", &cfg, "--out", s(&out), "transfer", "--mode", "neft", "--k", "3"]);
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("warning") && err.contains("k = 2"), "{err}");
}

#[test]
fn data_problems_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let text = TINY.replace(
        "format = \"glyphs\"",
        "format = \"idx\"\ntrain_idx = [\"missing-images\", \"missing-labels\"]\ntest_idx = [\"a\", \"b\"]",
    );
    let cfg = write_config(dir.path(), &text);
    let o = rtransfer(&["--config", &cfg, "--out", s(&out), "train-source"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = rtransfer(&["report", s(&empty)]);
    assert_eq!(code(&o), 3);

    let broken = dir.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    let header: Vec<&str> = METRICS_HEADER.iter().copied().filter(|h| *h != "robust_acc").collect();
    std::fs::write(broken.join("metrics.csv"), header.join(",") + "\n").unwrap();
    let o = rtransfer(&["report", s(&broken)]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("robust_acc") && err.contains("broken/metrics.csv"), "{err}");
}

#[test]
fn diverging_training_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("batch_size = 32\nattack", "batch_size = 32\nlr = 1e30\nattack");
    let cfg = write_config(dir.path(), &text);
    let o = rtransfer(&["--config", &cfg, "--out", s(&dir.path().join("run")), "train-source"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
