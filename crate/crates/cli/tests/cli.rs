mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{far, run_ok, write_config, SYNTHETIC};

#[test]
fn every_command_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTHETIC);
    let cases: [(&str, &[&str], &[&str]); 5] = [
        ("train", &[], &["config.toml", "model.farm", "stage_1/train_log.csv", "stage_2/epoch_1.farm"]),
        ("evaluate", &[], &["report.csv", "report.json"]),
        ("attack", &["--index", "3"], &["x_adv.csv", "attribution_before.bin", "attribution_after.csv", "attack.json"]),
        ("explain", &["--index", "5"], &["attribution.csv", "attribution.bin"]),
        ("sweep", &[], &["sweep.csv"]),
    ];
    for (cmd, extra, expected) in cases {
        let a = run_ok(cmd, &cfg, &dir.path().join(format!("{cmd}_a")), &[extra, &["--workers", "2"]].concat());
        let b = run_ok(cmd, &cfg, &dir.path().join(format!("{cmd}_b")), &[extra, &["--workers", "2"]].concat());
        for f in expected {
            assert!(a.contains_key(Path::new(f)), "{cmd} did not write {f}");
        }
        assert_eq!(a, b, "{cmd} outputs differ between runs");
        let single = run_ok(cmd, &cfg, &dir.path().join(format!("{cmd}_c")), &[extra, &["--workers", "1"]].concat());
        assert_eq!(a, single, "{cmd} outputs depend on the worker count");
    }
}

#[test]
fn seed_flag_changes_results_and_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTHETIC);
    let a = run_ok("train", &cfg, &dir.path().join("a"), &["--seed", "11"]);
    let b = run_ok("train", &cfg, &dir.path().join("b"), &[]);
    assert_ne!(a[Path::new("model.farm")], b[Path::new("model.farm")]);
    let echo = String::from_utf8(a[Path::new("config.toml")].clone()).unwrap();
    assert!(echo.contains("seed = 11"));
    // The echo reproduces the run.
    let echo_path = dir.path().join("echo.toml");
    std::fs::write(&echo_path, &echo).unwrap();
    let c = run_ok("train", &echo_path, &dir.path().join("c"), &[]);
    assert_eq!(a, c);
}

#[test]
fn zero_budget_evaluation_is_perfectly_robust() {
    let dir = tempfile::tempdir().unwrap();
    let text = SYNTHETIC.replace("epsilon = 0.5", "epsilon = 0.0");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("eval");
    run_ok("evaluate", &cfg, &out, &[]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["top_k_intersection"], 1.0);
    assert_eq!(report["kendall_tau"], 1.0);
    assert_eq!(report["natural_accuracy"], report["adversarial_accuracy"]);
}

fn error_of(o: &Output) -> (i32, String) {
    let stderr = String::from_utf8_lossy(&o.stderr).to_string();
    let last = stderr.lines().filter(|l| l.starts_with("far: error")).collect::<Vec<_>>();
    assert_eq!(last.len(), 1, "expected one error line in {stderr:?}");
    (o.status.code().unwrap(), last[0].to_string())
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    for text in [format!("unexpected = 1\n{SYNTHETIC}"), format!("{SYNTHETIC}\nunexpected = 1\n")] {
        let unknown = write_config(dir.path(), &text);
        let (code, line) = error_of(&far(&["train", "--config", unknown.to_str().unwrap(), "--out", out]));
        assert_eq!(code, 2);
        assert!(line.starts_with("far: error[config]:"));
    }

    let invalid = write_config(dir.path(), &SYNTHETIC.replace("lambda = 0.5", "lambda = -1.0"));
    assert_eq!(error_of(&far(&["train", "--config", invalid.to_str().unwrap(), "--out", out])).0, 2);

    let (code, line) = error_of(&far(&["evaluate", "--config", "/nonexistent/run.toml", "--out", out]));
    assert_eq!(code, 3);
    assert!(line.starts_with("far: error[io]:"));

    let missing_data = SYNTHETIC.replace(
        "[data]\nsource = \"synthetic\"",
        "[data]\nsource = \"idx\"\ntrain_images = \"/nonexistent/a\"\ntrain_labels = \"/nonexistent/b\"\ntest_images = \"/nonexistent/c\"\ntest_labels = \"/nonexistent/d\"\n[unused]",
    );
    let cfg = write_config(dir.path(), &missing_data);
    assert_eq!(error_of(&far(&["train", "--config", cfg.to_str().unwrap(), "--out", out])).0, 2);

    let diverging = write_config(dir.path(), &SYNTHETIC.replace("lr = 0.02", "lr = 1e300"));
    let (code, line) = error_of(&far(&["train", "--config", diverging.to_str().unwrap(), "--out", out]));
    assert_eq!(code, 4, "{line}");
    assert!(line.starts_with("far: error[numerical]:"));

    let cfg = write_config(dir.path(), SYNTHETIC);
    assert_eq!(error_of(&far(&["explain", "--config", cfg.to_str().unwrap(), "--out", out, "--index", "99"])).0, 2);
    assert_eq!(far(&["train"]).status.code(), Some(2));
}

fn presets() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn presets_parse_and_only_miss_their_data() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    assert!(presets().len() >= 14);
    for p in presets() {
        let text = std::fs::read_to_string(&p).unwrap();
        let cmd = if text.contains("[sweep]") {
            "sweep"
        } else if text.contains("[attack]") {
            "attack"
        } else {
            "evaluate"
        };
        let o = Command::new(env!("CARGO_BIN_EXE_far"))
            .args([cmd, "--config", p.to_str().unwrap(), "--out", "out"])
            .current_dir(work)
            .output()
            .unwrap();
        let (code, line) = error_of(&o);
        // Data files are looked up relative to the working directory.
        assert_eq!(code, 3, "{}: {line}", p.display());
    }
}

/// Points a preset's data section at `root` and shrinks it to a short run.
fn localize(preset: &str, root: &Path, samples: usize) -> String {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(preset)).unwrap();
    let mut v: toml::Table = toml::from_str(&text).unwrap();
    let data = v.get_mut("data").unwrap().as_table_mut().unwrap();
    for key in ["train_images", "train_labels", "test_images", "test_labels"] {
        let rel = data[key].as_str().unwrap().to_string();
        let name = Path::new(&rel).file_name().unwrap().to_str().unwrap().to_string();
        data.insert(key.into(), toml::Value::String(root.join(name).to_string_lossy().into_owned()));
    }
    v.insert("train_samples".into(), toml::Value::Integer(samples as i64));
    for stage in v.get_mut("train").unwrap().as_array_mut().unwrap() {
        stage.as_table_mut().unwrap().insert("epochs".into(), toml::Value::Integer(1));
    }
    toml::to_string(&v).unwrap()
}

#[test]
fn mnist_aat_preset_produces_a_checkpoint() {
    let root = Path::new("/root/data/mnist");
    if !root.join("train-images-idx3-ubyte").exists() {
        eprintln!("skipped: MNIST files not found under {}", root.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let text = localize("mnist_aat.toml", root, 50);
    assert!(text.contains("lambda = 0.5") && text.contains("lr = 0.0001") && text.contains("epsilon = 0.3"));
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let written = run_ok("train", &cfg, &out, &[]);
    assert!(written.contains_key(Path::new("model.farm")));
    assert!(written.contains_key(Path::new("stage_1/epoch_1.farm")));
}
