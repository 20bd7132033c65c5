use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn astcaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_astcaps")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const SMALL: &str = r#"{
    "dataset": {"kind": "synthetic", "classes": 3, "windows_per_class": 12, "noise_sigma": 0.05},
    "layout": {"rows": 12, "cols": 10},
    "model": {"hidden": 8, "head2_width": 16, "conv_filters": 4},
    "train": {"epochs": 2, "batch_size": 6},
    "race": {"hidden": 4, "epochs": 2, "batch_size": 6, "seeds": [1, 2]},
    "output_dir": "run"
}"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn missing_config_exits_1() {
    let o = astcaps(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("cannot read config"));
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, SMALL.replace("\"hidden\": 8", "\"hiden\": 8")).unwrap();
    let o = astcaps(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = astcaps(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let run = dir.path().join("run");
    for f in [
        "config.json",
        "metrics.json",
        "confusion.csv",
        "train_curve.csv",
        "model.ckpt",
        "roc_class0.csv",
        "roc_class1.csv",
        "roc_class2.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let ev = dir.path().join("ev");
    let o = astcaps(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
        "--export-features",
        "digit",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(fs::read(ev.join("metrics.json")).unwrap(), fs::read(run.join("metrics.json")).unwrap());
    let features = fs::read_to_string(ev.join("features_digit.csv")).unwrap();
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    let rows: Vec<&str> = features.lines().collect();
    assert_eq!(rows.len() as u64, 1 + metrics["samples"].as_u64().unwrap());
    // 3 digit capsules of 16 dimensions, after the label column.
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + 3 * 16));
    assert!(!ev.join("model.ckpt").exists());
}

#[test]
fn unknown_feature_tag_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(code(&astcaps(&["train", "--config", &cfg])), 0);
    let ckpt = dir.path().join("run/model.ckpt");
    let o = astcaps(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--export-features",
        "pixels",
    ]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn wrong_shape_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = astcaps(&["synth", "--out", d.join("ds").to_str().unwrap(), "--classes", "2", "--windows", "6"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let cfg = r#"{"dataset": {"kind": "timeseries", "manifest": "ds/manifest.csv", "skip_timestamp": false},
        "layout": {"rows": 12, "cols": 10},
        "model": {"hidden": 4, "head2_width": 8},
        "train": {"epochs": 1, "batch_size": 4}, "output_dir": "run"}"#;
    fs::write(d.join("ts.json"), cfg).unwrap();
    let o = astcaps(&["train", "--config", d.join("ts.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));

    let o = astcaps(&[
        "synth",
        "--out",
        d.join("narrow").to_str().unwrap(),
        "--classes",
        "2",
        "--windows",
        "3",
        "--rows",
        "8",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = astcaps(&[
        "eval",
        "--config",
        d.join("ts.json").to_str().unwrap(),
        "--manifest",
        d.join("narrow/manifest.csv").to_str().unwrap(),
        "--checkpoint",
        d.join("run/model.ckpt").to_str().unwrap(),
        "--out",
        d.join("ev").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("8 columns"), "{}", text(&o));

    let o = astcaps(&["eval", "--checkpoint", d.join("ts.json").to_str().unwrap(), "--manifest", "x.csv"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn data_flag_rebases_manifest_paths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&astcaps(&["synth", "--out", d.join("ds").to_str().unwrap(), "--classes", "2", "--windows", "5"])), 0);
    fs::create_dir(d.join("elsewhere")).unwrap();
    fs::copy(d.join("ds/manifest.csv"), d.join("elsewhere/manifest.csv")).unwrap();
    let cfg = r#"{"dataset": {"kind": "timeseries", "manifest": "elsewhere/manifest.csv", "skip_timestamp": false},
        "layout": {"rows": 12, "cols": 10}, "model": {"hidden": 4, "head2_width": 8},
        "train": {"epochs": 1, "batch_size": 4}, "output_dir": "run"}"#;
    fs::write(d.join("c.json"), cfg).unwrap();
    let c = d.join("c.json");
    assert_eq!(code(&astcaps(&["train", "--config", c.to_str().unwrap()])), 2);
    let o = astcaps(&["train", "--config", c.to_str().unwrap(), "--data", d.join("ds").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let o = astcaps(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for layer in ["conv", "memory_cell", "fusion", "capsule_path", "squash", "routing", "margin_loss"] {
        assert!(text(&o).contains(layer), "{layer} not reported");
    }
    let o = astcaps(&["gradcheck", "--inject-fault", "squash"]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("squash"), "{err}");
    let o = astcaps(&["gradcheck", "--tolerance", "1e-15"]);
    assert_eq!(code(&o), 3, "{}", text(&o));
}

#[test]
fn race_writes_both_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("race");
    let o = astcaps(&["race", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for seed in [1, 2] {
        let csv = fs::read_to_string(out.join(format!("race_{seed}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "epoch,cell_kind,train_loss,train_acc");
        assert_eq!(csv.lines().filter(|l| l.contains(",memory,")).count(), 3);
        assert_eq!(csv.lines().filter(|l| l.contains(",gru,")).count(), 3);
    }
    let last = String::from_utf8_lossy(&o.stdout).lines().last().unwrap().to_string();
    assert!(last.contains("memory [") && last.contains("gru ["), "{last}");
}

#[test]
fn synth_is_reproducible_and_separable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = astcaps(&["synth", "--out", out.to_str().unwrap(), "--classes", "4", "--windows", "25"]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        assert!(text(&o).contains("nearest-centroid test accuracy 1.0000"), "{}", text(&o));
    }
    let names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.iter().filter(|n| n.to_string_lossy().ends_with(".txt")).count(), 4 * 25);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
    }
    let o = astcaps(&["synth", "--out", dir.path().join("c").to_str().unwrap(), "--classes", "1"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    let o = astcaps(&["synth", "--out", dir.path().join("c").to_str().unwrap(), "--rows", "0"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn synth_quickstart_config_trains() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    assert_eq!(code(&astcaps(&["synth", "--out", ds.to_str().unwrap(), "--classes", "2", "--windows", "10"])), 0);
    let mut cfg: serde_json::Value = serde_json::from_slice(&fs::read(ds.join("config.json")).unwrap()).unwrap();
    cfg["model"] = serde_json::json!({"hidden": 4, "head2_width": 8});
    cfg["train"] = serde_json::json!({"epochs": 1, "batch_size": 4});
    fs::write(ds.join("config.json"), cfg.to_string()).unwrap();
    let o = astcaps(&["train", "--config", ds.join("config.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(ds.join("run/metrics.json").is_file());
}

#[test]
fn thread_setting() {
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_astcaps"))
            .args(["gradcheck"])
            .env("ASTCAPS_THREADS", v)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("0")), 0);
    assert_eq!(code(&run("2")), 0);
    assert_eq!(code(&run("many")), 1);
}

#[test]
fn seed_flags_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let runs: Vec<Vec<u8>> = ["1", "1", "2"]
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            let out = dir.path().join(format!("r{i}"));
            let o = astcaps(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed-init", seed]);
            assert_eq!(code(&o), 0, "{}", text(&o));
            fs::read(out.join("model.ckpt")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_ne!(runs[0], runs[2]);
}

#[test]
fn shipped_configs_validate() {
    for name in ["synthetic.json", "ndds.json"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        let o = astcaps(&["gradcheck", "--config", path.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{name}: {}", text(&o));
    }
}
