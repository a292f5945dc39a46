use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn llrseg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llrseg"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a dataset and trains both stages under `root`.
fn pipeline(root: &Path) {
    let (data, s1, s2) = (root.join("data"), root.join("s1"), root.join("s2"));
    ok(&llrseg(&data, &["synth"]));
    ok(&llrseg(&s1, &["train-inlier", "--data", path(&data)]));
    let out = ok(&llrseg(&s2, &["train-uem", "--stage1", path(&s1), "--data", path(&data)]));
    assert!(out.contains("freeze verified"), "{out}");
}

#[test]
fn default_pipeline_orders_scorers() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root);
    let ev = root.join("ev");
    ok(&llrseg(&ev, &["eval", "--bundle", path(&root.join("s2")), "--data", path(&root.join("data"))]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    let ap = |k: &str| report[k].as_f64().unwrap();
    assert!(ap("ap_llr") >= ap("ap_id"), "{report}");
    assert!(ap("ap_llr") >= ap("ap_ood"), "{report}");
    assert!(ev.join("config.resolved.toml").exists());

    // Scoring files then evaluating them reproduces the bundle evaluation.
    let sc = root.join("sc");
    let data = root.join("data");
    let ds: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let eval_dirs: Vec<String> = ds["scenes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["split"] == "eval")
        .map(|s| s["dir"].as_str().unwrap().to_string())
        .collect();
    let features: Vec<String> = eval_dirs.iter().map(|d| path(&data.join(d).join("features.fmap")).to_string()).collect();
    let s2 = root.join("s2");
    let mut args = vec!["score", "--bundle", path(&s2), "--scorer", "llr", "--features"];
    args.extend(features.iter().map(String::as_str));
    ok(&llrseg(&sc, &args));
    let scores: Vec<String> = eval_dirs
        .iter()
        .map(|d| {
            let name = Path::new(d).file_name().unwrap().to_str().unwrap();
            path(&sc.join(format!("{name}.llr.smap"))).to_string()
        })
        .collect();
    let outliers: Vec<String> = eval_dirs.iter().map(|d| path(&data.join(d).join("outliers.lmap")).to_string()).collect();
    let mut args = vec!["eval", "--scores"];
    args.extend(scores.iter().map(String::as_str));
    args.push("--outliers");
    args.extend(outliers.iter().map(String::as_str));
    let ev2 = root.join("ev2");
    ok(&llrseg(&ev2, &args));
    let r2: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev2.join("eval.json")).unwrap()).unwrap();
    let tiled = r2["ranking"]["ap"].as_f64().unwrap();
    assert!((tiled - ap("ap_llr")).abs() < 1e-9, "tiled {tiled} vs whole {}", ap("ap_llr"));
}

#[test]
fn tampered_stage1_is_a_freeze_violation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, s1) = (root.join("data"), root.join("s1"));
    let cfg = write_config(root, "[data]\ntrain_inlier = 3\ntrain_uem = 2\neval = 1\n");
    ok(&llrseg(&data, &["synth", "--config", path(&cfg)]));
    ok(&llrseg(&s1, &["train-inlier", "--data", path(&data), "--config", path(&cfg)]));
    let tensor = s1.join("decoder.0.weight.fmap");
    let mut bytes = fs::read(&tensor).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&tensor, bytes).unwrap();
    let o = llrseg(&root.join("s2"), &["train-uem", "--stage1", path(&s1), "--data", path(&data)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("freeze violation"), "{err}");
}

fn write_config(root: &Path, text: &str) -> std::path::PathBuf {
    let p = root.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[uem]\nalpah = 1.0\n");
    let o = llrseg(&dir.path().join("o"), &["--config", path(&cfg), "synth"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpah"));
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&llrseg(dir.path(), &["selfcheck"]));
    assert!(!out.contains("FAIL"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{out}");
    assert!(dir.path().join("selfcheck.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "seed = 3\n[data]\ntrain_inlier = 3\ntrain_uem = 2\neval = 1\n[inlier]\nepochs = 1\n");
    let c = path(&cfg);
    for run in ["a", "b"] {
        let d = root.join(run).join("data");
        ok(&llrseg(&d, &["--config", c, "synth"]));
        ok(&llrseg(&root.join(run).join("s1"), &["--config", c, "train-inlier", "--data", path(&d)]));
    }
    for f in ["data/manifest.json", "s1/manifest.json", "s1/decoder.0.weight.fmap", "s1/config.resolved.toml"] {
        assert_eq!(fs::read(root.join("a").join(f)).unwrap(), fs::read(root.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[data]\ntrain_inlier = 1\ntrain_uem = 1\neval = 1\n");
    let o = dir.path().join("o");
    ok(&llrseg(&o, &["--config", path(&cfg), "--seed", "9", "synth"]));
    let echo = fs::read_to_string(o.join("config.resolved.toml")).unwrap();
    assert!(echo.starts_with("seed = 9\n"), "{echo}");
    let parsed: toml::Value = toml::from_str(&echo).unwrap();
    assert_eq!(parsed["data"]["seed"].as_integer(), Some(9));
}
