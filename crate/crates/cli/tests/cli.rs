use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
Transformer Blocks = 1
Transformer Feed Forward Size = 8
Prediction Head Layers = 1
Head Size = 8
attention_hidden = 8
lookback_window = 4
Training Steps = 8
Warm-up Steps = 2
test_weeks = 4
prefix = 4
horizon = 4
probe_samples = 6
lambdas = 0, 1
";

fn nnn(out: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nnn"));
    cmd.arg("--out").arg(out).args(args).env_remove("NNN_SEED").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> PathBuf {
    let o = nnn(out, args, &[]);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    let dir = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    assert_manifest_complete(&dir);
    dir
}

fn assert_manifest_complete(dir: &Path) {
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    for a in m["artifacts"].as_array().unwrap() {
        assert!(dir.join(a.as_str().unwrap()).is_file(), "missing {a}");
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    cfg: PathBuf,
    sim: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = tmp.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let sim = ok(&out, &["simulate", "--variance", "high", "--seed", "7", "--geos", "3", "--weeks", "20", "--dim", "4"]);
    Fixture { _tmp: tmp, out, cfg, sim }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let f = fixture();
    let data = f.sim.join("dataset.nnt");
    let truth = f.sim.join("truth.json");
    assert!(data.is_file() && truth.is_file());

    let run = ok(&f.out, &["train", "--dataset", s(&data), "--config", s(&f.cfg)]);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    for k in ["train", "val", "test"] {
        assert!(metrics[k]["national"]["mape"].as_f64().unwrap() >= 0.0);
    }
    let trace = std::fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 9);
    assert_eq!(std::fs::read_to_string(run.join("national_predictions.csv")).unwrap().lines().count(), 21);

    let ev = ok(&f.out, &["eval", "--run", s(&run)]);
    assert_eq!(
        std::fs::read_to_string(ev.join("metrics.json")).unwrap(),
        std::fs::read_to_string(run.join("metrics.json")).unwrap()
    );

    for method in ["zero-out", "ar"] {
        let a = ok(&f.out, &["attribute", "--run", s(&run), "--method", method, "--truth", s(&truth)]);
        let j: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("attribution.json")).unwrap()).unwrap();
        let mix: f64 = j["report"]["mix"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((mix - 100.0).abs() < 1e-6);
        assert!(j["error_vs_direct"].as_f64().is_some());
    }

    let p = ok(&f.out, &["pause", "--run", s(&run), "--start", "6", "--len", "5"]);
    assert_eq!(std::fs::read_to_string(p.join("pause.csv")).unwrap().lines().count(), 6);

    let pr = ok(&f.out, &["probe", "--run", s(&run), "--truth", s(&truth)]);
    assert_eq!(std::fs::read_to_string(pr.join("landscape.csv")).unwrap().lines().count(), 9);
    assert_eq!(std::fs::read_to_string(pr.join("scores.csv")).unwrap().lines().count(), 3);

    let ia = ok(&f.out, &["inspect-attention", "--run", s(&run), "--weeks", "8"]);
    assert_eq!(std::fs::read_to_string(ia.join("channel_weights.csv")).unwrap().lines().count(), 17);
    assert!(std::fs::read_to_string(ia.join("temporal_weights.csv")).unwrap().lines().count() > 1);

    let sw = ok(&f.out, &["sweep", "--dataset", s(&data), "--config", s(&f.cfg), "--truth", s(&truth), "--workers", "2"]);
    let table = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    // The sweep directory is itself a loadable run.
    ok(&f.out, &["eval", "--run", s(&sw)]);
}

#[test]
fn training_is_reproducible_and_seed_overridable() {
    let f = fixture();
    let data = f.sim.join("dataset.nnt");
    let a = ok(&f.out, &["train", "--dataset", s(&data), "--config", s(&f.cfg)]);
    let b = ok(&f.out, &["train", "--dataset", s(&data), "--config", s(&f.cfg)]);
    assert_ne!(a, b, "run directories are never reused");
    let read = |d: &Path| std::fs::read_to_string(d.join("metrics.json")).unwrap();
    assert_eq!(read(&a), read(&b));

    let o = nnn(&f.out, &["train", "--dataset", s(&data), "--config", s(&f.cfg)], &[("NNN_SEED", "99")]);
    assert!(o.status.success());
    let c = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(c.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["model"], 99);
    assert_eq!(m["seeds"]["split"], 99);
    let ds = &m["dataset"]["sha256"];
    assert_eq!(ds.as_str().unwrap().len(), 64);
}

#[test]
fn failures_have_distinct_exit_codes() {
    let f = fixture();
    let data = f.sim.join("dataset.nnt");
    let run = ok(&f.out, &["train", "--dataset", s(&data), "--config", s(&f.cfg)]);
    let code = |args: &[&str]| nnn(&f.out, args, &[]).status.code().unwrap();

    let bad_key = f.cfg.with_file_name("bad.cfg");
    std::fs::write(&bad_key, "no_such_key = 1\n").unwrap();
    let config = code(&["train", "--dataset", s(&data), "--config", s(&bad_key)]);
    let channel = code(&["pause", "--run", s(&run), "--channel", "radio"]);
    let missing = code(&["train", "--dataset", "/nonexistent/d.nnt", "--config", s(&f.cfg)]);
    let garbage = f.cfg.with_file_name("garbage.nnt");
    std::fs::write(&garbage, b"not a tensor").unwrap();
    let format = code(&["train", "--dataset", s(&garbage), "--config", s(&f.cfg)]);
    let codes = [config, channel, missing, format];
    assert!(codes.iter().all(|&c| c != 0 && c != 1 && c != 2), "{codes:?}");
    let mut uniq = codes.to_vec();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), codes.len(), "{codes:?}");

    // A model trained on one geometry rejects a dataset of another.
    let other = ok(&f.out, &["simulate", "--geos", "4", "--weeks", "20", "--dim", "4"]);
    let manifest = run.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    let other_data = other.join("dataset.nnt").canonicalize().unwrap();
    m["dataset"]["path"] = serde_json::Value::String(other_data.to_str().unwrap().into());
    m["dataset"]["sha256"] = serde_json::Value::String(sha_of(&other_data));
    std::fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let shape = code(&["eval", "--run", s(&run)]);
    assert!(shape != 0 && !codes.contains(&shape), "{shape} vs {codes:?}");
}

fn sha_of(p: &Path) -> String {
    let out = Command::new("sha256sum").arg(p).output().unwrap();
    String::from_utf8(out.stdout).unwrap().split_whitespace().next().unwrap().to_string()
}
