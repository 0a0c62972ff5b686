use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ef_target::bench::{RateConfig, RunConfig};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ef-target"))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> PathBuf {
    configs_dir().join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn toml_doc(path: &Path) -> Value {
    let v: toml::Value = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    serde_json::to_value(v).unwrap()
}

const SMALL: [&str; 6] = ["--set", "dgp.n=600", "--set", "train.epochs=15", "--set", "eval.ate_oracle_rows=20000"];

#[test]
fn shipped_configs_parse_and_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let doc = toml_doc(&path);
        if path.file_name().unwrap().to_str().unwrap().starts_with("rate_study") {
            let cfg: RateConfig = serde_json::from_value(doc).unwrap();
            cfg.validate().unwrap();
        } else {
            let run: RunConfig = serde_json::from_value(doc).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            run.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
        seen += 1;
    }
    assert_eq!(seen, 13);
}

#[test]
fn gen_data_writes_csv_and_oracle_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("synthetic_bernoulli_binary.toml");
    let out = dir.path().join("d1");
    let mut args = vec!["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    ok(&args);
    let csv = std::fs::read(out.join("data.csv")).unwrap();
    let oracle = std::fs::read(out.join("oracle.json")).unwrap();
    assert!(csv.starts_with(b"x1,x2,x3,x4,x5,x6,a,y\n"));
    assert_eq!(csv.iter().filter(|&&b| b == b'\n').count(), 601);
    let o = json(&out.join("oracle.json"));
    assert_eq!(o["config_hash"].as_str().unwrap().len(), 64);
    let ate = &o["oracle"]["ate"];
    let (p0, p1) = (o["oracle"]["psi0"]["value"].as_f64().unwrap(), o["oracle"]["psi1"]["value"].as_f64().unwrap());
    assert!((ate["value"].as_f64().unwrap() - (p1 - p0)).abs() < 1e-12);
    ok(&args);
    assert_eq!(std::fs::read(out.join("data.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(out.join("oracle.json")).unwrap(), oracle);
}

#[test]
fn unregularized_checkpoint_reports_targeted_equal_to_plugin() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("synthetic_bernoulli_binary.toml");
    let out = dir.path().to_str().unwrap();
    let mut train = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out, "--set", "loss.beta=0"];
    train.extend(SMALL);
    ok(&train);
    let ck = dir.path().join("checkpoint.json");
    let ck_bytes = std::fs::read(&ck).unwrap();
    let mut est = vec!["estimate", "--checkpoint", ck.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out, "--set", "loss.beta=0"];
    est.extend(SMALL);
    ok(&est);
    let report = json(&dir.path().join("estimate.json"));
    for d in report["doses"].as_array().unwrap() {
        assert_eq!(d["psi_tr"], d["psi_plugin"]);
    }
    assert_eq!(report["config_hash"], json(&ck)["config_hash"]);
    let first = std::fs::read(dir.path().join("estimate.json")).unwrap();
    ok(&train);
    ok(&est);
    assert_eq!(std::fs::read(&ck).unwrap(), ck_bytes);
    assert_eq!(std::fs::read(dir.path().join("estimate.json")).unwrap(), first);
    let log = json(&dir.path().join("train_log.json"));
    assert!(log["polish"].is_null());
    assert_eq!(log["n_train"].as_u64().unwrap() + log["n_val"].as_u64().unwrap() + log["n_test"].as_u64().unwrap(), 600);
}

#[test]
fn train_and_estimate_on_csv_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("synthetic_poisson_binary.toml");
    let out = dir.path().to_str().unwrap();
    let mut gen = vec!["gen-data", "--config", cfg.to_str().unwrap(), "--out", out];
    gen.extend(SMALL);
    ok(&gen);
    let data = dir.path().join("data.csv");
    let mut train = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out, "--data", data.to_str().unwrap()];
    train.extend(SMALL);
    ok(&train);
    let ck = dir.path().join("checkpoint.json");
    ok(&["estimate", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out]);
    let report = json(&dir.path().join("estimate.json"));
    assert_eq!(report["n"], 600);
    assert!(report["ate"]["dr"].is_number());
    assert_eq!(json(&ck)["checkpoint"]["meta"]["eps_polish_iterations"].is_number(), true);
}

#[test]
fn json_configs_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let doc = toml_doc(&config("synthetic_bernoulli_continuous.toml"));
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = dir.path().join("o");
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "dgp.n=300", "--set", "eval.curve_oracle_rows=500", "--set", "eval.dose_grid=11"]);
    let o = json(&out.join("oracle.json"));
    assert_eq!(o["oracle"]["doses"].as_array().unwrap().len(), 11);
}

#[test]
fn eval_and_beta_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("synthetic_bernoulli_binary.toml");
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["eval", "--config", cfg.to_str().unwrap(), "--out", out, "--set", "replications=2"];
    args.extend(SMALL);
    let o = ok(&args);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean"));
    let t = json(&dir.path().join("results.json"));
    for s in t["summary"].as_array().unwrap() {
        let name = s["estimator"].as_str().unwrap();
        let v: Vec<f64> = t["reps"].as_array().unwrap().iter().map(|r| r["values"][name].as_f64().unwrap()).collect();
        assert!((s["mean"].as_f64().unwrap() - (v[0] + v[1]) / 2.0).abs() < 1e-15);
    }
    assert!(dir.path().join("results.txt").exists());

    let mut sweep = vec!["beta-sweep", "--config", cfg.to_str().unwrap(), "--out", out, "--set", "replications=2", "--betas", "0,1"];
    sweep.extend(SMALL);
    ok(&sweep);
    let s = json(&dir.path().join("sweep.json"));
    assert_eq!(s["betas"], serde_json::json!([0.0, 1.0]));
    assert_eq!(s["tables"].as_array().unwrap().len(), 2);
}

#[test]
fn rate_study_reports_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("rate_study_bernoulli.toml");
    let out = dir.path().to_str().unwrap();
    ok(&["rate-study", "--config", cfg.to_str().unwrap(), "--out", out, "--set", "n_grid=[200,400,800,1600]", "--set", "oracle_rows=20000", "--set", "bootstrap=50"]);
    let r = json(&dir.path().join("rate.json"));
    assert_eq!(r["rows"].as_array().unwrap().len(), 5);
    assert!(std::fs::read_to_string(dir.path().join("rate.txt")).unwrap().contains("slope"));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config("synthetic_bernoulli_binary.toml");
    let cfg = cfg.to_str().unwrap();

    let o = run(&["gen-data", "--config", cfg, "--out", out, "--set", "loss.bta=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bta"));
    assert_eq!(run(&["gen-data", "--out", out]).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--config", cfg, "--out", out, "--set", "loss.beta=-1"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x1,a,y\n0.5,1,0\n0.2,1,oops\n").unwrap();
    let o = run(&["train", "--config", cfg, "--out", out, "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3"));

    assert_eq!(run(&["gradcheck", "--out", out, "--tol", "0"]).status.code(), Some(2));
    ok(&["gradcheck", "--out", out]);
    assert_eq!(json(&dir.path().join("gradcheck.json"))["passed"], true);
}

#[test]
fn selfcheck_passes_within_ten_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let o = ok(&["selfcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(t.elapsed().as_secs() <= 600);
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert_eq!(json(&dir.path().join("selfcheck.json"))["passed"], true);
}
