use std::path::Path;
use std::process::{Command, Output};

use mfjump::lqoracle::{ControlledSigma, LqSpec};
use mfjump::model::ModelDescriptor;
use serde_json::{json, Value};

fn lq_config(particles: usize, steps: usize) -> Value {
    json!({
        "model": ModelDescriptor::from_lq(&LqSpec::fixture_with_jump()),
        "initial": {"gaussian": {"mean": [0.5], "std": [0.4], "particles": particles}},
        "grid": {"horizon": 1.0, "steps": steps},
        "solver": {"tol_control": 1e-7},
        "seed": 7
    })
}

fn run(dir: &Path, cfg: &Value, args: &[&str]) -> Output {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mfjump"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .env_remove("MFJUMP_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &lq_config(300, 10), &["solve"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert_eq!(read_json(&out.join("report.json"))["converged"], json!(true));
    let ens = std::fs::read_to_string(out.join("ensemble.csv")).unwrap();
    assert!(ens.starts_with("step,time,particle,x_1,v_1\n"));
    assert_eq!(ens.lines().count(), 1 + 11 * 300);
    let adj = std::fs::read_to_string(out.join("adjoint.csv")).unwrap();
    assert!(adj.starts_with("step,time,particle,p_1,q_1_1,r_1_1\n"));
}

#[test]
fn config_errors_name_the_schema_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = lq_config(100, 5);
    cfg["model"]["r"] = json!([-1.0]);
    let o = run(dir.path(), &cfg, &["solve"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.r[0]"), "{}", stderr(&o));

    let mut cfg = lq_config(100, 5);
    cfg["grid"]["stride"] = json!(2);
    let o = run(dir.path(), &cfg, &["solve"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid.stride"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_mfjump")).args(["solve", "--config", "/nonexistent.json"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_mfjump")).args(["frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn forced_non_convergence_exits_2_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ModelDescriptor::from_lq(&LqSpec::example_costs());
    model.kind = mfjump::model::ModelKind::ExampleDrift;
    model.a.clear();
    model.abar.clear();
    model.c.clear();
    model.epsilon = Some(0.05);
    let mut cfg = lq_config(200, 10);
    cfg["model"] = serde_json::to_value(&model).unwrap();
    cfg["solver"] = json!({"max_picard": 1, "allow_insufficient": true});
    let o = run(dir.path(), &cfg, &["solve"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let report = read_json(&dir.path().join("out/report.json"));
    assert_eq!(report["converged"], json!(false));
    assert_eq!(report["history"].as_array().unwrap().len(), 1);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &lq_config(10, 5), &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("margin"));

    let mut cfg = lq_config(10, 5);
    cfg["model"]["constants"] = json!({"lambda_v": 0.0});
    assert_eq!(run(dir.path(), &cfg, &["verify"]).status.code(), Some(2));

    let mut cfg = lq_config(10, 5);
    cfg["model"]["fault"] = json!({"callback": "drift_dv", "offset": 0.3});
    let o = run(dir.path(), &cfg, &["verify"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("drift"), "{}", stdout(&o));
}

#[test]
fn certify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = lq_config(1000, 20);
    cfg["certify"] = json!({"shifts": [[0.0], [0.3]], "random_fields": 1});
    let o = run(dir.path(), &cfg, &["certify"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("c = "));
    let body = read_json(&dir.path().join("out/certify.json"));
    assert_eq!(body[0]["certificate"]["lhs"], json!(0.0));

    cfg["model"]["constants"] = json!({"lambda_v": 0.0});
    assert_eq!(run(dir.path(), &cfg, &["certify"]).status.code(), Some(4));
}

#[test]
fn hjb_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = lq_config(1000, 20);
    cfg["hjb"] = json!({"time": 0.2, "probes": 11});
    let o = run(dir.path(), &cfg, &["hjb", "--tol", "0.05"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(read_json(&dir.path().join("out/hjb.json"))["characterization"]["q_err"].is_number());

    let o = run(dir.path(), &cfg, &["hjb", "--zero-value"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));

    let mut spec = LqSpec::fixture_with_jump();
    spec.controlled_sigma = Some(ControlledSigma { sc: vec![0.5], r_sigma: vec![1.0] });
    cfg["model"] = serde_json::to_value(ModelDescriptor::from_lq(&spec)).unwrap();
    let o = run(dir.path(), &cfg, &["hjb"]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
}

#[test]
fn ito_and_lq_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = lq_config(4000, 50);
    let o = run(dir.path(), &cfg, &["ito-check"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let o = run(dir.path(), &cfg, &["lq-compare", "--tol", "0.05"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let o = run(dir.path(), &cfg, &["lq-compare", "--tol", "1e-9"]);
    assert_eq!(o.status.code(), Some(2));

    let mut model = ModelDescriptor::from_lq(&LqSpec::example_costs());
    model.kind = mfjump::model::ModelKind::ExampleDrift;
    model.a.clear();
    model.abar.clear();
    model.c.clear();
    let mut cfg = cfg;
    cfg["model"] = serde_json::to_value(&model).unwrap();
    assert_eq!(run(dir.path(), &cfg, &["lq-compare"]).status.code(), Some(6));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = lq_config(700, 10);
    let path = dir.path().join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let mut outputs = Vec::new();
    for (threads, env) in [(Some("1"), None), (None, Some("3"))] {
        let out = dir.path().join(format!("out{}", outputs.len()));
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfjump"));
        cmd.args(["solve", "--config"]).arg(&path).arg("--out").arg(&out);
        if let Some(t) = threads {
            cmd.args(["--threads", t]);
        }
        match env {
            Some(e) => cmd.env("MFJUMP_THREADS", e),
            None => cmd.env_remove("MFJUMP_THREADS"),
        };
        assert_eq!(cmd.output().unwrap().status.code(), Some(0));
        let mut report = read_json(&out.join("report.json"));
        report["wallclock_secs"] = json!(0.0);
        outputs.push((report, std::fs::read(out.join("ensemble.csv")).unwrap(), std::fs::read(out.join("adjoint.csv")).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = lq_config(200, 5);
    let a = run(dir.path(), &cfg, &["solve"]);
    assert_eq!(a.status.code(), Some(0));
    let first = std::fs::read(dir.path().join("out/ensemble.csv")).unwrap();
    let b = run(dir.path(), &cfg, &["solve", "--seed", "8"]);
    assert_eq!(b.status.code(), Some(0));
    assert_ne!(first, std::fs::read(dir.path().join("out/ensemble.csv")).unwrap());
}
