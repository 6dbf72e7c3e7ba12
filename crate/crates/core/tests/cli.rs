use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_casanova"))
}

fn manifest(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn veteran_args() -> Vec<String> {
    vec![
        "test".into(),
        "--data".into(),
        manifest("data/veteran_2x3.csv").display().to_string(),
        "--factors".into(),
        "trt,celltype".into(),
    ]
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output {
        status,
        stdout,
        stderr,
    } = cmd.output().unwrap();
    (
        status.code().unwrap(),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

#[test]
fn veteran_golden_json() {
    let (code, out, err) = run(bin()
        .args(veteran_args())
        .args(["--nperm", "499", "--seed", "11", "--format", "json"]));
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n"], 102);
    assert_eq!(v["seed"], 11);
    assert_eq!(v["B"], 499);
    let effects = v["effects"].as_array().unwrap();
    let labels: Vec<&str> = effects
        .iter()
        .map(|e| e["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["trt", "celltype", "trt:celltype"]);
    let sizes: Vec<u64> = v["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["n"].as_u64().unwrap())
        .collect();
    assert_eq!(sizes, [18, 18, 12, 30, 9, 15]);
    // asymptotic values are deterministic
    let trt = &effects[0]["methods"];
    let close = |x: &serde_json::Value, want: f64| (x.as_f64().unwrap() - want).abs() < 5e-5;
    assert!(close(&trt[0]["p_asymptotic"], 0.0152), "{}", trt[0]);
    assert!(close(&trt[1]["p_asymptotic"], 0.0278), "{}", trt[1]);
    assert!(close(&trt[2]["p_asymptotic"], 0.7748), "{}", trt[2]);
    assert_eq!(effects[1]["methods"][0]["df"], 4);
    assert!(effects
        .iter()
        .all(|e| e["methods"][0]["p_permutation"].is_number()));
}

#[test]
fn veteran_text_table() {
    let (code, out, _) = run(bin().args(veteran_args()).args(["--nperm", "0"]));
    assert_eq!(code, 0);
    assert!(out.contains("Asy/Comb"));
    assert!(!out.contains("Per/Comb"));
    assert!(out
        .lines()
        .any(|l| l.starts_with("celltype") && l.contains("<0.1")));
}

#[test]
fn same_seed_same_output() {
    let args = |seed: &str| {
        let mut a = veteran_args();
        a.extend(["--nperm", "999", "--format", "json", "--seed", seed].map(String::from));
        a
    };
    let (_, a, _) = run(bin().args(args("5")));
    let (_, b, _) = run(bin().args(args("5")).args(["--threads", "3"]));
    let (_, c, _) = run(bin().args(args("6")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut from_env = veteran_args();
    from_env.extend(["--nperm", "999", "--format", "json"].map(String::from));
    let (_, d, _) = run(bin().args(from_env).env("CASANOVA_SEED", "5"));
    assert_eq!(a, d);
}

#[test]
fn missing_file_exits_two() {
    let (code, _, err) = run(bin().args(["test", "--data", "/no/such/file.csv", "--factors", "g"]));
    assert_eq!(code, 2);
    assert!(err.contains("/no/such/file.csv"));
}

#[test]
fn bad_inputs_exit_two() {
    let mut a = veteran_args();
    a.extend(["--effect", "main:dose"].map(String::from));
    assert_eq!(run(bin().args(a)).0, 2);
    let mut a = veteran_args();
    a.extend(["--weights", "fh:0:0", "fh:0:0"].map(String::from));
    assert_eq!(run(bin().args(a)).0, 2);
    let mut a = veteran_args();
    a.extend(["--alpha", "1.5"].map(String::from));
    assert_eq!(run(bin().args(a)).0, 2);
    assert_eq!(run(bin().args(["test", "--factors", "g"])).0, 2);
}

#[test]
fn bad_status_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "time,status,g\n1,1,a\n2,0,b\n3,yes,a\n4,1,b\n").unwrap();
    let (code, _, err) =
        run(bin().args(["test", "--data", path.to_str().unwrap(), "--factors", "g"]));
    assert_eq!(code, 2);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn exact_mode_on_small_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.csv");
    std::fs::write(
        &path,
        "time,status,g\n1,1,a\n2,1,b\n3,0,a\n4,1,b\n5,1,a\n6,1,b\n",
    )
    .unwrap();
    let (code, out, err) = run(bin().args([
        "test",
        "--data",
        path.to_str().unwrap(),
        "--factors",
        "g",
        "--exact",
        "--format",
        "json",
    ]));
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let perm = &v["effects"][0]["permutation"];
    assert_eq!(perm["mode"], "exact");
    assert_eq!(perm["replicates"], 20);
}

#[test]
fn simulate_small_scenario() {
    let scenario = manifest("scenarios/table1_interaction_exp_n1_low.json");
    let args = [
        "simulate",
        scenario.to_str().unwrap(),
        "--nsim",
        "20",
        "--nperm",
        "49",
        "--format",
        "json",
    ];
    let (code, out, err) = run(bin().args(args));
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("20/20"));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n_sim"], 20);
    let methods: Vec<&str> = v["rates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["Asy", "Per", "LR", "Cross"]);
    let (_, again, _) = run(bin().args(args).arg("--quiet").args(["--threads", "2"]));
    assert_eq!(out, again);
}

#[test]
fn power_curve() {
    let config = manifest("scenarios/power_k3_local.json");
    let (code, out, err) = run(bin().args([
        "power",
        config.to_str().unwrap(),
        "--scales",
        "0,1,2",
        "--format",
        "json",
    ]));
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let power: Vec<f64> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["power"].as_f64().unwrap())
        .collect();
    assert!((power[0] - 0.05).abs() < 1e-9);
    assert!(power[0] < power[1] && power[1] < power[2]);
    let (code, _, _) = run(bin().args(["power", config.to_str().unwrap(), "--theta", "1,-1"]));
    assert_eq!(code, 2);
}
