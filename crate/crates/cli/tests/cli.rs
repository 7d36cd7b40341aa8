use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kollektiv"))
}

fn kollektiv(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("stderr ends in JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn stabilize_oscillating_velocity_fluctuates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{"cmd":"stabilize","generator":{"kind":"appendix1","params":{"kind":"TWO_VALUE","schedule":"DYADIC_ALTERNATING"}},"seed":1,"checkpoints":"dyadic:10:20"}"#,
    );
    let v = stdout_json(&kollektiv(&["run", "--config", cfg.to_str().unwrap()]));
    assert_eq!(v["verdict"], "FLUCTUATING");
    assert_eq!(v["trace"].as_array().unwrap().len(), 11);
    assert!(v["max_spread"].as_f64().unwrap() >= 0.3);
}

#[test]
fn stabilize_flags_and_energy_observable() {
    let v = stdout_json(&kollektiv(&[
        "stabilize",
        "--generator",
        r#"{"kind":"appendix1","params":{"kind":"FOUR_VALUE","observable":"ENERGY"}}"#,
        "--checkpoints",
        "dyadic:10:18",
    ]));
    assert_eq!(v["verdict"], "STABILIZING");
    let est = v["estimate"][1].as_f64().unwrap();
    assert!((est - 0.5).abs() < 1e-5);

    let v = stdout_json(&kollektiv(&[
        "stabilize",
        "--generator",
        r#"{"kind":"bernoulli","params":{"p":0.25}}"#,
        "--seed",
        "9",
        "--n",
        "300000",
    ]));
    assert_eq!(v["verdict"], "STABILIZING");
    assert_eq!(v["trace"].as_array().unwrap().last().unwrap()["n"], 300_000);
}

#[test]
fn stabilize_csv_output() {
    let out = kollektiv(&[
        "stabilize",
        "--generator",
        "example31",
        "--checkpoints",
        "8,16",
        "--out",
        "csv",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("N,label,count,freq"));
    assert_eq!(lines.count(), 8);
}

#[test]
fn combine_example31_and_product() {
    let v = stdout_json(&kollektiv(&["combine", "--generator", "example31"]));
    assert_eq!(v["combinable"], false);
    assert_eq!(v["per_alpha_status"][1], "FLUCTUATING");

    let spec = r#"{"kind":"conditional_bernoulli","params":{"x":{"kind":"bernoulli","params":{"p":0.4}},"probs":[0.9,0.2]}}"#;
    let v = stdout_json(&kollektiv(&["combine", "--generator", spec, "--seed", "3"]));
    assert_eq!(v["combinable"], true);
    assert_eq!(v["independent"], false);
}

#[test]
fn transmit_decodes_without_errors() {
    let v = stdout_json(&kollektiv(&[
        "transmit",
        "--repetitions",
        "3",
        "--n",
        "2000",
        "--seed",
        "5",
    ]));
    assert_eq!(v["total_errors"], 0);
    for run in v["runs"].as_array().unwrap() {
        assert_eq!(run["sent"], run["decoded"]);
        assert_eq!(run["sent"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn transmit_rejects_independent_pair() {
    let out = kollektiv(&["transmit", "--p1", "0.4", "--p2", "0.4"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "config");
}

#[test]
fn epr_local_and_singlet() {
    let v = stdout_json(&kollektiv(&[
        "epr",
        "--model",
        "local-sign",
        "--n",
        "50000",
        "--pair",
        "1,0",
    ]));
    assert_eq!(v["coarse_graining"]["conserved"], true);
    assert_eq!(v["factorization_defect"][0]["defect"], 0.0);
    let e = v["E"].as_f64().unwrap();
    assert!((e - v["exact_E"].as_f64().unwrap()).abs() < 4.0 * v["stderr"].as_f64().unwrap());

    let v = stdout_json(&kollektiv(&[
        "epr",
        "--model",
        "qm-singlet",
        "--n",
        "50000",
        "--angles",
        "0,0,0,0",
    ]));
    assert_eq!(v["coarse_graining"]["checked"], false);
    assert_eq!(v["E"], -1.0);
    assert!(v["factorization_defect"][0]["defect"].as_f64().unwrap() > 0.2);
}

#[test]
fn epr_csv_lists_trials() {
    let out = kollektiv(&["epr", "--n", "10", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("j,lambda,omega_a,omega_b,A,B"));
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn chsh_singlet_config_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"cmd":"chsh","model":"qm-singlet","angles":[0,1.5707963,0.7853982,2.3561945],"n":1000000,"seed":7}"#,
    );
    let v = stdout_json(&kollektiv(&["run", "--config", cfg.to_str().unwrap()]));
    let s = v["abs_S"].as_f64().unwrap();
    assert!((2.818..=2.838).contains(&s), "{s}");
    assert_eq!(v["S"].as_f64().unwrap(), -s);
    assert_eq!(v["N"], 1_000_000);
}

#[test]
fn chsh_flags_and_csv() {
    let v = stdout_json(&kollektiv(&[
        "chsh",
        "--model",
        "local-sign",
        "--n",
        "20000",
        "--seed",
        "2",
    ]));
    assert_eq!(v["exact_S"], -2.0);
    assert!(v["abs_S"].as_f64().unwrap() <= 2.0 + 4.0 * v["stderr_S"].as_f64().unwrap());
    let out = kollektiv(&["chsh", "--n", "100", "--out", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("E_ab,E_ab',E_a'b,E_a'b',S,abs_S,stderr_S,N")
    );
}

const CONTRADICTORY: &str = r#"{
  "A": {"+1": "1/2", "-1": "1/2"},
  "B": {"+1": "1/2", "-1": "1/2"},
  "A'": {"+1": "1/2", "-1": "1/2"},
  "AB": {"++": "1/2", "+-": "0", "-+": "0", "--": "1/2"},
  "A'B": {"++": "1/2", "+-": "0", "-+": "0", "--": "1/2"},
  "AA'": {"++": "0", "+-": "1/2", "-+": "1/2", "--": "0"}
}"#;

#[test]
fn fine_rastall_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", CONTRADICTORY);
    let v = stdout_json(&kollektiv(&["fine-rastall", bad.to_str().unwrap()]));
    assert_eq!(v["verdict"], "INFEASIBLE");
    assert_eq!(v["certificate"]["value"], "-2");
    assert_eq!(v["bell"]["pass"], false);
    assert_eq!(v["bell_agrees"], true);

    let fair = CONTRADICTORY.replace(
        r#""AA'": {"++": "0", "+-": "1/2", "-+": "1/2", "--": "0"}"#,
        r#""AA'": {"++": "1/2", "+-": "0", "-+": "0", "--": "1/2"}"#,
    );
    let ok = write(dir.path(), "ok.json", &fair);
    let v = stdout_json(&kollektiv(&["fine-rastall", ok.to_str().unwrap()]));
    assert_eq!(v["verdict"], "FEASIBLE");
    assert_eq!(v["witness"]["+++"], "1/2");
    assert_eq!(v["witness"]["---"], "1/2");
}

#[test]
fn fine_rastall_inline_system_and_stdin() {
    let system: Value = serde_json::from_str(CONTRADICTORY).unwrap();
    let cfg = serde_json::json!({"cmd": "fine-rastall", "system": system});
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "cfg.json", &cfg.to_string());
    let v = stdout_json(&kollektiv(&["run", "--config", p.to_str().unwrap()]));
    assert_eq!(v["verdict"], "INFEASIBLE");

    use std::io::Write;
    let mut child = bin()
        .args(["fine-rastall", "-"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(CONTRADICTORY.as_bytes())
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(stdout_json(&out)["verdict"], "INFEASIBLE");
}

#[test]
fn fine_rastall_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.json",
        &CONTRADICTORY.replace("\"1/2\", \"-1\"", "\"2/3\", \"-1\""),
    );
    let out = kollektiv(&["fine-rastall", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let extra = write(
        dir.path(),
        "extra.json",
        &CONTRADICTORY.replace("\"A\":", "\"C\": {}, \"A\":"),
    );
    let out = kollektiv(&["fine-rastall", extra.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trajectory_defect_is_significant() {
    let v = stdout_json(&kollektiv(&[
        "trajectory",
        "--n",
        "100000",
        "--seed",
        "1",
        "--observable",
        "time-avg",
        "--shared-lambda",
        "true",
    ]));
    assert!(v["significance"].as_f64().unwrap() >= 5.0);
    assert_eq!(v["marginal_a"][0], 0.50252);

    let v = stdout_json(&kollektiv(&[
        "trajectory",
        "--n",
        "20000",
        "--shared-lambda",
        "false",
        "--kappa",
        "2",
    ]));
    assert_eq!(v["params"]["wing_b"]["kappa"], 2.0);
    assert!(v["defect"].as_f64().unwrap() <= 4.0 * v["sigma"].as_f64().unwrap());
}

#[test]
fn trajectory_integration_failure_exits_one() {
    let out = kollektiv(&[
        "trajectory",
        "--n",
        "10",
        "--kappa",
        "-50",
        "--h",
        "0.5",
        "--t-end",
        "50",
        "--observable",
        "endpoint",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "runtime");
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"cmd":"chsh","model":"qm-singlet","foo":1}"#,
    );
    let out = kollektiv(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["key"], "foo");
    assert!(err["error"]["message"].as_str().unwrap().contains("foo"));

    let cfg = write(
        dir.path(),
        "g.json",
        r#"{"cmd":"stabilize","generator":{"kind":"bernoulli","params":{"p":0.5,"q":1}}}"#,
    );
    let out = kollektiv(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["key"], "q");
}

#[test]
fn config_errors_exit_two() {
    for args in [
        vec!["run"],
        vec!["chsh", "--model", "hidden-elephant"],
        vec!["chsh", "--angles", "0,1,2"],
        vec!["stabilize"],
        vec!["stabilize", "--generator", "bernoulli"],
        vec![
            "stabilize",
            "--generator",
            "example31",
            "--checkpoints",
            "dyadic:5",
        ],
        vec!["epr", "--pair", "2,0"],
        vec!["trajectory", "--h", "0.03"],
        vec!["chsh", "--bogus-flag"],
    ] {
        let out = kollektiv(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["error"]["kind"], "config", "{args:?}");
    }
}

#[test]
fn subcommand_must_match_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"cmd":"chsh"}"#);
    let out = kollektiv(&["epr", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["key"], "cmd");
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"cmd":"chsh","model":"qm-singlet","n":1000,"seed":1}"#,
    );
    let c = cfg.to_str().unwrap();
    let from_file = stdout_json(&kollektiv(&["run", "--config", c]));
    let flagged = stdout_json(&kollektiv(&[
        "chsh",
        "--config",
        c,
        "--n",
        "2000",
        "--model",
        "local-sign",
    ]));
    assert_eq!(from_file["N"], 1000);
    assert_eq!(flagged["N"], 2000);
    assert_eq!(flagged["model"]["LOCAL_DETERMINISTIC"]["grid"], 720);
}

#[test]
fn manifest_records_digest_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj.json");
    let status = kollektiv(&[
        "trajectory",
        "--n",
        "5000",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(status.status.success());
    assert!(status.stderr.is_empty());
    let manifest_path = dir.path().join("traj.json.manifest.json");
    let manifest: Value = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["tool"], "kollektiv");
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config"]["cmd"], "trajectory");
    assert!(manifest["duration_seconds"].as_f64().unwrap() >= 0.0);
    let bytes = fs::read(&out).unwrap();
    use sha2::Digest;
    assert_eq!(
        manifest["outputs"][0]["sha256"],
        hex::encode(sha2::Sha256::digest(&bytes))
    );

    let again = dir.path().join("again.json");
    let status = kollektiv(&[
        "run",
        "--config",
        manifest_path.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(status.status.success());
    assert_eq!(fs::read(&again).unwrap(), bytes);
    // no stray temporary files remain
    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 4, "{names:?}");
}

#[test]
fn thread_cap_does_not_change_results() {
    let run = |threads: &str| {
        bin()
            .args([
                "chsh",
                "--model",
                "qm-singlet",
                "--n",
                "200000",
                "--seed",
                "11",
            ])
            .env("KOLLEKTIV_THREADS", threads)
            .output()
            .unwrap()
    };
    let one = run("1");
    let four = run("4");
    assert!(one.status.success());
    assert_eq!(one.stdout, four.stdout);
    let bad = run("zero");
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn help_and_version_exit_zero() {
    assert!(kollektiv(&["--help"]).status.success());
    let v = kollektiv(&["--version"]);
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}
