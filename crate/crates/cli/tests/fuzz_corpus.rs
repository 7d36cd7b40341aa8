//! Replays the checked-in fuzz corpus through the fuzz-target invariants on
//! stable, so the seeds stay meaningful without a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use kollektiv::fine_rastall::{bell_check, joint_exists, parse_rational, MarginalSystem};
use kollektiv::Checkpoints;
use kollektiv_cli::ExperimentConfig;

fn seeds(target: &str) -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<String> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read_to_string(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

#[test]
fn checkpoints_corpus() {
    let mut accepted = 0;
    for text in seeds("parse_checkpoints") {
        if let Ok(cps) = text.parse::<Checkpoints>() {
            accepted += 1;
            assert_eq!(cps.to_string().parse::<Checkpoints>().unwrap(), cps);
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn rational_corpus() {
    for text in seeds("parse_rational") {
        if let Ok(q) = parse_rational(&text) {
            assert_eq!(parse_rational(&q.to_string()).unwrap(), q, "{text}");
        }
    }
    assert!(parse_rational("1/0").is_err());
}

#[test]
fn marginal_system_corpus() {
    for text in seeds("parse_marginal_system") {
        let m = MarginalSystem::from_json(&text).unwrap();
        assert_eq!(MarginalSystem::from_json(&m.to_json()).unwrap(), m);
        assert_eq!(joint_exists(&m).unwrap().is_feasible(), bell_check(&m).pass);
    }
}

#[test]
fn config_corpus() {
    let mut rejected = 0;
    for text in seeds("parse_config") {
        match ExperimentConfig::from_json_str(&text) {
            Ok(c) => {
                let echo = c.to_value();
                assert_eq!(
                    ExperimentConfig::from_value(echo.clone())
                        .unwrap()
                        .to_value(),
                    echo
                );
            }
            Err(_) => rejected += 1,
        }
    }
    assert_eq!(rejected, 1);
}
