use std::process::Command;

use georerank::datamodel::load_candidates;
use georerank::simbackend::synthetic_dataset;

const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data");

#[test]
fn bundled_dataset_matches_its_generator() {
    let lists = load_candidates(format!("{DATA}/synthetic_k20.jsonl")).unwrap();
    assert_eq!(lists, synthetic_dataset(100, 20, 0));
}

#[test]
fn example_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let output = dir.path().join("out.jsonl");
    let status = Command::new(env!("CARGO_BIN_EXE_georerank"))
        .current_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
        .args(["rerank", "--config", &format!("{DATA}/example_run.toml")])
        .args(["--output", output.to_str().unwrap()])
        .args(["--audit-log", dir.path().join("audit.jsonl").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(std::fs::read_to_string(output).unwrap().lines().count(), 100);
}
