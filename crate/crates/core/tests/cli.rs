mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{write_images, yesno_handler, StubServer};
use georerank::datamodel::{load_results, save_candidates};
use georerank::simbackend::synthetic_dataset;

fn georerank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_georerank"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset(dir: &Path, n: usize, k: usize) -> std::path::PathBuf {
    let path = dir.join("cands.jsonl");
    save_candidates(&synthetic_dataset(n, k, 1), &path).unwrap();
    path
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dataset(dir.path(), 3, 4);
    assert_eq!(georerank(&["validate", s(&good)]).status.code(), Some(0));

    let bad = dir.path().join("bad.jsonl");
    let text = std::fs::read_to_string(&good).unwrap().replacen("\"rank\":3", "\"rank\":2", 1);
    std::fs::write(&bad, format!("{text}{{\"query_id\":\"x\"}}\n")).unwrap();
    let out = georerank(&["validate", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let lines = stdout(&out);
    assert!(lines.contains("line 1:"), "{lines}");
    assert!(lines.contains("line 4: schema violation"), "{lines}");

    let out = georerank(&["validate", s(&dir.path().join("missing.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_rerank_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let input = dataset(dir.path(), 20, 10);
    let results = dir.path().join("pairwise.jsonl");
    let audit = dir.path().join("audit.jsonl");
    let out = georerank(&[
        "rerank", "--input", s(&input), "--output", s(&results), "--strategy", "pairwise",
        "--backend", "oracle", "--seed", "3", "--flip-probability", "0", "--audit-log", s(&audit),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("queries=20 comparator_calls="));
    assert_eq!(load_results(&results).unwrap().len(), 20);
    assert!(std::fs::read_to_string(&audit).unwrap().lines().count() > 20);

    let reports = dir.path().join("reports");
    let out = georerank(&[
        "eval", "--pred", s(&results), "--input", s(&input), "--baseline", "--out-dir", s(&reports),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(reports.join("eval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "strategy,R@1,R@3,R@5,n,mean_calls,max_calls,parse_failures");
    assert!(rows[2].starts_with("pairwise,100.00,100.00,100.00,20,"), "{csv}");
    assert!(reports.join("pairwise.json").exists());
    assert!(reports.join("baseline.json").exists());
}

#[test]
fn eval_rejects_mismatched_or_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let input = dataset(dir.path(), 5, 4);
    let other = dir.path().join("other.jsonl");
    save_candidates(&synthetic_dataset(5, 6, 1), &other).unwrap();
    let results = dir.path().join("r.jsonl");
    let out = georerank(&[
        "rerank", "--input", s(&other), "--output", s(&results), "--strategy", "pairwise",
        "--backend", "oracle", "--seed", "0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = georerank(&["eval", "--pred", s(&results), "--input", s(&input), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("mismatch"));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = georerank(&["eval", "--pred", s(&empty), "--input", s(&input), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn misconfiguration_exits_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let input = dataset(dir.path(), 2, 3);
    let output = dir.path().join("r.jsonl");
    let base = ["rerank", "--input", s(&input), "--output", s(&output)];
    let run = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        georerank(&args)
    };
    assert_eq!(run(&["--strategy", "pairwise", "--backend", "oracle"]).status.code(), Some(2));
    assert_eq!(
        run(&["--strategy", "yesno", "--backend", "http", "--endpoint", "ftp://x", "--model", "m"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["--strategy", "yesno", "--backend", "http", "--endpoint", "http://127.0.0.1:1/v1", "--model", "m",
            "--auth-env", "GEORERANK_SURELY_UNSET_VAR"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["--strategy", "likert", "--backend", "oracle", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(run(&["--strategy", "bogus", "--backend", "oracle"]).status.code(), Some(2));
    assert!(!output.exists());
}

#[test]
fn config_file_drives_a_synthetic_run_and_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let input = dataset(dir.path(), 30, 8);
    let results = dir.path().join("likert.jsonl");
    let dump = dir.path().join("scores.jsonl");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "strategy = \"likert\"\nworkers = 2\n[paths]\ninput = {:?}\noutput = {:?}\nscores_dump = {:?}\n[backend]\nkind = \"synthetic\"\nseed = 5\nregime = \"overlapping\"\n",
            s(&input), s(&results), s(&dump)
        ),
    )
    .unwrap();
    let out = georerank(&["rerank", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&dump).unwrap().lines().count(), 240);

    let analysis = dir.path().join("analysis");
    let out = georerank(&["analyze", "--scores", s(&dump), "--out-dir", s(&analysis)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(analysis.join("likert_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["correct"]["count"], 30);
    assert_eq!(summary["incorrect"]["count"], 210);
    assert!(std::fs::read_to_string(analysis.join("likert_hist.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn analyze_warns_on_an_empty_class() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("scores.jsonl");
    std::fs::write(
        &dump,
        "{\"query_id\":\"q\",\"candidate_id\":\"a\",\"strategy\":\"yesno\",\"value\":0.2,\"valid\":true,\"is_ground_truth\":false}\n",
    )
    .unwrap();
    let out = georerank(&["analyze", "--scores", s(&dump), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("warning"));

    std::fs::write(&dump, "{\"query_id\":\"q\",\"candidate_id\":\"a\",\"strategy\":\"yesno\",\"value\":0.2,\"valid\":true}\n").unwrap();
    let out = georerank(&["analyze", "--scores", s(&dump), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_writes_sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = georerank(&[
        "simulate", "--grid", "0,0.25", "--trials", "5", "--n-queries", "10", "--k", "8", "--out-dir", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("p,mean_R@1,mean_R@3,mean_R@5,mean_calls\n0,100.00,"), "{csv}");
    assert!(dir.path().join("sweep.json").exists());
    assert!(dir.path().join("sweep.svg").exists());
}

#[test]
fn http_yesno_run_through_the_cli() {
    let server = StubServer::start(yesno_handler);
    let dir = tempfile::tempdir().unwrap();
    let lists = synthetic_dataset(4, 5, 2);
    write_images(&dir.path().join("img"), &lists);
    let input = dir.path().join("cands.jsonl");
    save_candidates(&lists, &input).unwrap();
    let results = dir.path().join("yesno.jsonl");
    let out = georerank(&[
        "rerank", "--input", s(&input), "--output", s(&results), "--strategy", "yesno", "--backend", "http",
        "--endpoint", &server.url, "--model", "stub", "--images-root", s(&dir.path().join("img")),
        "--cache-dir", s(&dir.path().join("cache")), "--limit", "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("http_requests=15"), "{}", stdout(&out));
    let loaded = load_results(&results).unwrap();
    assert_eq!(loaded.len(), 3);
    for (r, l) in loaded.iter().zip(&lists) {
        assert_eq!(Some(&r.order[0]), l.ground_truth_id.as_ref());
    }
}

#[test]
fn generate_baseline_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("baseline.jsonl");
    let out = georerank(&["generate", "--kind", "baseline", "--output", s(&path)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(georerank(&["validate", s(&path)]).status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 500);
}
