use std::process::{Command, Output};

fn chunkkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkkv"))
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 6] = [
    "--context-len",
    "256",
    "--decode-steps",
    "4",
    "--head-dim",
    "16",
];

#[test]
fn synthetic_run_to_stdout() {
    let out = chunkkv(&SMALL);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let run = &doc["runs"][0];
    assert_eq!(run["context_tokens"], 256);
    let f = &run["tier_fractions"];
    let sum =
        f["int2"].as_f64().unwrap() + f["int4"].as_f64().unwrap() + f["fp16"].as_f64().unwrap();
    assert!((sum - 1.0).abs() < 1e-12);
    assert!(run["timing"]["median_step_us"].as_f64().unwrap() > 0.0);
}

#[test]
fn csv_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    let mut args = SMALL.to_vec();
    args.extend([
        "--format",
        "csv",
        "--sweep",
        "alpha=0.2,0.4",
        "--out",
        path.to_str().unwrap(),
    ]);
    let out = chunkkv(&args);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("synthetic-0#0,synthetic-0,0.2,"));
}

#[test]
fn config_errors_exit_2() {
    for bad in [
        vec!["--alpha", "0.8", "--beta", "0.3"],
        vec!["--alpha", "1.5"],
        vec!["--chunk-size", "0"],
        vec!["--encoder", "glove"],
        vec!["--sweep", "gamma=1"],
    ] {
        let out = chunkkv(&bad);
        assert_eq!(out.status.code(), Some(2), "{bad:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn skipped_corpus_lines_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(
        &corpus,
        "{\"id\": \"a\", \"context\": \"x y z x y z x y z\", \"query\": \"y\"}\n{broken\n{\"id\": \"b\"}\n",
    )
    .unwrap();
    let mut args = SMALL.to_vec();
    args.extend([
        "--chunk-size",
        "4",
        "--corpus",
        corpus.to_str().unwrap(),
        "--no-timing",
    ]);
    let out = chunkkv(&args);
    assert_eq!(out.status.code(), Some(3));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["runs"].as_array().unwrap().len(), 1);
    assert_eq!(doc["skipped"].as_array().unwrap().len(), 2);
    assert!(doc["runs"][0].get("timing").is_none());
}

#[test]
fn missing_corpus_is_an_error() {
    let out = chunkkv(&["--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}
