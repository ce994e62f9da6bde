//! Runs the command-line workflow in-process: synth, preprocess, train,
//! evaluate and parse, all under one scratch directory.
//!
//! `cargo run --release --example cli_workflow [dir]`

use std::path::PathBuf;

use globalsql::cli::run;

fn step(args: &[&str]) {
    println!("$ globalsql {}", args.join(" "));
    let code = run(std::iter::once("globalsql").chain(args.iter().copied()));
    assert_eq!(code, 0, "command failed with exit code {code}");
}

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("globalsql-cli-example"));
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let (data, tables, contents) = (p("data"), p("data/tables.json"), p("data/contents"));

    step(&["synth", "--out", &data, "--schemas", "10", "--examples", "100", "--heldout", "20", "--seed", "3"]);
    step(&["preprocess", "--tables", &tables, "--contents", &contents, "--examples", &p("data/train.json"), "--out", &p("cache")]);
    step(&[
        "train", "--tables", &tables, "--contents", &contents, "--examples", &p("data/train.json"),
        "--out", &p("model"), "--epochs", "4", "--verbose",
    ]);
    step(&[
        "evaluate", "--tables", &tables, "--contents", &contents, "--examples", &p("data/heldout.json"),
        "--checkpoint", &p("model"), "--out", &p("report"),
    ]);

    let heldout: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(p("data/heldout.json")).unwrap()).unwrap();
    let first = &heldout[0];
    step(&[
        "parse", "--tables", &tables, "--contents", &contents, "--checkpoint", &p("model"),
        "--db-id", first["db_id"].as_str().unwrap(), "--question", first["question"].as_str().unwrap(),
    ]);
}
