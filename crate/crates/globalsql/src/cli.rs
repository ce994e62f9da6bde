//! Command-line front end: `preprocess`, `synth`, `train`, `evaluate` and
//! `parse`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
//! Training settings come from the defaults, then an optional flat
//! `key=value` file (`--config`), then `--set key=value` flags, then the
//! dedicated flags. Nested model widths use dotted keys (`model.emb=16`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{read_text, Error, Result};
use crate::grammar::Grammar;
use crate::graph::{NodeId, NodeKind};
use crate::model::{Instance, Model};
use crate::neural::Tape;
use crate::parser::{encode, Relevance};
use crate::pipeline::{
    self, decode, evaluate, generate_synthetic, load_checkpoint, load_dataset, save_checkpoint,
    train, write_report, Dataset, EvalMode, SynthSpec, TrainConfig,
};
use crate::schema::Schema;
use crate::sql::sql_text;
use crate::text::{tokenize_question, Vocab};

#[derive(Debug, Parser)]
#[command(name = "globalsql", version, about = "Zero-shot text-to-SQL with global schema reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest a dataset and cache per-question graphs and linking features.
    Preprocess(PreprocessArgs),
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Parse one question and print the beam as JSON.
    Parse(ParseArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Tables file (Spider `tables.json` layout).
    #[arg(long)]
    tables: PathBuf,
    /// Directory of `<db_id>/<table>.csv` content files.
    #[arg(long)]
    contents: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    examples: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Accept only `SELECT columns FROM tables` queries.
    #[arg(long)]
    projection_only: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Total number of schemas.
    #[arg(long, default_value_t = SynthSpec::default().schemas)]
    schemas: usize,
    /// Trailing schemas reserved for held-out questions.
    #[arg(long)]
    heldout_schemas: Option<usize>,
    /// Training questions.
    #[arg(long, default_value_t = SynthSpec::default().train)]
    examples: usize,
    /// Held-out questions.
    #[arg(long, default_value_t = SynthSpec::default().heldout)]
    heldout: usize,
    /// Content rows per table.
    #[arg(long, default_value_t = SynthSpec::default().rows)]
    rows: usize,
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    seed: u64,
    #[arg(long)]
    projection_only: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    examples: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Print per-epoch losses to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report directory (`metrics.json`, `verdicts.jsonl`).
    #[arg(long)]
    out: PathBuf,
    /// base, rerank, oracle-gate or oracle-full.
    #[arg(long, default_value = "rerank")]
    mode: EvalMode,
    /// Beam width; defaults to the checkpoint's test beam.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct ParseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    db_id: String,
    #[arg(long)]
    question: String,
    #[arg(long)]
    beam: Option<usize>,
    /// base or rerank.
    #[arg(long, default_value = "rerank")]
    mode: EvalMode,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invalid(_) => 1,
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Parse(a) => parse_cmd(a),
    }
}

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        pairs.push(split_pair(line).map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(pairs)
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Applies `key=value` overrides to `cfg`. Values are read as JSON where
/// possible (numbers, booleans) and as plain strings otherwise.
pub fn apply_overrides(cfg: &TrainConfig, pairs: &[(String, String)]) -> Result<TrainConfig> {
    let mut root = serde_json::to_value(cfg)?;
    for (key, raw) in pairs {
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Invalid(format!("unknown configuration key `{key}`")))?;
        }
        if slot.is_object() {
            return Err(Error::Invalid(format!("`{key}` is a section, not a value")));
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
    }
    let cfg: TrainConfig = serde_json::from_value(root)
        .map_err(|e| Error::Invalid(format!("bad configuration value: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(c: &ConfigArgs) -> Result<TrainConfig> {
    let mut pairs = match &c.config {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    for s in &c.set {
        pairs.push(split_pair(s)?);
    }
    if let Some(seed) = c.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    apply_overrides(&TrainConfig::default(), &pairs)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// `users` for a table, `users.name` for a column.
pub fn constant_name(schema: &Schema, id: NodeId) -> String {
    match id.kind {
        NodeKind::Table => schema.tables[id.index].clone(),
        NodeKind::Column => schema.qualified_column(id.index),
        NodeKind::CellValue => format!("cell#{}", id.index),
        NodeKind::Global => "global".into(),
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let grammar = if a.projection_only { Grammar::projection_only() } else { Grammar::sql() };
    let data = load_dataset(&a.data.tables, &a.examples, a.data.contents.as_deref(), &grammar)?;
    warn_all(&data.warnings);
    fs::create_dir_all(&a.out)?;
    // linking features do not depend on the vocabulary
    let vocab = Vocab::default();
    let mut rows = Vec::with_capacity(data.examples.len());
    for ex in &data.examples {
        let db = data.database(&ex.db_id)?;
        let inst = Instance::new(&db.schema, ex.tokens.clone(), &db.contents, &vocab)?;
        let n = inst.num_constants();
        let features: Vec<Vec<_>> = (0..inst.link.num_words())
            .map(|w| (0..n).map(|c| *inst.link.feature(w, c)).collect())
            .collect();
        rows.push(json!({
            "db_id": ex.db_id,
            "question": ex.question,
            "tokens": ex.tokens,
            "query": sql_text(&ex.query, &db.schema),
            "derivation": ex.derivation,
            "constants": ex.constants.iter().map(|&c| constant_name(&db.schema, c)).collect::<Vec<_>>(),
            "graph": inst.graph,
            "cells": inst.cells,
            "link_constants": inst.constants.iter().map(|&c| constant_name(&db.schema, c)).collect::<Vec<_>>(),
            "link_features": features,
        }));
    }
    write_jsonl(&a.out.join("examples.jsonl"), &rows)?;
    write_jsonl(&a.out.join("exclusions.jsonl"), &data.exclusions)?;
    let summary = json!({
        "databases": data.databases.len(),
        "examples": data.examples.len(),
        "exclusions": data.exclusions.len(),
        "warnings": data.warnings,
    });
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        schemas: a.schemas,
        heldout_schemas: a.heldout_schemas.unwrap_or_else(|| defaults.heldout_schemas.min(a.schemas / 5)),
        train: a.examples,
        heldout: a.heldout,
        rows: a.rows,
        seed: a.seed,
        projection_only: a.projection_only,
    };
    if spec.schemas == 0 || spec.rows == 0 {
        return Err(Error::Invalid("--schemas and --rows must be positive".into()));
    }
    if spec.heldout_schemas >= spec.schemas && spec.train > 0 {
        return Err(Error::Invalid("held-out schemas must leave at least one training schema".into()));
    }
    if spec.heldout > 0 && spec.heldout_schemas == 0 {
        return Err(Error::Invalid("held-out questions need --heldout-schemas > 0".into()));
    }
    let corpus = generate_synthetic(&spec);
    pipeline::write_databases(&a.out, &corpus.databases)?;
    pipeline::write_examples(&a.out.join("train.json"), &corpus.train)?;
    pipeline::write_examples(&a.out.join("heldout.json"), &corpus.heldout)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = train_config(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let data = load_dataset(&a.data.tables, &a.examples, a.data.contents.as_deref(), &cfg.model.grammar())?;
    warn_all(&data.warnings);
    if data.examples.is_empty() {
        return Err(Error::Data("no usable training examples".into()));
    }
    let mut history = Vec::new();
    let verbose = a.verbose;
    let mut progress = |s: &pipeline::EpochStats| {
        if verbose {
            eprintln!(
                "epoch {} decoding {:.4} relevance {:.4} rerank {:.4} gold-in-beam {}/{}",
                s.epoch, s.decoding, s.relevance, s.rerank, s.gold_in_beam, s.beams
            );
        }
        history.push(s.clone());
    };
    let (model, _) = train(&cfg, &data, Some(&mut progress))?;
    save_checkpoint(&a.out, &model, &cfg)?;
    write_jsonl(&a.out.join("training.jsonl"), &history)?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data.tables, &a.examples, a.data.contents.as_deref(), &model.grammar)?;
    warn_all(&data.warnings);
    let beam = a.beam.unwrap_or(cfg.test_beam);
    let (metrics, verdicts) = evaluate(&model, &data, beam, cfg.max_decode_steps, a.mode, a.threads.max(1))?;
    write_report(&a.out, &metrics, &verdicts)?;
    eprintln!(
        "{}: overall {:.4} single {:.4} multi {:.4} beam-hit {:.4} ({} examples, {} excluded)",
        metrics.mode, metrics.overall, metrics.single, metrics.multi, metrics.beam_hit, metrics.n, metrics.exclusions
    );
    Ok(())
}

/// The JSON printed by `parse`.
pub fn parse_question(
    model: &Model,
    data: &Dataset,
    db_id: &str,
    question: &str,
    beam: usize,
    max_steps: usize,
    mode: EvalMode,
) -> Result<Value> {
    if matches!(mode, EvalMode::OracleGate | EvalMode::OracleFull) {
        return Err(Error::Invalid("parse supports only the base and rerank modes".into()));
    }
    let db = data.database(db_id)?;
    let schema = &db.schema;
    let tokens = tokenize_question(question);
    let inst = Instance::new(schema, tokens, &db.contents, &model.vocab)?;
    let out = decode(model, schema, &inst, beam, max_steps, mode, None)?;

    let mut tape = Tape::inference(&model.store);
    let enc = encode(&mut tape, model, &inst, Relevance::Gated)?;
    let rho = tape.value(enc.rho).to_vec();

    let candidates: Vec<Value> = out
        .candidates
        .iter()
        .map(|c| {
            json!({
                "sql": sql_text(&c.query, schema),
                "decoder_score": c.log_prob,
                "rerank_logit": c.rerank_logit,
                "constants": c.constants.iter().map(|&id| constant_name(schema, id)).collect::<Vec<_>>(),
            })
        })
        .collect();
    let cells: Vec<Value> = inst
        .cells
        .iter()
        .map(|m| {
            json!({
                "node": m.node,
                "column": constant_name(schema, m.column),
                "cell": m.cell,
                "words": m.words.iter().map(|&w| &inst.tokens[w]).collect::<Vec<_>>(),
                "edges": inst.graph.edges().iter()
                    .filter(|e| e.source == m.node || e.target == m.node)
                    .map(|e| json!([node_label(schema, &inst, e.source), e.tag.key(), node_label(schema, &inst, e.target)]))
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    let relevance: Vec<Value> = inst
        .constants
        .iter()
        .zip(&rho)
        .map(|(&id, r)| json!({ "constant": constant_name(schema, id), "rho": r }))
        .collect();
    Ok(json!({
        "db_id": db_id,
        "question": question,
        "tokens": inst.tokens,
        "mode": mode,
        "chosen": out.chosen,
        "sql": out.chosen.map(|k| sql_text(&out.candidates[k].query, schema)),
        "candidates": candidates,
        "evidence": { "cells": cells, "relevance": relevance },
    }))
}

fn node_label(schema: &Schema, inst: &Instance, id: NodeId) -> String {
    match id.kind {
        NodeKind::CellValue => format!("cell:{}", inst.cell_texts[id.index]),
        _ => constant_name(schema, id),
    }
}

fn parse_cmd(a: ParseArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let (schemas, mut warnings) = pipeline::read_tables(&a.data.tables)?;
    let databases = pipeline::load_databases(schemas, a.data.contents.as_deref(), &mut warnings)?;
    warn_all(&warnings);
    let data = Dataset { databases, ..Dataset::default() };
    let beam = a.beam.unwrap_or(cfg.test_beam);
    let out = parse_question(&model, &data, &a.db_id, &a.question, beam, cfg.max_decode_steps, a.mode)?;
    let text = serde_json::to_string_pretty(&out)? + "\n";
    // a closed pipe (`| head`) is not an error worth reporting
    match std::io::Write::write_all(&mut std::io::stdout(), text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
