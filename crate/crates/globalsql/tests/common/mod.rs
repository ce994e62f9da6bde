#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use globalsql::grammar::Grammar;
use globalsql::model::{Instance, Model, ModelConfig};
use globalsql::pipeline::data::{build_example, schema_record};
use globalsql::pipeline::{Database, Example, RawExample};
use globalsql::schema::{Column, Schema, ValueType};
use globalsql::text::{tokenize_question, Vocab};

pub fn col(table: usize, name: &str, ty: ValueType) -> Column {
    Column { table: Some(table), name: name.into(), ty }
}

pub fn star() -> Column {
    Column { table: None, name: "*".into(), ty: ValueType::Text }
}

/// singer(singer_id, name, country), song(song_id, name, singer_id -> singer),
/// concert(concert_id, concert_name, year).
pub fn concert_singer() -> Schema {
    use ValueType::*;
    Schema {
        db_id: "concert_singer".into(),
        tables: vec!["singer".into(), "song".into(), "concert".into()],
        columns: vec![
            star(),
            col(0, "singer_id", Number),
            col(0, "name", Text),
            col(0, "country", Text),
            col(1, "song_id", Number),
            col(1, "name", Text),
            col(1, "singer_id", Number),
            col(2, "concert_id", Number),
            col(2, "concert_name", Text),
            col(2, "year", Number),
        ],
        primary_keys: [1, 4, 7].into_iter().collect(),
        foreign_keys: [(6, 1)].into_iter().collect(),
    }
}

/// Song names stored in `song.name`; "Hey Jude" is the cell the question
/// "Who sang Hey ?" should reach.
pub fn song_contents() -> Vec<(usize, Vec<String>)> {
    vec![
        (5, vec!["Hey Jude".into(), "Let It Be".into(), "Imagine".into()]),
        (2, vec!["Paul".into(), "John".into()]),
        (3, vec!["France".into(), "England".into()]),
    ]
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        emb: 6,
        hidden: 4,
        link_hidden: 4,
        gate_width: 4,
        decoder: 6,
        attention: 4,
        rerank_width: 4,
        ..ModelConfig::default()
    }
}

pub fn vocab_for(questions: &[&str], schema: &Schema) -> Vocab {
    let mut words: Vec<String> = questions.iter().flat_map(|q| tokenize_question(q)).collect();
    for t in &schema.tables {
        words.extend(globalsql::text::name_tokens(t));
    }
    for c in &schema.columns {
        words.extend(globalsql::text::name_tokens(&c.name));
    }
    Vocab::from_words(words)
}

pub fn example(db: &Database, question: &str, sql: &str) -> Example {
    let raw = RawExample { db_id: db.schema.db_id.clone(), question: question.into(), query: sql.into() };
    build_example(db, &raw, &Grammar::sql()).expect("fixture example is in the grammar")
}

pub fn model_and_instance(
    cfg: ModelConfig,
    db: &Database,
    question: &str,
    seed: u64,
) -> (Model, Instance) {
    let vocab = vocab_for(&[question], &db.schema);
    let model = Model::new(cfg, vocab, seed).unwrap();
    let inst = Instance::new(&db.schema, tokenize_question(question), &db.contents, &model.vocab).unwrap();
    (model, inst)
}

/// Writes `schemas` as a tables file plus one CSV per table under
/// `contents/<db_id>/`, returning `(tables path, contents dir)`.
pub fn write_dataset(dir: &Path, dbs: &[Database]) -> (PathBuf, PathBuf) {
    let map: BTreeMap<String, Database> = dbs.iter().map(|d| (d.schema.db_id.clone(), d.clone())).collect();
    globalsql::pipeline::write_databases(dir, &map).unwrap();
    (dir.join("tables.json"), dir.join("contents"))
}

pub fn write_tables_only(path: &Path, schemas: &[Schema]) {
    let records: Vec<_> = schemas.iter().map(schema_record).collect();
    fs::write(path, serde_json::to_string_pretty(&records).unwrap()).unwrap();
}

pub fn write_raw(path: &Path, raw: &[(&str, &str, &str)]) {
    let rows: Vec<RawExample> = raw
        .iter()
        .map(|(d, q, s)| RawExample { db_id: d.to_string(), question: q.to_string(), query: s.to_string() })
        .collect();
    globalsql::pipeline::write_examples(path, &rows).unwrap();
}
