//! Ingestion of the public dataset layout: a tables file, an examples file
//! and per-table CSV contents.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{read_text, Error, Result};
use crate::grammar::{gold_derivation, DecodeContext, Decision, Grammar};
use crate::graph::{attach_cell_nodes, build_graph, NodeId};
use crate::schema::{Column, Schema, ValueType};
use crate::sql::{extract_constants, parse_sql, SqlQuery};
use crate::text::tokenize_question;

/// Rows of cell content read per table.
pub const MAX_CONTENT_ROWS: usize = 5000;

/// A schema with its (capped) cell contents, one list per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Database {
    pub schema: Schema,
    pub contents: Vec<(usize, Vec<String>)>,
}

impl Database {
    pub fn without_contents(schema: Schema) -> Self {
        Self { schema, contents: Vec::new() }
    }
}

/// One record of an examples file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub db_id: String,
    pub question: String,
    pub query: String,
}

/// A question with its gold query, derivation and constant set.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub db_id: String,
    pub question: String,
    pub tokens: Vec<String>,
    pub sql: String,
    pub query: SqlQuery,
    pub derivation: Vec<Decision>,
    pub constants: BTreeSet<NodeId>,
}

impl Example {
    pub fn is_single_table(&self) -> bool {
        self.query.num_tables() == 1
    }
}

/// A record left out of a dataset, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub index: usize,
    pub db_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub databases: BTreeMap<String, Database>,
    pub examples: Vec<Example>,
    pub exclusions: Vec<Exclusion>,
    /// Non-fatal notes from ingestion (dropped keys, missing content files).
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Builds examples against `databases`, excluding records whose SQL is
    /// outside `grammar` or whose values cannot be copied from the question.
    pub fn from_raw(
        databases: BTreeMap<String, Database>,
        raw: &[RawExample],
        grammar: &Grammar,
    ) -> Self {
        let mut examples = Vec::new();
        let mut exclusions = Vec::new();
        for (index, r) in raw.iter().enumerate() {
            let exclude = |reason: String| Exclusion { index, db_id: r.db_id.clone(), reason };
            let Some(db) = databases.get(&r.db_id) else {
                exclusions.push(exclude(format!("unknown database `{}`", r.db_id)));
                continue;
            };
            match build_example(db, r, grammar) {
                Ok(e) => examples.push(e),
                Err(e) => exclusions.push(exclude(e.to_string())),
            }
        }
        Self { databases, examples, exclusions, warnings: Vec::new() }
    }

    pub fn database(&self, db_id: &str) -> Result<&Database> {
        self.databases
            .get(db_id)
            .ok_or_else(|| Error::Data(format!("unknown database `{db_id}`")))
    }
}

/// Parses one record into an [`Example`].
pub fn build_example(db: &Database, r: &RawExample, grammar: &Grammar) -> Result<Example> {
    let tokens = tokenize_question(&r.question);
    if tokens.is_empty() {
        return Err(Error::Data("empty question".into()));
    }
    let query = parse_sql(&r.query, &db.schema)?;
    let base = build_graph(&db.schema)?;
    let (_, cells) = attach_cell_nodes(base, &db.contents, &tokens)?;
    let cell_texts: Vec<String> = cells.into_iter().map(|c| c.cell).collect();
    let ctx = DecodeContext { schema: &db.schema, tokens: &tokens, cells: &cell_texts };
    let derivation = gold_derivation(&query, grammar, &ctx)?;
    let constants = extract_constants(&query, &db.schema);
    Ok(Example {
        db_id: r.db_id.clone(),
        question: r.question.clone(),
        tokens,
        sql: r.query.clone(),
        query,
        derivation,
        constants,
    })
}

fn field<'a>(rec: &'a Value, key: &str, at: usize) -> Result<&'a Value> {
    rec.get(key)
        .ok_or_else(|| Error::Data(format!("tables record {at}: missing field `{key}`")))
}

fn index(v: &Value, what: &str, at: usize) -> Result<i64> {
    v.as_i64()
        .ok_or_else(|| Error::Data(format!("tables record {at}: {what} must be an integer, got {v}")))
}

/// Parses one tables-file record. Self-referencing foreign keys (both
/// columns in one table) are dropped and reported in `warnings`.
pub fn parse_schema_record(rec: &Value, at: usize, warnings: &mut Vec<String>) -> Result<Schema> {
    let db_id = field(rec, "db_id", at)?
        .as_str()
        .ok_or_else(|| Error::Data(format!("tables record {at}: `db_id` must be a string")))?
        .to_string();
    let names = |key: &str| -> Result<Vec<String>> {
        let v = rec
            .get(key)
            .or_else(|| rec.get(key.trim_end_matches("_original")))
            .ok_or_else(|| Error::Data(format!("tables record {at}: missing field `{key}`")))?;
        v.as_array()
            .ok_or_else(|| Error::Data(format!("tables record {at}: `{key}` must be an array")))?
            .iter()
            .map(|x| x.as_str().map(String::from))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Data(format!("tables record {at}: `{key}` must hold strings")))
    };
    let tables = names("table_names_original")?;
    let cols = rec
        .get("column_names_original")
        .or_else(|| rec.get("column_names"))
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Data(format!("tables record {at}: missing field `column_names_original`")))?;
    let types = field(rec, "column_types", at)?
        .as_array()
        .ok_or_else(|| Error::Data(format!("tables record {at}: `column_types` must be an array")))?;
    if types.len() != cols.len() {
        return Err(Error::Data(format!(
            "tables record {at}: {} column types for {} columns",
            types.len(),
            cols.len()
        )));
    }
    let mut columns = Vec::with_capacity(cols.len());
    for (c, (pair, ty)) in cols.iter().zip(types).enumerate() {
        let (t, name) = match pair.as_array().map(Vec::as_slice) {
            Some([t, n]) => (index(t, "column table index", at)?, n.as_str()),
            _ => (-2, None),
        };
        let name = name.ok_or_else(|| {
            Error::Data(format!("tables record {at}: column {c} must be [table index, name]"))
        })?;
        let table = match t {
            -1 => None,
            t if t >= 0 => Some(t as usize),
            _ => return Err(Error::Data(format!("tables record {at}: column {c} has table index {t}"))),
        };
        let ty = ValueType::parse(ty.as_str().unwrap_or("others"));
        columns.push(Column { table, name: name.to_string(), ty });
    }
    let mut primary_keys = BTreeSet::new();
    for pk in field(rec, "primary_keys", at)?.as_array().into_iter().flatten() {
        // composite keys appear as nested arrays
        match pk.as_array() {
            Some(list) => {
                for k in list {
                    primary_keys.insert(index(k, "primary key", at)? as usize);
                }
            }
            None => {
                primary_keys.insert(index(pk, "primary key", at)? as usize);
            }
        }
    }
    let mut foreign_keys = BTreeSet::new();
    for fk in field(rec, "foreign_keys", at)?.as_array().into_iter().flatten() {
        let pair = fk.as_array().map(Vec::as_slice);
        let Some([f, p]) = pair else {
            return Err(Error::Data(format!("tables record {at}: foreign key must be a pair, got {fk}")));
        };
        let (f, p) = (index(f, "foreign key", at)? as usize, index(p, "foreign key", at)? as usize);
        let same = match (columns.get(f), columns.get(p)) {
            (Some(a), Some(b)) => a.table.is_some() && a.table == b.table,
            _ => false,
        };
        if same {
            warnings.push(format!("{db_id}: dropped self-referencing foreign key ({f}, {p})"));
        } else {
            foreign_keys.insert((f, p));
        }
    }
    let schema = Schema { db_id, tables, columns, primary_keys, foreign_keys };
    schema
        .validate()
        .map_err(|e| Error::Data(format!("tables record {at}: {e}")))?;
    Ok(schema)
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Data(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
}

pub fn read_tables(path: &Path) -> Result<(Vec<Schema>, Vec<String>)> {
    let text = read_text(path)?;
    let records: Vec<Value> = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
    let mut warnings = Vec::new();
    let schemas = records
        .iter()
        .enumerate()
        .map(|(i, r)| parse_schema_record(r, i, &mut warnings))
        .collect::<Result<Vec<_>>>()?;
    Ok((schemas, warnings))
}

pub fn read_examples(path: &Path) -> Result<Vec<RawExample>> {
    let text = read_text(path)?;
    let records: Vec<Value> = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            serde_json::from_value(r)
                .map_err(|e| Error::Data(format!("{} record {i}: {e}", path.display())))
        })
        .collect()
}

/// Reads `<dir>/<table>.csv` for every table that has one: the first
/// [`MAX_CONTENT_ROWS`] rows, keyed by header name (case-insensitive).
pub fn read_contents(dir: &Path, schema: &Schema) -> Result<(Vec<(usize, Vec<String>)>, Vec<String>)> {
    let mut contents = Vec::new();
    let mut warnings = Vec::new();
    for (t, table) in schema.tables.iter().enumerate() {
        let path = dir.join(format!("{table}.csv"));
        if !path.exists() {
            warnings.push(format!("{}: no contents file {}", schema.db_id, path.display()));
            continue;
        }
        let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false)
            .from_path(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let headers = reader.headers().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.clone();
        let mut slots: Vec<Option<usize>> = Vec::with_capacity(headers.len());
        for h in headers.iter() {
            slots.push(schema.column_index(t, h));
        }
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for row in reader.records().take(MAX_CONTENT_ROWS) {
            let row = row.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::Data(format!("{} line {line}: {e}", path.display()))
            })?;
            // empty fields are NULLs, not values
            for (k, v) in row.iter().enumerate().filter(|(_, v)| !v.trim().is_empty()) {
                cells[k].push(v.to_string());
            }
        }
        for (slot, cells) in slots.into_iter().zip(cells) {
            if let (Some(c), false) = (slot, cells.is_empty()) {
                contents.push((c, cells));
            }
        }
    }
    contents.sort_by_key(|(c, _)| *c);
    Ok((contents, warnings))
}

/// Loads schemas, contents (if `contents_dir` is given) and examples.
pub fn load_dataset(
    tables: &Path,
    examples: &Path,
    contents_dir: Option<&Path>,
    grammar: &Grammar,
) -> Result<Dataset> {
    let (schemas, mut warnings) = read_tables(tables)?;
    let raw = read_examples(examples)?;
    let databases = load_databases(schemas, contents_dir, &mut warnings)?;
    let mut data = Dataset::from_raw(databases, &raw, grammar);
    data.warnings = warnings;
    Ok(data)
}

pub fn load_databases(
    schemas: Vec<Schema>,
    contents_dir: Option<&Path>,
    warnings: &mut Vec<String>,
) -> Result<BTreeMap<String, Database>> {
    let mut databases = BTreeMap::new();
    for schema in schemas {
        let contents = match contents_dir {
            Some(dir) => {
                let (c, w) = read_contents(&dir.join(&schema.db_id), &schema)?;
                warnings.extend(w);
                c
            }
            None => Vec::new(),
        };
        if databases.contains_key(&schema.db_id) {
            return Err(Error::Data(format!("duplicate db_id `{}`", schema.db_id)));
        }
        databases.insert(schema.db_id.clone(), Database { schema, contents });
    }
    Ok(databases)
}

/// Tables-file record for `schema` (the inverse of [`parse_schema_record`]).
pub fn schema_record(schema: &Schema) -> Value {
    let columns: Vec<Value> = schema
        .columns
        .iter()
        .map(|c| serde_json::json!([c.table.map_or(-1, |t| t as i64), c.name]))
        .collect();
    let types: Vec<&str> = schema.columns.iter().map(|c| c.ty.as_str()).collect();
    let fks: Vec<[usize; 2]> = schema.foreign_keys.iter().map(|&(f, p)| [f, p]).collect();
    serde_json::json!({
        "db_id": schema.db_id,
        "table_names_original": schema.tables,
        "column_names_original": columns,
        "column_types": types,
        "primary_keys": schema.primary_keys,
        "foreign_keys": fks,
    })
}

/// Writes databases in the tables-file + CSV layout read by [`load_dataset`].
pub fn write_databases(dir: &Path, databases: &BTreeMap<String, Database>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let records: Vec<Value> = databases.values().map(|d| schema_record(&d.schema)).collect();
    fs::write(dir.join("tables.json"), serde_json::to_string_pretty(&records)? + "\n")?;
    for db in databases.values() {
        let ddir = dir.join("contents").join(&db.schema.db_id);
        fs::create_dir_all(&ddir)?;
        let by_col: BTreeMap<usize, &Vec<String>> = db.contents.iter().map(|(c, v)| (*c, v)).collect();
        for (t, table) in db.schema.tables.iter().enumerate() {
            let cols: Vec<usize> = db.schema.columns_of(t).collect();
            let mut w = csv::Writer::from_path(ddir.join(format!("{table}.csv")))?;
            w.write_record(cols.iter().map(|&c| db.schema.columns[c].name.as_str()))?;
            let rows = cols.iter().map(|c| by_col.get(c).map_or(0, |v| v.len())).max().unwrap_or(0);
            for r in 0..rows {
                w.write_record(cols.iter().map(|c| {
                    by_col.get(c).and_then(|v| v.get(r)).map_or("", String::as_str)
                }))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn write_examples(path: &Path, examples: &[RawExample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(examples)? + "\n")?;
    Ok(())
}
