use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Text,
    Number,
    Time,
    Boolean,
    Other,
}

impl ValueType {
    pub fn parse(s: &str) -> Self {
        match s.to_ascii_lowercase().as_str() {
            "text" => ValueType::Text,
            "number" | "int" | "integer" | "real" | "float" => ValueType::Number,
            "time" | "date" | "datetime" => ValueType::Time,
            "boolean" | "bool" => ValueType::Boolean,
            _ => ValueType::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::Text => "text",
            ValueType::Number => "number",
            ValueType::Time => "time",
            ValueType::Boolean => "boolean",
            ValueType::Other => "others",
        }
    }
}

/// A column. `table == None` marks the `*` pseudo-column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub table: Option<usize>,
    pub name: String,
    pub ty: ValueType,
}

impl Column {
    pub fn is_star(&self) -> bool {
        self.table.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub db_id: String,
    pub tables: Vec<String>,
    pub columns: Vec<Column>,
    pub primary_keys: BTreeSet<usize>,
    pub foreign_keys: BTreeSet<(usize, usize)>,
}

impl Schema {
    /// Checks every structural invariant, naming the first offending index.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.columns.iter().enumerate() {
            if let Some(t) = c.table {
                if t >= self.tables.len() {
                    return Err(Error::Schema(format!(
                        "column {i} (`{}`) references table index {t}, but there are {} tables",
                        c.name,
                        self.tables.len()
                    )));
                }
            } else if c.name != "*" {
                return Err(Error::Schema(format!(
                    "column {i} (`{}`) has no table and is not `*`",
                    c.name
                )));
            }
        }
        for &p in &self.primary_keys {
            if p >= self.columns.len() {
                return Err(Error::Schema(format!("primary key column index {p} out of range")));
            }
        }
        for &(f, p) in &self.foreign_keys {
            for idx in [f, p] {
                if idx >= self.columns.len() {
                    return Err(Error::Schema(format!("foreign key column index {idx} out of range")));
                }
            }
            let (tf, tp) = (self.columns[f].table, self.columns[p].table);
            match (tf, tp) {
                (Some(a), Some(b)) if a != b => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "foreign key ({f}, {p}) must join columns of two distinct tables"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn star_index(&self) -> Option<usize> {
        self.columns.iter().position(Column::is_star)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.eq_ignore_ascii_case(name))
    }

    pub fn column_index(&self, table: usize, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.table == Some(table) && c.name.eq_ignore_ascii_case(name))
    }

    pub fn columns_of(&self, table: usize) -> impl Iterator<Item = usize> + '_ {
        self.columns
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.table == Some(table))
            .map(|(i, _)| i)
    }

    /// `table.column`, or `*`.
    pub fn qualified_column(&self, col: usize) -> String {
        let c = &self.columns[col];
        match c.table {
            Some(t) => format!("{}.{}", self.tables[t], c.name),
            None => "*".to_string(),
        }
    }

    /// The first declared foreign-key pair joining tables `a` and `b`, oriented
    /// as (column of `a`, column of `b`).
    pub fn join_pair(&self, a: usize, b: usize) -> Option<(usize, usize)> {
        self.foreign_keys.iter().find_map(|&(f, p)| {
            let tf = self.columns[f].table?;
            let tp = self.columns[p].table?;
            if tf == a && tp == b {
                Some((f, p))
            } else if tf == b && tp == a {
                Some((p, f))
            } else {
                None
            }
        })
    }
}
