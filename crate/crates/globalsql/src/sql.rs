//! SQL abstract tree for the supported subset: one SELECT block with
//! aggregates, foreign-key joins, conjunctive WHERE, GROUP BY, ORDER BY and
//! LIMIT. Includes the canonical renderer, a strict parser, loose exact match
//! and constant extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::schema::Schema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Agg {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl Agg {
    pub const ALL: [Agg; 5] = [Agg::Count, Agg::Sum, Agg::Avg, Agg::Min, Agg::Max];

    pub fn keyword(self) -> &'static str {
        match self {
            Agg::Count => "COUNT",
            Agg::Sum => "SUM",
            Agg::Avg => "AVG",
            Agg::Min => "MIN",
            Agg::Max => "MAX",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Agg::ALL.into_iter().find(|a| a.keyword().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Lt,
    Gt,
    Like,
}

impl CmpOp {
    pub const ALL: [CmpOp; 4] = [CmpOp::Eq, CmpOp::Lt, CmpOp::Gt, CmpOp::Like];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Like => "LIKE",
        }
    }
}

/// An aggregate-wrapped column reference; `column` indexes the schema's column
/// list and may be `*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColumnUnit {
    pub agg: Option<Agg>,
    pub column: usize,
}

/// `column op value`. Values are kept as their literal text; numbers render
/// bare and everything else single-quoted.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub column: usize,
    pub op: CmpOp,
    pub value: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OrderItem {
    pub unit: ColumnUnit,
    pub desc: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SqlQuery {
    pub select: Vec<ColumnUnit>,
    /// Tables in join order; each table after the first joins an earlier one
    /// through a declared foreign key.
    pub from: Vec<usize>,
    pub conditions: Vec<Condition>,
    pub group_by: Vec<usize>,
    pub order_by: Vec<OrderItem>,
    pub limit: Option<u64>,
}

impl SqlQuery {
    /// Every column used by the query, `*` included.
    pub fn columns(&self) -> impl Iterator<Item = usize> + '_ {
        self.select
            .iter()
            .map(|u| u.column)
            .chain(self.conditions.iter().map(|c| c.column))
            .chain(self.group_by.iter().copied())
            .chain(self.order_by.iter().map(|o| o.unit.column))
    }

    /// Checks that referenced columns belong to FROM tables, tables are
    /// distinct, and every table after the first has a foreign-key link to an
    /// earlier one.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.select.is_empty() || self.from.is_empty() {
            return Err(Error::Invalid("query needs SELECT and FROM".into()));
        }
        let mut seen = BTreeSet::new();
        for (k, &t) in self.from.iter().enumerate() {
            if t >= schema.tables.len() {
                return Err(Error::Invalid(format!("table index {t} out of range")));
            }
            if !seen.insert(t) {
                return Err(Error::Invalid(format!("table `{}` joined twice", schema.tables[t])));
            }
            if k > 0 && !self.from[..k].iter().any(|&p| schema.join_pair(p, t).is_some()) {
                return Err(Error::Invalid(format!(
                    "table `{}` has no foreign key to an earlier table",
                    schema.tables[t]
                )));
            }
        }
        for c in self.columns() {
            let col = schema
                .columns
                .get(c)
                .ok_or_else(|| Error::Invalid(format!("column index {c} out of range")))?;
            if let Some(t) = col.table {
                if !seen.contains(&t) {
                    return Err(Error::Invalid(format!(
                        "column `{}` used without its table",
                        schema.qualified_column(c)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of tables in FROM; 1 marks a "single" query.
    pub fn num_tables(&self) -> usize {
        self.from.len()
    }
}

/// Table and column constants referenced anywhere in the query; `*` is not a
/// constant.
pub fn extract_constants(q: &SqlQuery, schema: &Schema) -> BTreeSet<NodeId> {
    let mut out: BTreeSet<NodeId> = q.from.iter().map(|&t| NodeId::table(t)).collect();
    out.extend(
        q.columns()
            .filter(|&c| !schema.columns[c].is_star())
            .map(NodeId::column),
    );
    out
}

/// Clause-wise comparison: SELECT, FROM, WHERE and GROUP BY as sets, ORDER BY
/// as a list, LIMIT exactly.
pub fn loose_exact_match(predicted: &SqlQuery, gold: &SqlQuery) -> bool {
    fn set<T: Ord + Clone>(v: &[T]) -> BTreeSet<T> {
        v.iter().cloned().collect()
    }
    set(&predicted.select) == set(&gold.select)
        && set(&predicted.from) == set(&gold.from)
        && set(&predicted.conditions) == set(&gold.conditions)
        && set(&predicted.group_by) == set(&gold.group_by)
        && predicted.order_by == gold.order_by
        && predicted.limit == gold.limit
}

fn is_number(s: &str) -> bool {
    !s.is_empty() && s.parse::<f64>().map(f64::is_finite).unwrap_or(false)
}

fn render_value(v: &str) -> String {
    if is_number(v) {
        v.to_string()
    } else {
        format!("'{}'", v.replace('\'', "''"))
    }
}

fn render_unit(schema: &Schema, u: &ColumnUnit) -> String {
    let c = schema.qualified_column(u.column);
    match u.agg {
        Some(a) => format!("{}({c})", a.keyword()),
        None => c,
    }
}

/// Canonical SQL text. Joins use the first declared foreign-key pair between
/// a table and the earliest preceding table it links to.
pub fn sql_text(q: &SqlQuery, schema: &Schema) -> String {
    let mut s = String::from("SELECT ");
    let items: Vec<String> = q.select.iter().map(|u| render_unit(schema, u)).collect();
    s.push_str(&items.join(", "));
    s.push_str(" FROM ");
    for (k, &t) in q.from.iter().enumerate() {
        if k == 0 {
            s.push_str(&schema.tables[t]);
            continue;
        }
        s.push_str(" JOIN ");
        s.push_str(&schema.tables[t]);
        if let Some((a, b)) = q.from[..k].iter().find_map(|&p| schema.join_pair(p, t)) {
            s.push_str(&format!(
                " ON {} = {}",
                schema.qualified_column(a),
                schema.qualified_column(b)
            ));
        }
    }
    if !q.conditions.is_empty() {
        let conds: Vec<String> = q
            .conditions
            .iter()
            .map(|c| {
                format!(
                    "{} {} {}",
                    schema.qualified_column(c.column),
                    c.op.symbol(),
                    render_value(&c.value)
                )
            })
            .collect();
        s.push_str(" WHERE ");
        s.push_str(&conds.join(" AND "));
    }
    if !q.group_by.is_empty() {
        let g: Vec<String> = q.group_by.iter().map(|&c| schema.qualified_column(c)).collect();
        s.push_str(" GROUP BY ");
        s.push_str(&g.join(", "));
    }
    if !q.order_by.is_empty() {
        let o: Vec<String> = q
            .order_by
            .iter()
            .map(|o| format!("{} {}", render_unit(schema, &o.unit), if o.desc { "DESC" } else { "ASC" }))
            .collect();
        s.push_str(" ORDER BY ");
        s.push_str(&o.join(", "));
    }
    if let Some(n) = q.limit {
        s.push_str(&format!(" LIMIT {n}"));
    }
    s
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Num(String),
    Sym(&'static str),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) | Tok::Num(w) => write!(f, "{w}"),
            Tok::Str(s) => write!(f, "'{s}'"),
            Tok::Sym(s) => write!(f, "{s}"),
        }
    }
}

fn lex(text: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '\'' || c == '"' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(Error::SqlParse("unterminated string literal".into())),
                    Some(&q) if q == c => {
                        if chars.get(i + 1) == Some(&c) {
                            s.push(c);
                            i += 2;
                        } else {
                            i += 1;
                            break;
                        }
                    }
                    Some(&ch) => {
                        s.push(ch);
                        i += 1;
                    }
                }
            }
            out.push(Tok::Str(s));
        } else if c.is_ascii_digit()
            || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let start = i;
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            out.push(Tok::Num(chars[start..i].iter().collect()));
        } else if c.is_alphabetic() || c == '_' {
            let ident = |i: &mut usize| {
                while *i < chars.len() && (chars[*i].is_alphanumeric() || chars[*i] == '_') {
                    *i += 1;
                }
            };
            let start = i;
            ident(&mut i);
            if chars.get(i) == Some(&'.') {
                match chars.get(i + 1) {
                    Some('*') => i += 2,
                    Some(d) if d.is_alphanumeric() || *d == '_' => {
                        i += 1;
                        ident(&mut i);
                    }
                    _ => {}
                }
            }
            out.push(Tok::Word(chars[start..i].iter().collect()));
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            if matches!(two.as_str(), "!=" | ">=" | "<=" | "<>") {
                return Err(Error::SqlParse(format!("operator `{two}` is outside the grammar")));
            }
            let sym = match c {
                '(' => "(",
                ')' => ")",
                ',' => ",",
                '*' => "*",
                '=' => "=",
                '<' => "<",
                '>' => ">",
                ';' => ";",
                _ => return Err(Error::SqlParse(format!("unexpected character `{c}`"))),
            };
            out.push(Tok::Sym(sym));
            i += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct RawCol {
    qualifier: Option<String>,
    name: String,
}

#[derive(Clone, Debug)]
struct RawUnit {
    agg: Option<Agg>,
    col: RawCol,
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.unexpected(kw))
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(x)) if *x == s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.unexpected(s))
        }
    }

    fn unexpected(&self, wanted: &str) -> Error {
        match self.peek() {
            Some(t) => Error::SqlParse(format!("expected {wanted}, found `{t}` at token {}", self.pos)),
            None => Error::SqlParse(format!("expected {wanted}, found end of query")),
        }
    }

    fn word(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn column(&mut self) -> Result<RawCol> {
        if self.eat_sym("*") {
            return Ok(RawCol { qualifier: None, name: "*".into() });
        }
        let w = self.word()?;
        if is_reserved(&w) {
            return Err(Error::SqlParse(format!("`{w}` is outside the grammar")));
        }
        Ok(match w.split_once('.') {
            Some((q, n)) => RawCol { qualifier: Some(q.to_string()), name: n.to_string() },
            None => RawCol { qualifier: None, name: w },
        })
    }

    fn unit(&mut self) -> Result<RawUnit> {
        if let Some(Tok::Word(w)) = self.peek() {
            if let Some(agg) = Agg::parse(w) {
                if matches!(self.toks.get(self.pos + 1), Some(Tok::Sym("("))) {
                    self.pos += 2;
                    if self.is_kw("DISTINCT") {
                        return Err(Error::SqlParse("DISTINCT is outside the grammar".into()));
                    }
                    let col = self.column()?;
                    self.expect_sym(")")?;
                    return Ok(RawUnit { agg: Some(agg), col });
                }
            }
        }
        Ok(RawUnit { agg: None, col: self.column()? })
    }

    fn value(&mut self) -> Result<String> {
        match self.peek().cloned() {
            Some(Tok::Str(s)) | Some(Tok::Num(s)) => {
                self.pos += 1;
                Ok(s)
            }
            Some(Tok::Sym("(")) => Err(Error::SqlParse("nested queries are outside the grammar".into())),
            _ => Err(self.unexpected("literal value")),
        }
    }
}

const RESERVED: [&str; 24] = [
    "select", "from", "where", "group", "order", "by", "limit", "join", "on", "as", "and", "or",
    "not", "in", "between", "having", "distinct", "union", "intersect", "except", "asc", "desc",
    "like", "is",
];

fn is_reserved(w: &str) -> bool {
    RESERVED.iter().any(|r| r.eq_ignore_ascii_case(w))
}

struct Scope<'s> {
    schema: &'s Schema,
    tables: Vec<usize>,
    aliases: BTreeMap<String, usize>,
}

impl Scope<'_> {
    fn resolve(&self, c: &RawCol) -> Result<usize> {
        if c.name == "*" {
            return self
                .schema
                .star_index()
                .ok_or_else(|| Error::SqlParse("schema has no `*` column".into()));
        }
        match &c.qualifier {
            Some(q) => {
                let t = self
                    .aliases
                    .get(&q.to_lowercase())
                    .copied()
                    .ok_or_else(|| Error::SqlParse(format!("unknown table or alias `{q}`")))?;
                self.schema
                    .column_index(t, &c.name)
                    .ok_or_else(|| Error::SqlParse(format!("unknown column `{q}.{}`", c.name)))
            }
            None => {
                let hits: Vec<usize> = self
                    .tables
                    .iter()
                    .filter_map(|&t| self.schema.column_index(t, &c.name))
                    .collect();
                match hits.as_slice() {
                    [one] => Ok(*one),
                    [] => Err(Error::SqlParse(format!("unknown column `{}`", c.name))),
                    _ => Err(Error::SqlParse(format!("ambiguous column `{}`", c.name))),
                }
            }
        }
    }

    fn unit(&self, u: &RawUnit) -> Result<ColumnUnit> {
        Ok(ColumnUnit { agg: u.agg, column: self.resolve(&u.col)? })
    }
}

/// Parses SQL text in the supported subset. Anything outside it (nested
/// queries, OR, HAVING, DISTINCT, set operations, other operators) is an
/// [`Error::SqlParse`].
pub fn parse_sql(text: &str, schema: &Schema) -> Result<SqlQuery> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    p.expect_kw("SELECT")?;
    if p.is_kw("DISTINCT") {
        return Err(Error::SqlParse("DISTINCT is outside the grammar".into()));
    }
    let mut select = vec![p.unit()?];
    while p.eat_sym(",") {
        select.push(p.unit()?);
    }
    p.expect_kw("FROM")?;

    let mut scope = Scope { schema, tables: Vec::new(), aliases: BTreeMap::new() };
    let table = |p: &mut Parser, scope: &mut Scope| -> Result<()> {
        if matches!(p.peek(), Some(Tok::Sym("("))) {
            return Err(Error::SqlParse("nested queries are outside the grammar".into()));
        }
        let name = p.word()?;
        let t = schema
            .table_index(&name)
            .ok_or_else(|| Error::SqlParse(format!("unknown table `{name}`")))?;
        scope.tables.push(t);
        scope.aliases.insert(name.to_lowercase(), t);
        if p.eat_kw("AS") {
            let alias = p.word()?;
            scope.aliases.insert(alias.to_lowercase(), t);
        }
        Ok(())
    };
    table(&mut p, &mut scope)?;
    let mut join_on = Vec::new();
    loop {
        if p.eat_kw("JOIN") || p.eat_sym(",") {
            table(&mut p, &mut scope)?;
            if p.eat_kw("ON") {
                loop {
                    let a = p.column()?;
                    p.expect_sym("=")?;
                    let b = p.column()?;
                    join_on.push((a, b));
                    if !p.eat_kw("AND") {
                        break;
                    }
                }
            }
        } else {
            break;
        }
    }
    for (a, b) in &join_on {
        scope.resolve(a)?;
        scope.resolve(b)?;
    }

    let mut conditions = Vec::new();
    if p.eat_kw("WHERE") {
        loop {
            let col = p.column()?;
            let op = if p.eat_sym("=") {
                CmpOp::Eq
            } else if p.eat_sym("<") {
                CmpOp::Lt
            } else if p.eat_sym(">") {
                CmpOp::Gt
            } else if p.eat_kw("LIKE") {
                CmpOp::Like
            } else {
                return Err(p.unexpected("comparison operator"));
            };
            let value = p.value()?;
            conditions.push(Condition { column: scope.resolve(&col)?, op, value });
            if !p.eat_kw("AND") {
                break;
            }
        }
    }
    let mut group_by = Vec::new();
    if p.eat_kw("GROUP") {
        p.expect_kw("BY")?;
        loop {
            let c = p.column()?;
            group_by.push(scope.resolve(&c)?);
            if !p.eat_sym(",") {
                break;
            }
        }
    }
    let mut order_by = Vec::new();
    if p.eat_kw("ORDER") {
        p.expect_kw("BY")?;
        loop {
            let u = p.unit()?;
            let desc = if p.eat_kw("DESC") {
                true
            } else {
                p.eat_kw("ASC");
                false
            };
            order_by.push(OrderItem { unit: scope.unit(&u)?, desc });
            if !p.eat_sym(",") {
                break;
            }
        }
    }
    let mut limit = None;
    if p.eat_kw("LIMIT") {
        match p.peek().cloned() {
            Some(Tok::Num(n)) => {
                p.pos += 1;
                limit = Some(
                    n.parse::<u64>()
                        .map_err(|_| Error::SqlParse(format!("LIMIT `{n}` is not a count")))?,
                );
            }
            _ => return Err(p.unexpected("LIMIT count")),
        }
    }
    p.eat_sym(";");
    if p.pos != p.toks.len() {
        return Err(p.unexpected("end of query"));
    }
    let select = select.iter().map(|u| scope.unit(u)).collect::<Result<Vec<_>>>()?;
    let q = SqlQuery {
        select,
        from: scope.tables.clone(),
        conditions,
        group_by,
        order_by,
        limit,
    };
    q.validate(schema).map_err(|e| Error::SqlParse(e.to_string()))?;
    Ok(q)
}
