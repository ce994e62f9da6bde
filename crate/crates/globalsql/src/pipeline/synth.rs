//! Seeded synthetic corpus: random relational schemas with cell contents and
//! templated question/SQL pairs that exercise every grammar production.
//!
//! Questions are built from the constants' name tokens, cell values and a
//! few filler words, so schema linking is learnable from string features and
//! transfers to held-out schemas.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::data::{Database, RawExample};
use crate::schema::{Column, Schema, ValueType};
use crate::text::name_tokens;

/// Corpus shape. Held-out examples are drawn only from the last
/// `heldout_schemas` schemas, which never appear in training examples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub schemas: usize,
    pub heldout_schemas: usize,
    pub train: usize,
    pub heldout: usize,
    pub rows: usize,
    pub seed: u64,
    /// Only `SELECT columns FROM tables` questions. In that sub-language the
    /// constant set of a query determines it.
    pub projection_only: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            schemas: 50,
            heldout_schemas: 10,
            train: 500,
            heldout: 100,
            rows: 20,
            seed: 7,
            projection_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub databases: BTreeMap<String, Database>,
    pub train: Vec<RawExample>,
    pub heldout: Vec<RawExample>,
}

const TABLES: &[&str] = &[
    "singer", "song", "concert", "stadium", "album", "artist", "student", "course", "teacher",
    "department", "employee", "company", "product", "customer", "city", "airport", "flight",
    "airline", "hotel", "book", "author", "library", "team", "player", "movie", "director",
    "actor", "ship", "school", "club", "museum", "painting", "restaurant", "dish", "car",
    "doctor", "patient", "hospital", "festival", "store",
];

const TEXT_COLUMNS: &[&str] = &[
    "name", "title", "country", "city", "color", "genre", "nationality", "category", "status",
    "language", "brand", "style", "region", "owner",
];

const NUMBER_COLUMNS: &[&str] = &[
    "age", "year", "price", "rating", "capacity", "salary", "population", "height", "weight",
    "score", "budget", "length", "rank", "duration", "stock",
];

const WORDS: &[&str] = &[
    "France", "Spain", "Japan", "Brazil", "Canada", "Kenya", "Norway", "Peru", "Egypt", "India",
    "Red", "Blue", "Green", "Golden", "Silver", "Black", "White", "Rock", "Jazz", "Blues", "Pop",
    "Opera", "Folk", "Active", "Closed", "Open", "Alpha", "Beta", "Gamma", "Delta", "Nova",
    "Orion", "Atlas", "Echo", "Luna", "Sol", "River", "Stone", "Maple", "Cedar", "Harbor",
    "Summit", "Valley", "Meadow", "Falcon", "Tiger", "Eagle", "Wolf", "Bear", "Fox", "Hey",
    "Jude", "Moon", "Star", "Paris", "Tokyo", "Lima", "Oslo", "Cairo", "Delhi",
];

const FILLERS: &[&str] = &["please", "kindly", "now", "quickly"];

#[derive(Clone, Debug)]
struct TableSpec {
    name: String,
    text: Vec<usize>,
    number: Vec<usize>,
}

fn words(name: &str) -> String {
    name_tokens(name).join(" ")
}

fn generate_schema(rng: &mut ChaCha8Rng, db_id: String, rows: usize) -> Database {
    let n_tables = rng.gen_range(2..=5);
    let names: Vec<&str> = TABLES.choose_multiple(rng, n_tables).copied().collect();
    let mut columns = vec![Column { table: None, name: "*".into(), ty: ValueType::Text }];
    let mut primary_keys = BTreeSet::new();
    let mut pk_of = Vec::new();
    for (t, _) in names.iter().enumerate() {
        primary_keys.insert(columns.len());
        pk_of.push(columns.len());
        columns.push(Column { table: Some(t), name: "id".into(), ty: ValueType::Number });
    }
    // foreign keys: child.parent_id -> parent.id, at most one per table pair
    let mut pairs: Vec<(usize, usize)> = (0..n_tables)
        .flat_map(|a| (0..n_tables).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(rng);
    let want = rng.gen_range(1..=3);
    let mut linked: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut fk_cols: Vec<(usize, usize)> = Vec::new();
    for (child, parent) in pairs {
        if linked.len() == want {
            break;
        }
        let key = (child.min(parent), child.max(parent));
        if linked.contains(&key) {
            continue;
        }
        linked.insert(key);
        fk_cols.push((child, parent));
    }
    let mut foreign_keys = BTreeSet::new();
    let mut per_table_cols = vec![1usize; n_tables];
    let mut fk_source: BTreeMap<usize, usize> = BTreeMap::new();
    for &(child, parent) in &fk_cols {
        let c = columns.len();
        columns.push(Column {
            table: Some(child),
            name: format!("{}_id", names[parent]),
            ty: ValueType::Number,
        });
        foreign_keys.insert((c, pk_of[parent]));
        fk_source.insert(c, parent);
        per_table_cols[child] += 1;
    }
    let mut tables = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let total = rng.gen_range(2..=6).max(per_table_cols[t] + 1);
        let extra = total - per_table_cols[t];
        let mut spec = TableSpec { name: name.to_string(), text: Vec::new(), number: Vec::new() };
        let n_text = if extra >= 2 { rng.gen_range(1..extra) } else { rng.gen_range(0..=1) };
        let text: Vec<&str> = TEXT_COLUMNS.choose_multiple(rng, n_text).copied().collect();
        let num: Vec<&str> = NUMBER_COLUMNS.choose_multiple(rng, extra - n_text).copied().collect();
        for c in text {
            spec.text.push(columns.len());
            columns.push(Column { table: Some(t), name: c.into(), ty: ValueType::Text });
        }
        for c in num {
            spec.number.push(columns.len());
            columns.push(Column { table: Some(t), name: c.into(), ty: ValueType::Number });
        }
        tables.push(spec);
    }
    let schema = Schema {
        db_id,
        tables: tables.iter().map(|t| t.name.clone()).collect(),
        columns,
        primary_keys,
        foreign_keys,
    };

    // cell contents
    let mut contents = Vec::new();
    for (c, col) in schema.columns.iter().enumerate() {
        let Some(_) = col.table else { continue };
        let cells: Vec<String> = if col.name == "id" {
            (1..=rows).map(|i| i.to_string()).collect()
        } else if fk_source.contains_key(&c) {
            (0..rows).map(|_| rng.gen_range(1..=rows).to_string()).collect()
        } else if col.ty == ValueType::Number {
            (0..rows).map(|_| rng.gen_range(1..=300).to_string()).collect()
        } else {
            let pool: Vec<&str> = WORDS.choose_multiple(rng, 6).copied().collect();
            (0..rows)
                .map(|_| {
                    let a = *pool.choose(rng).expect("pool");
                    if matches!(col.name.as_str(), "name" | "title") {
                        format!("{a} {}", WORDS.choose(rng).expect("words"))
                    } else {
                        a.to_string()
                    }
                })
                .collect()
        };
        contents.push((c, cells));
    }
    Database { schema, contents }
}

/// Everything a template needs to know about one schema.
struct View<'a> {
    db: &'a Database,
    cells: BTreeMap<usize, &'a Vec<String>>,
}

impl<'a> View<'a> {
    fn new(db: &'a Database) -> Self {
        Self { db, cells: db.contents.iter().map(|(c, v)| (*c, v)).collect() }
    }

    fn s(&self) -> &Schema {
        &self.db.schema
    }

    /// Non-key attribute columns of table `t` with type `ty` (any if None).
    fn attrs(&self, t: usize, ty: Option<ValueType>) -> Vec<usize> {
        self.s()
            .columns_of(t)
            .filter(|&c| {
                let col = &self.s().columns[c];
                col.name != "id" && !col.name.ends_with("_id") && ty.is_none_or(|ty| col.ty == ty)
            })
            .collect()
    }

    fn table_words(&self, t: usize, rng: &mut ChaCha8Rng) -> String {
        let w = words(&self.s().tables[t]);
        if rng.gen_bool(0.3) {
            format!("{w}s")
        } else {
            w
        }
    }

    fn col_words(&self, c: usize) -> String {
        words(&self.s().columns[c].name)
    }

    fn q(&self, c: usize) -> String {
        self.s().qualified_column(c)
    }

    fn table(&self, t: usize) -> &str {
        &self.s().tables[t]
    }

    fn cell(&self, c: usize, rng: &mut ChaCha8Rng) -> String {
        self.cells[&c].choose(rng).expect("cells").clone()
    }

    /// FK-joined table pairs `(a, b)` with the key columns `(col of a, col of b)`.
    fn joins(&self) -> Vec<(usize, usize)> {
        let s = self.s();
        s.foreign_keys
            .iter()
            .filter_map(|&(f, p)| Some((s.columns[f].table?, s.columns[p].table?)))
            .flat_map(|(a, b)| [(a, b), (b, a)])
            .collect()
    }

    fn join_clause(&self, a: usize, b: usize) -> String {
        let (x, y) = self.s().join_pair(a, b).expect("joined tables");
        format!("{} JOIN {} ON {} = {}", self.table(a), self.table(b), self.q(x), self.q(y))
    }
}

fn agg_word(rng: &mut ChaCha8Rng) -> (&'static str, &'static str) {
    *[("average", "AVG"), ("total", "SUM"), ("minimum", "MIN"), ("maximum", "MAX")]
        .choose(rng)
        .expect("aggs")
}

type Template = fn(&View, usize, &mut ChaCha8Rng) -> Option<(String, String)>;

fn pick<T: Copy>(xs: &[T], rng: &mut ChaCha8Rng) -> Option<T> {
    xs.choose(rng).copied()
}

fn two<T: Copy>(xs: &[T], rng: &mut ChaCha8Rng) -> Option<(T, T)> {
    let v: Vec<T> = xs.choose_multiple(rng, 2).copied().collect();
    (v.len() == 2).then(|| (v[0], v[1]))
}

fn proj_one(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let q = match rng.gen_range(0..3) {
        0 => format!("show the {} of all {}", v.col_words(c), v.table_words(t, rng)),
        1 => format!("list every {} {}", v.table_words(t, rng), v.col_words(c)),
        _ => format!("what are the {} of the {}", v.col_words(c), v.table_words(t, rng)),
    };
    Some((q, format!("SELECT {} FROM {}", v.q(c), v.table(t))))
}

fn proj_two(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let (a, b) = two(&v.attrs(t, None), rng)?;
    let q = format!("show the {} and {} of each {}", v.col_words(a), v.col_words(b), v.table_words(t, rng));
    Some((q, format!("SELECT {}, {} FROM {}", v.q(a), v.q(b), v.table(t))))
}

fn count_all(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let q = format!("how many {} are there", v.table_words(t, rng));
    Some((q, format!("SELECT COUNT(*) FROM {}", v.table(t))))
}

fn aggregate(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, Some(ValueType::Number)), rng)?;
    let (w, k) = agg_word(rng);
    let q = format!("what is the {w} {} of all {}", v.col_words(c), v.table_words(t, rng));
    Some((q, format!("SELECT {k}({}) FROM {}", v.q(c), v.table(t))))
}

fn where_eq(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let w = pick(&v.attrs(t, Some(ValueType::Text)), rng).filter(|&w| w != c)?;
    let val = v.cell(w, rng);
    let q = format!("show the {} of {} whose {} is {val}", v.col_words(c), v.table_words(t, rng), v.col_words(w));
    Some((q, format!("SELECT {} FROM {} WHERE {} = '{val}'", v.q(c), v.table(t), v.q(w))))
}

fn where_cmp(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let w = pick(&v.attrs(t, Some(ValueType::Number)), rng).filter(|&w| w != c)?;
    let n = rng.gen_range(10..=250);
    let (word, op) = if rng.gen_bool(0.5) { ("above", ">") } else { ("below", "<") };
    let q = format!("which {} have {} {word} {n} ? show their {}", v.table_words(t, rng), v.col_words(w), v.col_words(c));
    Some((q, format!("SELECT {} FROM {} WHERE {} {op} {n}", v.q(c), v.table(t), v.q(w))))
}

fn where_like(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let w = pick(&v.attrs(t, Some(ValueType::Text)), rng).filter(|&w| w != c)?;
    let cell = v.cell(w, rng);
    let part = cell.split_whitespace().next()?.to_string();
    let q = format!("show the {} of {} whose {} contains {part}", v.col_words(c), v.table_words(t, rng), v.col_words(w));
    Some((q, format!("SELECT {} FROM {} WHERE {} LIKE '%{part}%'", v.q(c), v.table(t), v.q(w))))
}

fn where_two(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let w = pick(&v.attrs(t, Some(ValueType::Text)), rng).filter(|&w| w != c)?;
    let x = pick(&v.attrs(t, Some(ValueType::Number)), rng).filter(|&x| x != c)?;
    let val = v.cell(w, rng);
    let n = rng.gen_range(10..=250);
    let q = format!(
        "show the {} of {} whose {} is {val} and {} above {n}",
        v.col_words(c),
        v.table_words(t, rng),
        v.col_words(w),
        v.col_words(x)
    );
    let sql = format!(
        "SELECT {} FROM {} WHERE {} = '{val}' AND {} > {n}",
        v.q(c),
        v.table(t),
        v.q(w),
        v.q(x)
    );
    Some((q, sql))
}

fn count_where(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let w = pick(&v.attrs(t, Some(ValueType::Text)), rng)?;
    let val = v.cell(w, rng);
    let q = format!("how many {} have {} {val}", v.table_words(t, rng), v.col_words(w));
    Some((q, format!("SELECT COUNT(*) FROM {} WHERE {} = '{val}'", v.table(t), v.q(w))))
}

fn agg_where(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, Some(ValueType::Number)), rng)?;
    let w = pick(&v.attrs(t, Some(ValueType::Text)), rng)?;
    let val = v.cell(w, rng);
    let (word, k) = agg_word(rng);
    let q = format!("what is the {word} {} of {} whose {} is {val}", v.col_words(c), v.table_words(t, rng), v.col_words(w));
    Some((q, format!("SELECT {k}({}) FROM {} WHERE {} = '{val}'", v.q(c), v.table(t), v.q(w))))
}

fn group_count(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, Some(ValueType::Text)), rng)?;
    let q = format!("show each {} and the number of {} with it", v.col_words(c), v.table_words(t, rng));
    Some((q, format!("SELECT {}, COUNT(*) FROM {} GROUP BY {}", v.q(c), v.table(t), v.q(c))))
}

fn group_two(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let (a, b) = two(&v.attrs(t, None), rng)?;
    let q = format!("for each {} and {} , count the {}", v.col_words(a), v.col_words(b), v.table_words(t, rng));
    let sql = format!(
        "SELECT {}, {}, COUNT(*) FROM {} GROUP BY {}, {}",
        v.q(a),
        v.q(b),
        v.table(t),
        v.q(a),
        v.q(b)
    );
    Some((q, sql))
}

fn order_by(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let o = pick(&v.attrs(t, Some(ValueType::Number)), rng)?;
    let (word, dir) = if rng.gen_bool(0.5) { ("ascending", "ASC") } else { ("descending", "DESC") };
    let q = format!("list the {} of {} ordered by {} {word}", v.col_words(c), v.table_words(t, rng), v.col_words(o));
    Some((q, format!("SELECT {} FROM {} ORDER BY {} {dir}", v.q(c), v.table(t), v.q(o))))
}

fn order_two(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let (a, b) = two(&v.attrs(t, None), rng)?;
    let q = format!(
        "list the {} of {} ordered by {} and then {}",
        v.col_words(c),
        v.table_words(t, rng),
        v.col_words(a),
        v.col_words(b)
    );
    Some((q, format!("SELECT {} FROM {} ORDER BY {} ASC, {} ASC", v.q(c), v.table(t), v.q(a), v.q(b))))
}

fn superlative(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let o = pick(&v.attrs(t, Some(ValueType::Number)), rng).filter(|&o| o != c)?;
    let (word, dir) = if rng.gen_bool(0.5) { ("highest", "DESC") } else { ("lowest", "ASC") };
    let q = format!("which {} has the {word} {} ? give its {}", v.table_words(t, rng), v.col_words(o), v.col_words(c));
    Some((q, format!("SELECT {} FROM {} ORDER BY {} {dir} LIMIT 1", v.q(c), v.table(t), v.q(o))))
}

fn top_n(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, None), rng)?;
    let o = pick(&v.attrs(t, Some(ValueType::Number)), rng).filter(|&o| o != c)?;
    let n = rng.gen_range(2..=9);
    let q = format!("show the {} of the top {n} {} by {}", v.col_words(c), v.table_words(t, rng), v.col_words(o));
    Some((q, format!("SELECT {} FROM {} ORDER BY {} DESC LIMIT {n}", v.q(c), v.table(t), v.q(o))))
}

fn most_common(v: &View, t: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let c = pick(&v.attrs(t, Some(ValueType::Text)), rng)?;
    let q = format!("which {} is most common among {}", v.col_words(c), v.table_words(t, rng));
    let sql = format!(
        "SELECT {} FROM {} GROUP BY {} ORDER BY COUNT(*) DESC LIMIT 1",
        v.q(c),
        v.table(t),
        v.q(c)
    );
    Some((q, sql))
}

fn join_proj(v: &View, _: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let (a, b) = pick(&v.joins(), rng)?;
    let ca = pick(&v.attrs(a, None), rng)?;
    let cb = pick(&v.attrs(b, None), rng)?;
    let q = format!(
        "show the {} of each {} and the {} of its {}",
        v.col_words(ca),
        v.table_words(a, rng),
        v.col_words(cb),
        v.table_words(b, rng)
    );
    Some((q, format!("SELECT {}, {} FROM {}", v.q(ca), v.q(cb), v.join_clause(a, b))))
}

fn join_where(v: &View, _: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let (a, b) = pick(&v.joins(), rng)?;
    let ca = pick(&v.attrs(a, None), rng)?;
    let w = pick(&v.attrs(b, Some(ValueType::Text)), rng)?;
    let val = v.cell(w, rng);
    let q = format!(
        "show the {} of {} whose {} {} is {val}",
        v.col_words(ca),
        v.table_words(a, rng),
        v.table_words(b, rng),
        v.col_words(w)
    );
    Some((q, format!("SELECT {} FROM {} WHERE {} = '{val}'", v.q(ca), v.join_clause(a, b), v.q(w))))
}

fn join_group(v: &View, _: usize, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let (a, b) = pick(&v.joins(), rng)?;
    let cb = pick(&v.attrs(b, None), rng)?;
    let q = format!(
        "show the {} of each {} and the number of {} it has",
        v.col_words(cb),
        v.table_words(b, rng),
        v.table_words(a, rng)
    );
    Some((q, format!("SELECT {}, COUNT(*) FROM {} GROUP BY {}", v.q(cb), v.join_clause(a, b), v.q(cb))))
}

const FULL: &[Template] = &[
    proj_one, proj_two, count_all, aggregate, where_eq, where_cmp, where_like, where_two,
    count_where, agg_where, group_count, group_two, order_by, order_two, superlative, top_n,
    most_common, join_proj, join_where, join_group,
];

const PROJECTION: &[Template] = &[proj_one, proj_two, join_proj];

fn examples_for(
    dbs: &[&Database],
    count: usize,
    templates: &[Template],
    rng: &mut ChaCha8Rng,
) -> Vec<RawExample> {
    let mut out = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        assert!(attempts < 1000 * (count + 1), "synthetic generator cannot fill {count} examples");
        let db = dbs[rng.gen_range(0..dbs.len())];
        let view = View::new(db);
        let t = rng.gen_range(0..db.schema.tables.len());
        let template = templates[rng.gen_range(0..templates.len())];
        let Some((mut question, query)) = template(&view, t, rng) else {
            continue;
        };
        if rng.gen_bool(0.2) {
            question = format!("{} {question}", FILLERS.choose(rng).expect("fillers"));
        }
        // repeated questions would leak between epochs without adding signal
        if !seen.insert((db.schema.db_id.clone(), question.clone())) {
            continue;
        }
        out.push(RawExample { db_id: db.schema.db_id.clone(), question, query });
    }
    out
}

/// Deterministic corpus for `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Corpus {
    assert!(spec.schemas >= 1 && spec.rows >= 1, "synthetic spec counts must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut databases = BTreeMap::new();
    let mut order = Vec::new();
    for k in 0..spec.schemas {
        let db = generate_schema(&mut rng, format!("synth_{k:03}"), spec.rows);
        order.push(db.schema.db_id.clone());
        databases.insert(db.schema.db_id.clone(), db);
    }
    let held = spec.heldout_schemas.min(spec.schemas.saturating_sub(1));
    let split = spec.schemas - held;
    let templates = if spec.projection_only { PROJECTION } else { FULL };
    let train_dbs: Vec<&Database> = order[..split].iter().map(|id| &databases[id]).collect();
    let held_dbs: Vec<&Database> = if held == 0 {
        train_dbs.clone()
    } else {
        order[split..].iter().map(|id| &databases[id]).collect()
    };
    let train = examples_for(&train_dbs, spec.train, templates, &mut rng);
    let heldout = examples_for(&held_dbs, spec.heldout, templates, &mut rng);
    Corpus { databases, train, heldout }
}
