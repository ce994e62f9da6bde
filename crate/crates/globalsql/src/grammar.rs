//! The SQL grammar used for top-down decoding, and the derivation state
//! machine that tracks the expansion frontier, legal choices and the query
//! built so far.
//!
//! FROM is expanded first so that column choices can be restricted to the
//! tables already selected.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeKind};
use crate::schema::Schema;
use crate::sql::{loose_exact_match, Agg, CmpOp, ColumnUnit, Condition, OrderItem, SqlQuery};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Symbol {
    Query,
    Tables,
    SelItems,
    SelItem,
    Agg,
    Where,
    Conds,
    Cond,
    Op,
    GroupBy,
    GroupCols,
    OrderBy,
    OrderItems,
    OrderItem,
    Dir,
    Limit,
    /// Filled by choosing a table constant.
    Table,
    /// Filled by choosing a column constant.
    Column,
    /// Filled by pointing at a question word or a matched cell.
    Value,
    /// Filled by pointing at a question word that is a count.
    LimitValue,
}

impl Symbol {
    pub fn is_nonterminal_rule_slot(self) -> bool {
        !matches!(self, Symbol::Table | Symbol::Column | Symbol::Value | Symbol::LimitValue)
    }
}

/// What a rule contributes besides its right-hand side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    None,
    Agg(Agg),
    Op(CmpOp),
    Dir { desc: bool },
    LimitOne,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub lhs: Symbol,
    pub rhs: &'static [Symbol],
    pub action: Action,
}

use Symbol as S;

const RULES: &[(Symbol, &[Symbol], Action)] = &[
    (S::Query, &[S::Tables, S::SelItems, S::Where, S::GroupBy, S::OrderBy, S::Limit], Action::None),
    (S::Tables, &[S::Table], Action::None),
    (S::Tables, &[S::Table, S::Tables], Action::None),
    (S::SelItems, &[S::SelItem], Action::None),
    (S::SelItems, &[S::SelItem, S::SelItems], Action::None),
    (S::SelItem, &[S::Column], Action::None),
    (S::SelItem, &[S::Agg, S::Column], Action::None),
    (S::Agg, &[], Action::Agg(Agg::Count)),
    (S::Agg, &[], Action::Agg(Agg::Sum)),
    (S::Agg, &[], Action::Agg(Agg::Avg)),
    (S::Agg, &[], Action::Agg(Agg::Min)),
    (S::Agg, &[], Action::Agg(Agg::Max)),
    (S::Where, &[], Action::None),
    (S::Where, &[S::Conds], Action::None),
    (S::Conds, &[S::Cond], Action::None),
    (S::Conds, &[S::Cond, S::Conds], Action::None),
    (S::Cond, &[S::Column, S::Op, S::Value], Action::None),
    (S::Op, &[], Action::Op(CmpOp::Eq)),
    (S::Op, &[], Action::Op(CmpOp::Lt)),
    (S::Op, &[], Action::Op(CmpOp::Gt)),
    (S::Op, &[], Action::Op(CmpOp::Like)),
    (S::GroupBy, &[], Action::None),
    (S::GroupBy, &[S::GroupCols], Action::None),
    (S::GroupCols, &[S::Column], Action::None),
    (S::GroupCols, &[S::Column, S::GroupCols], Action::None),
    (S::OrderBy, &[], Action::None),
    (S::OrderBy, &[S::OrderItems], Action::None),
    (S::OrderItems, &[S::OrderItem], Action::None),
    (S::OrderItems, &[S::OrderItem, S::OrderItems], Action::None),
    (S::OrderItem, &[S::Column, S::Dir], Action::None),
    (S::OrderItem, &[S::Agg, S::Column, S::Dir], Action::None),
    (S::Dir, &[], Action::Dir { desc: false }),
    (S::Dir, &[], Action::Dir { desc: true }),
    (S::Limit, &[], Action::None),
    (S::Limit, &[], Action::LimitOne),
    (S::Limit, &[S::LimitValue], Action::None),
];

pub mod rule {
    pub const QUERY: usize = 0;
    pub const TABLES_ONE: usize = 1;
    pub const TABLES_MORE: usize = 2;
    pub const SEL_ONE: usize = 3;
    pub const SEL_MORE: usize = 4;
    pub const SEL_COLUMN: usize = 5;
    pub const SEL_AGG: usize = 6;
    pub const AGG_FIRST: usize = 7;
    pub const WHERE_NONE: usize = 12;
    pub const WHERE_SOME: usize = 13;
    pub const CONDS_ONE: usize = 14;
    pub const CONDS_MORE: usize = 15;
    pub const COND: usize = 16;
    pub const OP_FIRST: usize = 17;
    pub const GROUP_NONE: usize = 21;
    pub const GROUP_SOME: usize = 22;
    pub const GROUP_ONE: usize = 23;
    pub const GROUP_MORE: usize = 24;
    pub const ORDER_NONE: usize = 25;
    pub const ORDER_SOME: usize = 26;
    pub const ORDER_ONE: usize = 27;
    pub const ORDER_MORE: usize = 28;
    pub const ORDER_COLUMN: usize = 29;
    pub const ORDER_AGG: usize = 30;
    pub const ASC: usize = 31;
    pub const DESC: usize = 32;
    pub const LIMIT_NONE: usize = 33;
    pub const LIMIT_ONE: usize = 34;
    pub const LIMIT_VALUE: usize = 35;
}

/// Production rules plus an optional set of disabled rules and whether `*`
/// may be selected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    rules: Vec<Rule>,
    enabled: Vec<bool>,
    allow_star: bool,
}

impl Default for Grammar {
    fn default() -> Self {
        Self::sql()
    }
}

impl Grammar {
    /// The full grammar.
    pub fn sql() -> Self {
        let rules: Vec<Rule> = RULES
            .iter()
            .map(|&(lhs, rhs, action)| Rule { lhs, rhs, action })
            .collect();
        let enabled = vec![true; rules.len()];
        Self { rules, enabled, allow_star: true }
    }

    /// `SELECT columns FROM tables` only, without `*`: a query is then fixed
    /// (up to loose match) by its set of constants.
    pub fn projection_only() -> Self {
        use rule::*;
        Self::sql()
            .without(&[SEL_AGG, WHERE_SOME, GROUP_SOME, ORDER_SOME, LIMIT_ONE, LIMIT_VALUE])
            .with_star(false)
    }

    pub fn without(mut self, rules: &[usize]) -> Self {
        for &r in rules {
            self.enabled[r] = false;
        }
        self
    }

    pub fn with_star(mut self, allow: bool) -> Self {
        self.allow_star = allow;
        self
    }

    pub fn num_rules(&self) -> usize {
        self.rules.len()
    }

    pub fn rule(&self, id: usize) -> &Rule {
        &self.rules[id]
    }

    pub fn is_enabled(&self, id: usize) -> bool {
        self.enabled[id]
    }

    pub fn allows_star(&self) -> bool {
        self.allow_star
    }

    /// Enabled rule ids expanding `lhs`.
    pub fn rules_for(&self, lhs: Symbol) -> impl Iterator<Item = usize> + '_ {
        self.rules
            .iter()
            .enumerate()
            .filter(move |(i, r)| r.lhs == lhs && self.enabled[*i])
            .map(|(i, _)| i)
    }

    /// Stable textual form of a rule, used in checkpoints and debugging.
    pub fn describe(&self, id: usize) -> String {
        let r = &self.rules[id];
        let rhs: Vec<String> = r.rhs.iter().map(|s| format!("{s:?}")).collect();
        let act = match r.action {
            Action::None => String::new(),
            Action::Agg(a) => format!(" {}", a.keyword()),
            Action::Op(o) => format!(" {}", o.symbol()),
            Action::Dir { desc } => (if desc { " DESC" } else { " ASC" }).to_string(),
            Action::LimitOne => " 1".to_string(),
        };
        format!("{:?} ->{act} {}", r.lhs, rhs.join(" "))
    }
}

/// A pointer target for a literal value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ValueRef {
    /// A question word, by position.
    Token(usize),
    /// A matched cell, by cell-node index.
    Cell(usize),
}

/// One decoding decision. The derived order is the tie-break order for
/// equally scored beam candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Decision {
    Rule(usize),
    Constant(NodeId),
    Value(ValueRef),
}

/// A frontier entry: the symbol to expand and the rule that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub symbol: Symbol,
    pub parent: Option<usize>,
}

/// The per-question facts legality depends on.
#[derive(Clone, Copy, Debug)]
pub struct DecodeContext<'a> {
    pub schema: &'a Schema,
    pub tokens: &'a [String],
    /// Cell texts, indexed by cell-node index.
    pub cells: &'a [String],
}

impl DecodeContext<'_> {
    pub fn value_text(&self, v: ValueRef) -> Option<&str> {
        match v {
            ValueRef::Token(i) => self.tokens.get(i).map(String::as_str),
            ValueRef::Cell(i) => self.cells.get(i).map(String::as_str),
        }
    }

    fn connected(&self, t: usize, chosen: &[usize]) -> bool {
        chosen.is_empty() || chosen.iter().any(|&p| self.schema.join_pair(p, t).is_some())
    }

    /// Whether `k` more tables can still be appended to `chosen`.
    fn can_extend(&self, chosen: &mut Vec<usize>, k: usize) -> bool {
        if k == 0 {
            return true;
        }
        for t in 0..self.schema.tables.len() {
            if !chosen.contains(&t) && self.connected(t, chosen) {
                chosen.push(t);
                let ok = self.can_extend(chosen, k - 1);
                chosen.pop();
                if ok {
                    return true;
                }
            }
        }
        false
    }
}

/// A partial derivation: decisions so far, the frontier stack and the query
/// under construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivationState {
    stack: Vec<Slot>,
    decisions: Vec<Decision>,
    query: SqlQuery,
    agg: Option<Agg>,
    column: Option<usize>,
    op: Option<CmpOp>,
}

impl Default for DerivationState {
    fn default() -> Self {
        Self::new()
    }
}

impl DerivationState {
    pub fn new() -> Self {
        Self {
            stack: vec![Slot { symbol: Symbol::Query, parent: None }],
            decisions: Vec::new(),
            query: SqlQuery::default(),
            agg: None,
            column: None,
            op: None,
        }
    }

    pub fn frontier(&self) -> Option<Slot> {
        self.stack.last().copied()
    }

    pub fn is_complete(&self) -> bool {
        self.stack.is_empty()
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn query(&self) -> &SqlQuery {
        &self.query
    }

    /// Legal decisions at the frontier, in [`Decision`] order. Empty when the
    /// derivation is complete or stuck.
    pub fn legal(&self, g: &Grammar, ctx: &DecodeContext) -> Vec<Decision> {
        let Some(slot) = self.frontier() else {
            return Vec::new();
        };
        let q = &self.query;
        match slot.symbol {
            Symbol::Table => {
                let need_more = slot.parent == Some(rule::TABLES_MORE);
                let mut chosen = q.from.clone();
                (0..ctx.schema.tables.len())
                    .filter(|&t| {
                        if chosen.contains(&t) || !ctx.connected(t, &chosen) {
                            return false;
                        }
                        if !need_more {
                            return true;
                        }
                        chosen.push(t);
                        let ok = ctx.can_extend(&mut chosen, 1);
                        chosen.pop();
                        ok
                    })
                    .map(|t| Decision::Constant(NodeId::table(t)))
                    .collect()
            }
            Symbol::Column => {
                let star_ok = g.allow_star
                    && match slot.parent {
                        Some(rule::SEL_COLUMN) => true,
                        Some(rule::SEL_AGG) | Some(rule::ORDER_AGG) => self.agg == Some(Agg::Count),
                        _ => false,
                    };
                ctx.schema
                    .columns
                    .iter()
                    .enumerate()
                    .filter(|(c, col)| match col.table {
                        None => star_ok,
                        Some(t) => q.from.contains(&t) && !self.duplicate_column(slot, *c),
                    })
                    .filter(|(c, col)| !(col.is_star() && self.duplicate_column(slot, *c)))
                    .map(|(c, _)| Decision::Constant(NodeId::column(c)))
                    .collect()
            }
            Symbol::Value => (0..ctx.tokens.len())
                .map(|i| Decision::Value(ValueRef::Token(i)))
                .chain((0..ctx.cells.len()).map(|i| Decision::Value(ValueRef::Cell(i))))
                .collect(),
            Symbol::LimitValue => (0..ctx.tokens.len())
                .filter(|&i| is_count(&ctx.tokens[i]))
                .map(|i| Decision::Value(ValueRef::Token(i)))
                .collect(),
            sym => g
                .rules_for(sym)
                .filter(|&r| self.rule_feasible(g, r, ctx))
                .map(Decision::Rule)
                .collect(),
        }
    }

    fn duplicate_column(&self, slot: Slot, c: usize) -> bool {
        let q = &self.query;
        match slot.parent {
            Some(rule::SEL_COLUMN) => q.select.contains(&ColumnUnit { agg: None, column: c }),
            Some(rule::SEL_AGG) => q.select.contains(&ColumnUnit { agg: self.agg, column: c }),
            Some(rule::GROUP_ONE) | Some(rule::GROUP_MORE) => q.group_by.contains(&c),
            _ => false,
        }
    }

    /// Columns that could still fill a SELECT unit with aggregate `agg`.
    fn free_select(&self, g: &Grammar, ctx: &DecodeContext, agg: Option<Agg>) -> usize {
        let q = &self.query;
        ctx.schema
            .columns
            .iter()
            .enumerate()
            .filter(|(c, col)| {
                let usable = match col.table {
                    None => g.allow_star && (agg.is_none() || agg == Some(Agg::Count)),
                    Some(t) => q.from.contains(&t),
                };
                usable && !q.select.contains(&ColumnUnit { agg, column: *c })
            })
            .count()
    }

    /// Aggregates whose rule is enabled.
    fn enabled_aggs<'g>(g: &'g Grammar) -> impl Iterator<Item = Agg> + 'g {
        Agg::ALL
            .into_iter()
            .enumerate()
            .filter(|(i, _)| g.is_enabled(rule::AGG_FIRST + i))
            .map(|(_, a)| a)
    }

    fn free_select_units(&self, g: &Grammar, ctx: &DecodeContext) -> usize {
        let plain = if g.is_enabled(rule::SEL_COLUMN) { self.free_select(g, ctx, None) } else { 0 };
        let aggregated: usize = if g.is_enabled(rule::SEL_AGG) {
            Self::enabled_aggs(g).map(|a| self.free_select(g, ctx, Some(a))).sum()
        } else {
            0
        };
        plain + aggregated
    }

    fn free_group_columns(&self, ctx: &DecodeContext) -> usize {
        let q = &self.query;
        ctx.schema
            .columns
            .iter()
            .enumerate()
            .filter(|(c, col)| col.table.is_some_and(|t| q.from.contains(&t)) && !q.group_by.contains(c))
            .count()
    }

    /// Slots below the frontier that are still waiting for `symbols`.
    fn pending(&self, symbols: &[Symbol]) -> usize {
        let below = self.stack.len().saturating_sub(1);
        self.stack[..below].iter().filter(|s| symbols.contains(&s.symbol)).count()
    }

    /// Whether rule `r` can still lead to a complete derivation. SELECT units
    /// and GROUP BY columns must be distinct, so their pools can run dry.
    fn rule_feasible(&self, g: &Grammar, r: usize, ctx: &DecodeContext) -> bool {
        let mut chosen = self.query.from.clone();
        let sel_need = || self.pending(&[Symbol::SelItem, Symbol::SelItems]);
        let group_need = || self.pending(&[Symbol::GroupCols]);
        match r {
            rule::TABLES_ONE => ctx.can_extend(&mut chosen, 1),
            rule::TABLES_MORE => ctx.can_extend(&mut chosen, 2),
            rule::SEL_ONE => self.free_select_units(g, ctx) > sel_need(),
            rule::SEL_MORE => self.free_select_units(g, ctx) > sel_need() + 1,
            rule::SEL_COLUMN => self.free_select(g, ctx, None) > 0,
            rule::SEL_AGG => Self::enabled_aggs(g).any(|a| self.free_select(g, ctx, Some(a)) > 0),
            a if (rule::AGG_FIRST..rule::AGG_FIRST + Agg::ALL.len()).contains(&a)
                && self.frontier().and_then(|s| s.parent) == Some(rule::SEL_AGG) =>
            {
                self.free_select(g, ctx, Some(Agg::ALL[a - rule::AGG_FIRST])) > 0
            }
            rule::GROUP_SOME => self.free_group_columns(ctx) > 0,
            rule::GROUP_ONE => self.free_group_columns(ctx) > group_need(),
            rule::GROUP_MORE => self.free_group_columns(ctx) > group_need() + 1,
            rule::LIMIT_VALUE => ctx.tokens.iter().any(|t| is_count(t)),
            rule::WHERE_SOME => !ctx.tokens.is_empty() || !ctx.cells.is_empty(),
            _ => true,
        }
    }

    /// Applies `d` after checking it is legal.
    pub fn apply(&mut self, g: &Grammar, ctx: &DecodeContext, d: Decision) -> Result<()> {
        if !self.legal(g, ctx).contains(&d) {
            return Err(Error::Invalid(format!(
                "decision {d:?} is not legal at {:?} after {} decisions",
                self.frontier(),
                self.decisions.len()
            )));
        }
        self.apply_unchecked(g, ctx, d);
        Ok(())
    }

    /// Applies a decision taken from [`legal`](Self::legal) for this state.
    pub fn apply_unchecked(&mut self, g: &Grammar, ctx: &DecodeContext, d: Decision) {
        let slot = self.stack.pop().expect("apply on a complete derivation");
        self.decisions.push(d);
        match d {
            Decision::Rule(r) => {
                let rule = g.rule(r);
                for &sym in rule.rhs.iter().rev() {
                    self.stack.push(Slot { symbol: sym, parent: Some(r) });
                }
                match rule.action {
                    Action::Agg(a) => self.agg = Some(a),
                    Action::Op(o) => self.op = Some(o),
                    Action::Dir { desc } => {
                        if let Some(column) = self.column.take() {
                            self.query.order_by.push(OrderItem {
                                unit: ColumnUnit { agg: self.agg.take(), column },
                                desc,
                            });
                        }
                    }
                    Action::LimitOne => self.query.limit = Some(1),
                    Action::None => {
                        if r == rule::SEL_COLUMN || r == rule::ORDER_COLUMN {
                            self.agg = None;
                        }
                    }
                }
            }
            Decision::Constant(id) => match (id.kind, slot.parent) {
                (NodeKind::Table, _) => self.query.from.push(id.index),
                (NodeKind::Column, Some(rule::SEL_COLUMN)) => self
                    .query
                    .select
                    .push(ColumnUnit { agg: None, column: id.index }),
                (NodeKind::Column, Some(rule::SEL_AGG)) => self
                    .query
                    .select
                    .push(ColumnUnit { agg: self.agg.take(), column: id.index }),
                (NodeKind::Column, Some(rule::GROUP_ONE) | Some(rule::GROUP_MORE)) => {
                    self.query.group_by.push(id.index)
                }
                (NodeKind::Column, _) => self.column = Some(id.index),
                _ => {}
            },
            Decision::Value(v) => {
                let text = ctx.value_text(v).unwrap_or_default().to_string();
                if slot.symbol == Symbol::LimitValue {
                    self.query.limit = text.parse().ok();
                } else if let (Some(column), Some(op)) = (self.column.take(), self.op.take()) {
                    let value = if op == CmpOp::Like { format!("%{text}%") } else { text };
                    self.query.conditions.push(Condition { column, op, value });
                }
            }
        }
    }

    /// The finished query, once the frontier is empty.
    pub fn finish(&self) -> Option<&SqlQuery> {
        self.is_complete().then_some(&self.query)
    }
}

fn is_count(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && s.parse::<u64>().is_ok()
}

/// Gold decision sequence for `q`. Tables are reordered so each one joins an
/// earlier one; duplicate SELECT and GROUP BY entries collapse; values must
/// appear verbatim as a question word or a matched cell (LIKE patterns are
/// matched without their `%` wrappers). The result is replayed through the
/// legality checks and must reproduce `q` under loose match.
pub fn gold_derivation(q: &SqlQuery, g: &Grammar, ctx: &DecodeContext) -> Result<Vec<Decision>> {
    use rule::*;
    let schema = ctx.schema;
    q.validate(schema)?;

    let mut tables = vec![q.from[0]];
    let mut rest: Vec<usize> = q.from[1..].to_vec();
    while !rest.is_empty() {
        let k = rest
            .iter()
            .position(|&t| tables.iter().any(|&p| schema.join_pair(p, t).is_some()))
            .ok_or_else(|| Error::Invalid("FROM tables are not connected".into()))?;
        tables.push(rest.remove(k));
    }
    let mut d = vec![Decision::Rule(QUERY)];
    for (k, &t) in tables.iter().enumerate() {
        d.push(Decision::Rule(if k + 1 < tables.len() { TABLES_MORE } else { TABLES_ONE }));
        d.push(Decision::Constant(NodeId::table(t)));
    }

    let mut seen = BTreeSet::new();
    let select: Vec<ColumnUnit> = q.select.iter().copied().filter(|u| seen.insert(*u)).collect();
    let col = |c: usize| Decision::Constant(NodeId::column(c));
    let agg_rule = |a: Agg| Decision::Rule(AGG_FIRST + Agg::ALL.iter().position(|x| *x == a).unwrap());
    for (k, u) in select.iter().enumerate() {
        d.push(Decision::Rule(if k + 1 < select.len() { SEL_MORE } else { SEL_ONE }));
        match u.agg {
            None => d.push(Decision::Rule(SEL_COLUMN)),
            Some(a) => {
                d.push(Decision::Rule(SEL_AGG));
                d.push(agg_rule(a));
            }
        }
        d.push(col(u.column));
    }

    if q.conditions.is_empty() {
        d.push(Decision::Rule(WHERE_NONE));
    } else {
        d.push(Decision::Rule(WHERE_SOME));
        for (k, c) in q.conditions.iter().enumerate() {
            d.push(Decision::Rule(if k + 1 < q.conditions.len() { CONDS_MORE } else { CONDS_ONE }));
            d.push(Decision::Rule(COND));
            d.push(col(c.column));
            d.push(Decision::Rule(OP_FIRST + CmpOp::ALL.iter().position(|x| *x == c.op).unwrap()));
            let want = if c.op == CmpOp::Like {
                c.value.trim_start_matches('%').trim_end_matches('%')
            } else {
                c.value.as_str()
            };
            let v = ctx
                .tokens
                .iter()
                .position(|t| t == want)
                .map(ValueRef::Token)
                .or_else(|| ctx.cells.iter().position(|t| t == want).map(ValueRef::Cell))
                .ok_or_else(|| Error::Invalid(format!("value `{}` is not in the question", c.value)))?;
            d.push(Decision::Value(v));
        }
    }

    let mut seen = BTreeSet::new();
    let group: Vec<usize> = q.group_by.iter().copied().filter(|c| seen.insert(*c)).collect();
    if group.is_empty() {
        d.push(Decision::Rule(GROUP_NONE));
    } else {
        d.push(Decision::Rule(GROUP_SOME));
        for (k, &c) in group.iter().enumerate() {
            d.push(Decision::Rule(if k + 1 < group.len() { GROUP_MORE } else { GROUP_ONE }));
            d.push(col(c));
        }
    }

    if q.order_by.is_empty() {
        d.push(Decision::Rule(ORDER_NONE));
    } else {
        d.push(Decision::Rule(ORDER_SOME));
        for (k, o) in q.order_by.iter().enumerate() {
            d.push(Decision::Rule(if k + 1 < q.order_by.len() { ORDER_MORE } else { ORDER_ONE }));
            match o.unit.agg {
                None => d.push(Decision::Rule(ORDER_COLUMN)),
                Some(a) => {
                    d.push(Decision::Rule(ORDER_AGG));
                    d.push(agg_rule(a));
                }
            }
            d.push(col(o.unit.column));
            d.push(Decision::Rule(if o.desc { DESC } else { ASC }));
        }
    }

    match q.limit {
        None => d.push(Decision::Rule(LIMIT_NONE)),
        Some(1) if g.is_enabled(LIMIT_ONE) => d.push(Decision::Rule(LIMIT_ONE)),
        Some(n) => {
            let i = ctx
                .tokens
                .iter()
                .position(|t| is_count(t) && t.parse::<u64>().ok() == Some(n))
                .ok_or_else(|| Error::Invalid(format!("LIMIT {n} is not in the question")))?;
            d.push(Decision::Rule(LIMIT_VALUE));
            d.push(Decision::Value(ValueRef::Token(i)));
        }
    }

    let mut state = DerivationState::new();
    for &x in &d {
        state.apply(g, ctx, x)?;
    }
    match state.finish() {
        Some(out) if loose_exact_match(out, q) => Ok(d),
        _ => Err(Error::Invalid("gold derivation does not reproduce the query".into())),
    }
}

/// Replays `decisions` from the start symbol and returns the finished query.
pub fn replay(decisions: &[Decision], g: &Grammar, ctx: &DecodeContext) -> Result<SqlQuery> {
    let mut state = DerivationState::new();
    for &d in decisions {
        state.apply(g, ctx, d)?;
    }
    state
        .finish()
        .cloned()
        .ok_or_else(|| Error::Invalid("derivation is incomplete".into()))
}
