//! Discriminative re-ranking of beam candidates by the set of constants they
//! select: a graph network over the induced sub-graph, plus an alignment
//! summary of which question words point at selected or unselected
//! constants.
//!
//! The re-ranker reads the parser's question states and link matrix as
//! frozen values and owns every parameter it trains (`rerank.*`).

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, EdgeType, NodeId, NodeKind};
use crate::linking::{constant_embeddings, init_embeddings, kind_row};
use crate::model::{Instance, ModelConfig};
use crate::neural::{ff, ff_rows, init_ff, init_gnn, GnnLayer, ParameterStore, Tape, Var};
use crate::parser::{BeamCandidate, Encoding};
use crate::schema::Schema;
use crate::sql::{extract_constants, SqlQuery};

pub fn init_reranker<R: Rng>(store: &mut ParameterStore, c: &ModelConfig, vocab_size: usize, rng: &mut R) {
    let w = c.rerank_width;
    let ctx = c.context_width();
    init_embeddings(store, "rerank", vocab_size, w, rng);
    init_ff(store, "rerank.in", &[w + ctx, w, w], rng);
    init_gnn(store, "rerank.gnn", w, &EdgeType::ALL, rng);
    store.init_vector("rerank.global_init", w, rng);
    store.init_vector("rerank.w_att", w + ctx, rng);
    init_ff(store, "rerank.out", &[w + w + ctx, w, w], rng);
    store.init_vector("rerank.w", w, rng);
}

/// Frozen copies of the parser outputs the re-ranker reads.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankInputs {
    pub num_words: usize,
    pub ctx_width: usize,
    /// Question states, row-major `words x ctx_width`.
    pub states: Vec<f64>,
    /// `p_link(v | x_i)`, row-major `words x constants`.
    pub p_word: Vec<f64>,
    /// `p_link(x_i | v)`, row-major `words x constants`.
    pub p_const: Vec<f64>,
}

impl RerankInputs {
    pub fn from_encoding(tape: &Tape, enc: &Encoding) -> Self {
        let (n, w) = tape.dims(enc.state_rows);
        Self {
            num_words: n,
            ctx_width: w,
            states: tape.value(enc.state_rows).to_vec(),
            p_word: tape.value(enc.link.p_word).to_vec(),
            p_const: tape.value(enc.link.p_const).to_vec(),
        }
    }
}

/// Per-example pieces that do not depend on the candidate: frozen inputs as
/// tape constants, node input features, and the private constant embeddings.
#[derive(Clone, Debug)]
pub struct RerankContext {
    states: Var,
    p_word: Var,
    /// `[r_v; h̄_v]` for constants then cells, in encoder-graph order.
    node_inputs: Var,
    /// Private `r_v`, one row per constant.
    pub r: Var,
}

pub fn prepare(tape: &mut Tape, inst: &Instance, inputs: &RerankInputs) -> Result<RerankContext> {
    let n = inputs.num_words;
    let v = inst.num_constants();
    let states = tape.constant(inputs.states.clone(), n, inputs.ctx_width);
    let p_word = tape.constant(inputs.p_word.clone(), n, v);
    let p_const = tape.constant(inputs.p_const.clone(), n, v);
    let r = constant_embeddings(tape, "rerank", &inst.link.constants)?;
    let pt = tape.transpose(p_const);
    let hbar = tape.matmul(pt, states)?;
    let mut rows = vec![tape.concat_cols(&[r, hbar])?];
    if !inst.cells.is_empty() {
        let kinds = tape.param("rerank.kind")?;
        let k = tape.row(kinds, kind_row(NodeKind::CellValue));
        let w = tape.rows(k);
        let k = tape.reshape(k, 1, w)?;
        for c in &inst.cells {
            let words: Vec<usize> = c.words.iter().copied().collect();
            let h = tape.rows_mean(states, &words)?;
            let h = tape.reshape(h, 1, inputs.ctx_width)?;
            rows.push(tape.concat_cols(&[k, h])?);
        }
    }
    let node_inputs = tape.concat_rows(&rows)?;
    Ok(RerankContext { states, p_word, node_inputs, r })
}

/// The sub-graph nodes a candidate is scored on: its constants plus cells of
/// its selected columns (the global node is added by the graph).
pub fn selected_nodes(inst: &Instance, constants: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
    let mut keep = constants.clone();
    keep.extend(
        inst.cells
            .iter()
            .filter(|c| constants.contains(&c.column))
            .map(|c| c.node),
    );
    keep
}

/// Intermediate products of scoring one candidate.
#[derive(Clone, Copy, Debug)]
pub struct ScoreParts {
    /// Final global-node state of the sub-graph.
    pub f_u: Var,
    /// `phi_v`, one row per constant.
    pub phi: Var,
    /// Pooled alignment vector.
    pub e_align: Var,
    pub logit: Var,
}

/// Scores the constant set `selected` with constant embeddings `r` (normally
/// `ctx.r`).
pub fn score_with(
    tape: &mut Tape,
    cfg: &ModelConfig,
    inst: &Instance,
    ctx: &RerankContext,
    r: Var,
    selected: &BTreeSet<NodeId>,
) -> Result<ScoreParts> {
    let v = inst.num_constants();
    if let Some(bad) = selected.iter().find(|id| inst.constant_index(**id).is_none()) {
        return Err(Error::Graph(format!("candidate constant {bad:?} is not in the graph")));
    }
    let keep = selected_nodes(inst, selected);
    let sub = induced_subgraph(&inst.global_graph, &keep)?;
    let m = sub.num_nodes() - 1;

    let mut f0_rows = Vec::with_capacity(2);
    if m > 0 {
        let gather: Rc<[(usize, usize)]> = sub.nodes()[..m]
            .iter()
            .enumerate()
            .map(|(k, node)| (k, inst.graph.position(node.id).expect("sub-graph node")))
            .collect();
        // constant rows take `r` (possibly substituted) in place of ctx.r
        let x = if r == ctx.r {
            ctx.node_inputs
        } else {
            let w = tape.cols(r);
            let total = tape.cols(ctx.node_inputs);
            let rest = tape.rows(ctx.node_inputs);
            let h = tape.constant(
                tape.value(ctx.node_inputs)
                    .chunks_exact(total)
                    .flat_map(|row| row[w..].to_vec())
                    .collect(),
                rest,
                total - w,
            );
            let hc = tape.slice_rows(h, 0, v);
            let top = tape.concat_cols(&[r, hc])?;
            if rest > v {
                let bottom = tape.slice_rows(ctx.node_inputs, v, rest - v);
                tape.concat_rows(&[top, bottom])?
            } else {
                top
            }
        };
        let xs = tape.scatter_rows(x, gather, m);
        f0_rows.push(ff_rows(tape, "rerank.in", xs)?);
    }
    let init = tape.param("rerank.global_init")?;
    let width = tape.rows(init);
    f0_rows.push(tape.reshape(init, 1, width)?);
    let f0 = tape.concat_rows(&f0_rows)?;
    let f = GnnLayer::new("rerank.gnn", cfg.rerank_steps).propagate(tape, f0, &sub)?;
    let f_u = tape.row(f, m);

    // phi_v = f_v for selected constants, r_v otherwise
    let mut from_r = Vec::new();
    let mut from_f = Vec::new();
    for (k, id) in inst.constants.iter().enumerate() {
        match sub.position(*id) {
            Some(p) if selected.contains(id) => from_f.push((k, p)),
            _ => from_r.push((k, k)),
        }
    }
    let a = tape.scatter_rows(r, from_r.into(), v);
    let b = tape.scatter_rows(f, from_f.into(), v);
    let phi = tape.add(a, b)?;

    let l = tape.matmul(ctx.p_word, phi)?;
    let ea = tape.concat_cols(&[ctx.states, l])?;
    let w_att = tape.param("rerank.w_att")?;
    let scores = tape.matvec(ea, w_att)?;
    let beta = tape.softmax(scores, None)?;
    let eat = tape.transpose(ea);
    let e_align = tape.matvec(eat, beta)?;

    let x = tape.concat(&[f_u, e_align]);
    let hidden = ff(tape, "rerank.out", x)?;
    let w = tape.param("rerank.w")?;
    let logit = tape.dot(w, hidden)?;
    Ok(ScoreParts { f_u, phi, e_align, logit })
}

/// Logit `s = w . FF([f_U; e_align])` for a candidate's constant set.
pub fn rerank_score(
    tape: &mut Tape,
    cfg: &ModelConfig,
    inst: &Instance,
    ctx: &RerankContext,
    selected: &BTreeSet<NodeId>,
) -> Result<Var> {
    Ok(score_with(tape, cfg, inst, ctx, ctx.r, selected)?.logit)
}

/// `-log softmax(logits)[gold]`.
pub fn rerank_loss(tape: &mut Tape, logits: &[Var], gold: usize) -> Result<Var> {
    if logits.len() < 2 {
        return Err(Error::Invalid("re-ranking loss needs at least two candidates".into()));
    }
    if gold >= logits.len() {
        return Err(Error::Invalid(format!("gold index {gold} out of {} candidates", logits.len())));
    }
    let v = tape.concat(logits);
    let lp = tape.log_softmax_at(v, None, gold)?;
    Ok(tape.scale(lp, -1.0))
}

/// Index of the final choice: highest re-rank logit, then highest decoder
/// log-probability, then earliest beam position. Missing logits count as 0.
pub fn select_final(candidates: &[BeamCandidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to select from".into()));
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        let (lc, lb) = (c.rerank_logit.unwrap_or(0.0), b.rerank_logit.unwrap_or(0.0));
        if lc > lb || (lc == lb && c.log_prob > b.log_prob) {
            best = i;
        }
    }
    Ok(best)
}

/// `1.0` exactly on the constants of `gold`, `0.0` elsewhere.
pub fn oracle_relevance(gold: &SqlQuery, schema: &Schema, inst: &Instance) -> Vec<f64> {
    inst.indicator(&extract_constants(gold, schema))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::neural::check_gradients;
    use crate::parser::{encode, Relevance};
    use crate::schema::fixtures::concert_singer;
    use crate::sql::parse_sql;
    use crate::text::Vocab;

    fn small_config() -> ModelConfig {
        ModelConfig {
            emb: 4,
            hidden: 3,
            link_hidden: 3,
            gate_width: 3,
            decoder: 4,
            attention: 3,
            rerank_width: 3,
            ..ModelConfig::default()
        }
    }

    fn toy() -> (Model, Schema, Instance, RerankInputs) {
        let schema = crate::schema::Schema {
            db_id: "toy".into(),
            tables: vec!["singer".into(), "song".into()],
            columns: vec![
                crate::schema::fixtures::col(0, "name", crate::schema::ValueType::Text),
                crate::schema::fixtures::col(1, "title", crate::schema::ValueType::Text),
            ],
            primary_keys: BTreeSet::new(),
            foreign_keys: BTreeSet::new(),
        };
        let vocab = Vocab::from_words(["singer", "name", "song", "title", "hey"]);
        let model = Model::new(small_config(), vocab, 5).unwrap();
        let tokens: Vec<String> = ["singer", "name", "hey"].iter().map(|s| s.to_string()).collect();
        let contents = vec![(1, vec!["Hey Jude".to_string()])];
        let inst = Instance::new(&schema, tokens, &contents, &model.vocab).unwrap();
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let inputs = RerankInputs::from_encoding(&tape, &enc);
        (model, schema, inst, inputs)
    }

    fn set(ids: &[NodeId]) -> BTreeSet<NodeId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn unselected_phi_is_raw_embedding() {
        let (model, _, inst, inputs) = toy();
        let mut tape = Tape::inference(&model.store);
        let ctx = prepare(&mut tape, &inst, &inputs).unwrap();
        let sel = set(&[NodeId::table(0), NodeId::column(0)]);
        let parts = score_with(&mut tape, &model.config, &inst, &ctx, ctx.r, &sel).unwrap();
        let w = model.config.rerank_width;
        for (k, id) in inst.constants.iter().enumerate() {
            let phi = &tape.value(parts.phi)[k * w..(k + 1) * w];
            let r = &tape.value(ctx.r)[k * w..(k + 1) * w];
            assert_eq!(phi == r, !sel.contains(id), "{id:?}");
        }
    }

    #[test]
    fn full_selection_scores_full_graph() {
        let (_, _, inst, _) = toy();
        let all: BTreeSet<NodeId> = inst.constants.iter().copied().collect();
        let keep = selected_nodes(&inst, &all);
        let sub = induced_subgraph(&inst.global_graph, &keep).unwrap();
        assert_eq!(sub.nodes(), inst.global_graph.nodes());
        assert_eq!(sub.edges().len(), inst.global_graph.edges().len());
    }

    #[test]
    fn equal_sets_get_bitwise_equal_logits() {
        let (model, _, inst, inputs) = toy();
        let mut tape = Tape::inference(&model.store);
        let ctx = prepare(&mut tape, &inst, &inputs).unwrap();
        let s = set(&[NodeId::table(1), NodeId::column(1)]);
        let a = rerank_score(&mut tape, &model.config, &inst, &ctx, &s).unwrap();
        let b = rerank_score(&mut tape, &model.config, &inst, &ctx, &s.clone()).unwrap();
        assert_eq!(tape.scalar(a).to_bits(), tape.scalar(b).to_bits());
        let empty = rerank_score(&mut tape, &model.config, &inst, &ctx, &BTreeSet::new()).unwrap();
        assert!(tape.scalar(empty).is_finite());
    }

    #[test]
    fn unselected_embedding_does_not_reach_subgraph_state() {
        let (model, _, inst, inputs) = toy();
        let mut tape = Tape::inference(&model.store);
        let ctx = prepare(&mut tape, &inst, &inputs).unwrap();
        let sel = set(&[NodeId::table(0), NodeId::column(0)]);
        let base = score_with(&mut tape, &model.config, &inst, &ctx, ctx.r, &sel).unwrap();
        let w = model.config.rerank_width;
        let mut r2 = tape.value(ctx.r).to_vec();
        let other = inst.constant_index(NodeId::column(1)).unwrap();
        r2[other * w] += 0.75;
        let rv = tape.constant(r2, inst.num_constants(), w);
        let moved = score_with(&mut tape, &model.config, &inst, &ctx, rv, &sel).unwrap();
        assert_eq!(tape.value(base.f_u), tape.value(moved.f_u));
        assert_ne!(tape.value(base.e_align), tape.value(moved.e_align));
    }

    #[test]
    fn rerank_score_gradients() {
        let (model, _, inst, inputs) = toy();
        let rerank: Vec<String> = model.store.names().filter(|n| n.starts_with("rerank.")).cloned().collect();
        let names: Vec<&str> = rerank.iter().map(String::as_str).collect();
        let sel = set(&[NodeId::table(1), NodeId::column(1)]);
        let report = check_gradients(&model.store, 1e-5, Some(&names), None, |tape| {
            let ctx = prepare(tape, &inst, &inputs)?;
            rerank_score(tape, &model.config, &inst, &ctx, &sel)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn rerank_loss_leaves_parser_gradients_zero() {
        let (model, _, inst, inputs) = toy();
        let mut tape = Tape::new(&model.store);
        let ctx = prepare(&mut tape, &inst, &inputs).unwrap();
        let sets = [
            set(&[NodeId::table(0), NodeId::column(0)]),
            set(&[NodeId::table(1), NodeId::column(1)]),
            set(&[NodeId::table(0)]),
        ];
        let logits: Vec<Var> = sets
            .iter()
            .map(|s| rerank_score(&mut tape, &model.config, &inst, &ctx, s).unwrap())
            .collect();
        let loss = rerank_loss(&mut tape, &logits, 1).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut touched = 0;
        for (name, g) in grads.iter() {
            let zero = g.data.iter().all(|&x| x == 0.0);
            if Model::is_rerank_param(name) {
                touched += usize::from(!zero);
            } else {
                assert!(zero, "{name} received gradient");
            }
        }
        assert!(touched > 0);
    }

    fn loss_of(logits: &[f64], gold: usize) -> f64 {
        let store = ParameterStore::new();
        let mut tape = Tape::inference(&store);
        let vs: Vec<Var> = logits.iter().map(|&x| tape.scalar_const(x)).collect();
        let l = rerank_loss(&mut tape, &vs, gold).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn rerank_loss_anchors() {
        assert!((loss_of(&[0.3; 11], 4) - 11f64.ln()).abs() < 1e-12);
        assert!((loss_of(&[1.0, 1.0], 0) - 2f64.ln()).abs() < 1e-12);
        assert!(loss_of(&[25.0, 0.0, 4.0, -3.0], 0) < 1e-8);
        let store = ParameterStore::new();
        let mut tape = Tape::inference(&store);
        let one = [tape.scalar_const(0.0)];
        assert!(rerank_loss(&mut tape, &one, 0).is_err());
    }

    fn cand(logit: Option<f64>, lp: f64) -> BeamCandidate {
        BeamCandidate {
            decisions: vec![],
            query: SqlQuery::default(),
            log_prob: lp,
            constants: BTreeSet::new(),
            rerank_logit: logit,
        }
    }

    #[test]
    fn select_final_tie_breaks() {
        assert!(select_final(&[]).is_err());
        assert_eq!(select_final(&[cand(Some(0.2), -3.0)]).unwrap(), 0);
        assert_eq!(select_final(&[cand(Some(1.0), -3.0), cand(Some(1.0), -1.0)]).unwrap(), 1);
        assert_eq!(select_final(&[cand(Some(0.0), -1.0), cand(Some(1.0), -5.0), cand(Some(0.0), -0.5)]).unwrap(), 1);
        assert_eq!(select_final(&[cand(Some(2.0), -1.0), cand(Some(2.0), -1.0)]).unwrap(), 0);
    }

    #[test]
    fn oracle_relevance_marks_gold_constants() {
        let s = concert_singer();
        let vocab = Vocab::from_words(["name"]);
        let inst = Instance::new(&s, vec!["name".into()], &[], &vocab).unwrap();
        let gold = parse_sql("SELECT singer.name FROM singer", &s).unwrap();
        let rho = oracle_relevance(&gold, &s, &inst);
        for (k, id) in inst.constants.iter().enumerate() {
            let want = *id == NodeId::table(0) || *id == NodeId::column(2);
            assert_eq!(rho[k], if want { 1.0 } else { 0.0 });
        }
        assert_eq!(rho.iter().sum::<f64>(), extract_constants(&gold, &s).len() as f64);
    }
}
