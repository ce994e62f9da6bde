//! The base parser: question encoding, gated encoder graph network,
//! grammar-directed decoding with constant selection and value pointing,
//! teacher-forced loss, and beam search.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{gate, gate_inputs};
use crate::grammar::{DecodeContext, Decision, DerivationState, Slot, Symbol, ValueRef};
use crate::graph::{NodeId, NodeKind};
use crate::linking::{kind_row, local_relevance, LinkMatrix};
use crate::model::{Instance, Model};
use crate::neural::tape::log_sum_exp;
use crate::neural::{
    additive_attention, bilstm_encode, ff, lstm_step, prepare_keys, AttentionKeys, GnnLayer,
    LstmState, Tape, Var,
};
use crate::schema::Schema;
use crate::sql::{extract_constants, SqlQuery};

/// What scales the constant embeddings at the encoder input.
#[derive(Clone, Copy, Debug)]
pub enum Relevance<'a> {
    /// The gating network's global relevance.
    Gated,
    /// The local relevance `max_i p_link(v | x_i)`, bypassing the gate.
    Local,
    /// A fixed vector over the constants (e.g. the oracle indicator).
    Fixed(&'a [f64]),
}

/// Forward-pass products shared by decoding, the losses and the re-ranker.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub states: Vec<Var>,
    /// `states` stacked as rows.
    pub state_rows: Var,
    pub keys: AttentionKeys,
    pub link: LinkMatrix,
    /// Constant embeddings `r_v`, one row per constant.
    pub r: Var,
    pub rho_local: Var,
    pub rho_global: Option<Var>,
    /// The relevance that scaled the encoder input.
    pub rho: Var,
    /// Final encoder graph states, constants then cells.
    pub nodes: Var,
    scores_t: Var,
    constant_nodes: Var,
    token_keys: Var,
    cell_keys: Option<Var>,
}

/// Embeds and encodes the question, links it to the constants, computes the
/// relevance and runs the encoder graph network on `h_v^(0) = rho_v r_v`
/// (cells enter unscaled with the cell-kind embedding).
pub fn encode(tape: &mut Tape, model: &Model, inst: &Instance, relevance: Relevance) -> Result<Encoding> {
    let cfg = &model.config;
    let table = tape.param("emb.word")?;
    let words: Vec<Var> = inst.link.word_ids.iter().map(|&i| tape.row(table, i)).collect();
    let states = bilstm_encode(tape, "qenc", &words)?;
    let state_rows = tape.stack_rows(&states)?;
    let keys = prepare_keys(tape, "dec.att", &states)?;

    let wrows = tape.stack_rows(&words)?;
    let r = crate::linking::constant_embeddings(tape, "emb", &inst.link.constants)?;
    let scores = crate::linking::link_scores(tape, wrows, r, &inst.link)?;
    let link = LinkMatrix::from_scores(tape, scores)?;
    let rho_local = local_relevance(tape, &link);

    let v = inst.num_constants();
    let (rho, rho_global) = match relevance {
        Relevance::Gated => {
            let gi = gate_inputs(tape, &link, state_rows, r, rho_local, &inst.global_graph, &inst.cells)?;
            let g = gate(tape, &inst.global_graph, &gi, v, cfg.gate_steps)?;
            (g, Some(g))
        }
        Relevance::Local => (rho_local, None),
        Relevance::Fixed(values) => {
            if values.len() != v {
                return Err(Error::Shape { op: "encode", left: vec![values.len()], right: vec![v] });
            }
            (tape.vector(values.to_vec()), None)
        }
    };

    let scaled = tape.scale_rows(r, rho)?;
    let h0 = if inst.cells.is_empty() {
        scaled
    } else {
        let kinds = tape.param("emb.kind")?;
        let k = tape.row(kinds, kind_row(NodeKind::CellValue));
        let rows = vec![k; inst.cells.len()];
        let cells = tape.stack_rows(&rows)?;
        tape.concat_rows(&[scaled, cells])?
    };
    let nodes = GnnLayer::new("enc.gnn", cfg.encoder_steps).propagate(tape, h0, &inst.graph)?;

    let scores_t = tape.transpose(link.scores);
    let constant_nodes = tape.slice_rows(nodes, 0, v);
    let we = tape.param("dec.ptr.we")?;
    let token_keys = tape.linear(state_rows, we)?;
    let cell_keys = if inst.cells.is_empty() {
        None
    } else {
        let wc = tape.param("dec.ptr.wc")?;
        let cells = tape.slice_rows(nodes, v, inst.cells.len());
        Some(tape.linear(cells, wc)?)
    };
    Ok(Encoding {
        states,
        state_rows,
        keys,
        link,
        r,
        rho_local,
        rho_global,
        rho,
        nodes,
        scores_t,
        constant_nodes,
        token_keys,
        cell_keys,
    })
}

/// `softmax_v(sum_i alpha_i s_link(v, x_i))` over the unmasked constants.
pub fn select_db_constant(tape: &mut Tape, alpha: Var, link: &LinkMatrix, mask: Option<Rc<[bool]>>) -> Result<Var> {
    let st = tape.transpose(link.scores);
    let s = tape.matvec(st, alpha)?;
    tape.softmax(s, mask)
}

/// Decoder recurrent state plus the partial derivation.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub lstm: LstmState,
    /// Attention context of the previous step.
    pub ctx: Var,
    /// Embedding of the previous decision.
    pub prev: Var,
    pub derivation: DerivationState,
}

pub fn initial_state(tape: &mut Tape, model: &Model, enc: &Encoding) -> Result<DecoderState> {
    let h = model.config.hidden;
    let last = *enc.states.last().expect("encoding has states");
    let fwd = tape.slice(last, 0, h);
    let bwd = tape.slice(enc.states[0], h, h);
    let x = tape.concat(&[fwd, bwd]);
    let pre = ff(tape, "dec.init", x)?;
    let hidden = tape.tanh(pre);
    let d = model.config.decoder;
    let c = tape.zeros(d, 1);
    Ok(DecoderState {
        lstm: LstmState { h: hidden, c },
        ctx: tape.zeros(model.config.context_width(), 1),
        prev: tape.zeros(model.config.emb, 1),
        derivation: DerivationState::new(),
    })
}

/// Scores of every decision at one step. `logits` spans the whole choice
/// space of the slot (rules, constants, or words then cells); `mask` marks
/// the legal entries.
#[derive(Clone, Debug)]
pub struct StepScores {
    pub slot: Slot,
    pub options: Vec<Decision>,
    pub logits: Var,
    pub mask: Rc<[bool]>,
    /// Logit index of each option.
    pub index: Vec<usize>,
    pub lstm: LstmState,
    pub ctx: Var,
    pub alpha: Var,
}

/// Index of `d` in the logit vector of its slot.
pub fn logit_index(inst: &Instance, d: Decision) -> Option<usize> {
    match d {
        Decision::Rule(r) => Some(r),
        Decision::Constant(id) => inst.constant_index(id),
        Decision::Value(ValueRef::Token(i)) => (i < inst.tokens.len()).then_some(i),
        Decision::Value(ValueRef::Cell(k)) => (k < inst.cells.len()).then_some(inst.tokens.len() + k),
    }
}

fn decode_context<'a>(schema: &'a Schema, inst: &'a Instance) -> DecodeContext<'a> {
    DecodeContext { schema, tokens: &inst.tokens, cells: &inst.cell_texts }
}

/// Runs the decoder cell for the frontier of `st` and scores every legal
/// decision. Returns `None` when the frontier has no legal decision.
pub fn score_step(
    tape: &mut Tape,
    model: &Model,
    schema: &Schema,
    inst: &Instance,
    enc: &Encoding,
    st: &DecoderState,
) -> Result<Option<StepScores>> {
    let ctx = decode_context(schema, inst);
    let Some(slot) = st.derivation.frontier() else {
        return Ok(None);
    };
    let options = st.derivation.legal(&model.grammar, &ctx);
    if options.is_empty() {
        return Ok(None);
    }
    let rule_emb = tape.param("dec.rule_emb")?;
    let parent = match slot.parent {
        Some(r) => tape.row(rule_emb, r),
        None => tape.zeros(model.config.emb, 1),
    };
    let x = tape.concat(&[st.prev, st.ctx, parent]);
    let lstm = lstm_step(tape, "dec.lstm", x, st.lstm)?;
    let (alpha, actx) = additive_attention(tape, "dec.att", lstm.h, &enc.keys)?;
    let dq = tape.concat(&[lstm.h, actx]);

    let (logits, size) = match slot.symbol {
        Symbol::Table | Symbol::Column => {
            let s = tape.matvec(enc.scores_t, alpha)?;
            let wg = tape.param("dec.w_graph")?;
            let g = tape.matvec(wg, dq)?;
            let t = tape.matvec(enc.constant_nodes, g)?;
            (tape.add(s, t)?, inst.num_constants())
        }
        Symbol::Value | Symbol::LimitValue => {
            let wd = tape.param("dec.ptr.wd")?;
            let v = tape.param("dec.ptr.v")?;
            let q = tape.matvec(wd, dq)?;
            let mut parts = Vec::with_capacity(2);
            for keys in std::iter::once(enc.token_keys).chain(enc.cell_keys) {
                let pre = tape.add_row_bias(keys, q)?;
                let act = tape.tanh(pre);
                parts.push(tape.matvec(act, v)?);
            }
            (tape.concat(&parts), inst.tokens.len() + inst.cells.len())
        }
        _ => (ff(tape, "dec.rule_out", dq)?, model.grammar.num_rules()),
    };
    let mut mask = vec![false; size];
    let mut index = Vec::with_capacity(options.len());
    for &d in &options {
        let i = logit_index(inst, d)
            .ok_or_else(|| Error::Graph(format!("decision {d:?} has no score")))?;
        mask[i] = true;
        index.push(i);
    }
    Ok(Some(StepScores { slot, options, logits, mask: mask.into(), index, lstm, ctx: actx, alpha }))
}

/// Probability distribution over the slot's choice space (zero off the legal
/// set) and the scores it came from.
pub fn decode_step(
    tape: &mut Tape,
    model: &Model,
    schema: &Schema,
    inst: &Instance,
    enc: &Encoding,
    st: &DecoderState,
) -> Result<Option<(Var, StepScores)>> {
    match score_step(tape, model, schema, inst, enc, st)? {
        Some(s) => {
            let p = tape.softmax(s.logits, Some(s.mask.clone()))?;
            Ok(Some((p, s)))
        }
        None => Ok(None),
    }
}

/// Next decoder state after taking `d` (one of `scores.options`).
pub fn advance(
    tape: &mut Tape,
    model: &Model,
    schema: &Schema,
    inst: &Instance,
    enc: &Encoding,
    st: &DecoderState,
    scores: &StepScores,
    d: Decision,
) -> Result<DecoderState> {
    let prev = match d {
        Decision::Rule(r) => {
            let e = tape.param("dec.rule_emb")?;
            tape.row(e, r)
        }
        Decision::Constant(id) => {
            let p = inst
                .constant_index(id)
                .ok_or_else(|| Error::Graph(format!("constant {id:?} is not in the graph")))?;
            tape.row(enc.nodes, p)
        }
        Decision::Value(ValueRef::Token(i)) => {
            let w = tape.param("dec.w_val")?;
            tape.matvec(w, enc.states[i])?
        }
        Decision::Value(ValueRef::Cell(k)) => tape.row(enc.nodes, inst.num_constants() + k),
    };
    let mut derivation = st.derivation.clone();
    derivation.apply_unchecked(&model.grammar, &decode_context(schema, inst), d);
    Ok(DecoderState { lstm: scores.lstm, ctx: scores.ctx, prev, derivation })
}

/// `-sum_t log p(gold_t)` under teacher forcing.
pub fn decoding_loss(
    tape: &mut Tape,
    model: &Model,
    schema: &Schema,
    inst: &Instance,
    enc: &Encoding,
    gold: &[Decision],
) -> Result<Var> {
    for d in gold {
        if let Decision::Constant(id) = d {
            if inst.constant_index(*id).is_none() {
                return Err(Error::Graph(format!("gold constant {id:?} is not in the graph")));
            }
        }
    }
    let mut st = initial_state(tape, model, enc)?;
    let mut terms = Vec::with_capacity(gold.len());
    for (t, &d) in gold.iter().enumerate() {
        let scores = score_step(tape, model, schema, inst, enc, &st)?.ok_or_else(|| {
            Error::Invalid(format!("gold derivation has no legal decision at step {t}"))
        })?;
        let k = scores.options.iter().position(|o| *o == d).ok_or_else(|| {
            Error::Invalid(format!("gold decision {d:?} is not legal at step {t}"))
        })?;
        terms.push(tape.log_softmax_at(scores.logits, Some(scores.mask.clone()), scores.index[k])?);
        st = advance(tape, model, schema, inst, enc, &st, &scores, d)?;
    }
    if !st.derivation.is_complete() {
        return Err(Error::Invalid("gold derivation is incomplete".into()));
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, -1.0))
}

/// One finished beam entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub decisions: Vec<Decision>,
    pub query: SqlQuery,
    pub log_prob: f64,
    pub constants: BTreeSet<NodeId>,
    pub rerank_logit: Option<f64>,
}

/// Decoding step budget used when none is configured.
pub const DEFAULT_MAX_STEPS: usize = 60;

/// Descending score, then ascending decision sequence.
fn rank(a: (f64, &[Decision]), b: (f64, &[Decision])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Beam search of width `k`. Expansions of all live hypotheses compete for
/// the `k` slots; completed derivations leave the beam. Stops when no live
/// hypothesis can beat the `k`-th finished one, or after `max_steps`.
pub fn beam_search(
    tape: &mut Tape,
    model: &Model,
    schema: &Schema,
    inst: &Instance,
    enc: &Encoding,
    k: usize,
    max_steps: usize,
) -> Result<Vec<BeamCandidate>> {
    if k == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    struct Hyp {
        state: DecoderState,
        score: f64,
    }
    let mut live = vec![Hyp { state: initial_state(tape, model, enc)?, score: 0.0 }];
    let mut done: Vec<(f64, DerivationState)> = Vec::new();
    for _ in 0..max_steps {
        if live.is_empty() {
            break;
        }
        let mut expansions: Vec<(f64, usize, Decision, Rc<StepScores>)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let Some(scores) = score_step(tape, model, schema, inst, enc, &hyp.state)? else {
                continue;
            };
            let logits = tape.value(scores.logits);
            let picked: Vec<f64> = scores.index.iter().map(|&i| logits[i]).collect();
            let z = log_sum_exp(&picked, None)?;
            let scores = Rc::new(scores);
            for (j, &d) in scores.options.iter().enumerate() {
                expansions.push((hyp.score + picked[j] - z, h, d, scores.clone()));
            }
        }
        // live hypotheses all have the same length, so sequence order is
        // parent order then the new decision
        expansions.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.1].state.derivation.decisions().cmp(live[b.1].state.derivation.decisions()))
                .then_with(|| a.2.cmp(&b.2))
        });
        expansions.truncate(k);

        let mut next = Vec::with_capacity(expansions.len());
        for (score, h, d, scores) in expansions {
            let state = advance(tape, model, schema, inst, enc, &live[h].state, &scores, d)?;
            if state.derivation.is_complete() {
                done.push((score, state.derivation));
            } else {
                next.push(Hyp { state, score });
            }
        }
        live = next;
        if done.len() >= k {
            done.sort_by(|a, b| rank((a.0, a.1.decisions()), (b.0, b.1.decisions())));
            done.truncate(k);
            let worst = done[k - 1].0;
            if live.iter().all(|h| h.score <= worst) {
                break;
            }
        }
    }
    done.sort_by(|a, b| rank((a.0, a.1.decisions()), (b.0, b.1.decisions())));
    done.truncate(k);
    Ok(done
        .into_iter()
        .map(|(score, d)| {
            let query = d.query().clone();
            BeamCandidate {
                decisions: d.decisions().to_vec(),
                constants: extract_constants(&query, schema),
                query,
                log_prob: score,
                rerank_logit: None,
            }
        })
        .collect())
}

/// Greedy decoding: the single best decision at every step.
pub fn greedy_decode(
    tape: &mut Tape,
    model: &Model,
    schema: &Schema,
    inst: &Instance,
    enc: &Encoding,
    max_steps: usize,
) -> Result<Option<BeamCandidate>> {
    Ok(beam_search(tape, model, schema, inst, enc, 1, max_steps)?.into_iter().next())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{gold_derivation, rule, Grammar};
    use crate::linking::LinkMatrix;
    use crate::model::ModelConfig;
    use crate::neural::check_gradients;
    use crate::schema::fixtures::{col, concert_singer};
    use crate::schema::ValueType;
    use crate::sql::parse_sql;
    use crate::text::Vocab;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            emb: 4,
            hidden: 3,
            link_hidden: 3,
            gate_width: 3,
            decoder: 5,
            attention: 3,
            rerank_width: 3,
            ..ModelConfig::default()
        }
    }

    fn one_table(columns: &[&str]) -> Schema {
        Schema {
            db_id: "t".into(),
            tables: vec!["singer".into()],
            columns: columns.iter().map(|c| col(0, c, ValueType::Text)).collect(),
            primary_keys: BTreeSet::new(),
            foreign_keys: BTreeSet::new(),
        }
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn setup(schema: &Schema, question: &str, grammar: Option<Grammar>, seed: u64) -> (Model, Instance) {
        let mut vocab_words = words(question);
        vocab_words.extend(schema.tables.iter().cloned());
        vocab_words.extend(schema.columns.iter().map(|c| c.name.clone()));
        let mut model = Model::new(tiny_config(), Vocab::from_words(vocab_words), seed).unwrap();
        if let Some(g) = grammar {
            model.grammar = g;
        }
        let inst = Instance::new(schema, words(question), &[], &model.vocab).unwrap();
        (model, inst)
    }

    fn probs(tape: &Tape, p: Var) -> Vec<f64> {
        tape.value(p).to_vec()
    }

    #[test]
    fn encode_gradients_on_three_node_graph() {
        let schema = one_table(&["name", "country"]);
        let (model, inst) = setup(&schema, "singer name", None, 3);
        assert_eq!(inst.graph.num_nodes(), 3);
        let report = check_gradients(&model.store, 1e-5, None, Some(4), |tape| {
            let enc = encode(tape, &model, &inst, Relevance::Gated)?;
            let a = tape.sum(enc.nodes);
            let b = tape.sum(enc.state_rows);
            tape.add(a, b)
        })
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn fixed_relevance_scales_encoder_input() {
        let schema = one_table(&["name", "country"]);
        let (model, inst) = setup(&schema, "singer name", None, 4);
        let mut tape = Tape::inference(&model.store);
        let v = inst.num_constants();

        let ones = vec![1.0; v];
        let enc = encode(&mut tape, &model, &inst, Relevance::Fixed(&ones)).unwrap();
        let layer = GnnLayer::new("enc.gnn", model.config.encoder_steps);
        let raw = layer.propagate(&mut tape, enc.r, &inst.graph).unwrap();
        assert_eq!(tape.value(raw), tape.value(enc.nodes));

        let zeros = vec![0.0; v];
        let enc = encode(&mut tape, &model, &inst, Relevance::Fixed(&zeros)).unwrap();
        let w = model.config.emb;
        let z = tape.zeros(v, w);
        let from_zero = layer.propagate(&mut tape, z, &inst.graph).unwrap();
        assert_eq!(tape.value(from_zero), tape.value(enc.nodes));

        assert!(encode(&mut tape, &model, &inst, Relevance::Fixed(&[1.0])).is_err());
    }

    #[test]
    fn local_relevance_bypasses_gate() {
        let s = concert_singer();
        let (model, inst) = setup(&s, "what is the name of every singer", None, 1);
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Local).unwrap();
        assert!(enc.rho_global.is_none());
        assert_eq!(tape.value(enc.rho), tape.value(enc.rho_local));
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        assert_eq!(tape.value(enc.rho), tape.value(enc.rho_global.unwrap()));
    }

    /// Walks the gold derivation of `sql`, checking every step distribution.
    fn walk_gold(schema: &Schema, question: &str, sql: &str, seed: u64) {
        let (model, inst) = setup(schema, question, None, seed);
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let ctx = decode_context(schema, &inst);
        let gold = gold_derivation(&parse_sql(sql, schema).unwrap(), &model.grammar, &ctx).unwrap();
        let mut st = initial_state(&mut tape, &model, &enc).unwrap();
        let mut branches = BTreeSet::new();
        for &d in &gold {
            let (p, scores) = decode_step(&mut tape, &model, schema, &inst, &enc, &st).unwrap().unwrap();
            let p = probs(&tape, p);
            // explicit normalisation of the masked logits
            let logits = tape.value(scores.logits);
            let z: f64 = scores.index.iter().map(|&i| logits[i].exp()).sum();
            for (i, &pi) in p.iter().enumerate() {
                let want = if scores.mask[i] { logits[i].exp() / z } else { 0.0 };
                assert!((pi - want).abs() < 1e-12);
            }
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if scores.options.len() == 1 {
                assert_eq!(p[scores.index[0]], 1.0);
            }
            if scores.slot.symbol == Symbol::Column {
                for (k, id) in inst.constants.iter().enumerate() {
                    if id.kind == NodeKind::Table {
                        assert_eq!(p[k], 0.0);
                    }
                }
            }
            if scores.slot.symbol == Symbol::Table {
                for (k, id) in inst.constants.iter().enumerate() {
                    if id.kind == NodeKind::Column {
                        assert_eq!(p[k], 0.0);
                    }
                }
            }
            branches.insert(format!("{:?}", std::mem::discriminant(&d)));
            st = advance(&mut tape, &model, schema, &inst, &enc, &st, &scores, d).unwrap();
        }
        assert!(st.derivation.is_complete());
        assert!(branches.len() >= 2, "both rule and constant steps visited");
    }

    #[test]
    fn step_distributions_are_normalised_and_kind_masked() {
        let s = concert_singer();
        walk_gold(&s, "name of singer", "SELECT singer.name FROM singer", 2);
        walk_gold(
            &s,
            "names of songs by singers from france ordered by name limit 3",
            "SELECT song.name FROM singer JOIN song ON song.singer_id = singer.singer_id \
             WHERE singer.country = 'france' ORDER BY song.name ASC LIMIT 3",
            5,
        );
    }

    #[test]
    fn first_rule_has_probability_one() {
        let s = concert_singer();
        let (model, inst) = setup(&s, "how many singers", None, 0);
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let st = initial_state(&mut tape, &model, &enc).unwrap();
        let (p, scores) = decode_step(&mut tape, &model, &s, &inst, &enc, &st).unwrap().unwrap();
        assert_eq!(scores.options, vec![Decision::Rule(rule::QUERY)]);
        assert_eq!(tape.value(p)[rule::QUERY], 1.0);
    }

    fn link_of(tape: &mut Tape, rows: Vec<Vec<f64>>) -> LinkMatrix {
        let (n, v) = (rows.len(), rows[0].len());
        let s = tape.constant(rows.concat(), n, v);
        LinkMatrix::from_scores(tape, s).unwrap()
    }

    #[test]
    fn constant_selection_with_one_hot_attention() {
        let store = crate::neural::ParameterStore::new();
        let mut tape = Tape::inference(&store);
        let rows = vec![vec![0.3, -1.0, 2.0, 0.5], vec![1.5, 0.0, -0.2, 0.9]];
        let link = link_of(&mut tape, rows.clone());
        let alpha = tape.vector(vec![0.0, 1.0]);
        let mask: Rc<[bool]> = vec![true, false, true, true].into();
        let p = select_db_constant(&mut tape, alpha, &link, Some(mask.clone())).unwrap();
        let z: f64 = [0, 2, 3].iter().map(|&j| rows[1][j].exp()).sum();
        let want = [rows[1][0].exp() / z, 0.0, rows[1][2].exp() / z, rows[1][3].exp() / z];
        for (a, b) in tape.value(p).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }

        let flat = link_of(&mut tape, vec![vec![0.7; 5]; 3]);
        let alpha = tape.vector(vec![0.2, 0.3, 0.5]);
        let mask: Rc<[bool]> = vec![true, true, false, true, false].into();
        let p = select_db_constant(&mut tape, alpha, &flat, Some(mask)).unwrap();
        for (j, &pj) in tape.value(p).iter().enumerate() {
            let want = if [0, 1, 3].contains(&j) { 1.0 / 3.0 } else { 0.0 };
            assert!((pj - want).abs() < 1e-12);
        }
    }

    #[test]
    fn two_name_columns_are_a_coin_flip_locally() {
        // singer(name), song(name): the word "name" links equally to both
        let schema = Schema {
            db_id: "fig1".into(),
            tables: vec!["singer".into(), "song".into()],
            columns: vec![col(0, "name", ValueType::Text), col(1, "name", ValueType::Text)],
            primary_keys: BTreeSet::new(),
            foreign_keys: BTreeSet::new(),
        };
        let (model, inst) = setup(&schema, "what is the name of the singer", None, 9);
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let i = inst.tokens.iter().position(|w| w == "name").unwrap();
        let mut onehot = vec![0.0; inst.tokens.len()];
        onehot[i] = 1.0;
        let alpha = tape.vector(onehot);
        let columns: Rc<[bool]> = inst.constants.iter().map(|c| c.kind == NodeKind::Column).collect();
        let p = select_db_constant(&mut tape, alpha, &enc.link, Some(columns)).unwrap();
        let singer_name = inst.constant_index(NodeId::column(0)).unwrap();
        let song_name = inst.constant_index(NodeId::column(1)).unwrap();
        assert_eq!(tape.value(p)[singer_name], 0.5);
        assert_eq!(tape.value(p)[song_name], 0.5);
    }

    #[test]
    fn loss_is_minus_log_teacher_forced_probability() {
        let s = concert_singer();
        let (model, inst) = setup(&s, "how many songs does each singer have", None, 11);
        let q = parse_sql(
            "SELECT singer.name, COUNT(*) FROM singer JOIN song ON song.singer_id = singer.singer_id \
             GROUP BY singer.name",
            &s,
        )
        .unwrap();
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let gold = gold_derivation(&q, &model.grammar, &decode_context(&s, &inst)).unwrap();
        let loss = decoding_loss(&mut tape, &model, &s, &inst, &enc, &gold).unwrap();

        let mut prob = 1.0;
        let mut st = initial_state(&mut tape, &model, &enc).unwrap();
        for &d in &gold {
            let (p, scores) = decode_step(&mut tape, &model, &s, &inst, &enc, &st).unwrap().unwrap();
            let k = scores.options.iter().position(|o| *o == d).unwrap();
            prob *= tape.value(p)[scores.index[k]];
            st = advance(&mut tape, &model, &s, &inst, &enc, &st, &scores, d).unwrap();
        }
        assert!(((-tape.scalar(loss)).exp() - prob).abs() < 1e-9);
    }

    #[test]
    fn fully_forced_derivation_has_zero_loss() {
        let schema = one_table(&["name"]);
        let g = Grammar::projection_only().without(&[rule::SEL_MORE]);
        let (model, inst) = setup(&schema, "singer names", Some(g), 2);
        let q = parse_sql("SELECT singer.name FROM singer", &schema).unwrap();
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let gold = gold_derivation(&q, &model.grammar, &decode_context(&schema, &inst)).unwrap();
        let loss = decoding_loss(&mut tape, &model, &schema, &inst, &enc, &gold).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn decoding_loss_gradients() {
        // a short derivation whose only free choice is the column
        let schema = one_table(&["name", "country"]);
        let g = Grammar::projection_only().without(&[rule::SEL_MORE]);
        let (model, inst) = setup(&schema, "singer country", Some(g), 6);
        let q = parse_sql("SELECT singer.country FROM singer", &schema).unwrap();
        let gold = gold_derivation(&q, &model.grammar, &decode_context(&schema, &inst)).unwrap();
        let report = check_gradients(&model.store, 1e-5, None, Some(4), |tape| {
            let enc = encode(tape, &model, &inst, Relevance::Gated)?;
            decoding_loss(tape, &model, &schema, &inst, &enc, &gold)
        })
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn decoding_loss_rejects_unknown_constant() {
        let schema = one_table(&["name"]);
        let (model, inst) = setup(&schema, "singer names", None, 2);
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let gold = [Decision::Rule(rule::QUERY), Decision::Constant(NodeId::column(7))];
        assert!(decoding_loss(&mut tape, &model, &schema, &inst, &enc, &gold).is_err());
    }

    #[test]
    fn beam_returns_every_derivation_of_a_tiny_grammar() {
        let schema = one_table(&["name", "country", "age"]);
        let g = Grammar::projection_only().without(&[rule::SEL_MORE]);
        let (model, inst) = setup(&schema, "show singer age", Some(g), 8);
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let beam = beam_search(&mut tape, &model, &schema, &inst, &enc, 10, DEFAULT_MAX_STEPS).unwrap();
        assert_eq!(beam.len(), 3);

        // exhaustive oracle: score each of the three queries by teacher forcing
        let ctx = decode_context(&schema, &inst);
        let mut oracle: Vec<(f64, Vec<Decision>)> = ["name", "country", "age"]
            .iter()
            .map(|c| {
                let q = parse_sql(&format!("SELECT {c} FROM singer"), &schema).unwrap();
                let gold = gold_derivation(&q, &model.grammar, &ctx).unwrap();
                let loss = decoding_loss(&mut tape, &model, &schema, &inst, &enc, &gold).unwrap();
                (-tape.scalar(loss), gold)
            })
            .collect();
        oracle.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        for (c, (lp, d)) in beam.iter().zip(&oracle) {
            assert_eq!(&c.decisions, d);
            assert!((c.log_prob - lp).abs() < 1e-9);
        }
        assert!(beam.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    }

    /// Independent greedy loop: argmax at each step, ties to the smallest
    /// decision.
    fn greedy_oracle(model: &Model, schema: &Schema, inst: &Instance) -> (Vec<Decision>, f64) {
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, model, inst, Relevance::Gated).unwrap();
        let mut st = initial_state(&mut tape, model, &enc).unwrap();
        let mut lp = 0.0;
        while let Some((p, scores)) = decode_step(&mut tape, model, schema, inst, &enc, &st).unwrap() {
            let p = tape.value(p).to_vec();
            let mut best = 0;
            for j in 1..scores.options.len() {
                let (a, b) = (p[scores.index[j]], p[scores.index[best]]);
                if a > b || (a == b && scores.options[j] < scores.options[best]) {
                    best = j;
                }
            }
            lp += p[scores.index[best]].ln();
            let d = scores.options[best];
            st = advance(&mut tape, model, schema, inst, &enc, &st, &scores, d).unwrap();
        }
        assert!(st.derivation.is_complete());
        (st.derivation.decisions().to_vec(), lp)
    }

    #[test]
    fn width_one_beam_is_greedy() {
        let s = concert_singer();
        for seed in 0..4 {
            let (model, inst) = setup(&s, "list the names of singers from france", None, seed);
            let mut tape = Tape::inference(&model.store);
            let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
            let (d, lp) = greedy_oracle(&model, &s, &inst);
            let g = greedy_decode(&mut tape, &model, &s, &inst, &enc, 200).unwrap().unwrap();
            assert_eq!(g.decisions, d);
            assert!((g.log_prob - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_is_sorted_legal_and_kind_safe() {
        let s = concert_singer();
        let (model, inst) = setup(&s, "what is the average year of concerts", None, 21);
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let beam = beam_search(&mut tape, &model, &s, &inst, &enc, 6, DEFAULT_MAX_STEPS).unwrap();
        assert!(beam.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
        for c in &beam {
            c.query.validate(&s).unwrap();
            assert_eq!(c.constants, extract_constants(&c.query, &s));
            let st = crate::grammar::replay(&c.decisions, &model.grammar, &decode_context(&s, &inst)).unwrap();
            assert_eq!(st, c.query);
        }
        assert!(beam_search(&mut tape, &model, &s, &inst, &enc, 0, 10).is_err());
    }
}
