//! Global relevance: a gated graph network over the schema graph (with a
//! global node) that predicts, per constant, the probability that the query
//! uses it.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{CellMatch, EdgeType, NodeId, SchemaGraph};
use crate::linking::{kind_row, LinkMatrix};
use crate::neural::{ff_rows, init_ff, init_gnn, GnnLayer, ParameterStore, Tape, Var};

/// Log arguments inside [`relevance_loss`] are kept in `[EPS, 1 - EPS]`.
pub const RELEVANCE_EPS: f64 = 1e-7;

/// `h̄_v = sum_i p_link(x_i | v) e_i` for every constant, as rows.
/// `states` holds one contextual state per question word, as rows.
pub fn question_summary(tape: &mut Tape, m: &LinkMatrix, states: Var) -> Result<Var> {
    let pt = tape.transpose(m.p_const);
    tape.matmul(pt, states)
}

/// Per-node gating input, rows in graph order: constants, then cells.
#[derive(Clone, Copy, Debug)]
pub struct GateInputs {
    pub r: Var,
    pub hbar: Var,
    pub rho: Var,
}

/// Builds gating inputs. Constants use their embeddings `r`, their question
/// summary and their local relevance; a cell uses the cell-kind embedding, the
/// mean state of its matched words and the largest link probability of those
/// words to its column.
pub fn gate_inputs(
    tape: &mut Tape,
    m: &LinkMatrix,
    states: Var,
    r: Var,
    rho_local: Var,
    graph: &SchemaGraph,
    cells: &[CellMatch],
) -> Result<GateInputs> {
    let hbar = question_summary(tape, m, states)?;
    if cells.is_empty() {
        return Ok(GateInputs { r, hbar, rho: rho_local });
    }
    let kinds = tape.param("emb.kind")?;
    let cell_kind = tape.row(kinds, kind_row(crate::graph::NodeKind::CellValue));
    let mut rs = vec![r];
    let mut hs = vec![hbar];
    let mut ps = vec![rho_local];
    for c in cells {
        let col = graph
            .position(c.column)
            .filter(|&p| p < m.num_constants)
            .ok_or_else(|| Error::Graph(format!("cell column {:?} is not a constant", c.column)))?;
        let words: Vec<usize> = c.words.iter().copied().collect();
        if words.is_empty() {
            return Err(Error::Graph(format!("cell `{}` has no matched words", c.cell)));
        }
        rs.push(tape.reshape(cell_kind, 1, tape.rows(cell_kind))?);
        hs.push(tape.rows_mean(states, &words)?);
        let probs: Vec<Var> = words
            .iter()
            .map(|&i| {
                let row = tape.row(m.p_word, i);
                tape.slice(row, col, 1)
            })
            .collect();
        let v = tape.concat(&probs);
        let v = tape.reshape(v, 1, words.len())?;
        ps.push(tape.max_rows(v));
    }
    // row vectors from `rows_mean` come back as columns; lay them flat
    let hs = hs
        .into_iter()
        .enumerate()
        .map(|(k, h)| {
            if k == 0 {
                Ok(h)
            } else {
                let n = tape.value(h).len();
                tape.reshape(h, 1, n)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GateInputs {
        r: tape.concat_rows(&rs)?,
        hbar: tape.concat_rows(&hs)?,
        rho: tape.concat(&ps),
    })
}

/// Parameters of the gating network: `gate.in` (input FF), `gate.gnn`,
/// `gate.global_init` and `gate.out` (output FF to one logit).
pub fn init_gating<R: Rng>(
    store: &mut ParameterStore,
    emb: usize,
    ctx: usize,
    width: usize,
    rng: &mut R,
) {
    init_ff(store, "gate.in", &[emb + ctx + 1, width, width], rng);
    init_gnn(store, "gate.gnn", width, &EdgeType::ALL, rng);
    store.init_vector("gate.global_init", width, rng);
    init_ff(store, "gate.out", &[width, width, 1], rng);
}

/// `rho_global_v = sigmoid(FF(g_v^(L)))` for the first `num_constants` nodes
/// of `graph`, which must end with the global node.
pub fn gate(
    tape: &mut Tape,
    graph: &SchemaGraph,
    inputs: &GateInputs,
    num_constants: usize,
    steps: usize,
) -> Result<Var> {
    let gpos = graph
        .position(NodeId::global())
        .ok_or_else(|| Error::Graph("gating needs a graph with a global node".into()))?;
    if gpos + 1 != graph.num_nodes() || tape.rows(inputs.r) != gpos {
        return Err(Error::Shape {
            op: "gate",
            left: vec![tape.rows(inputs.r)],
            right: vec![gpos, graph.num_nodes()],
        });
    }
    let n = tape.rows(inputs.r);
    let rho = tape.reshape(inputs.rho, n, 1)?;
    let x = tape.concat_cols(&[inputs.r, inputs.hbar, rho])?;
    let g0 = ff_rows(tape, "gate.in", x)?;
    let init = tape.param("gate.global_init")?;
    let width = tape.rows(init);
    let init = tape.reshape(init, 1, width)?;
    let g0 = tape.concat_rows(&[g0, init])?;
    let g = GnnLayer::new("gate.gnn", steps).propagate(tape, g0, graph)?;
    let gc = tape.slice_rows(g, 0, num_constants);
    let logits = ff_rows(tape, "gate.out", gc)?;
    let p = tape.sigmoid(logits);
    tape.reshape(p, num_constants, 1)
}

/// `-sum_{v in gold} log rho_v - sum_{v not in gold} log(1 - rho_v)`, with
/// clamped log arguments. `constants` names the entries of `rho`.
pub fn relevance_loss(
    tape: &mut Tape,
    rho: Var,
    constants: &[NodeId],
    gold: &BTreeSet<NodeId>,
) -> Result<Var> {
    relevance_loss_clamped(tape, rho, constants, gold, RELEVANCE_EPS)
}

/// [`relevance_loss`] with log arguments clamped to `[eps, 1 - eps]`.
pub fn relevance_loss_clamped(
    tape: &mut Tape,
    rho: Var,
    constants: &[NodeId],
    gold: &BTreeSet<NodeId>,
    eps: f64,
) -> Result<Var> {
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::Invalid(format!("clamp epsilon {eps} must lie in [0, 0.5)")));
    }
    if let Some(bad) = gold.iter().find(|g| !constants.contains(g)) {
        return Err(Error::Invalid(format!("gold constant {bad:?} is not among the graph constants")));
    }
    let n = constants.len();
    let p = tape.clamp(rho, eps, 1.0 - eps);
    let ones = tape.constant(vec![1.0; n], n, 1);
    let q = tape.sub(ones, p)?;
    // take logs of the gathered entries only, so that an exact 0 or 1 on the
    // side the indicator ignores cannot turn the sum into 0 * -inf
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| gold.contains(&constants[i]));
    let mut terms = Vec::with_capacity(2);
    for (src, idx) in [(p, pos), (q, neg)] {
        if idx.is_empty() {
            continue;
        }
        let pairs: Rc<[(usize, usize)]> = idx.iter().enumerate().map(|(k, &i)| (k, i)).collect();
        let picked = tape.scatter_rows(src, pairs, idx.len());
        let logs = tape.log(picked);
        terms.push(tape.sum(logs));
    }
    let s = match terms.len() {
        0 => tape.scalar_const(0.0),
        _ => tape.add_n(&terms)?,
    };
    Ok(tape.scale(s, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{add_global_node, attach_cell_nodes, build_graph};
    use crate::linking::{build_link_matrix, constant_embeddings, init_embeddings, init_link_scorer, local_relevance, ConstantInfo, LinkInputs};
    use crate::neural::check_gradients;
    use crate::schema::fixtures::{col, concert_singer};
    use crate::schema::{Schema, ValueType};
    use crate::text::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_schema() -> Schema {
        Schema {
            db_id: "toy".into(),
            tables: vec!["singer".into(), "song".into()],
            columns: vec![col(0, "name", ValueType::Text), col(1, "title", ValueType::Text)],
            primary_keys: BTreeSet::new(),
            foreign_keys: BTreeSet::new(),
        }
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    struct World {
        store: ParameterStore,
        vocab: Vocab,
        graph: SchemaGraph,
        cells: Vec<CellMatch>,
        constants: Vec<NodeId>,
        inputs: LinkInputs,
    }

    const E: usize = 3;
    const C: usize = 4;
    const G: usize = 3;

    fn world(schema: &Schema, question: &str, contents: &[(usize, Vec<String>)]) -> World {
        let vocab = Vocab::from_words(["singer", "name", "song", "title", "hey"]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        init_embeddings(&mut store, "emb", vocab.len(), E, &mut rng);
        init_link_scorer(&mut store, E, 3, &mut rng);
        init_gating(&mut store, E, C, G, &mut rng);
        let q = words(question);
        let g = build_graph(schema).unwrap();
        let constants = g.constants();
        let (g, cells) = attach_cell_nodes(g, contents, &q).unwrap();
        let graph = add_global_node(g).unwrap();
        let infos = constants.iter().map(|&c| ConstantInfo::from_schema(schema, c, &vocab)).collect();
        let inputs = LinkInputs::new(&q, infos, &vocab).unwrap();
        World { store, vocab, graph, cells, constants, inputs }
    }

    /// Question states stand in as deterministic constants of width `C`.
    fn states(tape: &mut Tape, n: usize) -> Var {
        let data = (0..n * C).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.3).collect();
        tape.constant(data, n, C)
    }

    fn forward(tape: &mut Tape, w: &World) -> Result<Var> {
        let m = build_link_matrix(tape, &w.inputs)?;
        let rho = local_relevance(tape, &m);
        let e = states(tape, w.inputs.num_words());
        let r = constant_embeddings(tape, "emb", &w.inputs.constants)?;
        let gi = gate_inputs(tape, &m, e, r, rho, &w.graph, &w.cells)?;
        gate(tape, &w.graph, &gi, w.constants.len(), 2)
    }

    #[test]
    fn summary_single_word_is_its_state() {
        let store = ParameterStore::new();
        let mut tape = Tape::inference(&store);
        let s = tape.constant(vec![0.2, -1.0, 3.0], 1, 3);
        let m = LinkMatrix::from_scores(&mut tape, s).unwrap();
        let e = tape.constant(vec![1.5, 2.5], 1, 2);
        let h = question_summary(&mut tape, &m, e).unwrap();
        assert_eq!(tape.value(h), &[1.5, 2.5, 1.5, 2.5, 1.5, 2.5]);
    }

    #[test]
    fn summary_uniform_two_words_is_mean() {
        let store = ParameterStore::new();
        let mut tape = Tape::inference(&store);
        let s = tape.constant(vec![0.4, 0.4], 2, 1);
        let m = LinkMatrix::from_scores(&mut tape, s).unwrap();
        let e = tape.constant(vec![1.0, 2.0, 3.0, 6.0], 2, 2);
        let h = question_summary(&mut tape, &m, e).unwrap();
        assert_eq!(tape.value(h), &[2.0, 4.0]);
    }

    #[test]
    fn summary_matches_weighted_sum() {
        let store = ParameterStore::new();
        let mut tape = Tape::inference(&store);
        let scores = vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5];
        let s = tape.constant(scores, 3, 2);
        let m = LinkMatrix::from_scores(&mut tape, s).unwrap();
        let ev = vec![0.5, -0.25, 1.0, 2.0, -3.0, 0.75];
        let e = tape.constant(ev.clone(), 3, 2);
        let h = question_summary(&mut tape, &m, e).unwrap();
        let pc = m.values(&tape).p_const;
        for v in 0..2 {
            for d in 0..2 {
                let want: f64 = (0..3).map(|i| pc[i][v] * ev[i * 2 + d]).sum();
                assert!((tape.value(h)[v * 2 + d] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_one_half() {
        let mut w = world(&toy_schema(), "singer name", &[]);
        for name in ["gate.out.w1", "gate.out.b1"] {
            w.store.get_mut(name).unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::inference(&w.store);
        let p = forward(&mut tape, &w).unwrap();
        assert!(tape.value(p).iter().all(|&x| x == 0.5));
    }

    #[test]
    fn outputs_are_probabilities_with_cells() {
        let schema = concert_singer();
        let contents = vec![(5, vec!["Hey Jude".to_string()])];
        let w = world(&schema, "song name hey", &contents);
        assert_eq!(w.cells.len(), 1);
        let mut tape = Tape::inference(&w.store);
        let p = forward(&mut tape, &w).unwrap();
        assert_eq!(tape.value(p).len(), w.constants.len());
        assert!(tape.value(p).iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn missing_global_node_is_error() {
        let w = world(&toy_schema(), "singer", &[]);
        let plain = build_graph(&toy_schema()).unwrap();
        let mut tape = Tape::inference(&w.store);
        let m = build_link_matrix(&mut tape, &w.inputs).unwrap();
        let rho = local_relevance(&mut tape, &m);
        let e = states(&mut tape, 1);
        let r = constant_embeddings(&mut tape, "emb", &w.inputs.constants).unwrap();
        let gi = gate_inputs(&mut tape, &m, e, r, rho, &plain, &[]).unwrap();
        assert!(gate(&mut tape, &plain, &gi, 4, 2).is_err());
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let contents = vec![(1, vec!["Hey Jude".to_string()])];
        let w = world(&toy_schema(), "singer hey title", &contents);
        let gold: BTreeSet<NodeId> = [NodeId::table(0), NodeId::column(0)].into_iter().collect();
        let report = check_gradients(&w.store, 1e-5, None, None, |tape| {
            let p = forward(tape, &w)?;
            relevance_loss(tape, p, &w.constants, &gold)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        let _ = &w.vocab;
    }

    fn loss_at(rho: Vec<f64>, gold: &[usize]) -> f64 {
        let store = ParameterStore::new();
        let mut tape = Tape::inference(&store);
        let consts: Vec<NodeId> = (0..rho.len()).map(NodeId::column).collect();
        let gold = gold.iter().map(|&i| NodeId::column(i)).collect();
        let p = tape.vector(rho);
        let l = relevance_loss(&mut tape, p, &consts, &gold).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn relevance_loss_anchors() {
        assert!((loss_at(vec![0.5, 0.5], &[0]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(loss_at(vec![1.0, 0.0, 1.0], &[0, 2]) < 1e-6);
        assert!(loss_at(vec![0.6, 0.3], &[0]) > loss_at(vec![0.7, 0.3], &[0]));
    }

    #[test]
    fn relevance_loss_rejects_foreign_gold() {
        let store = ParameterStore::new();
        let mut tape = Tape::inference(&store);
        let p = tape.vector(vec![0.5]);
        let gold = [NodeId::cell(0)].into_iter().collect();
        assert!(relevance_loss(&mut tape, p, &[NodeId::column(0)], &gold).is_err());
    }
}
