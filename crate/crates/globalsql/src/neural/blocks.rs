//! Reusable network blocks built on the tape: feed-forward stacks, LSTM
//! cells and a bidirectional encoder, additive attention, and the typed-edge
//! gated graph propagation shared by every graph network in the model.

use std::rc::Rc;

use rand::Rng;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeType, SchemaGraph};

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

/// Registers a feed-forward stack with layer widths `dims[0] -> ... -> dims[k]`.
pub fn init_ff<R: Rng>(store: &mut ParameterStore, name: &str, dims: &[usize], rng: &mut R) {
    for (k, w) in dims.windows(2).enumerate() {
        store.init_matrix(&format!("{name}.w{k}"), w[1], w[0], rng);
        store.init_zeros(&format!("{name}.b{k}"), &[w[1]]);
    }
}

fn ff_depth(store: &ParameterStore, name: &str) -> Result<usize> {
    let depth = (0..)
        .take_while(|k| store.contains(&format!("{name}.w{k}")))
        .count();
    if depth == 0 {
        return Err(Error::MissingParam(format!("{name}.w0")));
    }
    Ok(depth)
}

/// Feed-forward network on a single vector: affine layers with `tanh`
/// between them (none after the last).
pub fn ff(tape: &mut Tape, name: &str, input: Var) -> Result<Var> {
    let depth = ff_depth(tape.store(), name)?;
    let mut x = input;
    for k in 0..depth {
        let w = tape.param(&format!("{name}.w{k}"))?;
        let b = tape.param(&format!("{name}.b{k}"))?;
        let y = tape.matvec(w, x)?;
        x = tape.add(y, b)?;
        if k + 1 < depth {
            x = tape.tanh(x);
        }
    }
    Ok(x)
}

/// The same network applied independently to every row of a matrix.
pub fn ff_rows(tape: &mut Tape, name: &str, input: Var) -> Result<Var> {
    let depth = ff_depth(tape.store(), name)?;
    let mut x = input;
    for k in 0..depth {
        let w = tape.param(&format!("{name}.w{k}"))?;
        let b = tape.param(&format!("{name}.b{k}"))?;
        let y = tape.linear(x, w)?;
        x = tape.add_row_bias(y, b)?;
        if k + 1 < depth {
            x = tape.tanh(x);
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

pub fn init_lstm<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    store.init_matrix(&format!("{name}.w"), 4 * hidden, input + hidden, rng);
    store.init_zeros(&format!("{name}.b"), &[4 * hidden]);
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

pub fn lstm_zero_state(tape: &mut Tape, name: &str) -> Result<LstmState> {
    let hidden = tape.store().get(&format!("{name}.b"))?.len() / 4;
    Ok(LstmState {
        h: tape.zeros(hidden, 1),
        c: tape.zeros(hidden, 1),
    })
}

/// One LSTM step. Gate layout in the weight matrix: input, forget, cell, output.
pub fn lstm_step(tape: &mut Tape, name: &str, x: Var, state: LstmState) -> Result<LstmState> {
    let w = tape.param(&format!("{name}.w"))?;
    let b = tape.param(&format!("{name}.b"))?;
    let hidden = tape.rows(b) / 4;
    let xh = tape.concat(&[x, state.h]);
    let pre = tape.matvec(w, xh)?;
    let pre = tape.add(pre, b)?;
    let i = tape.slice(pre, 0, hidden);
    let f = tape.slice(pre, hidden, hidden);
    let g = tape.slice(pre, 2 * hidden, hidden);
    let o = tape.slice(pre, 3 * hidden, hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

pub fn init_bilstm<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    init_lstm(store, &format!("{name}.fwd"), input, hidden, rng);
    init_lstm(store, &format!("{name}.bwd"), input, hidden, rng);
}

/// Contextual states `e_i = [forward_i; backward_i]` for every token.
pub fn bilstm_encode(tape: &mut Tape, name: &str, inputs: &[Var]) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::Invalid("cannot encode an empty sequence".into()));
    }
    let fwd_name = format!("{name}.fwd");
    let bwd_name = format!("{name}.bwd");
    let mut fwd = Vec::with_capacity(inputs.len());
    let mut s = lstm_zero_state(tape, &fwd_name)?;
    for x in inputs {
        s = lstm_step(tape, &fwd_name, *x, s)?;
        fwd.push(s.h);
    }
    let mut bwd = vec![fwd[0]; inputs.len()];
    let mut s = lstm_zero_state(tape, &bwd_name)?;
    for (i, x) in inputs.iter().enumerate().rev() {
        s = lstm_step(tape, &bwd_name, *x, s)?;
        bwd[i] = s.h;
    }
    Ok(fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect())
}

// ---------------------------------------------------------------------------
// Additive attention
// ---------------------------------------------------------------------------

pub fn init_attention<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    query: usize,
    key: usize,
    width: usize,
    rng: &mut R,
) {
    store.init_matrix(&format!("{name}.wq"), width, query, rng);
    store.init_matrix(&format!("{name}.wk"), width, key, rng);
    store.init_vector(&format!("{name}.v"), width, rng);
}

/// Keys stacked as rows together with their projection, computed once per
/// sequence and reused for every query.
#[derive(Clone, Copy, Debug)]
pub struct AttentionKeys {
    pub keys: Var,
    pub keys_t: Var,
    pub projected: Var,
}

pub fn prepare_keys(tape: &mut Tape, name: &str, keys: &[Var]) -> Result<AttentionKeys> {
    if keys.is_empty() {
        return Err(Error::Invalid("attention over no keys".into()));
    }
    let wk = tape.param(&format!("{name}.wk"))?;
    let k = tape.stack_rows(keys)?;
    let keys_t = tape.transpose(k);
    let projected = tape.linear(k, wk)?;
    Ok(AttentionKeys {
        keys: k,
        keys_t,
        projected,
    })
}

/// `score_i = v . tanh(Wk k_i + Wq q)`; returns the softmax weights and the
/// weighted sum of keys.
pub fn additive_attention(
    tape: &mut Tape,
    name: &str,
    query: Var,
    keys: &AttentionKeys,
) -> Result<(Var, Var)> {
    let wq = tape.param(&format!("{name}.wq"))?;
    let v = tape.param(&format!("{name}.v"))?;
    let q = tape.matvec(wq, query)?;
    let pre = tape.add_row_bias(keys.projected, q)?;
    let act = tape.tanh(pre);
    let scores = tape.matvec(act, v)?;
    let alpha = tape.softmax(scores, None)?;
    let context = tape.matvec(keys.keys_t, alpha)?;
    Ok((alpha, context))
}

// ---------------------------------------------------------------------------
// Gated graph propagation
// ---------------------------------------------------------------------------

/// Registers per-edge-type message transforms for `tags` and the gated
/// recurrent update, all of width `width`.
pub fn init_gnn<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    width: usize,
    tags: &[EdgeType],
    rng: &mut R,
) {
    for tag in tags {
        store.init_matrix(&format!("{name}.edge.{}.w", tag.key()), width, width, rng);
        store.init_zeros(&format!("{name}.edge.{}.b", tag.key()), &[width]);
    }
    for gate in ["z", "r", "h"] {
        store.init_matrix(&format!("{name}.gru.w{gate}"), width, width, rng);
        store.init_matrix(&format!("{name}.gru.u{gate}"), width, width, rng);
        store.init_zeros(&format!("{name}.gru.b{gate}"), &[width]);
    }
}

/// Configuration of one graph network: parameter prefix and step count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GnnLayer {
    pub name: String,
    pub steps: usize,
}

impl GnnLayer {
    pub fn new(name: impl Into<String>, steps: usize) -> Self {
        Self {
            name: name.into(),
            steps,
        }
    }

    /// Runs `steps` rounds of message passing over `graph`. `states` holds one
    /// row per graph node, in graph order.
    ///
    /// Each round: `m_v = sum over edges (u -> v, t) of (A_t h_u + b_t)`, then
    /// a GRU update `h_v' = (1 - z) * h_v + z * tanh(W m_v + U (r * h_v) + b)`.
    pub fn propagate(&self, tape: &mut Tape, states: Var, graph: &SchemaGraph) -> Result<Var> {
        let n = graph.num_nodes();
        if tape.rows(states) != n {
            return Err(Error::Shape {
                op: "gnn_propagate",
                left: vec![tape.rows(states), tape.cols(states)],
                right: vec![n],
            });
        }
        let width = tape.cols(states);
        let by_tag = graph.edges_by_type();
        for tag in by_tag.keys() {
            if !tape.store().contains(&format!("{}.edge.{}.w", self.name, tag.key())) {
                return Err(Error::Graph(format!(
                    "no message transform for edge type {tag:?} in `{}`",
                    self.name
                )));
            }
        }
        let by_tag: Vec<(EdgeType, Rc<[(usize, usize)]>)> = by_tag
            .into_iter()
            .map(|(t, pairs)| (t, Rc::from(pairs)))
            .collect();

        let mut h = states;
        for _ in 0..self.steps {
            let mut parts = Vec::with_capacity(by_tag.len());
            for (tag, pairs) in &by_tag {
                let w = tape.param(&format!("{}.edge.{}.w", self.name, tag.key()))?;
                let b = tape.param(&format!("{}.edge.{}.b", self.name, tag.key()))?;
                let t = tape.linear(h, w)?;
                let t = tape.add_row_bias(t, b)?;
                parts.push(tape.scatter_rows(t, pairs.clone(), n));
            }
            let m = if parts.is_empty() {
                tape.zeros(n, width)
            } else {
                tape.add_n(&parts)?
            };
            h = self.gru(tape, m, h)?;
        }
        Ok(h)
    }

    fn gru(&self, tape: &mut Tape, m: Var, h: Var) -> Result<Var> {
        let p = |g: &str| format!("{}.gru.{g}", self.name);
        let gate = |tape: &mut Tape, which: &str, hin: Var| -> Result<Var> {
            let w = tape.param(&p(&format!("w{which}")))?;
            let u = tape.param(&p(&format!("u{which}")))?;
            let b = tape.param(&p(&format!("b{which}")))?;
            let a = tape.linear(m, w)?;
            let c = tape.linear(hin, u)?;
            let s = tape.add(a, c)?;
            tape.add_row_bias(s, b)
        };
        let z = gate(tape, "z", h)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, "r", h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let cand = gate(tape, "h", rh)?;
        let cand = tape.tanh(cand);
        // h' = h + z * (cand - h)
        let diff = tape.sub(cand, h)?;
        let step = tape.mul(z, diff)?;
        tape.add(h, step)
    }
}
