//! Local word/constant similarity: string features, the learned link
//! scorer, the two normalisations of the score matrix and the local
//! relevance probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeKind};
use crate::neural::{ParameterStore, Tape, Var};
use crate::schema::Schema;
use crate::text::{name_tokens, Vocab};

/// Levenshtein distance with unit costs, ignoring case.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.to_lowercase().chars().collect();
    let b: Vec<char> = b.to_lowercase().chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest common contiguous substring (ignoring case) over the longer length.
pub fn overlap_fraction(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.to_lowercase().chars().collect();
    let b: Vec<char> = b.to_lowercase().chars().collect();
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut best = 0;
    let mut prev = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        let mut cur = vec![0usize; b.len() + 1];
        for j in 1..=b.len() {
            if a[i - 1] == b[j - 1] {
                cur[j] = prev[j - 1] + 1;
                best = best.max(cur[j]);
            }
        }
        prev = cur;
    }
    best as f64 / a.len().max(b.len()) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkFeatures {
    pub edit_distance: usize,
    pub overlap_fraction: f64,
    pub exact_match: u8,
    pub prefix_match: u8,
}

pub const NUM_LINK_FEATURES: usize = 4;

/// Prefix matches shorter than this are ignored.
const MIN_PREFIX: usize = 3;

impl LinkFeatures {
    /// Features of `word` against one string token.
    pub fn between(word: &str, token: &str) -> Self {
        let w = word.to_lowercase();
        let t = token.to_lowercase();
        let exact = w == t;
        let shorter = w.chars().count().min(t.chars().count());
        let prefix = shorter >= MIN_PREFIX && (w.starts_with(&t) || t.starts_with(&w));
        LinkFeatures {
            edit_distance: edit_distance(&w, &t),
            overlap_fraction: overlap_fraction(&w, &t),
            exact_match: exact as u8,
            prefix_match: prefix as u8,
        }
    }

    /// Best value of each feature over a constant's name tokens (smallest
    /// distance, largest overlap and indicators).
    pub fn against_name(word: &str, tokens: &[String]) -> Self {
        let mut best = LinkFeatures {
            edit_distance: usize::MAX,
            overlap_fraction: 0.0,
            exact_match: 0,
            prefix_match: 0,
        };
        for t in tokens {
            let f = Self::between(word, t);
            best.edit_distance = best.edit_distance.min(f.edit_distance);
            best.overlap_fraction = best.overlap_fraction.max(f.overlap_fraction);
            best.exact_match = best.exact_match.max(f.exact_match);
            best.prefix_match = best.prefix_match.max(f.prefix_match);
        }
        if tokens.is_empty() {
            best.edit_distance = word.chars().count();
        }
        best
    }

    /// Numeric scorer input; the distance enters as `1 / (1 + d)`.
    pub fn to_input(&self) -> [f64; NUM_LINK_FEATURES] {
        [
            1.0 / (1.0 + self.edit_distance as f64),
            self.overlap_fraction,
            self.exact_match as f64,
            self.prefix_match as f64,
        ]
    }
}

/// Kind rows of the `*.kind` embedding table.
pub fn kind_row(kind: NodeKind) -> usize {
    match kind {
        NodeKind::Table => 0,
        NodeKind::Column => 1,
        NodeKind::CellValue | NodeKind::Global => 2,
    }
}

/// A schema constant as seen by the linker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantInfo {
    pub id: NodeId,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
}

impl ConstantInfo {
    pub fn from_schema(schema: &Schema, id: NodeId, vocab: &Vocab) -> Self {
        let tokens = match id.kind {
            NodeKind::Table => name_tokens(&schema.tables[id.index]),
            NodeKind::Column => name_tokens(&schema.columns[id.index].name),
            _ => Vec::new(),
        };
        let token_ids = tokens.iter().map(|t| vocab.id(t)).collect();
        Self { id, tokens, token_ids }
    }
}

/// Everything about one (question, constant list) pair that does not depend
/// on parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkInputs {
    pub words: Vec<String>,
    pub word_ids: Vec<usize>,
    pub constants: Vec<ConstantInfo>,
    /// Row-major `words x constants`.
    pub features: Vec<LinkFeatures>,
}

impl LinkInputs {
    pub fn new(words: &[String], constants: Vec<ConstantInfo>, vocab: &Vocab) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Invalid("link matrix needs a non-empty question".into()));
        }
        if constants.is_empty() {
            return Err(Error::Invalid("link matrix needs at least one constant".into()));
        }
        let features = words
            .iter()
            .flat_map(|w| constants.iter().map(move |c| LinkFeatures::against_name(w, &c.tokens)))
            .collect();
        Ok(Self {
            words: words.to_vec(),
            word_ids: words.iter().map(|w| vocab.id(w)).collect(),
            constants,
            features,
        })
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_constants(&self) -> usize {
        self.constants.len()
    }

    pub fn feature(&self, word: usize, constant: usize) -> &LinkFeatures {
        &self.features[word * self.constants.len() + constant]
    }
}

/// Word and kind embedding tables under `prefix` (`prefix.word`, `prefix.kind`).
pub fn init_embeddings<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    vocab_size: usize,
    width: usize,
    rng: &mut R,
) {
    store.init_matrix(&format!("{prefix}.word"), vocab_size, width, rng);
    store.init_matrix(&format!("{prefix}.kind"), 3, width, rng);
}

/// Link scorer: `w1 . tanh(Ww word + Wc constant + Wf features + b0) + b1`.
pub fn init_link_scorer<R: Rng>(
    store: &mut ParameterStore,
    emb: usize,
    hidden: usize,
    rng: &mut R,
) {
    store.init_matrix("link.w_word", hidden, emb, rng);
    store.init_matrix("link.w_const", hidden, emb, rng);
    store.init_matrix("link.w_feat", hidden, NUM_LINK_FEATURES, rng);
    store.init_zeros("link.b0", &[hidden]);
    store.init_matrix("link.w1", 1, hidden, rng);
    store.init_zeros("link.b1", &[1]);
}

/// Embedding rows for `ids`, one vector each.
pub fn embed_words(tape: &mut Tape, prefix: &str, ids: &[usize]) -> Result<Vec<Var>> {
    let table = tape.param(&format!("{prefix}.word"))?;
    Ok(ids.iter().map(|&i| tape.row(table, i)).collect())
}

/// `r_v`: mean of the name-token embeddings plus the kind embedding, one row
/// per constant.
pub fn constant_embeddings(tape: &mut Tape, prefix: &str, constants: &[ConstantInfo]) -> Result<Var> {
    let table = tape.param(&format!("{prefix}.word"))?;
    let kinds = tape.param(&format!("{prefix}.kind"))?;
    let mut rows = Vec::with_capacity(constants.len());
    for c in constants {
        let k = tape.row(kinds, kind_row(c.id.kind));
        let r = if c.token_ids.is_empty() {
            k
        } else {
            let m = tape.rows_mean(table, &c.token_ids)?;
            tape.add(m, k)?
        };
        rows.push(r);
    }
    tape.stack_rows(&rows)
}

/// Score matrix `s_link(v, x_i)`, `words x constants`.
pub fn link_scores(tape: &mut Tape, words: Var, constants: Var, inputs: &LinkInputs) -> Result<Var> {
    let n = tape.rows(words);
    let v = tape.rows(constants);
    if n != inputs.num_words() || v != inputs.num_constants() {
        return Err(Error::Shape {
            op: "link_scores",
            left: vec![n, v],
            right: vec![inputs.num_words(), inputs.num_constants()],
        });
    }
    let ww = tape.param("link.w_word")?;
    let wc = tape.param("link.w_const")?;
    let wf = tape.param("link.w_feat")?;
    let b0 = tape.param("link.b0")?;
    let w1 = tape.param("link.w1")?;
    let b1 = tape.param("link.b1")?;

    let a = tape.linear(words, ww)?;
    let b = tape.linear(constants, wc)?;
    let feats: Vec<f64> = inputs.features.iter().flat_map(|f| f.to_input()).collect();
    let f = tape.constant(feats, n * v, NUM_LINK_FEATURES);
    let fp = tape.linear(f, wf)?;
    let word_pairs: std::rc::Rc<[(usize, usize)]> = (0..n * v).map(|k| (k, k / v)).collect();
    let const_pairs: std::rc::Rc<[(usize, usize)]> = (0..n * v).map(|k| (k, k % v)).collect();
    let ga = tape.scatter_rows(a, word_pairs, n * v);
    let gb = tape.scatter_rows(b, const_pairs, n * v);
    let pre = tape.add_n(&[fp, ga, gb])?;
    let pre = tape.add_row_bias(pre, b0)?;
    let hid = tape.tanh(pre);
    let out = tape.linear(hid, w1)?;
    let out = tape.add_row_bias(out, b1)?;
    tape.reshape(out, n, v)
}

/// Score of a single (word, constant) pair.
pub fn link_score(
    tape: &mut Tape,
    word: &str,
    constant: &ConstantInfo,
    vocab: &Vocab,
) -> Result<Var> {
    let inputs = LinkInputs::new(&[word.to_string()], vec![constant.clone()], vocab)?;
    let w = embed_words(tape, "emb", &inputs.word_ids)?;
    let w = tape.stack_rows(&w)?;
    let c = constant_embeddings(tape, "emb", &inputs.constants)?;
    let s = link_scores(tape, w, c, &inputs)?;
    tape.reshape(s, 1, 1)
}

/// Scores plus both softmax normalisations, all `words x constants`:
/// `p_word` rows sum to one over constants (`p_link(v | x_i)`), `p_const`
/// columns sum to one over words (`p_link(x_i | v)`).
#[derive(Clone, Copy, Debug)]
pub struct LinkMatrix {
    pub scores: Var,
    pub p_word: Var,
    pub p_const: Var,
    pub num_words: usize,
    pub num_constants: usize,
}

impl LinkMatrix {
    pub fn from_scores(tape: &mut Tape, scores: Var) -> Result<Self> {
        let (n, v) = tape.dims(scores);
        if n == 0 || v == 0 {
            return Err(Error::Invalid("empty link matrix".into()));
        }
        let p_word = tape.softmax_rows(scores)?;
        let st = tape.transpose(scores);
        let pc_t = tape.softmax_rows(st)?;
        let p_const = tape.transpose(pc_t);
        Ok(Self {
            scores,
            p_word,
            p_const,
            num_words: n,
            num_constants: v,
        })
    }

    pub fn values(&self, tape: &Tape) -> LinkMatrixValues {
        let grab = |v: Var| -> Vec<Vec<f64>> {
            tape.value(v)
                .chunks_exact(self.num_constants)
                .map(|r| r.to_vec())
                .collect()
        };
        LinkMatrixValues {
            scores: grab(self.scores),
            p_word: grab(self.p_word),
            p_const: grab(self.p_const),
        }
    }
}

/// Plain copies of a [`LinkMatrix`], `[word][constant]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMatrixValues {
    pub scores: Vec<Vec<f64>>,
    pub p_word: Vec<Vec<f64>>,
    pub p_const: Vec<Vec<f64>>,
}

/// Embeds the question and constants under `emb` and builds the link matrix.
pub fn build_link_matrix(tape: &mut Tape, inputs: &LinkInputs) -> Result<LinkMatrix> {
    let w = embed_words(tape, "emb", &inputs.word_ids)?;
    let w = tape.stack_rows(&w)?;
    let c = constant_embeddings(tape, "emb", &inputs.constants)?;
    let s = link_scores(tape, w, c, inputs)?;
    LinkMatrix::from_scores(tape, s)
}

/// `rho_v = max_i p_link(v | x_i)`, one entry per constant.
pub fn local_relevance(tape: &mut Tape, m: &LinkMatrix) -> Var {
    let t = tape.transpose(m.p_word);
    tape.max_rows(t)
}
