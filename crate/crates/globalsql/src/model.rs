//! Model configuration, parameter layout and the per-question structures
//! (graphs, cell matches, linking inputs) that do not depend on parameters.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::init_gating;
use crate::grammar::Grammar;
use crate::graph::{add_global_node, attach_cell_nodes, build_graph, CellMatch, EdgeType, NodeId, SchemaGraph};
use crate::linking::{init_embeddings, init_link_scorer, ConstantInfo, LinkInputs};
use crate::neural::{init_attention, init_bilstm, init_ff, init_gnn, init_lstm, ParameterStore};
use crate::reranker::init_reranker;
use crate::schema::Schema;
use crate::text::Vocab;

/// Network widths and propagation depths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Word, kind and rule embeddings; also the encoder graph node width.
    pub emb: usize,
    /// Per-direction width of the question encoder; states are `2 * hidden`.
    pub hidden: usize,
    pub link_hidden: usize,
    pub gate_width: usize,
    pub decoder: usize,
    pub attention: usize,
    pub rerank_width: usize,
    pub gate_steps: usize,
    pub encoder_steps: usize,
    pub rerank_steps: usize,
    /// Restrict decoding to `SELECT columns FROM tables`.
    pub projection_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            emb: 32,
            hidden: 32,
            link_hidden: 32,
            gate_width: 32,
            decoder: 64,
            attention: 32,
            rerank_width: 32,
            gate_steps: 2,
            encoder_steps: 2,
            rerank_steps: 2,
            projection_only: false,
        }
    }
}

impl ModelConfig {
    pub fn context_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn grammar(&self) -> Grammar {
        if self.projection_only {
            Grammar::projection_only()
        } else {
            Grammar::sql()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("emb", self.emb),
            ("hidden", self.hidden),
            ("link_hidden", self.link_hidden),
            ("gate_width", self.gate_width),
            ("decoder", self.decoder),
            ("attention", self.attention),
            ("rerank_width", self.rerank_width),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::Invalid(format!("model width `{name}` must be positive")));
            }
        }
        Ok(())
    }
}

/// Edge types of the encoder graph (everything except global links).
pub const ENCODER_EDGES: [EdgeType; 6] = [
    EdgeType::TableToColumn,
    EdgeType::ColumnToTable,
    EdgeType::ForeignToPrimary,
    EdgeType::PrimaryToForeign,
    EdgeType::CellToColumn,
    EdgeType::ColumnToCell,
];

/// Parameters, vocabulary and grammar of one parser.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub grammar: Grammar,
    pub store: ParameterStore,
}

impl Model {
    /// Randomly initialised model. Parameter groups: `emb.*` and `link.*`
    /// (linking), `qenc.*` (question encoder), `gate.*`, `enc.gnn.*`,
    /// `dec.*` and the re-ranker's private `rerank.*`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let ctx = c.context_width();
        let grammar = c.grammar();
        let rules = grammar.num_rules();
        let mut store = ParameterStore::new();

        init_embeddings(&mut store, "emb", vocab.len(), c.emb, &mut rng);
        init_link_scorer(&mut store, c.emb, c.link_hidden, &mut rng);
        init_bilstm(&mut store, "qenc", c.emb, c.hidden, &mut rng);
        init_gating(&mut store, c.emb, ctx, c.gate_width, &mut rng);
        init_gnn(&mut store, "enc.gnn", c.emb, &ENCODER_EDGES, &mut rng);

        let d = c.decoder;
        store.init_matrix("dec.rule_emb", rules, c.emb, &mut rng);
        store.init_matrix("dec.w_val", c.emb, ctx, &mut rng);
        init_ff(&mut store, "dec.init", &[ctx, d], &mut rng);
        init_lstm(&mut store, "dec.lstm", 2 * c.emb + ctx, d, &mut rng);
        init_attention(&mut store, "dec.att", d, ctx, c.attention, &mut rng);
        init_ff(&mut store, "dec.rule_out", &[d + ctx, rules], &mut rng);
        store.init_matrix("dec.w_graph", c.emb, d + ctx, &mut rng);
        store.init_matrix("dec.ptr.we", c.attention, ctx, &mut rng);
        store.init_matrix("dec.ptr.wc", c.attention, c.emb, &mut rng);
        store.init_matrix("dec.ptr.wd", c.attention, d + ctx, &mut rng);
        store.init_vector("dec.ptr.v", c.attention, &mut rng);

        init_reranker(&mut store, c, vocab.len(), &mut rng);
        Ok(Self { config, vocab, grammar, store })
    }

    /// Parameter names that belong to the re-ranker.
    pub fn is_rerank_param(name: &str) -> bool {
        name.starts_with("rerank.")
    }
}

/// Everything about one question over one database that the networks read
/// but never change.
#[derive(Clone, Debug)]
pub struct Instance {
    pub tokens: Vec<String>,
    /// Schema graph with matched cell nodes and no global node.
    pub graph: SchemaGraph,
    /// The same graph with the global node appended last.
    pub global_graph: SchemaGraph,
    pub cells: Vec<CellMatch>,
    /// Cell texts by cell-node index.
    pub cell_texts: Vec<String>,
    /// Tables then columns, in graph order.
    pub constants: Vec<NodeId>,
    pub link: LinkInputs,
}

impl Instance {
    /// `contents` pairs column indices with their (already capped) cells.
    pub fn new(
        schema: &Schema,
        tokens: Vec<String>,
        contents: &[(usize, Vec<String>)],
        vocab: &Vocab,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty question".into()));
        }
        let base = build_graph(schema)?;
        let constants = base.constants();
        let (graph, cells) = attach_cell_nodes(base, contents, &tokens)?;
        let global_graph = add_global_node(graph.clone())?;
        let infos = constants
            .iter()
            .map(|&c| ConstantInfo::from_schema(schema, c, vocab))
            .collect();
        let link = LinkInputs::new(&tokens, infos, vocab)?;
        let cell_texts = cells.iter().map(|c| c.cell.clone()).collect();
        Ok(Self { tokens, graph, global_graph, cells, cell_texts, constants, link })
    }

    pub fn num_constants(&self) -> usize {
        self.constants.len()
    }

    /// Position of a constant in [`constants`](Self::constants).
    pub fn constant_index(&self, id: NodeId) -> Option<usize> {
        self.graph.position(id).filter(|&p| p < self.constants.len())
    }

    /// `1.0` on `set`, `0.0` elsewhere, over the constants.
    pub fn indicator(&self, set: &BTreeSet<NodeId>) -> Vec<f64> {
        self.constants
            .iter()
            .map(|c| if set.contains(c) { 1.0 } else { 0.0 })
            .collect()
    }
}
