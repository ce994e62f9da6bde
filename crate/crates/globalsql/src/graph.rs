//! Typed multigraph over the schema: tables, columns, matched cell values and
//! an optional global node linked to everything else.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Schema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Table,
    Column,
    CellValue,
    Global,
}

/// Stable node identity: kind plus ordinal within that kind. Table and column
/// ordinals are schema indices, so ids survive sub-graph extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeId {
    pub fn table(index: usize) -> Self {
        Self { kind: NodeKind::Table, index }
    }
    pub fn column(index: usize) -> Self {
        Self { kind: NodeKind::Column, index }
    }
    pub fn cell(index: usize) -> Self {
        Self { kind: NodeKind::CellValue, index }
    }
    pub fn global() -> Self {
        Self { kind: NodeKind::Global, index: 0 }
    }
    pub fn is_constant(self) -> bool {
        matches!(self.kind, NodeKind::Table | NodeKind::Column)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    TableToColumn,
    ColumnToTable,
    ForeignToPrimary,
    PrimaryToForeign,
    GlobalLink,
    CellToColumn,
    ColumnToCell,
}

impl EdgeType {
    pub const ALL: [EdgeType; 7] = [
        EdgeType::TableToColumn,
        EdgeType::ColumnToTable,
        EdgeType::ForeignToPrimary,
        EdgeType::PrimaryToForeign,
        EdgeType::GlobalLink,
        EdgeType::CellToColumn,
        EdgeType::ColumnToCell,
    ];

    pub fn key(self) -> &'static str {
        match self {
            EdgeType::TableToColumn => "table_to_column",
            EdgeType::ColumnToTable => "column_to_table",
            EdgeType::ForeignToPrimary => "foreign_to_primary",
            EdgeType::PrimaryToForeign => "primary_to_foreign",
            EdgeType::GlobalLink => "global",
            EdgeType::CellToColumn => "cell_to_column",
            EdgeType::ColumnToCell => "column_to_cell",
        }
    }

    /// The tag of the edge running the other way.
    pub fn reverse(self) -> Self {
        match self {
            EdgeType::TableToColumn => EdgeType::ColumnToTable,
            EdgeType::ColumnToTable => EdgeType::TableToColumn,
            EdgeType::ForeignToPrimary => EdgeType::PrimaryToForeign,
            EdgeType::PrimaryToForeign => EdgeType::ForeignToPrimary,
            EdgeType::GlobalLink => EdgeType::GlobalLink,
            EdgeType::CellToColumn => EdgeType::ColumnToCell,
            EdgeType::ColumnToCell => EdgeType::CellToColumn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: NodeId,
    pub name: String,
    /// Parent table of a column, or parent column of a cell.
    pub owner: Option<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub tag: EdgeType,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SchemaGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
    #[serde(skip)]
    position: HashMap<NodeId, usize>,
}

impl PartialEq for SchemaGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

/// A cell whose text matched at least one question word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMatch {
    pub column: NodeId,
    pub node: NodeId,
    pub cell: String,
    pub words: BTreeSet<usize>,
}

impl SchemaGraph {
    fn push_node(&mut self, node: GraphNode) {
        self.position.insert(node.id, self.nodes.len());
        self.nodes.push(node);
    }

    fn reindex(&mut self) {
        self.position = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.position.contains_key(&id)
    }

    /// Dense row of `id` in this graph's node order.
    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.position.get(&id).copied()
    }

    pub fn node(&self, id: NodeId) -> Option<&GraphNode> {
        self.position(id).map(|i| &self.nodes[i])
    }

    pub fn has_global(&self) -> bool {
        self.contains(NodeId::global())
    }

    /// Table and column nodes, in graph order.
    pub fn constants(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .map(|n| n.id)
            .filter(|id| id.is_constant())
            .collect()
    }

    pub fn cells(&self) -> Vec<&GraphNode> {
        self.nodes
            .iter()
            .filter(|n| n.id.kind == NodeKind::CellValue)
            .collect()
    }

    /// `(target row, source row)` pairs grouped by edge tag.
    pub fn edges_by_type(&self) -> BTreeMap<EdgeType, Vec<(usize, usize)>> {
        let mut out: BTreeMap<EdgeType, Vec<(usize, usize)>> = BTreeMap::new();
        for e in &self.edges {
            out.entry(e.tag)
                .or_default()
                .push((self.position[&e.target], self.position[&e.source]));
        }
        out
    }

    fn add_edge_pair(&mut self, a: NodeId, b: NodeId, tag: EdgeType) {
        self.edges.push(Edge { source: a, target: b, tag });
        self.edges.push(Edge {
            source: b,
            target: a,
            tag: tag.reverse(),
        });
    }
}

/// One node per table and column; table/column and foreign/primary key edges
/// in both directions.
pub fn build_graph(schema: &Schema) -> Result<SchemaGraph> {
    schema
        .validate()
        .map_err(|e| Error::Graph(format!("cannot build graph: {e}")))?;
    let mut g = SchemaGraph::default();
    for (i, t) in schema.tables.iter().enumerate() {
        g.push_node(GraphNode {
            id: NodeId::table(i),
            name: t.clone(),
            owner: None,
        });
    }
    for (i, c) in schema.columns.iter().enumerate() {
        g.push_node(GraphNode {
            id: NodeId::column(i),
            name: schema.qualified_column(i),
            owner: c.table.map(NodeId::table),
        });
    }
    for (i, c) in schema.columns.iter().enumerate() {
        if let Some(t) = c.table {
            g.add_edge_pair(NodeId::table(t), NodeId::column(i), EdgeType::TableToColumn);
        }
    }
    for &(f, p) in &schema.foreign_keys {
        g.add_edge_pair(NodeId::column(f), NodeId::column(p), EdgeType::ForeignToPrimary);
    }
    Ok(g)
}

/// Adds the global node with a `GlobalLink` edge to and from every other node.
pub fn add_global_node(mut graph: SchemaGraph) -> Result<SchemaGraph> {
    if graph.has_global() {
        return Err(Error::Graph("graph already has a global node".into()));
    }
    let others: Vec<NodeId> = graph.nodes.iter().map(|n| n.id).collect();
    graph.push_node(GraphNode {
        id: NodeId::global(),
        name: "<global>".into(),
        owner: None,
    });
    for id in others {
        graph.add_edge_pair(NodeId::global(), id, EdgeType::GlobalLink);
    }
    Ok(graph)
}

pub fn cell_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A question word partially matches a cell when, lowercased, it is one of
/// the cell's whole tokens or equals the whole (trimmed) cell text.
pub fn partial_match(word: &str, cell: &str) -> bool {
    let w = word.trim().to_lowercase();
    if w.is_empty() {
        return false;
    }
    let c = cell.trim().to_lowercase();
    w == c || cell_tokens(&c).contains(&w)
}

/// Adds a node for every distinct cell of each listed column that partially
/// matches some question word, linked to its column in both directions.
/// `contents` pairs a schema column index with that column's cell texts.
pub fn attach_cell_nodes(
    mut graph: SchemaGraph,
    contents: &[(usize, Vec<String>)],
    question: &[String],
) -> Result<(SchemaGraph, Vec<CellMatch>)> {
    let mut matches = Vec::new();
    let mut next = graph
        .nodes
        .iter()
        .filter(|n| n.id.kind == NodeKind::CellValue)
        .count();
    let has_global = graph.has_global();
    for (col, cells) in contents {
        let column = NodeId::column(*col);
        if !graph.contains(column) {
            return Err(Error::Graph(format!("contents reference unknown column {col}")));
        }
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for cell in cells {
            let text = cell.trim();
            let key = text.to_lowercase();
            if text.is_empty() || seen.contains(&key) {
                continue;
            }
            let words: BTreeSet<usize> = question
                .iter()
                .enumerate()
                .filter(|(_, w)| partial_match(w, text))
                .map(|(i, _)| i)
                .collect();
            if words.is_empty() {
                continue;
            }
            seen.insert(key);
            let id = NodeId::cell(next);
            next += 1;
            graph.push_node(GraphNode {
                id,
                name: text.to_string(),
                owner: Some(column),
            });
            graph.add_edge_pair(column, id, EdgeType::ColumnToCell);
            if has_global {
                graph.add_edge_pair(NodeId::global(), id, EdgeType::GlobalLink);
            }
            matches.push(CellMatch {
                column,
                node: id,
                cell: text.to_string(),
                words,
            });
        }
    }
    if has_global {
        // keep the global node last
        let gpos = graph.position[&NodeId::global()];
        let g = graph.nodes.remove(gpos);
        graph.nodes.push(g);
        graph.reindex();
    }
    Ok((graph, matches))
}

/// Restriction of `graph` to `keep` plus the global node, with every edge
/// whose endpoints both survive. Node order follows the source graph.
pub fn induced_subgraph(graph: &SchemaGraph, keep: &BTreeSet<NodeId>) -> Result<SchemaGraph> {
    if !graph.has_global() {
        return Err(Error::Graph("induced sub-graph needs a global node".into()));
    }
    for id in keep {
        if !graph.contains(*id) {
            return Err(Error::Graph(format!("selected node {id:?} is not in the graph")));
        }
    }
    let survives = |id: &NodeId| id.kind == NodeKind::Global || keep.contains(id);
    let mut out = SchemaGraph {
        nodes: graph.nodes.iter().filter(|n| survives(&n.id)).cloned().collect(),
        edges: graph
            .edges
            .iter()
            .filter(|e| survives(&e.source) && survives(&e.target))
            .copied()
            .collect(),
        position: HashMap::new(),
    };
    out.reindex();
    Ok(out)
}

/// Rebuilds the node lookup after deserialisation.
pub fn restore_index(graph: &mut SchemaGraph) {
    graph.reindex();
}
