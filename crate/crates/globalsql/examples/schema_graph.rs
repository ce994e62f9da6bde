//! Builds the typed schema graph for a Spider-style tables record, attaches
//! cell nodes matched by a question and appends the global node.
//!
//! `cargo run --example schema_graph`

use serde_json::json;

use globalsql::graph::{add_global_node, attach_cell_nodes, build_graph};
use globalsql::pipeline::data::parse_schema_record;
use globalsql::text::tokenize_question;

fn main() -> globalsql::Result<()> {
    let record = json!({
        "db_id": "concert_singer",
        "table_names_original": ["singer", "song"],
        "column_names_original": [[-1, "*"], [0, "singer_id"], [0, "name"], [0, "country"],
                                  [1, "song_id"], [1, "title"], [1, "singer_id"]],
        "column_types": ["text", "number", "text", "text", "number", "text", "number"],
        "primary_keys": [1, 4],
        "foreign_keys": [[6, 1]]
    });
    let mut warnings = Vec::new();
    let schema = parse_schema_record(&record, 0, &mut warnings)?;
    let graph = build_graph(&schema)?;
    println!("{} nodes, {} directed edges", graph.num_nodes(), graph.edges().len());
    for (tag, pairs) in graph.edges_by_type() {
        println!("  {:<16} {}", tag.key(), pairs.len());
    }

    let contents = vec![(5, vec!["Hey Jude".to_string(), "Imagine".to_string()]), (3, vec!["France".to_string()])];
    let question = tokenize_question("Which singer from France sang Hey ?");
    let (graph, cells) = attach_cell_nodes(graph, &contents, &question)?;
    for c in &cells {
        let column = &schema.columns[c.column.index];
        let words: Vec<&str> = c.words.iter().map(|&w| question[w].as_str()).collect();
        println!("cell {:?} under {} matched by {:?}", c.cell, column.name, words);
    }

    let graph = add_global_node(graph)?;
    println!(
        "with cells and the global node: {} nodes, {} edges",
        graph.num_nodes(),
        graph.edges().len()
    );
    println!("{}", serde_json::to_string(&graph.nodes()[graph.num_nodes() - 1])?);
    Ok(())
}
