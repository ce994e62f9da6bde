//! Prints the lexical features linking each question word to each schema
//! constant, and the attention of an untrained link scorer.
//!
//! `cargo run --example schema_linking`

use globalsql::linking::build_link_matrix;
use globalsql::model::{Instance, Model, ModelConfig};
use globalsql::neural::Tape;
use globalsql::schema::{Column, Schema, ValueType};
use globalsql::text::{name_tokens, tokenize_question, Vocab};

fn main() -> globalsql::Result<()> {
    let col = |t, name: &str, ty| Column { table: Some(t), name: name.into(), ty };
    let schema = Schema {
        db_id: "school".into(),
        tables: vec!["student".into(), "course".into()],
        columns: vec![
            Column { table: None, name: "*".into(), ty: ValueType::Text },
            col(0, "student_id", ValueType::Number),
            col(0, "first_name", ValueType::Text),
            col(1, "course_id", ValueType::Number),
            col(1, "course_title", ValueType::Text),
        ],
        primary_keys: [1, 3].into_iter().collect(),
        foreign_keys: Default::default(),
    };
    let question = tokenize_question("List the first names of students");
    let mut words = question.clone();
    words.extend(schema.tables.iter().chain(schema.columns.iter().map(|c| &c.name)).flat_map(|n| name_tokens(n)));
    let model = Model::new(ModelConfig::default(), Vocab::from_words(words), 3)?;
    let inst = Instance::new(&schema, question.clone(), &[], &model.vocab)?;

    let names: Vec<String> = inst
        .constants
        .iter()
        .map(|id| match id.kind {
            globalsql::graph::NodeKind::Table => schema.tables[id.index].clone(),
            _ => schema.columns[id.index].name.clone(),
        })
        .collect();
    println!("features (edit distance, overlap, exact, prefix) for each word against each constant:");
    for (w, word) in question.iter().enumerate() {
        let hits: Vec<String> = (0..inst.num_constants())
            .map(|c| (c, inst.link.feature(w, c)))
            .filter(|(_, f)| f.exact_match + f.prefix_match > 0 || f.overlap_fraction > 0.0)
            .map(|(c, f)| format!("{}({},{:.2},{},{})", names[c], f.edit_distance, f.overlap_fraction, f.exact_match, f.prefix_match))
            .collect();
        println!("  {word:<10} {}", hits.join(" "));
    }

    let mut tape = Tape::inference(&model.store);
    let m = build_link_matrix(&mut tape, &inst.link)?;
    let v = m.values(&tape);
    println!("\nmost attended constant per word (untrained scorer):");
    for (w, word) in question.iter().enumerate() {
        let (best, p) = v.p_word[w]
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
        println!("  {word:<10} {:<14} {p:.3}", names[best]);
    }
    Ok(())
}
