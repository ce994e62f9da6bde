//! Trains briefly on a synthetic corpus, then shows, for a held-out
//! question on an unseen schema, the local (link-only) relevance next to
//! the gated global relevance of every schema constant.
//!
//! `cargo run --release --example relevance_gating [epochs]`

use globalsql::cli::constant_name;
use globalsql::grammar::Grammar;
use globalsql::model::Instance;
use globalsql::neural::Tape;
use globalsql::parser::{encode, Relevance};
use globalsql::pipeline::{generate_synthetic, train, Dataset, SynthSpec, TrainConfig};

fn main() -> globalsql::Result<()> {
    let epochs = std::env::args().nth(1).map_or(6, |e| e.parse().expect("epochs must be an integer"));
    let corpus = generate_synthetic(&SynthSpec { schemas: 12, heldout_schemas: 3, train: 120, heldout: 10, ..SynthSpec::default() });
    let g = Grammar::sql();
    let train_set = Dataset::from_raw(corpus.databases.clone(), &corpus.train, &g);
    let heldout = Dataset::from_raw(corpus.databases, &corpus.heldout, &g);
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let (model, stats) = train(&cfg, &train_set, None)?;
    let last = stats.last().expect("at least one epoch");
    println!("after {epochs} epochs: relevance loss {:.3} per epoch", last.relevance);

    let ex = &heldout.examples[0];
    let db = heldout.database(&ex.db_id)?;
    println!("\n{}\n  gold: {}\n", ex.question, ex.sql);
    let inst = Instance::new(&db.schema, ex.tokens.clone(), &db.contents, &model.vocab)?;
    let mut tape = Tape::inference(&model.store);
    let enc = encode(&mut tape, &model, &inst, Relevance::Gated)?;
    let local = tape.value(enc.rho_local).to_vec();
    let global = tape.value(enc.rho_global.expect("gated encoding")).to_vec();
    println!("{:<28} {:>6} {:>6}  gold", "constant", "local", "global");
    for (k, &id) in inst.constants.iter().enumerate() {
        let mark = if ex.constants.contains(&id) { "*" } else { "" };
        println!("{:<28} {:>6.3} {:>6.3}  {mark}", constant_name(&db.schema, id), local[k], global[k]);
    }
    Ok(())
}
