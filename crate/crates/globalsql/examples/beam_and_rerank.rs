//! Decodes held-out questions with beam search and shows how the
//! constant-set re-ranker reorders the beam.
//!
//! `cargo run --release --example beam_and_rerank [epochs] [beam]`

use globalsql::cli::constant_name;
use globalsql::grammar::Grammar;
use globalsql::model::Instance;
use globalsql::pipeline::{decode, generate_synthetic, train, Dataset, EvalMode, SynthSpec, TrainConfig};
use globalsql::sql::{loose_exact_match, sql_text};

fn main() -> globalsql::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(8, |e| e.parse().expect("epochs must be an integer"));
    let beam = args.next().map_or(5, |k| k.parse().expect("beam must be an integer"));
    let corpus = generate_synthetic(&SynthSpec { schemas: 12, heldout_schemas: 3, train: 150, heldout: 4, ..SynthSpec::default() });
    let g = Grammar::sql();
    let train_set = Dataset::from_raw(corpus.databases.clone(), &corpus.train, &g);
    let heldout = Dataset::from_raw(corpus.databases, &corpus.heldout, &g);
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let (model, _) = train(&cfg, &train_set, None)?;

    for ex in &heldout.examples {
        let db = heldout.database(&ex.db_id)?;
        let inst = Instance::new(&db.schema, ex.tokens.clone(), &db.contents, &model.vocab)?;
        let out = decode(&model, &db.schema, &inst, beam, cfg.max_decode_steps, EvalMode::Rerank, None)?;
        println!("{}\n  gold: {}", ex.question, ex.sql);
        for (i, c) in out.candidates.iter().enumerate() {
            let chosen = if Some(i) == out.chosen { "=>" } else { "  " };
            let ok = if loose_exact_match(&c.query, &ex.query) { "ok" } else { "  " };
            let consts: Vec<String> = c.constants.iter().map(|&id| constant_name(&db.schema, id)).collect();
            println!(
                "  {chosen} {ok} log p {:>7.2}  logit {:>6.2}  {}  {{{}}}",
                c.log_prob,
                c.rerank_logit.unwrap_or(f64::NAN),
                sql_text(&c.query, &db.schema),
                consts.join(", ")
            );
        }
        println!();
    }
    Ok(())
}
