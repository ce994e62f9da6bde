//! Generates the seeded synthetic corpus, trains the full model and reports
//! held-out accuracy in every evaluation mode.
//!
//! `cargo run --release --example synthetic_end_to_end [epochs] [learning-rate] [sgd|adam]`

use std::time::Instant;

use globalsql::grammar::Grammar;
use globalsql::pipeline::{evaluate, generate_synthetic, train, Dataset, EvalMode, SynthSpec, TrainConfig};

fn main() -> globalsql::Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(e) = std::env::args().nth(1) {
        cfg.epochs = e.parse().expect("epochs must be an integer");
    }
    if let Some(lr) = std::env::args().nth(2) {
        cfg.learning_rate = lr.parse().expect("learning rate must be a number");
    }
    if let Some(o) = std::env::args().nth(3) {
        cfg.optimizer = match o.as_str() {
            "sgd" => globalsql::neural::OptimizerKind::Sgd,
            "adam" => globalsql::neural::OptimizerKind::Adam,
            _ => panic!("optimizer must be sgd or adam"),
        };
    }
    let spec = SynthSpec::default();
    let corpus = generate_synthetic(&spec);
    let grammar = Grammar::sql();
    let train_set = Dataset::from_raw(corpus.databases.clone(), &corpus.train, &grammar);
    let heldout = Dataset::from_raw(corpus.databases, &corpus.heldout, &grammar);
    println!(
        "corpus: {} schemas, {} train, {} held-out examples",
        spec.schemas,
        train_set.examples.len(),
        heldout.examples.len()
    );

    let start = Instant::now();
    let mut report = |s: &globalsql::pipeline::EpochStats| {
        println!(
            "epoch {:>2}  decoding {:>9.3}  relevance {:>8.3}  rerank {:>8.3} ({} terms, gold in beam {}/{})  {:>6.1}s",
            s.epoch,
            s.decoding,
            s.relevance,
            s.rerank,
            s.rerank_terms,
            s.gold_in_beam,
            s.beams,
            start.elapsed().as_secs_f64()
        );
    };
    let (model, _) = train(&cfg, &train_set, Some(&mut report))?;

    for mode in EvalMode::ALL {
        let (m, _) = evaluate(&model, &heldout, cfg.test_beam, cfg.max_decode_steps, mode, 1)?;
        println!(
            "{:<12} overall {:.3}  single {:.3}  multi {:.3}  beam-hit {:.3}  ({:.1}s)",
            mode.as_str(),
            m.overall,
            m.single,
            m.multi,
            m.beam_hit,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
