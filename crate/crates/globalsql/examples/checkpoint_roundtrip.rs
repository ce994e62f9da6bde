//! Trains a small model, writes a checkpoint, reloads it and confirms the
//! reloaded model evaluates identically.
//!
//! `cargo run --release --example checkpoint_roundtrip [dir]`

use std::path::PathBuf;

use globalsql::grammar::Grammar;
use globalsql::pipeline::{
    evaluate, generate_synthetic, load_checkpoint, save_checkpoint, train, Dataset, EvalMode, SynthSpec, TrainConfig,
};

fn main() -> globalsql::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("globalsql-checkpoint-example"));
    let corpus = generate_synthetic(&SynthSpec { schemas: 8, heldout_schemas: 2, train: 60, heldout: 20, ..SynthSpec::default() });
    let g = Grammar::sql();
    let train_set = Dataset::from_raw(corpus.databases.clone(), &corpus.train, &g);
    let heldout = Dataset::from_raw(corpus.databases, &corpus.heldout, &g);
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let (model, _) = train(&cfg, &train_set, None)?;

    save_checkpoint(&dir, &model, &cfg)?;
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        println!("{:<16} {:>8} bytes", entry.file_name().to_string_lossy(), entry.metadata()?.len());
    }
    let (loaded, _) = load_checkpoint(&dir)?;
    let (a, va) = evaluate(&model, &heldout, cfg.test_beam, cfg.max_decode_steps, EvalMode::Rerank, 1)?;
    let (b, vb) = evaluate(&loaded, &heldout, cfg.test_beam, cfg.max_decode_steps, EvalMode::Rerank, 1)?;
    println!("trained  overall {:.3} beam-hit {:.3}", a.overall, a.beam_hit);
    println!("reloaded overall {:.3} beam-hit {:.3}", b.overall, b.beam_hit);
    println!("identical verdicts: {}", va == vb && a == b);
    Ok(())
}
