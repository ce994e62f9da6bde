//! Data ingestion, the synthetic corpus, training, evaluation and
//! checkpoints.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{
    load_databases, load_dataset, read_contents, read_examples, read_tables, write_databases, write_examples,
    Database, Dataset, Example, Exclusion, RawExample, MAX_CONTENT_ROWS,
};
pub use eval::{decode, evaluate, write_report, Decoded, EvalMode, Metrics, Verdict};
pub use synth::{generate_synthetic, Corpus, SynthSpec};
pub use train::{build_vocab, train, train_model, EpochStats, TrainConfig};
