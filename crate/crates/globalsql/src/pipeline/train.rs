//! Training: relevance + decoding losses on every example, and the
//! re-ranking loss on gold-in-beam examples against sampled negatives.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::gating::relevance_loss_clamped;
use crate::model::{Instance, Model, ModelConfig};
use crate::neural::{Gradients, Optimizer, OptimizerKind, Tape, Var};
use crate::parser::{beam_search, decoding_loss, encode, BeamCandidate, Relevance};
use crate::reranker::{prepare, rerank_loss, rerank_score, RerankInputs};
use crate::sql::loose_exact_match;
use crate::text::{name_tokens, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Global gradient-norm clipping threshold (0 disables).
    pub clip: f64,
    pub epochs: usize,
    /// Examples per parameter update.
    pub batch_size: usize,
    pub train_beam: usize,
    pub test_beam: usize,
    pub negatives: usize,
    /// First epoch (0-based) in which the re-ranker is trained.
    pub rerank_start_epoch: usize,
    pub max_decode_steps: usize,
    pub decoding_weight: f64,
    pub relevance_weight: f64,
    pub rerank_weight: f64,
    pub clamp_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            model: ModelConfig::default(),
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            clip: 5.0,
            epochs: 20,
            batch_size: 1,
            train_beam: 40,
            test_beam: 10,
            negatives: 10,
            // the first beams are noise; negatives only teach once the decoder has some shape
            rerank_start_epoch: 2,
            max_decode_steps: crate::parser::DEFAULT_MAX_STEPS,
            decoding_weight: 1.0,
            relevance_weight: 1.0,
            rerank_weight: 1.0,
            clamp_eps: crate::gating::RELEVANCE_EPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Invalid(m));
        if self.train_beam < self.negatives + 1 {
            return bad(format!(
                "train beam {} cannot hold the gold query and {} negatives",
                self.train_beam, self.negatives
            ));
        }
        if self.test_beam == 0 || self.batch_size == 0 || self.max_decode_steps == 0 {
            return bad("test_beam, batch_size and max_decode_steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..0.5).contains(&self.clamp_eps) {
            return bad(format!("clamp_eps {} must lie in [0, 0.5)", self.clamp_eps));
        }
        Ok(())
    }
}

/// Vocabulary from training questions and the names of training schemas.
pub fn build_vocab(data: &Dataset) -> Vocab {
    let used: BTreeSet<&str> = data.examples.iter().map(|e| e.db_id.as_str()).collect();
    let mut words: Vec<String> = Vec::new();
    for e in &data.examples {
        words.extend(e.tokens.iter().cloned());
    }
    for (id, db) in &data.databases {
        if !used.contains(id.as_str()) {
            continue;
        }
        let s = &db.schema;
        for name in s.tables.iter().chain(s.columns.iter().map(|c| &c.name)) {
            words.extend(name_tokens(name));
        }
    }
    Vocab::from_words(words)
}

pub fn instance(data: &Dataset, e: &Example, vocab: &Vocab) -> Result<Instance> {
    let db = data.database(&e.db_id)?;
    Instance::new(&db.schema, e.tokens.clone(), &db.contents, vocab)
}

/// Loss totals of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub decoding: f64,
    pub relevance: f64,
    pub rerank: f64,
    /// Examples that contributed a re-ranking term.
    pub rerank_terms: usize,
    /// Examples whose gold query was in the training beam.
    pub gold_in_beam: usize,
    /// Examples on which the beam was run.
    pub beams: usize,
}

impl EpochStats {
    pub fn total(&self) -> f64 {
        self.decoding + self.relevance + self.rerank
    }
}

/// Losses of one training example, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub decoding: f64,
    pub relevance: f64,
    /// `None` when no re-ranking term was computed.
    pub rerank: Option<f64>,
    pub gold_in_beam: Option<bool>,
}

/// Negative candidates: beam entries that are neither the gold query nor
/// share its constant set (those would score exactly like the gold one).
pub fn negatives<'a>(beam: &'a [BeamCandidate], gold: &Example) -> Vec<&'a BeamCandidate> {
    beam.iter()
        .filter(|c| !loose_exact_match(&c.query, &gold.query) && c.constants != gold.constants)
        .collect()
}

/// Accumulates the gradients of one example into `grads` and returns its losses.
pub fn example_gradients(
    model: &Model,
    cfg: &TrainConfig,
    schema: &crate::schema::Schema,
    inst: &Instance,
    ex: &Example,
    with_rerank: bool,
    rng: &mut ChaCha8Rng,
    grads: &mut Option<Gradients>,
) -> Result<StepLosses> {
    let mut tape = Tape::new(&model.store);
    let enc = encode(&mut tape, model, inst, Relevance::Gated)?;
    let rho = enc.rho_global.expect("gated encoding");
    let rel = relevance_loss_clamped(&mut tape, rho, &inst.constants, &ex.constants, cfg.clamp_eps)?;
    let dec = decoding_loss(&mut tape, model, schema, inst, &enc, &ex.derivation)?;
    let a = tape.scale(rel, cfg.relevance_weight);
    let b = tape.scale(dec, cfg.decoding_weight);
    let total = tape.add(a, b)?;
    let mut out = StepLosses { decoding: tape.scalar(dec), relevance: tape.scalar(rel), ..Default::default() };
    let g = tape.backward(total)?;
    merge(grads, g);

    if with_rerank {
        let beam = beam_search(&mut tape, model, schema, inst, &enc, cfg.train_beam, cfg.max_decode_steps)?;
        out.gold_in_beam = Some(beam.iter().any(|c| loose_exact_match(&c.query, &ex.query)));
        let inputs = RerankInputs::from_encoding(&tape, &enc);
        if let Some((loss, g)) = rerank_gradients(model, cfg, inst, &inputs, ex, &beam, rng)? {
            out.rerank = Some(loss);
            merge(grads, g);
        }
    }
    Ok(out)
}

/// Re-ranking loss and gradients for one example: the gold constant set
/// against up to `cfg.negatives` sampled negatives. `None` when the gold
/// query is not in `beam` or there is no negative.
pub fn rerank_gradients(
    model: &Model,
    cfg: &TrainConfig,
    inst: &Instance,
    inputs: &RerankInputs,
    ex: &Example,
    beam: &[BeamCandidate],
    rng: &mut ChaCha8Rng,
) -> Result<Option<(f64, Gradients)>> {
    if !beam.iter().any(|c| loose_exact_match(&c.query, &ex.query)) {
        return Ok(None);
    }
    let pool = negatives(beam, ex);
    let chosen: Vec<&BeamCandidate> = pool.choose_multiple(rng, cfg.negatives).copied().collect();
    if chosen.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new(&model.store);
    let ctx = prepare(&mut tape, inst, inputs)?;
    let mut logits: Vec<Var> = Vec::with_capacity(chosen.len() + 1);
    logits.push(rerank_score(&mut tape, &model.config, inst, &ctx, &ex.constants)?);
    for c in &chosen {
        logits.push(rerank_score(&mut tape, &model.config, inst, &ctx, &c.constants)?);
    }
    let loss = rerank_loss(&mut tape, &logits, 0)?;
    let value = tape.scalar(loss);
    let weighted = tape.scale(loss, cfg.rerank_weight);
    Ok(Some((value, tape.backward(weighted)?)))
}

fn merge(acc: &mut Option<Gradients>, g: Gradients) {
    match acc {
        Some(a) => a.add(&g),
        None => *acc = Some(g),
    }
}

/// Progress callback: called after every epoch.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochStats);

/// Trains a fresh model on `data` and returns it with the per-epoch trace.
pub fn train(cfg: &TrainConfig, data: &Dataset, progress: Option<Progress>) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    let vocab = build_vocab(data);
    let model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;
    train_model(model, cfg, data, progress)
}

/// Continues training `model`.
pub fn train_model(
    mut model: Model,
    cfg: &TrainConfig,
    data: &Dataset,
    mut progress: Option<Progress>,
) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let instances = data
        .examples
        .iter()
        .map(|e| instance(data, e, &model.vocab))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.clip);
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let with_rerank = epoch >= cfg.rerank_start_epoch;
        let mut stats = EpochStats { epoch, ..Default::default() };
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = None;
            for &i in batch {
                let ex = &data.examples[i];
                let schema = &data.database(&ex.db_id)?.schema;
                let l = example_gradients(&model, cfg, schema, &instances[i], ex, with_rerank, &mut rng, &mut grads)?;
                let total = l.decoding + l.relevance + l.rerank.unwrap_or(0.0);
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        detail: format!(
                            "non-finite loss on example {i} (decoding {}, relevance {}, rerank {:?})",
                            l.decoding, l.relevance, l.rerank
                        ),
                    });
                }
                stats.decoding += l.decoding;
                stats.relevance += l.relevance;
                if let Some(r) = l.rerank {
                    stats.rerank += r;
                    stats.rerank_terms += 1;
                }
                if let Some(hit) = l.gold_in_beam {
                    stats.beams += 1;
                    stats.gold_in_beam += usize::from(hit);
                }
            }
            let grads = grads.expect("non-empty batch");
            if !grads.is_finite() {
                return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
            }
            opt.apply(&mut model.store, &grads);
            step += 1;
        }
        if let Some(p) = progress.as_mut() {
            p(&stats);
        }
        trace.push(stats);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Grammar;
    use crate::pipeline::data::{Database, RawExample};
    use crate::schema::fixtures::concert_singer;

    fn one_example() -> Dataset {
        let s = concert_singer();
        let mut dbs = std::collections::BTreeMap::new();
        dbs.insert(s.db_id.clone(), Database::without_contents(s));
        let raw = [RawExample {
            db_id: "concert_singer".into(),
            question: "what is the name of every singer from France".into(),
            query: "SELECT singer.name FROM singer WHERE singer.country = 'France'".into(),
        }];
        Dataset::from_raw(dbs, &raw, &Grammar::sql())
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                emb: 8,
                hidden: 6,
                link_hidden: 6,
                gate_width: 6,
                decoder: 8,
                attention: 6,
                rerank_width: 6,
                ..ModelConfig::default()
            },
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            epochs: 3,
            train_beam: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_rejects_small_train_beam() {
        let c = TrainConfig { train_beam: 10, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn equal_seeds_give_identical_traces() {
        let data = one_example();
        let (a, ta) = train(&tiny(), &data, None).unwrap();
        let (b, tb) = train(&tiny(), &data, None).unwrap();
        assert_eq!(ta, tb);
        for ((na, pa), (nb, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data, pb.data);
        }
    }

    #[test]
    fn decoding_loss_falls_while_overfitting() {
        let data = one_example();
        let cfg = TrainConfig { epochs: 50, rerank_start_epoch: usize::MAX, ..tiny() };
        let (_, trace) = train(&cfg, &data, None).unwrap();
        assert!(trace.iter().all(|s| s.rerank_terms == 0 && s.beams == 0));
        let losses: Vec<f64> = trace.iter().map(|s| s.decoding).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn rerank_term_needs_gold_in_beam() {
        let data = one_example();
        let cfg = tiny();
        let model = Model::new(cfg.model.clone(), build_vocab(&data), 3).unwrap();
        let ex = &data.examples[0];
        let inst = instance(&data, ex, &model.vocab).unwrap();
        let schema = &data.databases["concert_singer"].schema;
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated).unwrap();
        let inputs = RerankInputs::from_encoding(&tape, &enc);
        let cand = |sql: &str| {
            let query = crate::sql::parse_sql(sql, schema).unwrap();
            BeamCandidate {
                decisions: vec![],
                constants: crate::sql::extract_constants(&query, schema),
                query,
                log_prob: 0.0,
                rerank_logit: None,
            }
        };
        let other = cand("SELECT singer.country FROM singer");
        let gold = cand(&ex.sql);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let miss = rerank_gradients(&model, &cfg, &inst, &inputs, ex, &[other.clone()], &mut rng).unwrap();
        assert!(miss.is_none());
        let alone = rerank_gradients(&model, &cfg, &inst, &inputs, ex, &[gold.clone()], &mut rng).unwrap();
        assert!(alone.is_none());

        let (loss, g) = rerank_gradients(&model, &cfg, &inst, &inputs, ex, &[other, gold], &mut rng)
            .unwrap()
            .unwrap();
        assert!(loss > 0.0 && loss.is_finite());
        let mut touched = false;
        for (name, t) in g.iter() {
            let zero = t.data.iter().all(|&x| x == 0.0);
            if Model::is_rerank_param(name) {
                touched |= !zero;
            } else {
                assert!(zero, "{name}");
            }
        }
        assert!(touched);
    }

    #[test]
    fn negatives_exclude_gold_equivalents() {
        let data = one_example();
        let ex = &data.examples[0];
        let schema = &data.databases["concert_singer"].schema;
        let cand = |sql: &str| {
            let query = crate::sql::parse_sql(sql, schema).unwrap();
            BeamCandidate {
                decisions: vec![],
                constants: crate::sql::extract_constants(&query, schema),
                query,
                log_prob: 0.0,
                rerank_logit: None,
            }
        };
        let beam = [
            cand(&ex.sql),
            cand("SELECT singer.name FROM singer WHERE singer.country = 'France' AND singer.country = 'France'"),
            cand("SELECT singer.name FROM singer WHERE singer.country LIKE '%France%'"),
            cand("SELECT singer.country FROM singer"),
        ];
        let negs = negatives(&beam, ex);
        assert_eq!(negs.len(), 1);
        assert_eq!(negs[0].query, beam[3].query);
    }
}
