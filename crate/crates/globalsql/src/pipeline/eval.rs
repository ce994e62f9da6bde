//! Evaluation by loose exact match, with Single/Multi and beam-hit
//! breakdowns, and the oracle relevance/ranking experiments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{Dataset, Example};
use super::train::instance;
use crate::error::{Error, Result};
use crate::model::{Instance, Model};
use crate::neural::Tape;
use crate::parser::{beam_search, encode, BeamCandidate, Relevance};
use crate::reranker::{oracle_relevance, prepare, rerank_score, select_final, RerankInputs};
use crate::schema::Schema;
use crate::sql::{loose_exact_match, sql_text};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Top-1 of the beam.
    Base,
    /// Learned re-ranker over the beam.
    Rerank,
    /// Oracle relevance at the encoder input, learned re-ranker.
    OracleGate,
    /// Oracle relevance and oracle ranking (logit 1 iff the constant set is gold).
    OracleFull,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [EvalMode::Base, EvalMode::Rerank, EvalMode::OracleGate, EvalMode::OracleFull];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Base => "base",
            EvalMode::Rerank => "rerank",
            EvalMode::OracleGate => "oracle-gate",
            EvalMode::OracleFull => "oracle-full",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle-gate+oracle-rank" => Ok(EvalMode::OracleFull),
            _ => EvalMode::ALL
                .into_iter()
                .find(|m| m.as_str() == s)
                .ok_or_else(|| Error::Invalid(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

/// Outcome on one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub index: usize,
    pub db_id: String,
    pub question: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub in_beam: bool,
    pub single: bool,
    pub beam_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: EvalMode,
    pub overall: f64,
    pub single: f64,
    pub multi: f64,
    pub beam_hit: f64,
    pub n: usize,
    pub n_single: usize,
    pub n_multi: usize,
    pub exclusions: usize,
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_verdicts(mode: EvalMode, verdicts: &[Verdict], exclusions: usize) -> Self {
        let count = |f: &dyn Fn(&Verdict) -> bool| verdicts.iter().filter(|v| f(v)).count();
        let n = verdicts.len();
        let n_single = count(&|v| v.single);
        let n_multi = n - n_single;
        Self {
            mode,
            overall: fraction(count(&|v| v.correct), n),
            single: fraction(count(&|v| v.correct && v.single), n_single),
            multi: fraction(count(&|v| v.correct && !v.single), n_multi),
            beam_hit: fraction(count(&|v| v.in_beam), n),
            n,
            n_single,
            n_multi,
            exclusions,
        }
    }
}

/// Beam candidates with re-rank logits attached per `mode`, and the index
/// of the final choice (`None` for an empty beam).
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub candidates: Vec<BeamCandidate>,
    pub chosen: Option<usize>,
}

/// Decodes one question. `gold` is required by the oracle modes.
pub fn decode(
    model: &Model,
    schema: &Schema,
    inst: &Instance,
    beam: usize,
    max_steps: usize,
    mode: EvalMode,
    gold: Option<&Example>,
) -> Result<Decoded> {
    let oracle = match (mode, gold) {
        (EvalMode::OracleGate | EvalMode::OracleFull, Some(g)) => Some(g),
        (EvalMode::OracleGate | EvalMode::OracleFull, None) => {
            return Err(Error::Invalid(format!("mode {mode} needs the gold query")))
        }
        _ => None,
    };
    let rho = oracle.map(|g| oracle_relevance(&g.query, schema, inst));
    let relevance = match &rho {
        Some(r) => Relevance::Fixed(r),
        None => Relevance::Gated,
    };
    let mut tape = Tape::inference(&model.store);
    let enc = encode(&mut tape, model, inst, relevance)?;
    let mut candidates = beam_search(&mut tape, model, schema, inst, &enc, beam, max_steps)?;
    if candidates.is_empty() {
        return Ok(Decoded { candidates, chosen: None });
    }
    let chosen = match mode {
        EvalMode::Base => 0,
        EvalMode::Rerank | EvalMode::OracleGate => {
            let inputs = RerankInputs::from_encoding(&tape, &enc);
            let mut rt = Tape::inference(&model.store);
            let ctx = prepare(&mut rt, inst, &inputs)?;
            for c in candidates.iter_mut() {
                let s = rerank_score(&mut rt, &model.config, inst, &ctx, &c.constants)?;
                c.rerank_logit = Some(rt.scalar(s));
            }
            select_final(&candidates)?
        }
        EvalMode::OracleFull => {
            let gold = oracle.expect("oracle mode has gold");
            for c in candidates.iter_mut() {
                c.rerank_logit = Some(if c.constants == gold.constants { 1.0 } else { 0.0 });
            }
            select_final(&candidates)?
        }
    };
    Ok(Decoded { candidates, chosen: Some(chosen) })
}

pub fn evaluate_example(
    model: &Model,
    data: &Dataset,
    index: usize,
    beam: usize,
    max_steps: usize,
    mode: EvalMode,
) -> Result<Verdict> {
    let ex = &data.examples[index];
    let schema = &data.database(&ex.db_id)?.schema;
    let inst = instance(data, ex, &model.vocab)?;
    let out = decode(model, schema, &inst, beam, max_steps, mode, Some(ex))?;
    let pred = out.chosen.map(|k| &out.candidates[k]);
    Ok(Verdict {
        index,
        db_id: ex.db_id.clone(),
        question: ex.question.clone(),
        gold: sql_text(&ex.query, schema),
        predicted: pred.map(|c| sql_text(&c.query, schema)),
        correct: pred.is_some_and(|c| loose_exact_match(&c.query, &ex.query)),
        in_beam: out.candidates.iter().any(|c| loose_exact_match(&c.query, &ex.query)),
        single: ex.is_single_table(),
        beam_size: out.candidates.len(),
    })
}

/// Evaluates every example of `data`, splitting the work over `threads`
/// workers. Verdicts come back in example order regardless of `threads`.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    beam: usize,
    max_steps: usize,
    mode: EvalMode,
    threads: usize,
) -> Result<(Metrics, Vec<Verdict>)> {
    let n = data.examples.len();
    let threads = threads.clamp(1, n.max(1));
    let verdicts: Vec<Verdict> = if threads == 1 {
        (0..n)
            .map(|i| evaluate_example(model, data, i, beam, max_steps, mode))
            .collect::<Result<_>>()?
    } else {
        let chunk = n.div_ceil(threads);
        let parts: Vec<Result<Vec<Verdict>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let range = (t * chunk).min(n)..((t + 1) * chunk).min(n);
                    scope.spawn(move || {
                        range
                            .map(|i| evaluate_example(model, data, i, beam, max_steps, mode))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(n);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let metrics = Metrics::from_verdicts(mode, &verdicts, data.exclusions.len());
    Ok((metrics, verdicts))
}

/// Metrics as pretty JSON and verdicts as JSON lines.
pub fn write_report(dir: &std::path::Path, metrics: &Metrics, verdicts: &[Verdict]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(metrics)? + "\n")?;
    let mut lines = String::new();
    for v in verdicts {
        lines.push_str(&serde_json::to_string(v)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("verdicts.jsonl"), lines)?;
    Ok(())
}
