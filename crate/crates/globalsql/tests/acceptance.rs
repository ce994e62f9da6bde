//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion,
//! then fails if any criterion failed.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use globalsql::cli;
use globalsql::gating::{gate, relevance_loss, GateInputs};
use globalsql::grammar::Grammar;
use globalsql::graph::{add_global_node, build_graph, EdgeType, NodeId, NodeKind};
use globalsql::linking::{link_score, ConstantInfo};
use globalsql::model::{Instance, Model, ModelConfig};
use globalsql::neural::{
    additive_attention, bilstm_encode, check_gradients, ff, init_attention, init_bilstm, init_ff,
    init_gnn, prepare_keys, GnnLayer, GradCheckReport, ParameterStore, Tape, Var,
};
use globalsql::parser::{
    advance, beam_search, decode_step, decoding_loss, encode, greedy_decode, initial_state,
    select_db_constant, BeamCandidate, Relevance,
};
use globalsql::pipeline::{
    decode, evaluate, generate_synthetic, read_contents, train, Database, Dataset, EvalMode, Metrics,
    RawExample, SynthSpec, TrainConfig, MAX_CONTENT_ROWS,
};
use globalsql::reranker::{prepare, rerank_loss, rerank_score, select_final, RerankInputs};
use globalsql::schema::{Schema, ValueType};
use globalsql::sql::{extract_constants, loose_exact_match, parse_sql};
use globalsql::text::tokenize_question;

use common::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn emit(line: &str) {
    // bypass the test harness capture so the verdicts always show
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

// ---------------------------------------------------------------------------
// 1. gradient integrity
// ---------------------------------------------------------------------------

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `sum(x * w)` for a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var, globalsql::Error> {
    let (r, c) = tape.dims(x);
    let flat = tape.reshape(x, r * c, 1)?;
    let w = tape.vector(random_vec(rng, r * c));
    tape.dot(flat, w)
}

fn small_schema(rng: &mut ChaCha8Rng) -> Schema {
    let tables = rng.gen_range(1..=2);
    let mut columns = vec![star()];
    for t in 0..tables {
        for k in 0..rng.gen_range(1..=2) {
            columns.push(col(t, &format!("c{t}{k}"), ValueType::Number));
        }
    }
    Schema {
        db_id: "g".into(),
        tables: (0..tables).map(|t| format!("t{t}")).collect(),
        columns,
        primary_keys: BTreeSet::new(),
        foreign_keys: BTreeSet::new(),
    }
}

fn grad_ops(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, globalsql::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // ff
    {
        let dims = [rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(2..5)];
        let mut store = ParameterStore::new();
        init_ff(&mut store, "f", &dims, &mut rng);
        let x = random_vec(&mut rng, dims[0]);
        let s = rng.gen();
        let rep = check_gradients(&store, EPS, None, None, |t| {
            let xv = t.vector(x.clone());
            let y = ff(t, "f", xv)?;
            project(t, y, &mut ChaCha8Rng::seed_from_u64(s))
        })?;
        out.push(("ff", rep));
    }
    // bilstm_encode
    {
        let (din, h, len) = (rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(2..4));
        let mut store = ParameterStore::new();
        init_bilstm(&mut store, "l", din, h, &mut rng);
        let xs: Vec<Vec<f64>> = (0..len).map(|_| random_vec(&mut rng, din)).collect();
        let s = rng.gen();
        let rep = check_gradients(&store, EPS, None, None, |t| {
            let inputs: Vec<Var> = xs.iter().map(|x| t.vector(x.clone())).collect();
            let states = bilstm_encode(t, "l", &inputs)?;
            let rows = t.stack_rows(&states)?;
            project(t, rows, &mut ChaCha8Rng::seed_from_u64(s))
        })?;
        out.push(("bilstm_encode", rep));
    }
    // additive_attention
    {
        let (q, k, w, n) = (rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(2..5));
        let mut store = ParameterStore::new();
        init_attention(&mut store, "a", q, k, w, &mut rng);
        store.init_vector("keys", n * k, &mut rng);
        let query = random_vec(&mut rng, q);
        let s = rng.gen();
        let rep = check_gradients(&store, EPS, None, None, |t| {
            let kv = t.param("keys")?;
            let keys: Vec<Var> = (0..n).map(|i| t.slice(kv, i * k, k)).collect();
            let prepared = prepare_keys(t, "a", &keys)?;
            let qv = t.vector(query.clone());
            let (alpha, ctx) = additive_attention(t, "a", qv, &prepared)?;
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let a = project(t, alpha, &mut r)?;
            let c = project(t, ctx, &mut r)?;
            t.add(a, c)
        })?;
        out.push(("additive_attention", rep));
    }
    // gnn_propagate
    {
        let graph = build_graph(&small_schema(&mut rng))?;
        let width = rng.gen_range(2..4);
        let mut store = ParameterStore::new();
        init_gnn(&mut store, "g", width, &EdgeType::ALL, &mut rng);
        let x = random_vec(&mut rng, graph.num_nodes() * width);
        let s = rng.gen();
        let rep = check_gradients(&store, EPS, None, None, |t| {
            let xv = t.constant(x.clone(), graph.num_nodes(), width);
            let h = GnnLayer::new("g", 2).propagate(t, xv, &graph)?;
            project(t, h, &mut ChaCha8Rng::seed_from_u64(s))
        })?;
        out.push(("gnn_propagate", rep));
    }
    // gate
    {
        let graph = add_global_node(build_graph(&small_schema(&mut rng))?)?;
        let n = graph.num_nodes() - 1;
        let (emb, ctx, width) = (rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(2..4));
        let mut store = ParameterStore::new();
        globalsql::gating::init_gating(&mut store, emb, ctx, width, &mut rng);
        let (r, h, p) = (random_vec(&mut rng, n * emb), random_vec(&mut rng, n * ctx), random_vec(&mut rng, n));
        let s = rng.gen();
        let rep = check_gradients(&store, EPS, None, None, |t| {
            let inputs = GateInputs {
                r: t.constant(r.clone(), n, emb),
                hbar: t.constant(h.clone(), n, ctx),
                rho: t.vector(p.iter().map(|x| x.abs()).collect()),
            };
            let rho = gate(t, &graph, &inputs, n, 2)?;
            project(t, rho, &mut ChaCha8Rng::seed_from_u64(s))
        })?;
        out.push(("gate", rep));
    }
    // relevance_loss
    {
        let n = rng.gen_range(2..6);
        let constants: Vec<NodeId> = (0..n).map(NodeId::column).collect();
        let gold: BTreeSet<NodeId> = constants.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        let mut store = ParameterStore::new();
        store.init_vector("logits", n, &mut rng);
        let rep = check_gradients(&store, EPS, None, None, |t| {
            let l = t.param("logits")?;
            let rho = t.sigmoid(l);
            relevance_loss(t, rho, &constants, &gold)
        })?;
        out.push(("relevance_loss", rep));
    }

    // the model-level operations on the fixture database
    let db = Database { schema: concert_singer(), contents: song_contents() };
    let question = "Which singer from France sang Hey ?";
    let ex = example(&db, question, "SELECT singer.name FROM singer JOIN song ON song.singer_id = singer.singer_id WHERE singer.country = 'France'");
    let mut cfg = tiny_config();
    cfg.emb = rng.gen_range(3..6);
    let (model, inst) = model_and_instance(cfg, &db, question, rng.gen());
    let schema = &db.schema;

    // link_score
    {
        let c = ConstantInfo::from_schema(schema, NodeId::column(rng.gen_range(1..schema.columns.len())), &model.vocab);
        let word = inst.tokens[rng.gen_range(0..inst.tokens.len())].clone();
        let rep = check_gradients(&model.store, EPS, None, None, |t| link_score(t, &word, &c, &model.vocab))?;
        out.push(("link_score", rep));
    }
    // decoding_loss, through the gated encoder, on a short derivation: over
    // long ones the loss grows and central differences lose the digits
    {
        let short = ["SELECT name FROM singer", "SELECT country FROM singer", "SELECT name FROM song"];
        let gold = example(&db, question, short[rng.gen_range(0..short.len())]);
        let rep = check_gradients(&model.store, EPS, None, Some(4), |t| {
            let enc = encode(t, &model, &inst, Relevance::Gated)?;
            decoding_loss(t, &model, schema, &inst, &enc, &gold.derivation)
        })?;
        out.push(("decoding_loss", rep));
    }
    // rerank_score and rerank_loss over candidate constant sets
    {
        let mut tape = Tape::inference(&model.store);
        let enc = encode(&mut tape, &model, &inst, Relevance::Gated)?;
        let inputs = RerankInputs::from_encoding(&tape, &enc);
        let mut sets = vec![ex.constants.clone()];
        sets.push([NodeId::table(0), NodeId::column(2)].into_iter().collect());
        sets.push([NodeId::table(1), NodeId::column(5)].into_iter().collect());
        let only: Vec<String> = model.store.names().filter(|n| Model::is_rerank_param(n)).cloned().collect();
        let only: Vec<&str> = only.iter().map(String::as_str).collect();
        let rep = check_gradients(&model.store, EPS, Some(&only), Some(6), |t| {
            let ctx = prepare(t, &inst, &inputs)?;
            rerank_score(t, &model.config, &inst, &ctx, &sets[1])
        })?;
        out.push(("rerank_score", rep));
        let rep = check_gradients(&model.store, EPS, Some(&only), Some(6), |t| {
            let ctx = prepare(t, &inst, &inputs)?;
            let logits = sets
                .iter()
                .map(|s| rerank_score(t, &model.config, &inst, &ctx, s))
                .collect::<Result<Vec<_>, _>>()?;
            rerank_loss(t, &logits, 0)
        })?;
        out.push(("rerank_loss", rep));
    }
    Ok(out)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0_f64, "");
    let mut probes = 0;
    for seed in 0..3 {
        for (name, rep) in grad_ops(seed).map_err(|e| e.to_string())? {
            ensure(rep.passes(TOL), || format!("{name} (seed {seed}): max relative error {:.3e} at {:?}", rep.max_rel_error, rep.worst))?;
            probes += rep.checked;
            if rep.max_rel_error > worst.0 {
                worst = (rep.max_rel_error, name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("gradient suite took {secs:.1}s"))?;
    Ok(format!("10 operations x 3 seeds, {probes} probes, worst {:.2e} ({}), {secs:.1}s", worst.0, worst.1))
}

// ---------------------------------------------------------------------------
// 2. normalization
// ---------------------------------------------------------------------------

fn check_sum(what: &str, xs: &[f64]) -> Result<(), String> {
    let s: f64 = xs.iter().sum();
    ensure((s - 1.0).abs() <= 1e-9, || format!("{what} sums to {s}"))?;
    ensure(xs.iter().all(|&x| (0.0..=1.0).contains(&x)), || format!("{what} has an entry outside [0, 1]"))
}

fn normalization_trial(trial: u64, corpus: &globalsql::pipeline::Corpus, words: &[String]) -> Result<(), String> {
    let err = |e: globalsql::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(trial);
    let dbs: Vec<&Database> = corpus.databases.values().collect();
    let db = dbs[rng.gen_range(0..dbs.len())];
    let len = rng.gen_range(1..9);
    let question: Vec<String> = (0..len).map(|_| words[rng.gen_range(0..words.len())].clone()).collect();
    let vocab = vocab_for(&[&question.join(" ")], &db.schema);
    let model = Model::new(tiny_config(), vocab, trial).map_err(err)?;
    let inst = Instance::new(&db.schema, question, &db.contents, &model.vocab).map_err(err)?;

    let mut tape = Tape::inference(&model.store);
    let enc = encode(&mut tape, &model, &inst, Relevance::Gated).map_err(err)?;
    let lm = enc.link.values(&tape);
    for row in &lm.p_word {
        check_sum("p_link(v | x)", row)?;
    }
    for v in 0..inst.num_constants() {
        let column: Vec<f64> = lm.p_const.iter().map(|r| r[v]).collect();
        check_sum("p_link(x | v)", &column)?;
    }

    // a random legal walk through the decoder
    let mut st = initial_state(&mut tape, &model, &enc).map_err(err)?;
    for _ in 0..30 {
        let Some((p, scores)) = decode_step(&mut tape, &model, &db.schema, &inst, &enc, &st).map_err(err)? else {
            break;
        };
        let pv = tape.value(p).to_vec();
        check_sum("decision distribution", &pv)?;
        for (i, &x) in pv.iter().enumerate() {
            ensure(scores.mask[i] || x == 0.0, || "illegal decision has probability mass".into())?;
        }
        check_sum("attention", tape.value(scores.alpha))?;
        let sel = select_db_constant(&mut tape, scores.alpha, &enc.link, None).map_err(err)?;
        check_sum("select_db_constant", tape.value(sel))?;
        let d = *scores.options.choose(&mut rng).expect("options are non-empty");
        st = advance(&mut tape, &model, &db.schema, &inst, &enc, &st, &scores, d).map_err(err)?;
    }

    // re-rank softmax over random candidate sets
    let inputs = RerankInputs::from_encoding(&tape, &enc);
    let mut rt = Tape::inference(&model.store);
    let ctx = prepare(&mut rt, &inst, &inputs).map_err(err)?;
    let k = rng.gen_range(2..6);
    let mut logits = Vec::new();
    for _ in 0..k {
        let set: BTreeSet<NodeId> = inst.constants.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
        logits.push(rerank_score(&mut rt, &model.config, &inst, &ctx, &set).map_err(err)?);
    }
    let all = rt.concat(&logits);
    let p = rt.softmax(all, None).map_err(err)?;
    check_sum("re-rank softmax", rt.value(p))?;
    Ok(())
}

fn criterion_2() -> Outcome {
    let corpus = generate_synthetic(&SynthSpec { schemas: 12, heldout_schemas: 2, train: 60, heldout: 10, ..SynthSpec::default() });
    let mut words: Vec<String> = corpus.train.iter().flat_map(|r| tokenize_question(&r.question)).collect();
    words.sort();
    words.dedup();
    for trial in 0..1000 {
        normalization_trial(trial, &corpus, &words).map_err(|e| format!("trial {trial}: {e}"))?;
    }
    Ok("1000 randomized trials: p_link (both directions), decision and constant softmaxes, attention, re-rank softmax".into())
}

// ---------------------------------------------------------------------------
// 3. loss anchors
// ---------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let store = ParameterStore::new();
    let mut t = Tape::inference(&store);
    let rho = t.vector(vec![0.5, 0.5]);
    let constants = [NodeId::table(0), NodeId::column(1)];
    let gold: BTreeSet<NodeId> = [NodeId::table(0)].into_iter().collect();
    let l = relevance_loss(&mut t, rho, &constants, &gold).map_err(|e| e.to_string())?;
    let rel = t.scalar(l);
    let want = 2.0 * std::f64::consts::LN_2;
    ensure((rel - want).abs() <= 1e-12, || format!("relevance loss {rel}, want {want}"))?;

    let logits: Vec<Var> = (0..11).map(|_| t.scalar_const(0.37)).collect();
    let l = rerank_loss(&mut t, &logits, 4).map_err(|e| e.to_string())?;
    let rr = t.scalar(l);
    let want11 = 11f64.ln();
    ensure((rr - want11).abs() <= 1e-12, || format!("rerank loss {rr}, want {want11}"))?;
    Ok(format!("relevance {rel:.15} (2 ln 2), rerank {rr:.15} (ln 11)"))
}

// ---------------------------------------------------------------------------
// 4. overfit convergence
// ---------------------------------------------------------------------------

pub const OVERFIT_QUESTION: &str = "What is the name of the singer from France ?";
pub const OVERFIT_SQL: &str = "SELECT name FROM singer WHERE country = 'France'";

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let db = Database { schema: concert_singer(), contents: song_contents() };
    let raw = vec![RawExample { db_id: db.schema.db_id.clone(), question: OVERFIT_QUESTION.into(), query: OVERFIT_SQL.into() }];
    let data = Dataset::from_raw([(db.schema.db_id.clone(), db.clone())].into_iter().collect(), &raw, &Grammar::sql());
    ensure(data.examples.len() == 1, || format!("fixture excluded: {:?}", data.exclusions))?;
    let cfg = TrainConfig { epochs: 500, ..TrainConfig::default() };
    let (model, stats) = train(&cfg, &data, None).map_err(|e| e.to_string())?;
    let last = stats.last().expect("500 epochs ran");
    let total = last.total();
    ensure(total < 0.05, || format!("final total loss {total:.4} (decoding {:.4}, relevance {:.4}, rerank {:.4})", last.decoding, last.relevance, last.rerank))?;

    let ex = &data.examples[0];
    let inst = Instance::new(&db.schema, ex.tokens.clone(), &db.contents, &model.vocab).map_err(|e| e.to_string())?;
    let mut tape = Tape::inference(&model.store);
    let enc = encode(&mut tape, &model, &inst, Relevance::Gated).map_err(|e| e.to_string())?;
    let greedy = greedy_decode(&mut tape, &model, &db.schema, &inst, &enc, cfg.max_decode_steps)
        .map_err(|e| e.to_string())?
        .ok_or("greedy decoding produced nothing")?;
    ensure(loose_exact_match(&greedy.query, &ex.query), || {
        format!("greedy produced `{}`", globalsql::sql::sql_text(&greedy.query, &db.schema))
    })?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("500 steps, final loss {total:.2e}, greedy reproduces the gold query, {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 5. synthetic end to end
// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec::default();
    ensure((spec.schemas, spec.train, spec.heldout) == (50, 500, 100), || "shipped corpus size changed".into())?;
    let corpus = generate_synthetic(&spec);
    let grammar = Grammar::sql();
    let train_set = Dataset::from_raw(corpus.databases.clone(), &corpus.train, &grammar);
    let heldout = Dataset::from_raw(corpus.databases, &corpus.heldout, &grammar);
    let cfg = TrainConfig::default();
    let (model, _) = train(&cfg, &train_set, None).map_err(|e| e.to_string())?;
    let run = |mode| -> Result<Metrics, String> {
        evaluate(&model, &heldout, cfg.test_beam, cfg.max_decode_steps, mode, 1)
            .map(|(m, _)| m)
            .map_err(|e| e.to_string())
    };
    let base = run(EvalMode::Base)?;
    let rerank = run(EvalMode::Rerank)?;
    let gate = run(EvalMode::OracleGate)?;
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "held-out base {:.3}, rerank {:.3}, oracle-gate {:.3}, beam-hit {:.3}, {secs:.0}s",
        base.overall, rerank.overall, gate.overall, rerank.beam_hit
    );
    ensure(rerank.overall >= 0.85, || format!("rerank accuracy below 0.85: {summary}"))?;
    ensure(rerank.beam_hit >= rerank.overall, || format!("beam-hit below rerank accuracy: {summary}"))?;
    ensure(gate.overall >= base.overall, || format!("oracle-gate below base: {summary}"))?;
    ensure(secs < 1800.0, || format!("over 30 minutes: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 6. tie semantics
// ---------------------------------------------------------------------------

fn candidate(sql: &str, schema: &Schema, log_prob: f64) -> BeamCandidate {
    let query = parse_sql(sql, schema).expect("fixture SQL parses");
    let constants = extract_constants(&query, schema);
    BeamCandidate { decisions: Vec::new(), query, log_prob, constants, rerank_logit: None }
}

fn criterion_6() -> Outcome {
    let err = |e: globalsql::Error| e.to_string();
    // targeted fixture: two candidates over the same constants
    let db = Database { schema: concert_singer(), contents: song_contents() };
    let question = "List singer names in order";
    let (model, inst) = model_and_instance(tiny_config(), &db, question, 3);
    let mut cands = vec![
        candidate("SELECT name FROM singer ORDER BY name ASC", &db.schema, -2.5),
        candidate("SELECT name FROM singer", &db.schema, -1.25),
        candidate("SELECT country FROM singer", &db.schema, -0.5),
    ];
    ensure(cands[0].constants == cands[1].constants, || "fixture sets differ".into())?;
    let mut tape = Tape::inference(&model.store);
    let enc = encode(&mut tape, &model, &inst, Relevance::Gated).map_err(err)?;
    let inputs = RerankInputs::from_encoding(&tape, &enc);
    let mut rt = Tape::inference(&model.store);
    let ctx = prepare(&mut rt, &inst, &inputs).map_err(err)?;
    for c in cands.iter_mut() {
        let s = rerank_score(&mut rt, &model.config, &inst, &ctx, &c.constants).map_err(err)?;
        c.rerank_logit = Some(rt.scalar(s));
    }
    let (a, b) = (cands[0].rerank_logit.unwrap(), cands[1].rerank_logit.unwrap());
    ensure(a.to_bits() == b.to_bits(), || format!("tied logits differ: {a} vs {b}"))?;
    // make the tied pair the re-ranker's favourite so the tie decides
    cands[2].rerank_logit = Some(a - 1.0);
    let chosen = select_final(&cands).map_err(err)?;
    ensure(chosen == 1, || format!("selected candidate {chosen}, want the higher decoder score (1)"))?;

    // every beam of an evaluation run
    let corpus = generate_synthetic(&SynthSpec { schemas: 10, heldout_schemas: 2, train: 40, heldout: 30, ..SynthSpec::default() });
    let data = Dataset::from_raw(corpus.databases, &corpus.heldout, &Grammar::sql());
    let vocab = globalsql::pipeline::build_vocab(&data);
    let model = Model::new(tiny_config(), vocab, 11).map_err(err)?;
    let mut pairs = 0;
    for ex in &data.examples {
        let db = data.database(&ex.db_id).map_err(err)?;
        let inst = Instance::new(&db.schema, ex.tokens.clone(), &db.contents, &model.vocab).map_err(err)?;
        let out = decode(&model, &db.schema, &inst, 10, 60, EvalMode::Rerank, None).map_err(err)?;
        let cs = &out.candidates;
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                if cs[i].constants == cs[j].constants {
                    pairs += 1;
                    let (x, y) = (cs[i].rerank_logit.unwrap(), cs[j].rerank_logit.unwrap());
                    ensure(x.to_bits() == y.to_bits(), || format!("`{}`: tied logits differ", ex.question))?;
                }
            }
        }
        if let Some(k) = out.chosen {
            let best = cs.iter().map(|c| c.rerank_logit.unwrap()).fold(f64::NEG_INFINITY, f64::max);
            let top = cs.iter().filter(|c| c.rerank_logit.unwrap() == best).map(|c| c.log_prob).fold(f64::NEG_INFINITY, f64::max);
            ensure(cs[k].rerank_logit.unwrap() == best && cs[k].log_prob == top, || format!("`{}`: choice ignores the tie rule", ex.question))?;
        }
    }
    Ok(format!("fixture logits bitwise equal, decoder score breaks the tie; {pairs} tied pairs across {} beams", data.examples.len()))
}

// ---------------------------------------------------------------------------
// 7. gradient isolation
// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let err = |e: globalsql::Error| e.to_string();
    let db = Database { schema: concert_singer(), contents: song_contents() };
    let question = "Which singer from France sang Hey ?";
    let (model, inst) = model_and_instance(tiny_config(), &db, question, 5);
    let mut tape = Tape::new(&model.store);
    let enc = encode(&mut tape, &model, &inst, Relevance::Gated).map_err(err)?;
    let beam = beam_search(&mut tape, &model, &db.schema, &inst, &enc, 8, 60).map_err(err)?;
    ensure(beam.len() >= 2, || "beam too small".into())?;
    let inputs = RerankInputs::from_encoding(&tape, &enc);
    let ctx = prepare(&mut tape, &inst, &inputs).map_err(err)?;
    let logits = beam
        .iter()
        .map(|c| rerank_score(&mut tape, &model.config, &inst, &ctx, &c.constants))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let loss = rerank_loss(&mut tape, &logits, 0).map_err(err)?;
    let grads = tape.backward(loss).map_err(err)?;
    let mut zero = 0;
    let mut moved = 0;
    for name in model.store.names() {
        let g = grads.get(name);
        let nonzero = g.is_some_and(|t| t.data.iter().any(|&x| x != 0.0));
        if Model::is_rerank_param(name) {
            moved += nonzero as usize;
        } else {
            ensure(!nonzero, || format!("`{name}` received a re-ranking gradient"))?;
            zero += 1;
        }
    }
    ensure(moved > 0, || "no re-ranker parameter received a gradient".into())?;
    Ok(format!("{zero} parser parameters exactly zero, {moved} re-ranker parameters updated"))
}

// ---------------------------------------------------------------------------
// 8. cell values
// ---------------------------------------------------------------------------

fn criterion_8(dir: &Path) -> Outcome {
    let err = |e: globalsql::Error| e.to_string();
    let schema = concert_singer();
    let db_dir = dir.join("contents").join(&schema.db_id);
    std::fs::create_dir_all(&db_dir).map_err(|e| e.to_string())?;
    let mut csv = String::from("song_id,name,singer_id\n");
    for i in 0..6000 {
        let name = match i {
            0 => "Hey Jude".to_string(),
            5500 => "Yesterday".to_string(),
            _ => format!("track {i}"),
        };
        csv.push_str(&format!("{i},{name},{}\n", i % 7));
    }
    std::fs::write(db_dir.join("song.csv"), csv).map_err(|e| e.to_string())?;
    std::fs::write(db_dir.join("singer.csv"), "singer_id,name,country\n1,Paul,England\n").map_err(|e| e.to_string())?;
    let (contents, _) = read_contents(&db_dir, &schema).map_err(err)?;
    let names = contents.iter().find(|(c, _)| *c == 5).map(|(_, v)| v).ok_or("song.name has no cells")?;
    ensure(names.len() == MAX_CONTENT_ROWS, || format!("song.name kept {} cells", names.len()))?;
    ensure(!names.iter().any(|n| n == "Yesterday"), || "a row past the cap was read".into())?;

    let db = Database { schema, contents };
    let question = "Which singer sang Hey ?";
    let (model, inst) = model_and_instance(tiny_config(), &db, question, 2);
    let hey = inst.cells.iter().find(|c| c.cell == "Hey Jude").ok_or("no cell node for `Hey Jude`")?;
    let song_name = NodeId::column(5);
    ensure(hey.column == song_name && hey.node.kind == NodeKind::CellValue, || "cell attached to the wrong column".into())?;
    let has = |s: NodeId, t: NodeId, tag| inst.graph.edges().iter().any(|e| e.source == s && e.target == t && e.tag == tag);
    ensure(has(song_name, hey.node, EdgeType::ColumnToCell) && has(hey.node, song_name, EdgeType::CellToColumn), || "missing (c,q)/(q,c) edges".into())?;
    let past = Instance::new(&db.schema, tokenize_question("Who sang Yesterday ?"), &db.contents, &model.vocab).map_err(err)?;
    ensure(past.cells.is_empty(), || "a value past the row cap was matched".into())?;

    let data = Dataset { databases: [(db.schema.db_id.clone(), db.clone())].into_iter().collect(), ..Dataset::default() };
    let out = cli::parse_question(&model, &data, "concert_singer", question, 5, 60, EvalMode::Rerank).map_err(err)?;
    let cells = out["evidence"]["cells"].as_array().ok_or("parse output lacks evidence.cells")?;
    ensure(
        cells.iter().any(|c| c["cell"] == "Hey Jude" && c["column"] == "song.name" && c["words"][0] == "Hey"),
        || format!("parse evidence does not list the cell: {cells:?}"),
    )?;
    Ok(format!("6000-row table capped at {MAX_CONTENT_ROWS}, `Hey Jude` node with both edges, listed in parse output"))
}

// ---------------------------------------------------------------------------
// 9. determinism
// ---------------------------------------------------------------------------

fn cli_ok(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["globalsql"];
    argv.extend_from_slice(args);
    match cli::run(argv.iter().copied()) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn criterion_9(dir: &Path) -> Outcome {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    cli_ok(&["synth", "--out", &p("corpus"), "--schemas", "8", "--heldout-schemas", "2", "--examples", "60", "--heldout", "20", "--seed", "5"])?;
    let tables = p("corpus/tables.json");
    let contents = p("corpus/contents");
    for run in ["a", "b"] {
        cli_ok(&[
            "train", "--tables", &tables, "--contents", &contents, "--examples", &p("corpus/train.json"),
            "--out", &p(&format!("ck_{run}")), "--epochs", "3", "--seed", "23",
        ])?;
        let threads = if run == "a" { "1" } else { "3" };
        cli_ok(&[
            "evaluate", "--tables", &tables, "--contents", &contents, "--examples", &p("corpus/heldout.json"),
            "--checkpoint", &p(&format!("ck_{run}")), "--out", &p(&format!("ev_{run}")), "--mode", "rerank", "--threads", threads,
        ])?;
    }
    for f in ["ck_{}/params.bin", "ck_{}/manifest.json", "ck_{}/training.jsonl", "ev_{}/metrics.json", "ev_{}/verdicts.jsonl"] {
        let a = std::fs::read(dir.join(f.replace("{}", "a"))).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.join(f.replace("{}", "b"))).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{} differs between runs", f.replace("{}", "*")))?;
    }
    Ok("two CLI train+evaluate runs (1 and 3 evaluation threads): checkpoints and metrics byte-identical".into())
}

// ---------------------------------------------------------------------------
// 10. oracle equivalence
// ---------------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let spec = SynthSpec { schemas: 20, heldout_schemas: 4, train: 200, heldout: 60, projection_only: true, ..SynthSpec::default() };
    let corpus = generate_synthetic(&spec);
    let cfg = TrainConfig {
        model: ModelConfig { projection_only: true, ..ModelConfig::default() },
        epochs: 2,
        ..TrainConfig::default()
    };
    let grammar = cfg.model.grammar();
    let train_set = Dataset::from_raw(corpus.databases.clone(), &corpus.train, &grammar);
    let heldout = Dataset::from_raw(corpus.databases, &corpus.heldout, &grammar);
    ensure(train_set.exclusions.is_empty() && heldout.exclusions.is_empty(), || "uniqueness corpus has exclusions".into())?;
    let (model, _) = train(&cfg, &train_set, None).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    // narrow beams miss the gold query sometimes, so the equality is not 1 = 1
    for beam in [1, 3, cfg.test_beam] {
        for (name, data) in [("train", &train_set), ("held-out", &heldout)] {
            let (m, _) = evaluate(&model, data, beam, cfg.max_decode_steps, EvalMode::OracleFull, 1).map_err(|e| e.to_string())?;
            ensure(m.overall == m.beam_hit, || format!("{name}, K={beam}: oracle accuracy {} vs beam-hit {}", m.overall, m.beam_hit))?;
            parts.push(format!("{name} K={beam} {:.3}", m.overall));
        }
    }
    Ok(format!("oracle-gate+oracle-rank accuracy equals beam-hit: {}", parts.join(", ")))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let d8 = dir.path().join("c8");
    let d9 = dir.path().join("c9");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient integrity", Box::new(criterion_1)),
        ("normalization", Box::new(criterion_2)),
        ("loss anchors", Box::new(criterion_3)),
        ("overfit convergence", Box::new(criterion_4)),
        ("synthetic end-to-end", Box::new(criterion_5)),
        ("re-ranker tie semantics", Box::new(criterion_6)),
        ("gradient isolation", Box::new(criterion_7)),
        ("cell values and row cap", Box::new(move || criterion_8(&d8))),
        ("determinism", Box::new(move || criterion_9(&d9))),
        ("oracle equivalence", Box::new(criterion_10)),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => emit(&format!("criterion {n:>2} PASS  {name}: {detail}")),
            Err(why) => {
                emit(&format!("criterion {n:>2} FAIL  {name}: {why}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
