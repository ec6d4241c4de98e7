//! Oracles and shared experiment drivers for the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcrf_core::corpus::{build_vocabulary, read_conll, Dataset, Vocabulary};
use tcrf_core::decoder_heads::{
    crf_log_partition, crf_marginals, crf_nll, crf_viterbi, softmax_xent, EmissionLattice,
    TransitionMatrix,
};
use tcrf_core::encoder::{backward, count_parameters, forward, init_parameters, EncoderConfig};
use tcrf_core::evaluation::{
    render_model_summary, tally, EntityReport, EvalBundle, TokenReport,
};
use tcrf_core::label_scheme::{
    invalid_transition_count, is_grammatical, labels_to_spans, spans_to_labels, Category,
    DecodeMode, Label, Span,
};
use tcrf_core::model::{ModelInput, ModelShape, TaggerModel};
use tcrf_core::par::Parallelism;
use tcrf_core::synthetic::{generate, SyntheticConfig};
use tcrf_core::tensor::ParamSet;
use tcrf_core::trainer::{
    emission_examples, epoch_logs_csv, evaluate_examples, sweep_batch_sizes, token_examples,
    token_examples_whole, train, TrainConfig, TrainOutcome,
};
use tcrf_core::checkpoint::Checkpoint;

pub type Check = Result<String, String>;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn read_fixture(name: &str) -> Dataset {
    let text = fs::read(fixture(name)).unwrap();
    read_conll(name, &text[..]).unwrap()
}

// ---------------------------------------------------------------- CRF oracle

pub struct Enumeration {
    pub log_z: f64,
    pub best: Vec<usize>,
    pub marginals: Array2<f64>,
}

fn score(e: &Array2<f64>, t: &TransitionMatrix, path: &[usize]) -> f64 {
    let mut s = t.start[path[0]] + t.end[path[path.len() - 1]];
    for (i, &y) in path.iter().enumerate() {
        s += e[[i, y]];
        if i > 0 {
            s += t.trans[[path[i - 1], y]];
        }
    }
    s
}

/// Visits every one of the `L^T` label paths.
pub fn enumerate(e: &Array2<f64>, t: &TransitionMatrix) -> Enumeration {
    let (len, labels) = e.dim();
    let total = labels.pow(len as u32);
    let mut path = vec![0; len];
    let mut scores = Vec::with_capacity(total);
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut().rev() {
            *slot = c % labels;
            c /= labels;
        }
        let s = score(e, t, &path);
        if s > best.0 {
            best = (s, path.clone());
        }
        scores.push((s, path.clone()));
    }
    let max = best.0;
    let log_z = max + scores.iter().map(|(s, _)| (s - max).exp()).sum::<f64>().ln();
    let mut marginals = Array2::zeros((len, labels));
    for (s, p) in &scores {
        let w = (s - log_z).exp();
        for (i, &y) in p.iter().enumerate() {
            marginals[[i, y]] += w;
        }
    }
    Enumeration {
        log_z,
        best: best.1,
        marginals,
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

pub fn random_transitions(rng: &mut ChaCha8Rng, labels: usize, scale: f64) -> TransitionMatrix {
    let trans = random_matrix(rng, labels, labels, scale);
    let start = Array1::from_shape_fn(labels, |_| rng.gen_range(-scale..scale));
    let end = Array1::from_shape_fn(labels, |_| rng.gen_range(-scale..scale));
    TransitionMatrix::from_parts(trans, start, end).unwrap()
}

#[derive(Debug, Default)]
pub struct OracleStats {
    pub cases: usize,
    pub max_log_z_err: f64,
    pub max_marginal_err: f64,
    pub max_row_sum_err: f64,
    pub viterbi_mismatches: usize,
}

/// Random small lattices (T <= 6, L <= 5) against exhaustive enumeration.
pub fn crf_oracle(cases: usize, seed: u64) -> OracleStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = OracleStats {
        cases,
        ..OracleStats::default()
    };
    for _ in 0..cases {
        let len = rng.gen_range(1..=6);
        let labels = rng.gen_range(1..=5);
        let scale = [0.5, 2.0, 8.0][rng.gen_range(0..3)];
        let e = random_matrix(&mut rng, len, labels, scale);
        let t = random_transitions(&mut rng, labels, scale);
        let lat = EmissionLattice::from_encoder(e.clone());
        let truth = enumerate(&e, &t);
        let log_z = crf_log_partition(&lat, &t).unwrap();
        st.max_log_z_err = st.max_log_z_err.max((log_z - truth.log_z).abs());
        if crf_viterbi(&lat, &t).unwrap().path != truth.best {
            st.viterbi_mismatches += 1;
        }
        let m = crf_marginals(&lat, &t).unwrap();
        for (row, trow) in m.rows().into_iter().zip(truth.marginals.rows()) {
            st.max_row_sum_err = st.max_row_sum_err.max((row.sum() - 1.0).abs());
            for (a, b) in row.iter().zip(trow) {
                st.max_marginal_err = st.max_marginal_err.max((a - b).abs());
            }
        }
    }
    st
}

pub fn check_crf_oracle(cases: usize, seed: u64) -> Check {
    let s = crf_oracle(cases, seed);
    let detail = format!(
        "{} cases, |dlogZ| {:.1e}, |dmarg| {:.1e}, |rowsum-1| {:.1e}, viterbi mismatches {}",
        s.cases, s.max_log_z_err, s.max_marginal_err, s.max_row_sum_err, s.viterbi_mismatches
    );
    if s.max_log_z_err <= 1e-10
        && s.max_marginal_err <= 1e-10
        && s.max_row_sum_err <= 1e-9
        && s.viterbi_mismatches == 0
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------ finite differences

/// Below this norm a gradient counts as zero and errors are absolute.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, GRAD_FLOOR)` over whole vectors.
pub fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRAD_FLOOR)
}

/// Central differences of `f` with respect to each entry of `x`.
pub fn numeric_grad(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn crf_parts(t: &TransitionMatrix) -> Vec<f64> {
    t.tensors().iter().flat_map(|v| v.data.iter().copied()).collect()
}

fn crf_from_parts(template: &TransitionMatrix, flat: &[f64]) -> TransitionMatrix {
    let mut t = template.clone();
    let mut k = 0;
    for v in t.tensors_mut() {
        for x in v.data.iter_mut() {
            *x = flat[k];
            k += 1;
        }
    }
    t
}

/// Worst relative error over emission, transition and cross-entropy
/// gradients for `cases` random instances.
pub fn crf_gradient_errors(cases: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let (mut emis, mut trans, mut xent) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let len = rng.gen_range(1..=6);
        let labels = rng.gen_range(2..=5);
        let e = random_matrix(&mut rng, len, labels, 2.0);
        let t = random_transitions(&mut rng, labels, 2.0);
        let gold: Vec<usize> = (0..len).map(|_| rng.gen_range(0..labels)).collect();
        let out = crf_nll(&EmissionLattice::from_encoder(e.clone()), &t, &gold).unwrap();

        let mut flat = e.as_slice().unwrap().to_vec();
        let num = numeric_grad(&mut flat, h, |x| {
            let lat = EmissionLattice::from_encoder(Array2::from_shape_vec((len, labels), x.to_vec()).unwrap());
            crf_nll(&lat, &t, &gold).unwrap().loss
        });
        emis = emis.max(norm_rel(out.grad_emissions.as_slice().unwrap(), &num));

        let mut flat = crf_parts(&t);
        let lat = EmissionLattice::from_encoder(e.clone());
        let num = numeric_grad(&mut flat, h, |x| crf_nll(&lat, &crf_from_parts(&t, x), &gold).unwrap().loss);
        trans = trans.max(norm_rel(&crf_parts(&out.grad_transitions), &num));

        let (_, g) = softmax_xent(&lat, &gold).unwrap();
        let mut flat = e.as_slice().unwrap().to_vec();
        let num = numeric_grad(&mut flat, h, |x| {
            let lat = EmissionLattice::from_encoder(Array2::from_shape_vec((len, labels), x.to_vec()).unwrap());
            softmax_xent(&lat, &gold).unwrap().0
        });
        xent = xent.max(norm_rel(g.as_slice().unwrap(), &num));
    }
    (emis, trans, xent)
}

pub fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 16,
        max_sequence: 8,
        dropout: 0.0,
        token_embedding_dim: 6,
        vocabulary_size: 10,
        seed,
    }
}

/// Worst per-tensor relative error of the encoder backward pass against
/// central differences of `sum(output * R)`.
pub fn encoder_gradient_error(cases: usize, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for case in 0..cases {
        let cfg = tiny_encoder(seed + case as u64);
        let params = init_parameters(&cfg).unwrap();
        let len = rng.gen_range(1..=3);
        // id 0 is padding; keep at least one real token
        let mut tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..10)).collect();
        tokens[0] = rng.gen_range(1..10);
        let r = random_matrix(&mut rng, len, cfg.d_model, 1.0);
        let rep = forward(&tokens, &params, false, 0).unwrap();
        let grads = backward(&rep, &r, &params).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads
            .params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.data.to_vec()))
            .collect();
        for (k, (name, g)) in analytic.iter().enumerate() {
            let mut flat = params.tensors()[k].data.to_vec();
            // a wider step than the CRF checks: the encoder loss is larger,
            // so roundoff (eps * |f| / h) dominates at 1e-5
            let num = numeric_grad(&mut flat, 1e-4, |x| {
                let mut p = params.clone();
                p.tensors_mut()[k].data.copy_from_slice(x);
                let out = forward(&tokens, &p, false, 0).unwrap().output;
                (&out * &r).sum()
            });
            let err = norm_rel(g, &num);
            if err > worst.0 {
                worst = (err, name.clone());
            }
        }
    }
    worst
}

pub fn check_gradients() -> Check {
    let (emis, trans, xent) = crf_gradient_errors(200, 11);
    let (enc, name) = encoder_gradient_error(6, 23);
    let detail = format!(
        "crf emissions {emis:.1e}, crf transitions {trans:.1e}, softmax {xent:.1e}, encoder {enc:.1e} ({name})"
    );
    if emis < 1e-6 && trans < 1e-6 && xent < 1e-6 && enc < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------- BIOES codec

pub fn random_spans(rng: &mut ChaCha8Rng, len: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < len {
        if rng.gen_bool(0.4) {
            let width = rng.gen_range(1..=(len - i).min(5));
            let c = *Category::ALL.choose(rng).unwrap();
            spans.push(Span::new(c, i, i + width));
            i += width;
        } else {
            i += rng.gen_range(1..=3);
        }
    }
    spans.shuffle(rng);
    spans
}

pub fn lenient_repair(labels: &[Label]) -> Vec<Label> {
    let spans = labels_to_spans(labels, DecodeMode::Lenient).unwrap();
    spans_to_labels(&spans, labels.len()).unwrap()
}

pub fn check_codec(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..cases {
        let len = rng.gen_range(0..=30);
        let mut spans = random_spans(&mut rng, len);
        let labels = spans_to_labels(&spans, len).unwrap();
        spans.sort_by_key(|s| s.start);
        if !is_grammatical(&labels) {
            failures.push(format!("case {case}: ungrammatical encoding"));
        }
        if labels_to_spans(&labels, DecodeMode::Strict).ok().as_ref() != Some(&spans) {
            failures.push(format!("case {case}: round trip differs"));
        }
        let noisy: Vec<Label> = (0..len)
            .map(|_| Label::from_index(rng.gen_range(0..Label::COUNT)).unwrap())
            .collect();
        let once = lenient_repair(&noisy);
        if lenient_repair(&once) != once || !is_grammatical(&once) {
            failures.push(format!("case {case}: lenient repair not idempotent"));
        }
    }
    if failures.is_empty() {
        Ok(format!("{cases} span sets round-tripped, all encodings grammatical, repair idempotent"))
    } else {
        Err(format!("{} failures, first: {}", failures.len(), failures[0]))
    }
}

// ----------------------------------------------------------- metric oracle

pub fn metric_fixture() -> (Vec<Vec<Label>>, Vec<Vec<Label>>) {
    (
        read_fixture("metric_gold.conll").gold(),
        read_fixture("metric_pred.conll").gold(),
    )
}

/// Hand-counted nonzero cells of the full confusion matrix (gold, pred, n).
pub const FIXTURE_CONFUSION: &[(&str, &str, u64)] = &[
    ("O", "O", 6),
    ("O", "S-Route", 1),
    ("O", "I-Form", 1),
    ("O", "E-Form", 1),
    ("B-Drug", "B-Drug", 1),
    ("E-Drug", "E-Drug", 1),
    ("S-Drug", "S-Drug", 2),
    ("S-Strength", "S-Dosage", 1),
    ("B-Frequency", "S-Frequency", 1),
    ("E-Frequency", "O", 1),
    ("B-Reason", "B-Reason", 1),
    ("I-Reason", "I-Reason", 1),
    ("E-Reason", "E-Reason", 1),
    ("S-ADE", "O", 1),
];

pub fn expected_confusion_full() -> String {
    let labels: Vec<String> = (0..Label::COUNT)
        .map(|i| Label::from_index(i).unwrap().to_string())
        .collect();
    let mut out = String::from("gold\\pred");
    for l in &labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for g in &labels {
        out.push_str(g);
        for p in &labels {
            let n = FIXTURE_CONFUSION
                .iter()
                .find(|(a, b, _)| a == g && b == p)
                .map_or(0, |c| c.2);
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
    }
    out
}

pub fn check_metric_fixture() -> Check {
    let (gold, pred) = metric_fixture();
    let mut problems = Vec::new();
    for mode in [Parallelism::Sequential, Parallelism::Rayon] {
        let b = EvalBundle::compute(&gold, &pred, mode).map_err(|e| e.to_string())?;
        // exact rationals, before any rounding
        let e = &b.entity;
        let exact = [
            (e.acc, 13.0 / 20.0, "acc"),
            (e.pre, 4.0 / 8.0, "pre"),
            (e.rec, 4.0 / 7.0, "rec"),
            (e.f1, 8.0 / 15.0, "f1"),
            (b.token.category(Category::Frequency).f1, 2.0 / 3.0, "token Frequency f1"),
            (b.bioes.label("O".parse().unwrap()).f1, 12.0 / 17.0, "bioes O f1"),
            (b.binary.rec, 9.0 / 11.0, "binary rec"),
            (b.binary.f1, 18.0 / 23.0, "binary f1"),
            (b.binary.acc, 15.0 / 20.0, "binary acc"),
        ];
        for (got, want, what) in exact {
            if (got - want).abs() > 1e-15 {
                problems.push(format!("{what}: {got} != {want}"));
            }
        }
        if (e.corr, e.found, e.gold) != (4, 8, 7) {
            problems.push(format!("corr/found/gold {:?}", (e.corr, e.found, e.gold)));
        }
        let expected = [
            ("entity.csv", fs::read_to_string(fixture("expected_entity.csv")).unwrap()),
            ("token.csv", fs::read_to_string(fixture("expected_token.csv")).unwrap()),
            ("bioes.csv", fs::read_to_string(fixture("expected_bioes.csv")).unwrap()),
            ("binary.csv", fs::read_to_string(fixture("expected_binary.csv")).unwrap()),
            ("confusion_full.csv", expected_confusion_full()),
            (
                "confusion_binary.csv",
                fs::read_to_string(fixture("expected_confusion_binary.csv")).unwrap(),
            ),
        ];
        let rendered = b.render();
        if rendered.len() != 6 {
            problems.push(format!("{} artifacts", rendered.len()));
        }
        for ((name, text), (ename, etext)) in rendered.iter().zip(&expected) {
            if name != ename || text != etext {
                problems.push(format!("{name} differs from the hand computation"));
            }
        }
    }
    if problems.is_empty() {
        Ok("6 artifacts match hand computation (sequential and parallel)".into())
    } else {
        Err(problems.join("; "))
    }
}

// ------------------------------------------------------ synthetic training

pub fn reduced_encoder(vocabulary_size: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        d_model: 64,
        heads: 2,
        layers: 2,
        d_ff: 128,
        max_sequence: 64,
        dropout: 0.1,
        token_embedding_dim: 64,
        vocabulary_size,
        seed,
    }
}

pub struct SyntheticRun {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub vocab: Vocabulary,
    pub outcome: TrainOutcome,
    pub dev_f1: f64,
    pub test_f1: f64,
    pub seconds: f64,
}

pub fn synthetic_run(shape: ModelShape, max_epochs: usize, seed: u64) -> SyntheticRun {
    let (train_set, dev, test) = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    });
    let vocab = build_vocabulary(&train_set, 1).unwrap();
    let enc = reduced_encoder(vocab.len(), seed);
    let model = TaggerModel::new(shape, Some(&enc), true).unwrap();
    let config = TrainConfig {
        max_epochs,
        seed,
        model_shape: shape,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let outcome = train(
        &token_examples(&train_set, &vocab, enc.max_sequence),
        &token_examples_whole(&dev, &vocab),
        model,
        &config,
    )
    .unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let best = &outcome.best.as_ref().unwrap().model;
    let dev_f1 = outcome.best.as_ref().unwrap().best_dev_f1;
    let test_f1 = evaluate_examples(best, &token_examples_whole(&test, &vocab), Parallelism::default())
        .unwrap()
        .f1;
    SyntheticRun {
        train: train_set,
        dev,
        test,
        vocab,
        outcome,
        dev_f1,
        test_f1,
        seconds,
    }
}

pub fn check_synthetic(run: &SyntheticRun) -> Check {
    let best_epoch = run.outcome.best.as_ref().unwrap().epoch;
    let reached = run
        .outcome
        .logs
        .iter()
        .find(|l| l.dev_entity_f1 >= 0.90)
        .map(|l| l.epoch);
    let detail = format!(
        "dev F1 {:.4} (best epoch {best_epoch}, first >= 0.90 at {reached:?}), test F1 {:.4}, {} epochs in {:.1}s",
        run.dev_f1,
        run.test_f1,
        run.outcome.logs.len(),
        run.seconds
    );
    if matches!(reached, Some(e) if e <= 30)
        && (run.test_f1 - run.dev_f1).abs() <= 0.05
        && run.seconds < 600.0
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------ structural contrasts

fn predict_all(model: &TaggerModel, d: &Dataset, vocab: &Vocabulary) -> Vec<Vec<Label>> {
    token_examples_whole(d, vocab)
        .iter()
        .map(|ex| model.predict(&ex.input).unwrap())
        .collect()
}

/// Token F1 against entity F1 for every category with gold support.
pub fn check_token_vs_entity(run: &SyntheticRun) -> Check {
    let model = &run.outcome.best.as_ref().unwrap().model;
    let pred = predict_all(model, &run.test, &run.vocab);
    let t = tally(&run.test.gold(), &pred, Parallelism::default()).unwrap();
    let ent = EntityReport::from_tally(&t);
    let tok = TokenReport::from_tally(&t);
    let mut rows = Vec::new();
    let mut ok = true;
    for c in Category::ALL {
        let (e, k) = (ent.category(c).f1, tok.category(c).f1);
        rows.push(format!("{c} {k:.3}>={e:.3}"));
        ok &= k >= e;
    }
    if ok {
        Ok(rows.join(", "))
    } else {
        Err(rows.join(", "))
    }
}

/// Test sentences with their tokens shuffled: the entity words stay but
/// their order no longer follows the templates.
pub fn adversarial_fixture(d: &Dataset, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = d.clone();
    for s in &mut out.sentences {
        s.tokens.shuffle(&mut rng);
    }
    out
}

pub fn invalid_rate(pred: &[Vec<Label>]) -> (usize, usize) {
    let invalid = pred.iter().map(|p| invalid_transition_count(p)).sum();
    let tokens = pred.iter().map(Vec::len).sum();
    (invalid, tokens)
}

pub fn check_constraints(crf_run: &SyntheticRun, seed: u64) -> Check {
    let classify = synthetic_run(ModelShape::ClassifyHead, 1, seed);
    let clf_model = &classify.outcome.last.model;
    let crf_model = &crf_run.outcome.best.as_ref().unwrap().model;
    let adv = adversarial_fixture(&crf_run.test, seed);
    let (crf_bad, n) = invalid_rate(&predict_all(crf_model, &adv, &crf_run.vocab));
    let (clf_bad, _) = invalid_rate(&predict_all(clf_model, &adv, &classify.vocab));
    let detail = format!(
        "adversarial fixture of {n} tokens: CRF {crf_bad} invalid transitions, classify head {clf_bad} ({:.4} per token)",
        clf_bad as f64 / n as f64
    );
    if crf_bad == 0 && clf_bad > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Trains the frozen-emissions shape on lattices produced by `source` and
/// checks bitwise that only the CRF tensors moved.
pub fn check_frozen_isolation(source: &TaggerModel, run: &SyntheticRun) -> Check {
    let subset = Dataset::new("frozen", run.train.sentences[..200].to_vec());
    let lattices: Vec<EmissionLattice> = token_examples_whole(&subset, &run.vocab)
        .iter()
        .map(|ex| source.emissions(&ex.input).unwrap())
        .collect();
    let examples = emission_examples(&subset, lattices).unwrap();
    let snapshot: Vec<Vec<u64>> = examples
        .iter()
        .map(|ex| match &ex.input {
            ModelInput::Emissions(l) => l.scores.iter().map(|v| v.to_bits()).collect(),
            ModelInput::Tokens(_) => unreachable!(),
        })
        .collect();
    let source_bits: Vec<u64> = source.tensors().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect();
    let model = TaggerModel::new(ModelShape::FrozenEmissionsCrf, None, true).unwrap();
    let before = model.clone();
    let config = TrainConfig {
        model_shape: ModelShape::FrozenEmissionsCrf,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let out = train(&examples, &examples, model, &config).unwrap();
    let after = out.last.model;
    let lattices_same = examples.iter().zip(&snapshot).all(|(ex, bits)| match &ex.input {
        ModelInput::Emissions(l) => l.scores.iter().map(|v| v.to_bits()).eq(bits.iter().copied()),
        ModelInput::Tokens(_) => false,
    });
    let source_same = source
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter().map(|v| v.to_bits()))
        .eq(source_bits.iter().copied());
    let names = after.names();
    let crf_only = names.iter().all(|n| n.starts_with("crf."));
    let moved = after.crf != before.crf;
    let detail = format!(
        "trainable tensors {names:?}; lattices unchanged {lattices_same}; emitting model unchanged {source_same}; transitions moved {moved}"
    );
    if lattices_same && source_same && crf_only && moved && after.encoder.is_none() && after.head.is_none() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------- reproducibility

pub fn small_setup(seed: u64) -> (Vec<tcrf_core::trainer::Example>, Vec<tcrf_core::trainer::Example>, TaggerModel) {
    let (train_set, dev, _) = generate(&SyntheticConfig {
        train: 60,
        dev: 20,
        test: 0,
        seed,
    });
    let vocab = build_vocabulary(&train_set, 1).unwrap();
    let enc = EncoderConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        d_ff: 32,
        max_sequence: 32,
        dropout: 0.1,
        token_embedding_dim: 16,
        vocabulary_size: vocab.len(),
        seed,
    };
    let model = TaggerModel::new(ModelShape::TransformerCrf, Some(&enc), true).unwrap();
    (
        token_examples(&train_set, &vocab, enc.max_sequence),
        token_examples_whole(&dev, &vocab),
        model,
    )
}

pub fn check_reproducibility(out_dir: &std::path::Path) -> Check {
    let (tr, dv, model) = small_setup(5);
    let config = TrainConfig {
        max_epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let o = train(&tr, &dv, model.clone(), &config).unwrap();
        let ckpt = |s: &tcrf_core::trainer::TrainState| {
            Checkpoint {
                state: s.clone(),
                train_config: config.clone(),
                vocabulary: None,
            }
            .to_bytes()
        };
        (epoch_logs_csv(&o.logs), ckpt(o.best.as_ref().unwrap()), ckpt(&o.last))
    };
    let (a, b) = (run(), run());
    let identical = a == b;
    let sweep = sweep_batch_sizes(&[1, 4, 10], &tr, &dv, &model, &config, out_dir).unwrap();
    let files: Vec<String> = sweep
        .iter()
        .map(|r| fs::read_to_string(&r.path).unwrap_or_default())
        .collect();
    let names: Vec<String> = sweep
        .iter()
        .map(|r| r.path.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let distinct = files[0] != files[1] && files[1] != files[2] && files[0] != files[2];
    let all_ok = sweep.iter().all(|r| r.result.is_ok());
    let rows_ok = files
        .iter()
        .all(|f| (2..=config.max_epochs + 1).contains(&f.lines().count()));
    let detail = format!(
        "repeat runs byte-identical {identical} (csv {} bytes, checkpoint {} bytes); sweep files {names:?} distinct {distinct}",
        a.0.len(),
        a.1.len()
    );
    if identical && distinct && all_ok && rows_ok && names.len() == 3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------ parameter accounting

/// Independent tally of tensor sizes for an encoder configuration.
pub fn analytic_encoder_count(c: &EncoderConfig) -> usize {
    let d = c.d_model;
    let attention = 4 * (d * d + d);
    let norms = 2 * (2 * d);
    let ff = (d * c.d_ff + c.d_ff) + (c.d_ff * d + d);
    c.vocabulary_size * c.token_embedding_dim + c.token_embedding_dim * d + c.layers * (attention + norms + ff)
}

pub fn random_small_config(rng: &mut ChaCha8Rng, seed: u64) -> EncoderConfig {
    let heads = rng.gen_range(1..=4);
    let d_model = heads * 2 * rng.gen_range(1..=6);
    EncoderConfig {
        d_model,
        heads,
        layers: rng.gen_range(1..=3),
        d_ff: rng.gen_range(1..=40),
        max_sequence: rng.gen_range(1..=32),
        dropout: 0.1,
        token_embedding_dim: rng.gen_range(1..=20),
        vocabulary_size: rng.gen_range(2..=50),
        seed,
    }
}

pub fn check_parameter_accounting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = Label::COUNT;
    let mut rows = Vec::new();
    for i in 0..5 {
        let cfg = random_small_config(&mut rng, i);
        let params = init_parameters(&cfg).unwrap();
        let counted = count_parameters(&params);
        let expected = analytic_encoder_count(&cfg);
        if counted != expected || cfg.parameter_count() != expected {
            return Err(format!("config {i}: counted {counted}, analytic {expected}"));
        }
        let crf_model = TaggerModel::new(ModelShape::TransformerCrf, Some(&cfg), true).unwrap();
        let expected_crf = expected + (cfg.d_model * labels + labels) + (labels * labels + 2 * labels);
        if crf_model.parameter_count() != expected_crf {
            return Err(format!("config {i}: tagger {} != {expected_crf}", crf_model.parameter_count()));
        }
        rows.push(counted);
    }
    // Summary table: names row, then counts in the same column order.
    let cfg = random_small_config(&mut rng, 9);
    let models: Vec<(String, usize)> = [ModelShape::ClassifyHead, ModelShape::TransformerCrf, ModelShape::FrozenEmissionsCrf]
        .into_iter()
        .map(|s| {
            let m = TaggerModel::new(s, Some(&cfg), true).unwrap();
            (s.name().to_string(), m.parameter_count())
        })
        .collect();
    let refs: Vec<(&str, usize)> = models.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    let summary = render_model_summary(&refs);
    let lines: Vec<&str> = summary.lines().collect();
    let counts: Vec<&str> = lines.get(1).map(|l| l.split(',').collect()).unwrap_or_default();
    let placed = models
        .iter()
        .enumerate()
        .all(|(i, (_, c))| counts.get(i) == Some(&c.to_string().as_str()));
    if placed {
        Ok(format!("5 configs exact ({rows:?}); summary counts row {:?}", lines[1]))
    } else {
        Err(format!("summary misplaced counts:\n{summary}"))
    }
}
