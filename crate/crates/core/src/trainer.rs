//! Mini-batch Adam training with early stopping on dev entity F1.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Vocabulary};
use crate::decoder_heads::{check_alignment, EmissionLattice};
use crate::error::{Error, Result};
use crate::evaluation::{tally, EntityReport};
use crate::label_scheme::Label;
use crate::model::{ModelInput, ModelShape, TaggerModel};
use crate::par::{self, Parallelism};
use crate::seed::derive_seed;
use crate::tensor::ParamSet;

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub model_shape: ModelShape,
    pub constrain_bioes: bool,
    /// Epoch whose model is kept alongside the best one, if any.
    pub report_epoch: Option<usize>,
    /// Record wall-clock seconds in the epoch log. Off keeps logs
    /// byte-reproducible.
    pub record_wall_time: bool,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 0.005,
            max_epochs: 100,
            patience: 20,
            dropout: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip_norm: None,
            seed: 0,
            model_shape: ModelShape::TransformerCrf,
            constrain_bioes: true,
            report_epoch: None,
            record_wall_time: false,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if self.patience < 1 {
            return fail("patience must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.max_epochs < 1 {
            return fail("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return fail("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let m: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: Option<f64>,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            epsilon: c.adam_epsilon,
            clip_norm: c.grad_clip_norm,
        }
    }
}

/// One bias-corrected Adam update, with optional global-norm clipping of
/// the gradient first.
pub fn adam_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let gts = grads.tensors();
    if let Some(t) = gts.iter().find(|t| t.data.iter().any(|g| !g.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "non-finite gradient in {}",
            t.name
        )));
    }
    if gts.len() != state.m.len() {
        return Err(Error::InvalidArgument(
            "optimizer state does not match parameters".into(),
        ));
    }
    let clip = match cfg.clip_norm {
        Some(max) => {
            let norm = grads.squared_norm().sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&gts)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.data.len() != g.data.len() || m.len() != g.data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch for {}",
                p.name
            )));
        }
        for (((theta, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi * clip;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// One training or evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub gold: Vec<Label>,
}

/// Token-id examples for the encoder shapes. Sentences longer than
/// `max_sequence` are split into windows, preferring entity boundaries.
pub fn token_examples(d: &Dataset, vocab: &Vocabulary, max_sequence: usize) -> Vec<Example> {
    d.sentences
        .iter()
        .flat_map(|s| s.windows(max_sequence))
        .map(|w| Example {
            input: ModelInput::Tokens(vocab.encode(&w.tokens)),
            gold: w.gold,
        })
        .collect()
}

/// Unwindowed token-id examples, for evaluation where the model handles
/// long inputs itself.
pub fn token_examples_whole(d: &Dataset, vocab: &Vocabulary) -> Vec<Example> {
    d.sentences
        .iter()
        .map(|s| Example {
            input: ModelInput::Tokens(vocab.encode(&s.tokens)),
            gold: s.gold.clone(),
        })
        .collect()
}

/// Pairs precomputed lattices with their sentences.
pub fn emission_examples(d: &Dataset, lattices: Vec<EmissionLattice>) -> Result<Vec<Example>> {
    check_alignment(&lattices, d)?;
    Ok(lattices
        .into_iter()
        .zip(&d.sentences)
        .map(|(l, s)| Example {
            input: ModelInput::Emissions(l),
            gold: s.gold.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_token_acc: f64,
    pub dev_entity_p: f64,
    pub dev_entity_r: f64,
    pub dev_entity_f1: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,dev_token_acc,dev_entity_p,dev_entity_r,dev_entity_f1,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.dev_token_acc,
            self.dev_entity_p,
            self.dev_entity_r,
            self.dev_entity_f1,
            self.seconds
        )
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  loss {:.4}  dev acc {:.4}  dev P {:.4} R {:.4} F1 {:.4}",
            self.epoch,
            self.train_loss,
            self.dev_token_acc,
            self.dev_entity_p,
            self.dev_entity_r,
            self.dev_entity_f1
        )
    }
}

pub fn epoch_logs_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EpochLog::CSV_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

/// Plot-ready `epoch,dev_entity_f1` pairs.
pub fn f1_curve_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,dev_entity_f1\n");
    for l in logs {
        out.push_str(&format!("{},{}\n", l.epoch, l.dev_entity_f1));
    }
    out
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TaggerModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_dev_f1: f64,
    pub best_epoch: usize,
}

impl TrainState {
    pub fn new(model: TaggerModel) -> Self {
        TrainState {
            adam: AdamState::new(&model),
            model,
            epoch: 0,
            best_dev_f1: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot at the epoch with the highest dev entity F1 (earliest on ties).
    pub best: Option<TrainState>,
    /// Snapshot at `report_epoch`, when configured and reached.
    pub report: Option<TrainState>,
    /// State after the final completed epoch.
    pub last: TrainState,
    pub logs: Vec<EpochLog>,
}

/// Dev-set entity scores and token accuracy for `model`.
pub fn evaluate_examples(
    model: &TaggerModel,
    examples: &[Example],
    mode: Parallelism,
) -> Result<EntityReport> {
    let preds = par::try_map(mode, examples, |_, ex| model.predict(&ex.input))?;
    let gold: Vec<Vec<Label>> = examples.iter().map(|e| e.gold.clone()).collect();
    Ok(EntityReport::from_tally(&tally(&gold, &preds, mode)?))
}

/// Trains from a fresh model.
pub fn train(
    train_set: &[Example],
    dev_set: &[Example],
    model: TaggerModel,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    resume(train_set, dev_set, TrainState::new(model), config)
}

/// Continues training from `state`. Running `n` epochs then resuming for
/// `m` more reproduces an uninterrupted `n + m` epoch run bit for bit.
pub fn resume(
    train_set: &[Example],
    dev_set: &[Example],
    mut state: TrainState,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if dev_set.is_empty() {
        return Err(Error::InvalidArgument("dev set is empty".into()));
    }
    if state.model.shape != config.model_shape {
        return Err(Error::Config(format!(
            "model shape {} does not match configured {}",
            state.model.shape, config.model_shape
        )));
    }
    if let Some(enc) = state.model.encoder.as_mut() {
        enc.config.dropout = config.dropout;
    }
    let adam_cfg = AdamConfig::from(config);
    let mode = config.parallelism;
    let classify = config.model_shape == ModelShape::ClassifyHead;
    let mut logs = Vec::new();
    let mut best = None;
    let mut report = None;

    while state.epoch < config.max_epochs
        && (state.epoch == 0 || state.epoch - state.best_epoch < config.patience)
    {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            SHUFFLE_STREAM,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let model = &state.model;
            let results = par::try_map(mode, batch, |_, &i| {
                let seed = derive_seed(config.seed, DROPOUT_STREAM, (epoch * train_set.len() + i) as u64);
                model.loss_and_grad(&train_set[i].input, &train_set[i].gold, seed, true)
            })?;
            let norm = if classify {
                batch.iter().map(|&i| train_set[i].gold.len()).sum::<usize>() as f64
            } else {
                batch.len() as f64
            };
            let mut iter = results.into_iter();
            let (mut loss, mut grads) = iter.next().expect("batches are non-empty");
            for (l, g) in iter {
                loss += l;
                grads.add_assign(&g);
            }
            loss /= norm;
            grads.scale(1.0 / norm);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    what: "loss",
                    epoch,
                    batch: b + 1,
                });
            }
            adam_step(&mut state.model, &grads, &mut state.adam, &adam_cfg).map_err(|_| {
                Error::Divergence {
                    what: "gradient",
                    epoch,
                    batch: b + 1,
                }
            })?;
            loss_sum += loss;
        }
        let dev = evaluate_examples(&state.model, dev_set, mode)?;
        state.epoch = epoch;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            dev_token_acc: dev.acc,
            dev_entity_p: dev.pre,
            dev_entity_r: dev.rec,
            dev_entity_f1: dev.f1,
            seconds: if config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if dev.f1 > state.best_dev_f1 {
            state.best_dev_f1 = dev.f1;
            state.best_epoch = epoch;
            best = Some(state.clone());
        }
        if config.report_epoch == Some(epoch) {
            report = Some(state.clone());
        }
        logs.push(log);
    }
    Ok(TrainOutcome {
        best,
        report,
        last: state,
        logs,
    })
}

#[derive(Debug)]
pub struct SweepRun {
    pub batch_size: usize,
    pub path: PathBuf,
    pub result: std::result::Result<Vec<EpochLog>, String>,
}

/// Trains once per batch size from the same initial model and seed, writing
/// `epochs_run<i>_bs<size>.csv` into `out_dir` for each run. A failed run
/// is recorded and the sweep moves on.
pub fn sweep_batch_sizes(
    sizes: &[usize],
    train_set: &[Example],
    dev_set: &[Example],
    initial: &TaggerModel,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<Vec<SweepRun>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no batch sizes given".into()));
    }
    if let Some(bad) = sizes.iter().find(|&&s| s == 0) {
        return Err(Error::InvalidArgument(format!("invalid batch size {bad}")));
    }
    fs::create_dir_all(out_dir)?;
    let mut runs = Vec::with_capacity(sizes.len());
    for (i, &size) in sizes.iter().enumerate() {
        let cfg = TrainConfig {
            batch_size: size,
            ..config.clone()
        };
        let path = out_dir.join(format!("epochs_run{}_bs{size}.csv", i + 1));
        let result = match train(train_set, dev_set, initial.clone(), &cfg) {
            Ok(outcome) => {
                fs::write(&path, epoch_logs_csv(&outcome.logs))?;
                Ok(outcome.logs)
            }
            Err(e) => Err(e.to_string()),
        };
        runs.push(SweepRun {
            batch_size: size,
            path,
            result,
        });
    }
    Ok(runs)
}
