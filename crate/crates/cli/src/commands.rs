use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use tcrf_core::checkpoint::Checkpoint;
use tcrf_core::corpus::{
    build_vocabulary, label_distribution, read_conll, read_unlabelled, split_train_dev,
    write_conll, write_predictions, Dataset, Vocabulary,
};
use tcrf_core::decoder_heads::{
    check_alignment, load_emissions, write_emissions, EmissionLattice, TransitionMatrix,
};
use tcrf_core::error::Error;
use tcrf_core::evaluation::{render_entity_table, render_model_summary, EvalBundle};
use tcrf_core::label_scheme::{Label, LabelSet};
use tcrf_core::model::{ModelInput, ModelShape, TaggerModel};
use tcrf_core::par::{self, Parallelism};
use tcrf_core::synthetic::{self, SyntheticConfig};
use tcrf_core::tensor::ParamSet;
use tcrf_core::trainer::{
    self, emission_examples, epoch_logs_csv, f1_curve_csv, token_examples, token_examples_whole,
    Example, TrainConfig, TrainState,
};

use crate::config::{resolve_output, RunConfig};
use crate::{EvaluateArgs, PredictArgs, PrepareArgs, SweepArgs, SynthArgs, TrainArgs, Usage};

/// Turns a core parse error into `file:line: message`.
fn located(path: &Path, e: Error) -> anyhow::Error {
    match e {
        Error::Parse { line, message } => anyhow!("{}:{line}: {message}", path.display()),
        other => anyhow::Error::new(other).context(format!("reading {}", path.display())),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn read_labelled(path: &Path, name: &str) -> Result<Dataset> {
    read_conll(name, open(path)?).map_err(|e| located(path, e))
}

fn read_lattices(path: &Path) -> Result<Vec<EmissionLattice>> {
    load_emissions(open(path)?, &LabelSet::clinical()).map_err(|e| located(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_conll(&mut w, &d.sentences)?;
    w.flush()?;
    Ok(())
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let train = read_labelled(&a.train, "train")?;
    let (train, dev) = match &a.dev {
        Some(p) => (train, read_labelled(p, "dev")?),
        None => {
            if !(a.dev_fraction > 0.0 && a.dev_fraction < 1.0) {
                return Err(Usage(format!("--dev-fraction must lie in (0, 1), got {}", a.dev_fraction)).into());
            }
            split_train_dev(&train, a.dev_fraction, a.seed)?
        }
    };
    let test = a.test.as_deref().map(|p| read_labelled(p, "test")).transpose()?;

    let out = resolve_output(&a.output_dir);
    create_dir(&out)?;
    let mut splits = vec![&train, &dev];
    write_dataset(&out.join("train.conll"), &train)?;
    write_dataset(&out.join("dev.conll"), &dev)?;
    if let Some(t) = &test {
        write_dataset(&out.join("test.conll"), t)?;
        splits.push(t);
    }
    write_file(&out.join("label_distribution.csv"), label_distribution(&splits).to_csv())?;
    for d in splits {
        println!("{}: {} sentences, {} tokens", d.name, d.len(), d.token_count());
    }
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn required(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    cfg.path(key)
        .ok_or_else(|| Usage(format!("`{key}` is not set")).into())
}

/// Examples and starting state shared by `train` and `sweep`.
struct Prepared {
    train: Vec<Example>,
    dev: Vec<Example>,
    state: TrainState,
    vocabulary: Option<Vocabulary>,
    train_config: TrainConfig,
}

fn prepare_run(cfg: &RunConfig) -> Result<Prepared> {
    let tc = cfg.train_config()?;
    let shape = tc.model_shape;
    let train_path = required(cfg, "train")?;
    let dev_path = required(cfg, "dev")?;
    let resumed = cfg
        .path("checkpoint")
        .map(|p| Checkpoint::load(&p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    if let Some(ck) = &resumed {
        if ck.model().shape != shape {
            return Err(Usage(format!(
                "checkpoint holds a {} model but model_shape is {shape}",
                ck.model().shape
            ))
            .into());
        }
    }
    let train = read_labelled(&train_path, "train")?;
    let dev = read_labelled(&dev_path, "dev")?;

    if shape == ModelShape::FrozenEmissionsCrf {
        let (Some(te), Some(de)) = (cfg.path("emissions"), cfg.path("dev_emissions")) else {
            return Err(Usage(
                "frozen_emissions_crf needs both `emissions` and `dev_emissions`".into(),
            )
            .into());
        };
        let train_ex = emission_examples(&train, read_lattices(&te)?)
            .with_context(|| format!("aligning {} with {}", te.display(), train_path.display()))?;
        let dev_ex = emission_examples(&dev, read_lattices(&de)?)
            .with_context(|| format!("aligning {} with {}", de.display(), dev_path.display()))?;
        let state = match resumed {
            Some(ck) => ck.state,
            None => TrainState::new(TaggerModel::new(shape, None, tc.constrain_bioes)?),
        };
        return Ok(Prepared {
            train: train_ex,
            dev: dev_ex,
            state,
            vocabulary: None,
            train_config: tc,
        });
    }

    if cfg.path("emissions").is_some() || cfg.path("dev_emissions").is_some() {
        return Err(Usage(format!("emission files only apply to frozen_emissions_crf, not {shape}")).into());
    }
    let (state, vocab) = match resumed {
        Some(ck) => {
            let vocab = ck
                .vocabulary
                .ok_or_else(|| anyhow!("checkpoint has no vocabulary"))?;
            (ck.state, vocab)
        }
        None => {
            let vocab = build_vocabulary(&train, cfg.min_frequency()?)?;
            let enc = cfg.encoder_config(vocab.len())?;
            let model = TaggerModel::new(shape, Some(&enc), tc.constrain_bioes)?;
            (TrainState::new(model), vocab)
        }
    };
    let max_seq = state
        .model
        .encoder_config()
        .expect("encoder shape")
        .max_sequence;
    Ok(Prepared {
        train: token_examples(&train, &vocab, max_seq),
        dev: token_examples_whole(&dev, &vocab),
        state,
        vocabulary: Some(vocab),
        train_config: tc,
    })
}

/// Parameter counts of the trained shape and its encoder sibling.
fn model_summary(model: &TaggerModel) -> String {
    let p = model.parameter_count();
    let crf = TransitionMatrix::clinical(true).parameter_count();
    let rows = match model.shape {
        ModelShape::ClassifyHead => vec![("classify_head", p), ("transformer_crf", p + crf)],
        ModelShape::TransformerCrf => vec![("classify_head", p - crf), ("transformer_crf", p)],
        ModelShape::FrozenEmissionsCrf => vec![("frozen_emissions_crf", p)],
    };
    render_model_summary(&rows)
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(Usage);
    if let Some(p) = &a.emissions {
        set("emissions", p.display().to_string())?;
    }
    if let Some(p) = &a.dev_emissions {
        set("dev_emissions", p.display().to_string())?;
    }
    if let Some(e) = a.report_epoch {
        set("report_epoch", e.to_string())?;
    }
    if let Some(p) = &a.output_dir {
        set("output_dir", p.display().to_string())?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    apply_train_flags(&mut cfg, a)?;
    let run = prepare_run(&cfg)?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    write_file(&out.join("config.resolved"), cfg.echo())?;

    let mode = run.train_config.parallelism;
    eprintln!(
        "training {} ({} parameters) on {} examples, {} dev",
        run.train_config.model_shape,
        run.state.model.parameter_count(),
        run.train.len(),
        run.dev.len()
    );
    let outcome = trainer::resume(&run.train, &run.dev, run.state, &run.train_config)?;
    for log in &outcome.logs {
        eprintln!("{log}");
    }

    let save = |name: &str, state: &TrainState| -> Result<()> {
        let ck = Checkpoint {
            state: state.clone(),
            train_config: run.train_config.clone(),
            vocabulary: run.vocabulary.clone(),
        };
        let path = out.join(name);
        ck.save(&path).with_context(|| format!("writing {}", path.display()))
    };
    save("last.ckpt", &outcome.last)?;
    let best = outcome.best.as_ref().unwrap_or(&outcome.last);
    save("best.ckpt", best)?;
    if let Some(r) = &outcome.report {
        save("report.ckpt", r)?;
    }
    write_file(&out.join("epochs.csv"), epoch_logs_csv(&outcome.logs))?;
    write_file(&out.join("f1_curve.csv"), f1_curve_csv(&outcome.logs))?;
    let summary = model_summary(&best.model);
    write_file(&out.join("model_summary.csv"), &summary)?;
    print!("{summary}");

    let label = cfg.report_label().to_string();
    let dev_report = trainer::evaluate_examples(&best.model, &run.dev, mode)?;
    println!(
        "{}",
        render_entity_table(&dev_report, &format!("dev, epoch {} ({label})", best.best_epoch))
    );

    if let Some(test_path) = cfg.path("test") {
        let test = read_labelled(&test_path, "test")?;
        let inputs = model_inputs(&best.model, &test, run.vocabulary.as_ref(), cfg.path("test_emissions").as_deref())?;
        let preds = par::try_map(mode, &inputs, |_, x| best.model.predict(x))?;
        let pred_path = out.join("test_predictions.conll");
        let mut w = BufWriter::new(File::create(&pred_path)?);
        write_predictions(&mut w, &test.sentences, &preds)?;
        w.flush()?;
        let bundle = EvalBundle::compute(&test.gold(), &preds, mode)?;
        let eval_dir = out.join("test_eval");
        write_bundle(&eval_dir, &bundle)?;
        println!("{}", render_entity_table(&bundle.entity, &format!("test ({label})")));
    }
    Ok(())
}

fn model_inputs(
    model: &TaggerModel,
    d: &Dataset,
    vocab: Option<&Vocabulary>,
    emissions: Option<&Path>,
) -> Result<Vec<ModelInput>> {
    if model.shape.uses_encoder() {
        let vocab = vocab.ok_or_else(|| anyhow!("checkpoint has no vocabulary"))?;
        Ok(d.sentences
            .iter()
            .map(|s| ModelInput::Tokens(vocab.encode(&s.tokens)))
            .collect())
    } else {
        let path = emissions.ok_or_else(|| {
            Usage("a frozen_emissions_crf model needs an emissions file for its input".into())
        })?;
        let lattices = read_lattices(path)?;
        check_alignment(&lattices, d)
            .with_context(|| format!("aligning {} with {}", path.display(), d.name))?;
        Ok(lattices.into_iter().map(ModelInput::Emissions).collect())
    }
}

fn mode_of(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    }
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = ck.model();
    let name = a.input.display().to_string();
    let input = read_unlabelled(&name, open(&a.input)?).map_err(|e| located(&a.input, e))?;
    let inputs = model_inputs(model, &input, ck.vocabulary.as_ref(), a.emissions.as_deref())?;
    let mode = mode_of(a.sequential);

    if let Some(p) = &a.emit_emissions {
        let lattices = par::try_map(mode, &inputs, |_, x| model.emissions(x))?;
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        write_emissions(&mut w, &lattices, &LabelSet::clinical())?;
        w.flush()?;
    }
    let preds: Vec<Vec<Label>> = par::try_map(mode, &inputs, |_, x| model.predict(x))?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = BufWriter::new(
        File::create(&a.output).with_context(|| format!("creating {}", a.output.display()))?,
    );
    write_predictions(&mut w, &input.sentences, &preds)?;
    w.flush()?;
    eprintln!("tagged {} sentences, {} tokens", input.len(), input.token_count());
    Ok(())
}

fn write_bundle(dir: &Path, bundle: &EvalBundle) -> Result<()> {
    create_dir(dir)?;
    for (name, body) in bundle.render() {
        write_file(&dir.join(name), body)?;
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let gold = read_labelled(&a.gold, "gold")?;
    let pred = read_labelled(&a.pred, "pred")?;
    if gold.len() != pred.len() {
        bail!("{} has {} sentences but {} has {}", a.gold.display(), gold.len(), a.pred.display(), pred.len());
    }
    for (i, (g, p)) in gold.sentences.iter().zip(&pred.sentences).enumerate() {
        if g.tokens != p.tokens {
            bail!("sentence {}: tokens of gold and prediction differ", i + 1);
        }
    }
    let bundle = EvalBundle::compute(&gold.gold(), &pred.gold(), mode_of(a.sequential))?;
    write_bundle(&resolve_output(&a.output_dir), &bundle)?;
    println!("{}", render_entity_table(&bundle.entity, &format!("epoch {}", a.report_epoch)));
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    if a.batch_sizes.contains(&0) {
        return Err(Usage("batch sizes must be positive".into()).into());
    }
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(p) = &a.output_dir {
        cfg.set("output_dir", &p.display().to_string()).map_err(Usage)?;
    }
    let run = prepare_run(&cfg)?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    write_file(&out.join("config.resolved"), cfg.echo())?;
    let runs = trainer::sweep_batch_sizes(
        &a.batch_sizes,
        &run.train,
        &run.dev,
        &run.state.model,
        &run.train_config,
        &out,
    )?;
    let mut failures = 0;
    for (i, r) in runs.iter().enumerate() {
        match &r.result {
            Ok(logs) => {
                let best = logs.iter().map(|l| l.dev_entity_f1).fold(f64::NEG_INFINITY, f64::max);
                println!(
                    "run {} batch_size {}: {} epochs, best dev F1 {:.4} -> {}",
                    i + 1,
                    r.batch_size,
                    logs.len(),
                    best,
                    r.path.display()
                );
            }
            Err(e) => {
                failures += 1;
                println!("run {} batch_size {}: failed: {e}", i + 1, r.batch_size);
            }
        }
    }
    if failures == runs.len() {
        bail!("every sweep run failed");
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let (train, dev, test) = synthetic::generate(&SyntheticConfig {
        train: a.train,
        dev: a.dev,
        test: a.test,
        seed: a.seed,
    });
    let out = resolve_output(&a.output_dir);
    create_dir(&out)?;
    for d in [&train, &dev, &test] {
        write_dataset(&out.join(format!("{}.conll", d.name)), d)?;
    }
    write_file(&out.join("label_distribution.csv"), label_distribution(&[&train, &dev, &test]).to_csv())?;
    Ok(())
}
