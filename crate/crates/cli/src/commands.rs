use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use esc_core::corpus::cache::{load_or_prepare, CacheKey};
use esc_core::corpus::preprocess::{make_examples, MAX_EXAMPLE_UTTERANCES};
use esc_core::corpus::{
    annotate, load_esconv, prepare_context, prepare_example, save_esconv, truncate_and_split, Dialogue, PrepareOptions,
    PreparedExample, Segmentation, Strategy, Utterance, Vocab, VocabOptions,
};
use esc_core::eval::{evaluate, generate, GenerationConfig};
use esc_core::model::{CheckpointMeta, TransitionModel};
use esc_core::training::{RunOptions, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{apply_generation_flags, apply_train_flags, FileConfig};
use crate::{AnnotateArgs, ChatArgs, Cli, Command, EvalArgs, GenerateArgs, SegmentationArg, SplitArgs, TrainArgs};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Annotate(a) => annotate_cmd(&file, a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => train_cmd(&file, a),
        Command::Eval(a) => eval_cmd(&file, a),
        Command::Generate(a) => generate_cmd(&file, a),
        Command::Chat(a) => chat_cmd(&file, a),
    }
}

fn load(path: &Path) -> anyhow::Result<Vec<Dialogue>> {
    load_esconv(path).with_context(|| format!("loading {}", path.display()))
}

fn annotate_cmd(file: &FileConfig, a: AnnotateArgs) -> anyhow::Result<()> {
    let dialogues = load(&a.input)?;
    let fit_on = match &a.fit_on {
        Some(p) => load(p)?,
        None => dialogues.clone(),
    };
    let opts = VocabOptions {
        filter_stopwords: !a.keep_stopwords,
        ..Default::default()
    };
    let vocab = Vocab::fit(&fit_on, &opts);
    let k = a.keywords_k.unwrap_or(file.train.keywords_k);
    let out = annotate(&dialogues, &vocab, k);
    save_esconv(&a.output, &out)?;
    log::info!("annotated {} dialogues into {}", out.len(), a.output.display());
    Ok(())
}

fn split_cmd(a: SplitArgs) -> anyhow::Result<()> {
    let dialogues = load(&a.input)?;
    let mode = match a.segmentation {
        SegmentationArg::NonOverlapping => Segmentation::NonOverlapping,
        SegmentationArg::PerResponse => Segmentation::PerResponse,
    };
    let split = truncate_and_split(&dialogues, a.seed, a.ratio, mode)?;
    fs::create_dir_all(&a.out_dir)?;
    for (name, part) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        save_esconv(&a.out_dir.join(format!("{name}.json")), part)?;
    }
    println!("train {} dev {} test {}", split.train.len(), split.dev.len(), split.test.len());
    Ok(())
}

/// Examples ready for the model; files written by `split` pass through unchanged.
fn examples_of(dialogues: &[Dialogue]) -> Vec<Dialogue> {
    make_examples(dialogues, Segmentation::NonOverlapping, MAX_EXAMPLE_UTTERANCES)
}

fn prepare_all(
    dialogues: &[Dialogue],
    vocab: &Vocab,
    opts: &PrepareOptions,
    cache: Option<(&Path, CacheKey)>,
) -> anyhow::Result<Vec<PreparedExample>> {
    let examples = examples_of(dialogues);
    if let Some((dir, key)) = cache {
        fs::create_dir_all(dir)?;
        return Ok(load_or_prepare(dir, &key, &examples, vocab, opts)?);
    }
    examples
        .iter()
        .map(|d| prepare_example(d, vocab, opts).map_err(Into::into))
        .collect()
}

#[derive(Serialize)]
struct Resolved<'a> {
    model: &'a esc_core::model::ModelConfig,
    train: &'a TrainConfig,
}

fn train_cmd(file: &FileConfig, a: TrainArgs) -> anyhow::Result<()> {
    let (mut model_cfg, train_cfg) = apply_train_flags(file, &a);
    train_cfg.validate()?;

    let train_dialogues = load(&a.train)?;
    let (resumed, vocab, prepare) = match &a.resume {
        Some(path) => {
            let (trainer, meta) = Trainer::resume(path, Some(train_cfg.clone()))?;
            let vocab = meta.vocab.context("checkpoint has no vocabulary")?;
            let prepare = meta.prepare.context("checkpoint has no preprocessing options")?;
            model_cfg = trainer.model.config.clone();
            (Some(trainer), vocab, prepare)
        }
        None => {
            let vocab = Vocab::fit(&examples_of(&train_dialogues), &VocabOptions::default());
            model_cfg.vocab_size = vocab.len();
            let prepare = train_cfg.prepare_options(model_cfg.max_len, model_cfg.max_target_len);
            (None, vocab, prepare)
        }
    };
    model_cfg.validate()?;
    println!("{}", serde_json::to_string_pretty(&Resolved { model: &model_cfg, train: &train_cfg })?);
    if a.dry_run {
        return Ok(());
    }

    let key = |part: &str| CacheKey {
        seed: train_cfg.seed,
        window: prepare.window,
        keywords_k: prepare.keywords_k,
        vocab_hash: vocab.fingerprint(),
        part: part.to_string(),
    };
    let cache = |part: &str| a.cache_dir.as_deref().map(|d| (d, key(part)));
    let train = prepare_all(&train_dialogues, &vocab, &prepare, cache("train"))?;
    let dev = match &a.dev {
        Some(p) => Some(prepare_all(&load(p)?, &vocab, &prepare, cache("dev"))?),
        None => None,
    };
    if train.is_empty() {
        bail!("{} yields no training examples", a.train.display());
    }

    let mut trainer = match resumed {
        Some(t) => t,
        None => Trainer::new(TransitionModel::new(model_cfg)?, train_cfg)?,
    };
    fs::create_dir_all(&a.out_dir)?;
    let opts = RunOptions {
        checkpoint_dir: Some(a.out_dir.clone()),
        trace_path: Some(a.out_dir.join("loss.csv")),
        vocab: Some(vocab),
        prepare: Some(prepare),
    };
    let summary = trainer.run(&train, dev.as_deref(), &opts)?;
    if !a.out_dir.join("best.ckpt").exists() {
        trainer.save_checkpoint(&a.out_dir.join("best.ckpt"), &opts)?;
    }
    log::info!(
        "trained {} steps{}; best dev loss {:?}",
        summary.steps,
        if summary.stopped_early { " (early stop)" } else { "" },
        summary.best_dev
    );
    Ok(())
}

struct Loaded {
    model: TransitionModel,
    vocab: Vocab,
    prepare: PrepareOptions,
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Loaded> {
    let (model, meta): (TransitionModel, CheckpointMeta) =
        TransitionModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Loaded {
        model,
        vocab: meta.vocab.context("checkpoint has no vocabulary")?,
        prepare: meta.prepare.context("checkpoint has no preprocessing options")?,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn eval_cmd(file: &FileConfig, a: EvalArgs) -> anyhow::Result<()> {
    let cfg = apply_generation_flags(file, &a.generation);
    cfg.validate()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let examples = prepare_all(&load(&a.data)?, &ck.vocab, &ck.prepare, None)?;
    let (report, records) = evaluate(&ck.model, &ck.vocab, &examples, &cfg)?;
    fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(p) = &a.generations {
        write_jsonl(p, &records)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct GeneratedRow {
    dialogue_id: String,
    predicted_strategy: Strategy,
    response: String,
}

fn rng_for(cfg: &GenerationConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    rng
}

fn best_strategy(probs: &[f64]) -> Strategy {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Strategy::ALL[best]
}

fn generate_cmd(file: &FileConfig, a: GenerateArgs) -> anyhow::Result<()> {
    let cfg = apply_generation_flags(file, &a.generation);
    cfg.validate()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let examples = prepare_all(&load(&a.data)?, &ck.vocab, &ck.prepare, None)?;
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let g = generate(&ck.model, ex, &cfg, &mut rng_for(&cfg, i as u64))?;
        rows.push(GeneratedRow {
            dialogue_id: ex.id.clone(),
            predicted_strategy: best_strategy(&g.strategy_probs),
            response: ck.vocab.detokenize(&g.tokens),
        });
    }
    write_jsonl(&a.output, &rows)?;
    log::info!("wrote {} generations to {}", rows.len(), a.output.display());
    Ok(())
}

fn chat_cmd(file: &FileConfig, a: ChatArgs) -> anyhow::Result<()> {
    let cfg = apply_generation_flags(file, &a.generation);
    cfg.validate()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut history: Vec<Utterance> = Vec::new();
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for (turn, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        history.push(Utterance::seeker(text));
        let ex = prepare_context("chat", &history, None, &ck.vocab, &ck.prepare)?;
        let g = generate(&ck.model, &ex, &cfg, &mut rng_for(&cfg, turn as u64))?;
        let strategy = best_strategy(&g.strategy_probs);
        let response = ck.vocab.detokenize(&g.tokens);
        writeln!(out, "[{strategy}] {response}")?;
        out.flush()?;
        history.push(Utterance::supporter(response, strategy));
    }
    Ok(())
}
