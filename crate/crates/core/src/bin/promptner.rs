use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use promptner::config::RunConfig;
use promptner::episode::{
    load_corpus, read_episodes, sample_episode, validate_episode, write_column_file,
    write_episodes, Corpus, CorpusFormat, Episode,
};
use promptner::harness::{
    episode_gold, error_breakdown, evaluate, grid_by_name, micro_f1, run_ablation, ResultsFile,
    Variant,
};
use promptner::inference::{read_predictions, write_predictions};
use promptner::training::{
    build_vocabulary, load_checkpoint, save_checkpoint, train, EncoderSpec, PromptNer,
};
use promptner::{selftest, synthetic, Error, Result};

#[derive(Parser)]
#[command(
    name = "promptner",
    version,
    about = "Few-shot NER with prompt-based span detection and classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated corpus in column format.
    Synth {
        #[arg(long, value_delimiter = ',', required = true)]
        types: Vec<String>,
        #[arg(long, default_value_t = 40)]
        sentences: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value = "s")]
        id_prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample N-way K-shot episodes from a corpus.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "column-bio")]
        format: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune on each support set, predict the queries and score them.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        episodes: PathBuf,
        /// Comma-separated seeds; defaults to `eval.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Evaluate every variant of an ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        episodes: PathBuf,
        /// table3, rerank or full; defaults to `eval.grid`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Split false positives into span and type errors.
    AnalyzeErrors {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Run the built-in property checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth {
            types,
            sentences,
            seed,
            id_prefix,
            out,
        } => {
            let types: Vec<&str> = types.iter().map(String::as_str).collect();
            let s = synthetic::generate(&types, sentences, seed, &id_prefix)?;
            write_column_file(&out, &s)?;
            println!(
                "{}",
                serde_json::json!({ "sentences": s.len(), "out": out })
            );
        }
        Command::Sample {
            cfg,
            corpus,
            format,
            count,
            out,
        } => {
            let rc = cfg.load()?;
            let corpus = load_corpus(&corpus, format.parse::<CorpusFormat>()?)?;
            let episodes = sample_many(&corpus, &rc, count, rc.seed)?;
            write_episodes(&out, &episodes)?;
            let failed = episodes
                .iter()
                .filter(|e| !validate_episode(e).passed())
                .count();
            println!(
                "{}",
                serde_json::json!({ "episodes": episodes.len(), "failed_validation": failed, "out": out })
            );
        }
        Command::Train { cfg } => train_cmd(&cfg.load()?)?,
        Command::Eval {
            cfg,
            episodes,
            seeds,
        } => {
            let rc = cfg.load()?;
            let seeds = if seeds.is_empty() {
                rc.eval.seeds.clone()
            } else {
                seeds
            };
            let (model, episodes) = load_for_eval(&rc, &episodes)?;
            let v = align(grid_by_name("full")?, &model, &rc).remove(0);
            let settings = rc.eval_settings();
            let mut records = Vec::new();
            for (i, &seed) in seeds.iter().enumerate() {
                let (rec, outcomes) = evaluate(&model, &episodes, &v, &settings, seed)?;
                if i == 0 {
                    let preds: Vec<_> = outcomes.into_iter().flat_map(|o| o.predictions).collect();
                    write_predictions(rc.output_dir.join("predictions.jsonl"), &preds)?;
                }
                records.push(rec);
            }
            let results = ResultsFile::from_records(records);
            write_json(&rc.output_dir.join("results.json"), &results)?;
            print!("{}", results.table());
        }
        Command::Ablate {
            cfg,
            episodes,
            grid,
            seeds,
        } => {
            let rc = cfg.load()?;
            let seeds = if seeds.is_empty() {
                rc.eval.seeds.clone()
            } else {
                seeds
            };
            let grid = grid_by_name(grid.as_deref().unwrap_or(&rc.eval.grid))?;
            let (model, episodes) = load_for_eval(&rc, &episodes)?;
            let grid = align(grid, &model, &rc);
            let results = run_ablation(&model, &grid, &episodes, &seeds, &rc.eval_settings())?;
            write_json(&rc.output_dir.join("ablation.json"), &results)?;
            std::fs::write(rc.output_dir.join("ablation.txt"), results.table())?;
            print!("{}", results.table());
        }
        Command::AnalyzeErrors {
            cfg,
            episodes,
            predictions,
        } => {
            let rc = cfg.load()?;
            let gold: Vec<_> = read_episodes(&episodes)?
                .iter()
                .flat_map(episode_gold)
                .collect();
            let preds = read_predictions(&predictions)?;
            let f1 = micro_f1(&preds, &gold)?;
            let eb = error_breakdown(&preds, &gold)?;
            let report = serde_json::json!({ "micro_f1": f1, "errors": eb });
            write_json(&rc.output_dir.join("errors.json"), &report)?;
            println!(
                "F1 {:.2}  FP-Span {:.2}%  FP-Type {:.2}%",
                100.0 * f1.micro_f1,
                100.0 * eb.fp_span_ratio,
                100.0 * eb.fp_type_ratio
            );
        }
        Command::Selftest { seed } => {
            let checks = selftest::run_all(seed);
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Episode `i` is sampled with seed `seed · 1_000_003 + i`.
fn sample_many(corpus: &Corpus, rc: &RunConfig, count: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..count as u64)
        .map(|i| {
            sample_episode(
                corpus,
                rc.data.n_way,
                rc.data.k_shot,
                seed.wrapping_mul(1_000_003).wrapping_add(i),
            )
        })
        .collect()
}

fn training_corpus(rc: &RunConfig) -> Result<Corpus> {
    match (&rc.data.train, &rc.data.synthetic) {
        (Some(path), _) => load_corpus(path, rc.data.format),
        (None, Some(s)) => {
            let types: Vec<&str> = s.types.iter().map(String::as_str).collect();
            synthetic::corpus(&types, s.sentences, s.seed, "train-")
        }
        (None, None) => Err(Error::Config("set data.train or data.synthetic".into())),
    }
}

fn train_cmd(rc: &RunConfig) -> Result<()> {
    let corpus = training_corpus(rc)?;
    let episodes = if corpus.episodes.is_empty() {
        sample_many(&corpus, rc, rc.data.train_episodes, rc.seed)?
    } else {
        corpus.episodes.clone()
    };
    let dev = rc.data.dev.as_ref().map(read_episodes).transpose()?;

    let tokenizer = match rc.model.encoder {
        EncoderSpec::Tiny { .. } => {
            let mut extra = Vec::new();
            for path in &rc.data.extra_vocab {
                let format = if path.extension().is_some_and(|e| e == "jsonl") {
                    CorpusFormat::EpisodeJson
                } else {
                    CorpusFormat::ColumnBio
                };
                extra.push(load_corpus(path, format)?);
            }
            let others = dev
                .iter()
                .flatten()
                .flat_map(|e| e.support.iter().chain(&e.query));
            let others = others.chain(extra.iter().flat_map(|c| &c.sentences));
            let mut types = corpus.types.clone();
            for e in dev.iter().flatten() {
                types.extend(e.type_set.entity_types().iter().cloned());
            }
            for c in &extra {
                types.extend(c.types.iter().cloned());
            }
            let lexicon = if rc.data.synthetic.is_some() {
                synthetic::vocabulary()
            } else {
                Vec::new()
            };
            Some(build_vocabulary(
                corpus.sentences.iter().chain(others),
                &types,
                &rc.model.template,
                &lexicon,
            )?)
        }
        EncoderSpec::Pretrained { .. } => None,
    };
    let model = PromptNer::new(rc.model.clone(), tokenizer, rc.seed)?;
    let mut train_cfg = rc.train.clone();
    train_cfg.seed = rc.seed;

    let settings = rc.eval_settings();
    let no_finetune = {
        let mut v = align(grid_by_name("full")?, &model, rc).remove(0);
        v.flags.fine_tune = false;
        v
    };
    let dev_f1 = |m: &PromptNer| -> Result<f64> {
        let eps = dev.as_deref().unwrap_or_default();
        Ok(evaluate(m, eps, &no_finetune, &settings, rc.seed)?.0.f1)
    };
    let selector: Option<&dyn Fn(&PromptNer) -> Result<f64>> =
        if dev.is_some() { Some(&dev_f1) } else { None };
    let (model, report) = train(model, &episodes, train_cfg, selector)?;

    let dir = rc.checkpoint_dir();
    save_checkpoint(&model, &dir, report.best_step, rc.seed)?;
    write_json(&rc.output_dir.join("train_report.json"), &report)?;
    let tail =
        report.losses.iter().rev().take(50).sum::<f64>() / report.losses.len().clamp(1, 50) as f64;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": dir,
            "steps": report.losses.len(),
            "best_step": report.best_step,
            "best_dev_f1": report.best_dev_f1,
            "final_loss_avg50": tail,
        })
    );
    Ok(())
}

fn load_for_eval(rc: &RunConfig, path: &Path) -> Result<(PromptNer, Vec<Episode>)> {
    let (model, _) = load_checkpoint(rc.checkpoint_dir())?;
    let episodes = read_episodes(path)?;
    if episodes.is_empty() {
        return Err(Error::Run(format!("no episodes in {}", path.display())));
    }
    Ok((model, episodes))
}

/// Fixes the train-time switches of every variant to what the checkpoint and
/// the loss configuration actually use.
fn align(mut grid: Vec<Variant>, model: &PromptNer, rc: &RunConfig) -> Vec<Variant> {
    for v in &mut grid {
        v.flags.two_encoders = model.config.two_encoders;
        v.flags.contrastive = rc.train.loss.use_contrastive;
        v.flags.negatives_in_class_loss = rc.train.loss.negatives_in_class_loss;
    }
    grid
}
