//! Command-line entry point: data generation, training, evaluation,
//! attention inspection, gradient checking, and baselines.
//!
//! Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 I/O error.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baselines;
use crate::datagen::{self, SynthConfig, TaskKind};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::memory::{self, AttentionLevel};
use crate::model::{self, ModelConfig, ModelKind, ModelParams};
use crate::training::{self, Checkpoint, TrainConfig};
use crate::treebank::{read_problems, write_problems, ProblemSet};

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 2;
const EXIT_NUMERIC: i32 = 3;
const EXIT_IO: i32 = 4;

#[derive(Parser)]
#[command(name = "ham", version, about = "Tree-structured attention for multiple-choice comprehension")]
struct Cli {
    /// Base directory for all relative paths.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and split it into train/dev/test.
    Gen(GenArgs),
    /// Train a model and write checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Dump top-k attention per hop for one problem.
    Attn(AttnArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a baseline on a dataset.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "locate")]
    task: TaskKind,
    /// Number of problems.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Correct answers per problem.
    #[arg(long, default_value_t = 1)]
    answers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    story_len: usize,
    #[arg(long, default_value_t = 4)]
    distractors: usize,
    #[arg(long, default_value_t = 40)]
    vocabulary: usize,
    #[arg(long)]
    random_trees: bool,
    /// Story token corruption probability.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// train/dev/test ratios.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "DEV", "TEST"], default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
}

#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long, default_value_t = 2)]
    hops: usize,
    #[arg(long, default_value = "phrase")]
    level: AttentionLevel,
    /// Hidden/embedding/memory dimension (all equal).
    #[arg(long, default_value_t = 75)]
    dim: usize,
    #[arg(long)]
    untie_encoders: bool,
    #[arg(long)]
    freeze_embeddings: bool,
    #[arg(long, default_value_t = 1.0)]
    forget_bias: f64,
}

impl ModelFlags {
    fn to_config(&self, kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            d_emb: self.dim,
            d_h: self.dim,
            d_mem: self.dim,
            hops: self.hops,
            level: self.level,
            tie_encoders: !self.untie_encoders,
            train_embeddings: !self.freeze_embeddings,
            forget_bias: self.forget_bias,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    patience: usize,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    full_batch: bool,
    /// Pretrained-vector text file for embedding initialization.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional JSONL predictions output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Problem index within the dataset.
    #[arg(long, default_value_t = 0)]
    problem: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Emit JSON only (no text rendering).
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Number of random model/problem draws.
    #[arg(long, default_value_t = 5)]
    models: usize,
    #[arg(long, default_value_t = 6)]
    dim: usize,
}

#[derive(Args)]
struct BaselineArgs {
    /// question-choice | sliding-window | tree-lstm-sum
    #[arg(long)]
    name: String,
    #[arg(long)]
    data: PathBuf,
    /// Sliding-window size.
    #[arg(long, default_value_t = baselines::DEFAULT_WINDOW)]
    window: usize,
    /// Pretrained vectors for the averaged-vector baselines; a seeded
    /// random table over the dataset vocabulary is used otherwise.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 75)]
    dim: usize,
    /// Train/dev files for the trained tree-lstm-sum baseline.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    /// Optional JSONL predictions output.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn cli_main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => EXIT_NUMERIC,
                Error::Io(_) | Error::Json(_) | Error::Parse { .. } | Error::Checkpoint(_) => EXIT_IO,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(&cli.workdir, args),
        Command::Train(args) => cmd_train(&cli.workdir, args),
        Command::Eval(args) => cmd_eval(&cli.workdir, args),
        Command::Attn(args) => cmd_attn(&cli.workdir, args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Baseline(args) => cmd_baseline(&cli.workdir, args),
    }
}

fn resolve(workdir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        workdir.join(path)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn cmd_gen(workdir: &Path, args: GenArgs) -> Result<()> {
    let config = SynthConfig {
        seed: args.seed,
        num_problems: args.n,
        vocabulary: args.vocabulary,
        story_len: args.story_len,
        filler_range: (0, 0),
        k: args.k,
        n: args.answers,
        task: args.task,
        distractors: args.distractors,
        random_trees: args.random_trees,
        token_dropout: args.dropout,
    };
    let generated = datagen::generate(&config)?;
    let ratios = (args.ratios[0], args.ratios[1], args.ratios[2]);
    let (train, dev, test) = datagen::split(&generated, ratios, args.seed)?;

    let out = resolve(workdir, &args.out);
    std::fs::create_dir_all(&out)?;
    for (name, subset) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let problems: Vec<ProblemSet> = subset.iter().map(|(p, _)| p.clone()).collect();
        write_problems(&out.join(format!("{name}.jsonl")), &problems)?;
        let mut sidecar = std::fs::File::create(out.join(format!("{name}.truth.jsonl")))?;
        for (_, truth) in subset.iter() {
            serde_json::to_writer(&mut sidecar, truth)?;
            sidecar.write_all(b"\n")?;
        }
    }
    println!(
        "generated {} problems ({} train / {} dev / {} test) into {}",
        generated.len(),
        train.len(),
        dev.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    config: &'a TrainConfig,
    train_path: String,
    dev_path: String,
    train_sha256: String,
    dev_sha256: String,
    checkpoint_path: String,
    metrics_path: String,
}

fn cmd_train(workdir: &Path, args: TrainArgs) -> Result<()> {
    let train_path = resolve(workdir, &args.train);
    let dev_path = resolve(workdir, &args.dev);
    let out = resolve(workdir, &args.out);
    std::fs::create_dir_all(&out)?;

    let train_set = read_problems(&train_path)?;
    let dev_set = read_problems(&dev_path)?;
    let config = TrainConfig {
        model: args.model.to_config(ModelKind::Attention),
        learning_rate: args.lr,
        epochs: args.epochs,
        seed: args.seed,
        patience: args.patience,
        clip_norm: args.clip,
        full_batch: args.full_batch,
    };
    config.model.validate()?;

    let checkpoint_path = out.join("model.ckpt");
    let metrics_path = out.join("metrics.csv");
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        config: &config,
        train_path: train_path.display().to_string(),
        dev_path: dev_path.display().to_string(),
        train_sha256: sha256_file(&train_path)?,
        dev_sha256: sha256_file(&dev_path)?,
        checkpoint_path: checkpoint_path.display().to_string(),
        metrics_path: metrics_path.display().to_string(),
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let init = match &args.embeddings {
        Some(path) => {
            let table = EmbeddingTable::load_pretrained(&resolve(workdir, path))?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            Some(ModelParams::init(&config.model, &[], Some(table), &mut rng)?)
        }
        None => None,
    };
    let outcome = training::train_with_init(&config, &train_set, &dev_set, init)?;
    training::write_metrics_csv(&metrics_path, &outcome.metrics)?;
    Checkpoint::new(config.model.clone(), config.seed, outcome.params.clone()).save(&checkpoint_path)?;

    let final_dev = training::evaluate(&outcome.params, &config.model, &dev_set)?;
    println!(
        "trained {} epochs (best epoch {:?}); dev accuracy {:.4}",
        outcome.metrics.len(),
        outcome.best_epoch,
        final_dev.accuracy
    );
    println!("checkpoint: {}", checkpoint_path.display());
    println!("metrics:    {}", metrics_path.display());
    Ok(())
}

fn write_predictions(path: &Path, report: &training::EvalReport) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for record in &report.records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

fn cmd_eval(workdir: &Path, args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&resolve(workdir, &args.checkpoint))?;
    let dataset = read_problems(&resolve(workdir, &args.data))?;
    let report = training::evaluate(&ckpt.params, &ckpt.config, &dataset)?;
    if let Some(out) = &args.out {
        write_predictions(&resolve(workdir, out), &report)?;
    }
    println!("accuracy {:.4} on {} problems", report.accuracy, report.records.len());
    Ok(())
}

fn render_attention(problem: &ProblemSet, top: &[Vec<memory::TopAttention>]) {
    for (hop, entries) in top.iter().enumerate() {
        println!("hop {}:", hop + 1);
        for e in entries {
            let sentence = &problem.story[e.provenance.sentence];
            let tokens = sentence.tokens();
            let in_span: Vec<bool> = match e.provenance.node {
                Some(node) => {
                    let span = sentence.subtree_span(node);
                    (0..tokens.len()).map(|i| span.contains(&i)).collect()
                }
                None => vec![true; tokens.len()],
            };
            let head = e.provenance.node.unwrap_or(sentence.root_index());
            let mut text = String::new();
            let mut marks = String::new();
            for (i, tok) in tokens.iter().enumerate() {
                if i > 0 {
                    text.push(' ');
                    marks.push(' ');
                }
                text.push_str(tok);
                let mark = if i == head {
                    '*'
                } else if in_span[i] {
                    '^'
                } else {
                    ' '
                };
                marks.extend(std::iter::repeat(mark).take(tok.chars().count()));
            }
            println!("  [{:>8.5}] sentence {:>2}: {}", e.weight, e.provenance.sentence, text);
            println!("                           {}", marks);
        }
    }
}

fn cmd_attn(workdir: &Path, args: AttnArgs) -> Result<()> {
    if args.k < 1 {
        return Err(Error::domain("attn", "k must be >= 1"));
    }
    let ckpt = Checkpoint::load(&resolve(workdir, &args.checkpoint))?;
    let dataset = read_problems(&resolve(workdir, &args.data))?;
    let problem = dataset.get(args.problem).ok_or_else(|| {
        Error::domain(
            "attn",
            format!("problem index {} out of range ({} problems)", args.problem, dataset.len()),
        )
    })?;
    let pass = model::forward(&ckpt.params, &ckpt.config, problem)?;
    let top = memory::top_k_attention(&pass.trace, args.k);
    println!("{}", serde_json::to_string_pretty(&top)?);
    if !args.json {
        render_attention(problem, &top);
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = random_grad_checks(args.seed, args.models, args.dim, args.tolerance)?;
    let mut worst = 0.0_f64;
    let mut failures = 0usize;
    for (i, report) in reports.iter().enumerate() {
        worst = worst.max(report.max_relative_error);
        if !report.passed() {
            failures += 1;
            println!("model {i}: FAIL (max rel err {:.3e})", report.max_relative_error);
        }
    }
    println!(
        "gradcheck: {}/{} models passed, max relative error {:.3e} (tolerance {:.1e})",
        reports.len() - failures,
        reports.len(),
        worst,
        args.tolerance
    );
    if failures > 0 {
        return Err(Error::NonFinite(format!("{failures} gradient checks failed")));
    }
    println!("PASS");
    Ok(())
}

/// Seeded random small-model gradient checks over both attention levels
/// and hop counts 1-2. Also used by the acceptance suite.
pub fn random_grad_checks(
    seed: u64,
    models: usize,
    dim: usize,
    tolerance: f64,
) -> Result<Vec<training::GradCheckReport>> {
    let mut reports = Vec::with_capacity(models);
    for i in 0..models {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let level = if i % 2 == 0 { AttentionLevel::Phrase } else { AttentionLevel::Sentence };
        let hops = 1 + (i / 2) % 2;
        let config = ModelConfig {
            d_emb: dim,
            d_h: dim,
            d_mem: dim,
            hops,
            level,
            ..ModelConfig::default()
        };
        let synth = SynthConfig {
            seed: seed.wrapping_add(1000 + i as u64),
            num_problems: 1,
            story_len: 3,
            distractors: 2,
            k: 3,
            vocabulary: 24,
            ..SynthConfig::default()
        };
        let (problem, _) = datagen::generate(&synth)?.remove(0);
        let vocab: Vec<String> = problem
            .story
            .iter()
            .chain(&problem.question)
            .chain(problem.choices.iter().flatten())
            .flat_map(|t| t.tokens().iter().cloned())
            .collect();
        let params = ModelParams::init(&config, &vocab, None, &mut rng)?;
        reports.push(training::grad_check(&params, &config, &problem, tolerance)?);
    }
    Ok(reports)
}

fn baseline_table(
    workdir: &Path,
    args: &BaselineArgs,
    dataset: &[ProblemSet],
) -> Result<EmbeddingTable> {
    match &args.embeddings {
        Some(path) => EmbeddingTable::load_pretrained(&resolve(workdir, path)),
        None => {
            let mut words: BTreeSet<String> = BTreeSet::new();
            for p in dataset {
                for tree in p.story.iter().chain(&p.question).chain(p.choices.iter().flatten()) {
                    words.extend(tree.tokens().iter().map(|t| t.to_lowercase()));
                }
            }
            let words: Vec<String> = words.into_iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            Ok(EmbeddingTable::random(&words, args.dim, &mut rng))
        }
    }
}

#[derive(Serialize)]
struct BaselineRecord<'a> {
    baseline: &'a str,
    problem: usize,
    selected: &'a BTreeSet<usize>,
    correct_flag: bool,
}

fn cmd_baseline(workdir: &Path, args: BaselineArgs) -> Result<()> {
    let dataset = read_problems(&resolve(workdir, &args.data))?;
    if dataset.is_empty() {
        return Err(Error::domain("baseline", "empty dataset"));
    }
    let selections: Vec<BTreeSet<usize>> = match args.name.as_str() {
        "question-choice" => {
            let table = baseline_table(workdir, &args, &dataset)?;
            dataset
                .iter()
                .map(|p| baselines::baseline_question_choice(p, &table))
                .collect()
        }
        "sliding-window" => {
            let table = baseline_table(workdir, &args, &dataset)?;
            dataset
                .iter()
                .map(|p| baselines::baseline_sliding_window(p, &table, args.window))
                .collect()
        }
        "tree-lstm-sum" => {
            let (train_path, dev_path) = match (&args.train, &args.dev) {
                (Some(t), Some(d)) => (resolve(workdir, t), resolve(workdir, d)),
                _ => {
                    return Err(Error::domain(
                        "baseline",
                        "tree-lstm-sum needs --train and --dev",
                    ))
                }
            };
            let train_set = read_problems(&train_path)?;
            let dev_set = read_problems(&dev_path)?;
            let config = TrainConfig {
                model: ModelConfig {
                    kind: ModelKind::TreeLstmSum,
                    d_emb: args.dim,
                    d_h: args.dim,
                    d_mem: args.dim,
                    hops: 1,
                    ..ModelConfig::default()
                },
                learning_rate: args.lr,
                epochs: args.epochs,
                seed: args.seed,
                ..TrainConfig::default()
            };
            let outcome = training::train(&config, &train_set, &dev_set)?;
            let report = training::evaluate(&outcome.params, &config.model, &dataset)?;
            report.records.into_iter().map(|r| r.selected).collect()
        }
        other => {
            return Err(Error::domain(
                "baseline",
                format!("unknown baseline {other:?} (expected question-choice|sliding-window|tree-lstm-sum)"),
            ))
        }
    };

    let mut hits = 0usize;
    let mut records = Vec::with_capacity(dataset.len());
    for (i, (p, selected)) in dataset.iter().zip(&selections).enumerate() {
        let correct_flag = crate::answer::grade(selected, &p.correct);
        if correct_flag {
            hits += 1;
        }
        records.push(BaselineRecord { baseline: &args.name, problem: i, selected, correct_flag });
    }
    if let Some(out) = &args.out {
        let mut file = std::fs::File::create(resolve(workdir, out))?;
        for r in &records {
            serde_json::to_writer(&mut file, r)?;
            file.write_all(b"\n")?;
        }
    }
    println!(
        "baseline {}: accuracy {:.4} on {} problems",
        args.name,
        hits as f64 / dataset.len() as f64,
        dataset.len()
    );
    Ok(())
}
