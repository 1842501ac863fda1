//! `labelprompt` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
//! standard error; structured results go to standard output or `--out`.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};
use labelprompt::analysis::{export_mask_hiddens, on_matrix, write_instance_rates};
use labelprompt::checkpoint::{load_checkpoint, save_checkpoint};
use labelprompt::corpus::{
    dataset_stats, kshot_sample, Corpus, Instance, KShotSpec, Split, SyntheticSpec, TACRED_NO_RELATION,
};
use labelprompt::model::LabelPromptModel;
use labelprompt::trainer::{
    evaluate_model, train, TrainConfig, TrainError, PRETRAINED_LR_FEW_SHOT, PRETRAINED_LR_FULL,
};
use labelprompt::vocab::Vocabulary;
use serde_json::json;

#[derive(Parser)]
#[command(name = "labelprompt", version, about = "Label-token prompt learning for relation classification")]
struct Cli {
    /// Log progress (training epochs, warnings) to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated corpus with train/validation/test splits as JSONL.
    GenSynthetic(GenArgs),
    /// Print split sizes and the relation histogram of a corpus.
    Stats(CorpusArgs),
    /// Draw k instances per relation from one split.
    KshotSample(KShotArgs),
    /// Train a model; writes history, metrics and a checkpoint under --out.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Overlap of activated FFN neurons between label slots and [MASK].
    AnalyzeOn(AnalyzeArgs),
    /// Write the final [MASK] hidden vector of every instance as CSV.
    ExportHiddens(ExportArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// JSONL file (records may carry a "split" field) or a directory of
    /// train/validation/test JSONL files.
    #[arg(long)]
    corpus: PathBuf,
    /// Name of the no-relation label.
    #[arg(long, default_value = TACRED_NO_RELATION)]
    no_relation: String,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus, String> {
        Corpus::load(&self.corpus, &self.no_relation).map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct GenArgs {
    /// Relation count including no-relation.
    #[arg(long, default_value_t = 8)]
    relations: usize,
    /// Training instances per relation.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Validation and test instances per relation (default per-class / 4).
    #[arg(long)]
    eval_per_class: Option<usize>,
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KShotArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Instances per relation.
    #[arg(long, allow_negative_numbers = true, value_parser = clap::value_parser!(i64).range(1..))]
    k: i64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    /// Output JSONL file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// JSON object or `key = value` lines with any of the flags below;
    /// explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// k-shot training: instances per relation (full data when absent).
    #[arg(long, allow_negative_numbers = true, value_parser = clap::value_parser!(i64).range(1..))]
    k: Option<i64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs (default 30 with --k, 5 otherwise).
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 16].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate (default 1e-2 with --k, 1e-3 otherwise).
    #[arg(long)]
    lr: Option<f64>,
    /// Use the learning rates tuned for a pretrained encoder (4e-5 with
    /// --k, 4e-6 otherwise) instead of the from-scratch defaults.
    #[arg(long)]
    pretrained_lr: bool,
    /// Entity-loss margin [default: 0.3].
    #[arg(long)]
    gamma: Option<f64>,
    /// Weight of the label-align loss [default: 1].
    #[arg(long)]
    alpha1: Option<f64>,
    /// Weight of the entity loss [default: 0.04].
    #[arg(long)]
    alpha2: Option<f64>,
    /// Label-slot tokens: label, mask or learnable [default: label].
    #[arg(long)]
    token_strategy: Option<String>,
    /// Exclude no-relation true positives from micro-F1 [default: true].
    #[arg(long, action = ArgAction::Set)]
    exclude_no_relation: Option<bool>,
    /// Encoder layers [default: 2].
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    heads: Option<usize>,
    /// Hidden width [default: 64].
    #[arg(long)]
    d_model: Option<usize>,
    /// Output directory for history.jsonl, metrics.json, config.json and checkpoint/.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint directory (model.json + vocab.txt).
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

impl CheckpointArgs {
    fn load(&self) -> Result<(LabelPromptModel<f64>, Vec<Instance>), String> {
        let model = load_checkpoint::<f64>(&self.checkpoint).map_err(|e| e.to_string())?;
        let corpus = self.corpus.load()?;
        let instances = corpus.split(self.split).to_vec();
        if instances.is_empty() {
            return Err(format!("split {} of {} is empty", self.split.name(), self.corpus.corpus.display()));
        }
        Ok((model, instances))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    exclude_no_relation: bool,
    /// Write the report here as well as to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    /// Encoder layer (default: last).
    #[arg(long)]
    layer: Option<usize>,
    /// Relations left out of the matrix, comma separated (default: the no-relation label).
    #[arg(long, value_delimiter = ',')]
    exclude: Option<Vec<String>>,
    /// Matrix CSV; a `.counts.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-instance overlap rows as JSONL.
    #[arg(long)]
    instances_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (expected train, validation or test)"))
}

/// Error classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Runtime(s)
    }
}

/// `None` when the command already streamed its output.
type Outcome = Result<Option<serde_json::Value>, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Stats(a) => stats(a),
        Command::KshotSample(a) => kshot(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::AnalyzeOn(a) => analyze(a),
        Command::ExportHiddens(a) => export(a),
    };
    match result {
        Ok(value) => {
            if let Some(value) = value {
                println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn gen_synthetic(a: GenArgs) -> Outcome {
    let spec = SyntheticSpec { eval_per_class: a.eval_per_class, ..SyntheticSpec::new(a.relations, a.per_class, a.vocab_size, a.seed) };
    let corpus = spec.generate().map_err(|e| Failure::Usage(e.to_string()))?;
    corpus.write_jsonl(&a.out).map_err(|e| e.to_string())?;
    Ok(Some(json!({ "out": a.out, "stats": dataset_stats(&corpus) })))
}

fn stats(a: CorpusArgs) -> Outcome {
    Ok(Some(serde_json::to_value(dataset_stats(&a.load()?)).expect("stats serialise")))
}

fn kshot(a: KShotArgs) -> Outcome {
    let corpus = a.corpus.load()?;
    let spec = KShotSpec::new(a.k, a.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    let sample = kshot_sample(corpus.split(a.split), spec).map_err(|e| e.to_string())?;
    let lines = || sample.iter().map(|i| serde_json::to_string(i).expect("instance serialises"));
    match &a.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).map_err(|e| format!("{}: {e}", path.display()))?);
            for line in lines() {
                writeln!(w, "{line}").map_err(|e| e.to_string())?;
            }
            w.flush().map_err(|e| e.to_string())?;
            Ok(Some(json!({ "out": path, "instances": sample.len() })))
        }
        None => {
            let mut w = std::io::stdout().lock();
            for line in lines() {
                writeln!(w, "{line}").map_err(|e| e.to_string())?;
            }
            Ok(None)
        }
    }
}

/// Config file first, then flags; defaults depend on whether `k` ends up set.
fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut settings = match &a.config {
        Some(path) => config::read_settings(path).map_err(Failure::Usage)?,
        None => Default::default(),
    };
    let mut flag = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            settings.insert(key.to_string(), v);
        }
    };
    flag("k", a.k.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("epochs", a.epochs.map(|v| v.to_string()));
    flag("batch_size", a.batch_size.map(|v| v.to_string()));
    flag("lr", a.lr.map(|v| v.to_string()));
    flag("gamma", a.gamma.map(|v| v.to_string()));
    flag("alpha1", a.alpha1.map(|v| v.to_string()));
    flag("alpha2", a.alpha2.map(|v| v.to_string()));
    flag("token_strategy", a.token_strategy.clone());
    flag("exclude_no_relation", a.exclude_no_relation.map(|v| v.to_string()));
    flag("layers", a.layers.map(|v| v.to_string()));
    flag("heads", a.heads.map(|v| v.to_string()));
    flag("d_model", a.d_model.map(|v| v.to_string()));

    let few_shot = settings.contains_key("k");
    let mut cfg = if few_shot { TrainConfig::few_shot(1) } else { TrainConfig::full_data() };
    for (k, v) in &settings {
        config::apply(&mut cfg, k, v).map_err(Failure::Usage)?;
    }
    if a.pretrained_lr && a.lr.is_none() {
        cfg.learning_rate = if few_shot { PRETRAINED_LR_FEW_SHOT } else { PRETRAINED_LR_FULL };
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run_train(a: TrainArgs) -> Outcome {
    let cfg = train_config(&a)?;
    let corpus = a.corpus.load()?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        write_json(&dir.join("config.json"), &serde_json::to_value(cfg).expect("config serialises"))?;
    }
    let out = match train::<f64>(&corpus, &cfg) {
        Ok(out) => out,
        Err(TrainError::NonFinite { epoch, step, component, last_good }) => {
            let mut msg = format!("non-finite {component} at epoch {epoch}, step {step}");
            if let Some(dir) = &a.out {
                let path = dir.join("last_good");
                let mut model = LabelPromptModel::<f64>::new(Vocabulary::build(&corpus), cfg.model_config(), cfg.seed)
                    .map_err(|e| e.to_string())?;
                model.store = *last_good;
                save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
                msg.push_str(&format!("; parameters before the failing step saved to {}", path.display()));
            }
            return Err(Failure::Runtime(msg));
        }
        Err(TrainError::Config(msg)) => return Err(Failure::Usage(msg)),
        Err(e) => return Err(Failure::Runtime(e.to_string())),
    };
    let metrics = json!({
        "train_size": out.train_size,
        "best_epoch": out.best_epoch,
        "validation": out.validation,
        "test": out.test,
    });
    if let Some(dir) = &a.out {
        let path = dir.join("history.jsonl");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?);
        for r in &out.history {
            writeln!(w, "{}", serde_json::to_string(r).expect("record serialises")).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        save_checkpoint(&out.model, &dir.join("checkpoint")).map_err(|e| e.to_string())?;
    }
    Ok(Some(metrics))
}

fn eval(a: EvalArgs) -> Outcome {
    let (model, instances) = a.source.load()?;
    let report = evaluate_model(&model, &instances, a.exclude_no_relation).map_err(|e| e.to_string())?;
    let value = serde_json::to_value(&report).expect("report serialises");
    if let Some(path) = &a.out {
        write_json(path, &value)?;
    }
    Ok(Some(value))
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    let (model, instances) = a.source.load()?;
    let relations = model.vocab.relations();
    let exclude: Vec<usize> = match &a.exclude {
        None => vec![0],
        Some(names) => names
            .iter()
            .filter(|n| !n.is_empty())
            .map(|n| model.vocab.relation_index(n).ok_or_else(|| Failure::Usage(format!("unknown relation {n:?}"))))
            .collect::<Result<_, _>>()?,
    };
    let (matrix, rates) = on_matrix(&model, &instances, &exclude, a.layer).map_err(|e| e.to_string())?;
    let sidecar = matrix.write(&a.out).map_err(|e| e.to_string())?;
    if let Some(path) = &a.instances_out {
        write_instance_rates(&rates, path).map_err(|e| e.to_string())?;
    }
    Ok(Some(json!({
        "matrix": a.out,
        "counts": sidecar,
        "relations": matrix.relations,
        "excluded": exclude.iter().map(|&i| relations[i].text.clone()).collect::<Vec<_>>(),
        "diagonal_dominance": matrix.diagonal_dominance(),
    })))
}

fn export(a: ExportArgs) -> Outcome {
    let (model, instances) = a.source.load()?;
    export_mask_hiddens(&model, &instances, &a.out).map_err(|e| e.to_string())?;
    Ok(Some(json!({ "out": a.out, "rows": instances.len(), "dim": model.config.encoder.d_model })))
}
