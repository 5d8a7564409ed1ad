//! `prunecoder`: prune, fine-tune, evaluate and compare BERT-style encoders.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunecoder::checkpoint::{self, CheckpointError};
use prunecoder::data::{encode_dataset, load_dataset_auto, load_splits, EncodedDataset, LabeledDataset, Split};
use prunecoder::gradcheck::{model_grad_check, random_batch};
use prunecoder::model::{init_for_gradcheck, init_scratch, param_count};
use prunecoder::protocol::{run_protocol, threads_from_env, write_protocol_outputs, DatasetSplits, ProtocolPlan, ScratchBaseline};
use prunecoder::pruning::{original_indices, prune_checkpoint, size_report};
use prunecoder::report::{comparison_report, read_reports_dir, split_report, TableFormat};
use prunecoder::synthetic::MarkerTask;
use prunecoder::tokenizer::Vocab;
use prunecoder::train::{append_experiment_log, config_hash, evaluate, finetune, ExperimentLogEntry};
use prunecoder::{rng, Checkpoint32, Error, ModelConfig, PruneSpec, Strategy, TrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "prunecoder", version, about = "Layer pruning toolkit for BERT-style encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Remove k encoder layers from a checkpoint.
    Prune(PruneArgs),
    /// Fine-tune a checkpoint on a labeled dataset, keeping the best validation epoch.
    Finetune(FinetuneArgs),
    /// Report accuracy of a checkpoint on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Render comparison tables from a protocol run directory.
    Report(ReportArgs),
    /// Print a checkpoint's config, parameter breakdown and pruning provenance.
    Inspect(InspectArgs),
    /// Check analytic gradients of the full model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Prune, fine-tune and evaluate every strategy on every dataset.
    Protocol(ProtocolArgs),
    /// Write a seeded synthetic marker-task dataset and its vocabulary.
    Synth(SynthArgs),
    /// Write a randomly initialized checkpoint.
    Init(InitArgs),
}

#[derive(Args)]
struct PruneArgs {
    /// Source checkpoint.
    #[arg(long = "in")]
    input: PathBuf,
    /// Which layers to remove.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Strategy,
    /// Number of layers to remove, 1 <= k <= L-1.
    #[arg(long)]
    k: usize,
    /// Destination checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Source name stored in the provenance record [default: input file stem].
    #[arg(long)]
    source: Option<String>,
    /// Unix timestamp stored in the provenance record.
    #[arg(long, default_value_t = 0)]
    timestamp: u64,
}

#[derive(Args)]
struct TextArgs {
    /// Vocabulary file, one token per line [default: vocab.txt next to the checkpoint].
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Text column (CSV) or field (JSONL).
    #[arg(long, default_value = "text")]
    text_field: String,
    /// Label column (CSV) or field (JSONL).
    #[arg(long, default_value = "label")]
    label_field: String,
    /// Sequence length including [CLS] and [SEP] [default: the model's max_positions].
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for shuffling, dropout and the classifier head [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `epochs` from the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `learning_rate` from the config.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides `batch_size` from the config.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Starting checkpoint.
    #[arg(long = "in")]
    input: PathBuf,
    /// Training split (.csv or .jsonl).
    #[arg(long)]
    train: PathBuf,
    /// Validation split (.csv or .jsonl).
    #[arg(long)]
    val: PathBuf,
    /// Destination checkpoint; label names go to `<out>.labels`.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history; markdown for `.md`, TSV otherwise.
    #[arg(long)]
    history: PathBuf,
    /// Keep the existing classifier head when its class count matches.
    #[arg(long)]
    keep_head: bool,
    #[command(flatten)]
    text: TextArgs,
    #[command(flatten)]
    train_args: TrainArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint to evaluate; label names are read from `<in>.labels` if present.
    #[arg(long = "in")]
    input: PathBuf,
    /// Labeled dataset (.csv or .jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Evaluation batch size.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[command(flatten)]
    text: TextArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `*.jsonl` result rows.
    #[arg(long)]
    runs: PathBuf,
    /// Output format.
    #[arg(long, value_parser = parse_format, default_value = "markdown")]
    format: TableFormat,
    /// Show validation and test accuracy for one dataset instead of the cross-dataset table.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to describe.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model config JSON [default: a 2-layer, 8-wide model].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds; each draws fresh weights and a fresh batch.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 2e-3)]
    h: f64,
    /// Batch size.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 4)]
    seq: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct ProtocolArgs {
    /// Unpruned source checkpoint.
    #[arg(long = "in")]
    input: PathBuf,
    /// Datasets as NAME=DIR; each DIR holds train, validation (or val/dev) and test files.
    #[arg(long, value_delimiter = ',', required = true)]
    datasets: Vec<String>,
    /// Prune specs such as top6,middle6,bottom10.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_spec)]
    specs: Vec<PruneSpec>,
    /// Depths of scratch-initialized baselines, e.g. 6,2.
    #[arg(long, value_delimiter = ',')]
    scratch: Vec<usize>,
    /// Skip fine-tuning the unpruned model.
    #[arg(long)]
    no_baseline: bool,
    /// Output directory for checkpoints, histories, reports and tables.
    #[arg(long)]
    out: PathBuf,
    /// Model name in tables [default: input file stem].
    #[arg(long)]
    model_name: Option<String>,
    #[command(flatten)]
    text: TextArgs,
    #[command(flatten)]
    train_args: TrainArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives train.csv, validation.csv, test.csv and vocab.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct InitArgs {
    /// Destination checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Model config JSON; overrides the shape flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary file; sets vocab_size.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    intermediate: usize,
    #[arg(long, default_value_t = 16)]
    max_positions: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_spec(s: &str) -> Result<PruneSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<TableFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Core(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numeric(_) => 3,
            Failure::Core(e) => match e {
                Error::PruneSpec(_) | Error::Config(_) | Error::TrainConfig(_) => 1,
                Error::NonFinite(_) | Error::Shape(_) => 3,
                Error::Data(_) | Error::Input(_) | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 2,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn log_config(command: &str, value: serde_json::Value) {
    eprintln!("{}", json!({ "command": command, "config": value }));
}

fn load(path: &Path) -> Result<Checkpoint32, Failure> {
    checkpoint::load(path).map_err(|e| Failure::Core(Error::Data(format!("{}: {e}", path.display()))))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn resolve_vocab(text: &TextArgs, checkpoint: &Path) -> PathBuf {
    text.vocab
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("vocab.txt"))
}

fn load_vocab(path: &Path, config: &ModelConfig) -> Result<Vocab, Failure> {
    let vocab = Vocab::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if vocab.len() != config.vocab_size {
        return Err(Error::Data(format!(
            "{}: {} tokens but the model has vocab_size {}",
            path.display(),
            vocab.len(),
            config.vocab_size
        ))
        .into());
    }
    Ok(vocab)
}

fn resolve_train(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut tc = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::TrainConfig(format!("{}: {e}", p.display())))?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = args.lr {
        tc.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        tc.batch_size = b;
    }
    tc.validate()?;
    Ok(tc)
}

fn read_model_config(path: &Path) -> Result<ModelConfig, Failure> {
    let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn max_len(text: &TextArgs, config: &ModelConfig) -> Result<usize, Failure> {
    let n = text.max_len.unwrap_or(config.max_positions);
    if n < 2 || n > config.max_positions {
        return Err(Failure::Usage(format!(
            "--max-len must lie in 2..={} for this model",
            config.max_positions
        )));
    }
    Ok(n)
}

fn read_labels(path: &Path) -> Result<Option<Vec<String>>, Failure> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s.lines().map(str::to_string).collect())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::Io(e).into()),
    }
}

fn cmd_prune(a: PruneArgs) -> Outcome {
    let spec = PruneSpec::new(a.strategy, a.k);
    let source = a.source.clone().unwrap_or_else(|| file_stem(&a.input));
    log_config(
        "prune",
        json!({ "in": a.input, "spec": spec, "out": a.out, "source": source, "timestamp": a.timestamp }),
    );
    let ck = load(&a.input)?;
    let (weights, config, record) = prune_checkpoint(&ck.weights, &ck.config, spec, &source, a.timestamp)?;
    let mut records = ck.records;
    records.push(record);
    checkpoint::save(&weights, &config, &records, &a.out)?;
    let r = size_report(&ck.config, &config)?;
    println!("pruned {spec}: {} -> {} layers", r.layers_before, r.layers_after);
    println!("retained layers: {:?}", records.last().map(|r| &r.retained).unwrap_or(&Vec::new()));
    println!(
        "params: {} -> {} (encoder -{:.2}%, total -{:.2}%)",
        r.params_before, r.params_after, r.encoder_param_reduction_pct, r.total_param_reduction_pct
    );
    Ok(())
}

fn load_labeled(path: &Path, text: &TextArgs, split: Split) -> Result<LabeledDataset, Failure> {
    Ok(load_dataset_auto(path, &text.text_field, &text.label_field, split)?)
}

fn cmd_finetune(a: FinetuneArgs) -> Outcome {
    let tc = resolve_train(&a.train_args)?;
    let ck = load(&a.input)?;
    let vocab_path = resolve_vocab(&a.text, &a.input);
    let len = max_len(&a.text, &ck.config)?;
    log_config(
        "finetune",
        json!({
            "in": a.input, "train": a.train, "val": a.val, "out": a.out, "history": a.history,
            "vocab": vocab_path, "max_len": len, "keep_head": a.keep_head, "train_config": tc,
        }),
    );
    let vocab = load_vocab(&vocab_path, &ck.config)?;
    let train = load_labeled(&a.train, &a.text, Split::Train)?;
    let val = load_labeled(&a.val, &a.text, Split::Validation)?.relabel(&train.label_names)?;

    let mut config = ck.config.clone();
    let mut weights = ck.weights;
    let classes = train.label_names.len();
    if !(a.keep_head && classes == config.num_classes) {
        config.num_classes = classes;
        weights.reset_classifier(classes, rng::derive_seed(tc.seed, &[rng::tag("head")]));
    }
    let (best, history) = finetune(
        &weights,
        &config,
        &encode_dataset(&train, &vocab, len)?,
        &encode_dataset(&val, &vocab, len)?,
        &tc,
    )?;
    checkpoint::save(&best, &config, &ck.records, &a.out)?;
    fs::write(sidecar(&a.out, ".labels"), train.label_names.join("\n") + "\n")?;
    let is_md = a.history.extension().is_some_and(|e| e == "md");
    fs::write(&a.history, if is_md { history.to_markdown() } else { history.to_tsv() })?;

    let entry = ExperimentLogEntry {
        config_hash: config_hash(&json!({ "model": config, "train": tc }))?,
        seed: tc.seed,
        metrics: json!({
            "checkpoint": a.out,
            "best_epoch": history.best_epoch,
            "validation_accuracy": history.best_validation_accuracy,
        }),
    };
    let log_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    append_experiment_log(log_dir.join("experiments.jsonl"), &entry)?;
    match history.best_epoch {
        Some(e) => println!(
            "best epoch {e}: validation accuracy {:.4}",
            history.best_validation_accuracy
        ),
        None => println!("no epochs run; weights unchanged"),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Outcome {
    let ck = load(&a.input)?;
    let vocab_path = resolve_vocab(&a.text, &a.input);
    let len = max_len(&a.text, &ck.config)?;
    log_config(
        "evaluate",
        json!({ "in": a.input, "data": a.data, "vocab": vocab_path, "max_len": len, "batch_size": a.batch_size }),
    );
    if a.batch_size == 0 {
        return Err(Failure::Usage("--batch-size must be positive".into()));
    }
    let vocab = load_vocab(&vocab_path, &ck.config)?;
    let mut data = load_labeled(&a.data, &a.text, Split::Test)?;
    if let Some(names) = read_labels(&sidecar(&a.input, ".labels"))? {
        data = data.relabel(&names)?;
    }
    if data.label_names.len() != ck.config.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} labels, model has {} classes",
            data.label_names.len(),
            ck.config.num_classes
        ))
        .into());
    }
    let encoded: EncodedDataset = encode_dataset(&data, &vocab, len)?;
    let acc = evaluate(&ck.weights, &ck.config, &encoded, a.batch_size)?;
    let correct = (acc * encoded.len() as f64).round() as usize;
    println!("accuracy {acc:.4} ({correct}/{})", encoded.len());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Outcome {
    log_config("report", json!({ "runs": a.runs, "format": format!("{:?}", a.format), "dataset": a.dataset }));
    let rows = read_reports_dir(&a.runs)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no result rows", a.runs.display())).into());
    }
    let table = match &a.dataset {
        Some(d) => {
            if !rows.iter().any(|r| &r.dataset == d) {
                return Err(Error::Data(format!("no rows for dataset {d:?}")).into());
            }
            split_report(&rows, d, a.format)
        }
        None => comparison_report(&rows, a.format),
    };
    print!("{table}");
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Outcome {
    log_config("inspect", json!({ "in": a.input }));
    let ck = load(&a.input)?;
    let pc = param_count(&ck.config);
    println!("config: {}", serde_json::to_string(&ck.config).map_err(Error::from)?);
    println!("layers: {}", ck.config.num_layers);
    println!(
        "params: embeddings {}, encoder {} ({} per layer), pooler {}, classifier {}, total {}",
        pc.embeddings, pc.encoder_total, pc.per_layer, pc.pooler, pc.classifier, pc.total
    );
    if ck.records.is_empty() {
        println!("provenance: none (unpruned)");
    } else {
        println!("provenance:");
        for (i, r) in ck.records.iter().enumerate() {
            println!(
                "  {}. {} on {:?} ({} layers, timestamp {}): retained {:?}",
                i + 1,
                r.spec,
                r.source,
                r.source_layers,
                r.timestamp,
                r.retained
            );
        }
        match original_indices(&ck.records) {
            Some(idx) => println!("original layers retained: {idx:?}"),
            None => println!("original layers retained: unknown (records do not chain)"),
        }
    }
    let violations = checkpoint::validate(&ck.weights, &ck.config);
    if violations.is_empty() {
        println!("validation: ok");
    } else {
        for v in &violations {
            println!("violation: {}", v.message);
        }
        return Err(Error::Data(format!("{} validation violation(s)", violations.len())).into());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    let cfg = match &a.config {
        Some(p) => read_model_config(p)?,
        None => ModelConfig::tiny(),
    };
    log_config(
        "gradcheck",
        json!({ "model": cfg, "seeds": a.seeds, "h": a.h, "batch": a.batch, "seq": a.seq, "tol": a.tol }),
    );
    if a.batch == 0 || a.seq == 0 || a.seq > cfg.max_positions || !(a.h > 0.0) {
        return Err(Failure::Usage(format!(
            "need --batch >= 1, 1 <= --seq <= {} and --h > 0",
            cfg.max_positions
        )));
    }
    let mut worst = 0.0f64;
    for seed in 0..a.seeds {
        let w = init_for_gradcheck::<f64>(&cfg, seed)?;
        let r = model_grad_check(&w, &cfg, &random_batch(&cfg, a.batch, a.seq, seed), a.h)?;
        let status = if r.max_rel_err < a.tol { "ok" } else { "FAIL" };
        println!(
            "seed {seed}: max rel err {:.3e} over {} coordinates (tensor {}, index {}) {status}",
            r.max_rel_err, r.coordinates, r.worst.0, r.worst.1
        );
        worst = worst.max(r.max_rel_err);
    }
    if worst >= a.tol {
        return Err(Failure::Numeric(format!("max rel err {worst:.3e} >= tolerance {:.1e}", a.tol)));
    }
    println!("all seeds within {:.1e}", a.tol);
    Ok(())
}

fn parse_dataset_arg(s: &str) -> Result<(String, PathBuf), Failure> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        _ => Err(Failure::Usage(format!("--datasets entry {s:?} is not NAME=DIR"))),
    }
}

fn cmd_protocol(a: ProtocolArgs) -> Outcome {
    let tc = resolve_train(&a.train_args)?;
    let datasets = a
        .datasets
        .iter()
        .map(|s| parse_dataset_arg(s))
        .collect::<Result<Vec<_>, _>>()?;
    let model_name = a.model_name.clone().unwrap_or_else(|| file_stem(&a.input));
    let base = load(&a.input)?;
    let vocab_path = resolve_vocab(&a.text, &a.input);
    let len = max_len(&a.text, &base.config)?;
    let threads = threads_from_env();
    log_config(
        "protocol",
        json!({
            "in": a.input, "datasets": a.datasets, "specs": a.specs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "scratch": a.scratch, "baseline": !a.no_baseline, "out": a.out, "model_name": model_name,
            "vocab": vocab_path, "max_len": len, "threads": threads, "train_config": tc,
        }),
    );
    for spec in &a.specs {
        spec.check(base.config.num_layers)?;
    }
    let vocab = load_vocab(&vocab_path, &base.config)?;
    let mut splits = Vec::new();
    for (name, dir) in datasets {
        let s = load_splits(&dir, &a.text.text_field, &a.text.label_field)?;
        splits.push(DatasetSplits {
            name,
            train: encode_dataset(&s.train, &vocab, len)?,
            validation: encode_dataset(&s.validation, &vocab, len)?,
            test: encode_dataset(&s.test, &vocab, len)?,
        });
    }
    let mut plan = ProtocolPlan::new(model_name, a.specs.clone());
    plan.include_baseline = !a.no_baseline;
    for &layers in &a.scratch {
        if layers == 0 {
            return Err(Failure::Usage("--scratch depths must be positive".into()));
        }
        plan.scratch.push(ScratchBaseline {
            name: format!("Scratch-{layers}L"),
            layers,
        });
    }
    let runs = run_protocol(&base, &plan, &splits, &tc, threads)?;
    write_protocol_outputs(&runs, &tc, &a.out)?;
    let reports: Vec<_> = runs.into_iter().map(|r| r.report).collect();
    print!("{}", comparison_report(&reports, TableFormat::Markdown));
    Ok(())
}

fn write_csv(path: &Path, data: &LabeledDataset) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rows = std::iter::once(["text", "label"].map(String::from))
        .chain(data.examples.iter().map(|ex| [ex.text.clone(), data.label_names[ex.label].clone()]));
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Outcome {
    log_config(
        "synth",
        json!({ "out": a.out, "train": a.train, "val": a.val, "test": a.test, "seed": a.seed }),
    );
    if a.train == 0 || a.val == 0 || a.test == 0 {
        return Err(Failure::Usage("split sizes must be positive".into()));
    }
    let task = MarkerTask::default();
    fs::create_dir_all(&a.out)?;
    task.vocab()?.save(a.out.join("vocab.txt"))?;
    for (file, n, split) in [
        ("train.csv", a.train, Split::Train),
        ("validation.csv", a.val, Split::Validation),
        ("test.csv", a.test, Split::Test),
    ] {
        write_csv(&a.out.join(file), &task.generate(n, a.seed, split))?;
    }
    println!("wrote {} examples to {}", a.train + a.val + a.test, a.out.display());
    Ok(())
}

fn cmd_init(a: InitArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => read_model_config(p)?,
        None => ModelConfig {
            num_layers: a.layers,
            hidden_size: a.hidden,
            num_heads: a.heads,
            intermediate_size: a.intermediate,
            max_positions: a.max_positions,
            num_classes: a.classes,
            ..ModelConfig::tiny()
        },
    };
    if let Some(p) = &a.vocab {
        cfg.vocab_size = Vocab::load(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?.len();
    }
    cfg.validate()?;
    log_config("init", json!({ "out": a.out, "model": cfg, "seed": a.seed }));
    let w = init_scratch::<f32>(&cfg, a.seed)?;
    checkpoint::save(&w, &cfg, &[], &a.out)?;
    println!("wrote {}-layer checkpoint ({} params) to {}", cfg.num_layers, param_count(&cfg).total, a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Prune(a) => cmd_prune(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Protocol(a) => cmd_protocol(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Init(a) => cmd_init(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
