//! The pruning comparison protocol: every prune spec (plus the unpruned model
//! and optional scratch-initialized baselines) is fine-tuned and evaluated on
//! every dataset under one shared training configuration.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::model::{init_scratch, param_count, ModelConfig, ModelWeights};
use crate::pruning::{prune_checkpoint, PruneRecord, PruneSpec};
use crate::report::{comparison_report, write_reports_jsonl, EvalReport, TableFormat, NO_PRUNING};
use crate::rng;
use crate::scalar::Scalar;
use crate::train::{append_experiment_log, config_hash, evaluate, finetune, ExperimentLogEntry, TrainConfig, TrainHistory};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "PRUNECODER_THREADS";

/// Worker count from [`THREADS_ENV`], default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub name: String,
    pub train: EncodedDataset,
    pub validation: EncodedDataset,
    pub test: EncodedDataset,
}

/// A randomly initialized model trained only on the downstream task.
#[derive(Clone, Debug, PartialEq)]
pub struct ScratchBaseline {
    pub name: String,
    pub layers: usize,
}

#[derive(Clone, Debug)]
pub struct ProtocolPlan {
    pub model_name: String,
    pub specs: Vec<PruneSpec>,
    /// Also fine-tune the unpruned model.
    pub include_baseline: bool,
    pub scratch: Vec<ScratchBaseline>,
}

impl ProtocolPlan {
    pub fn new(model_name: impl Into<String>, specs: Vec<PruneSpec>) -> Self {
        Self {
            model_name: model_name.into(),
            specs,
            include_baseline: true,
            scratch: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Variant {
    Pruned(PruneSpec),
    Unpruned,
    Scratch(ScratchBaseline),
}

/// One fine-tuned model with its evaluation.
#[derive(Clone, Debug)]
pub struct ProtocolRun<T> {
    pub report: EvalReport,
    pub weights: ModelWeights<T>,
    pub config: ModelConfig,
    pub records: Vec<PruneRecord>,
    pub history: TrainHistory,
}

fn head_seed(seed: u64, dataset: &str) -> u64 {
    rng::derive_seed(seed, &[rng::tag("head"), rng::tag(dataset)])
}

fn run_one<T: Scalar>(
    base: &Checkpoint<T>,
    plan: &ProtocolPlan,
    variant: &Variant,
    ds: &DatasetSplits,
    tconfig: &TrainConfig,
) -> Result<ProtocolRun<T>> {
    let (model, strategy, mut weights, mut config, records, prune) = match variant {
        Variant::Pruned(spec) => {
            let (w, c, rec) = prune_checkpoint(&base.weights, &base.config, *spec, &plan.model_name, 0)?;
            let mut records = base.records.clone();
            records.push(rec.clone());
            (plan.model_name.clone(), spec.label(), w, c, records, Some(rec))
        }
        Variant::Unpruned => (
            plan.model_name.clone(),
            NO_PRUNING.to_string(),
            base.weights.clone(),
            base.config.clone(),
            base.records.clone(),
            None,
        ),
        Variant::Scratch(s) => {
            let config = base.config.clone().with_layers(s.layers);
            let seed = rng::derive_seed(tconfig.seed, &[rng::tag("scratch"), s.layers as u64]);
            let w = init_scratch(&config, seed)?;
            (s.name.clone(), NO_PRUNING.to_string(), w, config, Vec::new(), None)
        }
    };
    config.num_classes = ds.train.num_labels;
    weights.reset_classifier(config.num_classes, head_seed(tconfig.seed, &ds.name));

    let (best, history) = finetune(&weights, &config, &ds.train, &ds.validation, tconfig)?;
    let val = evaluate(&best, &config, &ds.validation, tconfig.eval_batch_size)?;
    let test = evaluate(&best, &config, &ds.test, tconfig.eval_batch_size)?;
    let report = EvalReport {
        model,
        strategy,
        dataset: ds.name.clone(),
        validation_accuracy: 100.0 * val,
        test_accuracy: 100.0 * test,
        layers: config.num_layers,
        total_params: param_count(&config).total,
        seed: tconfig.seed,
        prune,
    };
    Ok(ProtocolRun {
        report,
        weights: best,
        config,
        records,
        history,
    })
}

/// Runs every (variant × dataset) combination. Rows are independent, so they
/// are spread over `threads` workers; the output order (and every value)
/// is the same for any thread count.
pub fn run_protocol<T: Scalar>(
    base: &Checkpoint<T>,
    plan: &ProtocolPlan,
    datasets: &[DatasetSplits],
    tconfig: &TrainConfig,
    threads: usize,
) -> Result<Vec<ProtocolRun<T>>> {
    tconfig.validate()?;
    for spec in &plan.specs {
        spec.check(base.config.num_layers)?;
    }
    let mut variants: Vec<Variant> = plan.specs.iter().copied().map(Variant::Pruned).collect();
    if plan.include_baseline {
        variants.push(Variant::Unpruned);
    }
    variants.extend(plan.scratch.iter().cloned().map(Variant::Scratch));

    let jobs: Vec<(&Variant, &DatasetSplits)> = datasets
        .iter()
        .flat_map(|d| variants.iter().map(move |v| (v, d)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(v, d)| run_one(base, plan, v, d, tconfig))
            .collect()
    })
}

fn slug(s: &str) -> String {
    let mut out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while out.contains("--") {
        out = out.replace("--", "-");
    }
    out.trim_matches('-').to_string()
}

/// File stem used for a run's checkpoint and history.
pub fn run_stem(index: usize, report: &EvalReport) -> String {
    let strategy = if report.strategy == NO_PRUNING { "full" } else { &report.strategy };
    format!("{index:02}-{}-{}-{}", slug(&report.model), slug(strategy), slug(&report.dataset))
}

#[derive(Serialize)]
struct LoggedConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

/// Writes `reports.jsonl`, `table.tsv`, `table.md`, per-run checkpoints and
/// histories under `out_dir`, and appends to `experiments.jsonl`.
pub fn write_protocol_outputs<T: Scalar>(runs: &[ProtocolRun<T>], tconfig: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    write_reports_jsonl(out.join("reports.jsonl"), &reports)?;
    fs::write(out.join("table.tsv"), comparison_report(&reports, TableFormat::Tsv))?;
    fs::write(out.join("table.md"), comparison_report(&reports, TableFormat::Markdown))?;
    for (i, run) in runs.iter().enumerate() {
        let stem = run_stem(i, &run.report);
        checkpoint::save(&run.weights, &run.config, &run.records, out.join(format!("{stem}.prnc")))?;
        fs::write(out.join(format!("{stem}.history.tsv")), run.history.to_tsv())?;
        let entry = ExperimentLogEntry {
            config_hash: config_hash(&LoggedConfig {
                model: &run.config,
                train: tconfig,
            })?,
            seed: tconfig.seed,
            metrics: serde_json::to_value(&run.report)?,
        };
        append_experiment_log(out.join("experiments.jsonl"), &entry)?;
    }
    Ok(())
}
