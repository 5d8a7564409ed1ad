use std::fs;

use prunecoder::checkpoint::{self, Checkpoint};
use prunecoder::data::{encode_dataset, Split};
use prunecoder::model::init_scratch;
use prunecoder::protocol::{run_protocol, write_protocol_outputs, DatasetSplits, ProtocolPlan, ScratchBaseline};
use prunecoder::report::{read_reports_dir, NO_PRUNING};
use prunecoder::synthetic::MarkerTask;
use prunecoder::{ModelConfig, PruneSpec, Strategy, TrainConfig};

fn base(layers: usize) -> Checkpoint<f32> {
    let vocab = MarkerTask::default().vocab().unwrap();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::tiny().with_layers(layers)
    };
    Checkpoint {
        weights: init_scratch(&config, 1).unwrap(),
        config,
        records: Vec::new(),
    }
}

fn splits(name: &str, seed: u64) -> DatasetSplits {
    let task = MarkerTask::default();
    let vocab = task.vocab().unwrap();
    let enc = |n, split| encode_dataset(&task.generate(n, seed, split), &vocab, 12).unwrap();
    DatasetSplits {
        name: name.into(),
        train: enc(40, Split::Train),
        validation: enc(16, Split::Validation),
        test: enc(16, Split::Test),
    }
}

fn tconfig() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::desk()
    }
}

#[test]
fn one_report_per_variant_and_dataset() {
    let specs: Vec<PruneSpec> = Strategy::ALL.iter().map(|&s| PruneSpec::new(s, 6)).collect();
    let plan = ProtocolPlan::new("tiny", specs);
    let runs = run_protocol(&base(12), &plan, &[splits("a", 1)], &tconfig(), 1).unwrap();
    assert_eq!(runs.len(), 4);
    let labels: Vec<&str> = runs.iter().map(|r| r.report.strategy.as_str()).collect();
    assert_eq!(labels, ["Top 6", "Middle 6", "Bottom 6", NO_PRUNING]);
    let params: Vec<usize> = runs[..3].iter().map(|r| r.report.total_params).collect();
    assert!(params.iter().all(|&p| p == params[0]));
    assert!(runs[3].report.total_params > params[0]);
    assert_eq!(runs[1].records.last().unwrap().retained, [0, 1, 2, 9, 10, 11]);
    for r in &runs {
        r.report.check().unwrap();
        assert_eq!(r.history.epochs.len(), 1);
    }
}

#[test]
fn scratch_rows_and_multiple_datasets() {
    let mut plan = ProtocolPlan::new("tiny", vec![PruneSpec::new(Strategy::Bottom, 2)]);
    plan.include_baseline = false;
    plan.scratch.push(ScratchBaseline {
        name: "scratch-2".into(),
        layers: 2,
    });
    let runs = run_protocol(&base(4), &plan, &[splits("a", 1), splits("b", 2)], &tconfig(), 1).unwrap();
    let rows: Vec<(String, String, usize)> = runs
        .iter()
        .map(|r| (r.report.model.clone(), r.report.dataset.clone(), r.report.layers))
        .collect();
    assert_eq!(
        rows,
        [
            ("tiny".into(), "a".into(), 2),
            ("scratch-2".into(), "a".into(), 2),
            ("tiny".into(), "b".into(), 2),
            ("scratch-2".into(), "b".into(), 2),
        ]
    );
    assert!(runs[1].records.is_empty());
    assert_eq!(runs[0].report.total_params, runs[1].report.total_params);
}

#[test]
fn invalid_spec_fails_before_training() {
    let plan = ProtocolPlan::new("tiny", vec![PruneSpec::new(Strategy::Top, 4)]);
    assert!(run_protocol(&base(4), &plan, &[splits("a", 1)], &tconfig(), 1).is_err());
}

#[test]
fn thread_count_does_not_change_results() {
    let specs = vec![PruneSpec::new(Strategy::Top, 1), PruneSpec::new(Strategy::Middle, 2)];
    let plan = ProtocolPlan::new("tiny", specs);
    let ds = [splits("a", 3)];
    let one = run_protocol(&base(4), &plan, &ds, &tconfig(), 1).unwrap();
    let three = run_protocol(&base(4), &plan, &ds, &tconfig(), 3).unwrap();
    for (a, b) in one.iter().zip(&three) {
        assert_eq!(a.report, b.report);
        assert!(a.weights.bit_eq(&b.weights));
    }
}

#[test]
fn outputs_round_trip_through_the_run_directory() {
    let plan = ProtocolPlan::new("tiny", vec![PruneSpec::new(Strategy::Middle, 2)]);
    let runs = run_protocol(&base(4), &plan, &[splits("a", 1)], &tconfig(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_protocol_outputs(&runs, &tconfig(), dir.path()).unwrap();
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "00-tiny-middle-2-a.history.tsv",
            "00-tiny-middle-2-a.prnc",
            "01-tiny-full-a.history.tsv",
            "01-tiny-full-a.prnc",
            "experiments.jsonl",
            "reports.jsonl",
            "table.md",
            "table.tsv",
        ]
    );
    let reports = read_reports_dir(dir.path()).unwrap();
    assert_eq!(reports, runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>());
    let ck = checkpoint::load::<f32>(dir.path().join("00-tiny-middle-2-a.prnc")).unwrap();
    assert_eq!(ck.records, runs[0].records);
    assert_eq!(fs::read_to_string(dir.path().join("experiments.jsonl")).unwrap().lines().count(), 2);
}
