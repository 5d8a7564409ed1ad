mod common;

use common::{edit_header, split};
use prunecoder::checkpoint::{self, CheckpointError, ViolationKind, ALIGN};
use prunecoder::model::init_scratch;
use prunecoder::pruning::prune_checkpoint;
use prunecoder::{rng, ModelConfig, PruneSpec, Strategy};
use rand::Rng;

fn tiny_bytes() -> Vec<u8> {
    let cfg = ModelConfig::tiny();
    let w = init_scratch::<f32>(&cfg, 1).unwrap();
    checkpoint::to_bytes(&w, &cfg, &[]).unwrap()
}

fn edit(f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    edit_header(&tiny_bytes(), f)
}

fn random_config(r: &mut impl Rng) -> ModelConfig {
    let heads = r.random_range(1..=3);
    ModelConfig {
        num_layers: r.random_range(1..=6),
        hidden_size: heads * r.random_range(1..=6),
        num_heads: heads,
        intermediate_size: r.random_range(1..=24),
        vocab_size: r.random_range(4..=40),
        max_positions: r.random_range(1..=20),
        num_classes: r.random_range(2..=5),
        ..ModelConfig::tiny()
    }
}

#[test]
fn round_trip_random_checkpoints_with_records() {
    let mut r = rng::stream(7, &[rng::tag("checkpoint-tests")]);
    for i in 0..10u64 {
        let cfg = random_config(&mut r).with_layers(r.random_range(2..=6));
        let w = init_scratch::<f32>(&cfg, i).unwrap();
        let s = [Strategy::Top, Strategy::Middle, Strategy::Bottom][i as usize % 3];
        let (pw, pcfg, rec) = prune_checkpoint(&w, &cfg, PruneSpec::new(s, 1), "source-model", 1_700_000_000 + i).unwrap();
        let bytes = checkpoint::to_bytes(&pw, &pcfg, &[rec.clone()]).unwrap();
        let back = checkpoint::from_bytes::<f32>(&bytes).unwrap();
        assert!(back.weights.bit_eq(&pw));
        assert_eq!(back.config, pcfg);
        assert_eq!(back.records, [rec.clone()]);
        assert_eq!(checkpoint::to_bytes(&back.weights, &back.config, &back.records).unwrap(), bytes);
    }
}

#[test]
fn save_load_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.prnc");
    let cfg = ModelConfig::tiny();
    let w = init_scratch::<f32>(&cfg, 2).unwrap();
    checkpoint::save(&w, &cfg, &[], &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    checkpoint::save(&w, &cfg, &[], &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    let back = checkpoint::load::<f64>(&path).unwrap();
    assert!(back.weights.cast::<f32>().bit_eq(&w));
}

#[test]
fn header_keys_are_sorted_and_payload_aligned() {
    let bytes = tiny_bytes();
    let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    assert_eq!((14 + len) % ALIGN, 0);
    let text = std::str::from_utf8(&bytes[14..14 + len]).unwrap().trim_end();
    let (h, _) = split(&bytes);
    assert_eq!(serde_json::to_string(&h).unwrap(), text);
    for entry in h["tensors"].as_object().unwrap().values() {
        assert_eq!(entry["byte_offset"].as_u64().unwrap() % ALIGN as u64, 0);
    }
}

#[test]
fn bad_magic() {
    let mut b = tiny_bytes();
    b[0] = b'X';
    assert!(matches!(checkpoint::from_bytes::<f32>(&b), Err(CheckpointError::BadMagic)));
    assert!(matches!(checkpoint::from_bytes::<f32>(b"PRN"), Err(CheckpointError::BadMagic)));
}

#[test]
fn unsupported_version() {
    let b = edit(|h| h["format_version"] = 2.into());
    assert!(matches!(checkpoint::from_bytes::<f32>(&b), Err(CheckpointError::UnsupportedVersion(2))));
}

#[test]
fn truncated_payload() {
    let mut b = tiny_bytes();
    b.truncate(b.len() - 10);
    let e = checkpoint::from_bytes::<f32>(&b).unwrap_err();
    assert!(matches!(e, CheckpointError::Truncated { .. }));
    assert!(e.to_string().contains("byte_length exceeds file"), "{e}");
}

#[test]
fn truncated_header() {
    let b = tiny_bytes();
    assert!(matches!(checkpoint::from_bytes::<f32>(&b[..40]), Err(CheckpointError::BadHeader(_))));
}

#[test]
fn missing_pooler_weight() {
    let b = edit(|h| {
        h["tensors"].as_object_mut().unwrap().remove("pooler.weight");
    });
    match checkpoint::from_bytes::<f32>(&b) {
        Err(e @ CheckpointError::MissingTensor(_)) => assert!(e.to_string().contains("pooler.weight")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let b = edit(|h| h["tensors"]["encoder.layer.1.ffn.up.weight"]["shape"] = serde_json::json!([8, 16]));
    match checkpoint::from_bytes::<f32>(&b) {
        Err(e @ CheckpointError::ShapeMismatch { .. }) => {
            assert!(e.to_string().contains("encoder.layer.1.ffn.up.weight"))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_dtype_and_extra_tensor() {
    let b = edit(|h| h["tensors"]["pooler.bias"]["dtype"] = "f16".into());
    assert!(matches!(checkpoint::from_bytes::<f32>(&b), Err(CheckpointError::UnsupportedDtype { .. })));
    let b = edit(|h| {
        let e = h["tensors"]["pooler.bias"].clone();
        h["tensors"]["mlm.bias"] = e;
    });
    assert!(checkpoint::from_bytes::<f32>(&b).is_err());
}

#[test]
fn overlapping_offsets() {
    let b = edit(|h| {
        let off = h["tensors"]["embeddings.token"]["byte_offset"].clone();
        h["tensors"]["embeddings.position"]["byte_offset"] = off;
    });
    assert!(matches!(checkpoint::from_bytes::<f32>(&b), Err(CheckpointError::BadOffset { .. })));
}

#[test]
fn file_without_classifier_loads_with_seeded_head() {
    let b = edit(|h| {
        let t = h["tensors"].as_object_mut().unwrap();
        t.remove("classifier.weight");
        t.remove("classifier.bias");
    });
    let a = checkpoint::from_bytes::<f32>(&b).unwrap();
    let again = checkpoint::from_bytes::<f32>(&b).unwrap();
    assert!(a.weights.bit_eq(&again.weights));
    assert!(a.weights.classifier_bias.data().iter().all(|&x| x == 0.0));
    assert!(checkpoint::validate(&a.weights, &a.config).is_empty());
    let full = checkpoint::from_bytes::<f32>(&tiny_bytes()).unwrap();
    assert!(a.weights.pooler_weight.bit_eq(&full.weights.pooler_weight));

    let half = edit(|h| {
        h["tensors"].as_object_mut().unwrap().remove("classifier.bias");
    });
    assert!(matches!(checkpoint::from_bytes::<f32>(&half), Err(CheckpointError::MissingTensor(_))));
}

#[test]
fn validate_reports_violations() {
    let cfg = ModelConfig::tiny();
    let mut w = init_scratch::<f32>(&cfg, 3).unwrap();
    assert!(checkpoint::validate(&w, &cfg).is_empty());

    let v = checkpoint::validate(&w, &cfg.clone().with_layers(3));
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].kind, ViolationKind::LayerCount);

    w.layers[1].up_bias.data_mut()[2] = f32::NAN;
    let v = checkpoint::validate(&w, &cfg);
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].kind, ViolationKind::NonFinite);
    assert_eq!(v[0].tensor.as_deref(), Some("encoder.layer.1.ffn.up.bias"));
}
