//! The canonical fixtures under docs/formats must parse and re-serialize
//! to the same bytes.

use std::path::PathBuf;

use tabal::io;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/formats/fixtures").join(name)
}

fn rewrite_matches(name: &str, rewrite: impl Fn(&std::path::Path)) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join(name);
    rewrite(&out);
    assert_eq!(
        std::fs::read_to_string(fixture(name)).unwrap(),
        std::fs::read_to_string(&out).unwrap(),
        "{name}"
    );
}

#[test]
fn dataset_fixture() {
    let ds = io::read_dataset(fixture("dataset.jsonl")).unwrap();
    assert_eq!(ds.len(), 3);
    assert!(ds.records()[2].hardness.is_none());
    rewrite_matches("dataset.jsonl", |p| io::write_dataset(&ds, p).unwrap());
}

#[test]
fn predictions_fixture() {
    let preds = io::read_predictions(fixture("predictions.jsonl")).unwrap();
    let mask = preds[0].segmentation_mask.as_ref().unwrap();
    assert_eq!(mask.count_ones(), 12);
    assert!(!mask.get(0, 1) && mask.get(1, 1) && !mask.get(6, 1));
    assert!(mask.get(0, 2) && !mask.get(7, 2));
    assert!(preds[1].segmentation_mask.is_none());
    rewrite_matches("predictions.jsonl", |p| io::write_predictions(&preds, p).unwrap());
}

#[test]
fn candidates_fixture() {
    let list = io::read_candidates(fixture("candidates.jsonl")).unwrap();
    assert_eq!(list.len(), 3);
    assert_eq!(list.entries[0].image_id.as_str(), "img000412");
    rewrite_matches("candidates.jsonl", |p| io::write_candidates(&list, p).unwrap());
}

#[test]
fn round_log_fixture() {
    let log = io::read_round_log(fixture("round_log.jsonl")).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log[1].picked_ids.len(), 2);
    rewrite_matches("round_log.jsonl", |p| {
        for e in &log {
            io::append_round_log(e, p).unwrap();
        }
    });
}

#[test]
fn config_fixture() {
    let config = io::read_run_config(fixture("config.json")).unwrap();
    assert_eq!(config.selection.uncertainty_threshold, 95.0);
    rewrite_matches("config.json", |p| io::write_run_config(&config, p).unwrap());
}
