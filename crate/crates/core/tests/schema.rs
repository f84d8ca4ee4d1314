mod common;

use common::{fixture, random_dataset};
use evalflow_core::dataset::{dataset_to_json, parse_dataset, ItemIssue, ManifestDefaults, ParseFailure};
use evalflow_core::{load_dataset, DatasetError, QuestionType};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde_json::json;

fn parse(value: serde_json::Value) -> Result<(evalflow_core::DatasetManifest, Vec<evalflow_core::EvalItem>), ParseFailure> {
    parse_dataset(&serde_json::to_vec(&value).unwrap(), "stem", &ManifestDefaults::default())
}

fn schema_issue(value: serde_json::Value) -> ItemIssue {
    match parse(value) {
        Err(ParseFailure::Schema(e)) => e.issue,
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn acceptance_parameters() {
    common::schema_round_trip(200, 0xda7a).unwrap();
}

#[test]
fn bare_array_takes_fallback_name_and_ids() {
    let (manifest, items) = parse(json!([
        {"instruction": "Capital of France?", "answer": "Paris", "question_type": "free_open"},
        {"id": "named", "instruction": "Is ice cold?", "answer": "yes", "question_type": "yes_no"}
    ]))
    .unwrap();
    assert_eq!(manifest.name, "stem");
    assert_eq!(items[0].id, "item-0");
    assert_eq!(items[0].question_type, QuestionType::FreeOpen);
    assert_eq!(items[1].id, "named");
}

#[test]
fn type_required_without_default() {
    let issue = schema_issue(json!([{"instruction": "x", "answer": "y"}]));
    assert_eq!(issue, ItemIssue::MissingField("question_type".into()));
    let (_, items) = parse(json!({"meta": {"default_question_type": "fill_blank"}, "data": [{"instruction": "x", "answer": "y"}]})).unwrap();
    assert_eq!(items[0].question_type, QuestionType::FillBlank);
}

#[test]
fn duplicate_ids_are_rejected() {
    let issue = schema_issue(json!({"data": [
        {"id": "a", "instruction": "x", "answer": "y", "question_type": "fill_blank"},
        {"id": "a", "instruction": "x", "answer": "y", "question_type": "fill_blank"}
    ]}));
    assert_eq!(issue, ItemIssue::DuplicateId("a".into()));
}

#[test]
fn empty_and_malformed_inputs() {
    assert!(matches!(parse(json!({"data": []})), Err(ParseFailure::Empty)));
    assert!(matches!(
        parse_dataset(b"{not json", "s", &ManifestDefaults::default()),
        Err(ParseFailure::Json(_))
    ));
    assert_eq!(schema_issue(json!({"meta": {}})).field(), "data");
}

#[test]
fn load_reports_path() {
    let missing = fixture("does-not-exist.json");
    let err = load_dataset(&missing, &ManifestDefaults::default()).unwrap_err();
    assert!(matches!(err, DatasetError::Io { .. }));
    assert!(err.to_string().contains("does-not-exist.json"));
    let (manifest, items) = load_dataset(&fixture("generation/dataset.json"), &ManifestDefaults::default()).unwrap();
    assert_eq!(manifest.name, "fixture");
    assert_eq!(items.len(), 10);
}

proptest! {
    #[test]
    fn serialization_is_a_fixed_point(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (manifest, items) = random_dataset(&mut rng);
        let once = dataset_to_json(&manifest, &items);
        let (m, loaded) = parse_dataset(&serde_json::to_vec(&once).unwrap(), "x", &ManifestDefaults::default()).unwrap();
        let (m2, loaded2) = parse_dataset(&serde_json::to_vec(&dataset_to_json(&m, &loaded)).unwrap(), "x", &ManifestDefaults::default()).unwrap();
        prop_assert_eq!(m2, m);
        prop_assert_eq!(loaded2, loaded);
    }
}
