//! Checks shared by the acceptance harness and the topic test files.
//! Each check returns a short detail string on success.
#![allow(dead_code)]

pub mod oracle;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use evalflow_core::backend::wire::{
    canonical_json, chat_request_body, completion_request_body, parse_chat_reply, parse_logprob_reply,
};
use evalflow_core::backend::{BackendError, DecodingMode, GenerationOptions, StubBackend, StubScript};
use evalflow_core::dataset::{dataset_to_json, parse_dataset, ManifestDefaults};
use evalflow_core::estimators::{bleu, rouge_l, rouge_n};
use evalflow_core::prompt::{PromptBundle, Role, Turn};
use evalflow_core::report::aggregate;
use evalflow_core::runner::{write_records, ChoiceLogprob, EvalMode, Evaluator, RunConfig, RunRecord};
use evalflow_core::{
    extract_answer, load_dataset, AnswerValue, DatasetManifest, EvalItem, GroundTruth, Letter, Metric, QuestionType,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Deserialize;
use serde_json::Value;

pub type Check = Result<String, String>;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

// ---------------------------------------------------------------- metrics

pub fn metric_oracles() -> Check {
    let started = Instant::now();
    let expected = (1.0f64 / 2.0 * 1.0 / 2.0 * 1.0 / 3.0 * 1.0 / 2.0).powf(0.25);
    let got = bleu("the cat the cat", &["the cat sat"]).map_err(|e| e.to_string())?;
    ensure(close(got, expected, 1e-9), || format!("bleu {got} != {expected}"))?;
    ensure(close(got, 0.4518, 5e-5), || format!("bleu {got} is not about 0.4518"))?;

    let r1 = rouge_n("the cat", "the cat sat", 1).map_err(|e| e.to_string())?;
    ensure(r1.precision == 1.0 && close(r1.recall, 2.0 / 3.0, 1e-15), || format!("rouge1 P/R {r1:?}"))?;
    ensure(close(r1.f1, 0.8, 1e-12), || format!("rouge1 F1 {}", r1.f1))?;
    let rl = rouge_l("the cat sat", "the cat on the mat");
    ensure(close(rl.f1, 0.5, 1e-12), || format!("rougeL F1 {}", rl.f1))?;

    for s in ["the cat sat on the mat", "a", "one two three four five six"] {
        let b = bleu(s, &[s]).map_err(|e| e.to_string())?;
        ensure(b == 1.0, || format!("bleu identity on {s:?} gave {b}"))?;
        for n in [1, 2] {
            let f = rouge_n(s, s, n).map_err(|e| e.to_string())?.f1;
            ensure(f == 1.0, || format!("rouge{n} identity on {s:?} gave {f}"))?;
        }
        let f = rouge_l(s, s).f1;
        ensure(f == 1.0, || format!("rougeL identity on {s:?} gave {f}"))?;
    }
    let empty = bleu("", &["x"]).map_err(|e| e.to_string())?;
    ensure(empty == 0.0, || format!("empty candidate bleu {empty}"))?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("bleu={got:.10}, rouge1 F1=0.8, rougeL F1=0.5, in {elapsed:.2?}"))
}

const VOCAB: [&str; 5] = ["a", "b", "c", "d", "e"];

fn random_tokens(rng: &mut StdRng) -> Vec<&'static str> {
    let len = rng.random_range(0..=8);
    (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect()
}

pub fn oracle_equivalence(pairs: usize, seed: u64) -> Check {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(seed);
    for case in 0..pairs {
        let cand = random_tokens(&mut rng);
        let reference = random_tokens(&mut rng);
        let (c, r) = (cand.join(" "), reference.join(" "));
        let got = bleu(&c, &[&r]).map_err(|e| e.to_string())?;
        let want = oracle::bleu(&cand, std::slice::from_ref(&reference));
        ensure(close(got, want, 1e-9), || format!("case {case}: bleu({c:?}, {r:?}) = {got}, oracle {want}"))?;
        let got = rouge_l(&c, &r);
        let (p, rc, f) = oracle::rouge_l(&cand, &reference);
        ensure(
            close(got.precision, p, 1e-9) && close(got.recall, rc, 1e-9) && close(got.f1, f, 1e-9),
            || format!("case {case}: rouge_l({c:?}, {r:?}) = {got:?}, oracle ({p}, {rc}, {f})"),
        )?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("{pairs} random pairs agree, in {elapsed:.2?}"))
}

// ------------------------------------------------------------- extraction

#[derive(Debug, Deserialize)]
pub struct CorpusCase {
    pub id: String,
    pub question_type: QuestionType,
    #[serde(default)]
    pub choices: Option<Vec<String>>,
    pub response: String,
    pub expected: Option<AnswerValue>,
    pub note: String,
}

pub fn load_corpus() -> Vec<CorpusCase> {
    let text = std::fs::read_to_string(fixture("extraction_corpus.json")).expect("corpus fixture");
    serde_json::from_str(&text).expect("corpus parses")
}

pub fn extraction_corpus() -> Check {
    let corpus = load_corpus();
    ensure(corpus.len() == 60, || format!("corpus has {} cases, expected 60", corpus.len()))?;
    let mut failures = Vec::new();
    for case in &corpus {
        let got = extract_answer(&case.response, case.question_type, case.choices.as_deref());
        if got.value != case.expected || got.is_unextracted() != case.expected.is_none() {
            failures.push(format!("{} ({}): got {:?}, want {:?}", case.id, case.note, got.value, case.expected));
        }
    }
    let passed = corpus.len() - failures.len();
    ensure(failures.is_empty(), || format!("{passed}/{} passed; {}", corpus.len(), failures.join("; ")))?;
    Ok(format!("{passed}/{} cases", corpus.len()))
}

// ------------------------------------------------------------ generation

pub fn generation_fixture() -> (DatasetManifest, Vec<EvalItem>, StubScript) {
    let (manifest, items) =
        load_dataset(&fixture("generation/dataset.json"), &ManifestDefaults::default()).expect("fixture dataset");
    let script = serde_json::from_str(&std::fs::read_to_string(fixture("generation/stub_script.json")).unwrap())
        .expect("stub script");
    (manifest, items, script)
}

pub fn fast_config(cache_dir: Option<&Path>) -> RunConfig {
    RunConfig {
        backoff_base_ms: 1,
        cache_dir: cache_dir.map(Path::to_path_buf),
        ..RunConfig::default()
    }
}

/// Run the fixture once; returns the records, the JSONL bytes and the
/// number of backend calls made.
pub fn run_generation_fixture(cache_dir: &Path) -> Result<(Vec<RunRecord>, Vec<u8>, usize), String> {
    let (manifest, items, script) = generation_fixture();
    let stub = Arc::new(StubBackend::from_script(&script).map_err(|e| e.to_string())?);
    let evaluator = Evaluator::new(stub.clone(), fast_config(Some(cache_dir))).map_err(|e| e.to_string())?;
    let records = runtime()
        .block_on(evaluator.run(&items, &manifest))
        .map_err(|e| e.to_string())?;
    let out = tempfile::NamedTempFile::new().map_err(|e| e.to_string())?;
    write_records(out.path(), &records).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(out.path()).map_err(|e| e.to_string())?;
    Ok((records, bytes, stub.generate_calls()))
}

#[derive(Debug, Deserialize)]
struct ExpectedCategory {
    accuracy: f64,
    support: usize,
}

#[derive(Debug, Deserialize)]
struct Expected {
    accuracy: Vec<f64>,
    accuracy_mean: f64,
    unextracted: Vec<String>,
    rouge1: HashMap<String, f64>,
    rouge1_mean: f64,
    categories: HashMap<String, ExpectedCategory>,
}

pub const GOLDEN_RECORDS: &str = "generation/records.golden.jsonl";

pub fn generation_run() -> Check {
    let expected: Expected =
        serde_json::from_str(&std::fs::read_to_string(fixture("generation/expected.json")).unwrap()).unwrap();
    let (manifest, _, _) = generation_fixture();
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;

    let (records, cold, cold_calls) = run_generation_fixture(cache.path())?;
    let scores: Vec<f64> = records
        .iter()
        .map(|r| r.outcomes.iter().find(|o| o.metric == Metric::Accuracy).map_or(f64::NAN, |o| o.score))
        .collect();
    ensure(scores == expected.accuracy, || format!("accuracy outcomes {scores:?}, traced {:?}", expected.accuracy))?;
    let unextracted: Vec<&str> = records.iter().filter(|r| r.is_unextracted()).map(|r| r.item_id.as_str()).collect();
    ensure(unextracted == expected.unextracted, || format!("unextracted {unextracted:?}"))?;
    for r in &records {
        if let Some(want) = expected.rouge1.get(&r.item_id) {
            let got = r.outcomes.iter().find(|o| o.metric == Metric::Rouge1).map(|o| o.score);
            ensure(got.is_some_and(|g| close(g, *want, 1e-12)), || format!("{} rouge1 {got:?}, traced {want}", r.item_id))?;
        }
    }
    let report = aggregate(&records, &manifest, "stub").map_err(|e| e.to_string())?;
    let acc = report.metric("accuracy").ok_or("no accuracy in report")?;
    ensure(acc.value == expected.accuracy_mean && acc.support == 10, || format!("report accuracy {acc:?}"))?;
    let r1 = report.metric("rouge1").ok_or("no rouge1 in report")?;
    ensure(close(r1.value, expected.rouge1_mean, 1e-12) && r1.support == 3, || format!("report rouge1 {r1:?}"))?;
    for (name, want) in &expected.categories {
        let got = report.category_metric(name, "accuracy").ok_or_else(|| format!("no category {name}"))?;
        ensure(close(got.value, want.accuracy, 1e-12) && got.support == want.support, || {
            format!("category {name}: {got:?}")
        })?;
    }
    ensure(report.extraction_failure_rate == 0.1, || format!("failure rate {}", report.extraction_failure_rate))?;
    ensure(cold_calls == 11, || format!("cold run made {cold_calls} calls, expected 10 plus one retry"))?;

    let golden_path = fixture(GOLDEN_RECORDS);
    if std::env::var_os("EVALFLOW_BLESS").is_some() {
        std::fs::write(&golden_path, &cold).map_err(|e| e.to_string())?;
    }
    let golden = std::fs::read(&golden_path).map_err(|e| format!("{}: {e}", golden_path.display()))?;
    ensure(cold == golden, || "cold run differs from the golden records".into())?;

    let (_, warm, warm_calls) = run_generation_fixture(cache.path())?;
    ensure(warm_calls == 0, || format!("warm run made {warm_calls} backend calls"))?;
    ensure(warm == cold, || "warm run records differ from the cold run".into())?;
    Ok(format!(
        "accuracy {:.4} over 10 items, golden match, warm run 0 calls",
        acc.value
    ))
}

// ------------------------------------------------------------------- ppl

pub fn ppl_item(id: &str, choices: &[&str], answer: char) -> EvalItem {
    let mut item = EvalItem::new(
        id,
        "Pick the best continuation.",
        QuestionType::SingleChoice,
        GroundTruth::Letter(Letter::from_char(answer).unwrap()),
    );
    item.choices = Some(choices.iter().map(|c| c.to_string()).collect());
    item
}

pub fn ppl_manifest() -> DatasetManifest {
    DatasetManifest {
        name: "ppl".into(),
        version: "1".into(),
        default_question_type: None,
        metrics: vec![Metric::Accuracy],
        language: None,
        domain: None,
        modality: None,
        few_shot: None,
    }
}

/// One PPL item scored against a stub whose table maps each
/// `" " + choice` continuation to a total logprob.
pub fn run_ppl_case(item: &EvalItem, table: &[(&str, f64)]) -> Result<RunRecord, String> {
    let mut stub = StubBackend::new();
    for (choice, logprob) in table {
        stub = stub.script_loglikelihood(None, &format!(" {choice}"), *logprob, 1);
    }
    let config = RunConfig {
        mode: EvalMode::Ppl,
        ..fast_config(None)
    };
    let evaluator = Evaluator::new(Arc::new(stub), config).map_err(|e| e.to_string())?;
    let mut records = runtime()
        .block_on(evaluator.run(std::slice::from_ref(item), &ppl_manifest()))
        .map_err(|e| e.to_string())?;
    records.pop().ok_or_else(|| "no record".into())
}

fn predicted(record: &RunRecord, metric: Metric) -> Option<Letter> {
    let outcome = record.outcomes.iter().find(|o| o.metric == metric)?;
    match outcome.extracted.value.as_ref()? {
        AnswerValue::Letter(l) => Some(*l),
        _ => None,
    }
}

fn check_ppl(
    label: &str,
    choices: &[&str],
    logprobs: &[f64],
    want_raw: char,
    want_norm: char,
    want_norm_values: &[f64],
) -> Result<(), String> {
    let item = ppl_item(label, choices, want_raw);
    let table: Vec<(&str, f64)> = choices.iter().copied().zip(logprobs.iter().copied()).collect();
    let record = run_ppl_case(&item, &table)?;
    ensure(record.error.is_none(), || format!("{label}: {:?}", record.error))?;
    let raw = predicted(&record, Metric::Accuracy);
    let norm = predicted(&record, Metric::AccuracyNorm);
    ensure(raw == Letter::from_char(want_raw), || format!("{label}: raw argmax {raw:?}, want {want_raw}"))?;
    ensure(norm == Letter::from_char(want_norm), || format!("{label}: normalized argmax {norm:?}, want {want_norm}"))?;
    let scores: &[ChoiceLogprob] = record.choice_logprobs.as_deref().unwrap_or_default();
    let norms: Vec<f64> = scores.iter().map(|c| c.normalized_logprob).collect();
    ensure(
        norms.len() == want_norm_values.len() && norms.iter().zip(want_norm_values).all(|(a, b)| close(*a, *b, 1e-12)),
        || format!("{label}: normalized logprobs {norms:?}, want {want_norm_values:?}"),
    )?;
    let acc = record.outcomes.iter().find(|o| o.metric == Metric::Accuracy).map(|o| o.score);
    ensure(acc == Some(1.0), || format!("{label}: accuracy {acc:?}"))?;
    Ok(())
}

pub fn ppl_mode() -> Check {
    check_ppl("argmax", &["alpha", "beta", "gamma"], &[-4.0, -2.0, -9.0], 'B', 'B', &[-4.0 / 6.0, -2.0 / 5.0, -9.0 / 6.0])?;
    check_ppl("tie", &["alpha", "bravo"], &[-2.0, -2.0], 'A', 'A', &[-2.0 / 6.0, -2.0 / 6.0])?;
    // -6 over 2 chars and -5 over 10 chars: both rules pick B.
    check_ppl("agree", &["y", "ninechars"], &[-6.0, -5.0], 'B', 'B', &[-3.0, -0.5])?;
    // -2 over 2 chars and -3 over 30 chars: raw picks A, normalized picks B.
    let long = "abcdefghijklmnopqrstuvwxyzabc";
    check_ppl("diverge", &["x", long], &[-2.0, -3.0], 'A', 'B', &[-1.0, -0.1])?;
    Ok("argmax B, tie A, agreement B/B, divergence raw A vs normalized B".into())
}

// ----------------------------------------------------------- concurrency

pub fn concurrency_contract(items: usize, limit: usize, seed: u64) -> Check {
    let mut rng = StdRng::seed_from_u64(seed);
    let choices: Vec<String> = ["Paris", "Rome", "Berlin", "Madrid"].map(String::from).to_vec();
    let mut delays = HashMap::new();
    let mut stub = StubBackend::new();
    let dataset: Vec<EvalItem> = (0..items)
        .map(|i| {
            let id = format!("c{i:03}");
            let letter = Letter::from_index(i % 4).unwrap();
            delays.insert(id.clone(), Duration::from_millis(rng.random_range(0..15)));
            let mut item = EvalItem::new(&id, "Which city?", QuestionType::SingleChoice, GroundTruth::Letter(letter));
            item.choices = Some(choices.clone());
            stub = std::mem::take(&mut stub).script_text(&id, &format!("The answer is {letter}."));
            item
        })
        .collect();
    let stub = Arc::new(stub.with_delay(move |id| delays.get(id).copied().unwrap_or_default()));
    let config = RunConfig {
        concurrency_limit: limit,
        ..fast_config(None)
    };
    let evaluator = Evaluator::new(stub.clone(), config).map_err(|e| e.to_string())?;
    let records = runtime()
        .block_on(evaluator.run(&dataset, &ppl_manifest()))
        .map_err(|e| e.to_string())?;
    let high_water = stub.high_water_mark();
    ensure(high_water <= limit, || format!("high-water mark {high_water} exceeds limit {limit}"))?;
    ensure(records.len() == items, || format!("{} records for {items} items", records.len()))?;
    let in_order = records.iter().zip(&dataset).all(|(r, i)| r.item_id == i.id);
    ensure(in_order, || "records are not in input order".into())?;
    let all_right = records
        .iter()
        .all(|r| r.outcomes.iter().any(|o| o.metric == Metric::Accuracy && o.score == 1.0));
    ensure(all_right, || "a record was paired with the wrong response".into())?;
    Ok(format!("high-water mark {high_water} <= {limit}, order preserved over {items} items"))
}

// ------------------------------------------------------------------ wire

pub fn golden_chat_bundle() -> (PromptBundle, GenerationOptions) {
    let turn = |role, text: &str| Turn {
        role,
        text: text.to_string(),
        attachments: Vec::new(),
    };
    let bundle = PromptBundle {
        item_id: Some("w1".into()),
        system_text: Some("You are a careful assistant.".into()),
        turns: vec![
            turn(Role::User, "Q: 1+1?\nAnswer:"),
            turn(Role::Assistant, "2"),
            turn(Role::User, "Q: 2+2?\nAnswer:"),
        ],
    };
    let options = GenerationOptions {
        max_new_tokens: 64,
        stop_sequences: vec!["\n\n".into()],
        seed: Some(7),
        ..GenerationOptions::default()
    };
    (bundle, options)
}

pub fn golden_image_bundle() -> (PromptBundle, GenerationOptions) {
    let bundle = PromptBundle {
        item_id: Some("w2".into()),
        system_text: None,
        turns: vec![Turn {
            role: Role::User,
            text: "Describe the image.".into(),
            attachments: vec![fixture("wire/pixel.png")],
        }],
    };
    let options = GenerationOptions {
        temperature: 0.7,
        max_new_tokens: 16,
        decoding_mode: DecodingMode::Sample,
        ..GenerationOptions::default()
    };
    (bundle, options)
}

pub const LOGPROB_CONTEXT: &str = "Question: 2+2=\nAnswer:";
pub const LOGPROB_CONTINUATION: &str = " 4";

fn golden(rel: &str) -> Result<String, String> {
    std::fs::read_to_string(fixture(rel))
        .map(|s| s.trim_end_matches('\n').to_string())
        .map_err(|e| format!("{rel}: {e}"))
}

pub fn wire_goldens() -> Check {
    let (bundle, options) = golden_chat_bundle();
    let body = chat_request_body("test-model", &bundle, &options).map_err(|e| e.to_string())?;
    ensure(canonical_json(&body) == golden("wire/chat_request.golden.json")?, || {
        format!("chat body {}", canonical_json(&body))
    })?;
    let (bundle, options) = golden_image_bundle();
    let body = chat_request_body("vision-model", &bundle, &options).map_err(|e| e.to_string())?;
    ensure(canonical_json(&body) == golden("wire/chat_image_request.golden.json")?, || {
        format!("image chat body {}", canonical_json(&body))
    })?;
    let body = completion_request_body("test-model", LOGPROB_CONTEXT, LOGPROB_CONTINUATION);
    ensure(canonical_json(&body) == golden("wire/completion_request.golden.json")?, || {
        format!("completion body {}", canonical_json(&body))
    })?;

    let reply = std::fs::read(fixture("wire/chat_reply.json")).unwrap();
    let parsed = parse_chat_reply(&reply, 0).map_err(|e| e.to_string())?;
    ensure(parsed.text == "The answer is 4.", || format!("chat reply text {:?}", parsed.text))?;
    let reply = std::fs::read(fixture("wire/logprob_reply.json")).unwrap();
    let ll = parse_logprob_reply(&reply, LOGPROB_CONTEXT, LOGPROB_CONTINUATION).map_err(|e| e.to_string())?;
    ensure(ll.total_logprob == -0.25 && ll.token_count == 1 && ll.continuation_chars == 2, || {
        format!("logprob reply parsed as {ll:?}")
    })?;

    let mut rejected = 0;
    for entry in std::fs::read_dir(fixture("wire/malformed")).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let body = std::fs::read(&path).unwrap();
        let result = if name.starts_with("chat_") {
            parse_chat_reply(&body, 0).map(|_| ())
        } else {
            parse_logprob_reply(&body, LOGPROB_CONTEXT, LOGPROB_CONTINUATION).map(|_| ())
        };
        ensure(matches!(result, Err(BackendError::MalformedReply(_))), || {
            format!("{name}: expected MalformedReply, got {result:?}")
        })?;
        rejected += 1;
    }
    ensure(rejected >= 10, || format!("only {rejected} malformed fixtures found"))?;
    Ok(format!("3 request goldens match, {rejected} malformed replies rejected"))
}

// ---------------------------------------------------------------- schema

const TYPES: [QuestionType; 5] = QuestionType::ALL;

fn random_word(rng: &mut StdRng) -> String {
    const WORDS: [&str; 10] = ["alpha", "beta", "Gamma", "delta", "été", "naïve", "x", "42", "wörd", "zeta"];
    WORDS[rng.random_range(0..WORDS.len())].to_string()
}

fn random_text(rng: &mut StdRng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n).map(|_| random_word(rng)).collect::<Vec<_>>().join(" ")
}

fn maybe<T>(rng: &mut StdRng, f: impl FnOnce(&mut StdRng) -> T) -> Option<T> {
    rng.random_bool(0.5).then(|| f(rng))
}

pub fn random_item(rng: &mut StdRng, id: String) -> EvalItem {
    let qtype = TYPES[rng.random_range(0..TYPES.len())];
    let choice_count = rng.random_range(2..=26);
    let choices: Option<Vec<String>> = if qtype.is_choice() || rng.random_bool(0.2) {
        Some((0..choice_count).map(|i| format!("{} {i}", random_word(rng))).collect())
    } else {
        None
    };
    let n = choices.as_ref().map_or(0, Vec::len);
    let answer = match qtype {
        QuestionType::SingleChoice => GroundTruth::Letter(Letter::from_index(rng.random_range(0..n)).unwrap()),
        QuestionType::MultipleChoice => {
            let k = rng.random_range(1..=n.min(4));
            GroundTruth::Letters((0..k).map(|_| Letter::from_index(rng.random_range(0..n)).unwrap()).collect())
        }
        QuestionType::YesNo => GroundTruth::YesNo(if rng.random_bool(0.5) {
            evalflow_core::YesNo::Yes
        } else {
            evalflow_core::YesNo::No
        }),
        QuestionType::FillBlank | QuestionType::FreeOpen => {
            let k = rng.random_range(1..=3);
            GroundTruth::Text((0..k).map(|_| random_text(rng, 4)).collect())
        }
    };
    let mut item = EvalItem::new(&id, &random_text(rng, 12), qtype, answer);
    item.choices = choices;
    item.few_shot = maybe(rng, |rng| {
        (0..rng.random_range(0..3))
            .map(|_| evalflow_core::FewShotExemplar {
                instruction: random_text(rng, 5),
                answer: random_word(rng),
                choices: None,
            })
            .collect()
    });
    item.cot_directive = maybe(rng, |rng| random_text(rng, 4));
    item.images = maybe(rng, |rng| vec![PathBuf::from(format!("img/{}.png", rng.random_range(0..100)))]);
    item.category = maybe(rng, |rng| ["math", "law", "history"][rng.random_range(0..3)].to_string());
    item.language = maybe(rng, |_| "en".to_string());
    item.domain = maybe(rng, random_word);
    item.modality = maybe(rng, |_| "text".to_string());
    if rng.random_bool(0.3) {
        item.extra.insert("source".into(), Value::String(random_word(rng)));
        item.extra.insert("difficulty".into(), Value::from(rng.random_range(1..=5)));
    }
    item
}

pub fn random_dataset(rng: &mut StdRng) -> (DatasetManifest, Vec<EvalItem>) {
    let manifest = DatasetManifest {
        name: format!("ds-{}", rng.random_range(0..1000)),
        version: format!("{}", rng.random_range(1..5)),
        default_question_type: maybe(rng, |rng| TYPES[rng.random_range(0..TYPES.len())]),
        metrics: vec![Metric::Accuracy],
        language: maybe(rng, |_| "en".to_string()),
        domain: None,
        modality: None,
        few_shot: None,
    };
    let items = (0..rng.random_range(1..12)).map(|i| random_item(rng, format!("q{i}"))).collect();
    (manifest, items)
}

/// Fields the loader fills from the manifest.
fn with_fallbacks(mut item: EvalItem, manifest: &DatasetManifest) -> EvalItem {
    item.language = item.language.or_else(|| manifest.language.clone());
    item.few_shot = item.few_shot.or_else(|| manifest.few_shot.clone());
    item
}

fn reload(manifest: &DatasetManifest, items: &[EvalItem]) -> Result<(DatasetManifest, Vec<EvalItem>), String> {
    let bytes = serde_json::to_vec_pretty(&dataset_to_json(manifest, items)).unwrap();
    parse_dataset(&bytes, "fallback", &ManifestDefaults::default()).map_err(|e| format!("{e:?}"))
}

pub enum Mutation {
    BadLetter,
    MissingField(&'static str),
    TooManyChoices,
}

/// Apply a mutation to one record; returns the field the loader must name.
pub fn mutate(record: &mut serde_json::Map<String, Value>, mutation: &Mutation) -> &'static str {
    match mutation {
        Mutation::BadLetter => {
            let n = record.get("choices").and_then(Value::as_array).map_or(0, Vec::len);
            let bad = if n < 26 { Letter::from_index(n).unwrap().to_string() } else { "?".into() };
            record.insert("answer".into(), Value::String(bad));
            record.insert("question_type".into(), Value::String("single_choice".into()));
            if n == 0 {
                record.insert("choices".into(), serde_json::json!(["only"]));
                record.insert("answer".into(), Value::String("B".into()));
            }
            "answer"
        }
        Mutation::MissingField(field) => {
            record.remove(*field);
            field
        }
        Mutation::TooManyChoices => {
            let choices: Vec<String> = (0..27).map(|i| format!("option {i}")).collect();
            record.insert("choices".into(), serde_json::json!(choices));
            "choices"
        }
    }
}

pub fn schema_round_trip(datasets: usize, seed: u64) -> Check {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut rejected = 0;
    for n in 0..datasets {
        let (manifest, items) = random_dataset(&mut rng);
        let (m1, loaded) = reload(&manifest, &items).map_err(|e| format!("dataset {n}: first load failed: {e}"))?;
        let expected: Vec<EvalItem> = items.iter().cloned().map(|i| with_fallbacks(i, &manifest)).collect();
        ensure(m1 == manifest, || format!("dataset {n}: manifest changed: {m1:?}"))?;
        ensure(loaded == expected, || format!("dataset {n}: items changed on load"))?;
        let (m2, again) = reload(&m1, &loaded).map_err(|e| format!("dataset {n}: second load failed: {e}"))?;
        ensure(m2 == m1 && again == loaded, || format!("dataset {n}: load -> serialize -> load is not stable"))?;

        for mutation in [
            Mutation::BadLetter,
            Mutation::MissingField("instruction"),
            Mutation::MissingField("answer"),
            Mutation::TooManyChoices,
        ] {
            let mut json = dataset_to_json(&manifest, &items);
            let data = json["data"].as_array_mut().unwrap();
            let target = rng.random_range(0..data.len());
            let field = mutate(data[target].as_object_mut().unwrap(), &mutation);
            let bytes = serde_json::to_vec(&json).unwrap();
            match parse_dataset(&bytes, "fallback", &ManifestDefaults::default()) {
                Err(evalflow_core::dataset::ParseFailure::Schema(err)) => {
                    ensure(err.issue.field() == field && err.to_string().contains(field), || {
                        format!("dataset {n}: mutation on `{field}` reported as {err}")
                    })?;
                    ensure(err.index == Some(target), || format!("dataset {n}: wrong record index {:?}", err.index))?;
                }
                other => return Err(format!("dataset {n}: mutation on `{field}` not rejected: {other:?}")),
            }
            rejected += 1;
        }
    }
    Ok(format!("{datasets} datasets round-trip, {rejected} invalid mutations rejected with the field named"))
}
