use criterion::{black_box, criterion_group, criterion_main, Criterion};
use evalflow_core::estimators::{bleu, rouge_l};
use evalflow_core::{extract_answer, QuestionType};

fn sentence(seed: usize, len: usize) -> String {
    const WORDS: [&str; 8] = ["the", "cat", "sat", "on", "a", "mat", "quietly", "today"];
    (0..len).map(|i| WORDS[(seed * 7 + i * 3) % WORDS.len()]).collect::<Vec<_>>().join(" ")
}

fn metrics(c: &mut Criterion) {
    let candidate = sentence(1, 60);
    let references = vec![sentence(2, 60), sentence(3, 55)];
    c.bench_function("bleu_60_tokens", |b| b.iter(|| bleu(black_box(&candidate), black_box(&references))));
    c.bench_function("rouge_l_60_tokens", |b| {
        b.iter(|| rouge_l(black_box(&candidate), black_box(&references[0])))
    });
}

fn extraction(c: &mut Criterion) {
    let choices: Vec<String> = ["Paris", "Rome", "Berlin", "Madrid"].map(String::from).to_vec();
    let response = format!("{} Considering all options, the answer is (C).", sentence(4, 120));
    c.bench_function("extract_single_choice", |b| {
        b.iter(|| extract_answer(black_box(&response), QuestionType::SingleChoice, Some(&choices)))
    });
    let unextractable = sentence(5, 200);
    c.bench_function("extract_fallthrough", |b| {
        b.iter(|| extract_answer(black_box(&unextractable), QuestionType::SingleChoice, Some(&choices)))
    });
}

criterion_group!(benches, metrics, extraction);
criterion_main!(benches);
