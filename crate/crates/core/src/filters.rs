//! Answer extraction: turn a verbose model response into a canonical answer.
//!
//! Rules are tried tier by tier. Within a tier the match that starts latest
//! in the response wins, since chain-of-thought answers usually restate the
//! final choice at the end. Tiers, in order:
//!
//! 0. user-supplied rules from the run configuration
//! 1. explicit markers (`answer is X`, `answer: X`, `correct option is X`,
//!    `(X)` at line start, `boxed{X}`)
//! 2. for choice questions, the last standalone capital letter in range;
//!    for yes/no, a leading yes/no token
//! 3. for choice questions, the whole response equal to an option's text
//! 4. for text questions, the whole normalized response
//!
//! Extraction never fails loudly: an answer that cannot be found is
//! reported with [`ExtractionStatus::Unextracted`].

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::answer::{AnswerValue, Letter, LetterSet, QuestionType, YesNo};
use crate::backend::{Backend, GenerationOptions};
use crate::prompt::{PromptBundle, Role, Turn};

static EDGE_PUNCT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[\p{P}\s]+|[\p{P}\s]+$").unwrap());

/// Compatibility-normalize, lowercase, collapse whitespace, strip surrounding
/// punctuation and drop a leading English article.
pub fn normalize_text(s: &str) -> String {
    let mut current = normalize_once(s);
    // Stripping an article can expose more punctuation or another article.
    for _ in 0..16 {
        let next = normalize_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn normalize_once(s: &str) -> String {
    let folded = s.nfkc().collect::<String>().to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut text = EDGE_PUNCT.replace_all(&collapsed, "").into_owned();
    for article in ["the ", "an ", "a "] {
        if let Some(rest) = text.strip_prefix(article) {
            text = EDGE_PUNCT.replace_all(rest, "").into_owned();
            break;
        }
    }
    text
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStatus {
    Extracted,
    ModelExtracted,
    Unextracted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub value: Option<AnswerValue>,
    pub status: ExtractionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_span: Option<String>,
}

impl ExtractedAnswer {
    pub fn unextracted() -> Self {
        ExtractedAnswer {
            value: None,
            status: ExtractionStatus::Unextracted,
            rule_name: None,
            raw_span: None,
        }
    }

    pub fn extracted(value: AnswerValue, rule_name: &str, raw_span: Option<&str>) -> Self {
        ExtractedAnswer {
            value: Some(value),
            status: ExtractionStatus::Extracted,
            rule_name: Some(rule_name.to_string()),
            raw_span: raw_span.map(str::to_string),
        }
    }

    pub fn is_unextracted(&self) -> bool {
        self.status == ExtractionStatus::Unextracted
    }
}

/// A regular-expression extraction rule as written in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRule {
    pub name: String,
    pub pattern: String,
    pub capture_group: usize,
    pub applicable_types: BTreeSet<QuestionType>,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("extraction rule `{name}` does not compile: {source}")]
    BadPattern {
        name: String,
        #[source]
        source: regex::Error,
    },
    #[error("extraction rule `{name}` has no capture group {group}")]
    MissingGroup { name: String, group: usize },
}

#[derive(Debug, Clone)]
struct CompiledRule {
    name: String,
    regex: Regex,
    group: usize,
    types: BTreeSet<QuestionType>,
}

impl CompiledRule {
    fn compile(rule: &ExtractionRule) -> Result<Self, FilterError> {
        let regex = Regex::new(&rule.pattern).map_err(|source| FilterError::BadPattern {
            name: rule.name.clone(),
            source,
        })?;
        if rule.capture_group >= regex.captures_len() {
            return Err(FilterError::MissingGroup {
                name: rule.name.clone(),
                group: rule.capture_group,
            });
        }
        Ok(CompiledRule {
            name: rule.name.clone(),
            regex,
            group: rule.capture_group,
            types: rule.applicable_types.clone(),
        })
    }

    fn builtin(name: &str, pattern: &str, types: &[QuestionType]) -> Self {
        CompiledRule::compile(&ExtractionRule {
            name: name.to_string(),
            pattern: pattern.to_string(),
            capture_group: 1,
            applicable_types: types.iter().copied().collect(),
        })
        .expect("built-in extraction rule must compile")
    }
}

// Letter captures are case-sensitive so prose such as "the answer is a bit
// unclear" cannot read as option A.
const LETTER: &str = r"\**\(?([A-Z])\)?\**(?:\b|$)";
const LETTER_LIST: &str =
    r"\**(\(?[A-Z]\)?(?:(?:\s*[,;/&]\s*|\s+(?i:and)\s+)\(?[A-Z]\)?)*|[A-Z]{2,26})\**(?:\b|$)";
const YES_NO: &str = r"\**((?i:yes|no|true|false|correct|incorrect))\**\b";
// Up to the end of the sentence or line, so a restated answer later on the
// same line is a separate match.
const REST_OF_SENTENCE: &str = r"(?m:(.+?)(?:[.!?](?:\s|$)|$))";

fn builtin_markers() -> Vec<CompiledRule> {
    use QuestionType::*;
    let single = [SingleChoice];
    let multi = [MultipleChoice];
    let yes_no = [YesNo];
    let text = [FillBlank, FreeOpen];
    let answer_is = r"(?i:answer\s+is)\s*:?\s*";
    let answer_colon = r"(?i:answer)\s*:\s*";
    let correct = r"(?i:correct\s+(?:option|choice|answer)\s+is)\s*:?\s*";
    let boxed = r"\\?(?i:boxed)\{\s*";
    let mut rules = Vec::new();
    for (kind, capture, types) in [
        ("letter", LETTER, &single[..]),
        ("letters", LETTER_LIST, &multi[..]),
        ("yes_no", YES_NO, &yes_no[..]),
    ] {
        rules.push(CompiledRule::builtin(&format!("answer_is_{kind}"), &format!("{answer_is}{capture}"), types));
        rules.push(CompiledRule::builtin(&format!("answer_colon_{kind}"), &format!("{answer_colon}{capture}"), types));
        rules.push(CompiledRule::builtin(&format!("correct_option_{kind}"), &format!("{correct}{capture}"), types));
        rules.push(CompiledRule::builtin(&format!("boxed_{kind}"), &format!(r"{boxed}{capture}\s*\}}"), types));
    }
    rules.push(CompiledRule::builtin(
        "paren_line_start",
        r"(?m)^[ \t]*\(([A-Z])\)",
        &[SingleChoice, MultipleChoice],
    ));
    rules.push(CompiledRule::builtin("answer_is_text", &format!(r"(?i:answer\s*(?:is|:))\s*{REST_OF_SENTENCE}"), &text));
    rules.push(CompiledRule::builtin("boxed_text", r"\\?(?i:boxed)\{([^{}]+)\}", &text));
    rules
}

static STANDALONE_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Z])\b").unwrap());
static STANDALONE_LETTERS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b([A-Z](?:\)?(?:\s*[,;/&]\s*|\s+(?i:and)\s+)\(?[A-Z])*)\b").unwrap()
});
static LEADING_YES_NO: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*\**((?i:yes|no|true|false|correct|incorrect))\**\s*(?:[,.!;:]|$)").unwrap()
});

/// The rule bank. Immutable after construction, so one instance can be
/// shared across concurrent extractions.
#[derive(Debug, Clone)]
pub struct AnswerExtractor {
    user_rules: Vec<CompiledRule>,
    markers: Vec<CompiledRule>,
}

impl Default for AnswerExtractor {
    fn default() -> Self {
        AnswerExtractor {
            user_rules: Vec::new(),
            markers: builtin_markers(),
        }
    }
}

static DEFAULT_EXTRACTOR: LazyLock<AnswerExtractor> = LazyLock::new(AnswerExtractor::default);

/// Extract with the built-in rules only.
pub fn extract_answer(raw: &str, qtype: QuestionType, choices: Option<&[String]>) -> ExtractedAnswer {
    DEFAULT_EXTRACTOR.extract(raw, qtype, choices)
}

impl AnswerExtractor {
    /// Built-in rules plus user rules, which are consulted first.
    pub fn with_rules(rules: &[ExtractionRule]) -> Result<Self, FilterError> {
        let user_rules = rules.iter().map(CompiledRule::compile).collect::<Result<_, _>>()?;
        Ok(AnswerExtractor {
            user_rules,
            markers: builtin_markers(),
        })
    }

    pub fn extract(&self, raw: &str, qtype: QuestionType, choices: Option<&[String]>) -> ExtractedAnswer {
        let num_choices = choices.map_or(0, <[String]>::len);
        for tier in [&self.user_rules, &self.markers] {
            if let Some(found) = last_rule_match(tier, raw, qtype, num_choices) {
                return found;
            }
        }
        match qtype {
            QuestionType::SingleChoice | QuestionType::MultipleChoice => {
                if let Some(found) = standalone_letters(raw, qtype, num_choices) {
                    return found;
                }
                if let Some(found) = choice_text_match(raw, qtype, choices.unwrap_or_default()) {
                    return found;
                }
                ExtractedAnswer::unextracted()
            }
            QuestionType::YesNo => LEADING_YES_NO
                .captures(raw)
                .and_then(|caps| {
                    let m = caps.get(1)?;
                    let value = YesNo::from_token(&normalize_text(m.as_str()))?;
                    Some(ExtractedAnswer::extracted(AnswerValue::YesNo(value), "leading_yes_no", Some(m.as_str())))
                })
                .unwrap_or_else(ExtractedAnswer::unextracted),
            QuestionType::FillBlank | QuestionType::FreeOpen => {
                let normalized = normalize_text(raw);
                if normalized.is_empty() {
                    ExtractedAnswer::unextracted()
                } else {
                    ExtractedAnswer::extracted(AnswerValue::Text(normalized), "full_text", None)
                }
            }
        }
    }
}

fn last_rule_match(
    rules: &[CompiledRule],
    raw: &str,
    qtype: QuestionType,
    num_choices: usize,
) -> Option<ExtractedAnswer> {
    let mut candidates: Vec<(usize, &CompiledRule, &str)> = Vec::new();
    for rule in rules.iter().filter(|r| r.types.contains(&qtype)) {
        for caps in rule.regex.captures_iter(raw) {
            if let Some(m) = caps.get(rule.group) {
                candidates.push((m.start(), rule, m.as_str()));
            }
        }
    }
    // Latest start wins; ties go to the earlier-listed rule.
    candidates.sort_by_key(|c| std::cmp::Reverse(c.0));
    candidates.into_iter().find_map(|(_, rule, span)| {
        convert_capture(span, qtype, num_choices)
            .map(|value| ExtractedAnswer::extracted(value, &rule.name, Some(span)))
    })
}

/// Interpret a captured span according to the question type. Letters that
/// do not index a real option invalidate the whole capture.
fn convert_capture(span: &str, qtype: QuestionType, num_choices: usize) -> Option<AnswerValue> {
    match qtype {
        QuestionType::SingleChoice => {
            let letters = parse_letters(span, num_choices)?;
            (letters.len() == 1).then(|| AnswerValue::Letter(*letters.iter().next().unwrap()))
        }
        QuestionType::MultipleChoice => parse_letters(span, num_choices).map(AnswerValue::Letters),
        QuestionType::YesNo => YesNo::from_token(&normalize_text(span)).map(AnswerValue::YesNo),
        QuestionType::FillBlank | QuestionType::FreeOpen => {
            let normalized = normalize_text(span);
            (!normalized.is_empty()).then_some(AnswerValue::Text(normalized))
        }
    }
}

fn parse_letters(span: &str, num_choices: usize) -> Option<LetterSet> {
    let stripped = span.replace(['*', '(', ')'], " ");
    let mut set = LetterSet::new();
    for word in stripped.split(|c: char| c.is_whitespace() || ",;/&".contains(c)) {
        if word.is_empty() || word.eq_ignore_ascii_case("and") {
            continue;
        }
        for c in word.chars() {
            let letter = Letter::from_char(c)?;
            if !letter.fits(num_choices) {
                return None;
            }
            set.insert(letter);
        }
    }
    (!set.is_empty()).then_some(set)
}

fn standalone_letters(raw: &str, qtype: QuestionType, num_choices: usize) -> Option<ExtractedAnswer> {
    let (regex, name) = match qtype {
        QuestionType::MultipleChoice => (&*STANDALONE_LETTERS, "standalone_letters"),
        _ => (&*STANDALONE_LETTER, "standalone_letter"),
    };
    let spans: Vec<&str> = regex
        .captures_iter(raw)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .collect();
    spans.into_iter().rev().find_map(|span| {
        convert_capture(span, qtype, num_choices).map(|v| ExtractedAnswer::extracted(v, name, Some(span)))
    })
}

fn choice_text_match(raw: &str, qtype: QuestionType, choices: &[String]) -> Option<ExtractedAnswer> {
    let response = normalize_text(raw);
    if response.is_empty() {
        return None;
    }
    let index = choices.iter().position(|c| normalize_text(c) == response)?;
    let letter = Letter::from_index(index)?;
    let value = match qtype {
        QuestionType::MultipleChoice => AnswerValue::Letters(std::iter::once(letter).collect()),
        _ => AnswerValue::Letter(letter),
    };
    Some(ExtractedAnswer::extracted(value, "choice_text", Some(raw.trim())))
}

/// Instruction sent to the extractor model. Kept fixed so runs are
/// reproducible for a given extractor.
pub const MODEL_EXTRACTION_PROMPT: &str = "You are grading a model's response to a question. \
Identify the single final answer the response commits to and reply with that answer only, \
without explanation.\n\nAnswer format: {format}\nIf the response does not commit to any answer, reply with NONE.\n\n\
Question type: {question_type}\n{choices}Response:\n{response}";

fn answer_format(qtype: QuestionType) -> &'static str {
    match qtype {
        QuestionType::SingleChoice => "only the option letter, for example: B",
        QuestionType::MultipleChoice => "only the option letters separated by commas, for example: A, C",
        QuestionType::YesNo => "only yes or no",
        QuestionType::FillBlank | QuestionType::FreeOpen => "only the short final answer",
    }
}

/// Builds the extractor conversation for one response.
pub fn model_extraction_bundle(
    raw: &str,
    qtype: QuestionType,
    choices: Option<&[String]>,
    item_id: Option<&str>,
) -> PromptBundle {
    let choice_lines = match choices {
        Some(choices) if !choices.is_empty() => {
            let lines: Vec<String> = choices
                .iter()
                .enumerate()
                .filter_map(|(i, c)| Letter::from_index(i).map(|l| format!("{l}. {c}")))
                .collect();
            format!("Options:\n{}\n", lines.join("\n"))
        }
        _ => String::new(),
    };
    let text = MODEL_EXTRACTION_PROMPT
        .replace("{format}", answer_format(qtype))
        .replace("{question_type}", qtype.as_str())
        .replace("{choices}", &choice_lines)
        .replace("{response}", raw);
    PromptBundle {
        item_id: item_id.map(str::to_string),
        system_text: None,
        turns: vec![Turn {
            role: Role::User,
            text,
            attachments: Vec::new(),
        }],
    }
}

/// Outcome of asking an extractor model; `error` carries a swallowed
/// backend failure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelExtraction {
    pub answer: ExtractedAnswer,
    pub reply: Option<String>,
    pub error: Option<String>,
}

/// Ask an extractor backend to restate the answer, then run the rule bank
/// on its reply.
pub async fn model_extract(
    raw: &str,
    qtype: QuestionType,
    choices: Option<&[String]>,
    extractor: &dyn Backend,
    rules: &AnswerExtractor,
    item_id: Option<&str>,
) -> ModelExtraction {
    let bundle = model_extraction_bundle(raw, qtype, choices, item_id);
    let options = extraction_options();
    match extractor.generate(&bundle, &options).await {
        Ok(response) => ModelExtraction {
            answer: interpret_extractor_reply(&response.text, qtype, choices, rules),
            reply: Some(response.text),
            error: None,
        },
        Err(err) => {
            tracing::warn!(item = item_id.unwrap_or("-"), error = %err, "model extraction failed");
            ModelExtraction {
                answer: ExtractedAnswer::unextracted(),
                reply: None,
                error: Some(format!("model extraction failed: {err}")),
            }
        }
    }
}

/// Generation settings used for extractor calls.
pub fn extraction_options() -> GenerationOptions {
    GenerationOptions {
        max_new_tokens: 32,
        ..GenerationOptions::default()
    }
}

pub fn interpret_extractor_reply(
    reply: &str,
    qtype: QuestionType,
    choices: Option<&[String]>,
    rules: &AnswerExtractor,
) -> ExtractedAnswer {
    if normalize_text(reply) == "none" {
        return ExtractedAnswer::unextracted();
    }
    let mut answer = rules.extract(reply, qtype, choices);
    if !answer.is_unextracted() {
        answer.status = ExtractionStatus::ModelExtracted;
    }
    answer
}
