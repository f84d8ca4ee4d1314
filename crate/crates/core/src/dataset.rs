//! Loading and validation of datasets in the unified JSON layout.
//!
//! A dataset file is either a bare array of records or an object
//! `{"meta": {...}, "data": [...]}`. Records are validated one by one and the
//! first offending record is reported with the field at fault.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::answer::{GroundTruth, Letter, LetterSet, QuestionType, YesNo};
use crate::estimators::Metric;
use crate::filters::normalize_text;

/// Category key reserved for whole-dataset rows in reports.
pub const OVERALL_CATEGORY: &str = "__all__";

const KNOWN_KEYS: [&str; 12] = [
    "id",
    "instruction",
    "choices",
    "answer",
    "question_type",
    "few_shot",
    "cot_directive",
    "images",
    "category",
    "language",
    "domain",
    "modality",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExemplar {
    pub instruction: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub instruction: String,
    pub choices: Option<Vec<String>>,
    pub answer: GroundTruth,
    pub question_type: QuestionType,
    pub few_shot: Option<Vec<FewShotExemplar>>,
    pub cot_directive: Option<String>,
    pub images: Option<Vec<PathBuf>>,
    pub category: Option<String>,
    pub language: Option<String>,
    pub domain: Option<String>,
    pub modality: Option<String>,
    /// Unrecognized record keys, kept for round-tripping.
    pub extra: BTreeMap<String, Value>,
}

impl EvalItem {
    pub fn new(id: &str, instruction: &str, question_type: QuestionType, answer: GroundTruth) -> Self {
        EvalItem {
            id: id.to_string(),
            instruction: instruction.to_string(),
            choices: None,
            answer,
            question_type,
            few_shot: None,
            cot_directive: None,
            images: None,
            category: None,
            language: None,
            domain: None,
            modality: None,
            extra: BTreeMap::new(),
        }
    }

    /// Serialize back into a unified-format record.
    pub fn to_record(&self) -> Map<String, Value> {
        let mut record = Map::new();
        for (key, value) in &self.extra {
            record.insert(key.clone(), value.clone());
        }
        record.insert("id".into(), Value::String(self.id.clone()));
        record.insert("instruction".into(), Value::String(self.instruction.clone()));
        if let Some(choices) = &self.choices {
            record.insert("choices".into(), serde_json::json!(choices));
        }
        let answer = match &self.answer {
            GroundTruth::Letter(l) => Value::String(l.to_string()),
            GroundTruth::Letters(set) => serde_json::json!(set),
            GroundTruth::YesNo(v) => Value::String(v.as_str().into()),
            GroundTruth::Text(alts) if alts.len() == 1 => Value::String(alts[0].clone()),
            GroundTruth::Text(alts) => serde_json::json!(alts),
        };
        record.insert("answer".into(), answer);
        record.insert("question_type".into(), Value::String(self.question_type.as_str().into()));
        if let Some(few_shot) = &self.few_shot {
            record.insert("few_shot".into(), serde_json::to_value(few_shot).expect("plain data"));
        }
        if let Some(images) = &self.images {
            record.insert("images".into(), serde_json::json!(images));
        }
        for (key, value) in [
            ("cot_directive", &self.cot_directive),
            ("category", &self.category),
            ("language", &self.language),
            ("domain", &self.domain),
            ("modality", &self.modality),
        ] {
            if let Some(v) = value {
                record.insert(key.into(), Value::String(v.clone()));
            }
        }
        record
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_question_type: Option<QuestionType>,
    pub metrics: Vec<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    /// Exemplars for items that carry none of their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few_shot: Option<Vec<FewShotExemplar>>,
}

/// Fallbacks for manifest fields, supplied by the run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestDefaults {
    pub default_question_type: Option<QuestionType>,
    pub metrics: Option<Vec<Metric>>,
}

impl ManifestDefaults {
    fn metrics_for(&self, qtype: Option<QuestionType>) -> Vec<Metric> {
        if let Some(metrics) = &self.metrics {
            return metrics.clone();
        }
        match qtype {
            Some(QuestionType::FreeOpen) => vec![Metric::Bleu, Metric::Rouge1, Metric::Rouge2, Metric::RougeL],
            _ => vec![Metric::Accuracy],
        }
    }
}

/// What is wrong with one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemIssue {
    MissingField(String),
    InvalidField { field: String, reason: String },
    DuplicateId(String),
}

impl ItemIssue {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ItemIssue::InvalidField {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// The field at fault.
    pub fn field(&self) -> &str {
        match self {
            ItemIssue::MissingField(f) | ItemIssue::InvalidField { field: f, .. } => f,
            ItemIssue::DuplicateId(_) => "id",
        }
    }
}

impl fmt::Display for ItemIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemIssue::MissingField(field) => write!(f, "missing field: {field}"),
            ItemIssue::InvalidField { field, reason } => write!(f, "invalid field {field}: {reason}"),
            ItemIssue::DuplicateId(id) => write!(f, "duplicate id `{id}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct SchemaError {
    /// Position of the record in `data`; `None` for dataset-level problems.
    pub index: Option<usize>,
    pub id: Option<String>,
    pub issue: ItemIssue,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.index, &self.id) {
            (Some(i), Some(id)) => write!(f, "record {i} (id `{id}`): {}", self.issue),
            (Some(i), None) => write!(f, "record {i}: {}", self.issue),
            (None, _) => write!(f, "{}", self.issue),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("schema error in {path}: {error}")]
    Schema { path: PathBuf, error: SchemaError },
    #[error("dataset {0} contains no records")]
    Empty(PathBuf),
}

impl DatasetError {
    pub fn schema(&self) -> Option<&SchemaError> {
        match self {
            DatasetError::Schema { error, .. } => Some(error),
            _ => None,
        }
    }
}

/// Load and validate a dataset file.
pub fn load_dataset(
    path: &Path,
    defaults: &ManifestDefaults,
) -> Result<(DatasetManifest, Vec<EvalItem>), DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    parse_dataset(&bytes, stem, defaults).map_err(|e| e.with_path(path))
}

/// Errors from [`parse_dataset`] before a path is attached.
#[derive(Debug)]
pub enum ParseFailure {
    Json(String),
    Schema(SchemaError),
    Empty,
}

impl ParseFailure {
    fn with_path(self, path: &Path) -> DatasetError {
        let path = path.to_path_buf();
        match self {
            ParseFailure::Json(message) => DatasetError::Parse { path, message },
            ParseFailure::Schema(error) => DatasetError::Schema { path, error },
            ParseFailure::Empty => DatasetError::Empty(path),
        }
    }
}

/// Parse dataset bytes; `fallback_name` names bare-array datasets.
pub fn parse_dataset(
    bytes: &[u8],
    fallback_name: &str,
    defaults: &ManifestDefaults,
) -> Result<(DatasetManifest, Vec<EvalItem>), ParseFailure> {
    let text = std::str::from_utf8(bytes).map_err(|e| ParseFailure::Json(format!("not UTF-8: {e}")))?;
    let root: Value = serde_json::from_str(text).map_err(|e| ParseFailure::Json(e.to_string()))?;
    let dataset_issue = |issue| ParseFailure::Schema(SchemaError { index: None, id: None, issue });
    let (meta, data) = match root {
        Value::Array(records) => (None, records),
        Value::Object(mut obj) => {
            let data = match obj.remove("data") {
                Some(Value::Array(records)) => records,
                Some(_) => return Err(dataset_issue(ItemIssue::invalid("data", "expected an array of records"))),
                None => return Err(dataset_issue(ItemIssue::MissingField("data".into()))),
            };
            (obj.remove("meta"), data)
        }
        _ => {
            return Err(dataset_issue(ItemIssue::invalid(
                "data",
                "top level must be an array or an object with `data`",
            )))
        }
    };
    let manifest = build_manifest(meta.as_ref(), fallback_name, defaults).map_err(dataset_issue)?;
    if data.is_empty() {
        return Err(ParseFailure::Empty);
    }

    let mut items = Vec::with_capacity(data.len());
    let mut seen = HashSet::new();
    for (index, record) in data.iter().enumerate() {
        let schema_error = |issue| {
            ParseFailure::Schema(SchemaError {
                index: Some(index),
                id: record.get("id").and_then(id_string),
                issue,
            })
        };
        let Value::Object(record) = record else {
            return Err(schema_error(ItemIssue::invalid("record", "expected an object")));
        };
        let mut item = validate_item(record, &manifest).map_err(schema_error)?;
        if item.id.is_empty() {
            item.id = format!("item-{index}");
        }
        if !seen.insert(item.id.clone()) {
            return Err(schema_error(ItemIssue::DuplicateId(item.id)));
        }
        items.push(item);
    }
    Ok((manifest, items))
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) if n.is_u64() || n.is_i64() => Some(n.to_string()),
        _ => None,
    }
}

fn build_manifest(
    meta: Option<&Value>,
    fallback_name: &str,
    defaults: &ManifestDefaults,
) -> Result<DatasetManifest, ItemIssue> {
    let meta = match meta {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(ItemIssue::invalid("meta", "expected an object")),
    };
    let opt_str = |key: &str| -> Result<Option<String>, ItemIssue> {
        match meta.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(ItemIssue::invalid(&format!("meta.{key}"), "expected a string")),
        }
    };
    let default_question_type = match opt_str("default_question_type")? {
        Some(s) => Some(s.parse().map_err(|e: String| ItemIssue::invalid("meta.default_question_type", e))?),
        None => defaults.default_question_type,
    };
    let metrics = match meta.get("metrics") {
        None | Some(Value::Null) => defaults.metrics_for(default_question_type),
        Some(Value::Array(names)) => names
            .iter()
            .map(|n| {
                n.as_str()
                    .ok_or_else(|| ItemIssue::invalid("meta.metrics", "metric names must be strings"))?
                    .parse::<Metric>()
                    .map_err(|e| ItemIssue::invalid("meta.metrics", e))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(ItemIssue::invalid("meta.metrics", "expected an array")),
    };
    let few_shot = match meta.get("few_shot") {
        None | Some(Value::Null) => None,
        Some(v) => Some(parse_exemplars(v, "meta.few_shot")?),
    };
    Ok(DatasetManifest {
        name: opt_str("name")?.unwrap_or_else(|| fallback_name.to_string()),
        version: opt_str("version")?.unwrap_or_else(|| "0".to_string()),
        default_question_type,
        metrics,
        language: opt_str("language")?,
        domain: opt_str("domain")?,
        modality: opt_str("modality")?,
        few_shot,
    })
}

fn parse_exemplars(value: &Value, field: &str) -> Result<Vec<FewShotExemplar>, ItemIssue> {
    let Value::Array(entries) = value else {
        return Err(ItemIssue::invalid(field, "expected an array of exemplars"));
    };
    entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let at = format!("{field}[{i}]");
            let Value::Object(obj) = entry else {
                return Err(ItemIssue::invalid(&at, "expected an object"));
            };
            let instruction = required_string(obj, "instruction", &at)?;
            let answer = required_string(obj, "answer", &at)?;
            let choices = match obj.get("choices") {
                None | Some(Value::Null) => None,
                Some(v) => Some(parse_choices(v, &format!("{at}.choices"))?),
            };
            Ok(FewShotExemplar {
                instruction,
                answer,
                choices,
            })
        })
        .collect()
}

fn required_string(obj: &Map<String, Value>, key: &str, prefix: &str) -> Result<String, ItemIssue> {
    let field = format!("{prefix}.{key}");
    match obj.get(key) {
        None | Some(Value::Null) => Err(ItemIssue::MissingField(field)),
        Some(Value::String(s)) if s.trim().is_empty() => Err(ItemIssue::invalid(&field, "must not be empty")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ItemIssue::invalid(&field, "expected a string")),
    }
}

fn optional_string(record: &Map<String, Value>, key: &str) -> Result<Option<String>, ItemIssue> {
    match record.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(ItemIssue::invalid(key, "expected a string")),
    }
}

fn parse_choices(value: &Value, field: &str) -> Result<Vec<String>, ItemIssue> {
    let Value::Array(entries) = value else {
        return Err(ItemIssue::invalid(field, "expected an array of strings"));
    };
    if entries.is_empty() {
        return Err(ItemIssue::invalid(field, "must not be empty"));
    }
    if entries.len() > Letter::MAX_CHOICES {
        return Err(ItemIssue::invalid(
            field,
            format!("{} choices exceed the {} option letters", entries.len(), Letter::MAX_CHOICES),
        ));
    }
    entries
        .iter()
        .map(|c| match c {
            Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
            Value::String(_) => Err(ItemIssue::invalid(field, "choice text must not be empty")),
            _ => Err(ItemIssue::invalid(field, "choices must be strings")),
        })
        .collect()
}

/// Accepts "A", "AC", "A,C", "A, C" and arrays of such strings,
/// case-insensitively.
fn parse_letter_answer(value: &Value, num_choices: usize) -> Result<LetterSet, ItemIssue> {
    let parts: Vec<&str> = match value {
        Value::String(s) => vec![s.as_str()],
        Value::Array(entries) => entries
            .iter()
            .map(|e| e.as_str().ok_or_else(|| ItemIssue::invalid("answer", "expected option letters")))
            .collect::<Result<_, _>>()?,
        _ => return Err(ItemIssue::invalid("answer", "expected option letters")),
    };
    let mut set = LetterSet::new();
    for part in parts {
        for c in part.chars().filter(|c| !c.is_whitespace() && !",;/&".contains(*c)) {
            let letter = Letter::from_char(c.to_ascii_uppercase())
                .ok_or_else(|| ItemIssue::invalid("answer", format!("`{c}` is not an option letter")))?;
            if !letter.fits(num_choices) {
                return Err(ItemIssue::invalid(
                    "answer",
                    format!("letter {letter} has no matching choice ({num_choices} choices)"),
                ));
            }
            set.insert(letter);
        }
    }
    if set.is_empty() {
        return Err(ItemIssue::invalid("answer", "no option letter given"));
    }
    Ok(set)
}

fn parse_text_answer(value: &Value) -> Result<Vec<String>, ItemIssue> {
    let alternatives: Vec<String> = match value {
        Value::String(s) => vec![s.clone()],
        Value::Number(n) => vec![n.to_string()],
        Value::Array(entries) => entries
            .iter()
            .map(|e| match e {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                _ => Err(ItemIssue::invalid("answer", "alternatives must be strings")),
            })
            .collect::<Result<_, _>>()?,
        _ => return Err(ItemIssue::invalid("answer", "expected a string or a list of strings")),
    };
    if alternatives.is_empty() || alternatives.iter().any(|a| a.trim().is_empty()) {
        return Err(ItemIssue::invalid("answer", "answers must not be empty"));
    }
    Ok(alternatives)
}

/// Validate one raw record against the manifest, filling defaults and
/// canonicalizing the ground truth.
pub fn validate_item(record: &Map<String, Value>, manifest: &DatasetManifest) -> Result<EvalItem, ItemIssue> {
    let id = match record.get("id") {
        None | Some(Value::Null) => String::new(),
        Some(v) => id_string(v).ok_or_else(|| ItemIssue::invalid("id", "expected a string or integer"))?,
    };
    let instruction = match record.get("instruction") {
        None | Some(Value::Null) => return Err(ItemIssue::MissingField("instruction".into())),
        Some(Value::String(s)) if s.trim().is_empty() => {
            return Err(ItemIssue::invalid("instruction", "must not be empty"))
        }
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ItemIssue::invalid("instruction", "expected a string")),
    };
    let question_type = match optional_string(record, "question_type")? {
        Some(s) => s.parse::<QuestionType>().map_err(|e| ItemIssue::invalid("question_type", e))?,
        None => manifest
            .default_question_type
            .ok_or_else(|| ItemIssue::MissingField("question_type".into()))?,
    };
    let choices = match record.get("choices") {
        None | Some(Value::Null) => None,
        Some(v) => Some(parse_choices(v, "choices")?),
    };
    let answer_value = match record.get("answer") {
        None | Some(Value::Null) => return Err(ItemIssue::MissingField("answer".into())),
        Some(v) => v,
    };
    let answer = match question_type {
        QuestionType::SingleChoice | QuestionType::MultipleChoice => {
            let Some(choices) = &choices else {
                return Err(ItemIssue::MissingField("choices".into()));
            };
            let set = parse_letter_answer(answer_value, choices.len())?;
            if question_type == QuestionType::SingleChoice {
                if set.len() != 1 {
                    return Err(ItemIssue::invalid("answer", "single_choice takes exactly one letter"));
                }
                GroundTruth::Letter(*set.iter().next().unwrap())
            } else {
                GroundTruth::Letters(set)
            }
        }
        QuestionType::YesNo => {
            let token = match answer_value {
                Value::Bool(true) => Some(YesNo::Yes),
                Value::Bool(false) => Some(YesNo::No),
                Value::String(s) => YesNo::from_token(&normalize_text(s)),
                _ => None,
            };
            GroundTruth::YesNo(token.ok_or_else(|| ItemIssue::invalid("answer", "expected yes or no"))?)
        }
        QuestionType::FillBlank | QuestionType::FreeOpen => GroundTruth::Text(parse_text_answer(answer_value)?),
    };
    let few_shot = match record.get("few_shot") {
        None | Some(Value::Null) => manifest.few_shot.clone(),
        Some(v) => Some(parse_exemplars(v, "few_shot")?),
    };
    let images = match record.get("images") {
        None | Some(Value::Null) => None,
        Some(Value::Array(paths)) => Some(
            paths
                .iter()
                .map(|p| p.as_str().map(PathBuf::from).ok_or_else(|| ItemIssue::invalid("images", "expected file paths")))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(ItemIssue::invalid("images", "expected an array of file paths")),
    };
    let category = optional_string(record, "category")?;
    if category.as_deref() == Some(OVERALL_CATEGORY) {
        return Err(ItemIssue::invalid("category", format!("`{OVERALL_CATEGORY}` is reserved")));
    }
    let extra = record
        .iter()
        .filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(EvalItem {
        id,
        instruction,
        choices,
        answer,
        question_type,
        few_shot,
        cot_directive: optional_string(record, "cot_directive")?,
        images,
        category,
        language: optional_string(record, "language")?.or_else(|| manifest.language.clone()),
        domain: optional_string(record, "domain")?.or_else(|| manifest.domain.clone()),
        modality: optional_string(record, "modality")?.or_else(|| manifest.modality.clone()),
        extra,
    })
}

/// Serialize a dataset in the object form of the unified layout.
pub fn dataset_to_json(manifest: &DatasetManifest, items: &[EvalItem]) -> Value {
    let records: Vec<Value> = items.iter().map(|i| Value::Object(i.to_record())).collect();
    serde_json::json!({
        "meta": manifest,
        "data": records,
    })
}
