//! Prompt assembly: instruction, option block, few-shot exemplars and the
//! chain-of-thought cue are concatenated into a conversation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::Letter;
use crate::dataset::{EvalItem, FewShotExemplar};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub question_prefix: String,
    /// Must contain `{letter}` and `{text}`.
    pub choice_line_format: String,
    pub answer_prefix: String,
    pub exemplar_separator: String,
    pub cot_suffix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system_text: None,
            question_prefix: String::new(),
            choice_line_format: "{letter}. {text}".to_string(),
            answer_prefix: "Answer:".to_string(),
            exemplar_separator: "\n\n".to_string(),
            cot_suffix: "Let's think step by step.".to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        for placeholder in ["{letter}", "{text}"] {
            if !self.choice_line_format.contains(placeholder) {
                return Err(PromptError::InvalidTemplate(format!(
                    "choice_line_format must contain {placeholder}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<PathBuf>,
}

/// A conversation ready for a backend. The last turn is always the user's
/// question; exemplars precede it as user/assistant pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    /// Originating item, carried for cache keys and scripted backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub turns: Vec<Turn>,
}

impl PromptBundle {
    pub fn final_turn_index(&self) -> usize {
        self.turns.len().saturating_sub(1)
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
    }

    pub fn attachments(&self) -> impl Iterator<Item = &PathBuf> {
        self.turns.iter().flat_map(|t| t.attachments.iter())
    }

    /// Plain-text rendering for completion-style scoring: system text, then
    /// each exemplar question joined to its answer by a space, then the
    /// final question, separated by `separator`.
    pub fn flatten(&self, separator: &str) -> String {
        let mut parts: Vec<String> = Vec::new();
        if let Some(system) = &self.system_text {
            parts.push(system.clone());
        }
        let mut turns = self.turns.iter().peekable();
        while let Some(turn) = turns.next() {
            match (turn.role, turns.peek()) {
                (Role::User, Some(next)) if next.role == Role::Assistant => {
                    parts.push(format!("{} {}", turn.text, next.text));
                    turns.next();
                }
                _ => parts.push(turn.text.clone()),
            }
        }
        parts.join(separator)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("choice list is empty")]
    EmptyChoices,
    #[error("{0} choices exceed the 26 available option letters")]
    ChoiceOverflow(usize),
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
}

pub fn render_choice_block(choices: &[String], template: &PromptTemplate) -> Result<String, PromptError> {
    if choices.is_empty() {
        return Err(PromptError::EmptyChoices);
    }
    if choices.len() > Letter::MAX_CHOICES {
        return Err(PromptError::ChoiceOverflow(choices.len()));
    }
    let lines: Vec<String> = choices
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let letter = Letter::from_index(i).expect("bounded above");
            template
                .choice_line_format
                .replace("{letter}", &letter.to_string())
                .replace("{text}", text)
        })
        .collect();
    Ok(lines.join("\n"))
}

fn question_text(
    instruction: &str,
    choices: Option<&[String]>,
    cot: Option<&str>,
    template: &PromptTemplate,
) -> Result<String, PromptError> {
    let mut parts = vec![format!("{}{}", template.question_prefix, instruction)];
    if let Some(choices) = choices {
        parts.push(render_choice_block(choices, template)?);
    }
    if let Some(cot) = cot {
        parts.push(cot.to_string());
    }
    if !template.answer_prefix.is_empty() {
        parts.push(template.answer_prefix.clone());
    }
    Ok(parts.join("\n"))
}

fn exemplar_turns(exemplar: &FewShotExemplar, template: &PromptTemplate) -> Result<[Turn; 2], PromptError> {
    let question = question_text(&exemplar.instruction, exemplar.choices.as_deref(), None, template)?;
    Ok([
        Turn {
            role: Role::User,
            text: question,
            attachments: Vec::new(),
        },
        Turn {
            role: Role::Assistant,
            text: exemplar.answer.clone(),
            attachments: Vec::new(),
        },
    ])
}

/// Render one item. Asking for more shots than the item has exemplars
/// truncates to what is available and logs a warning.
pub fn render_prompt(
    item: &EvalItem,
    template: &PromptTemplate,
    use_cot: bool,
    num_shots: usize,
) -> Result<PromptBundle, PromptError> {
    template.validate()?;
    let exemplars = item.few_shot.as_deref().unwrap_or_default();
    if num_shots > exemplars.len() {
        tracing::warn!(
            item = %item.id,
            requested = num_shots,
            available = exemplars.len(),
            "truncating few-shot exemplars"
        );
    }
    let mut turns = Vec::with_capacity(2 * num_shots.min(exemplars.len()) + 1);
    for exemplar in exemplars.iter().take(num_shots) {
        turns.extend(exemplar_turns(exemplar, template)?);
    }
    let cot = use_cot.then(|| item.cot_directive.as_deref().unwrap_or(&template.cot_suffix));
    turns.push(Turn {
        role: Role::User,
        text: question_text(&item.instruction, item.choices.as_deref(), cot, template)?,
        attachments: item.images.clone().unwrap_or_default(),
    });
    Ok(PromptBundle {
        item_id: Some(item.id.clone()),
        system_text: template.system_text.clone(),
        turns,
    })
}
