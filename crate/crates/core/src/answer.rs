//! Question formats and the canonical answer values shared by the dataset,
//! the filters and the estimators.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    SingleChoice,
    MultipleChoice,
    YesNo,
    FillBlank,
    FreeOpen,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::SingleChoice,
        QuestionType::MultipleChoice,
        QuestionType::YesNo,
        QuestionType::FillBlank,
        QuestionType::FreeOpen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::SingleChoice => "single_choice",
            QuestionType::MultipleChoice => "multiple_choice",
            QuestionType::YesNo => "yes_no",
            QuestionType::FillBlank => "fill_blank",
            QuestionType::FreeOpen => "free_open",
        }
    }

    /// Whether answers are option letters.
    pub fn is_choice(self) -> bool {
        matches!(self, QuestionType::SingleChoice | QuestionType::MultipleChoice)
    }

    /// Whether answers are free text.
    pub fn is_text(self) -> bool {
        matches!(self, QuestionType::FillBlank | QuestionType::FreeOpen)
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QuestionType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown question type `{s}`"))
    }
}

/// A positional option letter: choice 0 is `A`, choice 25 is `Z`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Letter(u8);

impl Letter {
    pub const MAX_CHOICES: usize = 26;

    pub fn from_index(index: usize) -> Option<Letter> {
        (index < Self::MAX_CHOICES).then_some(Letter(index as u8))
    }

    /// Accepts only `A..=Z`.
    pub fn from_char(c: char) -> Option<Letter> {
        c.is_ascii_uppercase().then(|| Letter(c as u8 - b'A'))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    /// True when this letter names one of `num_choices` options.
    pub fn fits(self, num_choices: usize) -> bool {
        self.index() < num_choices
    }
}

impl fmt::Debug for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl Serialize for Letter {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 4];
        serializer.serialize_str(self.as_char().encode_utf8(&mut buf))
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Letter::from_char(c)
                .ok_or_else(|| serde::de::Error::custom(format!("invalid option letter `{s}`"))),
            _ => Err(serde::de::Error::custom(format!("invalid option letter `{s}`"))),
        }
    }
}

pub type LetterSet = BTreeSet<Letter>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    /// Maps an already-normalized token onto yes/no.
    pub fn from_token(token: &str) -> Option<YesNo> {
        match token {
            "yes" | "true" | "correct" => Some(YesNo::Yes),
            "no" | "false" | "incorrect" => Some(YesNo::No),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            YesNo::Yes => "yes",
            YesNo::No => "no",
        }
    }
}

/// Canonical form of an answer pulled out of a model response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerValue {
    Letter(Letter),
    Letters(LetterSet),
    YesNo(YesNo),
    Text(String),
}

impl AnswerValue {
    /// Letter-set view for multiple-choice scoring; a lone letter is a singleton.
    pub fn letter_set(&self) -> Option<LetterSet> {
        match self {
            AnswerValue::Letter(l) => Some(std::iter::once(*l).collect()),
            AnswerValue::Letters(set) => Some(set.clone()),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            AnswerValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerValue::Letter(l) => write!(f, "{l}"),
            AnswerValue::Letters(set) => {
                let joined: Vec<String> = set.iter().map(Letter::to_string).collect();
                f.write_str(&joined.join(","))
            }
            AnswerValue::YesNo(v) => f.write_str(v.as_str()),
            AnswerValue::Text(s) => f.write_str(s),
        }
    }
}

/// Reference answer of a dataset item. Text answers may list accepted
/// alternatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Letter(Letter),
    Letters(LetterSet),
    YesNo(YesNo),
    Text(Vec<String>),
}

impl GroundTruth {
    pub fn letter_set(&self) -> Option<LetterSet> {
        match self {
            GroundTruth::Letter(l) => Some(std::iter::once(*l).collect()),
            GroundTruth::Letters(set) => Some(set.clone()),
            _ => None,
        }
    }
}
