//! Conversation and QA dataset formats.
//!
//! The native layout is
//! `{"conversation": {"sessions": [{"session_id", "turns": [{"speaker", "timestamp", "text"}]}]},
//!   "qa": [{"question", "answer", "category"}]}`.
//! [`from_locomo`] maps the LoCoMo release layout into it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::parse_timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    SingleHop,
    MultiHop,
    Temporal,
    OpenDomain,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::SingleHop,
        Category::MultiHop,
        Category::Temporal,
        Category::OpenDomain,
        Category::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::SingleHop => "single-hop",
            Category::MultiHop => "multi-hop",
            Category::Temporal => "temporal",
            Category::OpenDomain => "open-domain",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub timestamp: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub sessions: Vec<Session>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    #[serde(default = "default_category")]
    pub category: Category,
}

fn default_category() -> Category {
    Category::Other
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub conversation: Conversation,
    #[serde(default)]
    pub qa: Vec<QaItem>,
}

impl Dataset {
    /// Checks timestamps, non-empty turns and answers.
    pub fn check(&self) -> Result<()> {
        for s in &self.conversation.sessions {
            for (i, t) in s.turns.iter().enumerate() {
                parse_timestamp(&t.timestamp).map_err(|e| {
                    Error::invalid(format!("session {} turn {i}: {e}", s.session_id))
                })?;
                if t.text.trim().is_empty() {
                    return Err(Error::invalid(format!(
                        "session {} turn {i}: empty text",
                        s.session_id
                    )));
                }
            }
        }
        for (i, q) in self.qa.iter().enumerate() {
            if q.answer.trim().is_empty() {
                return Err(Error::invalid(format!("qa item {i}: empty answer")));
            }
        }
        Ok(())
    }

    /// Reads either the native layout or a LoCoMo file (a list of samples,
    /// or a single sample object).
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&raw)?;
        let ds = if is_locomo(&value) {
            from_locomo(&value)?
        } else {
            serde_json::from_value(value)?
        };
        ds.check()?;
        Ok(ds)
    }
}

fn is_locomo(v: &Value) -> bool {
    let sample = match v {
        Value::Array(items) => items.first(),
        other => Some(other),
    };
    sample
        .and_then(|s| s.get("conversation"))
        .is_some_and(|c| c.get("speaker_a").is_some())
}

fn locomo_category(code: i64) -> Option<Category> {
    match code {
        1 => Some(Category::MultiHop),
        2 => Some(Category::Temporal),
        3 => Some(Category::OpenDomain),
        4 => Some(Category::SingleHop),
        _ => None,
    }
}

fn answer_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Converts LoCoMo samples. Every turn of a session takes the session's
/// date; session ids are prefixed with the sample id. Adversarial items
/// (category 5) are dropped.
pub fn from_locomo(value: &Value) -> Result<Dataset> {
    let samples: Vec<&Value> = match value {
        Value::Array(items) => items.iter().collect(),
        other => vec![other],
    };
    let mut ds = Dataset::default();
    for (si, sample) in samples.iter().enumerate() {
        let sample_id = sample
            .get("sample_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("sample{si}"));
        let conv = sample
            .get("conversation")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::invalid(format!("{sample_id}: missing conversation")))?;
        let mut numbers: Vec<u32> = conv
            .keys()
            .filter_map(|k| k.strip_prefix("session_"))
            .filter_map(|rest| rest.parse().ok())
            .collect();
        numbers.sort_unstable();
        for n in numbers {
            let turns = conv[&format!("session_{n}")]
                .as_array()
                .ok_or_else(|| Error::invalid(format!("{sample_id}: session_{n} is not a list")))?;
            let date = conv
                .get(&format!("session_{n}_date_time"))
                .and_then(Value::as_str)
                .ok_or_else(|| Error::invalid(format!("{sample_id}: session_{n} has no date")))?;
            let ts = parse_timestamp(date)?
                .format("%Y-%m-%dT%H:%M:%S")
                .to_string();
            let turns = turns
                .iter()
                .filter_map(|t| {
                    let speaker = t.get("speaker")?.as_str()?.to_string();
                    let mut text = t.get("text")?.as_str()?.to_string();
                    if let Some(cap) = t.get("blip_caption").and_then(Value::as_str) {
                        text = format!("{text} [shares a photo of {cap}]");
                    }
                    (!text.trim().is_empty()).then(|| Turn {
                        speaker,
                        timestamp: ts.clone(),
                        text,
                    })
                })
                .collect();
            ds.conversation.sessions.push(Session {
                session_id: format!("{sample_id}-s{n:02}"),
                turns,
            });
        }
        for q in sample
            .get("qa")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let Some(category) = q
                .get("category")
                .and_then(Value::as_i64)
                .and_then(locomo_category)
            else {
                continue;
            };
            let (Some(question), Some(answer)) = (
                q.get("question").and_then(Value::as_str),
                q.get("answer").and_then(answer_text),
            ) else {
                continue;
            };
            ds.qa.push(QaItem {
                question: question.to_string(),
                answer,
                category,
            });
        }
    }
    Ok(ds)
}

/// The bundled three-session fixture with planted multi-fact questions.
pub const SYNTHETIC_FIXTURE: &str = include_str!("../fixtures/synthetic_dataset.json");

pub fn synthetic_fixture() -> Dataset {
    let ds: Dataset = serde_json::from_str(SYNTHETIC_FIXTURE).expect("bundled fixture parses");
    ds.check().expect("bundled fixture is valid");
    ds
}
