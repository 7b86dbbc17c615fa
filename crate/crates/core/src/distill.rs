//! Distillation of the raw stream into episodes, semantic facts and theme
//! summaries.

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chat::{parse_json_object, ChatClient};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::model::{
    normalize_statement, parse_timestamp, Episode, Message, SemanticDraft, Timestamp,
};
use crate::prompts;
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDecision {
    pub split: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub title: String,
    pub content: String,
    pub timestamp: Timestamp,
}

/// Text generation capabilities used to build the hierarchy.
pub trait GenerationProvider: Send + Sync {
    fn id(&self) -> &str;
    fn boundary_decision(
        &self,
        history: &[Message],
        incoming: &[Message],
    ) -> Result<BoundaryDecision>;
    fn episode_record(&self, block: &[Message], reason: &str) -> Result<EpisodeRecord>;
    fn semantic_statements(&self, episodes: &[Episode]) -> Result<Vec<String>>;
    fn theme_summary(&self, statements: &[String]) -> Result<String>;
}

/// Calls `f`, and once more if it fails with a provider error.
pub fn with_retry<T>(mut f: impl FnMut() -> Result<T>) -> Result<T> {
    match f() {
        Err(e) if e.is_provider() => f(),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    pub gap_minutes: i64,
    pub max_episode_messages: usize,
    /// Split when the incoming/episode content-word overlap drops below this.
    pub min_overlap: f64,
    /// Incoming text with fewer content words is never a topic shift.
    pub min_topic_words: usize,
    pub summary_words: usize,
    pub summary_chars: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            gap_minutes: 30,
            max_episode_messages: 12,
            min_overlap: 0.3,
            min_topic_words: 3,
            summary_words: 5,
            summary_chars: 80,
        }
    }
}

const TRANSIENT_PHRASES: &[&str] = &[
    "thanked",
    "thank you",
    "thanks",
    "appreciated",
    "appreciate",
    "was confused",
    "conversation was productive",
];

/// Deterministic, offline stand-in for the generation model.
#[derive(Debug, Clone, Default)]
pub struct RuleBasedProvider {
    pub config: RuleConfig,
}

impl RuleBasedProvider {
    pub fn new(config: RuleConfig) -> Self {
        RuleBasedProvider { config }
    }
}

/// Overlap coefficient of the content-word sets, `|A ∩ B| / min(|A|, |B|)`.
/// Returns `None` when either side has no content words.
pub fn word_overlap(a: &str, b: &str) -> Option<f64> {
    let a: HashSet<String> = text::content_words(a).into_iter().collect();
    let b: HashSet<String> = text::content_words(b).into_iter().collect();
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let common = a.intersection(&b).count();
    Some(common as f64 / a.len().min(b.len()) as f64)
}

fn render_line(m: &Message) -> String {
    let t = m.text.trim();
    if t.ends_with(['.', '!', '?']) {
        format!("{}: {}", m.speaker, t)
    } else {
        format!("{}: {}.", m.speaker, t)
    }
}

/// Splits text into sentences at `.`, `!` or `?` followed by whitespace.
fn sentences(content: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = content.chars().peekable();
    while let Some(c) = chars.next() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = cur.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        }
    }
    let s = cur.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

/// Splits an optional `Speaker: ` prefix off a sentence.
fn speaker_prefix(sentence: &str) -> (Option<&str>, &str) {
    if let Some((head, body)) = sentence.split_once(": ") {
        let head_ok = !head.is_empty()
            && head.chars().count() <= 40
            && head.chars().next().is_some_and(char::is_uppercase)
            && head.split_whitespace().count() <= 3;
        if head_ok {
            return (Some(head), body);
        }
    }
    (None, sentence)
}

/// True when the body mentions a number or a capitalised word that is not the
/// sentence opener or the pronoun "I".
fn is_specific(body: &str) -> bool {
    if body.chars().any(|c| c.is_ascii_digit()) {
        return true;
    }
    body.split_whitespace().skip(1).any(|w| {
        let w = w.trim_matches(|c: char| !c.is_alphanumeric());
        let pronoun = w == "I" || w.starts_with("I'");
        !pronoun && w.chars().next().is_some_and(char::is_uppercase)
    })
}

fn is_transient(sentence: &str) -> bool {
    let lower = sentence.to_lowercase();
    TRANSIENT_PHRASES.iter().any(|p| lower.contains(p))
}

fn truncate_words(s: &str, max_chars: usize) -> String {
    if s.chars().count() <= max_chars {
        return s.to_string();
    }
    let mut out = String::new();
    for w in s.split_whitespace() {
        let extra = if out.is_empty() { 0 } else { 1 };
        if out.chars().count() + extra + w.chars().count() > max_chars {
            break;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(w);
    }
    if out.is_empty() {
        out = s.chars().take(max_chars).collect();
    }
    out
}

/// Most frequent content words, ties broken alphabetically.
fn top_words(texts: &[String], n: usize) -> Vec<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for w in text::content_words(t) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(n).map(|(w, _)| w).collect()
}

impl GenerationProvider for RuleBasedProvider {
    fn id(&self) -> &str {
        "rule-based"
    }

    fn boundary_decision(
        &self,
        history: &[Message],
        incoming: &[Message],
    ) -> Result<BoundaryDecision> {
        let (Some(last), Some(next)) = (history.last(), incoming.first()) else {
            return Ok(BoundaryDecision {
                split: false,
                reason: "first message of the episode".into(),
            });
        };
        let gap = next.timestamp - last.timestamp;
        if gap > Duration::minutes(self.config.gap_minutes) {
            return Ok(BoundaryDecision {
                split: true,
                reason: format!("time gap of {} minutes", gap.num_minutes()),
            });
        }
        if history.len() >= self.config.max_episode_messages {
            return Ok(BoundaryDecision {
                split: true,
                reason: format!("episode reached {} messages", history.len()),
            });
        }
        let running: String = history
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let new: String = incoming
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let substantive = text::content_words(&new)
            .iter()
            .collect::<HashSet<_>>()
            .len()
            >= self.config.min_topic_words;
        if let Some(o) = word_overlap(&new, &running).filter(|_| substantive) {
            if o < self.config.min_overlap {
                return Ok(BoundaryDecision {
                    split: true,
                    reason: format!("topic overlap {o:.2} below {}", self.config.min_overlap),
                });
            }
        }
        Ok(BoundaryDecision {
            split: false,
            reason: "same topic".into(),
        })
    }

    fn episode_record(&self, block: &[Message], _reason: &str) -> Result<EpisodeRecord> {
        let timestamp = block
            .iter()
            .map(|m| m.timestamp)
            .min()
            .ok_or_else(|| Error::invalid("empty block"))?;
        let mut speakers: Vec<&str> = Vec::new();
        for m in block {
            if !speakers.contains(&m.speaker.as_str()) {
                speakers.push(&m.speaker);
            }
        }
        let texts: Vec<String> = block.iter().map(|m| m.text.clone()).collect();
        let topics = top_words(&texts, 3);
        let title = format!(
            "{} on {}: {}",
            speakers.join(" and "),
            timestamp.format("%Y-%m-%d %H:%M"),
            topics.join(", ")
        );
        let content = block.iter().map(render_line).collect::<Vec<_>>().join(" ");
        Ok(EpisodeRecord {
            title,
            content,
            timestamp,
        })
    }

    fn semantic_statements(&self, episodes: &[Episode]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for ep in episodes {
            let mut speaker: Option<String> = None;
            for s in sentences(&ep.content) {
                let (prefix, body) = speaker_prefix(&s);
                if let Some(p) = prefix {
                    speaker = Some(p.to_string());
                }
                if is_transient(body) || !is_specific(body) {
                    continue;
                }
                let statement = match (prefix, &speaker) {
                    (None, Some(sp)) => format!("{sp}: {body}"),
                    _ => s.clone(),
                };
                out.push(statement);
            }
        }
        Ok(out)
    }

    fn theme_summary(&self, statements: &[String]) -> Result<String> {
        match statements {
            [] => Err(Error::invalid("no statements to summarise")),
            [one] => Ok(truncate_words(one.trim(), self.config.summary_chars)),
            many => {
                let words = top_words(many, self.config.summary_words);
                if words.is_empty() {
                    Ok(truncate_words(many[0].trim(), self.config.summary_chars))
                } else {
                    Ok(words.join(", "))
                }
            }
        }
    }
}

/// Generation provider backed by a chat-completion service.
pub struct RemoteGenerationProvider {
    client: ChatClient,
    id: String,
}

impl RemoteGenerationProvider {
    pub fn new(client: ChatClient) -> Self {
        let id = format!("chat:{}", client.model());
        RemoteGenerationProvider { client, id }
    }
}

fn format_messages(ms: &[Message]) -> String {
    ms.iter()
        .map(|m| {
            format!(
                "[{}] {}: {}",
                m.timestamp.format("%Y-%m-%dT%H:%M"),
                m.speaker,
                m.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn string_field(map: &serde_json::Map<String, Value>, key: &str, raw: &str) -> Result<String> {
    map.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| {
            Error::protocol(
                0..1,
                format!("missing string field `{key}`"),
                Some(raw.into()),
            )
        })
}

impl GenerationProvider for RemoteGenerationProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn boundary_decision(
        &self,
        history: &[Message],
        incoming: &[Message],
    ) -> Result<BoundaryDecision> {
        let prompt = prompts::render(
            prompts::BOUNDARY,
            &[
                ("history", &format_messages(history)),
                ("incoming", &format_messages(incoming)),
            ],
        );
        let reply = self.client.complete(&prompt, false)?;
        let map = parse_json_object(&reply.content)?;
        let split = map.get("split").and_then(Value::as_bool).ok_or_else(|| {
            Error::protocol(0..1, "missing boolean `split`", Some(reply.content.clone()))
        })?;
        let reason = string_field(&map, "reason", &reply.content)?;
        Ok(BoundaryDecision { split, reason })
    }

    fn episode_record(&self, block: &[Message], reason: &str) -> Result<EpisodeRecord> {
        let prompt = prompts::render(
            prompts::EPISODE,
            &[
                ("conversation", &format_messages(block)),
                ("reason", reason),
            ],
        );
        let reply = self.client.complete(&prompt, false)?;
        let map = parse_json_object(&reply.content)?;
        let title = string_field(&map, "title", &reply.content)?;
        let content = string_field(&map, "content", &reply.content)?;
        let raw_ts = string_field(&map, "timestamp", &reply.content)?;
        let timestamp = parse_timestamp(&raw_ts).map_err(|_| {
            Error::protocol(
                0..1,
                format!("timestamp {raw_ts:?} is not ISO-8601"),
                Some(reply.content.clone()),
            )
        })?;
        if title.trim().is_empty() || content.trim().is_empty() {
            return Err(Error::protocol(
                0..1,
                "empty title or content",
                Some(reply.content),
            ));
        }
        Ok(EpisodeRecord {
            title,
            content,
            timestamp,
        })
    }

    fn semantic_statements(&self, episodes: &[Episode]) -> Result<Vec<String>> {
        let listing = episodes
            .iter()
            .map(|e| {
                format!(
                    "[{}] {}\n{}",
                    e.timestamp.format("%Y-%m-%dT%H:%M"),
                    e.title,
                    e.content
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let prompt = prompts::render(prompts::SEMANTIC, &[("episodes", &listing)]);
        let reply = self.client.complete(&prompt, false)?;
        let map = parse_json_object(&reply.content)?;
        let arr = map
            .get("statements")
            .and_then(Value::as_array)
            .ok_or_else(|| {
                Error::protocol(
                    0..1,
                    "missing array `statements`",
                    Some(reply.content.clone()),
                )
            })?;
        arr.iter()
            .map(|v| {
                v.as_str().map(str::to_string).ok_or_else(|| {
                    Error::protocol(0..1, "non-string statement", Some(reply.content.clone()))
                })
            })
            .collect()
    }

    fn theme_summary(&self, statements: &[String]) -> Result<String> {
        let listing = statements
            .iter()
            .map(|s| format!("- {s}"))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = prompts::render(prompts::THEME, &[("statements", &listing)]);
        let reply = self.client.complete(&prompt, false)?;
        let summary = reply.content.trim().to_string();
        if summary.is_empty() {
            return Err(Error::protocol(
                0..1,
                "empty theme summary",
                Some(reply.content),
            ));
        }
        Ok(summary)
    }
}

// ----- operations -----

/// Decides whether `incoming` opens a new episode. An empty history never
/// splits, whatever the provider would say.
pub fn detect_boundary(
    provider: &dyn GenerationProvider,
    history: &[Message],
    incoming: &[Message],
) -> Result<BoundaryDecision> {
    if incoming.is_empty() {
        return Err(Error::invalid("boundary detection needs incoming messages"));
    }
    if history.is_empty() {
        return Ok(BoundaryDecision {
            split: false,
            reason: "first message of the episode".into(),
        });
    }
    with_retry(|| provider.boundary_decision(history, incoming))
}

/// Cuts one session's messages into episode blocks, with the reason that
/// closed each block.
pub fn segment(
    provider: &dyn GenerationProvider,
    messages: &[Message],
) -> Result<Vec<(Vec<Message>, String)>> {
    let mut blocks = Vec::new();
    let mut current: Vec<Message> = Vec::new();
    let mut reason = String::from("end of stream");
    for m in messages {
        let decision = detect_boundary(provider, &current, std::slice::from_ref(m))?;
        if decision.split {
            blocks.push((std::mem::take(&mut current), decision.reason.clone()));
        }
        reason = decision.reason;
        current.push(m.clone());
    }
    if !current.is_empty() {
        blocks.push((current, reason));
    }
    Ok(blocks)
}

/// An episode ready for insertion into the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDraft {
    pub title: String,
    pub content: String,
    pub timestamp: Timestamp,
    pub message_ids: Vec<String>,
    pub embedding: Vec<f64>,
}

pub fn build_episode(
    provider: &dyn GenerationProvider,
    embedder: &dyn EmbeddingProvider,
    block: &[Message],
    reason: &str,
) -> Result<EpisodeDraft> {
    let first = block
        .first()
        .ok_or_else(|| Error::invalid("episode block is empty"))?;
    if block.iter().any(|m| m.session_id != first.session_id) {
        return Err(Error::invalid("episode block spans sessions"));
    }
    let rec = with_retry(|| provider.episode_record(block, reason))?;
    let embedding = embedder.embed(&format!("{}\n{}", rec.title, rec.content))?;
    Ok(EpisodeDraft {
        title: rec.title,
        content: rec.content,
        timestamp: rec.timestamp,
        message_ids: block.iter().map(|m| m.id.clone()).collect(),
        embedding,
    })
}

/// Extracts facts episode by episode; identical statements (after
/// normalisation) collapse into one draft citing every source episode.
pub fn extract_semantics(
    provider: &dyn GenerationProvider,
    embedder: &dyn EmbeddingProvider,
    episodes: &[Episode],
) -> Result<Vec<SemanticDraft>> {
    if episodes.is_empty() {
        return Err(Error::invalid("no episodes to extract from"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_key: BTreeMap<String, (String, Vec<String>)> = BTreeMap::new();
    for ep in episodes {
        let statements = with_retry(|| provider.semantic_statements(std::slice::from_ref(ep)))?;
        for s in statements {
            let s = s.trim().to_string();
            let key = normalize_statement(&s);
            if key.is_empty() {
                continue;
            }
            let entry = by_key.entry(key.clone()).or_insert_with(|| {
                order.push(key.clone());
                (s.clone(), Vec::new())
            });
            if !entry.1.contains(&ep.id) {
                entry.1.push(ep.id.clone());
            }
        }
    }
    let statements: Vec<String> = order.iter().map(|k| by_key[k].0.clone()).collect();
    let embeddings = if statements.is_empty() {
        Vec::new()
    } else {
        embedder.embed_batch(&statements)?
    };
    Ok(order
        .iter()
        .zip(embeddings)
        .map(|(k, embedding)| {
            let (statement, sources) = by_key[k].clone();
            SemanticDraft {
                statement,
                source_episode_ids: sources,
                embedding,
            }
        })
        .collect())
}

pub fn summarize_theme(provider: &dyn GenerationProvider, statements: &[String]) -> Result<String> {
    if statements.is_empty() {
        return Err(Error::invalid("no statements to summarise"));
    }
    let s = with_retry(|| provider.theme_summary(statements))?;
    if s.trim().is_empty() {
        return Err(Error::protocol(0..1, "empty theme summary", None));
    }
    Ok(s)
}
