//! The four-level memory hierarchy: messages, episodes, semantic nodes and
//! themes, with the cross-level links between them.
//!
//! All mutation goes through [`MemoryHierarchy`] methods, each of which leaves
//! the link structure consistent; [`MemoryHierarchy::validate`] re-derives
//! every invariant from scratch and reports what does not hold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::embedding::{centroid, l2_norm};
use crate::error::{Error, Result};

pub type Timestamp = NaiveDateTime;

/// Tolerance for stored centroids and unit norms.
pub const CENTROID_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub session_id: String,
    pub speaker: String,
    pub timestamp: Timestamp,
    pub text: String,
    /// Set once the message has been distilled into an episode.
    pub episode_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub title: String,
    pub content: String,
    pub timestamp: Timestamp,
    pub message_ids: Vec<String>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticNode {
    pub id: String,
    pub statement: String,
    pub source_episode_ids: Vec<String>,
    pub theme_id: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    pub id: String,
    pub summary: String,
    pub member_ids: Vec<String>,
    pub centroid: Vec<f64>,
}

impl Theme {
    pub fn size(&self) -> usize {
        self.member_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReassignCause {
    Attach,
    Split,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reassignment {
    pub semantic_id: String,
    pub old_theme: Option<String>,
    pub new_theme: String,
    pub cause: ReassignCause,
}

/// Assignment of semantic nodes to themes, the object the guidance function
/// scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ThemePartition {
    pub assignments: BTreeMap<String, String>,
    /// Theme id to member count, in theme id order.
    pub sizes: BTreeMap<String, usize>,
}

impl ThemePartition {
    pub fn theme_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn node_count(&self) -> usize {
        self.assignments.len()
    }

    pub fn size_vector(&self) -> Vec<usize> {
        self.sizes.values().copied().collect()
    }
}

/// A semantic fact before it has been placed in a theme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDraft {
    pub statement: String,
    pub source_episode_ids: Vec<String>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    EmptyText,
    SessionOrder,
    SessionIndex,
    DanglingMessageLink,
    DanglingEpisodeLink,
    DanglingThemeLink,
    DanglingSemanticLink,
    MessageEpisodeMismatch,
    EmptyEpisode,
    CrossSessionEpisode,
    NonContiguousEpisode,
    EmptySources,
    ThemeMembershipMismatch,
    DuplicateMembership,
    EmptyTheme,
    StaleCentroid,
    ThemeOverCap,
    BadEmbedding,
    PartitionCount,
    StaleGraph,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::EmptyText => "empty message text",
            ViolationKind::SessionOrder => "session timestamps decrease",
            ViolationKind::SessionIndex => "session index mismatch",
            ViolationKind::DanglingMessageLink => "dangling message link",
            ViolationKind::DanglingEpisodeLink => "dangling episode link",
            ViolationKind::DanglingThemeLink => "dangling theme link",
            ViolationKind::DanglingSemanticLink => "dangling semantic link",
            ViolationKind::MessageEpisodeMismatch => "message/episode link mismatch",
            ViolationKind::EmptyEpisode => "episode without messages",
            ViolationKind::CrossSessionEpisode => "episode spans sessions",
            ViolationKind::NonContiguousEpisode => "episode messages not contiguous",
            ViolationKind::EmptySources => "semantic without source episode",
            ViolationKind::ThemeMembershipMismatch => "theme membership mismatch",
            ViolationKind::DuplicateMembership => "semantic in several themes",
            ViolationKind::EmptyTheme => "empty theme",
            ViolationKind::StaleCentroid => "stale centroid",
            ViolationKind::ThemeOverCap => "theme over cap",
            ViolationKind::BadEmbedding => "bad embedding",
            ViolationKind::PartitionCount => "partition count mismatch",
            ViolationKind::StaleGraph => "stale graph",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub id: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.kind.label(), self.id)?;
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct IdCounters {
    message: u64,
    episode: u64,
    semantic: u64,
    theme: u64,
}

/// The memory store. Ids are generated here from per-level counters, so
/// replaying the same inputs yields the same ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryHierarchy {
    dim: usize,
    messages: BTreeMap<String, Message>,
    /// Message ids per session in insertion order.
    sessions: BTreeMap<String, Vec<String>>,
    episodes: BTreeMap<String, Episode>,
    semantics: BTreeMap<String, SemanticNode>,
    themes: BTreeMap<String, Theme>,
    reassignment_log: Vec<Reassignment>,
    counters: IdCounters,
    /// Largest admissible theme, when restructuring enforces one.
    theme_cap: Option<usize>,
}

fn make_id(prefix: &str, n: u64) -> String {
    format!("{prefix}-{n:08}")
}

impl MemoryHierarchy {
    pub fn new(dim: usize) -> Self {
        MemoryHierarchy {
            dim,
            messages: BTreeMap::new(),
            sessions: BTreeMap::new(),
            episodes: BTreeMap::new(),
            semantics: BTreeMap::new(),
            themes: BTreeMap::new(),
            reassignment_log: Vec::new(),
            counters: IdCounters::default(),
            theme_cap: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theme_cap(&self) -> Option<usize> {
        self.theme_cap
    }

    pub fn set_theme_cap(&mut self, cap: Option<usize>) {
        self.theme_cap = cap;
    }

    pub fn messages(&self) -> &BTreeMap<String, Message> {
        &self.messages
    }

    pub fn sessions(&self) -> &BTreeMap<String, Vec<String>> {
        &self.sessions
    }

    pub fn episodes(&self) -> &BTreeMap<String, Episode> {
        &self.episodes
    }

    pub fn semantics(&self) -> &BTreeMap<String, SemanticNode> {
        &self.semantics
    }

    pub fn themes(&self) -> &BTreeMap<String, Theme> {
        &self.themes
    }

    pub fn reassignment_log(&self) -> &[Reassignment] {
        &self.reassignment_log
    }

    pub fn message(&self, id: &str) -> Result<&Message> {
        self.messages
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn episode(&self, id: &str) -> Result<&Episode> {
        self.episodes
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn semantic(&self, id: &str) -> Result<&SemanticNode> {
        self.semantics
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn theme(&self, id: &str) -> Result<&Theme> {
        self.themes
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.semantics.is_empty()
    }

    pub fn partition(&self) -> ThemePartition {
        ThemePartition {
            assignments: self
                .semantics
                .values()
                .map(|s| (s.id.clone(), s.theme_id.clone()))
                .collect(),
            sizes: self
                .themes
                .values()
                .map(|t| (t.id.clone(), t.size()))
                .collect(),
        }
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if (l2_norm(v) - 1.0).abs() > CENTROID_TOLERANCE {
            return Err(Error::invalid("embedding is not unit-normalised"));
        }
        Ok(())
    }

    // ----- messages and episodes -----

    pub fn add_message(
        &mut self,
        session_id: &str,
        speaker: &str,
        timestamp: Timestamp,
        text: &str,
    ) -> Result<String> {
        if text.trim().is_empty() {
            return Err(Error::invalid("message text is empty"));
        }
        if let Some(last) = self
            .sessions
            .get(session_id)
            .and_then(|ids| ids.last())
            .map(|id| &self.messages[id])
        {
            if timestamp < last.timestamp {
                return Err(Error::invalid(format!(
                    "message at {timestamp} precedes {} in session {session_id}",
                    last.timestamp
                )));
            }
        }
        self.counters.message += 1;
        let id = make_id("msg", self.counters.message);
        self.messages.insert(
            id.clone(),
            Message {
                id: id.clone(),
                session_id: session_id.to_string(),
                speaker: speaker.to_string(),
                timestamp,
                text: text.to_string(),
                episode_id: None,
            },
        );
        self.sessions
            .entry(session_id.to_string())
            .or_default()
            .push(id.clone());
        Ok(id)
    }

    /// Registers an episode over a contiguous, not yet distilled block of one
    /// session's messages.
    pub fn add_episode(
        &mut self,
        title: &str,
        content: &str,
        timestamp: Timestamp,
        message_ids: &[String],
        embedding: Vec<f64>,
    ) -> Result<String> {
        self.check_vector(&embedding)?;
        let first = message_ids
            .first()
            .ok_or_else(|| Error::invalid("episode needs at least one message"))?;
        let session = self.message(first)?.session_id.clone();
        let order = &self.sessions[&session];
        let start = order
            .iter()
            .position(|m| m == first)
            .expect("session index holds every message");
        for (offset, mid) in message_ids.iter().enumerate() {
            let msg = self.message(mid)?;
            if msg.session_id != session {
                return Err(Error::invalid("episode block spans sessions"));
            }
            if order.get(start + offset) != Some(mid) {
                return Err(Error::invalid("episode block is not contiguous"));
            }
            if let Some(ep) = &msg.episode_id {
                return Err(Error::invalid(format!("message {mid} already in {ep}")));
            }
        }
        self.counters.episode += 1;
        let id = make_id("ep", self.counters.episode);
        for mid in message_ids {
            self.messages.get_mut(mid).expect("checked").episode_id = Some(id.clone());
        }
        self.episodes.insert(
            id.clone(),
            Episode {
                id: id.clone(),
                title: title.to_string(),
                content: content.to_string(),
                timestamp,
                message_ids: message_ids.to_vec(),
                embedding,
            },
        );
        Ok(id)
    }

    /// Messages of `session_id` not yet assigned to an episode, in order.
    pub fn undistilled(&self, session_id: &str) -> Vec<&Message> {
        self.sessions
            .get(session_id)
            .map(|ids| {
                ids.iter()
                    .map(|id| &self.messages[id])
                    .filter(|m| m.episode_id.is_none())
                    .collect()
            })
            .unwrap_or_default()
    }

    // ----- semantics and themes -----

    /// Finds an existing semantic node with the same normalised statement.
    pub fn find_statement(&self, statement: &str) -> Option<&SemanticNode> {
        let key = normalize_statement(statement);
        self.semantics
            .values()
            .find(|s| normalize_statement(&s.statement) == key)
    }

    pub fn add_semantic_source(&mut self, semantic_id: &str, episode_id: &str) -> Result<()> {
        self.episode(episode_id)?;
        let node = self
            .semantics
            .get_mut(semantic_id)
            .ok_or_else(|| Error::UnknownId(semantic_id.to_string()))?;
        if !node.source_episode_ids.iter().any(|e| e == episode_id) {
            node.source_episode_ids.push(episode_id.to_string());
        }
        Ok(())
    }

    /// Inserts a new semantic node, either into `theme` or into a freshly
    /// created singleton theme. Returns `(semantic_id, theme_id)`.
    pub fn insert_semantic(
        &mut self,
        draft: SemanticDraft,
        theme: Option<&str>,
        new_theme_summary: &str,
    ) -> Result<(String, String)> {
        self.check_vector(&draft.embedding)?;
        if draft.source_episode_ids.is_empty() {
            return Err(Error::invalid("semantic draft cites no episode"));
        }
        for e in &draft.source_episode_ids {
            self.episode(e)?;
        }
        if let Some(t) = theme {
            self.theme(t)?;
        }
        self.counters.semantic += 1;
        let sid = make_id("sem", self.counters.semantic);
        let tid = match theme {
            Some(t) => t.to_string(),
            None => {
                let tid = self.next_theme_id();
                self.themes.insert(
                    tid.clone(),
                    Theme {
                        id: tid.clone(),
                        summary: new_theme_summary.to_string(),
                        member_ids: Vec::new(),
                        centroid: draft.embedding.clone(),
                    },
                );
                tid
            }
        };
        self.semantics.insert(
            sid.clone(),
            SemanticNode {
                id: sid.clone(),
                statement: draft.statement,
                source_episode_ids: draft.source_episode_ids,
                theme_id: tid.clone(),
                embedding: draft.embedding,
            },
        );
        self.themes
            .get_mut(&tid)
            .expect("theme exists")
            .member_ids
            .push(sid.clone());
        self.refresh_centroid(&tid)?;
        self.reassignment_log.push(Reassignment {
            semantic_id: sid.clone(),
            old_theme: None,
            new_theme: tid.clone(),
            cause: ReassignCause::Attach,
        });
        Ok((sid, tid))
    }

    fn next_theme_id(&mut self) -> String {
        self.counters.theme += 1;
        make_id("th", self.counters.theme)
    }

    /// Recomputes a theme's centroid from its members.
    pub fn refresh_centroid(&mut self, theme_id: &str) -> Result<()> {
        let members = &self.theme(theme_id)?.member_ids;
        let c = centroid(
            members
                .iter()
                .map(|m| self.semantics[m].embedding.as_slice()),
            self.dim,
        );
        self.themes.get_mut(theme_id).expect("checked").centroid = c;
        Ok(())
    }

    pub fn set_theme_summary(&mut self, theme_id: &str, summary: String) -> Result<()> {
        self.themes
            .get_mut(theme_id)
            .ok_or_else(|| Error::UnknownId(theme_id.to_string()))?
            .summary = summary;
        Ok(())
    }

    /// Splits a theme into `groups`, which must partition its members. The
    /// first group keeps the original theme id; the others move to new
    /// themes and are logged as split reassignments. Returns all resulting
    /// theme ids, original first.
    pub fn split_theme(&mut self, theme_id: &str, groups: &[Vec<String>]) -> Result<Vec<String>> {
        let theme = self.theme(theme_id)?;
        if groups.len() < 2 || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::invalid("split needs at least two non-empty groups"));
        }
        let current: BTreeSet<&String> = theme.member_ids.iter().collect();
        let proposed: Vec<&String> = groups.iter().flatten().collect();
        let proposed_set: BTreeSet<&String> = proposed.iter().copied().collect();
        if proposed.len() != proposed_set.len() || proposed_set != current {
            return Err(Error::invalid("split groups do not partition the theme"));
        }
        let summary = theme.summary.clone();
        let mut ids = vec![theme_id.to_string()];
        self.themes.get_mut(theme_id).expect("checked").member_ids = groups[0].clone();
        for group in &groups[1..] {
            let tid = self.next_theme_id();
            self.themes.insert(
                tid.clone(),
                Theme {
                    id: tid.clone(),
                    summary: summary.clone(),
                    member_ids: group.clone(),
                    centroid: Vec::new(),
                },
            );
            for sid in group {
                self.semantics.get_mut(sid).expect("member").theme_id = tid.clone();
                self.reassignment_log.push(Reassignment {
                    semantic_id: sid.clone(),
                    old_theme: Some(theme_id.to_string()),
                    new_theme: tid.clone(),
                    cause: ReassignCause::Split,
                });
            }
            ids.push(tid);
        }
        for tid in &ids {
            self.refresh_centroid(tid)?;
        }
        Ok(ids)
    }

    /// Moves every member of `from` into `into` and deletes `from`.
    pub fn merge_themes(&mut self, from: &str, into: &str) -> Result<()> {
        if from == into {
            return Err(Error::invalid("cannot merge a theme into itself"));
        }
        self.theme(into)?;
        let moved = self
            .themes
            .remove(from)
            .ok_or_else(|| Error::UnknownId(from.to_string()))?
            .member_ids;
        for sid in &moved {
            self.semantics.get_mut(sid).expect("member").theme_id = into.to_string();
            self.reassignment_log.push(Reassignment {
                semantic_id: sid.clone(),
                old_theme: Some(from.to_string()),
                new_theme: into.to_string(),
                cause: ReassignCause::Merge,
            });
        }
        self.themes
            .get_mut(into)
            .expect("checked")
            .member_ids
            .extend(moved);
        self.refresh_centroid(into)
    }

    // ----- validation -----

    /// Re-derives every structural invariant and reports each violation with
    /// the offending id. An empty list means the hierarchy is consistent.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |kind, id: &str, detail: String| {
            out.push(Violation {
                kind,
                id: id.to_string(),
                detail,
            })
        };

        for m in self.messages.values() {
            if m.text.trim().is_empty() {
                push(ViolationKind::EmptyText, &m.id, String::new());
            }
            if !self
                .sessions
                .get(&m.session_id)
                .is_some_and(|ids| ids.contains(&m.id))
            {
                push(
                    ViolationKind::SessionIndex,
                    &m.id,
                    "not indexed in its session".into(),
                );
            }
            if let Some(ep) = &m.episode_id {
                match self.episodes.get(ep) {
                    None => push(ViolationKind::DanglingEpisodeLink, &m.id, ep.clone()),
                    Some(e) if !e.message_ids.contains(&m.id) => {
                        push(ViolationKind::MessageEpisodeMismatch, &m.id, ep.clone())
                    }
                    _ => {}
                }
            }
        }
        for (sid, ids) in &self.sessions {
            let mut prev: Option<Timestamp> = None;
            for id in ids {
                match self.messages.get(id) {
                    None => push(ViolationKind::DanglingMessageLink, sid, id.clone()),
                    Some(m) => {
                        if m.session_id != *sid {
                            push(ViolationKind::SessionIndex, id, sid.clone());
                        }
                        if prev.is_some_and(|p| m.timestamp < p) {
                            push(ViolationKind::SessionOrder, id, sid.clone());
                        }
                        prev = Some(m.timestamp);
                    }
                }
            }
        }

        for e in self.episodes.values() {
            if self.bad_vector(&e.embedding) {
                push(ViolationKind::BadEmbedding, &e.id, String::new());
            }
            if e.message_ids.is_empty() {
                push(ViolationKind::EmptyEpisode, &e.id, String::new());
                continue;
            }
            let msgs: Vec<Option<&Message>> =
                e.message_ids.iter().map(|m| self.messages.get(m)).collect();
            for (mid, m) in e.message_ids.iter().zip(&msgs) {
                match m {
                    None => push(ViolationKind::DanglingMessageLink, &e.id, mid.clone()),
                    Some(m) if m.episode_id.as_deref() != Some(e.id.as_str()) => {
                        push(ViolationKind::MessageEpisodeMismatch, &e.id, mid.clone())
                    }
                    _ => {}
                }
            }
            let found: Vec<&Message> = msgs.into_iter().flatten().collect();
            if let Some(first) = found.first() {
                if found.iter().any(|m| m.session_id != first.session_id) {
                    push(ViolationKind::CrossSessionEpisode, &e.id, String::new());
                } else if let Some(order) = self.sessions.get(&first.session_id) {
                    let contiguous = order
                        .iter()
                        .position(|m| *m == e.message_ids[0])
                        .is_some_and(|start| {
                            order.get(start..start + e.message_ids.len())
                                == Some(e.message_ids.as_slice())
                        });
                    if !contiguous {
                        push(ViolationKind::NonContiguousEpisode, &e.id, String::new());
                    }
                }
            }
        }

        let mut membership: BTreeMap<&str, usize> = BTreeMap::new();
        for t in self.themes.values() {
            for m in &t.member_ids {
                *membership.entry(m.as_str()).or_default() += 1;
            }
        }
        for s in self.semantics.values() {
            if self.bad_vector(&s.embedding) {
                push(ViolationKind::BadEmbedding, &s.id, String::new());
            }
            if s.source_episode_ids.is_empty() {
                push(ViolationKind::EmptySources, &s.id, String::new());
            }
            for e in &s.source_episode_ids {
                if !self.episodes.contains_key(e) {
                    push(ViolationKind::DanglingEpisodeLink, &s.id, e.clone());
                }
            }
            match self.themes.get(&s.theme_id) {
                None => push(ViolationKind::DanglingThemeLink, &s.id, s.theme_id.clone()),
                Some(t) if !t.member_ids.contains(&s.id) => push(
                    ViolationKind::ThemeMembershipMismatch,
                    &s.id,
                    s.theme_id.clone(),
                ),
                _ => {}
            }
            if membership.get(s.id.as_str()).copied().unwrap_or(0) > 1 {
                push(ViolationKind::DuplicateMembership, &s.id, String::new());
            }
        }

        for t in self.themes.values() {
            if t.member_ids.is_empty() {
                push(ViolationKind::EmptyTheme, &t.id, String::new());
                continue;
            }
            if let Some(cap) = self.theme_cap {
                if t.size() > cap {
                    push(
                        ViolationKind::ThemeOverCap,
                        &t.id,
                        format!("{} > {cap}", t.size()),
                    );
                }
            }
            let mut members = Vec::new();
            for m in &t.member_ids {
                match self.semantics.get(m) {
                    None => push(ViolationKind::DanglingSemanticLink, &t.id, m.clone()),
                    Some(s) => {
                        if s.theme_id != t.id {
                            push(ViolationKind::ThemeMembershipMismatch, &t.id, m.clone());
                        }
                        members.push(s.embedding.as_slice());
                    }
                }
            }
            if t.centroid.len() != self.dim {
                push(
                    ViolationKind::StaleCentroid,
                    &t.id,
                    "wrong dimension".into(),
                );
            } else if !members.is_empty() && members.iter().all(|v| v.len() == self.dim) {
                let fresh = centroid(members.iter().copied(), self.dim);
                let drift = fresh
                    .iter()
                    .zip(&t.centroid)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if drift > CENTROID_TOLERANCE {
                    push(
                        ViolationKind::StaleCentroid,
                        &t.id,
                        format!("max drift {drift:.3e}"),
                    );
                }
            }
        }

        let total: usize = self.themes.values().map(Theme::size).sum();
        if total != self.semantics.len() {
            push(
                ViolationKind::PartitionCount,
                "partition",
                format!(
                    "sum of theme sizes {total} != {} semantics",
                    self.semantics.len()
                ),
            );
        }
        out
    }

    fn bad_vector(&self, v: &[f64]) -> bool {
        v.len() != self.dim || (l2_norm(v) - 1.0).abs() > CENTROID_TOLERANCE
    }

    /// Direct access for tests and tools that deliberately corrupt a store.
    #[doc(hidden)]
    pub fn themes_mut_unchecked(&mut self) -> &mut BTreeMap<String, Theme> {
        &mut self.themes
    }

    #[doc(hidden)]
    pub fn semantics_mut_unchecked(&mut self) -> &mut BTreeMap<String, SemanticNode> {
        &mut self.semantics
    }
}

/// Lowercase, alphanumerics only, single-spaced. Two statements with the
/// same normal form are treated as the same fact.
pub fn normalize_statement(s: &str) -> String {
    crate::text::word_tokens(s).join(" ")
}

pub fn parse_timestamp(raw: &str) -> Result<Timestamp> {
    const FORMATS: &[&str] = &[
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        // conversation-log style, e.g. "1:56 pm on 8 May, 2023"
        "%I:%M %p on %d %B, %Y",
        "%I:%M %p on %d %b, %Y",
    ];
    let raw = raw.trim();
    for f in FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(raw, f) {
            return Ok(t);
        }
    }
    if let Ok(t) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Ok(t.naive_utc());
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight"));
    }
    Err(Error::invalid(format!("unparseable timestamp {raw:?}")))
}
