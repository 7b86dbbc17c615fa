//! Top-down query answering.
//!
//! Stage I picks representative themes, then representative facts among the
//! induced candidates, trading marginal neighbourhood coverage against query
//! relevance. Stage II walks ranked episodes and admits each one (and then
//! its raw messages) only when it lowers the reader's uncertainty enough.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::chat::ChatClient;
use crate::embedding::{unit_cosine, EmbeddingProvider};
use crate::engine::MemoryState;
use crate::error::{Error, Result};
use crate::graph::NavGraph;
use crate::model::{Episode, MemoryHierarchy};
use crate::prompts;
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Maximum context tokens.
    pub budget: usize,
    /// Weight of the coverage term against relevance.
    pub alpha: f64,
    pub coverage_target: f64,
    pub max_themes: usize,
    pub max_semantics: usize,
    /// Initial semantic candidates by cosine.
    pub initial_candidates: usize,
    /// Weight of direct similarity when ranking episodes.
    pub beta: f64,
    /// Minimum uncertainty drop for admitting evidence.
    pub delta: f64,
    /// Consecutive rejected episodes before stopping.
    pub patience: usize,
    pub expand_messages: bool,
    pub stage1: bool,
    pub stage2: bool,
    /// Episodes placed without gating when the second stage is off.
    pub ungated_episodes: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            budget: 2000,
            alpha: 0.5,
            coverage_target: 0.8,
            max_themes: 5,
            max_semantics: 10,
            initial_candidates: 20,
            beta: 0.5,
            delta: 0.05,
            patience: 2,
            expand_messages: true,
            stage1: true,
            stage2: true,
            ungated_episodes: 3,
        }
    }
}

impl RetrievalConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if !(self.coverage_target > 0.0 && self.coverage_target <= 1.0) {
            return Err(Error::invalid("coverage_target must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta must lie in [0, 1]"));
        }
        if self.budget == 0 {
            return Err(Error::invalid("budget must be positive"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::invalid("delta must be non-negative"));
        }
        if self.max_themes == 0 || self.max_semantics == 0 || self.initial_candidates == 0 {
            return Err(Error::invalid("selection sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub embedding: Vec<f64>,
    pub config: RetrievalConfig,
}

impl Query {
    pub fn new(
        text: &str,
        embedder: &dyn EmbeddingProvider,
        config: RetrievalConfig,
    ) -> Result<Self> {
        config.check()?;
        Ok(Query {
            text: text.to_string(),
            embedding: embedder.embed(text)?,
            config,
        })
    }
}

// ----- Stage I -----

/// Candidate nodes with normalised relevance and their neighbourhoods
/// restricted to the candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub ids: Vec<String>,
    /// Raw query cosine per candidate.
    pub similarity: Vec<f64>,
    /// Min-max normalised similarity in [0, 1].
    pub relevance: Vec<f64>,
    /// Out-neighbours inside the set as `(index, weight)`.
    pub neighbors: Vec<Vec<(usize, f64)>>,
    /// Largest total weight of any node's closed neighbourhood.
    pub z: f64,
}

/// Min-max normalisation; a constant (or single-valued) input maps to 1.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 0.0) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

impl CandidateSet {
    /// Builds a set from `(id, raw similarity)` pairs and explicit directed
    /// edges; edges leaving or entering the set are ignored. Ids are sorted.
    pub fn from_parts(
        mut nodes: Vec<(String, f64)>,
        edges: &[(String, String, f64)],
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid("candidate set is empty"));
        }
        nodes.sort_by(|a, b| a.0.cmp(&b.0));
        nodes.dedup_by(|a, b| a.0 == b.0);
        let index: BTreeMap<&str, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.as_str(), i))
            .collect();
        let mut neighbors = vec![Vec::new(); nodes.len()];
        for (from, to, w) in edges {
            if let (Some(&a), Some(&b)) = (index.get(from.as_str()), index.get(to.as_str())) {
                if a != b && !neighbors[a].iter().any(|(j, _)| *j == b) {
                    neighbors[a].push((b, *w));
                }
            }
        }
        let similarity: Vec<f64> = nodes.iter().map(|(_, s)| *s).collect();
        let relevance = min_max(&similarity);
        let z = neighbors
            .iter()
            .map(|n| 1.0 + n.iter().map(|(_, w)| w).sum::<f64>())
            .fold(0.0, f64::max);
        Ok(CandidateSet {
            ids: nodes.into_iter().map(|(id, _)| id).collect(),
            similarity,
            relevance,
            neighbors,
            z,
        })
    }

    fn from_graph(nodes: Vec<(String, f64)>, graph: &NavGraph) -> Result<Self> {
        let mut edges = Vec::new();
        for (id, _) in &nodes {
            for e in graph.neighborhood(id)? {
                edges.push((id.clone(), e.to.clone(), e.weight));
            }
        }
        Self::from_parts(nodes, &edges)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Candidates {
    pub themes: Option<CandidateSet>,
    pub semantics: Option<CandidateSet>,
    /// Set when the hierarchy holds no facts.
    pub empty: bool,
}

/// Top-`initial_candidates` facts by query cosine (ties by id) and the
/// distinct themes holding them.
pub fn gather_candidates(query: &Query, state: &MemoryState) -> Result<Candidates> {
    let h = &state.hierarchy;
    if h.semantics().is_empty() {
        return Ok(Candidates {
            empty: true,
            ..Candidates::default()
        });
    }
    let top = top_semantics(query, h, query.config.initial_candidates);
    let theme_ids: BTreeSet<&str> = top
        .iter()
        .map(|(id, _)| h.semantics()[id].theme_id.as_str())
        .collect();
    let themes: Vec<(String, f64)> = theme_ids
        .into_iter()
        .map(|t| {
            (
                t.to_string(),
                unit_cosine(&query.embedding, &h.themes()[t].centroid),
            )
        })
        .collect();
    Ok(Candidates {
        themes: Some(CandidateSet::from_graph(themes, &state.theme_graph)?),
        semantics: Some(CandidateSet::from_graph(top, &state.semantic_graph)?),
        empty: false,
    })
}

fn top_semantics(query: &Query, h: &MemoryHierarchy, m: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = h
        .semantics()
        .values()
        .map(|s| (s.id.clone(), unit_cosine(&query.embedding, &s.embedding)))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(m);
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub id: String,
    pub score: f64,
    pub covered: usize,
}

/// Greedy representative selection. Each step takes the candidate with the
/// largest `alpha * gain / z + (1 - alpha) * relevance`, where `gain` sums the
/// weights into not yet covered members of its closed neighbourhood (the
/// node itself weighs 1). Ties go to higher relevance, then lower id.
pub fn select_representatives(
    c: &CandidateSet,
    alpha: f64,
    coverage_target: f64,
    max_representatives: usize,
) -> Vec<SelectionStep> {
    let n = c.len();
    let mut covered = vec![false; n];
    let mut chosen = vec![false; n];
    let mut covered_count = 0usize;
    let mut steps: Vec<SelectionStep> = Vec::new();
    while steps.len() < max_representatives.min(n)
        && (covered_count as f64) < coverage_target * n as f64
    {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let mut gain = if covered[i] { 0.0 } else { 1.0 };
            for &(j, w) in &c.neighbors[i] {
                if !covered[j] {
                    gain += w;
                }
            }
            let score = alpha * gain / c.z + (1.0 - alpha) * c.relevance[i];
            let better = match best {
                None => true,
                Some((b, bs)) => score
                    .total_cmp(&bs)
                    .then_with(|| c.relevance[i].total_cmp(&c.relevance[b]))
                    .then_with(|| c.ids[b].cmp(&c.ids[i]))
                    .is_gt(),
            };
            if better {
                best = Some((i, score));
            }
        }
        let (pick, score) = best.expect("an unchosen candidate remains");
        chosen[pick] = true;
        let before = covered_count;
        for j in std::iter::once(pick).chain(c.neighbors[pick].iter().map(|(j, _)| *j)) {
            if !covered[j] {
                covered[j] = true;
                covered_count += 1;
            }
        }
        debug_assert!(covered_count >= before);
        steps.push(SelectionStep {
            id: c.ids[pick].clone(),
            score,
            covered: covered_count,
        });
    }
    steps
}

/// Ids in descending relevance, ties by id.
fn by_relevance(c: &CandidateSet, limit: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| {
        c.relevance[b]
            .total_cmp(&c.relevance[a])
            .then_with(|| c.ids[a].cmp(&c.ids[b]))
    });
    order
        .into_iter()
        .take(limit)
        .map(|i| c.ids[i].clone())
        .collect()
}

/// Facts eligible once themes are chosen: all their members plus the
/// members' direct graph neighbours.
pub fn induced_semantics(state: &MemoryState, themes: &[String]) -> Result<Vec<String>> {
    let h = &state.hierarchy;
    let mut members: BTreeSet<String> = BTreeSet::new();
    for t in themes {
        members.extend(h.theme(t)?.member_ids.iter().cloned());
    }
    let mut out = members.clone();
    for m in &members {
        out.extend(
            state
                .semantic_graph
                .neighborhood(m)?
                .iter()
                .map(|e| e.to.clone()),
        );
    }
    Ok(out.into_iter().collect())
}

/// Episodes ordered by `beta * cos + (1 - beta) * support`, where support is
/// the share of selected facts citing the episode. Ties by earlier time.
pub fn rank_episodes(
    query: &Query,
    semantics_selected: &[String],
    h: &MemoryHierarchy,
) -> Result<Vec<(String, f64)>> {
    let beta = query.config.beta;
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    for sid in semantics_selected {
        for e in &h.semantic(sid)?.source_episode_ids {
            *support.entry(e.as_str()).or_default() += 1;
        }
    }
    let total = semantics_selected.len().max(1) as f64;
    let mut scored: Vec<(&Episode, f64)> = h
        .episodes()
        .values()
        .map(|e| {
            let s = support.get(e.id.as_str()).copied().unwrap_or(0) as f64 / total;
            (
                e,
                beta * unit_cosine(&query.embedding, &e.embedding) + (1.0 - beta) * s,
            )
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.0.timestamp.cmp(&b.0.timestamp))
            .then_with(|| a.0.id.cmp(&b.0.id))
    });
    Ok(scored.into_iter().map(|(e, s)| (e.id.clone(), s)).collect())
}

// ----- Stage II -----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Theme,
    Semantic,
    Episode,
    Messages,
}

/// One intact unit of context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub kind: BlockKind,
    pub id: String,
    pub text: String,
    pub tokens: usize,
}

impl ContextBlock {
    fn new(kind: BlockKind, id: &str, text: String) -> Self {
        let tokens = text::count_tokens(&text);
        ContextBlock {
            kind,
            id: id.to_string(),
            text,
            tokens,
        }
    }
}

pub fn theme_block(h: &MemoryHierarchy, id: &str) -> Result<ContextBlock> {
    let t = h.theme(id)?;
    Ok(ContextBlock::new(
        BlockKind::Theme,
        id,
        format!("- Topic: {}", t.summary),
    ))
}

pub fn semantic_block(h: &MemoryHierarchy, id: &str) -> Result<ContextBlock> {
    let s = h.semantic(id)?;
    Ok(ContextBlock::new(
        BlockKind::Semantic,
        id,
        format!("- {}", s.statement),
    ))
}

pub fn episode_block(h: &MemoryHierarchy, id: &str) -> Result<ContextBlock> {
    let e = h.episode(id)?;
    Ok(ContextBlock::new(
        BlockKind::Episode,
        id,
        format!(
            "[{}] {}\n{}",
            e.timestamp.format("%Y-%m-%d %H:%M"),
            e.title,
            e.content
        ),
    ))
}

/// The raw messages of an episode as one block keyed by the episode id.
pub fn message_block(h: &MemoryHierarchy, episode_id: &str) -> Result<ContextBlock> {
    let e = h.episode(episode_id)?;
    let mut lines = Vec::with_capacity(e.message_ids.len());
    for mid in &e.message_ids {
        let m = h.message(mid)?;
        lines.push(format!(
            "[{}] {}: {}",
            m.timestamp.format("%Y-%m-%d %H:%M"),
            m.speaker,
            m.text
        ));
    }
    Ok(ContextBlock::new(
        BlockKind::Messages,
        episode_id,
        lines.join("\n"),
    ))
}

/// `(semantic section, episodic section)` of the context.
pub fn sections(blocks: &[ContextBlock]) -> (String, String) {
    let join = |pick: &dyn Fn(BlockKind) -> bool| {
        blocks
            .iter()
            .filter(|b| pick(b.kind))
            .map(|b| b.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    };
    (
        join(&|k| matches!(k, BlockKind::Theme | BlockKind::Semantic)),
        join(&|k| matches!(k, BlockKind::Episode | BlockKind::Messages)),
    )
}

pub fn render_context(blocks: &[ContextBlock]) -> String {
    let (sem, epi) = sections(blocks);
    format!("Semantic Memories:\n{sem}\n\nEpisodic Memories:\n{epi}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub uncertainty: f64,
    /// Tokens spent producing the estimate.
    pub tokens: u64,
}

/// Estimates how unsure a reader would be answering `question` from
/// `context`. Larger is less certain; never negative.
pub trait UncertaintyOracle: Send + Sync {
    fn estimate(&self, question: &str, context: &str) -> Result<Estimate>;
}

/// Fraction of the question's content tokens that the context lacks.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineOracle;

impl UncertaintyOracle for OfflineOracle {
    fn estimate(&self, question: &str, context: &str) -> Result<Estimate> {
        let wanted: BTreeSet<String> = text::content_words(question).into_iter().collect();
        let tokens = (text::count_tokens(question) + text::count_tokens(context)) as u64;
        if wanted.is_empty() {
            return Ok(Estimate {
                uncertainty: 0.0,
                tokens,
            });
        }
        let present: HashSet<String> = text::word_tokens(context).into_iter().collect();
        let missing = wanted.iter().filter(|t| !present.contains(*t)).count();
        Ok(Estimate {
            uncertainty: missing as f64 / wanted.len() as f64,
            tokens,
        })
    }
}

/// How the remote oracle measures uncertainty.
pub enum RemoteOracleMode {
    /// Mean per-token entropy of the reader's own draft answer.
    Entropy,
    /// `1 - confidence` reported by a separate judge model.
    Judge(ChatClient),
}

pub struct RemoteOracle {
    pub reader: ChatClient,
    pub mode: RemoteOracleMode,
}

fn parse_confidence(raw: &str) -> Result<f64> {
    let c: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::protocol(0..1, "judge reply is not a number", Some(raw.to_string())))?;
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::protocol(
            0..1,
            "judge confidence outside [0, 1]",
            Some(raw.to_string()),
        ));
    }
    Ok(c)
}

impl UncertaintyOracle for RemoteOracle {
    fn estimate(&self, question: &str, context: &str) -> Result<Estimate> {
        match &self.mode {
            RemoteOracleMode::Entropy => {
                let prompt = format!("{context}\n\nQuestion: {question}\n\nAnswer:");
                let reply = self.reader.complete(&prompt, true)?;
                let h = reply.mean_token_entropy().ok_or_else(|| {
                    Error::protocol(
                        0..1,
                        "reader returned no log-probabilities",
                        Some(reply.content.clone()),
                    )
                })?;
                Ok(Estimate {
                    uncertainty: h.max(0.0),
                    tokens: reply.total_tokens.unwrap_or(0),
                })
            }
            RemoteOracleMode::Judge(judge) => {
                let prompt = prompts::render(
                    prompts::CONFIDENCE_JUDGE,
                    &[("context", context), ("question", question)],
                );
                let reply = judge.complete(&prompt, false)?;
                Ok(Estimate {
                    uncertainty: 1.0 - parse_confidence(&reply.content)?,
                    tokens: reply.total_tokens.unwrap_or(0),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInclusion {
    pub episode_id: String,
    /// Oracle readings around admission; absent for ungated inclusion.
    pub uncertainty_before: Option<f64>,
    pub uncertainty_after: Option<f64>,
    /// Whether the episode's raw messages were admitted too.
    pub messages_admitted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub context_tokens: usize,
    pub auxiliary_call_tokens: u64,
    pub reader_call_tokens: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub themes_selected: Vec<String>,
    pub semantics_selected: Vec<String>,
    pub episodes_included: Vec<EpisodeInclusion>,
    pub messages_included: Vec<String>,
    /// Episodes offered to the gate, in order.
    pub episodes_tried: Vec<String>,
    pub blocks: Vec<ContextBlock>,
    pub context: String,
    pub token_usage: TokenUsage,
    pub empty_hierarchy: bool,
    /// The oracle failed and inclusion fell back to similarity.
    pub degraded: bool,
    /// Some selected unit did not fit the budget.
    pub budget_limited: bool,
}

impl RetrievalResult {
    fn used(&self) -> usize {
        self.blocks.iter().map(|b| b.tokens).sum()
    }

    fn finish(&mut self) {
        self.context = render_context(&self.blocks);
        self.token_usage.context_tokens = self.used();
        self.token_usage.total =
            self.token_usage.context_tokens as u64 + self.token_usage.auxiliary_call_tokens;
    }

    /// Appends `block` if it fits the budget.
    fn try_push(&mut self, block: ContextBlock, budget: usize) -> bool {
        if self.used() + block.tokens > budget {
            self.budget_limited = true;
            return false;
        }
        self.blocks.push(block);
        true
    }
}

/// Walks `ranked` episodes, admitting each only when the oracle's
/// uncertainty drops by at least `delta`; stops after `patience` consecutive
/// rejections or when the next unit would overflow the budget. `result`
/// must already hold the coarse context.
pub fn include_evidence(
    query: &Query,
    h: &MemoryHierarchy,
    ranked: &[String],
    result: &mut RetrievalResult,
    oracle: &dyn UncertaintyOracle,
) -> Result<()> {
    let cfg = &query.config;
    if !cfg.stage2 {
        for id in ranked.iter().take(cfg.ungated_episodes) {
            if !result.try_push(episode_block(h, id)?, cfg.budget) {
                break;
            }
            result.episodes_included.push(EpisodeInclusion {
                episode_id: id.clone(),
                uncertainty_before: None,
                uncertainty_after: None,
                messages_admitted: false,
            });
        }
        return Ok(());
    }
    let start = result.blocks.len();
    match gate(query, h, ranked, result, oracle) {
        Ok(()) => Ok(()),
        Err(e) if e.is_provider() => {
            result.blocks.truncate(start);
            result.episodes_included.clear();
            result.messages_included.clear();
            result.degraded = true;
            if let Some(id) = ranked.first() {
                if result.try_push(episode_block(h, id)?, cfg.budget) {
                    result.episodes_included.push(EpisodeInclusion {
                        episode_id: id.clone(),
                        uncertainty_before: None,
                        uncertainty_after: None,
                        messages_admitted: false,
                    });
                }
            }
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn gate(
    query: &Query,
    h: &MemoryHierarchy,
    ranked: &[String],
    result: &mut RetrievalResult,
    oracle: &dyn UncertaintyOracle,
) -> Result<()> {
    let cfg = &query.config;
    let measure = |blocks: &[ContextBlock], result_tokens: &mut u64| -> Result<f64> {
        let est = oracle.estimate(&query.text, &render_context(blocks))?;
        *result_tokens += est.tokens;
        Ok(est.uncertainty)
    };
    let mut aux = 0u64;
    let mut current = measure(&result.blocks, &mut aux)?;
    let mut misses = 0usize;
    for id in ranked {
        if misses >= cfg.patience {
            break;
        }
        let block = episode_block(h, id)?;
        if result.used() + block.tokens > cfg.budget {
            result.budget_limited = true;
            break;
        }
        result.episodes_tried.push(id.clone());
        result.blocks.push(block);
        let after = measure(&result.blocks, &mut aux)?;
        if current - after < cfg.delta {
            result.blocks.pop();
            misses += 1;
            continue;
        }
        misses = 0;
        let mut inclusion = EpisodeInclusion {
            episode_id: id.clone(),
            uncertainty_before: Some(current),
            uncertainty_after: Some(after),
            messages_admitted: false,
        };
        current = after;
        if cfg.expand_messages {
            let mb = message_block(h, id)?;
            if result.used() + mb.tokens <= cfg.budget {
                result.blocks.push(mb);
                let with_msgs = measure(&result.blocks, &mut aux)?;
                if current - with_msgs >= cfg.delta {
                    current = with_msgs;
                    inclusion.messages_admitted = true;
                    result
                        .messages_included
                        .extend(h.episode(id)?.message_ids.iter().cloned());
                } else {
                    result.blocks.pop();
                }
            } else {
                result.budget_limited = true;
            }
        }
        result.episodes_included.push(inclusion);
    }
    result.token_usage.auxiliary_call_tokens += aux;
    Ok(())
}

/// Runs both stages and assembles the context.
pub fn retrieve(
    query: &Query,
    state: &MemoryState,
    oracle: &dyn UncertaintyOracle,
) -> Result<RetrievalResult> {
    query.config.check()?;
    let cfg = &query.config;
    let h = &state.hierarchy;
    let mut result = RetrievalResult::default();
    let cands = gather_candidates(query, state)?;
    let (Some(theme_cands), Some(sem_cands)) = (&cands.themes, &cands.semantics) else {
        result.empty_hierarchy = true;
        result.finish();
        return Ok(result);
    };

    if cfg.stage1 {
        result.themes_selected =
            select_representatives(theme_cands, cfg.alpha, cfg.coverage_target, cfg.max_themes)
                .into_iter()
                .map(|s| s.id)
                .collect();
        let induced = induced_semantics(state, &result.themes_selected)?;
        let nodes: Vec<(String, f64)> = induced
            .into_iter()
            .map(|id| {
                let s = unit_cosine(&query.embedding, &h.semantics()[&id].embedding);
                (id, s)
            })
            .collect();
        let induced_set = CandidateSet::from_graph(nodes, &state.semantic_graph)?;
        result.semantics_selected = select_representatives(
            &induced_set,
            cfg.alpha,
            cfg.coverage_target,
            cfg.max_semantics,
        )
        .into_iter()
        .map(|s| s.id)
        .collect();
    } else {
        result.themes_selected = by_relevance(theme_cands, cfg.max_themes);
        result.semantics_selected = by_relevance(sem_cands, cfg.max_semantics);
    }

    let mut coarse = Vec::new();
    for t in &result.themes_selected {
        coarse.push(theme_block(h, t)?);
    }
    for s in &result.semantics_selected {
        coarse.push(semantic_block(h, s)?);
    }
    for b in coarse {
        result.try_push(b, cfg.budget);
    }

    let ranked: Vec<String> = rank_episodes(query, &result.semantics_selected, h)?
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    include_evidence(query, h, &ranked, &mut result, oracle)?;
    result.finish();
    Ok(result)
}

// ----- reading -----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerStyle {
    /// Short phrase, facts listed before episodes.
    #[default]
    Short,
    /// One full sentence, episodes listed before facts.
    Sentence,
}

pub fn answer_prompt(style: AnswerStyle, question: &str, blocks: &[ContextBlock]) -> String {
    let (semantic, episodic) = sections(blocks);
    let template = match style {
        AnswerStyle::Short => prompts::ANSWER_SHORT,
        AnswerStyle::Sentence => prompts::ANSWER_SENTENCE,
    };
    prompts::render(
        template,
        &[
            ("semantic", &semantic),
            ("episodic", &episodic),
            ("question", question),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderReply {
    pub answer: String,
    pub tokens: u64,
}

pub trait Reader: Send + Sync {
    fn read(&self, question: &str, prompt: &str, blocks: &[ContextBlock]) -> Result<ReaderReply>;
}

/// Answers with the fact sharing the most content tokens with the
/// question (falling back to any block), ties to the earlier block.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineReader;

fn strip_bullet(s: &str) -> &str {
    s.strip_prefix("- ").unwrap_or(s)
}

impl Reader for OfflineReader {
    fn read(&self, question: &str, prompt: &str, blocks: &[ContextBlock]) -> Result<ReaderReply> {
        let wanted: HashSet<String> = text::content_words(question).into_iter().collect();
        let overlap = |b: &ContextBlock| {
            text::content_words(&b.text)
                .into_iter()
                .collect::<HashSet<_>>()
                .intersection(&wanted)
                .count()
        };
        let best_of = |kinds: &[BlockKind]| {
            let mut best: Option<(usize, usize)> = None;
            for (i, b) in blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| kinds.contains(&b.kind))
            {
                let o = overlap(b);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((i, o));
                }
            }
            best
        };
        let pick = match best_of(&[BlockKind::Semantic]) {
            Some((i, o)) if o > 0 => Some(i),
            _ => best_of(&[
                BlockKind::Theme,
                BlockKind::Semantic,
                BlockKind::Episode,
                BlockKind::Messages,
            ])
            .map(|(i, _)| i),
        }
        .map(|i| &blocks[i]);
        let answer = pick
            .map(|b| strip_bullet(b.text.lines().next().unwrap_or("")).to_string())
            .unwrap_or_default();
        let tokens = (text::count_tokens(prompt) + text::count_tokens(&answer)) as u64;
        Ok(ReaderReply { answer, tokens })
    }
}

pub struct RemoteReader {
    pub client: ChatClient,
}

impl Reader for RemoteReader {
    fn read(&self, _question: &str, prompt: &str, _blocks: &[ContextBlock]) -> Result<ReaderReply> {
        let reply = self.client.complete(prompt, false)?;
        Ok(ReaderReply {
            answer: reply.content.trim().to_string(),
            tokens: reply.total_tokens.unwrap_or(0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub retrieval: RetrievalResult,
}

/// A reader failure, with the context that had been assembled.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct AnswerFailure {
    pub error: Error,
    pub retrieval: Option<Box<RetrievalResult>>,
}

impl From<Error> for AnswerFailure {
    fn from(error: Error) -> Self {
        AnswerFailure {
            error,
            retrieval: None,
        }
    }
}

pub fn answer(
    query: &Query,
    state: &MemoryState,
    oracle: &dyn UncertaintyOracle,
    reader: &dyn Reader,
    style: AnswerStyle,
) -> std::result::Result<Answer, AnswerFailure> {
    let mut retrieval = retrieve(query, state, oracle)?;
    let prompt = answer_prompt(style, &query.text, &retrieval.blocks);
    match reader.read(&query.text, &prompt, &retrieval.blocks) {
        Ok(reply) => {
            retrieval.token_usage.reader_call_tokens = reply.tokens;
            retrieval.token_usage.total = retrieval.token_usage.auxiliary_call_tokens
                + reply
                    .tokens
                    .max(retrieval.token_usage.context_tokens as u64);
            Ok(Answer {
                text: reply.answer,
                retrieval,
            })
        }
        Err(error) => Err(AnswerFailure {
            error,
            retrieval: Some(Box::new(retrieval)),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_graph() -> CandidateSet {
        let e = |a: &str, b: &str| (a.to_string(), b.to_string(), 1.0);
        CandidateSet::from_parts(
            vec![("a".into(), 0.9), ("b".into(), 0.5), ("c".into(), 0.1)],
            &[e("a", "b"), e("b", "a"), e("b", "c"), e("c", "b")],
        )
        .unwrap()
    }

    #[test]
    fn normalisation_constant_on_a_line() {
        assert_eq!(line_graph().z, 3.0);
        assert_eq!(min_max(&[0.3]), vec![1.0]);
    }

    #[test]
    fn greedy_trace_on_a_line() {
        let mut c = line_graph();
        c.relevance = vec![0.9, 0.5, 0.1];
        let steps = select_representatives(&c, 0.5, 1.0, 10);
        let ids: Vec<&str> = steps.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert!((steps[0].score - (0.5 * 2.0 / 3.0 + 0.45)).abs() < 1e-12);
        assert!((steps[1].score - (0.5 / 3.0 + 0.25)).abs() < 1e-12);
        assert_eq!(steps[1].covered, 3);
    }

    #[test]
    fn star_centre_covers_everything_with_alpha_one() {
        let leaves = ["l1", "l2", "l3", "l4"];
        let mut nodes = vec![("centre".to_string(), 0.1)];
        let mut edges = Vec::new();
        for l in leaves {
            nodes.push((l.to_string(), 0.9));
            edges.push(("centre".to_string(), l.to_string(), 1.0));
        }
        let c = CandidateSet::from_parts(nodes, &edges).unwrap();
        let steps = select_representatives(&c, 1.0, 1.0, 5);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].id, "centre");
    }

    #[test]
    fn alpha_zero_is_similarity_order() {
        let c = CandidateSet::from_parts(
            vec![
                ("x".into(), 0.2),
                ("y".into(), 0.7),
                ("z".into(), 0.5),
                ("w".into(), 0.5),
            ],
            &[],
        )
        .unwrap();
        let ids: Vec<String> = select_representatives(&c, 0.0, 1.0, 4)
            .into_iter()
            .map(|s| s.id)
            .collect();
        assert_eq!(ids, vec!["y", "w", "z", "x"]);
        assert_eq!(ids, by_relevance(&c, 4));
    }

    #[test]
    fn offline_oracle_counts_missing_content_tokens() {
        let o = OfflineOracle;
        let e = o
            .estimate("Where did Melanie hike?", "Melanie went to Rainier")
            .unwrap();
        assert!((e.uncertainty - 0.5).abs() < 1e-12);
        assert_eq!(o.estimate("the of", "x").unwrap().uncertainty, 0.0);
    }

    #[test]
    fn offline_reader_echoes_best_fact() {
        let blocks = vec![
            ContextBlock::new(BlockKind::Semantic, "s1", "- Ann owns a dog".into()),
            ContextBlock::new(
                BlockKind::Semantic,
                "s2",
                "- Ann's favorite book is Dune".into(),
            ),
        ];
        let r = OfflineReader
            .read("What is Ann's favorite book?", "p", &blocks)
            .unwrap();
        assert_eq!(r.answer, "Ann's favorite book is Dune");
        let none = OfflineReader.read("q", "p", &[]).unwrap();
        assert_eq!(none.answer, "");
    }

    #[test]
    fn confidence_parsing_is_strict() {
        assert_eq!(parse_confidence(" 0.25 ").unwrap(), 0.25);
        assert!(parse_confidence("about 0.5").is_err());
        assert!(parse_confidence("1.5").is_err());
    }

    #[test]
    fn prompt_sections_follow_style() {
        let blocks = vec![ContextBlock::new(BlockKind::Semantic, "s", "- fact".into())];
        let p = answer_prompt(AnswerStyle::Short, "q?", &blocks);
        assert!(p.contains("Semantic Memories:\n- fact"));
        assert!(p.contains("Episodic Memories:"));
        let s = answer_prompt(AnswerStyle::Sentence, "q?", &blocks);
        assert!(s.find("Episodic Memories:").unwrap() < s.find("Semantic Memories:").unwrap());
    }
}
