//! Answer metrics, evidence-density analysis and the evaluation runner.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Category, QaItem};
use crate::embedding::{unit_cosine, EmbeddingProvider};
use crate::engine::MemoryState;
use crate::error::{Error, Result};
use crate::model::Message;
use crate::retrieval::{
    answer, answer_prompt, AnswerStyle, BlockKind, ContextBlock, Query, Reader, RetrievalConfig,
    UncertaintyOracle,
};
use crate::text;

// ----- metrics -----

/// Unigram precision with clipping and brevity penalty, unsmoothed.
pub fn bleu1(candidate: &str, reference: &str) -> Result<f64> {
    let c = text::metric_tokens(candidate);
    let r = text::metric_tokens(reference);
    if r.is_empty() {
        return Err(Error::invalid("reference has no tokens"));
    }
    if c.is_empty() {
        return Ok(0.0);
    }
    let mut budget: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *budget.entry(t).or_default() += 1;
    }
    let mut matched = 0usize;
    for t in &c {
        if let Some(n) = budget.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    let precision = matched as f64 / c.len() as f64;
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    Ok(bp * precision)
}

fn f_measure(overlap: usize, c: usize, r: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c as f64;
    let rec = overlap as f64 / r as f64;
    2.0 * p * rec / (p + rec)
}

/// Multiset token F1. Two empty token lists score 1.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let c = text::metric_tokens(candidate);
    let r = text::metric_tokens(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, c.len(), r.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure over tokens. Two empty token lists
/// score 1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = text::metric_tokens(candidate);
    let r = text::metric_tokens(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    f_measure(lcs_len(&c, &r), c.len(), r.len())
}

// ----- evidence density -----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HitClass {
    Zero,
    OneHit,
    TwoHit,
    MultiHit,
}

impl HitClass {
    pub fn from_count(n: usize) -> Self {
        match n {
            0 => HitClass::Zero,
            1 => HitClass::OneHit,
            2 => HitClass::TwoHit,
            _ => HitClass::MultiHit,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HitReport {
    pub classes: Vec<HitClass>,
    pub proportions: BTreeMap<HitClass, f64>,
    /// The answer has no content tokens, so hits are meaningless.
    pub undefined: bool,
}

fn answer_units(gold: &str) -> Vec<String> {
    text::content_tokens(gold)
}

fn present(block: &str) -> HashSet<String> {
    text::metric_tokens(block).into_iter().collect()
}

pub fn classify_hits(blocks: &[&str], gold: &str) -> HitReport {
    let units = answer_units(gold);
    if units.is_empty() {
        return HitReport {
            undefined: true,
            ..HitReport::default()
        };
    }
    let classes: Vec<HitClass> = blocks
        .iter()
        .map(|b| {
            let p = present(b);
            HitClass::from_count(units.iter().filter(|u| p.contains(*u)).count())
        })
        .collect();
    let mut proportions = BTreeMap::new();
    if !classes.is_empty() {
        for c in &classes {
            *proportions.entry(*c).or_insert(0.0) += 1.0;
        }
        for v in proportions.values_mut() {
            *v /= classes.len() as f64;
        }
    }
    HitReport {
        classes,
        proportions,
        undefined: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverMethod {
    Exact,
    Greedy,
}

/// Fewest blocks (then fewest tokens) covering every answer content token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageEfficiency {
    /// `None` when the blocks together miss some answer token.
    pub blocks_for_coverage: Option<usize>,
    pub tokens_for_coverage: Option<usize>,
    pub method: CoverMethod,
}

/// Answers with more content tokens than this fall back to greedy cover.
pub const EXACT_COVER_MAX_TOKENS: usize = 16;

fn block_masks(blocks: &[&str], units: &[String]) -> Vec<(u64, usize)> {
    blocks
        .iter()
        .map(|b| {
            let p = present(b);
            let mask = units
                .iter()
                .enumerate()
                .filter(|(_, u)| p.contains(*u))
                .fold(0u64, |m, (i, _)| m | (1 << i));
            (mask, text::count_tokens(b))
        })
        .collect()
}

/// Picks, at each step, the block covering most uncovered tokens; ties go to
/// the earlier block.
pub fn greedy_cover(blocks: &[&str], gold: &str) -> Result<CoverageEfficiency> {
    let units = answer_units(gold);
    if units.is_empty() {
        return Err(Error::invalid("answer has no content tokens"));
    }
    let sets: Vec<(HashSet<usize>, usize)> = blocks
        .iter()
        .map(|b| {
            let p = present(b);
            let hit = (0..units.len())
                .filter(|&i| p.contains(&units[i]))
                .collect();
            (hit, text::count_tokens(b))
        })
        .collect();
    let mut uncovered: HashSet<usize> = (0..units.len()).collect();
    let mut used = vec![false; sets.len()];
    let (mut n, mut tokens) = (0usize, 0usize);
    while !uncovered.is_empty() {
        let mut best: Option<(usize, usize)> = None;
        for (i, (s, _)) in sets.iter().enumerate() {
            if used[i] {
                continue;
            }
            let gain = s.intersection(&uncovered).count();
            if gain > 0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((i, _)) = best else {
            return Ok(CoverageEfficiency {
                blocks_for_coverage: None,
                tokens_for_coverage: None,
                method: CoverMethod::Greedy,
            });
        };
        used[i] = true;
        n += 1;
        tokens += sets[i].1;
        for u in &sets[i].0 {
            uncovered.remove(u);
        }
    }
    Ok(CoverageEfficiency {
        blocks_for_coverage: Some(n),
        tokens_for_coverage: Some(tokens),
        method: CoverMethod::Greedy,
    })
}

/// Minimum cover by dynamic programming over covered-token subsets,
/// minimising block count and then token count.
pub fn exact_cover(blocks: &[&str], gold: &str) -> Result<CoverageEfficiency> {
    let units = answer_units(gold);
    if units.is_empty() {
        return Err(Error::invalid("answer has no content tokens"));
    }
    if units.len() > EXACT_COVER_MAX_TOKENS {
        return Err(Error::invalid(format!(
            "exact cover supports at most {EXACT_COVER_MAX_TOKENS} answer tokens"
        )));
    }
    let full: u64 = (1u64 << units.len()) - 1;
    let masks: Vec<(u64, usize)> = block_masks(blocks, &units)
        .into_iter()
        .filter(|(m, _)| *m != 0)
        .collect();
    let mut dp: Vec<Option<(usize, usize)>> = vec![None; (full + 1) as usize];
    dp[0] = Some((0, 0));
    for mask in 0..=full {
        let Some((n, t)) = dp[mask as usize] else {
            continue;
        };
        for &(bm, bt) in &masks {
            let next = mask | bm;
            if next == mask {
                continue;
            }
            let cand = (n + 1, t + bt);
            let slot = &mut dp[next as usize];
            if slot.is_none_or(|cur| cand < cur) {
                *slot = Some(cand);
            }
        }
    }
    let best = dp[full as usize];
    Ok(CoverageEfficiency {
        blocks_for_coverage: best.map(|(n, _)| n),
        tokens_for_coverage: best.map(|(_, t)| t),
        method: CoverMethod::Exact,
    })
}

/// Exact cover when the answer is small enough, greedy otherwise.
pub fn coverage_efficiency(blocks: &[&str], gold: &str) -> Result<CoverageEfficiency> {
    if answer_units(gold).len() <= EXACT_COVER_MAX_TOKENS {
        exact_cover(blocks, gold)
    } else {
        greedy_cover(blocks, gold)
    }
}

// ----- naive baseline -----

/// Messages in order, packed into chunks of at most `chunk_tokens`
/// whitespace tokens (a longer message forms a chunk of its own).
pub fn chunk_messages(messages: &[&Message], chunk_tokens: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    let mut used = 0usize;
    for m in messages {
        let line = format!(
            "[{}] {}: {}",
            m.timestamp.format("%Y-%m-%d %H:%M"),
            m.speaker,
            m.text
        );
        let n = text::count_tokens(&line);
        if !cur.is_empty() && used + n > chunk_tokens {
            chunks.push(cur.join("\n"));
            cur.clear();
            used = 0;
        }
        cur.push(line);
        used += n;
    }
    if !cur.is_empty() {
        chunks.push(cur.join("\n"));
    }
    chunks
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkIndex {
    pub chunks: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ChunkIndex {
    pub fn build(
        state: &MemoryState,
        embedder: &dyn EmbeddingProvider,
        chunk_tokens: usize,
    ) -> Result<Self> {
        let h = &state.hierarchy;
        let messages: Vec<&Message> = h
            .sessions()
            .values()
            .flat_map(|ids| ids.iter().map(|id| &h.messages()[id]))
            .collect();
        let chunks = chunk_messages(&messages, chunk_tokens);
        let embeddings = if chunks.is_empty() {
            Vec::new()
        } else {
            embedder.embed_batch(&chunks)?
        };
        Ok(ChunkIndex { chunks, embeddings })
    }

    /// Indices of the `k` chunks most similar to the query, best first,
    /// ties by position.
    pub fn top_k(&self, query: &[f64], k: usize) -> Vec<usize> {
        naive_topk_baseline(query, &self.embeddings, k)
    }
}

pub fn naive_topk_baseline(query: &[f64], chunk_embeddings: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = chunk_embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (i, unit_cosine(query, e)))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order.into_iter().take(k).map(|(i, _)| i).collect()
}

// ----- runner -----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "ours")]
    Ours,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "memory_only")]
    MemoryOnly,
    #[serde(rename = "+repsel")]
    RepSel,
    #[serde(rename = "+uncsion")]
    UncSion,
}

impl System {
    pub const ALL: [System; 5] = [
        System::Ours,
        System::Naive,
        System::MemoryOnly,
        System::RepSel,
        System::UncSion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Ours => "ours",
            System::Naive => "naive",
            System::MemoryOnly => "memory_only",
            System::RepSel => "+repsel",
            System::UncSion => "+uncsion",
        }
    }

    /// `(stage1, stage2)` switches for the hierarchical systems.
    pub fn stages(self) -> Option<(bool, bool)> {
        match self {
            System::Ours => Some((true, true)),
            System::Naive => None,
            System::MemoryOnly => Some((false, false)),
            System::RepSel => Some((true, false)),
            System::UncSion => Some((false, true)),
        }
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.trim_start_matches('+');
        match key {
            "ours" | "full" => Ok(System::Ours),
            "naive" => Ok(System::Naive),
            "memory_only" | "memory-only" => Ok(System::MemoryOnly),
            "repsel" => Ok(System::RepSel),
            "uncsion" => Ok(System::UncSion),
            _ => Err(Error::invalid(format!(
                "unknown system {s:?}; expected ours, naive, memory_only, +repsel or +uncsion"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub retrieval: RetrievalConfig,
    pub style: AnswerStyle,
    pub naive_k: usize,
    pub chunk_tokens: usize,
    /// Worker threads; 0 uses the global pool.
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            retrieval: RetrievalConfig::default(),
            style: AnswerStyle::Short,
            naive_k: 20,
            chunk_tokens: 100,
            parallelism: 0,
        }
    }
}

#[derive(Clone)]
pub struct EvalProviders {
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub oracle: Arc<dyn UncertaintyOracle>,
    pub reader: Arc<dyn Reader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub question: String,
    pub category: Category,
    pub gold: String,
    pub prediction: String,
    pub bleu1: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub tokens: u64,
    pub blocks: usize,
    pub hits: BTreeMap<HitClass, usize>,
    pub coverage: Option<CoverageEfficiency>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub count: usize,
    pub bleu1: f64,
    pub f1: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub items: usize,
    pub uncovered: usize,
    pub mean_blocks: Option<f64>,
    pub mean_tokens: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub system: System,
    pub categories: BTreeMap<Category, CategoryRow>,
    pub average: CategoryRow,
    pub tokens_per_query: f64,
    pub hit_distribution: BTreeMap<HitClass, f64>,
    pub coverage: CoverageSummary,
    pub failures: usize,
    pub items: Vec<ItemResult>,
}

impl EvalTable {
    /// Canonical JSON: keys sorted, two-space indentation.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "system: {}", self.system.name());
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>8} {:>8} {:>8}",
            "category", "n", "BLEU-1", "F1", "ROUGE-L"
        );
        let row = |out: &mut String, name: &str, r: &CategoryRow| {
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>8.2} {:>8.2} {:>8.2}",
                name,
                r.count,
                100.0 * r.bleu1,
                100.0 * r.f1,
                100.0 * r.rouge_l
            );
        };
        for (c, r) in &self.categories {
            row(&mut out, c.label(), r);
        }
        row(&mut out, "average", &self.average);
        let _ = writeln!(out, "tokens/query: {:.2}", self.tokens_per_query);
        let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(
            out,
            "coverage: blocks {} tokens {} (uncovered {}/{})",
            fmt_opt(self.coverage.mean_blocks),
            fmt_opt(self.coverage.mean_tokens),
            self.coverage.uncovered,
            self.coverage.items
        );
        let dist: Vec<String> = self
            .hit_distribution
            .iter()
            .map(|(k, v)| {
                format!(
                    "{}={:.3}",
                    serde_json::to_value(k)
                        .ok()
                        .and_then(|x| x.as_str().map(String::from))
                        .unwrap_or_default(),
                    v
                )
            })
            .collect();
        let _ = writeln!(out, "hits: {}", dist.join(" "));
        let _ = writeln!(out, "failures: {}", self.failures);
        out
    }
}

fn score_item(item: &QaItem, prediction: String, blocks: &[&str], tokens: u64) -> ItemResult {
    let mut error = None;
    let bleu = bleu1(&prediction, &item.answer).unwrap_or_else(|e| {
        error = Some(e.to_string());
        0.0
    });
    let report = classify_hits(blocks, &item.answer);
    let mut hits = BTreeMap::new();
    for c in &report.classes {
        *hits.entry(*c).or_insert(0) += 1;
    }
    ItemResult {
        question: item.question.clone(),
        category: item.category,
        gold: item.answer.clone(),
        bleu1: bleu,
        f1: token_f1(&prediction, &item.answer),
        rouge_l: rouge_l(&prediction, &item.answer),
        prediction,
        tokens,
        blocks: blocks.len(),
        hits,
        coverage: coverage_efficiency(blocks, &item.answer).ok(),
        error,
    }
}

fn failed_item(item: &QaItem, e: &Error) -> ItemResult {
    ItemResult {
        question: item.question.clone(),
        category: item.category,
        gold: item.answer.clone(),
        prediction: String::new(),
        bleu1: 0.0,
        f1: 0.0,
        rouge_l: 0.0,
        tokens: 0,
        blocks: 0,
        hits: BTreeMap::new(),
        coverage: None,
        error: Some(e.to_string()),
    }
}

fn evaluate_item(
    item: &QaItem,
    system: System,
    state: &MemoryState,
    providers: &EvalProviders,
    config: &EvalConfig,
    chunks: Option<&ChunkIndex>,
) -> ItemResult {
    let mut rc = config.retrieval.clone();
    let query_embedding = match providers.embedder.embed(&item.question) {
        Ok(v) => v,
        Err(e) => return failed_item(item, &e),
    };
    match (system.stages(), chunks) {
        (Some((s1, s2)), _) => {
            rc.stage1 = s1;
            rc.stage2 = s2;
            let q = Query {
                text: item.question.clone(),
                embedding: query_embedding,
                config: rc,
            };
            match answer(
                &q,
                state,
                providers.oracle.as_ref(),
                providers.reader.as_ref(),
                config.style,
            ) {
                Ok(a) => {
                    let blocks: Vec<&str> =
                        a.retrieval.blocks.iter().map(|b| b.text.as_str()).collect();
                    score_item(item, a.text.clone(), &blocks, a.retrieval.token_usage.total)
                }
                Err(f) => failed_item(item, &f.error),
            }
        }
        (None, Some(index)) => {
            let picked: Vec<ContextBlock> = index
                .top_k(&query_embedding, config.naive_k)
                .into_iter()
                .map(|i| ContextBlock {
                    kind: BlockKind::Messages,
                    id: format!("chunk-{i:04}"),
                    text: index.chunks[i].clone(),
                    tokens: text::count_tokens(&index.chunks[i]),
                })
                .collect();
            let prompt = answer_prompt(config.style, &item.question, &picked);
            match providers.reader.read(&item.question, &prompt, &picked) {
                Ok(reply) => {
                    let blocks: Vec<&str> = picked.iter().map(|b| b.text.as_str()).collect();
                    score_item(item, reply.answer, &blocks, reply.tokens)
                }
                Err(e) => failed_item(item, &e),
            }
        }
        (None, None) => failed_item(item, &Error::invalid("naive system needs a chunk index")),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn row<'a>(items: impl Iterator<Item = &'a ItemResult> + Clone) -> CategoryRow {
    CategoryRow {
        count: items.clone().count(),
        bleu1: mean(items.clone().map(|i| i.bleu1)).unwrap_or(0.0),
        f1: mean(items.clone().map(|i| i.f1)).unwrap_or(0.0),
        rouge_l: mean(items.map(|i| i.rouge_l)).unwrap_or(0.0),
    }
}

/// Evaluates every QA item against `system`. Item failures are recorded
/// and do not stop the run; the table does not depend on thread count.
pub fn run_eval(
    state: &MemoryState,
    qa: &[QaItem],
    system: System,
    providers: &EvalProviders,
    config: &EvalConfig,
) -> Result<EvalTable> {
    config.retrieval.check()?;
    let chunks = match system {
        System::Naive => Some(ChunkIndex::build(
            state,
            providers.embedder.as_ref(),
            config.chunk_tokens,
        )?),
        _ => None,
    };
    let work = || -> Vec<ItemResult> {
        qa.par_iter()
            .map(|item| evaluate_item(item, system, state, providers, config, chunks.as_ref()))
            .collect()
    };
    let items = if config.parallelism > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work)
    } else {
        work()
    };

    let mut categories = BTreeMap::new();
    for c in Category::ALL {
        let of_c = items.iter().filter(|i| i.category == c);
        if of_c.clone().next().is_some() {
            categories.insert(c, row(of_c));
        }
    }
    let mut hit_counts: BTreeMap<HitClass, usize> = BTreeMap::new();
    for i in &items {
        for (k, v) in &i.hits {
            *hit_counts.entry(*k).or_default() += v;
        }
    }
    let hit_total: usize = hit_counts.values().sum();
    let hit_distribution = hit_counts
        .into_iter()
        .map(|(k, v)| (k, v as f64 / hit_total as f64))
        .collect();
    let with_cov: Vec<&CoverageEfficiency> =
        items.iter().filter_map(|i| i.coverage.as_ref()).collect();
    let coverage = CoverageSummary {
        items: with_cov.len(),
        uncovered: with_cov
            .iter()
            .filter(|c| c.blocks_for_coverage.is_none())
            .count(),
        mean_blocks: mean(
            with_cov
                .iter()
                .filter_map(|c| c.blocks_for_coverage)
                .map(|b| b as f64),
        ),
        mean_tokens: mean(
            with_cov
                .iter()
                .filter_map(|c| c.tokens_for_coverage)
                .map(|t| t as f64),
        ),
    };
    Ok(EvalTable {
        system,
        average: row(items.iter()),
        tokens_per_query: mean(items.iter().map(|i| i.tokens as f64)).unwrap_or(0.0),
        categories,
        hit_distribution,
        coverage,
        failures: items.iter().filter(|i| i.error.is_some()).count(),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(bleu1("the cat", "the cat").unwrap(), 1.0);
        assert_eq!(bleu1("dog", "cat").unwrap(), 0.0);
        assert!((bleu1("a a b", "a b c").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu1("", "a").unwrap(), 0.0);
        assert!(bleu1("a", "").is_err());
        assert_eq!(token_f1("a b", "b c"), 0.5);
        assert_eq!(token_f1("x", "y"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert!((rouge_l("a b c", "c b a") - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l("Paris!", "paris"), 1.0);
    }

    #[test]
    fn short_candidate_pays_brevity_penalty() {
        let v = bleu1("a", "a b").unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn hit_classes() {
        let r = classify_hits(&["Paris is lovely"], "Paris");
        assert_eq!(r.classes, vec![HitClass::OneHit]);
        let r = classify_hits(
            &["hiking in march 2024 was fun", "nothing"],
            "hiking in March 2024",
        );
        assert_eq!(r.classes, vec![HitClass::MultiHit, HitClass::Zero]);
        assert!((r.proportions.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(classify_hits(&["x"], "the of and").undefined);
    }

    #[test]
    fn cover_examples() {
        let one = coverage_efficiency(&["alpha beta gamma"], "alpha beta").unwrap();
        assert_eq!(one.blocks_for_coverage, Some(1));
        assert_eq!(one.tokens_for_coverage, Some(3));
        let blocks = ["alpha x", "beta y", "alpha beta z w"];
        for c in [
            greedy_cover(&blocks, "alpha beta").unwrap(),
            exact_cover(&blocks, "alpha beta").unwrap(),
        ] {
            assert_eq!(c.blocks_for_coverage, Some(1));
            assert_eq!(c.tokens_for_coverage, Some(4));
        }
        let missing = coverage_efficiency(&["alpha"], "alpha beta").unwrap();
        assert_eq!(missing.blocks_for_coverage, None);
    }

    #[test]
    fn greedy_cover_can_overshoot() {
        // the largest block first leaves two tokens that need two more blocks
        let blocks = ["t1 t2 t4 t5", "t1 t2 t3", "t4 t5 t6"];
        let gold = "t1 t2 t3 t4 t5 t6";
        assert_eq!(
            greedy_cover(&blocks, gold).unwrap().blocks_for_coverage,
            Some(3)
        );
        assert_eq!(
            exact_cover(&blocks, gold).unwrap().blocks_for_coverage,
            Some(2)
        );
    }

    #[test]
    fn chunking_respects_size() {
        let m = |t: &str| Message {
            id: "m".into(),
            session_id: "s".into(),
            speaker: "A".into(),
            timestamp: crate::model::parse_timestamp("2024-01-01T00:00").unwrap(),
            text: t.into(),
            episode_id: None,
        };
        let msgs = [m("one two three"), m("four five six"), m("seven")];
        let refs: Vec<&Message> = msgs.iter().collect();
        // each line carries 3 extra tokens: date, time and speaker
        let chunks = chunk_messages(&refs, 12);
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| text::count_tokens(c) <= 12));
    }

    #[test]
    fn naive_topk_orders_by_similarity() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(naive_topk_baseline(&[1.0, 0.0], &e, 1), vec![0]);
        assert_eq!(naive_topk_baseline(&[1.0, 0.0], &e, 10), vec![0, 2, 1]);
    }

    #[test]
    fn system_names_parse() {
        for s in System::ALL {
            assert_eq!(s.name().parse::<System>().unwrap(), s);
        }
        assert!("bogus".parse::<System>().is_err());
    }
}
