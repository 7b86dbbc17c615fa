mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::OnceLock;

use proptest::prelude::*;

use hiermem::dataset::{Conversation, Session, Turn};
use hiermem::distill::{detect_boundary, RuleBasedProvider};
use hiermem::embedding::DeterministicEmbedder;
use hiermem::engine::MemoryState;
use hiermem::eval::{bleu1, classify_hits, exact_cover, greedy_cover, rouge_l, token_f1};
use hiermem::graph::{GraphLevel, NavGraph};
use hiermem::model::{parse_timestamp, Message};
use hiermem::retrieval::{
    retrieve, select_representatives, CandidateSet, OfflineOracle, Query, RetrievalConfig,
    RetrievalResult,
};
use hiermem::structure::StructureConfig;
use hiermem::text;

const VOCAB: &[&str] = &[
    "ben", "hospital", "nurse", "cello", "teacher", "lisbon", "trip", "biscuit", "vet", "clara",
    "kyoto", "denver", "car", "subaru", "kitchen", "builders", "food", "bank", "library", "band",
    "gig", "dog", "frisbee", "garden", "the", "a", "and",
];

fn words(min: usize, max: usize) -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(VOCAB), min..max).prop_map(|w| w.join(" "))
}

fn fixture() -> &'static MemoryState {
    static STATE: OnceLock<MemoryState> = OnceLock::new();
    STATE.get_or_init(common::fixture_state)
}

fn embedder() -> &'static DeterministicEmbedder {
    static E: OnceLock<DeterministicEmbedder> = OnceLock::new();
    E.get_or_init(|| DeterministicEmbedder::new(common::DIM, common::SEED).unwrap())
}

// ----- Stage I -----

#[derive(Debug, Clone)]
struct RawCandidates {
    nodes: Vec<(String, f64)>,
    edges: Vec<(String, String, f64)>,
}

fn raw_candidates() -> impl Strategy<Value = RawCandidates> {
    (1usize..9).prop_flat_map(|n| {
        let sims = proptest::collection::vec(-1.0f64..1.0, n);
        let edges = proptest::collection::vec((0..n, 0..n, 0.01f64..1.0), 0..(n * 3));
        (sims, edges).prop_map(|(sims, edges)| RawCandidates {
            nodes: sims
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("n{i}"), s))
                .collect(),
            edges: edges
                .into_iter()
                .map(|(a, b, w)| (format!("n{a}"), format!("n{b}"), w))
                .collect(),
        })
    })
}

/// Reference scorer kept separate from the library's index-based loop.
struct StageOneOracle {
    relevance: BTreeMap<String, f64>,
    out: BTreeMap<String, BTreeMap<String, f64>>,
    z: f64,
}

impl StageOneOracle {
    fn new(raw: &RawCandidates) -> Self {
        let lo = raw.nodes.iter().map(|n| n.1).fold(f64::INFINITY, f64::min);
        let hi = raw
            .nodes
            .iter()
            .map(|n| n.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let relevance = raw
            .nodes
            .iter()
            .map(|(id, s)| {
                let r = if hi > lo { (s - lo) / (hi - lo) } else { 1.0 };
                (id.clone(), r)
            })
            .collect();
        let mut out: BTreeMap<String, BTreeMap<String, f64>> = raw
            .nodes
            .iter()
            .map(|(id, _)| (id.clone(), BTreeMap::new()))
            .collect();
        for (a, b, w) in &raw.edges {
            if a != b {
                out.get_mut(a).unwrap().entry(b.clone()).or_insert(*w);
            }
        }
        let z = out
            .values()
            .map(|m| 1.0 + m.values().sum::<f64>())
            .fold(0.0, f64::max);
        StageOneOracle { relevance, out, z }
    }

    fn score(&self, id: &str, covered: &BTreeSet<String>, alpha: f64) -> f64 {
        let mut gain = if covered.contains(id) { 0.0 } else { 1.0 };
        for (to, w) in &self.out[id] {
            if !covered.contains(to) {
                gain += w;
            }
        }
        alpha * gain / self.z + (1.0 - alpha) * self.relevance[id]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn each_greedy_pick_is_the_exhaustive_argmax(
        raw in raw_candidates(),
        alpha in 0.0f64..=1.0,
        target in 0.1f64..=1.0,
        max in 1usize..10,
    ) {
        let set = CandidateSet::from_parts(raw.nodes.clone(), &raw.edges).unwrap();
        let steps = select_representatives(&set, alpha, target, max);
        let oracle = StageOneOracle::new(&raw);
        let n = raw.nodes.len();
        let mut chosen = BTreeSet::new();
        let mut covered: BTreeSet<String> = BTreeSet::new();
        for step in &steps {
            prop_assert!((covered.len() as f64) < target * n as f64);
            let best = oracle
                .relevance
                .keys()
                .filter(|id| !chosen.contains(*id))
                .map(|id| oracle.score(id, &covered, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            let mine = oracle.score(&step.id, &covered, alpha);
            prop_assert!((mine - best).abs() < 1e-12, "picked {} at {mine}, best {best}", step.id);
            prop_assert!((step.score - mine).abs() < 1e-12);
            chosen.insert(step.id.clone());
            covered.insert(step.id.clone());
            covered.extend(oracle.out[&step.id].keys().cloned());
            prop_assert_eq!(step.covered, covered.len());
        }
        prop_assert!(steps.len() == max.min(n) || covered.len() as f64 >= target * n as f64);
    }

    #[test]
    fn relevance_only_selection_follows_similarity_rank(raw in raw_candidates(), max in 1usize..10) {
        let set = CandidateSet::from_parts(raw.nodes.clone(), &raw.edges).unwrap();
        let steps = select_representatives(&set, 0.0, 1.0, max);
        let mut ranked = raw.nodes.clone();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let picked: Vec<&str> = steps.iter().map(|s| s.id.as_str()).collect();
        let expect: Vec<&str> = ranked.iter().take(picked.len()).map(|n| n.0.as_str()).collect();
        prop_assert_eq!(picked, expect);
    }

    #[test]
    fn coverage_never_decreases(raw in raw_candidates(), alpha in 0.0f64..=1.0) {
        let set = CandidateSet::from_parts(raw.nodes.clone(), &raw.edges).unwrap();
        let steps = select_representatives(&set, alpha, 1.0, usize::MAX);
        prop_assert!(steps.windows(2).all(|w| w[0].covered <= w[1].covered));
        prop_assert!(steps.last().is_none_or(|s| s.covered == raw.nodes.len()));
    }
}

// ----- Stage II and retrieval -----

fn stage_two_config() -> impl Strategy<Value = RetrievalConfig> {
    (0.0f64..0.3, 1usize..4, 200usize..3000, any::<bool>()).prop_map(
        |(delta, patience, budget, expand)| RetrievalConfig {
            delta,
            patience,
            budget,
            expand_messages: expand,
            ..RetrievalConfig::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gated_inclusion_respects_delta_patience_and_budget(
        question in words(2, 8),
        cfg in stage_two_config(),
    ) {
        let q = Query::new(&question, embedder(), cfg.clone()).unwrap();
        let r = retrieve(&q, fixture(), &OfflineOracle).unwrap();
        prop_assert!(!r.degraded);
        prop_assert!(r.token_usage.context_tokens <= cfg.budget);
        let included: Vec<&str> = r.episodes_included.iter().map(|e| e.episode_id.as_str()).collect();
        let mut run = 0usize;
        let mut next = 0usize;
        for id in &r.episodes_tried {
            prop_assert!(run < cfg.patience, "offered an episode after {run} misses");
            if next < included.len() && included[next] == id {
                next += 1;
                run = 0;
            } else {
                run += 1;
            }
        }
        prop_assert_eq!(next, included.len());
        for e in &r.episodes_included {
            let (b, a) = (e.uncertainty_before.unwrap(), e.uncertainty_after.unwrap());
            prop_assert!(b - a >= cfg.delta);
            prop_assert!((0.0..=1.0).contains(&a));
        }
        let admitted: usize = r.episodes_included.iter().filter(|e| e.messages_admitted).count();
        prop_assert_eq!(admitted == 0, r.messages_included.is_empty());
        prop_assert_eq!(
            r.token_usage.total,
            r.token_usage.context_tokens as u64 + r.token_usage.auxiliary_call_tokens
        );
    }

    #[test]
    fn ungated_inclusion_places_top_episodes(question in words(2, 8), n in 0usize..5) {
        let cfg = RetrievalConfig { stage2: false, ungated_episodes: n, ..RetrievalConfig::default() };
        let q = Query::new(&question, embedder(), cfg).unwrap();
        let r = retrieve(&q, fixture(), &OfflineOracle).unwrap();
        prop_assert!(r.episodes_included.len() <= n);
        prop_assert!(r.episodes_included.iter().all(|e| e.uncertainty_before.is_none()));
        prop_assert_eq!(r.token_usage.auxiliary_call_tokens, 0);
    }

    #[test]
    fn retrieval_is_deterministic_and_round_trips(question in words(1, 8)) {
        let cfg = RetrievalConfig::default();
        let q = Query::new(&question, embedder(), cfg.clone()).unwrap();
        let a = retrieve(&q, fixture(), &OfflineOracle).unwrap();
        let q2 = Query::new(&question, embedder(), cfg).unwrap();
        let b = retrieve(&q2, fixture(), &OfflineOracle).unwrap();
        prop_assert_eq!(&a, &b);
        let back: RetrievalResult = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert!(a.themes_selected.len() <= 5);
        prop_assert!(a.semantics_selected.len() <= 10);
    }
}

// ----- evaluation metrics -----

fn brute_force_cover(blocks: &[String], gold: &str) -> Option<(usize, usize)> {
    let units: HashSet<String> = text::content_tokens(gold).into_iter().collect();
    let mut best: Option<(usize, usize)> = None;
    for subset in 0u32..(1 << blocks.len()) {
        let mut seen = HashSet::new();
        let (mut n, mut t) = (0, 0);
        for (i, b) in blocks.iter().enumerate() {
            if subset & (1 << i) != 0 {
                n += 1;
                t += text::count_tokens(b);
                seen.extend(text::metric_tokens(b));
            }
        }
        if units.iter().all(|u| seen.contains(u)) && best.is_none_or(|cur| (n, t) < cur) {
            best = Some((n, t));
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hit_classes_ignore_block_order(
        (blocks, shuffled) in proptest::collection::vec(words(1, 10), 0..8)
            .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
        gold in words(1, 5),
    ) {
        let refs: Vec<&str> = blocks.iter().map(String::as_str).collect();
        let perm: Vec<&str> = shuffled.iter().map(String::as_str).collect();
        let a = classify_hits(&refs, &gold);
        let b = classify_hits(&perm, &gold);
        prop_assert_eq!(&a.proportions, &b.proportions);
        let mut ca = a.classes.clone();
        let mut cb = b.classes.clone();
        ca.sort();
        cb.sort();
        prop_assert_eq!(ca, cb);
        if !a.undefined && !a.classes.is_empty() {
            let total: f64 = a.proportions.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_cover_matches_subset_enumeration(
        blocks in proptest::collection::vec(words(1, 8), 0..10),
        gold in words(1, 5),
    ) {
        prop_assume!(!text::content_tokens(&gold).is_empty());
        let refs: Vec<&str> = blocks.iter().map(String::as_str).collect();
        let exact = exact_cover(&refs, &gold).unwrap();
        let want = brute_force_cover(&blocks, &gold);
        prop_assert_eq!(exact.blocks_for_coverage, want.map(|w| w.0));
        prop_assert_eq!(exact.tokens_for_coverage, want.map(|w| w.1));
        let greedy = greedy_cover(&refs, &gold).unwrap();
        prop_assert_eq!(greedy.blocks_for_coverage.is_some(), want.is_some());
        if let (Some(g), Some(e)) = (greedy.blocks_for_coverage, exact.blocks_for_coverage) {
            prop_assert!(g >= e);
        }
    }

    #[test]
    fn adding_blocks_never_worsens_cover(
        blocks in proptest::collection::vec(words(1, 8), 0..8),
        extra in words(1, 8),
        gold in words(1, 5),
    ) {
        prop_assume!(!text::content_tokens(&gold).is_empty());
        let refs: Vec<&str> = blocks.iter().map(String::as_str).collect();
        let before = exact_cover(&refs, &gold).unwrap().blocks_for_coverage;
        let mut more = refs.clone();
        more.push(&extra);
        let after = exact_cover(&more, &gold).unwrap().blocks_for_coverage;
        if let Some(b) = before {
            prop_assert!(after.unwrap() <= b);
        }
    }

    #[test]
    fn overlap_metrics_are_bounded(cand in words(0, 10), gold in words(0, 10)) {
        for v in [token_f1(&cand, &gold), rouge_l(&cand, &gold)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Ok(b) = bleu1(&cand, &gold) {
            prop_assert!((0.0..=1.0).contains(&b));
        }
        if !text::metric_tokens(&gold).is_empty() {
            prop_assert!((token_f1(&gold, &gold) - 1.0).abs() < 1e-12);
            prop_assert!((rouge_l(&gold, &gold) - 1.0).abs() < 1e-12);
            prop_assert!((bleu1(&gold, &gold).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

// ----- distillation and structure -----

fn message(id: usize, minutes: i64, body: &str) -> Message {
    let base = parse_timestamp("2024-01-01T08:00").unwrap();
    Message {
        id: format!("m{id}"),
        session_id: "s".into(),
        speaker: "A".into(),
        timestamp: base + chrono::Duration::minutes(minutes),
        text: body.into(),
        episode_id: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn longer_gaps_never_undo_a_split(
        history in proptest::collection::vec(words(1, 8), 1..14),
        incoming in words(1, 8),
        gap in 0i64..120,
        extra in 0i64..120,
    ) {
        let provider = RuleBasedProvider::default();
        let hist: Vec<Message> = history.iter().enumerate().map(|(i, t)| message(i, i as i64, t)).collect();
        let last = hist.len() as i64 - 1;
        let near = vec![message(99, last + gap, &incoming)];
        let far = vec![message(99, last + gap + extra, &incoming)];
        let a = detect_boundary(&provider, &hist, &near).unwrap().split;
        let b = detect_boundary(&provider, &hist, &far).unwrap().split;
        prop_assert!(!a || b);
        if gap + extra > 30 {
            prop_assert!(b);
        }
    }

    #[test]
    fn incremental_graph_matches_rebuild(
        ops in proptest::collection::vec((0usize..12, any::<bool>(), proptest::collection::vec(-1.0f64..1.0, 4)), 1..40),
        k in 1usize..5,
    ) {
        let mut g = NavGraph::new(GraphLevel::Semantic, k, 4);
        for (id, remove, v) in ops {
            let id = format!("x{id:02}");
            if remove {
                if g.contains(&id) {
                    g.remove_node(&id).unwrap();
                }
            } else if v.iter().any(|x| x.abs() > 1e-6) {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                g.upsert_node(&id, v.iter().map(|x| x / norm).collect()).unwrap();
            }
            prop_assert_eq!(g.adjacency(), &g.brute_force_adjacency());
        }
    }
}

fn conversation() -> impl Strategy<Value = Conversation> {
    proptest::collection::vec((words(3, 9), 1i64..50), 5..40).prop_map(|turns| {
        let base = parse_timestamp("2024-02-01T08:00").unwrap();
        let mut t = base;
        let turns = turns
            .into_iter()
            .map(|(text, step)| {
                t += chrono::Duration::minutes(step);
                Turn {
                    speaker: "A".into(),
                    timestamp: t.format("%Y-%m-%dT%H:%M:%S").to_string(),
                    text,
                }
            })
            .collect();
        Conversation {
            sessions: vec![Session {
                session_id: "p".into(),
                turns,
            }],
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ingestion_preserves_invariants_and_cap(conv in conversation(), cap in 3usize..8) {
        let mut engine = common::offline_engine(StructureConfig {
            theme_cap: cap,
            merge_interval: 5,
            ..StructureConfig::default()
        });
        let report = engine.ingest(&conv).unwrap();
        let state = engine.into_state();
        prop_assert!(state.validate().is_empty(), "{:?}", state.validate());
        prop_assert!(state.hierarchy.themes().values().all(|t| t.size() <= cap));
        let members: usize = state.hierarchy.themes().values().map(|t| t.size()).sum();
        prop_assert_eq!(members, state.hierarchy.semantics().len());
        prop_assert_eq!(report.semantic_count, state.hierarchy.semantics().len());
    }
}
