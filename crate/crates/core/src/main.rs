use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};

use hiermem::dataset::Dataset;
use hiermem::engine::{Engine, MemoryState};
use hiermem::eval::{run_eval, System};
use hiermem::model::ReassignCause;
use hiermem::providers::ProviderSuite;
use hiermem::retrieval::{answer, Query};
use hiermem::store::{self, EmbeddingInfo, RunConfig, StoreFile, StoreLock};
use hiermem::structure::{
    fano_bound, fano_cap, hierarchy_guidance, reassignment_ratio, FanoParams,
};
use hiermem::Error;

/// `println!` that stops writing, without failing, once stdout is closed.
macro_rules! out {
    ($($t:tt)*) => {
        emit(format_args!("{}\n", format_args!($($t)*)))
    };
}

static STDOUT_CLOSED: AtomicBool = AtomicBool::new(false);

fn emit(args: fmt::Arguments) {
    if STDOUT_CLOSED.load(Ordering::Relaxed) {
        return;
    }
    let mut stdout = io::stdout().lock();
    if let Err(e) = stdout.write_fmt(args).and_then(|_| stdout.flush()) {
        if e.kind() != io::ErrorKind::BrokenPipe {
            eprintln!("error: cannot write to stdout: {e}");
        }
        STDOUT_CLOSED.store(true, Ordering::Relaxed);
    }
}

#[derive(Parser)]
#[command(
    name = "hiermem",
    version,
    about = "Hierarchical conversational memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distil a dataset's conversation into a store (created if missing)
    Ingest(IngestArgs),
    /// Answer one question from a store
    Query(QueryArgs),
    /// Guidance score, graph degrees and sizes
    Stats(StoreArg),
    /// Split/merge activity and reassignment ratio
    RestructureReport(StoreArg),
    /// Evaluate a dataset's questions against a store
    Eval(EvalArgs),
    /// Print the theme cap for a bit budget and target accuracy
    Cap(CapArgs),
}

#[derive(Args)]
struct StoreArg {
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Run with the deterministic offline providers
    #[arg(long)]
    offline: bool,
    /// RunConfig JSON for a new store
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable guided splitting
    #[arg(long)]
    no_split: bool,
    /// Disable guided merging
    #[arg(long)]
    no_merge: bool,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    coverage_target: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    budget: Option<usize>,
    /// Print the full retrieval result as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// ours, naive, memory_only, +repsel or +uncsion
    #[arg(long, allow_hyphen_values = true)]
    system: String,
    /// Also write the JSON table here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of the text table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CapArgs {
    #[arg(long)]
    bits: f64,
    #[arg(long)]
    accuracy: f64,
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) if e.is_provider() => 3,
            CliError::Run(_) => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Query(a) => query(a),
        Command::Stats(a) => stats(&a.store),
        Command::RestructureReport(a) => restructure_report(&a.store),
        Command::Eval(a) => eval(a),
        Command::Cap(a) => cap(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Run(Error::Validation(vs)) => {
                    eprintln!("error: store failed validation");
                    for v in vs {
                        eprintln!("  {v}");
                    }
                }
                CliError::Run(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.code())
        }
    }
}

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let raw = std::fs::read_to_string(path).map_err(Error::from)?;
    serde_json::from_str(&raw).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn ingest(a: IngestArgs) -> CliResult<()> {
    let _lock = StoreLock::acquire(&a.store)?;
    let existing = a.store.exists();
    let (state, cache, config) = if existing {
        if a.config.is_some() || a.seed.is_some() || a.no_split || a.no_merge {
            return Err(usage(
                "store exists; its recorded configuration cannot be changed",
            ));
        }
        let s = store::load(&a.store)?;
        if a.offline != s.config.providers.offline {
            return Err(usage("--offline must match how the store was built"));
        }
        (s.state, s.embedding_cache, s.config)
    } else {
        let mut config = match &a.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        if a.offline {
            if config.providers.embedding.is_some()
                || config.providers.chat.is_some()
                || config.providers.judge.is_some()
            {
                return Err(usage(
                    "--offline cannot be mixed with remote provider endpoints",
                ));
            }
            config.providers.offline = true;
        }
        if let Some(seed) = a.seed {
            config.seed = seed;
        }
        if a.no_split {
            config.structure.split_enabled = false;
        }
        if a.no_merge {
            config.structure.merge_enabled = false;
        }
        let config = config.resolved().map_err(|e| usage(e.to_string()))?;
        let suite = ProviderSuite::from_config(&config.providers, config.seed, Default::default())?;
        let dim = hiermem::embedding::EmbeddingProvider::dimension(suite.embedder.as_ref());
        (
            MemoryState::new(dim, config.structure.knn_k),
            Default::default(),
            config,
        )
    };
    let dataset = Dataset::load(&a.dataset)?;
    let suite = ProviderSuite::from_config(&config.providers, config.seed, cache)?;
    let mut engine = Engine::new(
        state,
        config.structure.clone(),
        config.seed,
        suite.embedding(),
        suite.generator.clone(),
    )?;
    let report = engine.ingest(&dataset.conversation)?;
    let embedding = EmbeddingInfo {
        provider: engine.embedder().id().to_string(),
        dimension: engine.embedder().dimension(),
    };
    let mut file = StoreFile::new(engine.into_state(), embedding, config);
    file.embedding_cache = suite.embedder.snapshot();
    store::save(&file, &a.store)?;

    out!(
        "ingested {} messages into {} episodes; {} new facts ({} duplicates)",
        report.messages_added,
        report.episodes_added,
        report.semantics_added,
        report.semantics_deduplicated
    );
    out!("N (facts): {}", report.semantic_count);
    out!("K (themes): {}", report.theme_count);
    out!("reassignment ratio: {:.4}", report.reassignment_ratio);
    out!("theme size histogram:");
    for (size, count) in &report.theme_size_histogram {
        out!("  {size:>3}: {count}");
    }
    Ok(())
}

fn load_store(path: &Path) -> CliResult<(StoreFile, StoreLock)> {
    let lock = StoreLock::acquire(path)?;
    Ok((store::load(path)?, lock))
}

fn query(a: QueryArgs) -> CliResult<()> {
    let (file, _lock) = load_store(&a.store)?;
    let mut cfg = file.config.query.clone();
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.coverage_target {
        cfg.coverage_target = v;
    }
    if let Some(v) = a.delta {
        cfg.delta = v;
    }
    if let Some(v) = a.budget {
        cfg.budget = v;
    }
    cfg.check().map_err(|e| usage(e.to_string()))?;
    let suite = ProviderSuite::from_config(
        &file.config.providers,
        file.config.seed,
        file.embedding_cache.clone(),
    )?;
    let q = Query::new(&a.question, suite.embedder.as_ref(), cfg)?;
    let out = answer(
        &q,
        &file.state,
        suite.oracle.as_ref(),
        suite.reader.as_ref(),
        file.config.style,
    );
    let ans = match out {
        Ok(ans) => ans,
        Err(f) => {
            if let Some(r) = &f.retrieval {
                eprintln!("context assembled before the failure:\n{}", r.context);
            }
            return Err(CliError::Run(f.error));
        }
    };
    if a.json {
        let v = serde_json::json!({"answer": ans.text, "retrieval": ans.retrieval});
        out!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
        return Ok(());
    }
    let r = &ans.retrieval;
    out!("answer: {}", ans.text);
    out!("");
    out!("{}", r.context);
    out!("");
    out!("themes: {}", r.themes_selected.join(", "));
    out!("facts: {}", r.semantics_selected.join(", "));
    for e in &r.episodes_included {
        out!(
            "episode {}: uncertainty {} -> {}{}",
            e.episode_id,
            fmt_reading(e.uncertainty_before),
            fmt_reading(e.uncertainty_after),
            if e.messages_admitted {
                " (+messages)"
            } else {
                ""
            }
        );
    }
    let u = &r.token_usage;
    out!(
        "tokens: context {} auxiliary {} reader {} total {}",
        u.context_tokens,
        u.auxiliary_call_tokens,
        u.reader_call_tokens,
        u.total
    );
    let mut flags = Vec::new();
    if r.empty_hierarchy {
        flags.push("empty store");
    }
    if r.degraded {
        flags.push("degraded: uncertainty oracle failed");
    }
    if r.budget_limited {
        flags.push("budget reached");
    }
    if !flags.is_empty() {
        out!("flags: {}", flags.join("; "));
    }
    Ok(())
}

fn degree_summary(degrees: &[usize]) -> String {
    if degrees.is_empty() {
        return "empty".into();
    }
    let min = degrees.iter().min().unwrap();
    let max = degrees.iter().max().unwrap();
    let mean = degrees.iter().sum::<usize>() as f64 / degrees.len() as f64;
    format!(
        "nodes {} degree min {min} mean {mean:.2} max {max}",
        degrees.len()
    )
}

fn stats(path: &Path) -> CliResult<()> {
    let (file, _lock) = load_store(path)?;
    let h = &file.state.hierarchy;
    out!("messages: {}", h.messages().len());
    out!("episodes: {}", h.episodes().len());
    out!("facts: {}", h.semantics().len());
    out!("themes: {}", h.themes().len());
    out!(
        "theme cap: {}",
        h.theme_cap().map_or("none".to_string(), |c| c.to_string())
    );
    if !h.themes().is_empty() {
        let g = hierarchy_guidance(h, file.config.structure.epsilon)?;
        out!(
            "guidance: sparsity {:.6} semantic {:.6} total {:.6}",
            g.sparsity,
            g.semantic,
            g.total
        );
    }
    out!(
        "theme graph: {}",
        degree_summary(&file.state.theme_graph.degrees())
    );
    out!(
        "fact graph: {}",
        degree_summary(&file.state.semantic_graph.degrees())
    );
    out!(
        "embedding: {} (dim {})",
        file.embedding.provider,
        file.embedding.dimension
    );
    Ok(())
}

fn restructure_report(path: &Path) -> CliResult<()> {
    let (file, _lock) = load_store(path)?;
    let h = &file.state.hierarchy;
    let log = h.reassignment_log();
    let moves = |cause: ReassignCause| {
        let entries: Vec<_> = log.iter().filter(|r| r.cause == cause).collect();
        let events: std::collections::BTreeSet<(Option<&String>, &String)> = entries
            .iter()
            .map(|r| (r.old_theme.as_ref(), &r.new_theme))
            .collect();
        (entries.len(), events.len())
    };
    let (split_moves, split_targets) = moves(ReassignCause::Split);
    let (merge_moves, merges) = moves(ReassignCause::Merge);
    out!("themes created by splits: {split_targets}");
    out!("facts moved by splits: {split_moves}");
    out!("merges: {merges}");
    out!("facts moved by merges: {merge_moves}");
    out!("facts: {}", h.semantics().len());
    out!("reassignment ratio: {:.4}", reassignment_ratio(h));
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let system: System = a.system.parse().map_err(|e: Error| usage(e.to_string()))?;
    let (file, _lock) = load_store(&a.store)?;
    let dataset = Dataset::load(&a.dataset)?;
    let suite = ProviderSuite::from_config(
        &file.config.providers,
        file.config.seed,
        file.embedding_cache.clone(),
    )?;
    let table = run_eval(
        &file.state,
        &dataset.qa,
        system,
        &suite.eval_providers(),
        &file.config.eval_config(),
    )?;
    let json = table.to_json()?;
    if let Some(out) = &a.out {
        std::fs::write(out, &json).map_err(Error::from)?;
    }
    if a.json {
        emit(format_args!("{json}"));
    } else {
        emit(format_args!("{}", table.to_text()));
    }
    Ok(())
}

fn fmt_reading(v: Option<f64>) -> String {
    v.map_or_else(|| "ungated".to_string(), |x| format!("{x:.3}"))
}

fn cap(a: CapArgs) -> CliResult<()> {
    let params = FanoParams {
        bits: a.bits,
        target_accuracy: a.accuracy,
    };
    let bound = fano_bound(params).map_err(|e| usage(e.to_string()))?;
    let cap = fano_cap(params).map_err(|e| usage(e.to_string()))?;
    out!("{cap}");
    eprintln!("bound 2^(({} + 1) / {}) = {bound:.4}", a.bits, a.accuracy);
    Ok(())
}
