//! Python bindings: build, persist and query a memory store from Python.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use hiermem::dataset::Dataset;
use hiermem::engine::{Engine, MemoryState};
use hiermem::eval::{self, run_eval, System};
use hiermem::providers::ProviderSuite;
use hiermem::retrieval::{answer, Query};
use hiermem::store::{self, EmbeddingInfo, RunConfig, StoreFile, StoreLock};
use hiermem::structure::{self, hierarchy_guidance, FanoParams};
use hiermem::Error;

create_exception!(hiermem_py, HiermemError, PyException);
create_exception!(hiermem_py, ProviderError, HiermemError);
create_exception!(hiermem_py, StoreError, HiermemError);

fn to_py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::InvalidInput(_) | Error::UnknownId(_) | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(msg)
        }
        Error::Retryable { .. } | Error::Protocol { .. } => ProviderError::new_err(msg),
        Error::Io(_)
        | Error::Json(_)
        | Error::Migration { .. }
        | Error::Validation(_)
        | Error::Locked(_) => StoreError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for hiermem::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Converts any serializable value into plain Python objects via JSON.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let raw = serde_json::to_string(value).map_err(|e| to_py_err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (raw,))?.unbind())
}

/// A memory store held in process. Build one with `Memory(...)` or
/// `Memory.load(path)`, feed it with `ingest`, then `query` or `evaluate`.
#[pyclass(module = "hiermem_py")]
struct Memory {
    file: StoreFile,
}

impl Memory {
    fn suite(&self) -> hiermem::Result<ProviderSuite> {
        ProviderSuite::from_config(
            &self.file.config.providers,
            self.file.config.seed,
            self.file.embedding_cache.clone(),
        )
    }
}

#[pymethods]
impl Memory {
    /// Creates an empty store. `config_json` takes the same document as the
    /// CLI's `--config`; without it the offline deterministic providers are used.
    #[new]
    #[pyo3(signature = (seed = None, config_json = None, split = true, merge = true))]
    fn new(
        seed: Option<u64>,
        config_json: Option<&str>,
        split: bool,
        merge: bool,
    ) -> PyResult<Self> {
        let mut config = match config_json {
            Some(raw) => serde_json::from_str::<RunConfig>(raw)
                .map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
            None => {
                let mut c = RunConfig::default();
                c.providers.offline = true;
                c
            }
        };
        if let Some(seed) = seed {
            config.seed = seed;
        }
        config.structure.split_enabled = split;
        config.structure.merge_enabled = merge;
        let config = config
            .resolved()
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let suite = ProviderSuite::from_config(&config.providers, config.seed, Default::default())
            .py_err()?;
        let embedder = suite.embedding();
        let dim = embedder.dimension();
        let embedding = EmbeddingInfo {
            provider: embedder.id().to_string(),
            dimension: dim,
        };
        let state = MemoryState::new(dim, config.structure.knn_k);
        Ok(Memory {
            file: StoreFile::new(state, embedding, config),
        })
    }

    /// Loads a store file written by `save` or by the CLI.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let _lock = StoreLock::acquire(&path).py_err()?;
        Ok(Memory {
            file: store::load(&path).py_err()?,
        })
    }

    /// Writes the store atomically.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let _lock = StoreLock::acquire(&path).py_err()?;
        store::save(&self.file, &path).py_err()
    }

    /// Canonical JSON of the whole store.
    fn to_json(&self) -> PyResult<String> {
        self.file.to_canonical_json().py_err()
    }

    /// Ingests the conversation of a dataset file and returns the ingest report.
    fn ingest(&mut self, py: Python<'_>, dataset_path: PathBuf) -> PyResult<Py<PyAny>> {
        let dataset = Dataset::load(&dataset_path).py_err()?;
        let suite = self.suite().py_err()?;
        let config = &self.file.config;
        let mut engine = Engine::new(
            self.file.state.clone(),
            config.structure.clone(),
            config.seed,
            suite.embedding(),
            suite.generator.clone(),
        )
        .py_err()?;
        let report = engine.ingest(&dataset.conversation).py_err()?;
        self.file.state = engine.into_state();
        self.file.embedding_cache = suite.embedder.snapshot();
        to_py(py, &report)
    }

    /// Answers a question; returns `{"answer": str, "retrieval": {...}}`.
    #[pyo3(signature = (question, alpha = None, coverage_target = None, delta = None, budget = None))]
    fn query(
        &self,
        py: Python<'_>,
        question: &str,
        alpha: Option<f64>,
        coverage_target: Option<f64>,
        delta: Option<f64>,
        budget: Option<usize>,
    ) -> PyResult<Py<PyAny>> {
        let mut cfg = self.file.config.query.clone();
        if let Some(v) = alpha {
            cfg.alpha = v;
        }
        if let Some(v) = coverage_target {
            cfg.coverage_target = v;
        }
        if let Some(v) = delta {
            cfg.delta = v;
        }
        if let Some(v) = budget {
            cfg.budget = v;
        }
        cfg.check().py_err()?;
        let suite = self.suite().py_err()?;
        let q = Query::new(question, suite.embedder.as_ref(), cfg).py_err()?;
        let ans = answer(
            &q,
            &self.file.state,
            suite.oracle.as_ref(),
            suite.reader.as_ref(),
            self.file.config.style,
        )
        .map_err(|f| to_py_err(f.error))?;
        to_py(
            py,
            &serde_json::json!({"answer": ans.text, "retrieval": ans.retrieval}),
        )
    }

    /// Node counts, theme cap and current guidance score.
    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let h = &self.file.state.hierarchy;
        let guidance = if h.themes().is_empty() {
            None
        } else {
            Some(hierarchy_guidance(h, self.file.config.structure.epsilon).py_err()?)
        };
        let v = serde_json::json!({
            "messages": h.messages().len(),
            "episodes": h.episodes().len(),
            "facts": h.semantics().len(),
            "themes": h.themes().len(),
            "theme_cap": h.theme_cap(),
            "guidance": guidance,
            "reassignment_ratio": structure::reassignment_ratio(h),
            "embedding": self.file.embedding,
        });
        to_py(py, &v)
    }

    /// Runs the QA items of a dataset through one system
    /// (`ours`, `naive`, `memory_only`, `+repsel`, `+uncsion`) and returns the
    /// result table.
    fn evaluate(&self, py: Python<'_>, dataset_path: PathBuf, system: &str) -> PyResult<Py<PyAny>> {
        let system: System = system.parse().py_err()?;
        let dataset = Dataset::load(&dataset_path).py_err()?;
        let suite = self.suite().py_err()?;
        let table = run_eval(
            &self.file.state,
            &dataset.qa,
            system,
            &suite.eval_providers(),
            &self.file.config.eval_config(),
        )
        .py_err()?;
        to_py(py, &table)
    }

    fn __repr__(&self) -> String {
        let h = &self.file.state.hierarchy;
        format!(
            "Memory(messages={}, episodes={}, facts={}, themes={})",
            h.messages().len(),
            h.episodes().len(),
            h.semantics().len(),
            h.themes().len()
        )
    }
}

/// Theme cap `round(2^((bits + 1) / accuracy))`.
#[pyfunction]
fn fano_cap(bits: f64, accuracy: f64) -> PyResult<usize> {
    structure::fano_cap(FanoParams {
        bits,
        target_accuracy: accuracy,
    })
    .py_err()
}

/// Balance term of the guidance score for the given theme sizes.
#[pyfunction]
fn sparsity_score(sizes: Vec<usize>) -> PyResult<f64> {
    structure::sparsity_score(&sizes).py_err()
}

#[pyfunction]
fn bleu1(candidate: &str, reference: &str) -> PyResult<f64> {
    eval::bleu1(candidate, reference).py_err()
}

#[pyfunction]
fn token_f1(candidate: &str, reference: &str) -> f64 {
    eval::token_f1(candidate, reference)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f64 {
    eval::rouge_l(candidate, reference)
}

/// Fewest context blocks (then fewest tokens) covering the gold answer.
#[pyfunction]
fn coverage_efficiency(py: Python<'_>, blocks: Vec<String>, gold: &str) -> PyResult<Py<PyAny>> {
    let refs: Vec<&str> = blocks.iter().map(String::as_str).collect();
    let ce = eval::coverage_efficiency(&refs, gold).py_err()?;
    to_py(py, &ce)
}

#[pymodule]
fn hiermem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("HiermemError", py.get_type::<HiermemError>())?;
    m.add("ProviderError", py.get_type::<ProviderError>())?;
    m.add("StoreError", py.get_type::<StoreError>())?;
    m.add_class::<Memory>()?;
    m.add_function(wrap_pyfunction!(fano_cap, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_score, m)?)?;
    m.add_function(wrap_pyfunction!(bleu1, m)?)?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_efficiency, m)?)?;
    Ok(())
}
