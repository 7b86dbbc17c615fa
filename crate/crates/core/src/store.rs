//! Single-file JSON store and run configuration.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chat::ChatConfig;
use crate::embedding::{EmbeddingCache, RemoteEmbeddingConfig};
use crate::engine::MemoryState;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::retrieval::{AnswerStyle, RetrievalConfig};
use crate::structure::{fano_cap, FanoParams, StructureConfig};

pub const SCHEMA_VERSION: u64 = 1;

/// Offline embedding dimension.
pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    /// Use the deterministic embedder, rule-based generator, offline
    /// oracle and offline reader, all together.
    pub offline: bool,
    pub offline_dim: usize,
    pub embedding: Option<RemoteEmbeddingConfig>,
    pub chat: Option<ChatConfig>,
    /// Separate judge for uncertainty when the reader exposes no
    /// log-probabilities.
    pub judge: Option<ChatConfig>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            offline: false,
            offline_dim: DEFAULT_DIM,
            embedding: None,
            chat: None,
            judge: None,
        }
    }
}

impl ProviderConfig {
    pub fn check(&self) -> Result<()> {
        let any_remote = self.embedding.is_some() || self.chat.is_some() || self.judge.is_some();
        if self.offline && any_remote {
            return Err(Error::invalid(
                "offline mode cannot be combined with remote provider endpoints",
            ));
        }
        if !self.offline && (self.embedding.is_none() || self.chat.is_none()) {
            return Err(Error::invalid(
                "online mode needs both an embedding and a chat endpoint",
            ));
        }
        if self.offline && self.offline_dim == 0 {
            return Err(Error::invalid("offline_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub structure: StructureConfig,
    /// When set, the theme cap is derived from these parameters.
    pub fano: Option<FanoParams>,
    pub query: RetrievalConfig,
    pub style: AnswerStyle,
    pub naive_k: usize,
    pub chunk_tokens: usize,
    pub parallelism: usize,
    pub providers: ProviderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        RunConfig {
            seed: 42,
            structure: StructureConfig::default(),
            fano: Some(FanoParams::default()),
            query: RetrievalConfig::default(),
            style: AnswerStyle::Short,
            naive_k: eval.naive_k,
            chunk_tokens: eval.chunk_tokens,
            parallelism: 0,
            providers: ProviderConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies the Fano cap, if any, and checks every section.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(f) = self.fano {
            self.structure.theme_cap = fano_cap(f)?;
        }
        self.structure.check()?;
        self.query.check()?;
        self.providers.check()?;
        if self.naive_k == 0 || self.chunk_tokens == 0 {
            return Err(Error::invalid("naive_k and chunk_tokens must be positive"));
        }
        Ok(self)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            retrieval: self.query.clone(),
            style: self.style,
            naive_k: self.naive_k,
            chunk_tokens: self.chunk_tokens,
            parallelism: self.parallelism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingInfo {
    pub provider: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreFile {
    pub schema_version: u64,
    pub embedding: EmbeddingInfo,
    pub state: MemoryState,
    pub embedding_cache: EmbeddingCache,
    pub config: RunConfig,
}

impl StoreFile {
    pub fn new(state: MemoryState, embedding: EmbeddingInfo, config: RunConfig) -> Self {
        StoreFile {
            schema_version: SCHEMA_VERSION,
            embedding,
            state,
            embedding_cache: EmbeddingCache::default(),
            config,
        }
    }

    /// JSON with every object's keys sorted.
    pub fn to_canonical_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }

    /// Parses, checks the schema version, then validates the state.
    pub fn from_json(raw: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(raw)?;
        let found = v
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::invalid("store has no schema_version"))?;
        if found != SCHEMA_VERSION {
            return Err(Error::Migration {
                found,
                expected: SCHEMA_VERSION,
            });
        }
        let store: StoreFile = serde_json::from_value(v)?;
        if store.embedding.dimension != store.state.hierarchy.dim() {
            return Err(Error::DimensionMismatch {
                expected: store.embedding.dimension,
                actual: store.state.hierarchy.dim(),
            });
        }
        let violations = store.state.validate();
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        Ok(store)
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save(store: &StoreFile, path: &Path) -> Result<()> {
    let json = store.to_canonical_json()?;
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(json.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<StoreFile> {
    StoreFile::from_json(&fs::read_to_string(path)?)
}

/// Exclusive ownership of a store path, released on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(store: &Path) -> Result<Self> {
        let mut name = store.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offline_and_remote_do_not_mix() {
        let mut p = ProviderConfig {
            offline: true,
            ..ProviderConfig::default()
        };
        p.check().unwrap();
        p.chat = Some(ChatConfig {
            url: "http://x".into(),
            model: "m".into(),
            timeout_secs: 1,
        });
        assert!(p.check().is_err());
        p.offline = false;
        assert!(p.check().is_err());
    }

    #[test]
    fn fano_sets_the_cap() {
        let mut c = RunConfig::default();
        c.providers.offline = true;
        c.fano = Some(FanoParams {
            bits: 0.0,
            target_accuracy: 0.5,
        });
        assert_eq!(c.resolved().unwrap().structure.theme_cap, 4);
    }
}
