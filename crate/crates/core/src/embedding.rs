//! Vector space primitives and embedding providers.
//!
//! Every vector handed out by this module is L2-normalised, so callers may
//! treat the dot product of two stored vectors as their cosine.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::http::JsonClient;
use crate::text;

pub const EMBED_API_KEY_VAR: &str = "HIERMEM_EMBED_API_KEY";
pub const DEFAULT_OFFLINE_DIM: usize = 256;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖`, or `None` for a zero or non-finite vector.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    if !n.is_finite() || n <= f64::MIN_POSITIVE {
        return None;
    }
    Some(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity of two stored unit vectors, clamped to [-1, 1].
#[inline]
pub fn unit_cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

/// Checked cosine similarity for arbitrary non-zero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::invalid("cosine of non-finite vector"));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Normalised mean of a set of unit vectors. Falls back to the first vector
/// when the members cancel out exactly.
pub fn centroid<'a, I>(vectors: I, dim: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum = vec![0.0; dim];
    let mut first: Option<&[f64]> = None;
    for v in vectors {
        first.get_or_insert(v);
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    match normalized(&sum) {
        Some(c) => c,
        None => first.map(|f| f.to_vec()).unwrap_or(sum),
    }
}

/// Text embedding capability. Implementations must be callable from several
/// threads and must return unit vectors of `dimension()` entries.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier used to key the embedding cache.
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop()
            .ok_or_else(|| Error::protocol(0..1, "provider returned no vector", None))
    }
}

/// Seeded feature-hashing bag-of-words embedder.
///
/// Each lowercased alphanumeric token is hashed into one of `dim` buckets;
/// the bucket counts are L2-normalised. Stopwords are skipped unless a text
/// consists of nothing else.
#[derive(Debug, Clone)]
pub struct DeterministicEmbedder {
    dim: usize,
    seed: u64,
    id: String,
}

impl DeterministicEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(DeterministicEmbedder {
            dim,
            seed,
            id: format!("hash-bow-d{dim}-s{seed}"),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn bucket(&self, token: &str) -> usize {
        // FNV-1a over the seed and the token, followed by a splitmix64 finaliser
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.seed.to_le_bytes().iter().chain(token.as_bytes()) {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
        (h % self.dim as u64) as usize
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let words = text::word_tokens(trimmed);
        let mut tokens: Vec<&str> = words
            .iter()
            .filter(|t| !text::is_stopword(t))
            .map(String::as_str)
            .collect();
        if tokens.is_empty() {
            tokens = words.iter().map(String::as_str).collect();
        }
        let lowered;
        if tokens.is_empty() {
            lowered = trimmed.to_lowercase();
            tokens.push(&lowered);
        }
        let mut counts = vec![0.0; self.dim];
        for t in tokens {
            counts[self.bucket(t)] += 1.0;
        }
        Ok(normalized(&counts).expect("at least one bucket is non-zero"))
    }
}

impl EmbeddingProvider for DeterministicEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RemoteEmbeddingConfig {
    pub url: String,
    pub model: String,
    pub dimension: usize,
    #[serde(default = "default_batch_limit")]
    pub batch_limit: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_batch_limit() -> usize {
    64
}

fn default_timeout_secs() -> u64 {
    60
}

/// Client for an HTTP embedding service speaking the common
/// `{"input": [...], "model": ...}` / `{"data": [{"index", "embedding"}]}` shape.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    config: RemoteEmbeddingConfig,
    client: JsonClient,
    id: String,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbeddingConfig) -> Result<Self> {
        let key = JsonClient::key_from_env(EMBED_API_KEY_VAR);
        Self::with_key(config, key)
    }

    pub fn with_key(config: RemoteEmbeddingConfig, api_key: Option<String>) -> Result<Self> {
        if config.dimension == 0 || config.batch_limit == 0 {
            return Err(Error::invalid(
                "remote embedder needs positive dimension and batch limit",
            ));
        }
        let client = JsonClient::new(
            config.url.clone(),
            api_key,
            Duration::from_secs(config.timeout_secs),
        );
        let id = format!("remote:{}:{}", config.model, config.dimension);
        Ok(RemoteEmbedder { config, client, id })
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for (i, chunk) in texts.chunks(self.config.batch_limit).enumerate() {
            let start = i * self.config.batch_limit;
            let range = start..start + chunk.len();
            let body = json!({ "input": chunk, "model": self.config.model });
            let resp = self.client.post(&body, range.clone())?;
            out.extend(parse_embedding_response(
                &resp,
                chunk.len(),
                self.config.dimension,
                range,
            )?);
        }
        Ok(out)
    }
}

/// Validates an embedding response and returns the vectors in input order,
/// re-normalised.
pub fn parse_embedding_response(
    resp: &serde_json::Value,
    expected: usize,
    dim: usize,
    range: std::ops::Range<usize>,
) -> Result<Vec<Vec<f64>>> {
    let fail = |msg: String| Error::protocol(range.clone(), msg, Some(resp.to_string()));
    let data = resp
        .get("data")
        .and_then(|d| d.as_array())
        .ok_or_else(|| fail("missing `data` array".into()))?;
    if data.len() != expected {
        return Err(fail(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let index = match item.get("index") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| fail(format!("entry {pos}: index is not an integer")))?
                as usize,
            None => pos,
        };
        if index >= expected || slots[index].is_some() {
            return Err(fail(format!("entry {pos}: bad or duplicate index {index}")));
        }
        let raw = item
            .get("embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| fail(format!("entry {pos}: missing embedding")))?;
        if raw.len() != dim {
            return Err(fail(format!(
                "entry {pos}: dimension {} != {dim}",
                raw.len()
            )));
        }
        let v: Option<Vec<f64>> = raw.iter().map(|x| x.as_f64()).collect();
        let v = v.ok_or_else(|| fail(format!("entry {pos}: non-numeric component")))?;
        let v = normalized(&v).ok_or_else(|| fail(format!("entry {pos}: zero vector")))?;
        slots[index] = Some(v);
    }
    Ok(slots
        .into_iter()
        .map(|s| s.expect("all slots filled"))
        .collect())
}

/// Persistent embedding cache keyed by provider id and text digest.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingCache {
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn key(provider_id: &str, text: &str) -> String {
        let digest = Sha256::digest(text.as_bytes());
        format!("{provider_id}:{}", hex::encode(digest))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Wraps a provider with a shared cache. Only cache misses reach the inner
/// provider, deduplicated within a batch.
pub struct CachedEmbedder {
    inner: Arc<dyn EmbeddingProvider>,
    cache: Mutex<EmbeddingCache>,
}

impl CachedEmbedder {
    pub fn new(inner: Arc<dyn EmbeddingProvider>, cache: EmbeddingCache) -> Self {
        CachedEmbedder {
            inner,
            cache: Mutex::new(cache),
        }
    }

    pub fn snapshot(&self) -> EmbeddingCache {
        self.cache.lock().expect("cache lock").clone()
    }
}

impl EmbeddingProvider for CachedEmbedder {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let keys: Vec<String> = texts
            .iter()
            .map(|t| EmbeddingCache::key(self.inner.id(), t))
            .collect();
        let mut missing: Vec<String> = Vec::new();
        let mut missing_keys: HashMap<&str, usize> = HashMap::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for (t, k) in texts.iter().zip(&keys) {
                if !cache.entries.contains_key(k) && !missing_keys.contains_key(k.as_str()) {
                    missing_keys.insert(k, missing.len());
                    missing.push(t.clone());
                }
            }
        }
        let fresh = if missing.is_empty() {
            Vec::new()
        } else {
            self.inner.embed_batch(&missing)?
        };
        let mut cache = self.cache.lock().expect("cache lock");
        for (k, idx) in &missing_keys {
            cache.entries.insert((*k).to_string(), fresh[*idx].clone());
        }
        Ok(keys.iter().map(|k| cache.entries[k].clone()).collect())
    }
}
