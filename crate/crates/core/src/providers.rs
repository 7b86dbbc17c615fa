//! Assembles a consistent set of providers, either fully offline or fully
//! remote.

use std::sync::Arc;

use crate::chat::ChatClient;
use crate::distill::{GenerationProvider, RemoteGenerationProvider, RuleBasedProvider};
use crate::embedding::{
    CachedEmbedder, DeterministicEmbedder, EmbeddingCache, EmbeddingProvider, RemoteEmbedder,
};
use crate::error::Result;
use crate::eval::EvalProviders;
use crate::retrieval::{
    OfflineOracle, OfflineReader, Reader, RemoteOracle, RemoteOracleMode, RemoteReader,
    UncertaintyOracle,
};
use crate::store::ProviderConfig;

pub struct ProviderSuite {
    pub embedder: Arc<CachedEmbedder>,
    pub generator: Arc<dyn GenerationProvider>,
    pub oracle: Arc<dyn UncertaintyOracle>,
    pub reader: Arc<dyn Reader>,
}

impl ProviderSuite {
    pub fn from_config(config: &ProviderConfig, seed: u64, cache: EmbeddingCache) -> Result<Self> {
        config.check()?;
        if config.offline {
            let inner: Arc<dyn EmbeddingProvider> =
                Arc::new(DeterministicEmbedder::new(config.offline_dim, seed)?);
            return Ok(ProviderSuite {
                embedder: Arc::new(CachedEmbedder::new(inner, cache)),
                generator: Arc::new(RuleBasedProvider::default()),
                oracle: Arc::new(OfflineOracle),
                reader: Arc::new(OfflineReader),
            });
        }
        let (Some(emb), Some(chat)) = (&config.embedding, &config.chat) else {
            unreachable!("checked above");
        };
        let inner: Arc<dyn EmbeddingProvider> = Arc::new(RemoteEmbedder::new(emb.clone())?);
        let client = ChatClient::new(chat.clone());
        let mode = match &config.judge {
            Some(j) => RemoteOracleMode::Judge(ChatClient::new(j.clone())),
            None => RemoteOracleMode::Entropy,
        };
        Ok(ProviderSuite {
            embedder: Arc::new(CachedEmbedder::new(inner, cache)),
            generator: Arc::new(RemoteGenerationProvider::new(client.clone())),
            oracle: Arc::new(RemoteOracle {
                reader: client.clone(),
                mode,
            }),
            reader: Arc::new(RemoteReader { client }),
        })
    }

    pub fn embedding(&self) -> Arc<dyn EmbeddingProvider> {
        self.embedder.clone()
    }

    pub fn eval_providers(&self) -> EvalProviders {
        EvalProviders {
            embedder: self.embedding(),
            oracle: self.oracle.clone(),
            reader: self.reader.clone(),
        }
    }
}
