//! Run configuration file.
//!
//! Every section is optional and every key has a default, so an empty file
//! is a valid config. Unknown keys are rejected.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::AggregationConfig;
use crate::embed::{EmbeddingProvider, ExternalConfig, ExternalService, ReferenceHashed, DEFAULT_REFERENCE_DIM};
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::harness::HarnessConfig;
use crate::rewards::RewardConfig;

/// Environment variable that replaces `embedder.endpoint`.
pub const ENDPOINT_ENV: &str = "TRACEREWARD_EMBED_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Reference,
    External,
}

/// `[embedder]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Dimension of the reference embedder.
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    /// Texts per request to the external service.
    pub batch: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Reference,
            dim: DEFAULT_REFERENCE_DIM,
            endpoint: None,
            model: "default".into(),
            timeout_ms: 10_000,
            batch: 64,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        match self.kind {
            EmbedderKind::Reference => Ok(Arc::new(ReferenceHashed::new(self.dim)?)),
            EmbedderKind::External => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config(format!("embedder.endpoint (or {ENDPOINT_ENV}) is required")))?;
                Ok(Arc::new(ExternalService::new(ExternalConfig {
                    endpoint,
                    model: self.model.clone(),
                    timeout: Duration::from_millis(self.timeout_ms),
                    batch_size: self.batch,
                    max_in_flight: 4,
                    max_attempts: 3,
                })?))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub embedder: EmbedderConfig,
    pub reward: RewardConfig,
    pub aggregation: AggregationConfig,
    pub grpo: GrpoConfig,
    pub harness: HarnessConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.aggregation.validate()?;
        self.grpo.validate()?;
        self.harness.validate()
    }

    /// Applies the endpoint override from the environment, if set.
    pub fn with_env_overrides(self) -> Self {
        self.with_endpoint_override(std::env::var(ENDPOINT_ENV).ok())
    }

    pub fn with_endpoint_override(mut self, endpoint: Option<String>) -> Self {
        if let Some(e) = endpoint.filter(|e| !e.trim().is_empty()) {
            self.embedder.endpoint = Some(e);
        }
        self
    }

    /// SHA-256 of the resolved config serialized as JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
