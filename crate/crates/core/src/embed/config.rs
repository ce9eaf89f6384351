use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{hashing, EmbeddingProvider, HashEmbedder, RemoteEmbedder};
use crate::error::{Error, Result};

/// Environment variable naming the config file.
pub const ENV_CONFIG: &str = "CONCEPT_SEARCH_CONFIG";
/// Overrides `provider` (`hash` or `remote`).
pub const ENV_PROVIDER: &str = "CONCEPT_SEARCH_PROVIDER";
/// Overrides `endpoint` for the remote provider.
pub const ENV_ENDPOINT: &str = "CONCEPT_SEARCH_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Hash,
    Remote,
}

/// Provider and probe-head selection, read from TOML.
///
/// ```toml
/// provider = "remote"
/// endpoint = "http://127.0.0.1:9000"
/// query_head = "heads/query.bin"
/// code_head = "heads/code.bin"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub provider: ProviderKind,
    pub dimension: usize,
    pub seed: u64,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    /// Probe-head artifact files. When absent, seeded heads are generated.
    pub query_head: Option<PathBuf>,
    pub code_head: Option<PathBuf>,
    pub head_seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            provider: ProviderKind::Hash,
            dimension: hashing::DEFAULT_DIMENSION,
            seed: hashing::DEFAULT_SEED,
            endpoint: None,
            timeout_secs: 30,
            query_head: None,
            code_head: None,
            head_seed: 17,
        }
    }
}

impl ProviderConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // Head paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for head in [&mut cfg.query_head, &mut cfg.code_head].into_iter().flatten() {
            if head.is_relative() {
                *head = base.join(&*head);
            }
        }
        Ok(cfg)
    }

    /// Config from `path` (or `$CONCEPT_SEARCH_CONFIG`, or defaults), then
    /// environment overrides.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let env_path = std::env::var_os(ENV_CONFIG).map(PathBuf::from);
        let mut cfg = match path.map(Path::to_path_buf).or(env_path) {
            Some(p) => Self::load(&p)?,
            None => Self::default(),
        };
        cfg.apply_overrides(
            std::env::var(ENV_PROVIDER).ok().as_deref(),
            std::env::var(ENV_ENDPOINT).ok().as_deref(),
        )?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, provider: Option<&str>, endpoint: Option<&str>) -> Result<()> {
        if let Some(p) = provider {
            self.provider = match p {
                "hash" => ProviderKind::Hash,
                "remote" => ProviderKind::Remote,
                other => return Err(Error::Config(format!("unknown provider `{other}`"))),
            };
        }
        if let Some(e) = endpoint {
            self.endpoint = Some(e.to_string());
        }
        Ok(())
    }

    pub fn build_provider(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        Ok(match self.provider {
            ProviderKind::Hash => Arc::new(HashEmbedder::new(self.dimension, self.seed)),
            ProviderKind::Remote => {
                let url = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| Error::Config("remote provider needs an endpoint".into()))?;
                Arc::new(RemoteEmbedder::connect(url, Duration::from_secs(self.timeout_secs))?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_overrides() {
        let mut cfg = ProviderConfig::from_toml("provider = \"hash\"\ndimension = 32\n").unwrap();
        assert_eq!(cfg.dimension, 32);
        assert_eq!(cfg.seed, hashing::DEFAULT_SEED);
        cfg.apply_overrides(Some("remote"), Some("http://localhost:1")).unwrap();
        assert_eq!(cfg.provider, ProviderKind::Remote);
        assert_eq!(cfg.endpoint.as_deref(), Some("http://localhost:1"));
        assert!(cfg.apply_overrides(Some("gpu"), None).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ProviderConfig::from_toml("provder = \"hash\"").is_err());
    }
}
