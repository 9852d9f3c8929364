//! TOML run configuration: backend sections, role bindings and run defaults.
//!
//! ```toml
//! [run]
//! n = 2
//! seed = 7
//!
//! [backend.vlm]
//! kind = "http"
//! base_url = "http://localhost:8000/v1"
//! model = "some-vlm"
//! api_key_env = "VLM_API_KEY"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::gateway::{BackendKind, BackendSpec, Gateway, GatewayError, ResponseStore};

pub const DEFAULT_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("no backend section named {0:?}")]
    UnknownBackend(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// The three model roles a run needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Qg,
    Vlm,
    Se,
}

impl Role {
    pub fn default_temperature(self) -> f64 {
        match self {
            Role::Qg => 0.7,
            Role::Vlm | Role::Se => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Qg => "qg",
            Role::Vlm => "vlm",
            Role::Se => "se",
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<BackendKind>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub api_key_env: Option<String>,
    pub replay_dir: Option<PathBuf>,
    pub echo: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub voter: Option<String>,
    pub concurrency: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub cache: Option<bool>,
    pub qg_template: Option<PathBuf>,
    pub se_exemplars: Option<PathBuf>,
    pub shots: Option<usize>,
    pub system_prompt: Option<String>,
}

/// Which backend section serves each role. Defaults to sections named after
/// the role.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSection {
    pub qg: Option<String>,
    pub vlm: Option<String>,
    pub se: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub roles: RoleSection,
    #[serde(default)]
    pub backend: BTreeMap<String, BackendSection>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut config: Config = toml::from_str(text)?;
        config.base_dir = base_dir.into();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn role_backend(&self, role: Role) -> &str {
        let bound = match role {
            Role::Qg => &self.roles.qg,
            Role::Vlm => &self.roles.vlm,
            Role::Se => &self.roles.se,
        };
        bound.as_deref().unwrap_or(role.as_str())
    }

    /// Spec for section `name` used in `role`. Unset temperature falls back to
    /// the role default.
    pub fn backend_spec(&self, name: &str, role: Role) -> Result<BackendSpec, ConfigError> {
        let section = self
            .backend
            .get(name)
            .ok_or_else(|| ConfigError::UnknownBackend(name.to_string()))?;
        let kind = section.kind.unwrap_or(BackendKind::Http);
        let spec = BackendSpec {
            backend_id: name.to_string(),
            kind,
            base_url: section.base_url.clone(),
            model: section.model.clone().unwrap_or_else(|| name.to_string()),
            temperature: section.temperature.unwrap_or(role.default_temperature()),
            max_tokens: section.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS),
            api_key_env: section.api_key_env.clone(),
            replay_dir: section.replay_dir.as_deref().map(|d| self.resolve(d)),
            echo: section.echo.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gateway(&self, name: &str, role: Role, cache: Option<&Arc<ResponseStore>>) -> Result<Gateway, ConfigError> {
        let gateway = Gateway::from_spec(self.backend_spec(name, role)?)?;
        Ok(match cache {
            Some(c) => gateway.with_cache(Arc::clone(c)),
            None => gateway,
        })
    }
}
