//! Service configuration file and engine construction.
//!
//! Relative paths are resolved against the directory holding the config file.
//! Secrets never appear in the file: remote entries name the environment
//! variable that holds their bearer token.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use tmd_core::backend::{ChatClient, HttpSettings, JsonPoster};
use tmd_core::forge::{CaptionBackend, OfflineCaptioner, OfflineRephraser, RemoteCaptioner, RemoteRephraser, RephraseBackend};
use tmd_core::gateway::{BackendKind, BackendRegistry, ProceduralBackend, RemoteImageBackend};
use tmd_core::metering::{MeterStore, RateCard};
use tmd_core::model::DefectLibrary;
use tmd_core::pipeline::{Engine, EngineSettings, SeedPolicy};
use tmd_core::texture::{StandardizationTarget, TextureSize};
use tmd_core::tuner::{OfflineTuner, RemoteTuner, TunerBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Offline,
    Remote,
}

fn default_timeout_secs() -> u64 {
    120
}

/// Connection details of a remote entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteEndpoint {
    pub base_url: String,
    pub auth_token_env: Option<String>,
    pub timeout_secs: u64,
    pub model: Option<String>,
}

impl RemoteEndpoint {
    fn http_settings(&self) -> Result<HttpSettings, ConfigError> {
        let mut s = HttpSettings::new(&self.base_url);
        s.timeout_secs = self.timeout_secs;
        if let Some(var) = &self.auth_token_env {
            s.auth_token = Some(std::env::var(var).map_err(|_| ConfigError::MissingSecret(var.clone()))?);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendEntry {
    pub backend_id: String,
    pub kind: BackendKind,
    pub mode: Mode,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
}

impl BackendEntry {
    pub fn remote(&self) -> Option<RemoteEndpoint> {
        self.base_url.as_ref().map(|url| RemoteEndpoint {
            base_url: url.clone(),
            auth_token_env: self.auth_token_env.clone(),
            timeout_secs: self.timeout_secs,
            model: None,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub mode: Mode,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
}

impl ModelEntry {
    pub fn remote(&self) -> Option<RemoteEndpoint> {
        self.base_url.as_ref().map(|url| RemoteEndpoint {
            base_url: url.clone(),
            auth_token_env: self.auth_token_env.clone(),
            timeout_secs: self.timeout_secs,
            model: self.model.clone(),
        })
    }
}

impl Default for ModelEntry {
    fn default() -> Self {
        Self {
            mode: Mode::Offline,
            base_url: None,
            auth_token_env: None,
            timeout_secs: default_timeout_secs(),
            model: None,
            max_in_flight: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeEntry {
    #[serde(default)]
    pub caption: ModelEntry,
    #[serde(default)]
    pub rephrase: ModelEntry,
}

fn default_listen() -> SocketAddr {
    "127.0.0.1:8080".parse().unwrap()
}

fn default_max_concurrency() -> usize {
    16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    pub backends: Vec<BackendEntry>,
    #[serde(default)]
    pub tuner: ModelEntry,
    #[serde(default)]
    pub forge: ForgeEntry,
    pub rate_card: PathBuf,
    /// Absent means the builtin library.
    #[serde(default)]
    pub library: Option<PathBuf>,
    pub dataset_dir: PathBuf,
    pub artifact_dir: PathBuf,
    pub meter_file: PathBuf,
    #[serde(default)]
    pub target: TextureSize,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config invalid at `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("environment variable {0} (named in config) is not set")]
    MissingSecret(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

impl AppConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: AppConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            invalid(field, e.into_inner().to_string())
        })?;
        for p in [
            &mut cfg.rate_card,
            &mut cfg.dataset_dir,
            &mut cfg.artifact_dir,
            &mut cfg.meter_file,
        ] {
            *p = base_dir.join(&*p);
        }
        if let Some(lib) = &mut cfg.library {
            *lib = base_dir.join(&*lib);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for kind in BackendKind::ALL {
            if !self.backends.iter().any(|b| b.kind == kind) {
                return Err(invalid("backends", format!("no backend bound for kind {kind:?}")));
            }
        }
        for (i, b) in self.backends.iter().enumerate() {
            if b.backend_id.trim().is_empty() {
                return Err(invalid(format!("backends[{i}].backend_id"), "must not be empty"));
            }
            if b.mode == Mode::Remote && b.base_url.is_none() {
                return Err(invalid(format!("backends[{i}].base_url"), "remote backends need a base_url"));
            }
        }
        for (name, entry) in [
            ("tuner", &self.tuner),
            ("forge.caption", &self.forge.caption),
            ("forge.rephrase", &self.forge.rephrase),
        ] {
            if entry.mode == Mode::Remote && entry.base_url.is_none() {
                return Err(invalid(format!("{name}.base_url"), "remote mode needs a base_url"));
            }
        }
        if !self.rate_card.is_file() {
            return Err(invalid("rate_card", format!("{} does not exist", self.rate_card.display())));
        }
        if let Some(lib) = &self.library {
            if !lib.is_file() {
                return Err(invalid("library", format!("{} does not exist", lib.display())));
            }
        }
        if self.max_concurrency == 0 {
            return Err(invalid("max_concurrency", "must be at least 1"));
        }
        Ok(())
    }

    pub fn load_library(&self) -> anyhow::Result<DefectLibrary> {
        Ok(match &self.library {
            Some(path) => DefectLibrary::load(path)?,
            None => DefectLibrary::builtin(),
        })
    }

    pub fn registry(&self) -> Result<BackendRegistry, ConfigError> {
        let mut registry = BackendRegistry::new();
        for b in &self.backends {
            let backend: Arc<dyn tmd_core::gateway::GenBackend> = match (b.mode, b.remote()) {
                (Mode::Remote, Some(remote)) => {
                    let poster = JsonPoster::new(remote.http_settings()?)
                        .map_err(|e| invalid("backends", e.to_string()))?;
                    Arc::new(RemoteImageBackend::new(&b.backend_id, poster))
                }
                _ => Arc::new(ProceduralBackend::new(&b.backend_id)),
            };
            registry.bind(b.kind, backend, b.max_in_flight);
        }
        Ok(registry)
    }

    fn chat_client(entry: &ModelEntry, default_in_flight: usize) -> Result<Option<ChatClient>, ConfigError> {
        match (entry.mode, entry.remote()) {
            (Mode::Remote, Some(remote)) => ChatClient::new(
                remote.http_settings()?,
                remote.model.clone(),
                Some(entry.max_in_flight.unwrap_or(default_in_flight)),
            )
            .map(Some)
            .map_err(|e| invalid("remote", e.to_string())),
            _ => Ok(None),
        }
    }

    pub fn tuner(&self, library: Arc<DefectLibrary>) -> Result<Arc<dyn TunerBackend>, ConfigError> {
        Ok(match Self::chat_client(&self.tuner, 4)? {
            Some(client) => Arc::new(RemoteTuner::new("remote-tuner", client)),
            None => Arc::new(OfflineTuner::new(library)),
        })
    }

    pub fn captioner(&self) -> Result<Box<dyn CaptionBackend>, ConfigError> {
        Ok(match Self::chat_client(&self.forge.caption, 4)? {
            Some(client) => Box::new(RemoteCaptioner::new(client)),
            None => Box::new(OfflineCaptioner::builtin()),
        })
    }

    pub fn rephraser(&self) -> Result<Box<dyn RephraseBackend>, ConfigError> {
        Ok(match Self::chat_client(&self.forge.rephrase, 4)? {
            Some(client) => Box::new(RemoteRephraser::new(client)),
            None => Box::new(OfflineRephraser),
        })
    }

    /// Builds the engine, creating output directories as needed.
    pub fn engine(&self) -> anyhow::Result<Engine> {
        let library = Arc::new(self.load_library()?);
        let rates = RateCard::load(&self.rate_card)?;
        for dir in [&self.dataset_dir, &self.artifact_dir] {
            std::fs::create_dir_all(dir)?;
        }
        if let Some(parent) = self.meter_file.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let meters = Arc::new(MeterStore::open(&self.meter_file)?);
        Ok(Engine::new(
            library.clone(),
            self.tuner(library)?,
            self.registry()?,
            rates,
            meters,
            EngineSettings {
                target: StandardizationTarget::new(self.target),
                artifact_dir: self.artifact_dir.clone(),
                seed_policy: self.seed_policy,
            },
        )?)
    }

    /// All-offline config writing under `root`.
    pub fn offline(root: &Path) -> Self {
        Self {
            listen: default_listen(),
            backends: vec![
                BackendEntry {
                    backend_id: "offline-t2i".into(),
                    kind: BackendKind::TextToImage,
                    mode: Mode::Offline,
                    base_url: None,
                    auth_token_env: None,
                    timeout_secs: default_timeout_secs(),
                    max_in_flight: None,
                },
                BackendEntry {
                    backend_id: "offline-edit".into(),
                    kind: BackendKind::ImageEdit,
                    mode: Mode::Offline,
                    base_url: None,
                    auth_token_env: None,
                    timeout_secs: default_timeout_secs(),
                    max_in_flight: None,
                },
            ],
            tuner: ModelEntry::default(),
            forge: ForgeEntry::default(),
            rate_card: root.join("rates.json"),
            library: None,
            dataset_dir: root.join("datasets"),
            artifact_dir: root.join("artifacts"),
            meter_file: root.join("meters.jsonl"),
            target: TextureSize::default(),
            seed_policy: SeedPolicy::default(),
            max_concurrency: default_max_concurrency(),
        }
    }
}

/// Rates used when no rate card is configured.
pub const DEFAULT_OFFLINE_RATES: &str = r#"{
  "offline-t2i": {"token_rate": "0.00002", "second_rate": "0.001"},
  "offline-edit": {"token_rate": "0.00002", "second_rate": "0.001"}
}
"#;

/// Offline config under `root`, writing the default rate card if it is missing.
pub fn offline_config(root: &Path) -> anyhow::Result<AppConfig> {
    std::fs::create_dir_all(root)?;
    let cfg = AppConfig::offline(root);
    if !cfg.rate_card.exists() {
        std::fs::write(&cfg.rate_card, DEFAULT_OFFLINE_RATES)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_path_in_errors() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"backends":[{"backend_id":"x","kind":"text_to_image","mode":"sideways"}],
            "rate_card":"r.json","dataset_dir":"d","artifact_dir":"a","meter_file":"m.jsonl"}"#;
        match AppConfig::from_json(text, dir.path()) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "backends[0].mode"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_kind_needs_a_backend() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("r.json"), "{}").unwrap();
        let text = r#"{"backends":[{"backend_id":"x","kind":"text_to_image","mode":"offline"}],
            "rate_card":"r.json","dataset_dir":"d","artifact_dir":"a","meter_file":"m.jsonl"}"#;
        match AppConfig::from_json(text, dir.path()) {
            Err(ConfigError::Invalid { field, message }) => {
                assert_eq!(field, "backends");
                assert!(message.contains("ImageEdit"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn remote_entry_needs_url_and_secret() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("r.json"), "{}").unwrap();
        let text = r#"{"backends":[
              {"backend_id":"x","kind":"text_to_image","mode":"remote","base_url":"http://127.0.0.1:1/",
               "auth_token_env":"TMD_TEST_UNSET_TOKEN"},
              {"backend_id":"y","kind":"image_edit","mode":"offline"}],
            "rate_card":"r.json","dataset_dir":"d","artifact_dir":"a","meter_file":"m.jsonl","target":256}"#;
        let cfg = AppConfig::from_json(text, dir.path()).unwrap();
        assert_eq!(cfg.target, TextureSize::S256);
        assert!(matches!(cfg.registry(), Err(ConfigError::MissingSecret(v)) if v == "TMD_TEST_UNSET_TOKEN"));
    }

    #[test]
    fn offline_config_builds_an_engine() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = offline_config(dir.path()).unwrap();
        let engine = cfg.engine().unwrap();
        assert_eq!(engine.library().materials.len(), 5);
        assert!(dir.path().join("artifacts").is_dir());
    }
}
