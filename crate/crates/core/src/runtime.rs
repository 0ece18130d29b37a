//! Wires a [`RunConfig`] into a ready [`Manager`], either fully offline
//! (replayed model, fixture web, stub environments) or live.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::config::{ConfigError, ProviderKind, RunConfig};
use crate::envman::{EnvManager, EnvProvider, StubProvider, TemplateProvider};
use crate::llm::{load_replay, HttpBackend, LlmBackend, LlmError, LlmGateway, ProviderEndpoint, RecordingBackend, ReplayBackend, RetryPolicy, RoleSlot};
use crate::manager::{Manager, ManagerSettings};
use crate::mcpbox::{McpBox, McpBoxError};
use crate::net::HttpTransport;
use crate::webagent::{FixturePages, FixtureSearch, HttpSearch, LivePages, SearchSource, WebAgent};

/// Slots the pipeline actually sends requests to.
pub const REQUIRED_SLOTS: [RoleSlot; 3] = [RoleSlot::Manager, RoleSlot::Brainstorm, RoleSlot::Scriptgen];

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Registry(#[from] McpBoxError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn env_provider(config: &RunConfig) -> Result<Arc<dyn EnvProvider>, ConfigError> {
    let shims = config.provider.shims.clone().or_else(|| {
        let candidate = config.fixtures_path()?.join("shims");
        candidate.is_dir().then_some(candidate)
    });
    let kind = if config.offline { ProviderKind::Stub } else { config.provider.kind };
    Ok(match kind {
        ProviderKind::Stub => Arc::new(match shims {
            Some(dir) => StubProvider::with_shims(dir),
            None => StubProvider::new(),
        }),
        other => {
            let id = format!("{other:?}").to_lowercase();
            Arc::new(TemplateProvider::new(id, config.provider.templates()?))
        }
    })
}

pub fn env_manager(config: &RunConfig) -> Result<Arc<EnvManager>, RuntimeError> {
    std::fs::create_dir_all(&config.workdir)?;
    Ok(Arc::new(EnvManager::new(env_provider(config)?, &config.workdir)))
}

pub fn open_registry(config: &RunConfig) -> Result<McpBox, McpBoxError> {
    McpBox::open(config.registry_path())
}

fn backend(config: &RunConfig, transport: Arc<dyn HttpTransport>) -> Result<Arc<dyn LlmBackend>, RuntimeError> {
    if config.offline {
        let replay = config.replay.as_ref().expect("validated");
        return Ok(Arc::new(ReplayBackend::new(load_replay(replay)?)));
    }
    let models = config.model_ids()?;
    let mut endpoints = BTreeMap::new();
    for slot in RoleSlot::ALL {
        let required = REQUIRED_SLOTS.contains(&slot);
        let Some(model) = models.get(&slot) else {
            if required {
                return Err(ConfigError::Invalid(format!("no model configured for role slot {}", slot.as_str())).into());
            }
            continue;
        };
        match ProviderEndpoint::from_env(slot, model) {
            Some(ep) => {
                endpoints.insert(slot, ep);
            }
            None if required => {
                return Err(ConfigError::Invalid(format!(
                    "no provider URL for role slot {} (set ALITA_PROVIDER_URL or ALITA_PROVIDER_URL_{})",
                    slot.as_str(),
                    slot.as_str().to_uppercase()
                ))
                .into())
            }
            None => {}
        }
    }
    let policy = RetryPolicy {
        max_attempts: config.max_attempts,
        request_timeout: Duration::from_secs(config.request_timeout_secs),
        max_in_flight: config.max_in_flight,
        ..RetryPolicy::default()
    };
    let live: Arc<dyn LlmBackend> = Arc::new(HttpBackend::new(transport, endpoints, policy));
    Ok(match &config.record {
        Some(path) => Arc::new(RecordingBackend::new(live, path)?),
        None => live,
    })
}

fn web(config: &RunConfig, transport: Arc<dyn HttpTransport>) -> WebAgent {
    if config.offline {
        let fixtures = config.fixtures_path().expect("validated");
        return WebAgent::new(Arc::new(FixturePages::new(&fixtures)), Arc::new(FixtureSearch::new(&fixtures)), config.viewport_size);
    }
    let timeout = Duration::from_secs(config.request_timeout_secs);
    let mut endpoints = BTreeMap::new();
    if let Some(u) = &config.search.web_url {
        endpoints.insert(SearchSource::Web, u.clone());
    }
    if let Some(u) = &config.search.code_host_url {
        endpoints.insert(SearchSource::CodeHost, u.clone());
    }
    WebAgent::new(
        Arc::new(LivePages::new(transport.clone(), timeout)),
        Arc::new(HttpSearch::new(transport, endpoints, timeout)),
        config.viewport_size,
    )
}

pub struct Runtime {
    pub manager: Manager,
    pub envs: Arc<EnvManager>,
    pub registry: McpBox,
}

impl Runtime {
    /// Validates `config` and assembles every component. In offline mode
    /// nothing is sent through `transport`.
    pub fn build(config: &RunConfig, transport: Arc<dyn HttpTransport>) -> Result<Self, RuntimeError> {
        config.validate()?;
        let envs = env_manager(config)?;
        let registry = open_registry(config)?;
        let gateway = LlmGateway::new(backend(config, transport.clone())?).with_models(config.model_ids()?);
        let settings = ManagerSettings {
            loop_budget: config.loop_budget,
            reuse_threshold: config.reuse_threshold,
            tool_timeout: Duration::from_secs(config.tool_timeout_secs),
        };
        let manager = Manager::new(gateway, web(config, transport), envs.clone(), registry.clone(), &config.workdir, settings);
        Ok(Self { manager, envs, registry })
    }
}
