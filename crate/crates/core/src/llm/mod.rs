//! Provider-agnostic chat completion. Two backends: a live HTTP client with
//! retries, and a scripted replay used for offline, deterministic runs.

mod http;
mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, ProviderEndpoint, RetryPolicy};
pub use replay::{load_replay, prompt_digest, RecordingBackend, ReplayBackend, ReplayEntry, ReplayScript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleSlot {
    Manager,
    Webagent,
    Brainstorm,
    Scriptgen,
}

impl RoleSlot {
    pub const ALL: [RoleSlot; 4] =
        [RoleSlot::Manager, RoleSlot::Webagent, RoleSlot::Brainstorm, RoleSlot::Scriptgen];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleSlot::Manager => "manager",
            RoleSlot::Webagent => "webagent",
            RoleSlot::Brainstorm => "brainstorm",
            RoleSlot::Scriptgen => "scriptgen",
        }
    }
}

impl fmt::Display for RoleSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleSlot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoleSlot::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role_slot {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub role_slot: RoleSlot,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f32,
}

impl LlmRequest {
    pub fn new(role_slot: RoleSlot, messages: Vec<ChatMessage>) -> Self {
        Self { role_slot, messages, max_tokens: 4096, temperature: 0.0 }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must not be empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be non-negative".into()));
        }
        for (i, m) in self.messages.iter().enumerate() {
            if m.role != Role::Assistant && m.content.trim().is_empty() {
                return Err(LlmError::InvalidRequest(format!("message {i} has empty content")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub content: String,
    pub model_id: String,
    pub attempt_count: u32,
    pub usage: Option<Usage>,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay script has no further entry for role_slot {0}")]
    ScriptExhausted(RoleSlot),
    #[error("replay prompt digest mismatch for {slot} entry {index}: expected {expected}, got {actual}")]
    DigestMismatch { slot: RoleSlot, index: usize, expected: String, actual: String },
    #[error("provider error after {attempts} attempt(s): {message}")]
    ProviderError { attempts: u32, message: String },
    #[error("no provider configured for role_slot {0}")]
    NotConfigured(RoleSlot),
    #[error("replay parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
}

/// Front door used by every component: validates requests and delegates
/// to whichever backend is configured.
#[derive(Clone)]
pub struct LlmGateway {
    backend: Arc<dyn LlmBackend>,
    models: BTreeMap<RoleSlot, String>,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self { backend, models: BTreeMap::new() }
    }

    pub fn with_models(mut self, models: BTreeMap<RoleSlot, String>) -> Self {
        self.models = models;
        self
    }

    pub fn models(&self) -> &BTreeMap<RoleSlot, String> {
        &self.models
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        self.backend.complete(request)
    }
}
