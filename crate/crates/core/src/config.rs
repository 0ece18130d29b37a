//! Run configuration: one TOML document, then `ALITA_*` environment
//! overrides. Provider credentials are only ever read from the environment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envman::ProviderTemplates;
use crate::llm::RoleSlot;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Filesystem-only provider; tools run with the host interpreters.
    Stub,
    #[default]
    Conda,
    Venv,
    /// Uses the `create`/`install`/`run`/`teardown` templates given here.
    Template,
}

impl FromStr for ProviderKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stub" => Ok(Self::Stub),
            "conda" => Ok(Self::Conda),
            "venv" => Ok(Self::Venv),
            "template" => Ok(Self::Template),
            other => Err(ConfigError::Invalid(format!("unknown provider kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    /// Stub provider: directory of per-package shim trees.
    pub shims: Option<PathBuf>,
    pub create: Option<String>,
    pub install: Option<String>,
    pub run: Option<String>,
    pub teardown: Option<String>,
}

impl ProviderConfig {
    pub fn templates(&self) -> Result<ProviderTemplates, ConfigError> {
        let base = match self.kind {
            ProviderKind::Venv => ProviderTemplates::venv(),
            _ => ProviderTemplates::conda(),
        };
        let pick = |v: &Option<String>, d: String, field: &str| match (v, self.kind) {
            (Some(t), _) => Ok(t.clone()),
            (None, ProviderKind::Template) => Err(ConfigError::Invalid(format!("provider.{field} is required"))),
            (None, _) => Ok(d),
        };
        Ok(ProviderTemplates {
            create: pick(&self.create, base.create, "create")?,
            install: pick(&self.install, base.install, "install")?,
            run: pick(&self.run, base.run, "run")?,
            teardown: pick(&self.teardown, base.teardown, "teardown")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub web_url: Option<String>,
    pub code_host_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub workdir: PathBuf,
    /// Defaults to `<workdir>/registry`.
    pub registry: Option<PathBuf>,
    pub offline: bool,
    pub replay: Option<PathBuf>,
    /// Defaults to the replay file's directory.
    pub fixtures: Option<PathBuf>,
    /// Live runs append every exchange here in replay format.
    pub record: Option<PathBuf>,
    pub models: BTreeMap<String, String>,
    pub provider: ProviderConfig,
    pub search: SearchConfig,
    pub loop_budget: usize,
    pub viewport_size: usize,
    pub reuse_threshold: f64,
    pub tool_timeout_secs: u64,
    pub request_timeout_secs: u64,
    pub max_attempts: u32,
    pub max_in_flight: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from(".alita"),
            registry: None,
            offline: false,
            replay: None,
            fixtures: None,
            record: None,
            models: BTreeMap::new(),
            provider: ProviderConfig::default(),
            search: SearchConfig::default(),
            loop_budget: crate::manager::LOOP_BUDGET,
            viewport_size: crate::webagent::DEFAULT_VIEWPORT_SIZE,
            reuse_threshold: crate::mcpbox::REUSE_THRESHOLD,
            tool_timeout_secs: 120,
            request_timeout_secs: 120,
            max_attempts: 4,
            max_in_flight: 4,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid(format!("{key}={value:?} is not a valid number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        _ => Err(ConfigError::Invalid(format!("{key}={value:?} is not a boolean"))),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` when given, applies process environment overrides and
    /// checks the result.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// Applies `ALITA_*` overrides from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (key, value) in vars {
            let Some(name) = key.strip_prefix("ALITA_") else { continue };
            match name {
                "WORKDIR" => self.workdir = value.into(),
                "REGISTRY" => self.registry = Some(value.into()),
                "OFFLINE" => self.offline = parse_bool(&key, &value)?,
                "REPLAY" => self.replay = Some(value.into()),
                "FIXTURES" => self.fixtures = Some(value.into()),
                "RECORD" => self.record = Some(value.into()),
                "PROVIDER" => self.provider.kind = value.parse()?,
                "SHIMS" => self.provider.shims = Some(value.into()),
                "LOOP_BUDGET" => self.loop_budget = parse_num(&key, &value)?,
                "VIEWPORT_SIZE" => self.viewport_size = parse_num(&key, &value)?,
                "TOOL_TIMEOUT_SECS" => self.tool_timeout_secs = parse_num(&key, &value)?,
                "REQUEST_TIMEOUT_SECS" => self.request_timeout_secs = parse_num(&key, &value)?,
                "SEARCH_WEB_URL" => self.search.web_url = Some(value),
                "SEARCH_CODE_HOST_URL" => self.search.code_host_url = Some(value),
                other => {
                    if let Some(slot) = other.strip_prefix("MODEL_") {
                        let slot: RoleSlot = slot.to_ascii_lowercase().parse().map_err(ConfigError::Invalid)?;
                        self.models.insert(slot.as_str().to_string(), value);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn registry_path(&self) -> PathBuf {
        self.registry.clone().unwrap_or_else(|| self.workdir.join("registry"))
    }

    pub fn fixtures_path(&self) -> Option<PathBuf> {
        self.fixtures.clone().or_else(|| {
            self.replay.as_ref().map(|r| r.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf())
        })
    }

    pub fn model_ids(&self) -> Result<BTreeMap<RoleSlot, String>, ConfigError> {
        self.models
            .iter()
            .map(|(k, v)| Ok((k.parse::<RoleSlot>().map_err(ConfigError::Invalid)?, v.clone())))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("loop_budget", self.loop_budget as u64),
            ("viewport_size", self.viewport_size as u64),
            ("tool_timeout_secs", self.tool_timeout_secs),
            ("request_timeout_secs", self.request_timeout_secs),
            ("max_attempts", self.max_attempts as u64),
            ("max_in_flight", self.max_in_flight as u64),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.reuse_threshold) {
            return Err(ConfigError::Invalid("reuse_threshold must lie in [0, 1]".into()));
        }
        self.model_ids()?;
        if self.offline {
            let replay = self.replay.as_ref().ok_or_else(|| ConfigError::Invalid("offline runs need a replay file".into()))?;
            if !replay.is_file() {
                return Err(ConfigError::Invalid(format!("replay file {} does not exist", replay.display())));
            }
            let fixtures = self.fixtures_path().expect("replay is set");
            if !fixtures.is_dir() {
                return Err(ConfigError::Invalid(format!("fixtures directory {} does not exist", fixtures.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_env_layering() {
        let mut cfg = RunConfig::from_toml(
            "workdir = \"/tmp/w\"\nloop_budget = 5\n[models]\nmanager = \"m1\"\n[provider]\nkind = \"venv\"\n",
        )
        .unwrap();
        assert_eq!(cfg.loop_budget, 5);
        assert_eq!(cfg.registry_path(), PathBuf::from("/tmp/w/registry"));
        cfg.apply_env([
            ("ALITA_LOOP_BUDGET".to_string(), "7".to_string()),
            ("ALITA_MODEL_SCRIPTGEN".to_string(), "m2".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.loop_budget, 7);
        assert_eq!(cfg.models["scriptgen"], "m2");
        assert_eq!(cfg.provider.templates().unwrap(), ProviderTemplates::venv());
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let cfg = RunConfig { loop_budget: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig { offline: true, ..Default::default() };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_env([("ALITA_VIEWPORT_SIZE".to_string(), "big".to_string())]).is_err());
        let cfg = RunConfig { provider: ProviderConfig { kind: ProviderKind::Template, ..Default::default() }, ..Default::default() };
        assert!(cfg.provider.templates().is_err());
    }

    #[test]
    fn fixtures_default_to_replay_dir() {
        let cfg = RunConfig { replay: Some("fixtures/case_a.jsonl".into()), ..Default::default() };
        assert_eq!(cfg.fixtures_path(), Some(PathBuf::from("fixtures")));
        let cfg = RunConfig { replay: Some("case_a.jsonl".into()), ..Default::default() };
        assert_eq!(cfg.fixtures_path(), Some(PathBuf::from(".")));
    }
}
