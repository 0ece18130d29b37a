//! Isolated environments for generated tools: metadata inspection, planning,
//! provisioning through a pluggable provider, the recovery ladder, teardown
//! and orphan collection.

pub mod deps;
mod provider;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::short_hex;
use crate::scriptgen::ScriptBundle;
use crate::transcript::{Actor, EventKind, EventSink};
pub use deps::{import_tokens, Dependency};
pub use provider::{EnvContext, EnvProvider, ProviderTemplates, StepOutput, StubProvider, TemplateProvider};

pub const MAX_RECOVERY_ROUNDS: u8 = 2;
const STDERR_TAIL: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetadataBundle {
    pub readme_text: Option<String>,
    pub requirements_text: Option<String>,
    pub shell_script_texts: Vec<String>,
    /// Canonical location the metadata came from (repository URL or path);
    /// feeds the environment name.
    #[serde(default)]
    pub source_key: Option<String>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl MetadataBundle {
    pub fn is_empty(&self) -> bool {
        self.readme_text.is_none() && self.requirements_text.is_none() && self.shell_script_texts.is_empty()
    }
}

fn join_text(slot: &mut Option<String>, text: &str) {
    match slot {
        Some(existing) => {
            existing.push('\n');
            existing.push_str(text);
        }
        None => *slot = Some(text.to_string()),
    }
}

/// Sorts files into README, requirements and shell scripts by file name.
pub fn inspect_metadata<P: AsRef<str>, C: AsRef<str>>(sources: &[(P, C)]) -> MetadataBundle {
    let mut bundle = MetadataBundle::default();
    for (path, content) in sources {
        let path = path.as_ref();
        let file = path.rsplit('/').next().unwrap_or(path).to_ascii_lowercase();
        if file.starts_with("readme") {
            join_text(&mut bundle.readme_text, content.as_ref());
        } else if file.starts_with("requirements") {
            join_text(&mut bundle.requirements_text, content.as_ref());
        } else if file.ends_with(".sh") {
            bundle.shell_script_texts.push(content.as_ref().to_string());
        } else {
            log::info!("metadata file {path} ignored");
            continue;
        }
        bundle.provenance.push(path.to_string());
    }
    bundle
}

/// One provisioning step. Serialized as a command line, with two reserved
/// markers for the provider-managed steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum SetupStep {
    CreateEnv,
    InstallDeps,
    Run(String),
}

const CREATE_MARKER: &str = "@create-env";
const INSTALL_MARKER: &str = "@install-deps";

impl From<SetupStep> for String {
    fn from(step: SetupStep) -> String {
        step.to_string()
    }
}

impl From<String> for SetupStep {
    fn from(s: String) -> Self {
        match s.as_str() {
            CREATE_MARKER => SetupStep::CreateEnv,
            INSTALL_MARKER => SetupStep::InstallDeps,
            _ => SetupStep::Run(s),
        }
    }
}

impl fmt::Display for SetupStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetupStep::CreateEnv => f.write_str(CREATE_MARKER),
            SetupStep::InstallDeps => f.write_str(INSTALL_MARKER),
            SetupStep::Run(line) => f.write_str(line),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryKind {
    RelaxVersions,
    MinimalDeps,
    Discard,
}

impl RecoveryKind {
    pub const LADDER: [RecoveryKind; 3] = [RecoveryKind::RelaxVersions, RecoveryKind::MinimalDeps, RecoveryKind::Discard];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvProfile {
    pub env_name: String,
    pub dependencies: Vec<Dependency>,
    pub setup_steps: Vec<SetupStep>,
    pub provenance: Vec<String>,
    pub recovery_round: u8,
    /// Normalized module names the tool script imports; drives `minimal_deps`.
    #[serde(default)]
    pub used_modules: BTreeSet<String>,
}

impl EnvProfile {
    fn rebuild_steps(&mut self) {
        let residual: Vec<SetupStep> =
            self.setup_steps.iter().filter(|s| matches!(s, SetupStep::Run(_))).cloned().collect();
        self.setup_steps = vec![SetupStep::CreateEnv];
        if !self.dependencies.is_empty() {
            self.setup_steps.push(SetupStep::InstallDeps);
        }
        self.setup_steps.extend(residual);
    }

    fn fingerprint(&self) -> String {
        let v = json!({"deps": self.dependencies, "steps": self.setup_steps});
        short_hex(v.to_string(), 16)
    }
}

/// `"alita-"` + first 12 hex of SHA-256 over `task_id \n source_key`.
pub fn derive_env_name(task_id: &str, source_key: &str) -> String {
    debug_assert!(!task_id.is_empty() && !source_key.is_empty());
    format!("alita-{}", short_hex(format!("{task_id}\n{source_key}"), 12))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvHandle {
    pub env_name: String,
    pub root_path: PathBuf,
    pub created_at: DateTime<Utc>,
    pub provider_id: String,
}

impl EnvHandle {
    pub fn scratch(&self) -> PathBuf {
        self.root_path.join("scratch")
    }

    pub fn context(&self) -> EnvContext<'_> {
        EnvContext { env_name: &self.env_name, root: &self.root_path }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("provisioning {env_name} failed at step {step} ({command}), exit {exit_code:?}: {stderr_tail}")]
pub struct ProvisionError {
    pub env_name: String,
    /// 1-based index into `setup_steps`.
    pub step: usize,
    pub command: String,
    pub exit_code: Option<i32>,
    pub stderr_tail: String,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment plan failed: {0}")]
    Plan(String),
    #[error(transparent)]
    Provision(#[from] ProvisionError),
    #[error("recovery exhausted for {env_name} after {rounds} rounds")]
    RecoveryExhausted { env_name: String, rounds: u8 },
    #[error("teardown of {env_name} failed: {message}; marked orphaned")]
    Teardown { env_name: String, message: String },
    #[error("environment {0} already has a live handle")]
    AlreadyLive(String),
    #[error("environment io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Builds an environment profile from metadata and the generated bundle.
///
/// Dependencies are the union (first occurrence wins, by normalized name)
/// of requirement lines, install commands in the environment script, and
/// install commands in metadata shell scripts. Steps are create-env,
/// install-deps (when there is anything to install), then the environment
/// script's remaining command lines. Creation/activation lines are dropped.
pub fn plan_env(metadata: &MetadataBundle, bundle: &ScriptBundle, task_id: &str) -> Result<EnvProfile, EnvError> {
    let mut deps: Vec<Dependency> = Vec::new();
    let mut seen = HashSet::new();
    let mut add = |found: Vec<Dependency>| {
        for d in found {
            if seen.insert(d.normalized_name()) {
                deps.push(d);
            }
        }
    };
    if let Some(req) = &metadata.requirements_text {
        add(deps::parse_requirements(req).map_err(EnvError::Plan)?);
    }
    let mut residual = Vec::new();
    for line in deps::classify_script(&bundle.env_setup_script).map_err(EnvError::Plan)? {
        match line {
            deps::ScriptLine::Install(found) => add(found),
            deps::ScriptLine::Other(cmd) => residual.push(SetupStep::Run(cmd)),
            deps::ScriptLine::Lifecycle => {}
        }
    }
    for script in &metadata.shell_script_texts {
        for line in deps::classify_script(script).map_err(EnvError::Plan)? {
            if let deps::ScriptLine::Install(found) = line {
                add(found);
            }
        }
    }
    let source_key = metadata
        .source_key
        .clone()
        .unwrap_or_else(|| short_hex(&bundle.tool_script, 16));
    let mut profile = EnvProfile {
        env_name: derive_env_name(task_id, &source_key),
        dependencies: deps,
        setup_steps: residual,
        provenance: metadata.provenance.clone(),
        recovery_round: 0,
        used_modules: import_tokens(&bundle.tool_script),
    };
    if let Some(key) = &metadata.source_key {
        profile.provenance.insert(0, key.clone());
    }
    profile.rebuild_steps();
    Ok(profile)
}

/// Applies the next rung of the recovery ladder: round 0 relaxes version
/// pins, round 1 keeps only dependencies the tool script imports, round 2
/// is exhausted.
pub fn recover(profile: &EnvProfile, error: &ProvisionError) -> Result<EnvProfile, EnvError> {
    log::info!("recovering {} after: {error}", profile.env_name);
    let mut next = profile.clone();
    match profile.recovery_round {
        0 => next.dependencies = profile.dependencies.iter().map(Dependency::relaxed).collect(),
        1 => next.dependencies.retain(|d| profile.used_modules.contains(&d.normalized_name())),
        rounds => {
            return Err(EnvError::RecoveryExhausted { env_name: profile.env_name.clone(), rounds });
        }
    }
    next.recovery_round += 1;
    next.rebuild_steps();
    Ok(next)
}

/// The strategy that produced a profile at `round`.
pub fn strategy_for_round(round: u8) -> Option<RecoveryKind> {
    match round {
        1 => Some(RecoveryKind::RelaxVersions),
        2 => Some(RecoveryKind::MinimalDeps),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destroyed {
    Removed,
    AlreadyGone,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct GcReport {
    pub removed: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Result of provisioning through the recovery ladder.
#[derive(Debug)]
pub struct LadderResult {
    pub profile: EnvProfile,
    pub strategies: Vec<RecoveryKind>,
    pub outcome: Result<EnvHandle, EnvError>,
}

fn tail(text: &str, n: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    chars[chars.len().saturating_sub(n)..].iter().collect()
}

pub struct EnvManager {
    provider: Arc<dyn EnvProvider>,
    envs_root: PathBuf,
    live: Mutex<HashMap<String, EnvHandle>>,
}

impl EnvManager {
    /// Environments live under `<workdir>/envs/<env_name>/`.
    pub fn new(provider: Arc<dyn EnvProvider>, workdir: &Path) -> Self {
        Self { provider, envs_root: workdir.join("envs"), live: Mutex::new(HashMap::new()) }
    }

    pub fn provider(&self) -> &Arc<dyn EnvProvider> {
        &self.provider
    }

    pub fn root_for(&self, env_name: &str) -> PathBuf {
        self.envs_root.join(env_name)
    }

    fn lock(&self, root: &Path) -> std::io::Result<File> {
        fs::create_dir_all(root)?;
        let f = File::options().create(true).truncate(false).write(true).open(root.join(".lock"))?;
        f.lock()?;
        Ok(f)
    }

    /// Runs every setup step in order and returns a live handle.
    pub fn provision(&self, profile: &EnvProfile, sink: &dyn EventSink) -> Result<EnvHandle, EnvError> {
        if self.live.lock().unwrap().contains_key(&profile.env_name) {
            return Err(EnvError::AlreadyLive(profile.env_name.clone()));
        }
        let root = self.root_for(&profile.env_name);
        let _lock = self.lock(&root)?;
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            if entry.file_name() != ".lock" {
                let p = entry.path();
                if entry.file_type()?.is_dir() { fs::remove_dir_all(p)? } else { fs::remove_file(p)? }
            }
        }
        fs::create_dir_all(root.join("scratch"))?;
        let ctx = EnvContext { env_name: &profile.env_name, root: &root };
        for (i, step) in profile.setup_steps.iter().enumerate() {
            let result = match step {
                SetupStep::CreateEnv => self.provider.create(ctx),
                SetupStep::InstallDeps => self.provider.install(ctx, &profile.dependencies),
                SetupStep::Run(line) => self.provider.run_setup(ctx, line),
            };
            let out = result.unwrap_or_else(|e| StepOutput { exit_code: -1, stdout: String::new(), stderr: e.to_string() });
            sink.emit(
                Actor::Envman,
                EventKind::Observation,
                json!({
                    "env_name": profile.env_name,
                    "step": i + 1,
                    "command": step.to_string(),
                    "exit_code": out.exit_code,
                    "stdout": out.stdout,
                    "stderr": out.stderr,
                }),
            );
            if !out.success() {
                let err = ProvisionError {
                    env_name: profile.env_name.clone(),
                    step: i + 1,
                    command: step.to_string(),
                    exit_code: Some(out.exit_code),
                    stderr_tail: tail(&out.stderr, STDERR_TAIL),
                };
                let _ = self.provider.teardown(ctx);
                let _ = fs::remove_dir_all(root.join("scratch"));
                return Err(err.into());
            }
        }
        fs::write(root.join(".ready"), profile.fingerprint())?;
        let handle = EnvHandle {
            env_name: profile.env_name.clone(),
            root_path: root,
            created_at: Utc::now(),
            provider_id: self.provider.id().to_string(),
        };
        self.live.lock().unwrap().insert(handle.env_name.clone(), handle.clone());
        Ok(handle)
    }

    /// Returns the live handle for the profile's environment, adopting a
    /// previously provisioned root whose steps match, or provisioning anew.
    pub fn ensure(&self, profile: &EnvProfile, sink: &dyn EventSink) -> Result<EnvHandle, EnvError> {
        if let Some(h) = self.live.lock().unwrap().get(&profile.env_name) {
            return Ok(h.clone());
        }
        let root = self.root_for(&profile.env_name);
        let ready = fs::read_to_string(root.join(".ready")).ok();
        if ready.as_deref() == Some(profile.fingerprint().as_str()) {
            let handle = EnvHandle {
                env_name: profile.env_name.clone(),
                root_path: root,
                created_at: Utc::now(),
                provider_id: self.provider.id().to_string(),
            };
            self.live.lock().unwrap().insert(handle.env_name.clone(), handle.clone());
            return Ok(handle);
        }
        self.provision(profile, sink)
    }

    /// Provisions, walking the recovery ladder on failure. Every applied
    /// strategy, including the final discard, is logged to `sink`.
    pub fn provision_with_recovery(&self, profile: EnvProfile, sink: &dyn EventSink) -> LadderResult {
        let mut profile = profile;
        let mut strategies = Vec::new();
        loop {
            let err = match self.ensure(&profile, sink) {
                Ok(handle) => return LadderResult { profile, strategies, outcome: Ok(handle) },
                Err(EnvError::Provision(e)) => e,
                Err(other) => return LadderResult { profile, strategies, outcome: Err(other) },
            };
            match recover(&profile, &err) {
                Ok(next) => {
                    let kind = strategy_for_round(next.recovery_round).expect("round 1 or 2");
                    sink.emit(
                        Actor::Envman,
                        EventKind::Observation,
                        json!({
                            "env_name": next.env_name,
                            "recovery": kind,
                            "round": next.recovery_round,
                            "dependencies": next.dependencies.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
                        }),
                    );
                    strategies.push(kind);
                    profile = next;
                }
                Err(exhausted) => {
                    strategies.push(RecoveryKind::Discard);
                    sink.emit(
                        Actor::Envman,
                        EventKind::Error,
                        json!({"env_name": profile.env_name, "recovery": RecoveryKind::Discard, "error": err.to_string()}),
                    );
                    let _ = fs::remove_dir_all(self.root_for(&profile.env_name));
                    return LadderResult { profile, strategies, outcome: Err(exhausted) };
                }
            }
        }
    }

    /// Tears down and removes an environment. A second call is a no-op.
    pub fn destroy(&self, handle: &EnvHandle) -> Result<Destroyed, EnvError> {
        self.live.lock().unwrap().remove(&handle.env_name);
        if !handle.root_path.exists() {
            return Ok(Destroyed::AlreadyGone);
        }
        let lock = self.lock(&handle.root_path)?;
        let out = self
            .provider
            .teardown(handle.context())
            .unwrap_or_else(|e| StepOutput { exit_code: -1, stdout: String::new(), stderr: e.to_string() });
        if !out.success() {
            fs::write(handle.root_path.join(".orphaned"), &out.stderr)?;
            return Err(EnvError::Teardown { env_name: handle.env_name.clone(), message: tail(&out.stderr, 500) });
        }
        drop(lock);
        fs::remove_dir_all(&handle.root_path)?;
        Ok(Destroyed::Removed)
    }

    /// Removes environment roots older than `ttl` whose names are not in
    /// `referenced`.
    pub fn gc(&self, ttl: Duration, referenced: &HashSet<String>) -> std::io::Result<GcReport> {
        let mut report = GcReport::default();
        let entries = match fs::read_dir(&self.envs_root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(report),
            Err(e) => return Err(e),
        };
        let now = SystemTime::now();
        let mut names: Vec<(String, PathBuf)> = Vec::new();
        for entry in entries {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                names.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
            }
        }
        names.sort();
        for (name, root) in names {
            if referenced.contains(&name) || self.live.lock().unwrap().contains_key(&name) {
                continue;
            }
            let age = fs::metadata(&root)?.modified().ok().and_then(|m| now.duration_since(m).ok());
            if age.is_none_or(|a| a < ttl) {
                continue;
            }
            let handle = EnvHandle {
                env_name: name.clone(),
                root_path: root.clone(),
                created_at: Utc::now(),
                provider_id: self.provider.id().to_string(),
            };
            let teardown = self.provider.teardown(handle.context());
            match teardown {
                Ok(out) if out.success() => match fs::remove_dir_all(&root) {
                    Ok(()) => report.removed.push(name),
                    Err(e) => report.failed.push((name, e.to_string())),
                },
                Ok(out) => report.failed.push((name, tail(&out.stderr, 500))),
                Err(e) => report.failed.push((name, e.to_string())),
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests;
