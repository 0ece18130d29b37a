//! Runs generated tools inside their environments, judges the output and
//! drives the generate → provision → execute → validate loop.

use std::io::Read;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Child, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::brainstorm::{ToolSpec, ValidationKind, ValidationSpec};
use crate::envman::{self, EnvError, EnvHandle, EnvManager, EnvProfile, RecoveryKind};
use crate::llm::LlmError;
use crate::scriptgen::{validate_bundle, GenerationContext, RetrievedContext, ScriptBundle, ScriptGenError, ScriptGenerator};
use crate::transcript::{Actor, EventKind, EventSink};

pub const MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const STREAM_LIMIT: usize = 256 * 1024;
pub const ERROR_CONTEXT_CHARS: usize = 2000;
const STREAM_MARKER: &str = "\n[... output truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Success,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
}

impl ExecutionResult {
    pub fn duration(&self) -> Duration {
        Duration::from_millis(self.duration_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptReport {
    pub attempt_no: u32,
    pub error_summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy_applied: Option<RecoveryKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub report: String,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot start {0}")]
    Spawn(String),
    #[error("environment {0} is gone")]
    EnvGone(String),
    #[error("timeout must be positive")]
    InvalidTimeout,
    #[error("tool {tool} discarded after {} failed attempt(s)", reports.len())]
    ToolSynthesisFailed { tool: String, reports: Vec<AttemptReport> },
    #[error(transparent)]
    Gateway(#[from] LlmError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("runner io error: {0}")]
    Io(#[from] std::io::Error),
}

fn tail_chars(text: &str, n: usize) -> String {
    let count = text.chars().count();
    text.chars().skip(count.saturating_sub(n)).collect()
}

fn collect(mut stream: impl Read + Send + 'static) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        let mut truncated = false;
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = STREAM_LIMIT.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    truncated |= n > room;
                }
            }
        }
        let mut text = String::from_utf8_lossy(&kept).into_owned();
        if truncated {
            text.push_str(STREAM_MARKER);
        }
        text
    })
}

fn kill_group(child: &Child) {
    // The child leads its own process group; take the whole group down.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
}

fn is_executable(path: &Path) -> bool {
    path.metadata().map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0).unwrap_or(false)
}

fn resolve_program(program: &str, scratch: &Path, env: &EnvHandle) -> bool {
    if program.contains('/') {
        let p = scratch.join(program);
        return p.is_file();
    }
    let path = std::env::var("PATH").unwrap_or_default();
    std::iter::once(env.root_path.join("bin"))
        .chain(std::env::split_paths(&path))
        .any(|dir| is_executable(&dir.join(program)))
}

pub struct Executor {
    envs: Arc<EnvManager>,
}

impl Executor {
    pub fn new(envs: Arc<EnvManager>) -> Self {
        Self { envs }
    }

    /// Runs `entry_command + args` through the provider's run template, with
    /// the environment's scratch directory as cwd. On timeout the whole
    /// process group is killed.
    pub fn execute(
        &self,
        bundle: &ScriptBundle,
        env: &EnvHandle,
        args: &[String],
        timeout: Duration,
    ) -> Result<ExecutionResult, RunError> {
        if timeout.is_zero() {
            return Err(RunError::InvalidTimeout);
        }
        if !env.root_path.is_dir() {
            return Err(RunError::EnvGone(env.env_name.clone()));
        }
        let scratch = env.scratch();
        std::fs::create_dir_all(&scratch)?;
        let tool_path = scratch.join(bundle.tool_file_name());
        std::fs::write(&tool_path, &bundle.tool_script)?;
        std::fs::set_permissions(&tool_path, std::fs::Permissions::from_mode(0o755))?;

        let program = bundle.entry_command.first().ok_or_else(|| RunError::Spawn("empty entry command".into()))?;
        if !resolve_program(program, &scratch, env) {
            return Err(RunError::Spawn(format!("{program}: not found or not executable")));
        }
        let argv: Vec<String> = bundle.entry_command.iter().chain(args).cloned().collect();
        let mut cmd = self.envs.provider().command(env.context(), &argv);
        cmd.current_dir(&scratch)
            .env("ALITA_SCRATCH", &scratch)
            .env("ALITA_ENV_ROOT", &env.root_path)
            .env("ALITA_ENV_NAME", &env.env_name)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|e| RunError::Spawn(format!("{program}: {e}")))?;
        let out = collect(child.stdout.take().expect("piped"));
        let err = collect(child.stderr.take().expect("piped"));
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() >= timeout {
                kill_group(&child);
                timed_out = true;
                break child.wait()?;
            }
            thread::sleep(Duration::from_millis(5));
        };
        // Orphaned grandchildren may still hold the pipes; make sure they die too.
        kill_group(&child);
        let stdout = out.join().unwrap_or_default();
        let stderr = err.join().unwrap_or_default();
        let duration_ms = started.elapsed().as_millis() as u64;
        let (status, exit_code) = if timed_out {
            (ExecStatus::Timeout, None)
        } else {
            let code = status.code().or_else(|| status.signal().map(|s| 128 + s)).unwrap_or(-1);
            (if code == 0 { ExecStatus::Success } else { ExecStatus::Error }, Some(code))
        };
        Ok(ExecutionResult { status, exit_code, stdout, stderr, duration_ms })
    }
}

/// Pure judgement of one execution. Every kind first requires a clean exit.
pub fn validate(result: &ExecutionResult, spec: &ValidationSpec) -> Verdict {
    let fail = |report: String| Verdict { passed: false, report };
    match result.status {
        ExecStatus::Timeout => return fail("execution timed out".into()),
        ExecStatus::Error => return fail(format!("exited with code {}", result.exit_code.unwrap_or(-1))),
        ExecStatus::Success => {}
    }
    match spec.kind {
        ValidationKind::ExitZero => Verdict { passed: true, report: "exited with code 0".into() },
        ValidationKind::NonemptyStdout if result.stdout.trim().is_empty() => fail("stdout is empty".into()),
        ValidationKind::NonemptyStdout => Verdict { passed: true, report: "stdout is non-empty".into() },
        ValidationKind::StdoutMatches => {
            let pattern = spec.pattern.as_deref().unwrap_or("");
            match Regex::new(pattern) {
                Err(e) => fail(format!("invalid pattern {pattern:?}: {e}")),
                Ok(re) if re.is_match(&result.stdout) => {
                    Verdict { passed: true, report: format!("stdout matches {pattern:?}") }
                }
                Ok(_) => fail(format!("stdout does not match {pattern:?}")),
            }
        }
    }
}

/// Everything produced by a successful synthesis, ready for registration.
#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub bundle: ScriptBundle,
    pub profile: EnvProfile,
    pub result: ExecutionResult,
    pub reports: Vec<AttemptReport>,
}

/// Canonical repository key for a source URL: scheme and trailing slash dropped.
pub fn source_key(url: &str) -> String {
    let trimmed = url.split_once("://").map_or(url, |(_, rest)| rest);
    trimmed.trim_end_matches('/').to_string()
}

pub struct Synthesizer {
    generator: ScriptGenerator,
    envs: Arc<EnvManager>,
    executor: Executor,
    bundles_dir: std::path::PathBuf,
    timeout: Duration,
}

enum AttemptFailure {
    Soft(String, Option<RecoveryKind>),
    Fatal(RunError),
}

impl From<RunError> for AttemptFailure {
    fn from(e: RunError) -> Self {
        AttemptFailure::Fatal(e)
    }
}

impl Synthesizer {
    /// Bundles are written to `<workdir>/bundles/<tool_name>/`.
    pub fn new(generator: ScriptGenerator, envs: Arc<EnvManager>, workdir: &Path, timeout: Duration) -> Self {
        Self {
            generator,
            executor: Executor::new(envs.clone()),
            envs,
            bundles_dir: workdir.join("bundles"),
            timeout,
        }
    }

    pub fn bundle_dir(&self, tool_name: &str) -> std::path::PathBuf {
        self.bundles_dir.join(tool_name)
    }

    /// Up to [`MAX_ATTEMPTS`] rounds of generate → plan → provision (with
    /// the recovery ladder) → smoke run → validate. Each failed round adds
    /// an [`AttemptReport`] that the next generation sees.
    pub fn synthesize_tool(
        &self,
        spec: &ToolSpec,
        retrieved: &[RetrievedContext],
        task_id: &str,
        sink: &dyn EventSink,
    ) -> Result<SynthesisOutcome, RunError> {
        let mut context = GenerationContext {
            tool_spec: spec.clone(),
            retrieved: retrieved.to_vec(),
            prior_attempts: Vec::new(),
        };
        for attempt in 1..=MAX_ATTEMPTS {
            match self.attempt(&context, attempt, task_id, sink) {
                Ok((bundle, profile, result)) => {
                    return Ok(SynthesisOutcome { bundle, profile, result, reports: context.prior_attempts });
                }
                Err(AttemptFailure::Fatal(e)) => return Err(e),
                Err(AttemptFailure::Soft(summary, strategy)) => {
                    let report = AttemptReport { attempt_no: attempt, error_summary: summary, strategy_applied: strategy };
                    sink.emit(Actor::Runner, EventKind::Error, json!({"tool": spec.name, "attempt_report": report}));
                    context.prior_attempts.push(report);
                }
            }
        }
        Err(RunError::ToolSynthesisFailed { tool: spec.name.clone(), reports: context.prior_attempts })
    }

    fn attempt(
        &self,
        context: &GenerationContext,
        attempt: u32,
        task_id: &str,
        sink: &dyn EventSink,
    ) -> Result<(ScriptBundle, EnvProfile, ExecutionResult), AttemptFailure> {
        let spec = &context.tool_spec;
        sink.emit(
            Actor::Manager,
            EventKind::ToolCall,
            json!({"tool": "script_generating", "arguments": {"tool_name": spec.name, "attempt": attempt}}),
        );
        let bundle = match self.generator.generate(context) {
            Ok(b) => b,
            Err(ScriptGenError::BundleParse(problems)) => {
                return Err(AttemptFailure::Soft(format!("bundle could not be parsed: {}", problems.join(", ")), None));
            }
            Err(ScriptGenError::Gateway(e)) => return Err(RunError::Gateway(e).into()),
        };
        let issues = validate_bundle(&bundle);
        sink.emit(Actor::Scriptgen, EventKind::Observation, json!({"tool": spec.name, "bundle": bundle, "issues": issues}));
        if !issues.is_empty() {
            let detail: Vec<String> = issues.iter().map(|i| format!("{}: {}", i.code, i.detail)).collect();
            return Err(AttemptFailure::Soft(format!("static check failed: {}", detail.join("; ")), None));
        }
        bundle.write_to_dir(&self.bundle_dir(&spec.name)).map_err(RunError::from)?;

        let files: Vec<(String, String)> = context
            .retrieved
            .iter()
            .map(|r| {
                let name = match r.kind {
                    crate::scriptgen::ContextKind::Readme => "README.md",
                    _ => "page.txt",
                };
                (name.to_string(), r.excerpt.clone())
            })
            .collect();
        let mut metadata = envman::inspect_metadata(&files);
        metadata.source_key =
            Some(context.retrieved.first().map(|r| source_key(&r.source_url)).unwrap_or_else(|| spec.name.clone()));
        let profile = match envman::plan_env(&metadata, &bundle, task_id) {
            Ok(p) => p,
            Err(e) => return Err(AttemptFailure::Soft(e.to_string(), None)),
        };

        let ladder = self.envs.provision_with_recovery(profile, sink);
        let strategy = ladder.strategies.last().copied();
        let handle = match ladder.outcome {
            Ok(h) => h,
            Err(e @ (EnvError::RecoveryExhausted { .. } | EnvError::Provision(_) | EnvError::Plan(_))) => {
                return Err(AttemptFailure::Soft(format!("environment setup failed: {e}"), strategy));
            }
            Err(e) => return Err(RunError::Env(e).into()),
        };
        let profile = ladder.profile;

        let args = spec.smoke_args();
        sink.emit(
            Actor::Manager,
            EventKind::ToolCall,
            json!({"tool": "code_running", "arguments": {"tool_name": spec.name, "args": args}}),
        );
        let outcome = self.executor.execute(&bundle, &handle, &args, self.timeout);
        let result = match outcome {
            Ok(r) => r,
            Err(RunError::Spawn(msg)) => {
                self.teardown(&bundle, &handle, sink);
                return Err(AttemptFailure::Soft(format!("could not start tool: {msg}"), strategy));
            }
            Err(e) => {
                self.teardown(&bundle, &handle, sink);
                return Err(e.into());
            }
        };
        let verdict = validate(&result, &spec.validation_hint);
        sink.emit(
            Actor::Runner,
            EventKind::Observation,
            json!({"tool": spec.name, "env_name": handle.env_name, "result": result, "verdict": verdict}),
        );
        self.teardown(&bundle, &handle, sink);
        if verdict.passed {
            Ok((bundle, profile, result))
        } else {
            let summary = format!(
                "validation failed ({}): {}\nstderr tail:\n{}",
                spec.validation_hint,
                verdict.report,
                tail_chars(&result.stderr, ERROR_CONTEXT_CHARS)
            );
            Err(AttemptFailure::Soft(summary, strategy))
        }
    }

    /// Runs the bundle's cleanup script, then destroys the environment.
    fn teardown(&self, bundle: &ScriptBundle, handle: &EnvHandle, sink: &dyn EventSink) {
        let cleanup = ScriptBundle {
            tool_script: bundle.cleanup_script.clone(),
            env_setup_script: String::new(),
            cleanup_script: String::new(),
            entry_command: vec!["sh".into(), "tool.sh".into()],
            language_hint: "shell".into(),
        };
        if let Ok(r) = self.executor.execute(&cleanup, handle, &[], Duration::from_secs(30)) {
            if r.status != ExecStatus::Success {
                log::warn!("cleanup for {} exited with {:?}", handle.env_name, r.exit_code);
            }
        }
        if let Err(e) = self.envs.destroy(handle) {
            sink.emit(Actor::Envman, EventKind::Error, json!({"env_name": handle.env_name, "error": e.to_string()}));
        }
    }
}
