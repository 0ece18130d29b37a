//! Tool construction: turns a [`ToolSpec`] plus retrieved material into a
//! [`ScriptBundle`] (tool script, environment script, cleanup script, entry
//! command) and statically checks the result.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brainstorm::ToolSpec;
use crate::llm::{ChatMessage, LlmError, LlmGateway, LlmRequest, RoleSlot};
use crate::prompts;
use crate::runner::AttemptReport;

pub const MAX_EXCERPT_CHARS: usize = 16_384;
pub const MAX_SCRIPT_BYTES: usize = 64 * 1024;
const TRUNCATION_MARKER: &str = "\n[... truncated]";

pub const DEFAULT_CLEANUP: &str = "#!/bin/sh\n\
# default cleanup: clear the scratch directory; the provider tears down the environment\n\
rm -rf \"${ALITA_SCRATCH:?}\"/* 2>/dev/null\n\
exit 0\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Readme,
    Code,
    Webpage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub source_url: String,
    pub kind: ContextKind,
    pub excerpt: String,
    pub fetched_at: DateTime<Utc>,
}

impl RetrievedContext {
    /// Builds a context entry, truncating the excerpt to
    /// [`MAX_EXCERPT_CHARS`] characters including the marker. Returns `None`
    /// for blank excerpts.
    pub fn new(source_url: impl Into<String>, kind: ContextKind, excerpt: &str) -> Option<Self> {
        if excerpt.trim().is_empty() {
            return None;
        }
        let excerpt = if excerpt.chars().count() > MAX_EXCERPT_CHARS {
            let keep = MAX_EXCERPT_CHARS - TRUNCATION_MARKER.chars().count();
            let mut s: String = excerpt.chars().take(keep).collect();
            s.push_str(TRUNCATION_MARKER);
            s
        } else {
            excerpt.to_string()
        };
        Some(Self { source_url: source_url.into(), kind, excerpt, fetched_at: Utc::now() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptBundle {
    pub tool_script: String,
    pub env_setup_script: String,
    pub cleanup_script: String,
    pub entry_command: Vec<String>,
    pub language_hint: String,
}

const LANGUAGES: &[(&str, &str)] =
    &[("python", "py"), ("shell", "sh"), ("javascript", "js"), ("ruby", "rb"), ("perl", "pl")];

/// Canonical language name for a fence info string or interpreter name.
pub fn normalize_language(hint: &str) -> String {
    let h = hint.trim().to_ascii_lowercase();
    let canonical = match h.as_str() {
        "python" | "python3" | "py" => "python",
        "bash" | "sh" | "shell" | "zsh" => "shell",
        "javascript" | "js" | "node" | "nodejs" => "javascript",
        "ruby" | "rb" => "ruby",
        "perl" | "pl" => "perl",
        other => return other.chars().filter(char::is_ascii_alphanumeric).collect(),
    };
    canonical.to_string()
}

fn extension_for(language: &str) -> String {
    LANGUAGES
        .iter()
        .find(|(l, _)| *l == language)
        .map(|(_, e)| e.to_string())
        .unwrap_or_else(|| if language.is_empty() { "txt".into() } else { language.to_string() })
}

fn language_for(extension: &str) -> String {
    LANGUAGES
        .iter()
        .find(|(_, e)| *e == extension)
        .map(|(l, _)| l.to_string())
        .unwrap_or_else(|| if extension == "txt" { String::new() } else { extension.to_string() })
}

impl ScriptBundle {
    pub fn tool_file_name(&self) -> String {
        format!("tool.{}", extension_for(&self.language_hint))
    }

    pub fn entry_references_tool(&self) -> bool {
        let file = self.tool_file_name();
        self.entry_command.iter().any(|t| t == &file || t.ends_with(&format!("/{file}")))
    }

    /// Writes `tool.<ext>`, `env_setup.sh`, `cleanup.sh` and `entry.txt`.
    pub fn write_to_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(self.tool_file_name()), &self.tool_script)?;
        fs::write(dir.join("env_setup.sh"), &self.env_setup_script)?;
        fs::write(dir.join("cleanup.sh"), &self.cleanup_script)?;
        let entry = shlex::try_join(self.entry_command.iter().map(String::as_str))
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        fs::write(dir.join("entry.txt"), format!("{entry}\n"))
    }

    pub fn read_from_dir(dir: &Path) -> io::Result<Self> {
        let invalid = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
        let mut tool = None;
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(ext) = name.strip_prefix("tool.") {
                if tool.replace((name.clone(), ext.to_string())).is_some() {
                    return Err(invalid(format!("more than one tool script in {}", dir.display())));
                }
            }
        }
        let (tool_name, ext) = tool.ok_or_else(|| invalid(format!("no tool.* in {}", dir.display())))?;
        let entry = fs::read_to_string(dir.join("entry.txt"))?;
        let entry_command = shlex::split(entry.trim_end_matches('\n'))
            .ok_or_else(|| invalid("unbalanced quotes in entry.txt".into()))?;
        Ok(Self {
            tool_script: fs::read_to_string(dir.join(tool_name))?,
            env_setup_script: fs::read_to_string(dir.join("env_setup.sh"))?,
            cleanup_script: fs::read_to_string(dir.join("cleanup.sh"))?,
            entry_command,
            language_hint: language_for(&ext),
        })
    }

    /// The files a stored bundle must contain.
    pub fn required_files(&self) -> [String; 4] {
        [self.tool_file_name(), "env_setup.sh".into(), "cleanup.sh".into(), "entry.txt".into()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleIssue {
    pub code: String,
    pub detail: String,
}

impl BundleIssue {
    fn new(code: &str, detail: impl Into<String>) -> Self {
        Self { code: code.to_string(), detail: detail.into() }
    }
}

static RM_ROOT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?m)\brm\s+(?:-[A-Za-z-]+\s+)*["']?(?:/|/\*|~/?|\$HOME/?|\$\{HOME\}/?|/(?:bin|boot|dev|etc|home|lib|opt|root|sbin|usr|var)/?)["']?(?:\s|;|&|\||$)"#,
    )
    .unwrap()
});
static REDIRECT_ABS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?:^|[^0-9&<>=-])>>?\s*["']?(/[^\s;|&"']*)"#).unwrap());
static TEE_ABS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"\btee\s+(?:-a\s+)?["']?(/[^\s;|&"']+)"#).unwrap());
static OPEN_ABS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"\bopen\(\s*["'](/[^"']*)["']\s*,\s*["'][^"']*[wax]"#).unwrap());

fn scan_script(label: &str, script: &str, issues: &mut Vec<BundleIssue>) {
    if script.len() > MAX_SCRIPT_BYTES {
        issues.push(BundleIssue::new(
            "oversized_script",
            format!("{label} is {} bytes (limit {MAX_SCRIPT_BYTES})", script.len()),
        ));
    }
    if let Some(m) = RM_ROOT.find(script) {
        issues.push(BundleIssue::new("dangerous_path_operation", format!("{label}: {}", m.as_str().trim())));
    }
    let abs_writes = REDIRECT_ABS
        .captures_iter(script)
        .chain(TEE_ABS.captures_iter(script))
        .chain(OPEN_ABS.captures_iter(script))
        .map(|c| c[1].to_string())
        .filter(|p| !p.starts_with("/dev/"));
    for path in abs_writes {
        issues.push(BundleIssue::new("absolute_path_write", format!("{label} writes to {path}")));
    }
}

/// Static checks only; running the bundle is the runner's job.
pub fn validate_bundle(bundle: &ScriptBundle) -> Vec<BundleIssue> {
    let mut issues = Vec::new();
    if bundle.tool_script.trim().is_empty() {
        issues.push(BundleIssue::new("empty_tool_script", "tool script is empty"));
    }
    if bundle.env_setup_script.trim().is_empty() {
        issues.push(BundleIssue::new("empty_env_setup_script", "environment script is empty"));
    }
    if bundle.entry_command.is_empty() {
        issues.push(BundleIssue::new("empty_entry_command", "entry command is empty"));
    } else if !bundle.entry_references_tool() {
        issues.push(BundleIssue::new(
            "entry_not_referencing_tool",
            format!("entry {:?} does not mention {}", bundle.entry_command, bundle.tool_file_name()),
        ));
    }
    scan_script("tool script", &bundle.tool_script, &mut issues);
    scan_script("environment script", &bundle.env_setup_script, &mut issues);
    scan_script("cleanup script", &bundle.cleanup_script, &mut issues);
    issues
}

#[derive(Debug, Error)]
pub enum ScriptGenError {
    #[error("could not parse generated bundle: {}", .0.join(", "))]
    BundleParse(Vec<String>),
    #[error(transparent)]
    Gateway(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub tool_spec: ToolSpec,
    pub retrieved: Vec<RetrievedContext>,
    pub prior_attempts: Vec<AttemptReport>,
}

struct Block {
    info: String,
    body: String,
}

/// Parses the `TOOL:` / `ENV:` / `CLEANUP:` fenced sections and the
/// `ENTRY:` line. A missing cleanup section gets [`DEFAULT_CLEANUP`].
pub fn parse_bundle(reply: &str) -> Result<ScriptBundle, Vec<String>> {
    let mut tool: Option<Block> = None;
    let mut env: Option<Block> = None;
    let mut cleanup: Option<Block> = None;
    let mut entry: Option<String> = None;
    let mut problems = Vec::new();

    let lines: Vec<&str> = reply.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim();
        i += 1;
        if let Some(rest) = line.strip_prefix("ENTRY:") {
            entry = Some(rest.trim().to_string());
            continue;
        }
        let header = match line.trim_end_matches(':').to_ascii_uppercase().as_str() {
            "TOOL" if line.ends_with(':') => "tool",
            "ENV" if line.ends_with(':') => "env",
            "CLEANUP" if line.ends_with(':') => "cleanup",
            _ => continue,
        };
        while i < lines.len() && lines[i].trim().is_empty() {
            i += 1;
        }
        let Some(info) = lines.get(i).and_then(|l| l.trim_start().strip_prefix("```")) else {
            problems.push(format!("{header}_block_not_fenced"));
            continue;
        };
        let info = info.trim().to_string();
        i += 1;
        let mut body = String::new();
        let mut closed = false;
        while i < lines.len() {
            if lines[i].trim_start().starts_with("```") {
                closed = true;
                i += 1;
                break;
            }
            body.push_str(lines[i]);
            body.push('\n');
            i += 1;
        }
        if !closed {
            problems.push(format!("{header}_block_unterminated"));
        }
        let block = Some(Block { info, body });
        match header {
            "tool" => tool = block,
            "env" => env = block,
            _ => cleanup = block,
        }
    }

    if tool.as_ref().is_none_or(|b| b.body.trim().is_empty()) {
        problems.push("tool_missing".into());
    }
    if env.as_ref().is_none_or(|b| b.body.trim().is_empty()) {
        problems.push("env_setup_missing".into());
    }
    let entry_command = match entry.as_deref().map(str::trim) {
        None | Some("") => {
            problems.push("entry_missing".into());
            Vec::new()
        }
        Some(line) => match shlex::split(line) {
            Some(tokens) if !tokens.is_empty() => tokens,
            _ => {
                problems.push("entry_unparseable".into());
                Vec::new()
            }
        },
    };
    if !problems.is_empty() {
        return Err(problems);
    }
    let tool = tool.expect("checked above");
    let language_hint = if tool.info.is_empty() {
        entry_command.first().map(|t| normalize_language(t)).unwrap_or_else(|| "shell".into())
    } else {
        normalize_language(tool.info.split_whitespace().next().unwrap_or(""))
    };
    Ok(ScriptBundle {
        tool_script: tool.body,
        env_setup_script: env.expect("checked above").body,
        cleanup_script: cleanup
            .filter(|b| !b.body.trim().is_empty())
            .map(|b| b.body)
            .unwrap_or_else(|| DEFAULT_CLEANUP.to_string()),
        entry_command,
        language_hint,
    })
}

pub struct ScriptGenerator {
    gateway: LlmGateway,
}

impl ScriptGenerator {
    pub fn new(gateway: LlmGateway) -> Self {
        Self { gateway }
    }

    pub fn prompt(context: &GenerationContext) -> Vec<ChatMessage> {
        let spec = &context.tool_spec;
        let inputs = if spec.input_schema.is_empty() {
            "(none)".to_string()
        } else {
            spec.input_schema
                .iter()
                .map(|p| match &p.default {
                    Some(d) => format!("- {} ({}), example: {d}", p.name, p.kind),
                    None => format!("- {} ({})", p.name, p.kind),
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let retrieved = if context.retrieved.is_empty() {
            "(none)".to_string()
        } else {
            context
                .retrieved
                .iter()
                .map(|r| format!("### {} ({:?})\n{}", r.source_url, r.kind, r.excerpt))
                .collect::<Vec<_>>()
                .join("\n\n")
        };
        let attempts = if context.prior_attempts.is_empty() {
            "(none)".to_string()
        } else {
            context
                .prior_attempts
                .iter()
                .map(|a| format!("attempt {} failed:\n{}", a.attempt_no, a.error_summary))
                .collect::<Vec<_>>()
                .join("\n\n")
        };
        let text = prompts::render(
            prompts::SCRIPTGEN_V1,
            &[
                ("name", &spec.name),
                ("purpose", &spec.purpose),
                ("inputs", &inputs),
                ("output", &spec.output_description),
                ("retrieved", &retrieved),
                ("attempts", &attempts),
            ],
        );
        vec![ChatMessage::user(text)]
    }

    pub fn generate(&self, context: &GenerationContext) -> Result<ScriptBundle, ScriptGenError> {
        let mut messages = Self::prompt(context);
        let reply = self.gateway.complete(&LlmRequest::new(RoleSlot::Scriptgen, messages.clone()))?;
        let problems = match parse_bundle(&reply.content) {
            Ok(b) => return Ok(b),
            Err(p) => p,
        };
        log::warn!("generated bundle unparseable ({}), asking again", problems.join(", "));
        messages.push(ChatMessage::assistant(reply.content));
        messages.push(ChatMessage::user(format!(
            "Your reply could not be parsed ({}). Reply again with TOOL:, ENV: and CLEANUP: sections, \
             each followed by a fenced code block, and an ENTRY: line.",
            problems.join(", ")
        )));
        let retry = self.gateway.complete(&LlmRequest::new(RoleSlot::Scriptgen, messages))?;
        parse_bundle(&retry.content).map_err(ScriptGenError::BundleParse)
    }
}
