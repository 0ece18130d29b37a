//! Capability-gap assessment. The model is asked, with a prompt that pushes
//! back on overconfidence, whether the task needs tools the framework lacks,
//! and answers in a strict fenced `assessment` block.

use std::collections::HashSet;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatMessage, LlmError, LlmGateway, LlmRequest, RoleSlot};
use crate::manager::Task;
use crate::prompts;

pub const MAX_PROPOSALS: usize = 3;

/// One named input of a proposed tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolParam {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    ExitZero,
    NonemptyStdout,
    StdoutMatches,
}

/// How a smoke run decides whether a tool produced the expected result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSpec {
    pub kind: ValidationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
}

impl ValidationSpec {
    pub fn exit_zero() -> Self {
        Self { kind: ValidationKind::ExitZero, pattern: None }
    }

    pub fn nonempty_stdout() -> Self {
        Self { kind: ValidationKind::NonemptyStdout, pattern: None }
    }

    pub fn stdout_matches(pattern: &str) -> Result<Self, String> {
        Regex::new(pattern).map_err(|e| e.to_string())?;
        Ok(Self { kind: ValidationKind::StdoutMatches, pattern: Some(pattern.to_string()) })
    }

    /// Checks the `stdout_matches ⇒ pattern compiles` invariant.
    pub fn check(&self) -> Result<(), String> {
        match (self.kind, &self.pattern) {
            (ValidationKind::StdoutMatches, None) => Err("stdout_matches requires a pattern".into()),
            (ValidationKind::StdoutMatches, Some(p)) => Regex::new(p).map(|_| ()).map_err(|e| e.to_string()),
            _ => Ok(()),
        }
    }

    fn parse(text: &str) -> Result<Self, String> {
        let text = text.trim();
        let (head, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        match head {
            "exit_zero" => Ok(Self::exit_zero()),
            "nonempty_stdout" => Ok(Self::nonempty_stdout()),
            "stdout_matches" if !rest.trim().is_empty() => Self::stdout_matches(rest.trim()),
            "stdout_matches" => Err("stdout_matches requires a pattern".into()),
            other => Err(format!("unknown validation kind {other:?}")),
        }
    }
}

impl fmt::Display for ValidationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ValidationKind::ExitZero => f.write_str("exit_zero"),
            ValidationKind::NonemptyStdout => f.write_str("nonempty_stdout"),
            ValidationKind::StdoutMatches => {
                write!(f, "stdout_matches {}", self.pattern.as_deref().unwrap_or(""))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub purpose: String,
    pub input_schema: Vec<ToolParam>,
    pub output_description: String,
    pub suggested_sources: Vec<String>,
    pub validation_hint: ValidationSpec,
}

impl ToolSpec {
    pub fn check(&self) -> Result<(), String> {
        if !is_tool_name(&self.name) {
            return Err(format!("tool name {:?} must be lowercase and underscore-separated", self.name));
        }
        let mut seen = HashSet::new();
        for p in &self.input_schema {
            if !seen.insert(p.name.as_str()) {
                return Err(format!("duplicate input parameter {:?} in {}", p.name, self.name));
            }
        }
        self.validation_hint.check()
    }

    /// Smoke-run argv: parameter defaults in schema order, stopping at the
    /// first parameter without one.
    pub fn smoke_args(&self) -> Vec<String> {
        self.input_schema.iter().map_while(|p| p.default.clone()).collect()
    }
}

pub fn is_tool_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && !name.ends_with('_')
        && !name.contains("__")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityAssessment {
    pub gap_found: bool,
    pub rationale: String,
    pub proposals: Vec<ToolSpec>,
}

#[derive(Debug, Error)]
pub enum BrainstormError {
    #[error("could not parse assessment: {0}")]
    Parse(String),
    #[error("assessment inputs must be non-empty")]
    EmptyInput,
    #[error(transparent)]
    Gateway(#[from] LlmError),
}

#[derive(Default)]
struct Draft {
    name: String,
    purpose: Option<String>,
    inputs: Vec<ToolParam>,
    output: Option<String>,
    sources: Vec<String>,
    validation: Option<ValidationSpec>,
}

impl Draft {
    fn finish(self) -> Result<ToolSpec, String> {
        let spec = ToolSpec {
            purpose: self.purpose.ok_or_else(|| format!("tool {} has no PURPOSE", self.name))?,
            name: self.name,
            input_schema: self.inputs,
            output_description: self.output.unwrap_or_default(),
            suggested_sources: self.sources,
            validation_hint: self.validation.unwrap_or_else(ValidationSpec::exit_zero),
        };
        spec.check()?;
        Ok(spec)
    }
}

fn parse_param(text: &str) -> Result<ToolParam, String> {
    let (decl, default) = match text.split_once('=') {
        Some((d, v)) => (d, Some(v.trim().to_string())),
        None => (text, None),
    };
    let (name, kind) = decl.split_once(':').unwrap_or((decl, "string"));
    let name = name.trim();
    if !is_tool_name(name) {
        return Err(format!("bad INPUT parameter name {name:?}"));
    }
    let kind = kind.trim();
    Ok(ToolParam {
        name: name.to_string(),
        kind: if kind.is_empty() { "string".into() } else { kind.to_string() },
        default,
    })
}

fn assessment_block(reply: &str) -> Option<&str> {
    let start = reply.find("```assessment")?;
    let body = &reply[start + "```assessment".len()..];
    let body = body.strip_prefix('\n').or_else(|| body.strip_prefix("\r\n")).unwrap_or(body);
    let end = body.find("```")?;
    Some(&body[..end])
}

/// Parses a brainstorm reply. `gap_found` and non-empty proposals must
/// agree; proposals past [`MAX_PROPOSALS`] are dropped.
pub fn parse_assessment(reply: &str) -> Result<CapabilityAssessment, String> {
    let block = assessment_block(reply).ok_or("no ```assessment block")?;
    let mut gap = None;
    let mut rationale = String::new();
    let mut drafts: Vec<Draft> = Vec::new();
    for (i, raw) in block.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| format!("line {}: expected KEY: value", i + 1))?;
        let key = key.trim().to_ascii_uppercase();
        let value = value.trim();
        let current = || format!("line {}: {key} outside a TOOL group", i + 1);
        match key.as_str() {
            "GAP" => {
                gap = Some(match value.to_ascii_lowercase().as_str() {
                    "yes" | "true" => true,
                    "no" | "false" => false,
                    other => return Err(format!("GAP must be yes or no, got {other:?}")),
                })
            }
            "RATIONALE" => rationale = value.to_string(),
            "TOOL" => {
                if drafts.iter().any(|d| d.name == value) {
                    return Err(format!("duplicate tool name {value:?}"));
                }
                drafts.push(Draft { name: value.to_string(), ..Draft::default() })
            }
            "PURPOSE" => drafts.last_mut().ok_or_else(current)?.purpose = Some(value.to_string()),
            "OUTPUT" => drafts.last_mut().ok_or_else(current)?.output = Some(value.to_string()),
            "SOURCE" => drafts.last_mut().ok_or_else(current)?.sources.push(value.to_string()),
            "INPUT" => {
                let param = parse_param(value)?;
                drafts.last_mut().ok_or_else(current)?.inputs.push(param)
            }
            "VALIDATION" => {
                let v = ValidationSpec::parse(value)?;
                drafts.last_mut().ok_or_else(current)?.validation = Some(v)
            }
            other => return Err(format!("line {}: unknown key {other:?}", i + 1)),
        }
    }
    let gap_found = gap.ok_or("missing GAP line")?;
    if drafts.len() > MAX_PROPOSALS {
        log::info!("dropping {} proposals beyond the limit of {MAX_PROPOSALS}", drafts.len() - MAX_PROPOSALS);
        drafts.truncate(MAX_PROPOSALS);
    }
    let proposals = drafts.into_iter().map(Draft::finish).collect::<Result<Vec<_>, _>>()?;
    match (gap_found, proposals.is_empty()) {
        (true, true) => Err("GAP is yes but no TOOL was proposed".into()),
        (false, false) => Err("GAP is no but tools were proposed".into()),
        _ => Ok(CapabilityAssessment { gap_found, rationale, proposals }),
    }
}

pub struct Brainstormer {
    gateway: LlmGateway,
}

impl Brainstormer {
    pub fn new(gateway: LlmGateway) -> Self {
        Self { gateway }
    }

    pub fn prompt(task: &Task, framework_description: &str, registry_summary: &str) -> Vec<ChatMessage> {
        let text = prompts::render(
            prompts::BRAINSTORM_V1,
            &[("framework", framework_description), ("registry", registry_summary), ("task", &task.query)],
        );
        vec![ChatMessage::user(text)]
    }

    pub fn assess(
        &self,
        task: &Task,
        framework_description: &str,
        registry_summary: &str,
    ) -> Result<CapabilityAssessment, BrainstormError> {
        if task.query.trim().is_empty() || framework_description.trim().is_empty() || registry_summary.trim().is_empty() {
            return Err(BrainstormError::EmptyInput);
        }
        let mut messages = Self::prompt(task, framework_description, registry_summary);
        let reply = self.gateway.complete(&LlmRequest::new(RoleSlot::Brainstorm, messages.clone()))?;
        let err = match parse_assessment(&reply.content) {
            Ok(a) => return Ok(a),
            Err(e) => e,
        };
        log::warn!("brainstorm reply unparseable ({err}), asking again");
        messages.push(ChatMessage::assistant(reply.content));
        messages.push(ChatMessage::user(format!(
            "Your reply could not be parsed: {err}. Answer again with exactly one ```assessment block in the required format."
        )));
        let retry = self.gateway.complete(&LlmRequest::new(RoleSlot::Brainstorm, messages))?;
        parse_assessment(&retry.content).map_err(BrainstormError::Parse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ReplayBackend, ReplayEntry, ReplayScript};
    use std::sync::Arc;

    const YOUTUBE: &str = "Looking at the task:\n```assessment\nGAP: yes\nRATIONALE: no way to read video subtitles\n\
TOOL: youtube_subtitle_crawler\nPURPOSE: extract subtitles from a youtube video\n\
INPUT: video_url: url = https://www.youtube.com/watch?v=abc\nOUTPUT: transcript text\n\
SOURCE: youtube transcript api github\nVALIDATION: nonempty_stdout\n```\n";

    fn brainstormer(replies: &[&str]) -> Brainstormer {
        let entries = replies
            .iter()
            .map(|r| ReplayEntry { role_slot: RoleSlot::Brainstorm, prompt_digest: None, response: r.to_string() })
            .collect();
        let backend = Arc::new(ReplayBackend::new(ReplayScript::from_entries(entries)));
        Brainstormer::new(LlmGateway::new(backend))
    }

    fn task() -> Task {
        Task::new("t", "What number is said after the dinosaurs?")
    }

    #[test]
    fn no_gap() {
        let b = brainstormer(&["```assessment\nGAP: no\nRATIONALE: simple arithmetic\n```"]);
        let a = b.assess(&task(), "tools: none", "Registered MCPs: none").unwrap();
        assert!(!a.gap_found);
        assert!(a.proposals.is_empty());
    }

    #[test]
    fn youtube_proposal() {
        let a = brainstormer(&[YOUTUBE]).assess(&task(), "fw", "Registered MCPs: none").unwrap();
        assert!(a.gap_found);
        assert_eq!(a.proposals.len(), 1);
        let p = &a.proposals[0];
        assert_eq!(p.name, "youtube_subtitle_crawler");
        assert_eq!(p.suggested_sources, vec!["youtube transcript api github".to_string()]);
        assert_eq!(p.smoke_args(), vec!["https://www.youtube.com/watch?v=abc".to_string()]);
        assert_eq!(p.validation_hint, ValidationSpec::nonempty_stdout());
    }

    #[test]
    fn gap_without_proposals_fails_after_reask() {
        let bad = "```assessment\nGAP: yes\nRATIONALE: hmm\n```";
        let err = brainstormer(&[bad, bad]).assess(&task(), "fw", "r").unwrap_err();
        assert!(matches!(err, BrainstormError::Parse(_)), "{err}");
    }

    #[test]
    fn reask_recovers() {
        let a = brainstormer(&["I think we need a tool", YOUTUBE]).assess(&task(), "fw", "r").unwrap();
        assert_eq!(a.proposals[0].name, "youtube_subtitle_crawler");
    }

    #[test]
    fn no_gap_with_tools_is_rejected() {
        let reply = "```assessment\nGAP: no\nTOOL: x_tool\nPURPOSE: p\n```";
        assert!(parse_assessment(reply).is_err());
    }

    #[test]
    fn proposals_are_capped() {
        let mut reply = String::from("```assessment\nGAP: yes\n");
        for i in 0..5 {
            reply.push_str(&format!("TOOL: tool_{i}\nPURPOSE: p{i}\n"));
        }
        reply.push_str("```");
        let a = parse_assessment(&reply).unwrap();
        assert_eq!(a.proposals.len(), MAX_PROPOSALS);
        assert_eq!(a.proposals[2].name, "tool_2");
    }

    #[test]
    fn duplicate_params_and_names() {
        let dup_param = "```assessment\nGAP: yes\nTOOL: a_tool\nPURPOSE: p\nINPUT: x: int\nINPUT: x: str\n```";
        assert!(parse_assessment(dup_param).unwrap_err().contains("duplicate input"));
        let dup_tool = "```assessment\nGAP: yes\nTOOL: a\nPURPOSE: p\nTOOL: a\nPURPOSE: q\n```";
        assert!(parse_assessment(dup_tool).unwrap_err().contains("duplicate tool"));
        let bad_name = "```assessment\nGAP: yes\nTOOL: Bad-Name\nPURPOSE: p\n```";
        assert!(parse_assessment(bad_name).is_err());
    }

    #[test]
    fn stdout_matches_requires_compiling_pattern() {
        assert!(ValidationSpec::parse("stdout_matches").is_err());
        assert!(ValidationSpec::parse("stdout_matches [0-").is_err());
        let v = ValidationSpec::parse("stdout_matches [0-9]+").unwrap();
        assert_eq!(v.to_string(), "stdout_matches [0-9]+");
    }

    #[test]
    fn empty_inputs_rejected() {
        let err = brainstormer(&[YOUTUBE]).assess(&task(), "", "r").unwrap_err();
        assert!(matches!(err, BrainstormError::EmptyInput));
    }
}
