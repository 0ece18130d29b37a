//! The coordinating agent: brainstorms first, reuses or synthesizes tools,
//! then runs the bounded act/observe loop until the model gives a final
//! answer.

pub mod action;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::brainstorm::{BrainstormError, Brainstormer, ToolSpec};
use crate::envman::EnvManager;
use crate::llm::{ChatMessage, LlmError, LlmGateway, LlmRequest, RoleSlot};
use crate::mcpbox::{self, McpBox, McpBoxError, Provenance, MCPRecord};
use crate::mcphost::{call_args, RegistryInvoker, ToolInvoker};
use crate::prompts;
use crate::runner::{AttemptReport, ExecStatus, RunError, Synthesizer};
use crate::scriptgen::{ContextKind, RetrievedContext, ScriptGenerator, MAX_EXCERPT_CHARS};
use crate::transcript::{Actor, EventKind, EventSink, Transcript, TranscriptEvent};
use crate::webagent::{Direction, PageView, SearchSource, TextBrowser, WebAgent};

pub use action::{parse_action, ActionKind, AgentAction};

pub const LOOP_BUDGET: usize = 12;
pub const BRAINSTORM_TOOL: &str = "mcp_brainstorming";
pub const BUILTIN_TOOLS: [&str; 4] = ["web_search", "visit_page", "page_up", "page_down"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub query: String,
    #[serde(default)]
    pub attachments: Vec<PathBuf>,
    pub created_at: DateTime<Utc>,
}

impl Task {
    pub fn new(id: impl Into<String>, query: impl Into<String>) -> Self {
        Self { id: id.into(), query: query.into(), attachments: vec![], created_at: Utc::now() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPrompt {
    pub task_id: String,
    pub system_preamble: String,
    pub framework_description: String,
    pub user_query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub task_id: String,
    pub answer_text: String,
    pub supporting_event_seqs: Vec<u64>,
}

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("task is invalid: {0}")]
    InvalidTask(String),
    #[error("manager reply could not be parsed after a re-ask: {0}")]
    ActionParse(String),
    #[error("loop budget of {0} steps exceeded")]
    LoopBudgetExceeded(usize),
    #[error("tool {tool} could not be synthesized after {} attempt(s)", reports.len())]
    ToolSynthesisFailed { tool: String, reports: Vec<AttemptReport> },
    #[error(transparent)]
    Gateway(#[from] LlmError),
    #[error(transparent)]
    Brainstorm(#[from] BrainstormError),
    #[error(transparent)]
    Registry(#[from] McpBoxError),
    #[error("tool synthesis: {0}")]
    Runner(RunError),
    #[error("transcript io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<RunError> for ManagerError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::ToolSynthesisFailed { tool, reports } => ManagerError::ToolSynthesisFailed { tool, reports },
            RunError::Gateway(e) => ManagerError::Gateway(e),
            other => ManagerError::Runner(other),
        }
    }
}

pub fn registry_section(summary: &str) -> String {
    if summary == mcpbox::EMPTY_SUMMARY {
        summary.to_string()
    } else {
        format!("Registered MCPs:\n{summary}")
    }
}

pub fn build_augmented_prompt(task: &Task, registry_summary: &str) -> AugmentedPrompt {
    let mut user_query = format!("Task: {}", task.query);
    if !task.attachments.is_empty() {
        user_query.push_str("\nAttachments:");
        for a in &task.attachments {
            user_query.push_str(&format!("\n- {}", a.display()));
        }
    }
    AugmentedPrompt {
        task_id: task.id.clone(),
        system_preamble: prompts::MANAGER_V1.trim_end().to_string(),
        framework_description: format!("{}\n{}", prompts::FRAMEWORK.trim_end(), registry_section(registry_summary)),
        user_query,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ManagerSettings {
    pub loop_budget: usize,
    pub reuse_threshold: f64,
    pub tool_timeout: Duration,
}

impl Default for ManagerSettings {
    fn default() -> Self {
        Self { loop_budget: LOOP_BUDGET, reuse_threshold: mcpbox::REUSE_THRESHOLD, tool_timeout: crate::runner::DEFAULT_TIMEOUT }
    }
}

fn loop_step(event: &TranscriptEvent) -> Option<u64> {
    event.payload.get("step").and_then(Value::as_u64).filter(|_| event.payload.get("loop").is_some())
}

fn action_from_event(event: &TranscriptEvent) -> Option<AgentAction> {
    let text = event.payload["text"].as_str().unwrap_or("").to_string();
    match event.kind {
        EventKind::Thought => Some(AgentAction::think(text)),
        EventKind::Final => Some(AgentAction::final_answer(text)),
        EventKind::ToolCall => {
            let args = serde_json::from_value(event.payload["arguments"].clone()).unwrap_or_default();
            Some(AgentAction::call(event.payload["tool"].as_str().unwrap_or(""), args, text))
        }
        _ => None,
    }
}

pub struct Manager {
    gateway: LlmGateway,
    brainstormer: Brainstormer,
    synthesizer: Synthesizer,
    web: WebAgent,
    registry: McpBox,
    invoker: Arc<dyn ToolInvoker>,
    workdir: PathBuf,
    settings: ManagerSettings,
}

impl Manager {
    pub fn new(
        gateway: LlmGateway,
        web: WebAgent,
        envs: Arc<EnvManager>,
        registry: McpBox,
        workdir: &Path,
        settings: ManagerSettings,
    ) -> Self {
        let invoker = Arc::new(RegistryInvoker::new(registry.clone(), envs.clone(), settings.tool_timeout));
        Self {
            brainstormer: Brainstormer::new(gateway.clone()),
            synthesizer: Synthesizer::new(ScriptGenerator::new(gateway.clone()), envs, workdir, settings.tool_timeout),
            gateway,
            web,
            registry,
            invoker,
            workdir: workdir.to_path_buf(),
            settings,
        }
    }

    pub fn with_invoker(mut self, invoker: Arc<dyn ToolInvoker>) -> Self {
        self.invoker = invoker;
        self
    }

    pub fn registry(&self) -> &McpBox {
        &self.registry
    }

    pub fn transcript_path(&self, task_id: &str) -> PathBuf {
        self.workdir.join("transcripts").join(format!("{task_id}.jsonl"))
    }

    fn tool_names(&self) -> Result<Vec<String>, ManagerError> {
        let mut names: Vec<String> = BUILTIN_TOOLS.iter().map(|s| s.to_string()).collect();
        names.extend(self.registry.records()?.into_iter().map(|r| r.name));
        Ok(names)
    }

    fn messages(prompt: &AugmentedPrompt, history: &[TranscriptEvent]) -> Vec<ChatMessage> {
        let mut messages = vec![
            ChatMessage::system(format!("{}\n\n{}", prompt.system_preamble, prompt.framework_description)),
            ChatMessage::user(prompt.user_query.clone()),
        ];
        for event in history.iter().filter(|e| loop_step(e).is_some()) {
            if event.actor == Actor::Manager {
                if let Some(action) = action_from_event(event) {
                    messages.push(ChatMessage::assistant(action.render()));
                    if action.kind == ActionKind::Think {
                        messages.push(ChatMessage::user("Continue."));
                    }
                }
            } else if event.kind == EventKind::Observation || event.kind == EventKind::Error {
                let text = event.payload["observation"].as_str().unwrap_or("");
                messages.push(ChatMessage::user(format!("OBSERVATION: {text}")));
            }
        }
        messages
    }

    /// Asks the manager model for its next action given the loop history.
    pub fn step(&self, history: &[TranscriptEvent], prompt: &AugmentedPrompt) -> Result<AgentAction, ManagerError> {
        let taken = history.iter().filter(|e| e.actor == Actor::Manager && loop_step(e).is_some()).count();
        if taken >= self.settings.loop_budget {
            return Err(ManagerError::LoopBudgetExceeded(self.settings.loop_budget));
        }
        let tools = self.tool_names()?;
        let is_tool = |name: &str| tools.iter().any(|t| t == name);
        let mut messages = Self::messages(prompt, history);
        let reply = self.gateway.complete(&LlmRequest::new(RoleSlot::Manager, messages.clone()))?;
        let err = match parse_action(&reply.content, is_tool) {
            Ok(a) => return Ok(a),
            Err(e) => e,
        };
        log::warn!("manager reply unparseable ({err}), asking again");
        messages.push(ChatMessage::assistant(reply.content));
        messages.push(ChatMessage::user(prompts::render(
            prompts::MANAGER_REASK,
            &[("error", &err), ("tools", &tools.join(", "))],
        )));
        let retry = self.gateway.complete(&LlmRequest::new(RoleSlot::Manager, messages))?;
        parse_action(&retry.content, is_tool).map_err(ManagerError::ActionParse)
    }

    /// Runs the whole pipeline for one task. The transcript at
    /// [`Manager::transcript_path`] is written in every outcome.
    pub fn run_task(&self, task: &Task) -> Result<FinalAnswer, ManagerError> {
        if task.query.trim().is_empty() {
            return Err(ManagerError::InvalidTask("query is empty".into()));
        }
        if task.id.is_empty() || task.id.contains(['/', '\\']) || task.id.starts_with('.') {
            return Err(ManagerError::InvalidTask(format!("bad task id {:?}", task.id)));
        }
        let transcript = Transcript::create(&self.workdir, &task.id)?;
        let outcome = self.run_inner(task, &transcript);
        if let Err(e) = &outcome {
            transcript.emit(Actor::Manager, EventKind::Error, json!({"error": e.to_string()}));
        }
        transcript.flush()?;
        outcome
    }

    fn run_inner(&self, task: &Task, transcript: &Transcript) -> Result<FinalAnswer, ManagerError> {
        let summary = self.registry.summarize()?;
        let prompt = build_augmented_prompt(task, &summary);

        transcript.emit(
            Actor::Manager,
            EventKind::ToolCall,
            json!({"tool": BRAINSTORM_TOOL, "arguments": {"task_id": task.id}}),
        );
        let assessment = self.brainstormer.assess(task, &prompt.framework_description, &registry_section(&summary))?;
        transcript.emit(Actor::Brainstorm, EventKind::Observation, json!({"tool": BRAINSTORM_TOOL, "assessment": assessment}));

        let mut browser = self.web.browser();
        for spec in &assessment.proposals {
            self.acquire_tool(task, spec, &mut browser, transcript)?;
        }

        let prompt = build_augmented_prompt(task, &self.registry.summarize()?);
        let mut browser = self.web.browser();
        let mut page: Option<PageView> = None;
        let mut supporting = Vec::new();
        for step in 1..=self.settings.loop_budget {
            let action = self.step(&transcript.events(), &prompt)?;
            match action.kind {
                ActionKind::Final => {
                    let seq = transcript.emit(
                        Actor::Manager,
                        EventKind::Final,
                        json!({"loop": true, "step": step, "text": action.text}),
                    );
                    supporting.push(seq);
                    return Ok(FinalAnswer { task_id: task.id.clone(), answer_text: action.text, supporting_event_seqs: supporting });
                }
                ActionKind::Think => {
                    transcript.emit(Actor::Manager, EventKind::Thought, json!({"loop": true, "step": step, "text": action.text}));
                }
                ActionKind::CallTool => {
                    let tool = action.tool_name.clone().unwrap_or_default();
                    transcript.emit(
                        Actor::Manager,
                        EventKind::ToolCall,
                        json!({"loop": true, "step": step, "tool": tool, "arguments": action.arguments, "text": action.text}),
                    );
                    let (actor, ok, observation) = self.dispatch(&tool, &action.arguments, &mut browser, &mut page, transcript);
                    let kind = if ok { EventKind::Observation } else { EventKind::Error };
                    let seq = transcript.emit(
                        actor,
                        kind,
                        json!({"loop": true, "step": step, "tool": tool, "observation": observation}),
                    );
                    if ok {
                        supporting.push(seq);
                    }
                }
            }
        }
        Err(ManagerError::LoopBudgetExceeded(self.settings.loop_budget))
    }

    /// Reuses a registered tool matching the proposal or synthesizes and
    /// registers a new one.
    fn acquire_tool(
        &self,
        task: &Task,
        spec: &ToolSpec,
        browser: &mut TextBrowser,
        transcript: &Transcript,
    ) -> Result<String, ManagerError> {
        transcript.emit(
            Actor::Manager,
            EventKind::ToolCall,
            json!({"tool": "mcp_box_lookup", "arguments": {"query": spec.purpose, "name": spec.name}}),
        );
        let hits = self.registry.lookup(&spec.purpose, self.settings.reuse_threshold)?;
        let matches: Vec<Value> = hits
            .iter()
            .map(|(id, score)| {
                let name = self.registry.get(id).map(|r| r.name).unwrap_or_default();
                json!({"id": id, "name": name, "score": score})
            })
            .collect();
        transcript.emit(Actor::Mcpbox, EventKind::Observation, json!({"tool": "mcp_box_lookup", "matches": matches}));
        if let Some((id, _)) = hits.first() {
            return Ok(id.clone());
        }

        let retrieved = self.retrieve(spec, browser, transcript);
        let outcome = self.synthesizer.synthesize_tool(spec, &retrieved, &task.id, transcript)?;
        let provenance = Provenance {
            task_id: task.id.clone(),
            model_ids: self.gateway.models().iter().map(|(s, m)| (s.as_str().to_string(), m.clone())).collect(),
            created_at: Utc::now(),
        };
        let candidate =
            MCPRecord::candidate(spec, &self.synthesizer.bundle_dir(&spec.name), outcome.profile, provenance);
        transcript.emit(
            Actor::Manager,
            EventKind::ToolCall,
            json!({"tool": "mcp_register", "arguments": {"name": spec.name}}),
        );
        let (id, created) = self.registry.register_detailed(&candidate)?;
        transcript.emit(
            Actor::Mcpbox,
            EventKind::Observation,
            json!({"tool": "mcp_register", "id": id, "name": spec.name, "created": created}),
        );
        Ok(id)
    }

    /// Gathers reference material for a proposal: the first suggested
    /// source is opened directly when it is a URL, otherwise searched on the
    /// code host and its top hit read.
    fn retrieve(&self, spec: &ToolSpec, browser: &mut TextBrowser, transcript: &Transcript) -> Vec<RetrievedContext> {
        let mut out = Vec::new();
        let Some(source) = spec.suggested_sources.first() else { return out };
        let url = if source.starts_with("http://") || source.starts_with("https://") {
            Some(source.clone())
        } else {
            transcript.emit(
                Actor::Manager,
                EventKind::ToolCall,
                json!({"tool": "web_search", "arguments": {"query": source, "source": SearchSource::CodeHost.as_str()}}),
            );
            match self.web.search(source, SearchSource::CodeHost) {
                Ok(results) => {
                    transcript.emit(Actor::Webagent, EventKind::Observation, json!({"tool": "web_search", "results": results}));
                    results.first().map(|r| r.url.clone())
                }
                Err(e) => {
                    transcript.emit(Actor::Webagent, EventKind::Error, json!({"tool": "web_search", "error": e.to_string()}));
                    None
                }
            }
        };
        let Some(url) = url else { return out };
        transcript.emit(Actor::Manager, EventKind::ToolCall, json!({"tool": "visit_page", "arguments": {"url": url}}));
        match browser.visit(&url) {
            Ok(mut view) => {
                let mut text = view.content.clone();
                while !view.at_end && text.chars().count() < MAX_EXCERPT_CHARS {
                    view = browser.page_move(&view, Direction::Down);
                    text.push_str(&view.content);
                }
                transcript.emit(
                    Actor::Webagent,
                    EventKind::Observation,
                    json!({"tool": "visit_page", "url": view.url, "total_viewports": view.total_viewports, "http_status": view.http_status, "chars": text.chars().count()}),
                );
                let kind = if view.url.contains("github.com") { ContextKind::Readme } else { ContextKind::Webpage };
                if view.http_status.is_none() {
                    out.extend(RetrievedContext::new(view.url, kind, &text));
                }
            }
            Err(e) => {
                transcript.emit(Actor::Webagent, EventKind::Error, json!({"tool": "visit_page", "error": e.to_string()}));
            }
        }
        out
    }

    fn dispatch(
        &self,
        tool: &str,
        args: &BTreeMap<String, String>,
        browser: &mut TextBrowser,
        page: &mut Option<PageView>,
        sink: &dyn EventSink,
    ) -> (Actor, bool, String) {
        let show = |v: &PageView| {
            format!("[{} viewport {}/{}]\n{}", v.url, v.viewport_index + 1, v.total_viewports, v.content)
        };
        match tool {
            "web_search" => {
                let query = args.get("query").map(String::as_str).unwrap_or("");
                let source = args.get("source").and_then(|s| SearchSource::parse(s)).unwrap_or(SearchSource::Web);
                match self.web.search(query, source) {
                    Ok(results) if results.is_empty() => (Actor::Webagent, true, "no results".into()),
                    Ok(results) => {
                        let lines: Vec<String> = results
                            .iter()
                            .enumerate()
                            .map(|(i, r)| format!("{}. {} <{}>\n   {}", i + 1, r.title, r.url, r.snippet))
                            .collect();
                        (Actor::Webagent, true, lines.join("\n"))
                    }
                    Err(e) => (Actor::Webagent, false, format!("error: {e}")),
                }
            }
            "visit_page" => match browser.visit(args.get("url").map(String::as_str).unwrap_or("")) {
                Ok(view) => {
                    let text = show(&view);
                    *page = Some(view);
                    (Actor::Webagent, true, text)
                }
                Err(e) => (Actor::Webagent, false, format!("error: {e}")),
            },
            "page_up" | "page_down" => match page.as_ref() {
                None => (Actor::Webagent, false, "error: no page is open".into()),
                Some(current) => {
                    let dir = if tool == "page_up" { Direction::Up } else { Direction::Down };
                    let view = browser.page_move(current, dir);
                    let text = show(&view);
                    *page = Some(view);
                    (Actor::Webagent, true, text)
                }
            },
            name => self.call_registered(name, args, sink),
        }
    }

    fn call_registered(&self, name: &str, args: &BTreeMap<String, String>, sink: &dyn EventSink) -> (Actor, bool, String) {
        let record = match self.registry.find_by_name(name) {
            Ok(Some(r)) => r,
            Ok(None) => return (Actor::Manager, false, format!("error: unknown tool {name}")),
            Err(e) => return (Actor::Mcpbox, false, format!("error: {e}")),
        };
        let map: Map<String, Value> = args.iter().map(|(k, v)| (k.clone(), Value::from(v.clone()))).collect();
        let argv = match call_args(&record, &map) {
            Ok(a) => a,
            Err(e) => return (Actor::Runner, false, format!("error: {e}")),
        };
        match self.invoker.invoke(&record, &argv, sink) {
            Ok(r) if r.status == ExecStatus::Success => (Actor::Runner, true, r.stdout.trim_end().to_string()),
            Ok(r) => (
                Actor::Runner,
                false,
                format!("error: tool exited with {:?} {:?}\n{}", r.status, r.exit_code, r.stderr.trim_end()),
            ),
            Err(e) => (Actor::Runner, false, format!("error: {e}")),
        }
    }
}
