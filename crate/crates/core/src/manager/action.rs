//! Plain-text action protocol spoken by the manager model:
//!
//! ```text
//! THOUGHT: <reasoning>
//! ACTION: <tool_name> key=value key2="quoted value"
//! FINAL: <answer>
//! ```
//!
//! A reply carries at most one ACTION or FINAL, optionally preceded by
//! THOUGHT lines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Think,
    CallTool,
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAction {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub arguments: BTreeMap<String, String>,
    pub text: String,
}

impl AgentAction {
    pub fn think(text: impl Into<String>) -> Self {
        Self { kind: ActionKind::Think, tool_name: None, arguments: BTreeMap::new(), text: text.into() }
    }

    pub fn final_answer(text: impl Into<String>) -> Self {
        Self { kind: ActionKind::Final, tool_name: None, arguments: BTreeMap::new(), text: text.into() }
    }

    pub fn call(tool: impl Into<String>, arguments: BTreeMap<String, String>, thought: impl Into<String>) -> Self {
        Self { kind: ActionKind::CallTool, tool_name: Some(tool.into()), arguments, text: thought.into() }
    }

    /// Canonical one-line rendering, used when replaying history to the model.
    pub fn render(&self) -> String {
        match self.kind {
            ActionKind::Think => format!("THOUGHT: {}", self.text),
            ActionKind::Final => format!("FINAL: {}", self.text),
            ActionKind::CallTool => {
                let mut line = format!("ACTION: {}", self.tool_name.as_deref().unwrap_or(""));
                for (k, v) in &self.arguments {
                    line.push(' ');
                    line.push_str(k);
                    line.push('=');
                    line.push_str(&shlex::try_quote(v).map(|c| c.into_owned()).unwrap_or_else(|_| v.clone()));
                }
                if self.text.is_empty() {
                    line
                } else {
                    format!("THOUGHT: {}\n{line}", self.text)
                }
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Marker {
    Thought,
    Action,
    Final,
}

fn marker(line: &str) -> Option<(Marker, &str)> {
    let line = line.trim_start();
    [("THOUGHT:", Marker::Thought), ("ACTION:", Marker::Action), ("FINAL:", Marker::Final)]
        .into_iter()
        .find_map(|(p, m)| line.strip_prefix(p).map(|rest| (m, rest.trim())))
}

fn parse_arguments(text: &str) -> Result<BTreeMap<String, String>, String> {
    let tokens = shlex::split(text).ok_or_else(|| format!("unbalanced quotes in arguments: {text}"))?;
    let mut args = BTreeMap::new();
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| format!("argument {token:?} is not key=value"))?;
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(format!("bad argument name {key:?}"));
        }
        if args.insert(key.to_string(), value.to_string()).is_some() {
            return Err(format!("argument {key:?} given twice"));
        }
    }
    Ok(args)
}

/// Parses one model reply. `is_tool` decides which tool names are
/// dispatchable.
pub fn parse_action(reply: &str, is_tool: impl Fn(&str) -> bool) -> Result<AgentAction, String> {
    let mut sections: Vec<(Marker, String)> = Vec::new();
    for line in reply.lines() {
        match marker(line) {
            Some((m, rest)) => sections.push((m, rest.to_string())),
            None => {
                if let Some((m, text)) = sections.last_mut() {
                    if *m != Marker::Action && !line.trim().is_empty() {
                        if !text.is_empty() {
                            text.push('\n');
                        }
                        text.push_str(line.trim());
                    }
                }
            }
        }
    }
    let thought = sections
        .iter()
        .filter(|(m, _)| *m == Marker::Thought)
        .map(|(_, t)| t.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let decisive: Vec<&(Marker, String)> = sections.iter().filter(|(m, _)| *m != Marker::Thought).collect();
    match decisive.as_slice() {
        [] if sections.is_empty() => Err("reply contains no THOUGHT, ACTION or FINAL line".into()),
        [] => Ok(AgentAction::think(thought)),
        [(Marker::Final, text)] => {
            if text.trim().is_empty() {
                Err("FINAL answer is empty".into())
            } else {
                Ok(AgentAction::final_answer(text.trim()))
            }
        }
        [(_, text)] => {
            let (tool, rest) = text.split_once(char::is_whitespace).unwrap_or((text.as_str(), ""));
            if tool.is_empty() {
                return Err("ACTION without a tool name".into());
            }
            if !is_tool(tool) {
                return Err(format!("unknown tool {tool:?}"));
            }
            Ok(AgentAction::call(tool, parse_arguments(rest)?, thought))
        }
        _ => Err("reply contains more than one ACTION/FINAL".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tools(name: &str) -> bool {
        matches!(name, "web_search" | "visit_page")
    }

    #[test]
    fn final_answer() {
        let a = parse_action("FINAL: 42", tools).unwrap();
        assert_eq!(a, AgentAction::final_answer("42"));
    }

    #[test]
    fn tool_call_with_quoted_args() {
        let reply = "THOUGHT: need code\nACTION: web_search query=\"youtube transcript api github\" source=code_host";
        let a = parse_action(reply, tools).unwrap();
        assert_eq!(a.kind, ActionKind::CallTool);
        assert_eq!(a.tool_name.as_deref(), Some("web_search"));
        assert_eq!(a.arguments["query"], "youtube transcript api github");
        assert_eq!(a.arguments["source"], "code_host");
        assert_eq!(a.text, "need code");
        assert_eq!(parse_action(&a.render(), tools).unwrap(), a);
    }

    #[test]
    fn thought_only() {
        let a = parse_action("THOUGHT: hmm\nstill thinking", tools).unwrap();
        assert_eq!(a, AgentAction::think("hmm\nstill thinking"));
    }

    #[test]
    fn rejects() {
        assert!(parse_action("The answer is 42", tools).is_err());
        assert!(parse_action("FINAL:   ", tools).is_err());
        assert!(parse_action("ACTION: rm_rf path=/", tools).unwrap_err().contains("unknown tool"));
        assert!(parse_action("ACTION: web_search query", tools).is_err());
        assert!(parse_action("ACTION: web_search q=1\nFINAL: 2", tools).is_err());
        assert!(parse_action("ACTION: web_search q=\"open", tools).is_err());
    }
}
