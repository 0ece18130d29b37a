//! Serves one registered tool as an MCP server: newline-delimited JSON-RPC
//! 2.0 over stdio with `initialize`, `tools/list` and `tools/call`.

use std::io::{self, BufRead, Write};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Map, Value};

use crate::envman::EnvManager;
use crate::mcpbox::{MCPRecord, McpBox};
use crate::runner::{ExecStatus, ExecutionResult, Executor};
use crate::transcript::{Actor, EventKind, EventSink, NullSink};

pub const PROTOCOL_VERSION: &str = "2024-11-05";
pub const SERVER_NAME: &str = "alita-mcphost";
const STDERR_TAIL_CHARS: usize = 2000;

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;

/// Runs a registered tool. Implementations own env provisioning and any
/// usage accounting.
pub trait ToolInvoker: Send + Sync {
    fn invoke(&self, record: &MCPRecord, args: &[String], sink: &dyn EventSink) -> Result<ExecutionResult, String>;
}

/// Executes tools from a registry: provisions the record's env on first use
/// (walking the recovery ladder) and counts successful calls.
pub struct RegistryInvoker {
    registry: McpBox,
    envs: Arc<EnvManager>,
    executor: Executor,
    timeout: Duration,
}

impl RegistryInvoker {
    pub fn new(registry: McpBox, envs: Arc<EnvManager>, timeout: Duration) -> Self {
        Self { registry, executor: Executor::new(envs.clone()), envs, timeout }
    }

    pub fn registry(&self) -> &McpBox {
        &self.registry
    }
}

impl ToolInvoker for RegistryInvoker {
    fn invoke(&self, record: &MCPRecord, args: &[String], sink: &dyn EventSink) -> Result<ExecutionResult, String> {
        let bundle = self.registry.load_bundle(record).map_err(|e| format!("bundle unreadable: {e}"))?;
        let ladder = self.envs.provision_with_recovery(record.env_profile.clone(), sink);
        let handle = ladder.outcome.map_err(|e| format!("environment setup failed: {e}"))?;
        let result = self.executor.execute(&bundle, &handle, args, self.timeout).map_err(|e| e.to_string())?;
        if result.status == ExecStatus::Success {
            self.registry.record_usage(&record.id).map_err(|e| e.to_string())?;
        }
        Ok(result)
    }
}

fn json_type(kind: &str) -> &'static str {
    match kind.to_ascii_lowercase().as_str() {
        "int" | "integer" => "integer",
        "float" | "number" | "double" => "number",
        "bool" | "boolean" => "boolean",
        _ => "string",
    }
}

fn typed_default(kind: &str, raw: &str) -> Value {
    let parsed = match json_type(kind) {
        "integer" => raw.parse::<i64>().ok().map(Value::from),
        "number" => raw.parse::<f64>().ok().map(Value::from),
        "boolean" => raw.parse::<bool>().ok().map(Value::from),
        _ => None,
    };
    parsed.unwrap_or_else(|| Value::from(raw))
}

/// The record as an MCP tool descriptor.
pub fn tool_descriptor(record: &MCPRecord) -> Value {
    let mut properties = Map::new();
    let mut required = Vec::new();
    for p in &record.input_schema {
        let mut prop = json!({"type": json_type(&p.kind)});
        match &p.default {
            Some(d) => prop["default"] = typed_default(&p.kind, d),
            None => required.push(Value::from(p.name.clone())),
        }
        properties.insert(p.name.clone(), prop);
    }
    json!({
        "name": record.name,
        "description": record.description,
        "inputSchema": {"type": "object", "properties": properties, "required": required},
    })
}

/// Positional argv for the tool, following `input_schema` order.
pub fn call_args(record: &MCPRecord, arguments: &Map<String, Value>) -> Result<Vec<String>, String> {
    if let Some(unknown) = arguments.keys().find(|k| !record.input_schema.iter().any(|p| &p.name == *k)) {
        return Err(format!("unknown argument {unknown:?}"));
    }
    record
        .input_schema
        .iter()
        .map(|p| match arguments.get(&p.name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) | None => p.default.clone().ok_or_else(|| format!("missing required argument {:?}", p.name)),
            Some(other) => Ok(other.to_string()),
        })
        .collect()
}

fn tail(text: &str, n: usize) -> String {
    let count = text.chars().count();
    text.chars().skip(count.saturating_sub(n)).collect()
}

fn response(id: Value, result: Value) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "result": result})
}

fn error(id: Value, code: i64, message: impl Into<String>) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "error": {"code": code, "message": message.into()}})
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub requests: u64,
    pub tool_calls: u64,
}

pub struct McpServer<'a> {
    record: MCPRecord,
    invoker: &'a dyn ToolInvoker,
    sink: Option<&'a dyn EventSink>,
    null: NullSink,
}

impl<'a> McpServer<'a> {
    pub fn new(record: MCPRecord, invoker: &'a dyn ToolInvoker) -> Self {
        Self { record, invoker, sink: None, null: NullSink::default() }
    }

    pub fn with_sink(mut self, sink: &'a dyn EventSink) -> Self {
        self.sink = Some(sink);
        self
    }

    /// Handles one input line; notifications yield no response.
    pub fn handle_line(&self, line: &str) -> Option<Value> {
        let msg: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                log::debug!("unparseable request: {e}");
                return Some(error(Value::Null, PARSE_ERROR, "parse error"));
            }
        };
        let id = msg.get("id").cloned();
        let method = match msg.get("method").and_then(Value::as_str) {
            Some(m) if msg.get("jsonrpc").and_then(Value::as_str) == Some("2.0") => m,
            _ => return id.map(|id| error(id, INVALID_REQUEST, "invalid request")),
        };
        let id = id?;
        let params = msg.get("params").cloned().unwrap_or(Value::Null);
        Some(match method {
            "initialize" => response(
                id,
                json!({
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {"tools": {"listChanged": false}},
                    "serverInfo": {"name": SERVER_NAME, "version": env!("CARGO_PKG_VERSION")},
                }),
            ),
            "tools/list" => response(id, json!({"tools": [tool_descriptor(&self.record)]})),
            "tools/call" => self.call(id, &params),
            other => error(id, METHOD_NOT_FOUND, format!("method not found: {other}")),
        })
    }

    fn sink(&self) -> &dyn EventSink {
        self.sink.unwrap_or(&self.null)
    }

    fn call(&self, id: Value, params: &Value) -> Value {
        let name = params.get("name").and_then(Value::as_str).unwrap_or("");
        if name != self.record.name {
            return error(id, INVALID_PARAMS, format!("unknown tool {name:?}"));
        }
        let empty = Map::new();
        let arguments = match params.get("arguments") {
            None | Some(Value::Null) => &empty,
            Some(Value::Object(m)) => m,
            Some(_) => return error(id, INVALID_PARAMS, "arguments must be an object"),
        };
        let args = match call_args(&self.record, arguments) {
            Ok(a) => a,
            Err(e) => return error(id, INVALID_PARAMS, e),
        };
        self.sink().emit(Actor::Mcphost, EventKind::ToolCall, json!({"tool": name, "arguments": args}));
        let (text, is_error) = match self.invoker.invoke(&self.record, &args, self.sink()) {
            Ok(r) if r.status == ExecStatus::Success => (r.stdout, false),
            Ok(r) => {
                let head = match r.status {
                    ExecStatus::Timeout => "tool timed out".to_string(),
                    _ => format!("tool exited with code {}", r.exit_code.unwrap_or(-1)),
                };
                (format!("{head}\n{}", tail(&r.stderr, STDERR_TAIL_CHARS)), true)
            }
            Err(e) => (e, true),
        };
        self.sink().emit(Actor::Mcphost, EventKind::Observation, json!({"tool": name, "is_error": is_error, "text": text}));
        response(id, json!({"content": [{"type": "text", "text": text}], "isError": is_error}))
    }

    /// Reads requests until EOF, writing one response line per request.
    pub fn serve(&self, input: impl BufRead, mut output: impl Write) -> io::Result<SessionStats> {
        let mut stats = SessionStats::default();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(reply) = self.handle_line(&line) {
                stats.requests += 1;
                if reply.get("result").is_some_and(|r| r.get("content").is_some()) {
                    stats.tool_calls += 1;
                }
                serde_json::to_writer(&mut output, &reply)?;
                output.write_all(b"\n")?;
                output.flush()?;
            }
        }
        Ok(stats)
    }
}
