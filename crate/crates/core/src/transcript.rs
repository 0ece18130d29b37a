//! Append-only run transcript. Every event gets the next sequence number;
//! numbers start at 1 and never skip.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Manager,
    Webagent,
    Brainstorm,
    Scriptgen,
    Envman,
    Runner,
    Mcpbox,
    Mcphost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Thought,
    ToolCall,
    Observation,
    Final,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub seq: u64,
    pub timestamp: String,
    pub actor: Actor,
    pub kind: EventKind,
    pub payload: Value,
}

impl TranscriptEvent {
    /// Tool name for `tool_call` events.
    pub fn tool_name(&self) -> Option<&str> {
        if self.kind != EventKind::ToolCall {
            return None;
        }
        self.payload.get("tool").and_then(Value::as_str)
    }
}

/// Destination for pipeline events. Components log through this so they can
/// be driven with or without a persisted transcript.
pub trait EventSink: Send + Sync {
    fn emit(&self, actor: Actor, kind: EventKind, payload: Value) -> u64;
}

/// Discards events but still hands out sequence numbers.
#[derive(Debug, Default)]
pub struct NullSink {
    seq: std::sync::atomic::AtomicU64,
}

impl EventSink for NullSink {
    fn emit(&self, _: Actor, _: EventKind, _: Value) -> u64 {
        self.seq.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1
    }
}

struct State {
    events: Vec<TranscriptEvent>,
    file: Option<File>,
    io_error: Option<io::Error>,
}

pub struct Transcript {
    path: Option<PathBuf>,
    state: Mutex<State>,
}

fn now() -> String {
    let ts: DateTime<Utc> = Utc::now();
    ts.to_rfc3339_opts(SecondsFormat::Micros, true)
}

impl Transcript {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            state: Mutex::new(State { events: Vec::new(), file: None, io_error: None }),
        }
    }

    /// Opens `<workdir>/transcripts/<task_id>.jsonl`, truncating an earlier
    /// transcript of the same task.
    pub fn create(workdir: &Path, task_id: &str) -> io::Result<Self> {
        let dir = workdir.join("transcripts");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{task_id}.jsonl"));
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            state: Mutex::new(State { events: Vec::new(), file: Some(file), io_error: None }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn events(&self) -> Vec<TranscriptEvent> {
        self.state.lock().unwrap().events.clone()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flushes the backing file and reports the first write error seen.
    pub fn flush(&self) -> io::Result<()> {
        let mut state = self.state.lock().unwrap();
        if let Some(err) = state.io_error.take() {
            return Err(err);
        }
        match state.file.as_mut() {
            Some(f) => f.sync_data(),
            None => Ok(()),
        }
    }
}

impl EventSink for Transcript {
    fn emit(&self, actor: Actor, kind: EventKind, payload: Value) -> u64 {
        let mut state = self.state.lock().unwrap();
        let seq = state.events.len() as u64 + 1;
        let event = TranscriptEvent { seq, timestamp: now(), actor, kind, payload };
        if let Some(file) = state.file.as_mut() {
            let mut line = serde_json::to_string(&event).expect("event serializes");
            line.push('\n');
            if let Err(err) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
                log::error!("transcript write failed: {err}");
                if state.io_error.is_none() {
                    state.io_error = Some(err);
                }
            }
        }
        state.events.push(event);
        seq
    }
}

pub fn read_transcript(path: &Path) -> io::Result<Vec<TranscriptEvent>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
        .collect()
}

const MASK: &str = "<masked>";

fn mask_value(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for (key, v) in map.iter_mut() {
                if key == "timestamp" || key == "duration_ms" || key == "fetched_at" {
                    *v = Value::String(MASK.into());
                } else {
                    mask_value(v);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(mask_value),
        _ => {}
    }
}

/// Replaces wall-clock fields (`timestamp`, `duration_ms`, `fetched_at`) in
/// every line of a JSONL transcript. Lines that are not JSON pass through.
pub fn mask_timestamps(jsonl: &str) -> String {
    let mut out = String::with_capacity(jsonl.len());
    for line in jsonl.lines() {
        match serde_json::from_str::<Value>(line) {
            Ok(mut v) => {
                mask_value(&mut v);
                out.push_str(&serde_json::to_string(&v).expect("value serializes"));
            }
            Err(_) => out.push_str(line),
        }
        out.push('\n');
    }
    out
}
