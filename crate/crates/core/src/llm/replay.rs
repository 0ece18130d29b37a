use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ChatMessage, LlmBackend, LlmError, LlmRequest, LlmResponse, RoleSlot};
use crate::digest::text_digest;

/// One scripted model reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub role_slot: RoleSlot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
    pub response: String,
}

/// Digest of a conversation as matched by replay entries: message contents
/// joined by newlines, lowercased, whitespace-collapsed, first 16 hex of
/// SHA-256.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let joined = messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
    text_digest(&joined)
}

#[derive(Debug)]
pub struct ReplayScript {
    entries: Vec<ReplayEntry>,
    by_slot: HashMap<RoleSlot, Vec<usize>>,
    cursors: Mutex<HashMap<RoleSlot, usize>>,
}

impl ReplayScript {
    pub fn from_entries(entries: Vec<ReplayEntry>) -> Self {
        let mut by_slot: HashMap<RoleSlot, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_slot.entry(e.role_slot).or_default().push(i);
        }
        Self { entries, by_slot, cursors: Mutex::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn cursor(&self, slot: RoleSlot) -> usize {
        self.cursors.lock().unwrap().get(&slot).copied().unwrap_or(0)
    }

    /// Takes the next entry for `slot`, checking the prompt digest when the
    /// entry carries one. A mismatch does not advance the cursor.
    pub fn next(&self, slot: RoleSlot, messages: &[ChatMessage]) -> Result<&ReplayEntry, LlmError> {
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(slot).or_insert(0);
        let index = self
            .by_slot
            .get(&slot)
            .and_then(|ids| ids.get(*cursor))
            .copied()
            .ok_or(LlmError::ScriptExhausted(slot))?;
        let entry = &self.entries[index];
        if let Some(expected) = &entry.prompt_digest {
            let actual = prompt_digest(messages);
            if !expected.eq_ignore_ascii_case(&actual) {
                return Err(LlmError::DigestMismatch {
                    slot,
                    index: *cursor,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        *cursor += 1;
        Ok(entry)
    }
}

/// Parses a replay file: one JSON object per line with `role_slot`,
/// optional `prompt_digest` and `response`. Blank lines are skipped.
pub fn load_replay(path: &Path) -> Result<ReplayScript, LlmError> {
    let text = std::fs::read_to_string(path)?;
    parse_replay(&text).map(ReplayScript::from_entries)
}

fn parse_replay(text: &str) -> Result<Vec<ReplayEntry>, LlmError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ReplayEntry = serde_json::from_str(line)
            .map_err(|e| LlmError::Parse { line: i + 1, message: e.to_string() })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub struct ReplayBackend {
    script: ReplayScript,
    model_id: String,
}

impl ReplayBackend {
    pub fn new(script: ReplayScript) -> Self {
        Self { script, model_id: "replay".into() }
    }

    pub fn script(&self) -> &ReplayScript {
        &self.script
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let entry = self.script.next(request.role_slot, &request.messages)?;
        Ok(LlmResponse {
            content: entry.response.clone(),
            model_id: self.model_id.clone(),
            attempt_count: 1,
            usage: None,
        })
    }
}

/// Wraps a backend and appends every exchange to a replay file, so a live
/// run can be turned into an offline fixture.
pub struct RecordingBackend {
    inner: Arc<dyn LlmBackend>,
    out: Mutex<File>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn LlmBackend>, path: &Path) -> std::io::Result<Self> {
        let out = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner, out: Mutex::new(out) })
    }
}

impl LlmBackend for RecordingBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let resp = self.inner.complete(request)?;
        let entry = ReplayEntry {
            role_slot: request.role_slot,
            prompt_digest: Some(prompt_digest(&request.messages)),
            response: resp.content.clone(),
        };
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        self.out.lock().unwrap().write_all(line.as_bytes())?;
        Ok(resp)
    }
}
