//! Agent runtime that assesses its own capability gaps, writes the missing
//! tools, provisions environments for them and keeps the ones that work in a
//! reusable MCP registry.

pub mod brainstorm;
pub mod config;
pub mod digest;
pub mod envman;
pub mod llm;
pub mod manager;
pub mod mcpbox;
pub mod mcphost;
pub mod net;
pub mod prompts;
pub mod runner;
pub mod runtime;
pub mod scriptgen;
pub mod transcript;
pub mod webagent;

pub use config::RunConfig;
pub use manager::{FinalAnswer, Manager, ManagerError, Task};
pub use mcpbox::{MCPRecord, McpBox};
pub use runtime::Runtime;
pub use transcript::{Transcript, TranscriptEvent};
