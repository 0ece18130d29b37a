//! `alita`: run tasks, manage the MCP registry and clean up environments.
//!
//! Exit codes: 0 success, 1 pipeline or pack failure, 2 usage or
//! configuration error.

use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use alita_core::config::{ConfigError, RunConfig};
use alita_core::digest::short_hex;
use alita_core::mcpbox::{McpBox, McpBoxError};
use alita_core::mcphost::{McpServer, RegistryInvoker};
use alita_core::net::{DenyNetwork, HttpTransport, UreqTransport};
use alita_core::runtime::{self, Runtime, RuntimeError};
use alita_core::transcript::{mask_timestamps, read_transcript};
use alita_core::Task;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alita", version, about = "Self-extending agent runtime with an MCP tool registry")]
struct Cli {
    /// TOML config file; ALITA_* environment variables override it.
    #[arg(long, global = true, env = "ALITA_CONFIG")]
    config: Option<PathBuf>,
    /// Working directory for transcripts, bundles and environments.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Registry directory (default: <workdir>/registry).
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one task and print the answer on stdout.
    Run(RunArgs),
    /// Inspect, serve, export or import registered MCPs.
    #[command(subcommand)]
    Mcp(McpCommand),
    /// Remove environment roots that are old and not referenced by the registry.
    EnvGc {
        /// Minimum age, e.g. `3600`, `90m`, `7d`.
        #[arg(long, default_value = "24h", value_parser = parse_ttl)]
        ttl: Duration,
    },
    /// Read persisted transcripts.
    #[command(subcommand)]
    Transcript(TranscriptCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Task text.
    #[arg(long, conflicts_with = "task_file")]
    task: Option<String>,
    /// JSON `{id, query, attachments}` or a plain-text file holding the query.
    #[arg(long)]
    task_file: Option<PathBuf>,
    /// Replayed model, fixture web and stub environments; no network use.
    #[arg(long)]
    offline: bool,
    /// Replay script (JSONL) for the model.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Offline web fixtures (default: the replay file's directory).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Print the final answer as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum McpCommand {
    /// One line per record: id, name, usage count.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Serve one record over stdio (newline-delimited JSON-RPC).
    Serve {
        /// Record id or tool name.
        record: String,
    },
    /// Write records into a pack archive.
    Export {
        #[arg(long, conflicts_with = "ids")]
        all: bool,
        #[arg(long = "id")]
        ids: Vec<String>,
        dest: PathBuf,
    },
    /// Register every record of a pack archive.
    Import { src: PathBuf },
}

#[derive(Subcommand)]
enum TranscriptCommand {
    /// Print the transcript of a task.
    Show {
        task_id: String,
        /// Emit raw JSONL.
        #[arg(long)]
        json: bool,
        /// Mask wall-clock fields.
        #[arg(long)]
        mask: bool,
    },
}

fn parse_ttl(s: &str) -> Result<Duration, String> {
    if let Ok(secs) = s.parse::<u64>() {
        return Ok(Duration::from_secs(secs));
    }
    humantime::parse_duration(s).map_err(|e| e.to_string())
}

/// Marks errors that map to exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(|e| usage(e.to_string()))?;
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    if let Some(r) = &cli.registry {
        cfg.registry = Some(r.clone());
    }
    Ok(cfg)
}

fn task_id_for(query: &str) -> String {
    format!("task-{}", short_hex(query, 12))
}

fn read_task(args: &RunArgs) -> Result<Task> {
    if let Some(text) = &args.task {
        if text.trim().is_empty() {
            return Err(usage("--task is empty"));
        }
        return Ok(Task::new(task_id_for(text), text.clone()));
    }
    let Some(path) = &args.task_file else {
        return Err(usage("one of --task or --task-file is required"));
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
        if value.is_object() {
            let query = value["query"].as_str().ok_or_else(|| usage("task file has no \"query\""))?.to_string();
            let id = value["id"].as_str().map(str::to_string).unwrap_or_else(|| task_id_for(&query));
            let mut task = Task::new(id, query);
            if let Some(list) = value["attachments"].as_array() {
                task.attachments = list.iter().filter_map(|v| v.as_str()).map(PathBuf::from).collect();
            }
            return Ok(task);
        }
    }
    let query = text.trim().to_string();
    if query.is_empty() {
        return Err(usage(format!("{} holds no task", path.display())));
    }
    Ok(Task::new(task_id_for(&query), query))
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<ExitCode> {
    let task = read_task(args)?;
    let mut cfg = load_config(cli)?;
    cfg.offline |= args.offline;
    if let Some(r) = &args.replay {
        cfg.replay = Some(r.clone());
    }
    if let Some(f) = &args.fixtures {
        cfg.fixtures = Some(f.clone());
    }
    let transport: Arc<dyn HttpTransport> =
        if cfg.offline { Arc::new(DenyNetwork::default()) } else { Arc::new(UreqTransport::default()) };
    let rt = match Runtime::build(&cfg, transport) {
        Ok(rt) => rt,
        Err(e @ (RuntimeError::Config(_) | RuntimeError::Llm(_))) => return Err(usage(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let outcome = rt.manager.run_task(&task);
    eprintln!("transcript: {}", rt.manager.transcript_path(&task.id).display());
    match outcome {
        Ok(answer) => {
            if args.json {
                println!("{}", serde_json::to_string_pretty(&answer)?);
            } else {
                println!("{}", answer.answer_text);
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(1))
        }
    }
}

fn open_registry(cfg: &RunConfig) -> Result<McpBox> {
    runtime::open_registry(cfg).with_context(|| format!("opening registry {}", cfg.registry_path().display()))
}

fn resolve_record(reg: &McpBox, key: &str) -> Result<alita_core::MCPRecord> {
    match reg.get(key) {
        Ok(r) => Ok(r),
        Err(McpBoxError::NotFound(_)) => match reg.find_by_name(key)? {
            Some(r) => Ok(r),
            None => Err(usage(format!("no MCP with id or name {key:?}"))),
        },
        Err(e) => Err(e.into()),
    }
}

fn cmd_mcp(cli: &Cli, command: &McpCommand) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let reg = open_registry(&cfg)?;
    match command {
        McpCommand::List { json } => {
            let records = reg.records()?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&records)?);
            } else {
                for r in &records {
                    println!("{}\t{}\t{}", r.id, r.name, r.usage_count);
                }
                println!("{} MCPs", records.len());
            }
        }
        McpCommand::Serve { record } => {
            let record = resolve_record(&reg, record)?;
            let envs = runtime::env_manager(&cfg).map_err(|e| match e {
                RuntimeError::Config(c) => usage(c.to_string()),
                other => other.into(),
            })?;
            let invoker = RegistryInvoker::new(reg.clone(), envs, Duration::from_secs(cfg.tool_timeout_secs));
            let server = McpServer::new(record, &invoker);
            let stdin = io::stdin().lock();
            let stdout = BufWriter::new(io::stdout().lock());
            let stats = server.serve(stdin, stdout)?;
            log::info!("session closed after {} requests", stats.requests);
        }
        McpCommand::Export { all, ids, dest } => {
            let ids: Vec<String> = if *all {
                reg.records()?.into_iter().map(|r| r.id).collect()
            } else if ids.is_empty() {
                return Err(usage("give --all or at least one --id"));
            } else {
                ids.iter().map(|k| resolve_record(&reg, k).map(|r| r.id)).collect::<Result<_>>()?
            };
            let n = reg.export_pack(&ids, dest)?;
            println!("exported {n} MCPs");
        }
        McpCommand::Import { src } => match reg.import_pack(src) {
            Ok(s) => println!("imported {} MCPs ({} already present)", s.imported, s.deduplicated),
            Err(McpBoxError::PartialImport { imported, invalid }) => {
                println!("imported {imported} MCPs");
                for line in invalid {
                    eprintln!("invalid: {line}");
                }
                return Ok(ExitCode::from(1));
            }
            Err(e) => return Err(e.into()),
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_env_gc(cli: &Cli, ttl: Duration) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let reg = open_registry(&cfg)?;
    let envs = runtime::env_manager(&cfg).map_err(|e| anyhow::anyhow!(e))?;
    let report = envs.gc(ttl, &reg.referenced_envs()?)?;
    println!("{}", report.removed.len());
    if report.failed.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for (name, err) in &report.failed {
        eprintln!("orphaned {name}: {err}");
    }
    Ok(ExitCode::from(1))
}

fn transcript_file(workdir: &Path, task_id: &str) -> PathBuf {
    workdir.join("transcripts").join(format!("{task_id}.jsonl"))
}

fn cmd_transcript(cli: &Cli, command: &TranscriptCommand) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let TranscriptCommand::Show { task_id, json, mask } = command;
    let path = transcript_file(&cfg.workdir, task_id);
    if !path.is_file() {
        bail!("no transcript at {}", path.display());
    }
    if *json {
        let text = std::fs::read_to_string(&path)?;
        print!("{}", if *mask { mask_timestamps(&text) } else { text });
        return Ok(ExitCode::SUCCESS);
    }
    for e in read_transcript(&path)? {
        let actor = serde_json::to_value(e.actor)?;
        let kind = serde_json::to_value(e.kind)?;
        let stamp = if *mask { "<masked>" } else { e.timestamp.as_str() };
        println!(
            "{:>4} {} {:<9} {:<11} {}",
            e.seq,
            stamp,
            actor.as_str().unwrap_or(""),
            kind.as_str().unwrap_or(""),
            e.payload
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(&cli, args),
        Command::Mcp(cmd) => cmd_mcp(&cli, cmd),
        Command::EnvGc { ttl } => cmd_env_gc(&cli, *ttl),
        Command::Transcript(cmd) => cmd_transcript(&cli, cmd),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
