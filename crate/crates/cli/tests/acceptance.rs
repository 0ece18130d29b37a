//! Acceptance gate. Runs every primary criterion and prints one PASS/FAIL
//! line each; exits non-zero when any fails.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use alita_core::brainstorm::{ToolSpec, ValidationSpec};
use alita_core::config::RunConfig;
use alita_core::envman::{
    plan_env, Dependency, EnvContext, EnvError, EnvManager, EnvProvider, MetadataBundle, RecoveryKind, StepOutput,
    StubProvider,
};
use alita_core::llm::{load_replay, LlmGateway, ReplayBackend};
use alita_core::mcpbox::{McpBox, Provenance, MCPRecord};
use alita_core::mcphost::{McpServer, RegistryInvoker, METHOD_NOT_FOUND};
use alita_core::net::DenyNetwork;
use alita_core::runner::{RunError, Synthesizer};
use alita_core::runtime::Runtime;
use alita_core::scriptgen::{ScriptBundle, ScriptGenerator};
use alita_core::transcript::{mask_timestamps, read_transcript, EventKind, NullSink};
use alita_core::Task;
use chrono::{TimeZone, Utc};
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn fixtures() -> PathBuf {
    repo().join("fixtures")
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct CliRun {
    code: i32,
    stdout: String,
    stderr: String,
    elapsed: Duration,
}

fn cli_golden(workdir: &Path) -> CliRun {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_alita"))
        .current_dir(repo())
        .env_remove("ALITA_CONFIG")
        .args(["--workdir"])
        .arg(workdir)
        .args(["run", "--offline", "--replay", "fixtures/case_a.jsonl", "--task-file", "fixtures/case_a.task"])
        .output()
        .expect("alita binary runs");
    CliRun {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        elapsed: started.elapsed(),
    }
}

fn transcript(workdir: &Path) -> Result<Vec<alita_core::TranscriptEvent>, String> {
    read_transcript(&workdir.join("transcripts/case-a.jsonl")).map_err(|e| e.to_string())
}

fn golden_replay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = cli_golden(dir.path());
    ensure!(run.code == 0, "exit {} stderr {}", run.code, run.stderr);
    ensure!(run.stdout.trim() == "100000000", "answer {:?}", run.stdout.trim());
    ensure!(run.elapsed < Duration::from_secs(10), "took {:?}", run.elapsed);
    let reg = McpBox::open(dir.path().join("registry")).map_err(|e| e.to_string())?;
    let records = reg.records().map_err(|e| e.to_string())?;
    ensure!(records.len() == 1, "{} records registered", records.len());
    ensure!(records[0].name == "youtube_subtitle_crawler", "registered {:?}", records[0].name);
    let events = transcript(dir.path())?;
    let first = events.iter().find(|e| e.kind == EventKind::ToolCall).and_then(|e| e.tool_name().map(str::to_string));
    ensure!(first.as_deref() == Some("mcp_brainstorming"), "first tool_call {first:?}");
    Ok(format!("answer 100000000, 1 MCP, brainstorm first, {:.2}s", run.elapsed.as_secs_f64()))
}

fn count_tool(events: &[alita_core::TranscriptEvent], tool: &str) -> usize {
    events.iter().filter(|e| e.kind == EventKind::ToolCall && e.tool_name() == Some(tool)).count()
}

fn reuse() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let first = cli_golden(dir.path());
    ensure!(first.code == 0, "first run exit {}", first.code);
    let first_events = transcript(dir.path())?;
    ensure!(count_tool(&first_events, "script_generating") >= 1, "first run did not synthesize");
    let reg = McpBox::open(dir.path().join("registry")).map_err(|e| e.to_string())?;
    let before = reg.records().map_err(|e| e.to_string())?[0].usage_count;

    let second = cli_golden(dir.path());
    ensure!(second.code == 0 && second.stdout.trim() == "100000000", "second run {:?}", second.stdout);
    let events = transcript(dir.path())?;
    let scriptgen = count_tool(&events, "script_generating");
    ensure!(scriptgen == 0, "{scriptgen} scriptgen calls on reuse");
    let hit = events.iter().any(|e| {
        e.payload["tool"] == "mcp_box_lookup" && e.payload["matches"].as_array().is_some_and(|m| !m.is_empty())
    });
    ensure!(hit, "no lookup hit in second transcript");
    let records = reg.records().map_err(|e| e.to_string())?;
    ensure!(records.len() == 1, "registry grew to {}", records.len());
    ensure!(records[0].usage_count == before + 1, "usage {} -> {}", before, records[0].usage_count);
    Ok(format!("0 scriptgen calls, usage_count {} -> {}", before, records[0].usage_count))
}

/// Fails `install` while `reject` holds for the requested package set.
struct Picky {
    reject: fn(&[Dependency]) -> bool,
    installs: Mutex<Vec<Vec<String>>>,
}

impl EnvProvider for Picky {
    fn id(&self) -> &str {
        "picky"
    }
    fn create(&self, _: EnvContext<'_>) -> io::Result<StepOutput> {
        Ok(StepOutput::ok())
    }
    fn install(&self, _: EnvContext<'_>, packages: &[Dependency]) -> io::Result<StepOutput> {
        self.installs.lock().unwrap().push(packages.iter().map(|d| d.to_string()).collect());
        if (self.reject)(packages) {
            Ok(StepOutput { exit_code: 1, stdout: String::new(), stderr: "ResolutionImpossible".into() })
        } else {
            Ok(StepOutput::ok())
        }
    }
    fn run_setup(&self, _: EnvContext<'_>, _: &str) -> io::Result<StepOutput> {
        Ok(StepOutput::ok())
    }
    fn command(&self, _: EnvContext<'_>, argv: &[String]) -> Command {
        let mut c = Command::new(&argv[0]);
        c.args(&argv[1..]);
        c
    }
    fn teardown(&self, _: EnvContext<'_>) -> io::Result<StepOutput> {
        Ok(StepOutput::ok())
    }
}

fn ladder_case(reject: fn(&[Dependency]) -> bool) -> (Vec<RecoveryKind>, Result<(), String>, Vec<Vec<String>>) {
    let dir = tempfile::tempdir().unwrap();
    let provider = Arc::new(Picky { reject, installs: Mutex::new(vec![]) });
    let envs = EnvManager::new(provider.clone(), dir.path());
    let bundle = ScriptBundle {
        tool_script: "import requests\nimport numpy as np\nprint(np.pi)\n".into(),
        env_setup_script: "pip install requests==2.31.0 numpy~=1.26 pandas>=2.0 flask==2 six<=1.16\n".into(),
        cleanup_script: String::new(),
        entry_command: vec!["python3".into(), "tool.py".into()],
        language_hint: "python".into(),
    };
    let profile = plan_env(&MetadataBundle::default(), &bundle, "ladder").unwrap();
    let result = envs.provision_with_recovery(profile, &NullSink::default());
    let outcome = match result.outcome {
        Ok(_) => Ok(()),
        Err(EnvError::RecoveryExhausted { .. }) => Err("exhausted".to_string()),
        Err(e) => Err(e.to_string()),
    };
    let installs = provider.installs.lock().unwrap().clone();
    (result.strategies, outcome, installs)
}

fn recovery_ladder() -> Outcome {
    let original = ["requests==2.31.0", "numpy~=1.26", "pandas>=2.0", "flask==2", "six<=1.16"];
    let relaxed = ["requests~=2.31", "numpy", "pandas>=2.0", "flask", "six<=1.16"];
    let minimal = ["requests~=2.31", "numpy"];

    let (s, o, i) = ladder_case(|d| d.iter().any(|d| d.constraint.starts_with("==")));
    ensure!(s == [RecoveryKind::RelaxVersions] && o.is_ok(), "relax case: {s:?} {o:?}");
    ensure!(i == [original.to_vec(), relaxed.to_vec()], "relax rewrites {i:?}");

    let (s, o, i) = ladder_case(|d| d.len() > 2);
    ensure!(s == [RecoveryKind::RelaxVersions, RecoveryKind::MinimalDeps] && o.is_ok(), "minimal case: {s:?} {o:?}");
    ensure!(i == [original.to_vec(), relaxed.to_vec(), minimal.to_vec()], "minimal rewrites {i:?}");

    let (s, o, i) = ladder_case(|_| true);
    ensure!(s == RecoveryKind::LADDER && o.as_ref().err().map(String::as_str) == Some("exhausted"), "exhaust case: {s:?} {o:?}");
    ensure!(i.len() == 3, "{} install attempts before discard", i.len());
    let kinds: BTreeSet<String> = s.iter().map(|k| format!("{k:?}")).collect();
    ensure!(kinds.len() == 3, "kinds covered {kinds:?}");
    Ok("relax -> minimal -> exhausted, rewrites exact, 3/3 kinds".into())
}

fn synthesize(fixture: &str) -> Result<usize, String> {
    let dir = tempfile::tempdir().unwrap();
    let script = load_replay(&fixtures().join("synthesis").join(fixture)).map_err(|e| e.to_string())?;
    let gateway = LlmGateway::new(Arc::new(ReplayBackend::new(script)));
    let envs = Arc::new(EnvManager::new(Arc::new(StubProvider::new()), dir.path()));
    let synth = Synthesizer::new(ScriptGenerator::new(gateway), envs, dir.path(), Duration::from_secs(20));
    let spec = ToolSpec {
        name: "answer_printer".into(),
        purpose: "print the answer".into(),
        input_schema: vec![],
        output_description: "the answer".into(),
        suggested_sources: vec![],
        validation_hint: ValidationSpec::stdout_matches("42").unwrap(),
    };
    match synth.synthesize_tool(&spec, &[], "budget", &NullSink::default()) {
        Ok(o) => Ok(o.reports.len()),
        Err(RunError::ToolSynthesisFailed { reports, .. }) => Ok(reports.len()),
        Err(e) => Err(e.to_string()),
    }
}

fn synthesis_budget() -> Outcome {
    let counts = ["pass_first.jsonl", "pass_second.jsonl", "fail_all.jsonl"]
        .iter()
        .map(|f| synthesize(f))
        .collect::<Result<Vec<_>, _>>()?;
    ensure!(counts == [0, 1, 3], "attempt report counts {counts:?}");
    Ok("attempt reports {0, 1, 3}".into())
}

fn offline_config(workdir: &Path) -> RunConfig {
    RunConfig {
        workdir: workdir.to_path_buf(),
        offline: true,
        replay: Some(fixtures().join("case_a.jsonl")),
        fixtures: Some(fixtures()),
        ..RunConfig::default()
    }
}

fn task() -> Task {
    let raw: Value = serde_json::from_str(&fs::read_to_string(fixtures().join("case_a.task")).unwrap()).unwrap();
    Task::new(raw["id"].as_str().unwrap(), raw["query"].as_str().unwrap())
}

fn normalize_ids(jsonl: &str) -> String {
    jsonl
        .lines()
        .enumerate()
        .map(|(i, line)| match serde_json::from_str::<Value>(line) {
            Ok(mut v) if v.get("id").is_some_and(|id| !id.is_null()) => {
                v["id"] = Value::from(i);
                serde_json::to_string(&v).unwrap()
            }
            _ => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn mcp_conformance() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = offline_config(dir.path());
    let rt = Runtime::build(&cfg, Arc::new(DenyNetwork::default())).map_err(|e| e.to_string())?;
    rt.manager.run_task(&task()).map_err(|e| e.to_string())?;
    let record = rt.registry.find_by_name("youtube_subtitle_crawler").map_err(|e| e.to_string())?.ok_or("not registered")?;
    let invoker = RegistryInvoker::new(rt.registry.clone(), rt.envs.clone(), Duration::from_secs(20));
    let server = McpServer::new(record, &invoker);

    let input = fs::read_to_string(fixtures().join("mcp-golden/session.in.jsonl")).unwrap();
    let expected = fs::read_to_string(fixtures().join("mcp-golden/session.out.jsonl")).unwrap();
    let mut out = Vec::new();
    server.serve(Cursor::new(input), &mut out).map_err(|e| e.to_string())?;
    let actual = String::from_utf8(out).unwrap();
    ensure!(normalize_ids(&actual) == normalize_ids(&expected), "golden mismatch:\n{actual}");
    for line in actual.lines() {
        let v: Value = serde_json::from_str(line).map_err(|e| format!("bad frame {line}: {e}"))?;
        ensure!(v["jsonrpc"] == "2.0" && (v.get("result").is_some() != v.get("error").is_some()), "bad frame {line}");
    }
    let unknown = server.handle_line(r#"{"jsonrpc":"2.0","id":99,"method":"prompts/list"}"#).ok_or("no reply")?;
    ensure!(unknown["error"]["code"] == METHOD_NOT_FOUND, "unknown method gave {unknown}");
    Ok(format!("{} frames byte-identical, unknown method -> -32601", actual.lines().count()))
}

fn registry_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let reg = McpBox::open(dir.path().join("src-reg")).map_err(|e| e.to_string())?;
    for (i, name) in ["pdf_table_reader", "audio_transcriber", "chess_position_solver"].iter().enumerate() {
        let bundle_dir = dir.path().join("bundles").join(name);
        let bundle = ScriptBundle {
            tool_script: format!("echo {name} \"$1\"\n"),
            env_setup_script: format!("pip install {}==1.{i}.0\n", name.replace('_', "-")),
            cleanup_script: "true\n".into(),
            entry_command: vec!["sh".into(), "tool.sh".into()],
            language_hint: "shell".into(),
        };
        bundle.write_to_dir(&bundle_dir).unwrap();
        let spec = ToolSpec {
            name: name.to_string(),
            purpose: format!("{} from an input file", name.replace('_', " ")),
            input_schema: vec![alita_core::brainstorm::ToolParam { name: "path".into(), kind: "string".into(), default: None }],
            output_description: "text".into(),
            suggested_sources: vec![],
            validation_hint: ValidationSpec::nonempty_stdout(),
        };
        let profile = plan_env(&MetadataBundle::default(), &bundle, "round-trip").unwrap();
        let prov = Provenance {
            task_id: format!("task-{i}"),
            model_ids: [("scriptgen".to_string(), "model-x".to_string())].into(),
            created_at: Utc.with_ymd_and_hms(2025, 1, 1, 0, i as u32, 0).unwrap(),
        };
        let id = reg.register(&MCPRecord::candidate(&spec, &bundle_dir, profile, prov)).map_err(|e| e.to_string())?;
        for _ in 0..i {
            reg.record_usage(&id).map_err(|e| e.to_string())?;
        }
    }
    let ids: Vec<String> = reg.records().unwrap().into_iter().map(|r| r.id).collect();
    let pack = dir.path().join("pack.tgz");
    let exported = reg.export_pack(&ids, &pack).map_err(|e| e.to_string())?;
    let fresh = McpBox::open(dir.path().join("dst-reg")).map_err(|e| e.to_string())?;
    let first = fresh.import_pack(&pack).map_err(|e| e.to_string())?;
    ensure!(exported == 3 && first.imported == 3, "exported {exported}, imported {}", first.imported);
    let strip = |mut r: MCPRecord| {
        r.id.clear();
        r
    };
    let a: Vec<MCPRecord> = reg.records().unwrap().into_iter().map(strip).collect();
    let b: Vec<MCPRecord> = fresh.records().unwrap().into_iter().map(strip).collect();
    ensure!(a == b, "records differ after round trip");
    for r in fresh.records().unwrap() {
        let src = reg.records().unwrap().into_iter().find(|x| x.schema_hash == r.schema_hash).unwrap();
        ensure!(fresh.load_bundle(&r).unwrap() == reg.load_bundle(&src).unwrap(), "bundle of {} differs", r.name);
    }
    let again = fresh.import_pack(&pack).map_err(|e| e.to_string())?;
    ensure!(again.imported == 0 && fresh.len().unwrap() == 3, "re-import added {}", again.imported);
    Ok("3 records preserved, re-import adds 0".into())
}

fn concurrency() -> Outcome {
    const REPS: usize = 50;
    for rep in 0..REPS {
        let dir = tempfile::tempdir().unwrap();
        let envs = Arc::new(EnvManager::new(Arc::new(StubProvider::new()), dir.path()));
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let envs = envs.clone();
                thread::spawn(move || -> Result<(String, PathBuf), String> {
                    let bundle = ScriptBundle {
                        tool_script: "true".into(),
                        env_setup_script: format!("pip install pkg-{i}==1.0\n"),
                        cleanup_script: String::new(),
                        entry_command: vec!["sh".into(), "tool.sh".into()],
                        language_hint: "shell".into(),
                    };
                    let profile = plan_env(&MetadataBundle::default(), &bundle, &format!("task-{rep}-{i}")).unwrap();
                    let h = envs.provision(&profile, &NullSink::default()).map_err(|e| e.to_string())?;
                    fs::write(h.scratch().join(format!("owner-{i}")), i.to_string()).map_err(|e| e.to_string())?;
                    Ok((h.env_name.clone(), h.root_path.clone()))
                })
            })
            .collect();
        let results: Vec<(String, PathBuf)> =
            handles.into_iter().map(|h| h.join().unwrap()).collect::<Result<_, _>>().map_err(|e| format!("rep {rep}: {e}"))?;
        let names: BTreeSet<_> = results.iter().map(|r| r.0.clone()).collect();
        let roots: BTreeSet<_> = results.iter().map(|r| r.1.clone()).collect();
        ensure!(names.len() == 4 && roots.len() == 4, "rep {rep}: names/roots collide");
        for (i, (_, root)) in results.iter().enumerate() {
            let scratch: Vec<String> = fs::read_dir(root.join("scratch"))
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            ensure!(scratch == [format!("owner-{i}")], "rep {rep}: scratch of env {i} holds {scratch:?}");
            let installed = fs::read_to_string(root.join("installed.txt")).unwrap();
            ensure!(installed == format!("pkg-{i}==1.0\n"), "rep {rep}: env {i} installed {installed:?}");
        }
    }
    Ok(format!("4 parallel provisions x {REPS}, no collisions or crosstalk"))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let run = cli_golden(dir.path());
        ensure!(run.code == 0, "exit {}", run.code);
    }
    let read = |d: &Path| fs::read_to_string(d.join("transcripts/case-a.jsonl")).unwrap();
    let (ta, tb) = (mask_timestamps(&read(a.path())), mask_timestamps(&read(b.path())));
    ensure!(ta == tb, "masked transcripts differ");
    Ok(format!("{} masked bytes identical", ta.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("golden replay", golden_replay),
        ("reuse", reuse),
        ("recovery ladder", recovery_ladder),
        ("synthesis budget", synthesis_budget),
        ("mcp conformance", mcp_conformance),
        ("registry round-trip", registry_round_trip),
        ("concurrency", concurrency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
