//! End-to-end behaviour of the offline runtime on the case-study fixtures.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use alita_core::brainstorm::Brainstormer;
use alita_core::config::RunConfig;
use alita_core::llm::prompt_digest;
use alita_core::manager::registry_section;
use alita_core::mcphost::{McpServer, RegistryInvoker};
use alita_core::net::DenyNetwork;
use alita_core::transcript::{read_transcript, EventKind};
use alita_core::{Runtime, Task};
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config(workdir: &Path) -> RunConfig {
    RunConfig {
        workdir: workdir.to_path_buf(),
        offline: true,
        replay: Some(fixtures().join("case_a.jsonl")),
        ..RunConfig::default()
    }
}

fn task() -> Task {
    let raw: Value = serde_json::from_str(&fs::read_to_string(fixtures().join("case_a.task")).unwrap()).unwrap();
    Task::new(raw["id"].as_str().unwrap(), raw["query"].as_str().unwrap())
}

#[test]
fn offline_run_touches_no_network() {
    let dir = tempfile::tempdir().unwrap();
    let deny = Arc::new(DenyNetwork::default());
    let rt = Runtime::build(&config(dir.path()), deny.clone()).unwrap();
    let answer = rt.manager.run_task(&task()).unwrap();
    assert_eq!(answer.answer_text, "100000000");
    assert_eq!(deny.attempts(), 0);

    let events = read_transcript(&rt.manager.transcript_path("case-a")).unwrap();
    assert_eq!(events.iter().filter(|e| e.kind == EventKind::Final).count(), 1);
    for seq in &answer.supporting_event_seqs {
        assert!(events.iter().any(|e| e.seq == *seq));
    }
    let text = fs::read_to_string(rt.manager.transcript_path("case-a")).unwrap();
    assert!(!text.contains(dir.path().to_str().unwrap()), "transcript leaks absolute paths");
}

#[test]
fn offline_config_requires_replay_and_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.replay = None;
    assert!(Runtime::build(&cfg, Arc::new(DenyNetwork::default())).is_err());
    let mut cfg = config(dir.path());
    cfg.fixtures = Some(dir.path().join("missing"));
    assert!(Runtime::build(&cfg, Arc::new(DenyNetwork::default())).is_err());
}

#[test]
fn brainstorm_prompt_sees_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let rt = Runtime::build(&config(dir.path()), Arc::new(DenyNetwork::default())).unwrap();
    let t = task();
    let empty = Brainstormer::prompt(&t, "fw", &registry_section(&rt.registry.summarize().unwrap()));
    assert!(empty[0].content.contains("Registered MCPs: none"));
    rt.manager.run_task(&t).unwrap();
    let filled = Brainstormer::prompt(&t, "fw", &registry_section(&rt.registry.summarize().unwrap()));
    assert!(filled[0].content.contains("youtube_subtitle_crawler"));
    assert_ne!(prompt_digest(&empty), prompt_digest(&filled));
}

#[test]
fn concurrent_sessions_do_not_cross() {
    let dir = tempfile::tempdir().unwrap();
    let rt = Runtime::build(&config(dir.path()), Arc::new(DenyNetwork::default())).unwrap();
    rt.manager.run_task(&task()).unwrap();
    let record = rt.registry.find_by_name("youtube_subtitle_crawler").unwrap().unwrap();
    let before = record.usage_count;
    let invoker = Arc::new(RegistryInvoker::new(rt.registry.clone(), rt.envs.clone(), Duration::from_secs(20)));

    let sessions: Vec<_> = ["vr360dinos1", "missingvid1"]
        .into_iter()
        .map(|video| {
            let (record, invoker) = (record.clone(), invoker.clone());
            thread::spawn(move || {
                let mut input = String::new();
                for id in 1..=3 {
                    input.push_str(&format!(
                        "{{\"jsonrpc\":\"2.0\",\"id\":\"{video}-{id}\",\"method\":\"tools/call\",\"params\":{{\"name\":\"youtube_subtitle_crawler\",\"arguments\":{{\"video_url\":\"https://youtu.be/{video}\"}}}}}}\n"
                    ));
                }
                let mut out = Vec::new();
                McpServer::new(record, invoker.as_ref()).serve(Cursor::new(input), &mut out).unwrap();
                (video, String::from_utf8(out).unwrap())
            })
        })
        .collect();
    for handle in sessions {
        let (video, out) = handle.join().unwrap();
        let frames: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(frames.len(), 3);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f["id"], format!("{video}-{}", i + 1));
            let ok = video == "vr360dinos1";
            assert_eq!(f["result"]["isError"], !ok);
            let text = f["result"]["content"][0]["text"].as_str().unwrap();
            assert_eq!(text.contains("100000000"), ok);
        }
    }
    let after = rt.registry.get(&record.id).unwrap().usage_count;
    assert_eq!(after, before + 3, "only successful calls count");
}
