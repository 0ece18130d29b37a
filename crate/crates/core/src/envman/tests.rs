use super::*;
use crate::transcript::{NullSink, Transcript};
use std::io;
use std::process::Command;

fn bundle(env: &str, tool: &str) -> ScriptBundle {
    ScriptBundle {
        tool_script: tool.into(),
        env_setup_script: env.into(),
        cleanup_script: String::new(),
        entry_command: vec!["python3".into(), "tool.py".into()],
        language_hint: "python".into(),
    }
}

fn dep(name: &str, c: &str) -> Dependency {
    Dependency { name: name.into(), constraint: c.into() }
}

type InstallFilter = Box<dyn Fn(&[Dependency]) -> bool + Send + Sync>;

/// Stub provider that fails chosen steps.
struct Scripted {
    inner: StubProvider,
    fail_install: InstallFilter,
    fail_run: bool,
    fail_teardown: bool,
}

impl Scripted {
    fn new() -> Self {
        Self { inner: StubProvider::new(), fail_install: Box::new(|_| false), fail_run: false, fail_teardown: false }
    }
}

impl EnvProvider for Scripted {
    fn id(&self) -> &str {
        "scripted"
    }
    fn create(&self, env: EnvContext<'_>) -> io::Result<StepOutput> {
        self.inner.create(env)
    }
    fn install(&self, env: EnvContext<'_>, packages: &[Dependency]) -> io::Result<StepOutput> {
        if (self.fail_install)(packages) {
            return Ok(StepOutput { exit_code: 1, stdout: String::new(), stderr: "ResolutionImpossible".into() });
        }
        self.inner.install(env, packages)
    }
    fn run_setup(&self, env: EnvContext<'_>, line: &str) -> io::Result<StepOutput> {
        if self.fail_run {
            return Ok(StepOutput { exit_code: 7, stdout: String::new(), stderr: format!("{line}: not found") });
        }
        self.inner.run_setup(env, line)
    }
    fn command(&self, env: EnvContext<'_>, argv: &[String]) -> Command {
        self.inner.command(env, argv)
    }
    fn teardown(&self, env: EnvContext<'_>) -> io::Result<StepOutput> {
        if self.fail_teardown {
            return Ok(StepOutput { exit_code: 1, stdout: String::new(), stderr: "teardown refused".into() });
        }
        self.inner.teardown(env)
    }
}

#[test]
fn metadata_classification() {
    let b = inspect_metadata(&[("README.md", "hello")]);
    assert_eq!(b.readme_text.as_deref(), Some("hello"));
    assert!(!b.is_empty());

    let empty: [(&str, &str); 0] = [];
    assert!(inspect_metadata(&empty).is_empty());

    let b = inspect_metadata(&[("setup.sh", "a"), ("install.sh", "b"), ("main.py", "x"), ("repo/requirements-dev.txt", "r")]);
    assert_eq!(b.shell_script_texts, vec!["a".to_string(), "b".to_string()]);
    assert_eq!(b.requirements_text.as_deref(), Some("r"));
    assert_eq!(b.provenance, vec!["setup.sh", "install.sh", "repo/requirements-dev.txt"]);
}

#[test]
fn env_name_scheme() {
    let a = derive_env_name("t1", "s");
    assert_eq!(a, derive_env_name("t1", "s"));
    assert_ne!(a, derive_env_name("t2", "s"));
    // Frozen from Python's hashlib over b"task-042\ngithub.com/jdepoix/youtube-transcript-api".
    assert_eq!(derive_env_name("task-042", "github.com/jdepoix/youtube-transcript-api"), "alita-ba33c463cf5d");
    assert!(a.starts_with("alita-") && a.len() == 18);
}

#[test]
fn plan_from_case_study_script() {
    let env = "conda create -n youtube_transcript\nconda activate youtube_transcript\npip install youtube-transcript-api\n";
    let p = plan_env(&MetadataBundle::default(), &bundle(env, "from youtube_transcript_api import YouTubeTranscriptApi\n"), "t").unwrap();
    assert_eq!(p.dependencies, vec![dep("youtube-transcript-api", "")]);
    assert_eq!(p.setup_steps, vec![SetupStep::CreateEnv, SetupStep::InstallDeps]);
    assert_eq!(p.recovery_round, 0);
    assert!(p.used_modules.contains("youtube_transcript_api"));
}

#[test]
fn minimal_profile() {
    let p = plan_env(&MetadataBundle::default(), &bundle("echo nothing to install", "print(1)"), "t").unwrap();
    assert!(p.dependencies.is_empty());
    assert_eq!(p.setup_steps, vec![SetupStep::CreateEnv, SetupStep::Run("echo nothing to install".into())]);
    let p = plan_env(&MetadataBundle::default(), &bundle("conda activate x", "print(1)"), "t").unwrap();
    assert_eq!(p.setup_steps, vec![SetupStep::CreateEnv]);
}

#[test]
fn plan_merges_requirements_and_scripts() {
    let meta = MetadataBundle {
        requirements_text: Some("a==1.2.3\n# note\nb>=2\n".into()),
        shell_script_texts: vec!["pip install c a".into()],
        source_key: Some("github.com/x/y".into()),
        ..Default::default()
    };
    let p = plan_env(&meta, &bundle("pip install b d\n", "import a"), "task").unwrap();
    assert_eq!(p.dependencies, vec![dep("a", "==1.2.3"), dep("b", ">=2"), dep("d", ""), dep("c", "")]);
    assert_eq!(p.env_name, derive_env_name("task", "github.com/x/y"));
    assert_eq!(p.provenance[0], "github.com/x/y");

    let bad = MetadataBundle { requirements_text: Some("a===1\n".into()), ..Default::default() };
    assert!(matches!(plan_env(&bad, &bundle("true", ""), "t"), Err(EnvError::Plan(_))));
}

#[test]
fn setup_step_serialization() {
    let steps = vec![SetupStep::CreateEnv, SetupStep::InstallDeps, SetupStep::Run("make".into())];
    let text = serde_json::to_string(&steps).unwrap();
    assert_eq!(text, r#"["@create-env","@install-deps","make"]"#);
    assert_eq!(serde_json::from_str::<Vec<SetupStep>>(&text).unwrap(), steps);
}

fn profile(name: &str, deps: Vec<Dependency>, used: &[&str]) -> EnvProfile {
    let mut p = EnvProfile {
        env_name: name.into(),
        dependencies: deps,
        setup_steps: vec![],
        provenance: vec![],
        recovery_round: 0,
        used_modules: used.iter().map(|s| s.to_string()).collect(),
    };
    p.rebuild_steps();
    p
}

fn perr(name: &str) -> ProvisionError {
    ProvisionError { env_name: name.into(), step: 2, command: "@install-deps".into(), exit_code: Some(1), stderr_tail: String::new() }
}

#[test]
fn recovery_rungs() {
    let p0 = profile("e", vec![dep("pkg", "==1.2.3")], &["pkg"]);
    let p1 = recover(&p0, &perr("e")).unwrap();
    assert_eq!(p1.dependencies, vec![dep("pkg", "~=1.2")]);
    assert_eq!(p1.recovery_round, 1);

    let p1 = EnvProfile { dependencies: vec![dep("used-lib", ""), dep("unused-lib", "")], ..p1 };
    let mut with_script = p1.clone();
    with_script.used_modules = import_tokens("import used_lib\nprint(used_lib.x)\n");
    let p2 = recover(&with_script, &perr("e")).unwrap();
    assert_eq!(p2.dependencies, vec![dep("used-lib", "")]);
    assert_eq!(p2.recovery_round, 2);

    assert!(matches!(recover(&p2, &perr("e")), Err(EnvError::RecoveryExhausted { rounds: 2, .. })));
}

#[test]
fn minimal_deps_can_drop_install_step() {
    let mut p = profile("e", vec![dep("unused", "")], &[]);
    p.recovery_round = 1;
    let next = recover(&p, &perr("e")).unwrap();
    assert!(next.dependencies.is_empty());
    assert_eq!(next.setup_steps, vec![SetupStep::CreateEnv]);
}

#[test]
fn stub_provision_and_destroy() {
    let dir = tempfile::tempdir().unwrap();
    let mgr = EnvManager::new(Arc::new(StubProvider::new()), dir.path());
    let p = profile("alita-aaaaaaaaaaaa", vec![dep("x", "")], &[]);
    let t = Transcript::in_memory();
    let h = mgr.provision(&p, &t).unwrap();
    assert_eq!(h.env_name, p.env_name);
    assert!(h.root_path.exists());
    assert_eq!(fs::read_to_string(h.root_path.join("installed.txt")).unwrap(), "x\n");
    assert_eq!(t.len(), 2, "one event per step");
    assert!(matches!(mgr.provision(&p, &t), Err(EnvError::AlreadyLive(_))));
    assert_eq!(mgr.destroy(&h).unwrap(), Destroyed::Removed);
    assert!(!h.root_path.exists());
    assert_eq!(mgr.destroy(&h).unwrap(), Destroyed::AlreadyGone);
}

#[test]
fn failing_step_two_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut prov = Scripted::new();
    prov.fail_run = true;
    let mgr = EnvManager::new(Arc::new(prov), dir.path());
    let mut p = profile("alita-bbbbbbbbbbbb", vec![], &[]);
    p.setup_steps.push(SetupStep::Run("make assets".into()));
    match mgr.provision(&p, &NullSink::default()) {
        Err(EnvError::Provision(e)) => {
            assert_eq!(e.step, 2);
            assert_eq!(e.exit_code, Some(7));
            assert_eq!(e.stderr_tail, "make assets: not found");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn teardown_failure_marks_orphan() {
    let dir = tempfile::tempdir().unwrap();
    let mut prov = Scripted::new();
    prov.fail_teardown = true;
    let mgr = EnvManager::new(Arc::new(prov), dir.path());
    let h = mgr.provision(&profile("alita-cccccccccccc", vec![], &[]), &NullSink::default()).unwrap();
    assert!(matches!(mgr.destroy(&h), Err(EnvError::Teardown { .. })));
    assert!(h.root_path.join(".orphaned").exists());
}

#[test]
fn ladder_walks_every_rung() {
    let dir = tempfile::tempdir().unwrap();
    let mut prov = Scripted::new();
    prov.fail_install = Box::new(|_| true);
    let mgr = EnvManager::new(Arc::new(prov), dir.path());
    let t = Transcript::in_memory();
    let r = mgr.provision_with_recovery(profile("alita-dddddddddddd", vec![dep("a", "==1.0.0")], &["a"]), &t);
    assert_eq!(r.strategies, RecoveryKind::LADDER.to_vec());
    assert!(matches!(r.outcome, Err(EnvError::RecoveryExhausted { .. })));
    assert!(!mgr.root_for("alita-dddddddddddd").exists());
}

#[test]
fn ladder_stops_when_relaxed_pins_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let mut prov = Scripted::new();
    prov.fail_install = Box::new(|deps| deps.iter().any(|d| d.constraint.starts_with("==")));
    let mgr = EnvManager::new(Arc::new(prov), dir.path());
    let r = mgr.provision_with_recovery(profile("alita-eeeeeeeeeeee", vec![dep("a", "==1.0.0")], &[]), &NullSink::default());
    assert_eq!(r.strategies, vec![RecoveryKind::RelaxVersions]);
    assert_eq!(r.profile.dependencies, vec![dep("a", "~=1.0")]);
    assert!(r.outcome.is_ok());
}

#[test]
fn ensure_adopts_ready_root() {
    let dir = tempfile::tempdir().unwrap();
    let p = profile("alita-ffffffffffff", vec![dep("x", "")], &[]);
    {
        let mgr = EnvManager::new(Arc::new(StubProvider::new()), dir.path());
        mgr.provision(&p, &NullSink::default()).unwrap();
    }
    let mgr = EnvManager::new(Arc::new(StubProvider::new()), dir.path());
    let t = Transcript::in_memory();
    let h = mgr.ensure(&p, &t).unwrap();
    assert!(t.is_empty(), "adopted without re-running steps");
    assert_eq!(mgr.ensure(&p, &t).unwrap().root_path, h.root_path);
}

fn backdate(path: &Path, age: Duration) {
    let f = File::open(path).unwrap();
    f.set_modified(SystemTime::now() - age).unwrap();
}

#[test]
fn gc_respects_ttl_and_references() {
    let dir = tempfile::tempdir().unwrap();
    let mgr = EnvManager::new(Arc::new(StubProvider::new()), dir.path());
    assert_eq!(mgr.gc(Duration::from_secs(60), &HashSet::new()).unwrap(), GcReport::default());

    for name in ["alita-old000000000", "alita-new000000000", "alita-ref000000000"] {
        fs::create_dir_all(mgr.root_for(name).join("scratch")).unwrap();
    }
    backdate(&mgr.root_for("alita-old000000000"), Duration::from_secs(7200));
    backdate(&mgr.root_for("alita-ref000000000"), Duration::from_secs(7200));
    let referenced: HashSet<String> = ["alita-ref000000000".to_string()].into();
    let report = mgr.gc(Duration::from_secs(3600), &referenced).unwrap();
    assert_eq!(report.removed, vec!["alita-old000000000".to_string()]);
    assert!(mgr.root_for("alita-new000000000").exists());
    assert!(mgr.root_for("alita-ref000000000").exists());
}

#[test]
fn stub_shims_are_installed() {
    let dir = tempfile::tempdir().unwrap();
    let shims = dir.path().join("shims");
    fs::create_dir_all(shims.join("fake_pkg").join("fake_pkg")).unwrap();
    fs::write(shims.join("fake_pkg").join("fake_pkg").join("__init__.py"), "X = 1\n").unwrap();
    let mgr = EnvManager::new(Arc::new(StubProvider::with_shims(&shims)), &dir.path().join("work"));
    let h = mgr.provision(&profile("alita-111111111111", vec![dep("fake-pkg", "")], &[]), &NullSink::default()).unwrap();
    assert!(h.root_path.join("site/fake_pkg/__init__.py").exists());
}
