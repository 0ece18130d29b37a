//! Environment providers. A provider knows how to create an environment,
//! install packages into it, run a command inside it and tear it down.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::deps::Dependency;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepOutput {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl StepOutput {
    pub fn ok() -> Self {
        Self::default()
    }

    pub fn success(&self) -> bool {
        self.exit_code == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnvContext<'a> {
    pub env_name: &'a str,
    pub root: &'a Path,
}

impl EnvContext<'_> {
    pub fn scratch(&self) -> PathBuf {
        self.root.join("scratch")
    }
}

pub trait EnvProvider: Send + Sync {
    fn id(&self) -> &str;
    fn create(&self, env: EnvContext<'_>) -> io::Result<StepOutput>;
    fn install(&self, env: EnvContext<'_>, packages: &[Dependency]) -> io::Result<StepOutput>;
    /// Runs one residual setup line inside the environment.
    fn run_setup(&self, env: EnvContext<'_>, line: &str) -> io::Result<StepOutput>;
    /// Builds (without spawning) the command that runs `argv` in the
    /// environment. The caller sets cwd, stdio and process group.
    fn command(&self, env: EnvContext<'_>, argv: &[String]) -> Command;
    fn teardown(&self, env: EnvContext<'_>) -> io::Result<StepOutput>;
}

fn sh(line: &str, cwd: &Path) -> io::Result<StepOutput> {
    let out = Command::new("sh").arg("-c").arg(line).current_dir(cwd).stdin(Stdio::null()).output()?;
    Ok(StepOutput {
        exit_code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    })
}

fn shell_join(argv: &[String]) -> String {
    shlex::try_join(argv.iter().map(String::as_str)).unwrap_or_else(|_| argv.join(" "))
}

/// The four command templates. Placeholders: `{env_name}`, `{root}`,
/// `{packages}`, `{command}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderTemplates {
    pub create: String,
    pub install: String,
    pub run: String,
    pub teardown: String,
}

impl ProviderTemplates {
    pub fn conda() -> Self {
        Self {
            create: "conda create -y -q -n {env_name} python".into(),
            install: "conda run -n {env_name} python -m pip install {packages}".into(),
            run: "conda run --no-capture-output -n {env_name} {command}".into(),
            teardown: "conda env remove -y -q -n {env_name}".into(),
        }
    }

    pub fn venv() -> Self {
        Self {
            create: "python3 -m venv {root}/venv".into(),
            install: "{root}/venv/bin/python -m pip install {packages}".into(),
            run: "PATH={root}/venv/bin:$PATH {command}".into(),
            teardown: "true".into(),
        }
    }
}

/// Shell-template provider; the default templates use conda and pip.
pub struct TemplateProvider {
    id: String,
    templates: ProviderTemplates,
}

impl TemplateProvider {
    pub fn new(id: impl Into<String>, templates: ProviderTemplates) -> Self {
        Self { id: id.into(), templates }
    }

    fn render(&self, template: &str, env: EnvContext<'_>, packages: &str, command: &str) -> String {
        let root = shlex::try_quote(&env.root.to_string_lossy()).map(|c| c.into_owned()).unwrap_or_default();
        crate::prompts::render(
            template,
            &[("env_name", env.env_name), ("root", &root), ("packages", packages), ("command", command)],
        )
    }
}

impl EnvProvider for TemplateProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn create(&self, env: EnvContext<'_>) -> io::Result<StepOutput> {
        sh(&self.render(&self.templates.create, env, "", ""), env.root)
    }

    fn install(&self, env: EnvContext<'_>, packages: &[Dependency]) -> io::Result<StepOutput> {
        let specs: Vec<String> = packages.iter().map(|d| d.to_string()).collect();
        sh(&self.render(&self.templates.install, env, &shell_join(&specs), ""), env.root)
    }

    fn run_setup(&self, env: EnvContext<'_>, line: &str) -> io::Result<StepOutput> {
        sh(&self.render(&self.templates.run, env, "", line), &env.scratch())
    }

    fn command(&self, env: EnvContext<'_>, argv: &[String]) -> Command {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(self.render(&self.templates.run, env, "", &shell_join(argv)));
        cmd
    }

    fn teardown(&self, env: EnvContext<'_>) -> io::Result<StepOutput> {
        sh(&self.render(&self.templates.teardown, env, "", ""), env.root)
    }
}

/// Filesystem-only provider for hermetic runs. `create` lays out
/// `site/` and `bin/`, `install` records the requested packages in
/// `installed.txt` and copies `<shims>/<normalized name>/` into `site/` when
/// such a directory exists, residual setup lines are logged rather than
/// executed, and commands run with `PYTHONPATH=<root>/site` and
/// `<root>/bin` first on `PATH`.
#[derive(Debug, Clone, Default)]
pub struct StubProvider {
    shims: Option<PathBuf>,
}

impl StubProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_shims(dir: impl Into<PathBuf>) -> Self {
        Self { shims: Some(dir.into()) }
    }
}

fn copy_tree(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn append(path: &Path, text: &str) -> io::Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())
}

impl EnvProvider for StubProvider {
    fn id(&self) -> &str {
        "stub"
    }

    fn create(&self, env: EnvContext<'_>) -> io::Result<StepOutput> {
        fs::create_dir_all(env.root.join("site"))?;
        fs::create_dir_all(env.root.join("bin"))?;
        Ok(StepOutput { stdout: format!("created {}\n", env.env_name), ..StepOutput::ok() })
    }

    fn install(&self, env: EnvContext<'_>, packages: &[Dependency]) -> io::Result<StepOutput> {
        let mut stdout = String::new();
        for dep in packages {
            append(&env.root.join("installed.txt"), &format!("{dep}\n"))?;
            let shim = self.shims.as_ref().map(|s| s.join(dep.normalized_name()));
            match shim {
                Some(dir) if dir.is_dir() => {
                    copy_tree(&dir, &env.root.join("site"))?;
                    stdout.push_str(&format!("installed {dep} (shim)\n"));
                }
                _ => stdout.push_str(&format!("recorded {dep}\n")),
            }
        }
        Ok(StepOutput { stdout, ..StepOutput::ok() })
    }

    fn run_setup(&self, env: EnvContext<'_>, line: &str) -> io::Result<StepOutput> {
        append(&env.root.join("setup.log"), &format!("{line}\n"))?;
        Ok(StepOutput { stdout: format!("logged: {line}\n"), ..StepOutput::ok() })
    }

    fn command(&self, env: EnvContext<'_>, argv: &[String]) -> Command {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(r#"exec "$@""#).arg("alita-stub").args(argv);
        let path = std::env::var("PATH").unwrap_or_default();
        cmd.env("PATH", format!("{}:{path}", env.root.join("bin").display()));
        cmd.env("PYTHONPATH", env.root.join("site"));
        cmd.env("PYTHONDONTWRITEBYTECODE", "1");
        cmd
    }

    fn teardown(&self, _env: EnvContext<'_>) -> io::Result<StepOutput> {
        Ok(StepOutput::ok())
    }
}
