//! Dependency model and the extraction rules used when planning an
//! environment.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// A package requirement. `constraint` is one of `==X.Y.Z`, `~=X.Y`, `>=X`,
/// `<=X` or empty (unpinned).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dependency {
    pub name: String,
    #[serde(default)]
    pub constraint: String,
}

impl fmt::Display for Dependency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.name, self.constraint)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Constraint {
    Any,
    Exact(Vec<String>),
    Compatible(Vec<String>),
    AtLeast(String),
    AtMost(String),
}

static NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z0-9][A-Za-z0-9._-]*(\[[A-Za-z0-9_,.-]+\])?$").unwrap());
static VERSION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[0-9]+(\.[0-9A-Za-z]+)*$").unwrap());

fn parse_constraint(text: &str) -> Result<Constraint, String> {
    if text.is_empty() {
        return Ok(Constraint::Any);
    }
    let (op, version) = text.split_at(text.len().min(2));
    if !VERSION.is_match(version) {
        return Err(format!("bad version in constraint {text:?}"));
    }
    let parts = || version.split('.').map(String::from).collect::<Vec<_>>();
    match op {
        "==" => Ok(Constraint::Exact(parts())),
        "~=" if version.contains('.') => Ok(Constraint::Compatible(parts())),
        ">=" => Ok(Constraint::AtLeast(version.to_string())),
        "<=" => Ok(Constraint::AtMost(version.to_string())),
        _ => Err(format!("unsupported constraint {text:?}")),
    }
}

fn render_constraint(c: &Constraint) -> String {
    match c {
        Constraint::Any => String::new(),
        Constraint::Exact(v) => format!("=={}", v.join(".")),
        Constraint::Compatible(v) => format!("~={}", v.join(".")),
        Constraint::AtLeast(v) => format!(">={v}"),
        Constraint::AtMost(v) => format!("<={v}"),
    }
}

impl Dependency {
    /// Parses `name[constraint]`, e.g. `pkg==1.2.3` or `youtube-transcript-api`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let spec = spec.trim();
        let split = spec.find(['=', '~', '<', '>', '!', ' ', ';', '@']).unwrap_or(spec.len());
        let (name, constraint) = spec.split_at(split);
        if !NAME.is_match(name) {
            return Err(format!("bad package name in {spec:?}"));
        }
        let constraint = constraint.trim();
        parse_constraint(constraint)?;
        Ok(Self { name: name.to_string(), constraint: constraint.to_string() })
    }

    /// Lowercased, `-` and `.` mapped to `_`; the form used for import matching.
    pub fn normalized_name(&self) -> String {
        normalize_name(self.name.split('[').next().unwrap_or(&self.name))
    }

    /// `==X.Y.Z → ~=X.Y`, `~=X.Y → unpinned`; other constraints unchanged.
    pub fn relaxed(&self) -> Self {
        let c = parse_constraint(&self.constraint).unwrap_or(Constraint::Any);
        let relaxed = match c {
            Constraint::Exact(v) if v.len() >= 2 => Constraint::Compatible(v[..2].to_vec()),
            Constraint::Exact(_) | Constraint::Compatible(_) => Constraint::Any,
            other => other,
        };
        Self { name: self.name.clone(), constraint: render_constraint(&relaxed) }
    }
}

pub fn normalize_name(name: &str) -> String {
    name.to_ascii_lowercase().replace(['-', '.'], "_")
}

/// Requirement lines: comments, blanks and option lines (`-r`, `--index-url`)
/// are skipped; inline `#` comments are stripped.
pub fn parse_requirements(text: &str) -> Result<Vec<Dependency>, String> {
    let mut deps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split(" #").next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('-') {
            log::info!("requirements line {} ignored: {line}", i + 1);
            continue;
        }
        deps.push(Dependency::parse(line).map_err(|e| format!("requirements line {}: {e}", i + 1))?);
    }
    Ok(deps)
}

/// What a script line means to the planner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptLine {
    /// `<installer> install <names...>`.
    Install(Vec<Dependency>),
    /// Environment creation/activation; the provider handles these.
    Lifecycle,
    /// Anything else, kept verbatim as a setup step.
    Other(String),
}

const VALUE_FLAGS: &[&str] = &[
    "-c", "--channel", "-i", "--index-url", "--extra-index-url", "-r", "--requirement", "-n", "--name",
    "-p", "--prefix", "-f", "--find-links", "-t", "--target", "-e", "--editable", "-c", "--constraint",
];

fn installer_args(tokens: &[String]) -> Option<&[String]> {
    let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let skip = match t.as_slice() {
        ["sudo", rest @ ..] if !rest.is_empty() => 1,
        _ => 0,
    };
    let t = &t[skip..];
    let consumed = match t {
        ["pip" | "pip3" | "conda" | "mamba" | "micromamba", "install", ..] => 2,
        ["uv", "pip", "install", ..] => 3,
        ["python" | "python3", "-m", "pip", "install", ..] => 4,
        _ => return None,
    };
    Some(&tokens[skip + consumed..])
}

fn is_lifecycle(tokens: &[String]) -> bool {
    let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
    match t.as_slice() {
        ["conda" | "mamba" | "micromamba", "create" | "activate" | "deactivate", ..] => true,
        ["conda" | "mamba", "env", "create", ..] => true,
        ["source" | ".", target, ..] => *target == "activate" || *target == "deactivate" || target.ends_with("/activate"),
        ["python" | "python3", "-m", "venv", ..] => true,
        ["virtualenv", ..] => true,
        _ => false,
    }
}

/// Classifies every command in a script. Lines are split on `&&` and `;`.
pub fn classify_script(script: &str) -> Result<Vec<ScriptLine>, String> {
    let mut out = Vec::new();
    for raw in script.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        for command in line.split("&&").flat_map(|c| c.split(';')) {
            let command = command.trim();
            if command.is_empty() {
                continue;
            }
            let tokens = shlex::split(command)
                .unwrap_or_else(|| command.split_whitespace().map(String::from).collect());
            if is_lifecycle(&tokens) {
                out.push(ScriptLine::Lifecycle);
                continue;
            }
            let Some(args) = installer_args(&tokens) else {
                out.push(ScriptLine::Other(command.to_string()));
                continue;
            };
            let mut deps = Vec::new();
            let mut args = args.iter();
            while let Some(arg) = args.next() {
                if arg.starts_with('-') {
                    if VALUE_FLAGS.contains(&arg.as_str()) {
                        args.next();
                    }
                    continue;
                }
                deps.push(Dependency::parse(arg).map_err(|e| format!("{command:?}: {e}"))?);
            }
            out.push(ScriptLine::Install(deps));
        }
    }
    Ok(out)
}

static PY_IMPORT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^\s*import\s+([A-Za-z_][\w.]*(?:\s*,\s*[A-Za-z_][\w.]*)*)").unwrap());
static PY_FROM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^\s*from\s+([A-Za-z_][\w.]*)\s+import\b").unwrap());
static REQUIRE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"\b(?:require\s*\(|import\s*\(?|from)\s*["']([@\w./-]+)["']"#).unwrap());

/// Top-level module names a script imports or requires, normalized like
/// [`Dependency::normalized_name`].
pub fn import_tokens(script: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let top = |m: &str| normalize_name(m.trim().split('.').next().unwrap_or(""));
    for cap in PY_IMPORT.captures_iter(script) {
        for module in cap[1].split(',') {
            out.insert(top(module.split_whitespace().next().unwrap_or("")));
        }
    }
    for cap in PY_FROM.captures_iter(script) {
        out.insert(top(&cap[1]));
    }
    for cap in REQUIRE.captures_iter(script) {
        let m = cap[1].trim_start_matches('@');
        out.insert(normalize_name(m.split('/').next().unwrap_or(m)));
    }
    out.remove("");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dep(name: &str, c: &str) -> Dependency {
        Dependency { name: name.into(), constraint: c.into() }
    }

    #[test]
    fn requirement_lines() {
        let deps = parse_requirements("a==1.2.3\n# note\nb>=2\n").unwrap();
        assert_eq!(deps, vec![dep("a", "==1.2.3"), dep("b", ">=2")]);
        assert_eq!(parse_requirements("-r base.txt\nc~=1.4  # pinned\n").unwrap(), vec![dep("c", "~=1.4")]);
        assert!(parse_requirements("d!=1.0\n").is_err());
        assert!(parse_requirements("e=1.0\n").is_err());
        assert!(parse_requirements("f~=1\n").is_err());
    }

    #[test]
    fn install_line_extraction() {
        let lines = classify_script(
            "conda create -n youtube_transcript\nconda activate youtube_transcript\npip install youtube-transcript-api\n",
        )
        .unwrap();
        assert_eq!(
            lines,
            vec![ScriptLine::Lifecycle, ScriptLine::Lifecycle, ScriptLine::Install(vec![dep("youtube-transcript-api", "")])]
        );
        let lines = classify_script("python -m pip install -i https://x/simple 'numpy==1.26.4' pandas && echo done").unwrap();
        assert_eq!(
            lines,
            vec![
                ScriptLine::Install(vec![dep("numpy", "==1.26.4"), dep("pandas", "")]),
                ScriptLine::Other("echo done".into())
            ]
        );
        assert!(classify_script("conda install -c conda-forge numpy=1.2").is_err());
    }

    #[test]
    fn relaxation_rules() {
        assert_eq!(dep("pkg", "==1.2.3").relaxed(), dep("pkg", "~=1.2"));
        assert_eq!(dep("pkg", "==1.2").relaxed(), dep("pkg", "~=1.2"));
        assert_eq!(dep("pkg", "==3").relaxed(), dep("pkg", ""));
        assert_eq!(dep("pkg", "~=1.2").relaxed(), dep("pkg", ""));
        assert_eq!(dep("pkg", ">=2").relaxed(), dep("pkg", ">=2"));
        assert_eq!(dep("pkg", "<=2").relaxed(), dep("pkg", "<=2"));
        assert_eq!(dep("pkg", "").relaxed(), dep("pkg", ""));
    }

    #[test]
    fn imports() {
        let py = "import os, sys\nfrom youtube_transcript_api import YouTubeTranscriptApi\nimport used_lib.sub as u\n# import unused_lib\n";
        let t = import_tokens(py);
        assert!(t.contains("youtube_transcript_api"));
        assert!(t.contains("used_lib"));
        assert!(t.contains("os") && t.contains("sys"));
        assert!(!t.contains("unused_lib"));
        let js = "const a = require('left-pad');\nimport x from \"@scope/pkg\";";
        let t = import_tokens(js);
        assert!(t.contains("left_pad"));
        assert!(t.contains("scope"));
        assert_eq!(dep("Youtube-Transcript-Api", "").normalized_name(), "youtube_transcript_api");
    }
}
