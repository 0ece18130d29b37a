//! The MCP box: a flat-file registry of validated tools.
//!
//! Layout under the registry root:
//! `mcps/<id>/record.json`, `mcps/<id>/bundle/*`, `index.json` and a `.lock`
//! file that serializes writers. Ids are derived from the schema hash, so the
//! same tool gets the same id in every registry.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, Utc};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::brainstorm::{is_tool_name, ToolParam, ToolSpec};
use crate::digest::sha256_hex;
use crate::envman::EnvProfile;
use crate::scriptgen::ScriptBundle;

pub const REUSE_THRESHOLD: f64 = 0.35;
pub const PACK_FORMAT_VERSION: u32 = 1;
pub const SUMMARY_DESCRIPTION_CHARS: usize = 120;
pub const EMPTY_SUMMARY: &str = "Registered MCPs: none";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_id: String,
    pub model_ids: BTreeMap<String, String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCPRecord {
    pub id: String,
    pub name: String,
    pub description: String,
    pub input_schema: Vec<ToolParam>,
    /// Registry-relative once stored; a source directory for candidates.
    pub bundle_ref: String,
    pub env_profile: EnvProfile,
    pub provenance: Provenance,
    pub usage_count: u64,
    pub schema_hash: String,
}

pub fn schema_hash(name: &str, input_schema: &[ToolParam]) -> String {
    sha256_hex(json!({"name": name, "input_schema": input_schema}).to_string())
}

pub fn record_id(schema_hash: &str) -> String {
    format!("mcp-{}", &schema_hash[..12])
}

impl MCPRecord {
    /// An unregistered record whose bundle still lives in `bundle_dir`.
    pub fn candidate(spec: &ToolSpec, bundle_dir: &Path, env_profile: EnvProfile, provenance: Provenance) -> Self {
        let hash = schema_hash(&spec.name, &spec.input_schema);
        Self {
            id: record_id(&hash),
            name: spec.name.clone(),
            description: spec.purpose.clone(),
            input_schema: spec.input_schema.clone(),
            bundle_ref: bundle_dir.to_string_lossy().into_owned(),
            env_profile,
            provenance,
            usage_count: 0,
            schema_hash: hash,
        }
    }

    pub fn hash_is_consistent(&self) -> bool {
        self.schema_hash == schema_hash(&self.name, &self.input_schema) && self.id == record_id(&self.schema_hash)
    }
}

#[derive(Debug, Error)]
pub enum McpBoxError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("no record with id {0}")]
    NotFound(String),
    #[error("registry storage error: {0}")]
    Storage(#[from] io::Error),
    #[error("malformed pack: {0}")]
    PackFormat(String),
    #[error("partial import: {imported} imported, {} invalid ({})", invalid.len(), invalid.join("; "))]
    PartialImport { imported: usize, invalid: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImportSummary {
    pub imported: usize,
    pub deduplicated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegistryIndex {
    pub records: BTreeMap<String, MCPRecord>,
    pub tokens: BTreeMap<String, BTreeSet<String>>,
}

impl RegistryIndex {
    pub fn build(records: impl IntoIterator<Item = MCPRecord>) -> Self {
        let mut index = Self::default();
        for r in records {
            for t in tokens(&r.description) {
                index.tokens.entry(t).or_default().insert(r.id.clone());
            }
            index.records.insert(r.id.clone(), r);
        }
        index
    }
}

/// Lowercase alphanumeric words.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn invalid_data(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", rand::random::<u32>()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

struct RegistryLock(File);

impl Drop for RegistryLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

#[derive(Debug, Clone)]
pub struct McpBox {
    root: PathBuf,
}

impl McpBox {
    /// Opens (creating if needed) the registry and rebuilds a stale index.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, McpBoxError> {
        let reg = Self { root: root.into() };
        fs::create_dir_all(reg.mcps_dir())?;
        let _lock = reg.lock()?;
        let fresh = RegistryIndex::build(reg.records()?);
        let stored: Option<RegistryIndex> =
            fs::read(reg.index_path()).ok().and_then(|b| serde_json::from_slice(&b).ok());
        if stored.as_ref() != Some(&fresh) {
            reg.write_index(&fresh)?;
        }
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn mcps_dir(&self) -> PathBuf {
        self.root.join("mcps")
    }

    pub fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    fn record_dir(&self, id: &str) -> PathBuf {
        self.mcps_dir().join(id)
    }

    pub fn bundle_dir(&self, record: &MCPRecord) -> PathBuf {
        self.root.join(&record.bundle_ref)
    }

    fn lock(&self) -> io::Result<RegistryLock> {
        let file = fs::OpenOptions::new().create(true).truncate(false).write(true).open(self.root.join(".lock"))?;
        file.lock()?;
        Ok(RegistryLock(file))
    }

    fn write_index(&self, index: &RegistryIndex) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(index).map_err(io::Error::other)?;
        write_atomic(&self.index_path(), &bytes)
    }

    fn refresh_index(&self) -> io::Result<()> {
        self.write_index(&RegistryIndex::build(self.records()?))
    }

    /// All stored records, oldest first. Half-written entries are skipped.
    pub fn records(&self) -> io::Result<Vec<MCPRecord>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.mcps_dir())? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            match fs::read(entry.path().join("record.json")) {
                Ok(bytes) => out.push(serde_json::from_slice(&bytes).map_err(invalid_data_from)?),
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e),
            }
        }
        out.sort_by(|a: &MCPRecord, b| (a.provenance.created_at, &a.id).cmp(&(b.provenance.created_at, &b.id)));
        Ok(out)
    }

    pub fn len(&self) -> io::Result<usize> {
        Ok(self.records()?.len())
    }

    pub fn is_empty(&self) -> io::Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn index(&self) -> io::Result<RegistryIndex> {
        Ok(RegistryIndex::build(self.records()?))
    }

    pub fn get(&self, id: &str) -> Result<MCPRecord, McpBoxError> {
        match fs::read(self.record_dir(id).join("record.json")) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes).map_err(invalid_data_from)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(McpBoxError::NotFound(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn find_by_name(&self, name: &str) -> io::Result<Option<MCPRecord>> {
        Ok(self.records()?.into_iter().find(|r| r.name == name))
    }

    pub fn load_bundle(&self, record: &MCPRecord) -> io::Result<ScriptBundle> {
        ScriptBundle::read_from_dir(&self.bundle_dir(record))
    }

    /// Stores `candidate` (whose `bundle_ref` names its source directory),
    /// or returns the id of an existing record with the same schema hash.
    pub fn register(&self, candidate: &MCPRecord) -> Result<String, McpBoxError> {
        self.register_detailed(candidate).map(|(id, _)| id)
    }

    pub fn register_detailed(&self, candidate: &MCPRecord) -> Result<(String, bool), McpBoxError> {
        if candidate.name.trim().is_empty() || !is_tool_name(&candidate.name) {
            return Err(McpBoxError::InvalidRecord(format!("bad tool name {:?}", candidate.name)));
        }
        let source = PathBuf::from(&candidate.bundle_ref);
        let bundle = ScriptBundle::read_from_dir(&source)
            .map_err(|e| McpBoxError::InvalidRecord(format!("bundle at {}: {e}", source.display())))?;
        let hash = schema_hash(&candidate.name, &candidate.input_schema);

        let _lock = self.lock()?;
        if let Some(existing) = self.records()?.into_iter().find(|r| r.schema_hash == hash) {
            return Ok((existing.id, false));
        }
        let id = record_id(&hash);
        let mut record = candidate.clone();
        record.schema_hash = hash;
        record.id = id.clone();
        record.bundle_ref = format!("mcps/{id}/bundle");

        let staging = self.mcps_dir().join(format!(".tmp-{id}-{}", rand::random::<u32>()));
        let staged = (|| -> io::Result<()> {
            bundle.write_to_dir(&staging.join("bundle"))?;
            let bytes = serde_json::to_vec_pretty(&record).map_err(io::Error::other)?;
            fs::write(staging.join("record.json"), bytes)?;
            fs::rename(&staging, self.record_dir(&id))
        })();
        if let Err(e) = staged {
            let _ = fs::remove_dir_all(&staging);
            return Err(e.into());
        }
        self.refresh_index()?;
        Ok((id, true))
    }

    /// Ids whose description scores at least `threshold` against `query`,
    /// best first; ties go to the older record.
    pub fn lookup(&self, query: &str, threshold: f64) -> io::Result<Vec<(String, f64)>> {
        let q = tokens(query);
        let mut hits: Vec<(MCPRecord, f64)> = self
            .records()?
            .into_iter()
            .map(|r| {
                let s = jaccard(&q, &tokens(&r.description));
                (r, s)
            })
            .filter(|(_, s)| *s > 0.0 && *s >= threshold)
            .collect();
        hits.sort_by(|(ra, sa), (rb, sb)| {
            sb.total_cmp(sa).then(ra.provenance.created_at.cmp(&rb.provenance.created_at)).then(ra.id.cmp(&rb.id))
        });
        Ok(hits.into_iter().map(|(r, s)| (r.id, s)).collect())
    }

    pub fn summarize(&self) -> io::Result<String> {
        let records = self.records()?;
        if records.is_empty() {
            return Ok(EMPTY_SUMMARY.to_string());
        }
        let lines: Vec<String> = records
            .iter()
            .map(|r| {
                let mut desc: String = r.description.chars().take(SUMMARY_DESCRIPTION_CHARS).collect();
                if r.description.chars().count() > SUMMARY_DESCRIPTION_CHARS {
                    desc.push('\u{2026}');
                }
                format!("{} \u{2014} {}", r.name, desc)
            })
            .collect();
        Ok(lines.join("\n"))
    }

    /// Bumps `usage_count` by one and returns the new value.
    pub fn record_usage(&self, id: &str) -> Result<u64, McpBoxError> {
        let _lock = self.lock()?;
        let mut record = self.get(id)?;
        record.usage_count += 1;
        let bytes = serde_json::to_vec_pretty(&record).map_err(io::Error::other)?;
        write_atomic(&self.record_dir(id).join("record.json"), &bytes)?;
        self.refresh_index()?;
        Ok(record.usage_count)
    }

    /// Writes a gzip tar with `manifest.json`, each record and its bundle.
    pub fn export_pack(&self, ids: &[String], dest: &Path) -> Result<usize, McpBoxError> {
        let records: Vec<MCPRecord> = ids.iter().map(|id| self.get(id)).collect::<Result<_, _>>()?;
        let mut tar = tar::Builder::new(GzEncoder::new(File::create(dest)?, Compression::default()));
        let manifest = json!({
            "format_version": PACK_FORMAT_VERSION,
            "records": records.iter().map(|r| &r.id).collect::<Vec<_>>(),
        });
        append(&mut tar, "manifest.json", &serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?)?;
        for r in &records {
            append(&mut tar, &format!("records/{}/record.json", r.id), &serde_json::to_vec_pretty(r).map_err(io::Error::other)?)?;
            let dir = self.bundle_dir(r);
            let mut names: Vec<String> = fs::read_dir(&dir)?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect::<Result<_, _>>()?;
            names.sort();
            for name in names {
                append(&mut tar, &format!("records/{}/bundle/{name}", r.id), &fs::read(dir.join(&name))?)?;
            }
        }
        tar.into_inner()?.finish()?.flush()?;
        Ok(records.len())
    }

    /// Registers every record in the pack. Invalid records are skipped and
    /// reported through [`McpBoxError::PartialImport`] after the rest land.
    pub fn import_pack(&self, src: &Path) -> Result<ImportSummary, McpBoxError> {
        let files = read_pack(src)?;
        let manifest: serde_json::Value = files
            .get("manifest.json")
            .ok_or_else(|| McpBoxError::PackFormat("manifest.json missing".into()))
            .and_then(|b| serde_json::from_slice(b).map_err(|e| McpBoxError::PackFormat(format!("manifest.json: {e}"))))?;
        let version = manifest["format_version"]
            .as_u64()
            .ok_or_else(|| McpBoxError::PackFormat("format_version missing".into()))?;
        if version == 0 || version > PACK_FORMAT_VERSION as u64 {
            return Err(McpBoxError::PackFormat(format!("unsupported format_version {version}")));
        }
        let ids: Vec<String> = serde_json::from_value(manifest["records"].clone())
            .map_err(|e| McpBoxError::PackFormat(format!("manifest records: {e}")))?;

        let mut summary = ImportSummary::default();
        let mut invalid = Vec::new();
        for id in &ids {
            match self.import_one(id, &files) {
                Ok(true) => summary.imported += 1,
                Ok(false) => summary.deduplicated += 1,
                Err(e) => invalid.push(format!("{id}: {e}")),
            }
        }
        if invalid.is_empty() {
            Ok(summary)
        } else {
            Err(McpBoxError::PartialImport { imported: summary.imported, invalid })
        }
    }

    fn import_one(&self, id: &str, files: &BTreeMap<String, Vec<u8>>) -> Result<bool, McpBoxError> {
        let prefix = format!("records/{id}/");
        let raw = files
            .get(&format!("{prefix}record.json"))
            .ok_or_else(|| McpBoxError::InvalidRecord("record.json missing".into()))?;
        let mut record: MCPRecord =
            serde_json::from_slice(raw).map_err(|e| McpBoxError::InvalidRecord(format!("record.json: {e}")))?;
        if record.id != id || !record.hash_is_consistent() {
            return Err(McpBoxError::InvalidRecord("schema hash does not match record".into()));
        }
        let staging = self.root.join(format!(".import-{}", rand::random::<u64>()));
        let bundle_prefix = format!("{prefix}bundle/");
        let result = (|| {
            fs::create_dir_all(&staging)?;
            for (path, bytes) in files.range(bundle_prefix.clone()..) {
                let Some(name) = path.strip_prefix(&bundle_prefix) else { break };
                if name.contains('/') {
                    return Err(McpBoxError::InvalidRecord(format!("nested bundle entry {name}")));
                }
                fs::write(staging.join(name), bytes)?;
            }
            record.bundle_ref = staging.to_string_lossy().into_owned();
            self.register_detailed(&record).map(|(_, created)| created)
        })();
        let _ = fs::remove_dir_all(&staging);
        result
    }

    /// Env names referenced by stored records; `env-gc` never removes these.
    pub fn referenced_envs(&self) -> io::Result<HashSet<String>> {
        Ok(self.records()?.into_iter().map(|r| r.env_profile.env_name).collect())
    }
}

fn invalid_data_from(e: serde_json::Error) -> io::Error {
    invalid_data(e.to_string())
}

fn append<W: Write>(tar: &mut tar::Builder<W>, path: &str, bytes: &[u8]) -> io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(if path.ends_with(".sh") { 0o755 } else { 0o644 });
    header.set_mtime(0);
    header.set_entry_type(tar::EntryType::Regular);
    tar.append_data(&mut header, path, bytes)
}

fn read_pack(src: &Path) -> Result<BTreeMap<String, Vec<u8>>, McpBoxError> {
    let bad = |e: io::Error| McpBoxError::PackFormat(e.to_string());
    let mut archive = tar::Archive::new(GzDecoder::new(File::open(src)?));
    let mut files = BTreeMap::new();
    for entry in archive.entries().map_err(bad)? {
        let mut entry = entry.map_err(bad)?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = entry.path().map_err(bad)?.into_owned();
        if path.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(McpBoxError::PackFormat(format!("unsafe path {}", path.display())));
        }
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(bad)?;
        files.insert(path.to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}
