use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use url::Url;

use super::WebError;
use crate::digest::{normalize_text, text_digest};
use crate::net::HttpTransport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSource {
    Web,
    CodeHost,
}

impl SearchSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchSource::Web => "web",
            SearchSource::CodeHost => "code_host",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "web" => Some(SearchSource::Web),
            "code_host" | "github" | "code" => Some(SearchSource::CodeHost),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub url: String,
    pub snippet: String,
    pub source: SearchSource,
}

/// A search adapter. Receives the already-normalized query.
pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, source: SearchSource) -> Result<Vec<SearchResult>, WebError>;
}

#[derive(Deserialize)]
struct FixtureHit {
    title: String,
    url: String,
    #[serde(default)]
    snippet: String,
}

/// Offline index: `<fixtures>/search/<source>/<query-digest>.jsonl`, one
/// `{title, url, snippet}` object per line in rank order.
pub struct FixtureSearch {
    root: PathBuf,
}

impl FixtureSearch {
    pub fn new(fixtures: impl Into<PathBuf>) -> Self {
        Self { root: fixtures.into() }
    }

    pub fn index_path(&self, query: &str, source: SearchSource) -> PathBuf {
        self.root.join("search").join(source.as_str()).join(format!("{}.jsonl", text_digest(query)))
    }
}

fn valid_url(url: &str) -> bool {
    Url::parse(url).is_ok()
}

impl SearchBackend for FixtureSearch {
    fn search(&self, query: &str, source: SearchSource) -> Result<Vec<SearchResult>, WebError> {
        let path = self.index_path(query, source);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(WebError::BackendUnavailable(format!("{}: {e}", path.display()))),
        };
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let hit: FixtureHit = serde_json::from_str(line).map_err(|e| {
                WebError::BackendUnavailable(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            if !valid_url(&hit.url) {
                log::warn!("skipping fixture hit with invalid url {:?}", hit.url);
                continue;
            }
            out.push(SearchResult { title: hit.title, url: hit.url, snippet: hit.snippet, source });
        }
        Ok(out)
    }
}

/// Thin HTTP adapter: `GET <endpoint>?q=<query>` per source. Accepts a bare
/// result array, `{"results": [...]}`, or the GitHub repository-search shape
/// (`items[].html_url / full_name / description`).
pub struct HttpSearch {
    transport: Arc<dyn HttpTransport>,
    endpoints: BTreeMap<SearchSource, String>,
    timeout: Duration,
}

impl HttpSearch {
    pub fn new(
        transport: Arc<dyn HttpTransport>,
        endpoints: BTreeMap<SearchSource, String>,
        timeout: Duration,
    ) -> Self {
        Self { transport, endpoints, timeout }
    }
}

fn parse_hits(body: &Value, source: SearchSource) -> Vec<SearchResult> {
    let items = body
        .as_array()
        .or_else(|| body.get("results").and_then(Value::as_array))
        .or_else(|| body.get("items").and_then(Value::as_array));
    let field = |v: &Value, keys: &[&str]| {
        keys.iter().find_map(|k| v.get(*k).and_then(Value::as_str)).unwrap_or("").to_string()
    };
    items
        .into_iter()
        .flatten()
        .map(|v| SearchResult {
            title: field(v, &["title", "full_name", "name"]),
            url: field(v, &["url", "html_url", "link"]),
            snippet: field(v, &["snippet", "description", "body"]),
            source,
        })
        .filter(|r| valid_url(&r.url))
        .collect()
}

impl SearchBackend for HttpSearch {
    fn search(&self, query: &str, source: SearchSource) -> Result<Vec<SearchResult>, WebError> {
        let endpoint = self
            .endpoints
            .get(&source)
            .ok_or_else(|| WebError::BackendUnavailable(format!("no endpoint for {}", source.as_str())))?;
        let mut url = Url::parse(endpoint).map_err(|e| WebError::BackendUnavailable(e.to_string()))?;
        url.query_pairs_mut().append_pair("q", query);
        let headers = [("Accept".to_string(), "application/json".to_string())];
        let reply = self
            .transport
            .get(url.as_str(), &headers, self.timeout)
            .map_err(|e| WebError::BackendUnavailable(e.to_string()))?;
        if !(200..300).contains(&reply.status) {
            return Err(WebError::BackendUnavailable(format!("HTTP {}", reply.status)));
        }
        let body: Value =
            serde_json::from_str(&reply.body).map_err(|e| WebError::BackendUnavailable(e.to_string()))?;
        Ok(parse_hits(&body, source))
    }
}

/// Normalizes the query and dispatches to the backend.
pub fn search(backend: &dyn SearchBackend, query: &str, source: SearchSource) -> Result<Vec<SearchResult>, WebError> {
    let normalized = normalize_text(query);
    if normalized.is_empty() {
        return Err(WebError::EmptyQuery);
    }
    backend.search(&normalized, source)
}
