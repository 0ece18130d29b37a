use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use url::Url;

use super::markup::html_to_text;
use super::WebError;
use crate::digest::short_hex;
use crate::net::HttpTransport;

pub const DEFAULT_VIEWPORT_SIZE: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageView {
    pub url: String,
    pub viewport_index: usize,
    pub total_viewports: usize,
    pub content: String,
    pub at_start: bool,
    pub at_end: bool,
    /// Set when the server answered with a non-success status; `content`
    /// then carries a note instead of page text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fetched {
    Body(String),
    Status(u16),
}

pub trait PageSource: Send + Sync {
    fn fetch(&self, url: &Url) -> Result<Fetched, WebError>;
}

/// Pages served from `<fixtures>/pages/<digest>.txt`, where the digest is
/// the first 16 hex of SHA-256 over the parsed URL string.
pub struct FixturePages {
    root: PathBuf,
}

impl FixturePages {
    pub fn new(fixtures: impl Into<PathBuf>) -> Self {
        Self { root: fixtures.into() }
    }

    pub fn page_path(&self, url: &Url) -> PathBuf {
        self.root.join("pages").join(format!("{}.txt", url_digest(url)))
    }
}

pub fn url_digest(url: &Url) -> String {
    short_hex(url.as_str(), 16)
}

impl PageSource for FixturePages {
    fn fetch(&self, url: &Url) -> Result<Fetched, WebError> {
        let path = self.page_path(url);
        std::fs::read_to_string(&path).map(Fetched::Body).map_err(|e| WebError::Fetch {
            url: url.to_string(),
            message: format!("no offline fixture at {} ({e})", path.display()),
        })
    }
}

pub struct LivePages {
    transport: Arc<dyn HttpTransport>,
    timeout: Duration,
}

impl LivePages {
    pub fn new(transport: Arc<dyn HttpTransport>, timeout: Duration) -> Self {
        Self { transport, timeout }
    }
}

impl PageSource for LivePages {
    fn fetch(&self, url: &Url) -> Result<Fetched, WebError> {
        let reply = self
            .transport
            .get(url.as_str(), &[], self.timeout)
            .map_err(|e| WebError::Fetch { url: url.to_string(), message: e.to_string() })?;
        if (200..300).contains(&reply.status) {
            Ok(Fetched::Body(reply.body))
        } else {
            Ok(Fetched::Status(reply.status))
        }
    }
}

/// Splits text into chunks of at most `size` characters.
pub fn split_viewports(text: &str, size: usize) -> Vec<String> {
    let size = size.max(1);
    let mut out = Vec::new();
    let mut current = String::new();
    let mut n = 0;
    for c in text.chars() {
        current.push(c);
        n += 1;
        if n == size {
            out.push(std::mem::take(&mut current));
            n = 0;
        }
    }
    if !current.is_empty() || out.is_empty() {
        out.push(current);
    }
    out
}

struct Page {
    viewports: Vec<String>,
    http_status: Option<u16>,
}

/// Paged text browser. Holds per-task state and is not shared across tasks.
pub struct TextBrowser {
    source: Arc<dyn PageSource>,
    viewport_size: usize,
    pages: HashMap<String, Page>,
}

impl TextBrowser {
    pub fn new(source: Arc<dyn PageSource>, viewport_size: usize) -> Self {
        Self { source, viewport_size: viewport_size.max(1), pages: HashMap::new() }
    }

    pub fn visit(&mut self, url: &str) -> Result<PageView, WebError> {
        let parsed = Url::parse(url).map_err(|e| WebError::InvalidUrl(format!("{url}: {e}")))?;
        let page = match self.source.fetch(&parsed)? {
            Fetched::Body(body) => Page {
                viewports: split_viewports(&html_to_text(&body), self.viewport_size),
                http_status: None,
            },
            Fetched::Status(code) => Page {
                viewports: vec![format!("HTTP {code}: the page could not be retrieved")],
                http_status: Some(code),
            },
        };
        let key = parsed.to_string();
        let view = Self::view(&key, &page, 0);
        self.pages.insert(key, page);
        Ok(view)
    }

    /// Moves one viewport, clamped to the page bounds.
    pub fn page_move(&self, view: &PageView, direction: Direction) -> PageView {
        let Some(page) = self.pages.get(&view.url) else {
            return view.clone();
        };
        let last = page.viewports.len() - 1;
        let index = match direction {
            Direction::Up => view.viewport_index.saturating_sub(1),
            Direction::Down => (view.viewport_index + 1).min(last),
        };
        Self::view(&view.url, page, index.min(last))
    }

    fn view(url: &str, page: &Page, index: usize) -> PageView {
        let total = page.viewports.len();
        PageView {
            url: url.to_string(),
            viewport_index: index,
            total_viewports: total,
            content: page.viewports[index].clone(),
            at_start: index == 0,
            at_end: index + 1 == total,
            http_status: page.http_status,
        }
    }
}
