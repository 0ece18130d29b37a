//! Web retrieval for tool synthesis: a paged text browser plus pluggable
//! search adapters, each with an offline fixture implementation.

mod browser;
pub mod markup;
mod search;

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

pub use browser::{
    split_viewports, url_digest, Direction, Fetched, FixturePages, LivePages, PageSource, PageView,
    TextBrowser, DEFAULT_VIEWPORT_SIZE,
};
pub use search::{search, FixtureSearch, HttpSearch, SearchBackend, SearchResult, SearchSource};

#[derive(Debug, Error)]
pub enum WebError {
    #[error("fetch failed for {url}: {message}")]
    Fetch { url: String, message: String },
    #[error("invalid url {0}")]
    InvalidUrl(String),
    #[error("search query is empty")]
    EmptyQuery,
    #[error("search backend unavailable: {0}")]
    BackendUnavailable(String),
}

/// Bundles the page source and search backend a task's web agent uses.
#[derive(Clone)]
pub struct WebAgent {
    pages: Arc<dyn PageSource>,
    search: Arc<dyn SearchBackend>,
    viewport_size: usize,
}

impl WebAgent {
    pub fn new(pages: Arc<dyn PageSource>, search: Arc<dyn SearchBackend>, viewport_size: usize) -> Self {
        Self { pages, search, viewport_size }
    }

    pub fn offline(fixtures: &Path, viewport_size: usize) -> Self {
        Self::new(
            Arc::new(FixturePages::new(fixtures)),
            Arc::new(FixtureSearch::new(fixtures)),
            viewport_size,
        )
    }

    /// Fresh browser state for one task.
    pub fn browser(&self) -> TextBrowser {
        TextBrowser::new(self.pages.clone(), self.viewport_size)
    }

    pub fn search(&self, query: &str, source: SearchSource) -> Result<Vec<SearchResult>, WebError> {
        search(self.search.as_ref(), query, source)
    }
}
