//! Minimal blocking HTTP surface. Every network access in the crate goes
//! through [`HttpTransport`], so offline runs can install [`DenyNetwork`]
//! and prove that no request was attempted.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("transport failure for {url}: {message}")]
    Io { url: String, message: String },
    #[error("network access denied in offline mode: {url}")]
    Denied { url: String },
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        matches!(self, TransportError::Timeout { .. } | TransportError::Io { .. })
    }
}

pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str, headers: &[(String, String)], timeout: Duration)
        -> Result<HttpReply, TransportError>;

    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

/// Real transport backed by `ureq`. Non-2xx statuses are returned, not raised.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .user_agent("alita/0.1")
            .build();
        Self { agent: config.into() }
    }
}

fn map_ureq(url: &str, err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(_) => TransportError::Timeout { url: url.to_string() },
        other => TransportError::Io { url: url.to_string(), message: other.to_string() },
    }
}

impl HttpTransport for UreqTransport {
    fn get(
        &self,
        url: &str,
        headers: &[(String, String)],
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.get(url).config().timeout_global(Some(timeout)).build();
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.call().map_err(|e| map_ureq(url, e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| map_ureq(url, e))?;
        Ok(HttpReply { status, body })
    }

    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url).config().timeout_global(Some(timeout)).build();
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send_json(body).map_err(|e| map_ureq(url, e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| map_ureq(url, e))?;
        Ok(HttpReply { status, body })
    }
}

/// Transport that refuses every request and counts the attempts.
#[derive(Debug, Default)]
pub struct DenyNetwork {
    attempts: AtomicUsize,
}

impl DenyNetwork {
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl HttpTransport for DenyNetwork {
    fn get(&self, url: &str, _: &[(String, String)], _: Duration) -> Result<HttpReply, TransportError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(TransportError::Denied { url: url.to_string() })
    }

    fn post_json(
        &self,
        url: &str,
        _: &[(String, String)],
        _: &serde_json::Value,
        _: Duration,
    ) -> Result<HttpReply, TransportError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(TransportError::Denied { url: url.to_string() })
    }
}
