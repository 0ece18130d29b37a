use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::{LlmBackend, LlmError, LlmRequest, LlmResponse, RoleSlot, Usage};
use crate::net::HttpTransport;

/// Where one role slot sends its chat-completion requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderEndpoint {
    pub url: String,
    pub api_key: Option<String>,
    pub model_id: String,
}

impl ProviderEndpoint {
    /// Reads `ALITA_PROVIDER_URL_<SLOT>` / `ALITA_PROVIDER_KEY_<SLOT>`, falling
    /// back to the unsuffixed variables. Credentials are never read from files.
    pub fn from_env(slot: RoleSlot, model_id: &str) -> Option<Self> {
        let suffix = slot.as_str().to_uppercase();
        let var = |base: &str| {
            std::env::var(format!("{base}_{suffix}"))
                .ok()
                .or_else(|| std::env::var(base).ok())
                .filter(|v| !v.is_empty())
        };
        let url = var("ALITA_PROVIDER_URL")?;
        Some(Self { url, api_key: var("ALITA_PROVIDER_KEY"), model_id: model_id.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub request_timeout: Duration,
    pub max_in_flight: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            request_timeout: Duration::from_secs(120),
            max_in_flight: 4,
        }
    }
}

impl RetryPolicy {
    /// Full-jitter delay before retry number `retry` (0-based).
    fn delay(&self, retry: u32) -> Duration {
        let cap = self.base_delay.saturating_mul(2u32.saturating_pow(retry));
        if cap.is_zero() {
            return cap;
        }
        let millis = rand::rng().random_range(0..=cap.as_millis() as u64);
        Duration::from_millis(millis)
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// OpenAI-compatible `chat/completions` client.
pub struct HttpBackend {
    transport: Arc<dyn HttpTransport>,
    endpoints: BTreeMap<RoleSlot, ProviderEndpoint>,
    policy: RetryPolicy,
    in_flight: InFlight,
}

enum Outcome {
    Done(LlmResponse),
    Retry(String),
    Fatal(String),
}

impl HttpBackend {
    pub fn new(
        transport: Arc<dyn HttpTransport>,
        endpoints: BTreeMap<RoleSlot, ProviderEndpoint>,
        policy: RetryPolicy,
    ) -> Self {
        let cap = policy.max_in_flight.max(1);
        Self {
            transport,
            endpoints,
            policy,
            in_flight: InFlight { count: Mutex::new(0), freed: Condvar::new(), cap },
        }
    }

    fn attempt(&self, endpoint: &ProviderEndpoint, request: &LlmRequest, attempt: u32) -> Outcome {
        let body = json!({
            "model": endpoint.model_id,
            "messages": request.messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(key) = &endpoint.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let reply = match self.transport.post_json(&endpoint.url, &headers, &body, self.policy.request_timeout) {
            Ok(r) => r,
            Err(e) if e.is_transient() => return Outcome::Retry(e.to_string()),
            Err(e) => return Outcome::Fatal(e.to_string()),
        };
        match reply.status {
            200..=299 => match parse_completion(&reply.body) {
                Some((content, usage)) => Outcome::Done(LlmResponse {
                    content,
                    model_id: endpoint.model_id.clone(),
                    attempt_count: attempt,
                    usage,
                }),
                None => Outcome::Fatal("response body has no choices[0].message.content".into()),
            },
            429 | 500..=599 => Outcome::Retry(format!("HTTP {}", reply.status)),
            status => Outcome::Fatal(format!("HTTP {status}: {}", tail(&reply.body, 200))),
        }
    }
}

fn tail(s: &str, n: usize) -> &str {
    let start = s.len().saturating_sub(n);
    let start = (start..=s.len()).find(|i| s.is_char_boundary(*i)).unwrap_or(s.len());
    &s[start..]
}

fn parse_completion(body: &str) -> Option<(String, Option<Usage>)> {
    let v: Value = serde_json::from_str(body).ok()?;
    let content = v.pointer("/choices/0/message/content")?.as_str()?.to_string();
    let usage = v.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    });
    Some((content, usage))
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let endpoint = self
            .endpoints
            .get(&request.role_slot)
            .ok_or(LlmError::NotConfigured(request.role_slot))?;
        let _slot = self.in_flight.acquire();
        let max = self.policy.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.attempt(endpoint, request, attempt) {
                Outcome::Done(resp) => return Ok(resp),
                Outcome::Fatal(message) => return Err(LlmError::ProviderError { attempts: attempt, message }),
                Outcome::Retry(message) => {
                    log::warn!("{} attempt {attempt}/{max} failed: {message}", request.role_slot);
                    last = message;
                    if attempt < max {
                        std::thread::sleep(self.policy.delay(attempt - 1));
                    }
                }
            }
        }
        Err(LlmError::ProviderError { attempts: max, message: last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_stays_under_cap() {
        let p = RetryPolicy { base_delay: Duration::from_millis(8), ..RetryPolicy::default() };
        for k in 0..4 {
            for _ in 0..50 {
                assert!(p.delay(k) <= Duration::from_millis(8 << k));
            }
        }
    }

    #[test]
    fn completion_body_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let (c, u) = parse_completion(body).unwrap();
        assert_eq!(c, "hi");
        assert_eq!(u, Some(Usage { prompt_tokens: 3, completion_tokens: 1 }));
        assert!(parse_completion("{}").is_none());
    }
}
