//! Chat-completions client over HTTP with retry and exponential backoff.

use std::time::Duration;

use log::warn;
use persona_core::chat::{ChatClient, DecodeParams};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Attempts and delays between them: `base, base·factor, ..`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_secs(1), factor: 2 }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt `k` (1-based).
    pub fn delay(&self, k: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(k.saturating_sub(1))
    }
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct HttpChatClient {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    sleep: Sleeper,
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

impl HttpChatClient {
    /// `base_url` is the API root (e.g. `https://host/v1`); requests go to
    /// `{base_url}/chat/completions`. The key, if any, is read from the
    /// environment variable `api_key_env`.
    pub fn new(base_url: &str, model: &str, api_key_env: Option<&str>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key: api_key_env.and_then(|v| std::env::var(v).ok()),
            retry: RetryPolicy::default(),
            sleep: Box::new(std::thread::sleep),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Replaces the backoff sleep (tests record delays instead of waiting).
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn request_body(&self, system: &str, user: &str, params: &DecodeParams) -> Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": params.temperature,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, Failure> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| Failure::Retryable(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Failure::Retryable(format!("reading body: {e}")))?;
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => return Err(Failure::Retryable(format!("status {status}: {text}"))),
            _ => return Err(Failure::Fatal(format!("status {status}: {text}"))),
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Fatal(format!("bad response json: {e}")))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Failure::Fatal(format!("response has no choices[0].message.content: {text}")))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, system: &str, user: &str, params: &DecodeParams) -> persona_core::Result<String> {
        let body = self.request_body(system, user, params);
        let mut last = String::new();
        for k in 1..=self.retry.max_attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(m)) => return Err(persona_core::Error::Client(m)),
                Err(Failure::Retryable(m)) => {
                    warn!("chat attempt {k}/{} failed: {m}", self.retry.max_attempts);
                    last = m;
                    if k < self.retry.max_attempts {
                        (self.sleep)(self.retry.delay(k));
                    }
                }
            }
        }
        Err(persona_core::Error::Client(format!("gave up after {} attempts: {last}", self.retry.max_attempts)))
    }
}
