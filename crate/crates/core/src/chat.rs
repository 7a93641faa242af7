//! Chat-completion client interface and a scripted offline implementation.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::hex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub temperature: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

/// Anything that turns a system prompt and a user prompt into a reply.
pub trait ChatClient: Send + Sync {
    fn complete(&self, system: &str, user: &str, params: &DecodeParams) -> Result<String>;
}

/// Stable key of a prompt pair: hex SHA-256 of `system NUL user`.
pub fn prompt_hash(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    hex(&h.finalize())
}

type Rule = Box<dyn Fn(&str, &str) -> Option<String> + Send + Sync>;

/// Replays canned responses keyed by [`prompt_hash`]. Prompts without a
/// canned response go to the optional rule; if that declines too the call
/// fails. Never touches the network.
#[derive(Default)]
pub struct ScriptedClient {
    responses: HashMap<String, String>,
    rule: Option<Rule>,
    calls: AtomicUsize,
}

impl ScriptedClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, system: &str, user: &str, reply: impl Into<String>) -> Self {
        self.responses.insert(prompt_hash(system, user), reply.into());
        self
    }

    pub fn with_hashed_response(mut self, hash: impl Into<String>, reply: impl Into<String>) -> Self {
        self.responses.insert(hash.into(), reply.into());
        self
    }

    /// Fallback computing a reply from the prompts; must be deterministic.
    pub fn with_rule(mut self, rule: impl Fn(&str, &str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.rule = Some(Box::new(rule));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, system: &str, user: &str, _params: &DecodeParams) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = prompt_hash(system, user);
        if let Some(r) = self.responses.get(&key) {
            return Ok(r.clone());
        }
        self.rule
            .as_ref()
            .and_then(|f| f(system, user))
            .ok_or_else(|| Error::Client(format!("no scripted response for prompt {key}")))
    }
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, system: &str, user: &str, params: &DecodeParams) -> Result<String> {
        (**self).complete(system, user, params)
    }
}
