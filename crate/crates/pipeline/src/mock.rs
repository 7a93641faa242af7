//! Offline chat scripts: a JSON file turned into a [`ScriptedClient`].
//!
//! ```json
//! {
//!   "responses": {"<prompt hash>": "reply"},
//!   "rules": [{"system_contains": "psychologist", "reply": "neutral"}]
//! }
//! ```
//!
//! Exact prompt hashes win; otherwise the first rule whose substrings all
//! match supplies the reply.

use std::collections::BTreeMap;
use std::path::Path;

use persona_core::chat::ScriptedClient;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub system_contains: Option<String>,
    #[serde(default)]
    pub user_contains: Option<String>,
    pub reply: String,
}

impl MockRule {
    fn matches(&self, system: &str, user: &str) -> bool {
        self.system_contains.as_deref().is_none_or(|s| system.contains(s))
            && self.user_contains.as_deref().is_none_or(|s| user.contains(s))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| PipelineError::Config(format!("mock script {}: {e}", path.display())))
    }

    pub fn into_client(self) -> ScriptedClient {
        let mut client = ScriptedClient::new();
        for (hash, reply) in self.responses {
            client = client.with_hashed_response(hash, reply);
        }
        let rules = self.rules;
        client.with_rule(move |s, u| rules.iter().find(|r| r.matches(s, u)).map(|r| r.reply.clone()))
    }
}
