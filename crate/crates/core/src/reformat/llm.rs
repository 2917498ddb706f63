//! Minimal text-completion client contract for distractor generation.
//!
//! The reformatters only ever need "prompt in, text out", so that is the
//! whole trait. Production use points [`HttpChatClient`] at any
//! chat-completion-style endpoint; tests run on [`ScriptedClient`].

use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("http error: {0}")]
    Http(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("credential env var {0} is not set")]
    MissingCredential(String),
}

/// Text-in, text-out completion backend.
pub trait LlmClient: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_max_retries() -> u32 {
    3
}

/// Endpoint configuration for a chat-completion-style service. Credentials
/// come from the named environment variable, never from the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

/// Blocking client for `POST {base_url}/chat/completions`.
pub struct HttpChatClient {
    config: LlmConfig,
    credential: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(config: LlmConfig) -> Result<HttpChatClient, LlmError> {
        let credential = match &config.credential_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| LlmError::MissingCredential(var.clone()))?)
            }
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        Ok(HttpChatClient {
            config,
            credential,
            agent,
        })
    }
}

impl LlmClient for HttpChatClient {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut request = self
            .agent
            .post(&url)
            .set("Content-Type", "application/json");
        if let Some(token) = &self.credential {
            request = request.set("Authorization", &format!("Bearer {token}"));
        }
        let response = request
            .send_string(&body.to_string())
            .map_err(|err| match err {
                ureq::Error::Status(code, _) => LlmError::Http(format!("status {code}")),
                ureq::Error::Transport(t) => {
                    let text = t.to_string();
                    if text.contains("timed out") {
                        LlmError::Timeout(text)
                    } else {
                        LlmError::Http(text)
                    }
                }
            })?;
        let text = response
            .into_string()
            .map_err(|err| LlmError::BadResponse(err.to_string()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|err| LlmError::BadResponse(format!("non-JSON body: {err}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }
}

/// Canned responses a scripted client can serve.
#[derive(Debug, Clone)]
pub enum ScriptedReply {
    Text(String),
    Timeout,
    Fail(String),
}

enum Script {
    Sequence(Mutex<VecDeque<ScriptedReply>>),
    Fn(Box<dyn Fn(&str) -> ScriptedReply + Send + Sync>),
}

/// Offline client for tests and dry runs: either a fixed reply sequence, or a
/// deterministic function of the prompt (safe under parallel reformatting).
pub struct ScriptedClient {
    script: Script,
}

impl ScriptedClient {
    pub fn sequence<I: IntoIterator<Item = ScriptedReply>>(replies: I) -> ScriptedClient {
        ScriptedClient {
            script: Script::Sequence(Mutex::new(replies.into_iter().collect())),
        }
    }

    /// Single fixed reply for every call.
    pub fn always(text: &str) -> ScriptedClient {
        let owned = text.to_owned();
        ScriptedClient::from_fn(move |_| ScriptedReply::Text(owned.clone()))
    }

    pub fn from_fn<F>(f: F) -> ScriptedClient
    where
        F: Fn(&str) -> ScriptedReply + Send + Sync + 'static,
    {
        ScriptedClient {
            script: Script::Fn(Box::new(f)),
        }
    }
}

impl LlmClient for ScriptedClient {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let reply = match &self.script {
            Script::Sequence(queue) => queue
                .lock()
                .expect("script lock")
                .pop_front()
                .unwrap_or(ScriptedReply::Fail("script exhausted".into())),
            Script::Fn(f) => f(prompt),
        };
        match reply {
            ScriptedReply::Text(t) => Ok(t),
            ScriptedReply::Timeout => Err(LlmError::Timeout("scripted timeout".into())),
            ScriptedReply::Fail(msg) => Err(LlmError::Http(msg)),
        }
    }
}

/// Verdict recorded for one client call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditVerdict {
    Accepted,
    RejectedEmpty,
    RejectedEqualsAnswer,
    RejectedDuplicate,
    Malformed,
    ClientError,
}

/// One line of the reformat audit log: every client call leaves a record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRecord {
    pub record_id: String,
    pub purpose: &'static str,
    pub attempt: u32,
    pub request_digest: String,
    pub response: String,
    pub verdict: AuditVerdict,
}
