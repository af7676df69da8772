//! Chat-completion HTTP client used by the LLM judge and LLM refiner.
//! Speaks the common `/chat/completions` JSON shape, sends temperature 0,
//! reads the auth token from a configurable environment variable, and can
//! append every request/response pair to a JSONL audit file.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::http::{post_json, HttpConfig};
use crate::{Error, Result};

/// Configuration of the chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token; empty
    /// sends no authorization header.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Optional JSONL audit log of request/response pairs.
    pub audit_path: Option<PathBuf>,
}

pub struct ChatClient {
    cfg: ChatConfig,
    http: HttpConfig,
    audit: Option<Mutex<std::fs::File>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl ChatClient {
    pub fn new(cfg: ChatConfig) -> Result<Self> {
        let mut http = HttpConfig {
            timeout: std::time::Duration::from_secs(cfg.timeout_secs),
            max_retries: cfg.max_retries,
            ..Default::default()
        };
        if !cfg.token_env.is_empty() {
            let token = std::env::var(&cfg.token_env).map_err(|_| {
                Error::Config(format!("environment variable {} is not set", cfg.token_env))
            })?;
            http.headers.push(("Authorization".into(), format!("Bearer {token}")));
        }
        let audit = match &cfg.audit_path {
            Some(path) => Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(path)?,
            )),
            None => None,
        };
        Ok(ChatClient { cfg, http, audit })
    }

    /// One chat completion with temperature 0. Empty responses are errors so
    /// callers can fall back to the rules backend.
    pub fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let response: ChatResponse = post_json(&self.cfg.endpoint, &body, &self.http)?;
        let content = response
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .unwrap_or_default();
        self.audit(&body, &content)?;
        if content.trim().is_empty() {
            return Err(Error::Protocol("chat completion returned an empty response".into()));
        }
        Ok(content)
    }

    fn audit(&self, request: &serde_json::Value, response: &str) -> Result<()> {
        if let Some(audit) = &self.audit {
            let line = json!({"request": request, "response": response});
            let mut file = audit.lock().expect("audit lock poisoned");
            writeln!(file, "{line}")?;
        }
        Ok(())
    }
}
