//! Small synchronous HTTP JSON helper shared by the remote labeler, remote
//! grounder, and chat-completion client: POST a JSON body, retry transient
//! failures with exponential backoff, enforce a per-request timeout.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

/// Timeout and retry policy for one remote backend.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub timeout: Duration,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    /// Extra headers, e.g. an authorization token.
    pub headers: Vec<(String, String)>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            timeout: Duration::from_secs(30),
            max_retries: 2,
            initial_backoff: Duration::from_millis(250),
            headers: Vec::new(),
        }
    }
}

/// POST `body` as JSON to `url` and decode the JSON response.
///
/// Connection and timeout failures are retried up to `max_retries` times and
/// surface as [`Error::Transport`]; HTTP error statuses and undecodable
/// bodies surface as [`Error::Protocol`].
pub fn post_json<B: Serialize, T: DeserializeOwned>(
    url: &str,
    body: &B,
    cfg: &HttpConfig,
) -> Result<T> {
    let client = reqwest::blocking::Client::builder()
        .timeout(cfg.timeout)
        .build()
        .map_err(|e| Error::Transport(format!("client build failed: {e}")))?;

    let mut attempt = 0;
    let mut backoff = cfg.initial_backoff;
    loop {
        let mut request = client.post(url).json(body);
        for (name, value) in &cfg.headers {
            request = request.header(name, value);
        }
        match request.send() {
            Ok(response) => {
                let status = response.status();
                if status.is_server_error() && attempt < cfg.max_retries {
                    attempt += 1;
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    continue;
                }
                if !status.is_success() {
                    let text = response.text().unwrap_or_default();
                    return Err(Error::Protocol(format!(
                        "{url} returned {status}: {}",
                        text.chars().take(200).collect::<String>()
                    )));
                }
                return response
                    .json::<T>()
                    .map_err(|e| Error::Protocol(format!("{url} returned undecodable body: {e}")));
            }
            Err(e) => {
                if attempt < cfg.max_retries {
                    attempt += 1;
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    continue;
                }
                return Err(Error::Transport(format!("{url}: {e}")));
            }
        }
    }
}
