//! Blocking HTTP client for a daemon's control API.

use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::wire::{CheckpointRequest, DaemonStatus, FaultRequest, OpResponse, RunRequest};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{url}: {source}")]
    Http { url: String, source: ureq::Error },
    #[error("{url}: unexpected status {status}: {body}")]
    Status { url: String, status: u16, body: String },
}

/// A response together with client-side timing.
#[derive(Debug, Clone)]
pub struct Timed<T> {
    pub status: u16,
    pub value: T,
    pub sent_at: DateTime<Utc>,
    pub received_at: DateTime<Utc>,
    pub elapsed: Duration,
}

impl<T> Timed<T> {
    pub fn ok(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Clone)]
pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("base", &self.base).finish()
    }
}

impl Client {
    pub fn new(addr: &str) -> Self {
        let base = if addr.starts_with("http://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{addr}")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(3600)))
            .build()
            .into();
        Client { base, agent }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<Timed<R>, ClientError> {
        let url = format!("{}{path}", self.base);
        let sent_at = Utc::now();
        let t = Instant::now();
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|source| ClientError::Http { url: url.clone(), source })?;
        let received_at = Utc::now();
        let elapsed = t.elapsed();
        let status = resp.status().as_u16();
        let value = resp
            .body_mut()
            .read_json::<R>()
            .map_err(|source| ClientError::Http { url, source })?;
        Ok(Timed {
            status,
            value,
            sent_at,
            received_at,
            elapsed,
        })
    }

    fn get_text(&self, path: &str) -> Result<String, ClientError> {
        let url = format!("{}{path}", self.base);
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|source| ClientError::Http { url: url.clone(), source })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|source| ClientError::Http { url: url.clone(), source })?;
        if status != 200 {
            return Err(ClientError::Status { url, status, body });
        }
        Ok(body)
    }

    pub fn status(&self) -> Result<DaemonStatus, ClientError> {
        let url = format!("{}/status", self.base);
        let text = self.get_text("/status")?;
        serde_json::from_str(&text).map_err(|e| ClientError::Status {
            url,
            status: 200,
            body: format!("{e}: {text}"),
        })
    }

    pub fn metrics(&self) -> Result<String, ClientError> {
        self.get_text("/metrics")
    }

    pub fn run(&self, req: &RunRequest) -> Result<Timed<OpResponse>, ClientError> {
        self.post("/run", req)
    }

    pub fn checkpoint(&self, req: &CheckpointRequest) -> Result<Timed<OpResponse>, ClientError> {
        self.post("/checkpoint", req)
    }

    pub fn fault(&self, exit_code: u8) -> Result<Timed<serde_json::Value>, ClientError> {
        self.post("/fault", &FaultRequest { exit_code })
    }

    pub fn drop_next_completion(&self) -> Result<Timed<serde_json::Value>, ClientError> {
        self.post("/debug/drop-completion", &serde_json::json!({}))
    }

    /// Poll `/status` until `pred` holds or `timeout` passes.
    pub fn wait_status<F>(&self, timeout: Duration, mut pred: F) -> Result<DaemonStatus, ClientError>
    where
        F: FnMut(&DaemonStatus) -> bool,
    {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.status()?;
            if pred(&s) || Instant::now() >= deadline {
                return Ok(s);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}
