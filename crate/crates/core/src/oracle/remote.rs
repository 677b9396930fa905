//! Blocking HTTP client for a remote scoring service.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::wire::{decode_error, decode_response, encode_request};
use super::{Backend, ModelInfo, OracleRequest, OracleResponse};
use crate::error::{invalid, OracleError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Full URL of the scoring endpoint.
    pub endpoint: String,
    /// Extra attempts after a transport failure or a 5xx answer.
    pub retries: u32,
    /// Delay before the first retry; doubled on each further retry.
    pub backoff: Duration,
    pub timeout: Duration,
    /// Upper bound on concurrent requests from this client.
    pub max_in_flight: usize,
    /// Shape of the remote model; the service does not advertise it.
    pub info: ModelInfo,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, info: ModelInfo) -> Self {
        Self {
            endpoint: endpoint.into(),
            retries: 3,
            backoff: Duration::from_millis(50),
            timeout: Duration::from_secs(60),
            max_in_flight: 8,
            info,
        }
    }
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    slots: Slots,
}

enum Attempt {
    Done(Result<OracleResponse, OracleError>),
    Retry(String),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if !config.endpoint.starts_with("http://") && !config.endpoint.starts_with("https://") {
            return Err(invalid(format!("endpoint `{}` must be an http(s) URL", config.endpoint)));
        }
        if config.max_in_flight == 0 {
            return Err(invalid("max_in_flight must be >= 1"));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            slots: Slots {
                free: Mutex::new(config.max_in_flight),
                cv: Condvar::new(),
            },
            agent,
            config,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, body: &str, batch_len: usize) -> Attempt {
        let sent = self
            .agent
            .post(&self.config.endpoint)
            .header("content-type", "application/json")
            .send(body);
        let mut response = match sent {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status().as_u16();
        let bytes = match response.body_mut().read_to_vec() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let detail = || decode_error(&bytes).unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned());
        match status {
            200 => Attempt::Done(decode_response(&bytes, batch_len)),
            500..=599 => Attempt::Retry(format!("HTTP {status}: {}", detail())),
            _ => Attempt::Done(Err(OracleError::Rejected(format!("HTTP {status}: {}", detail())))),
        }
    }
}

impl Backend for RemoteBackend {
    fn info(&self) -> ModelInfo {
        self.config.info
    }

    fn forward(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        request.validate(&self.config.info)?;
        let body = encode_request(request)?;
        let _slot = self.slots.acquire();
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&body, request.batch.len()) {
                Attempt::Done(r) => return r,
                Attempt::Retry(why) => {
                    log::warn!("oracle request {} attempt {} failed: {why}", request.id, attempt + 1);
                    last = why;
                }
            }
        }
        Err(OracleError::Unavailable {
            attempts: self.config.retries + 1,
            last,
        })
    }
}
