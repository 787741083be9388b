use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;

use super::wire::{mentions_non_finite, ErrorBody, HiddenStatesBody, InfoBody, ResultsBody};
use super::{
    normalize_layers, Backend, BackendDescriptor, BackendError, BackendKind, HiddenStates, HiddenStatesRequest,
};

pub const ENV_BACKEND_URL: &str = "PEB_BACKEND_URL";
pub const ENV_BACKEND_TIMEOUT: &str = "PEB_BACKEND_TIMEOUT_SECS";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub timeout: Duration,
    /// Retries after the first attempt for connection failures and 5xx.
    pub max_retries: usize,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(300),
            max_retries: 3,
            backoff: Duration::from_millis(250),
            max_in_flight: 4,
        }
    }
}

impl HttpConfig {
    /// Defaults, with the timeout taken from `PEB_BACKEND_TIMEOUT_SECS` when set.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Some(secs) = std::env::var(ENV_BACKEND_TIMEOUT)
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
        {
            cfg.timeout = Duration::from_secs(secs);
        }
        cfg
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for the hidden-states sidecar.
#[derive(Debug)]
pub struct HttpBackend {
    client: Client,
    base: String,
    config: HttpConfig,
    descriptor: BackendDescriptor,
    in_flight: InFlight,
}

enum Attempt {
    Done(Response),
    Retry(Option<u16>, String),
}

impl HttpBackend {
    /// Connects and reads `/info` to discover the model's dimensions.
    pub fn connect(endpoint: &str, config: HttpConfig) -> Result<Self, BackendError> {
        let base = endpoint.trim_end_matches('/').to_string();
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::ConnectFailed {
                endpoint: base.clone(),
                reason: e.to_string(),
            })?;
        let mut backend = Self {
            client,
            descriptor: BackendDescriptor {
                kind: BackendKind::Http,
                endpoint: Some(base.clone()),
                model_id: String::new(),
                hidden_size: 0,
                num_layers: 0,
                mask_token: None,
                fingerprint: String::new(),
            },
            in_flight: InFlight {
                limit: config.max_in_flight.max(1),
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            base,
            config,
        };
        let info = backend.info()?;
        if info.hidden_size == 0 || info.num_layers == 0 {
            return Err(BackendError::ProtocolError(format!(
                "backend reported hidden_size={} num_layers={}",
                info.hidden_size, info.num_layers
            )));
        }
        backend.descriptor.fingerprint = match &info.library_version {
            Some(v) => format!("{} ({v})", info.model_id),
            None => info.model_id.clone(),
        };
        backend.descriptor.model_id = info.model_id;
        backend.descriptor.hidden_size = info.hidden_size;
        backend.descriptor.num_layers = info.num_layers;
        backend.descriptor.mask_token = info.mask_token;
        Ok(backend)
    }

    pub fn info(&self) -> Result<InfoBody, BackendError> {
        let resp = self.send_with_retries(|| self.client.get(format!("{}/info", self.base)))?;
        let text = resp.text().map_err(|e| BackendError::ProtocolError(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| BackendError::ProtocolError(format!("/info: {e}")))
    }

    fn send_with_retries<F>(&self, build: F) -> Result<Response, BackendError>
    where
        F: Fn() -> reqwest::blocking::RequestBuilder,
    {
        let attempts = self.config.max_retries + 1;
        let mut last = (None, String::new());
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff * 2u32.saturating_pow(attempt as u32 - 1);
                log::debug!("retrying {} in {delay:?} ({})", self.base, last.1);
                std::thread::sleep(delay);
            }
            match self.attempt(build())? {
                Attempt::Done(resp) => return Ok(resp),
                Attempt::Retry(status, reason) => last = (status, reason),
            }
        }
        Err(match last.0 {
            Some(status) => BackendError::Unavailable { status, attempts },
            None => BackendError::ConnectFailed {
                endpoint: self.base.clone(),
                reason: last.1,
            },
        })
    }

    fn attempt(&self, req: reqwest::blocking::RequestBuilder) -> Result<Attempt, BackendError> {
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_connect() || e.is_timeout() || e.is_request() => {
                return Ok(Attempt::Retry(None, e.to_string()))
            }
            Err(e) => return Err(BackendError::ProtocolError(e.to_string())),
        };
        let status = resp.status();
        if status.is_success() {
            return Ok(Attempt::Done(resp));
        }
        if status.is_server_error() {
            return Ok(Attempt::Retry(Some(status.as_u16()), status.to_string()));
        }
        let body = resp.text().unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&body).map_or(body, |e| e.error);
        if status == StatusCode::BAD_REQUEST {
            return Err(BackendError::Rejected(message));
        }
        Err(BackendError::ProtocolError(format!("HTTP {status}: {message}")))
    }
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn fetch_hidden_states(&self, request: &HiddenStatesRequest) -> Result<Vec<HiddenStates>, BackendError> {
        let layers = normalize_layers(&self.descriptor, &request.layers)?;
        if request.prompts.is_empty() {
            return Ok(Vec::new());
        }
        let body = HiddenStatesBody {
            prompts: request.prompts.clone(),
            layers: layers.clone(),
            want_offsets: request.want_offsets,
        };
        let _permit = self.in_flight.acquire();
        let url = format!("{}/hidden_states", self.base);
        let resp = self.send_with_retries(|| self.client.post(&url).json(&body))?;
        let text = resp.text().map_err(|e| BackendError::ProtocolError(e.to_string()))?;
        let parsed: ResultsBody = serde_json::from_str(&text).map_err(|e| {
            if mentions_non_finite(&text) {
                BackendError::NonFiniteValues {
                    prompt: 0,
                    layer: layers[0],
                }
            } else {
                BackendError::ProtocolError(format!("/hidden_states: {e}"))
            }
        })?;
        if parsed.results.len() != request.prompts.len() {
            return Err(BackendError::ProtocolError(format!(
                "{} results for {} prompts",
                parsed.results.len(),
                request.prompts.len()
            )));
        }
        parsed
            .results
            .into_iter()
            .zip(&request.prompts)
            .enumerate()
            .map(|(i, (result, prompt))| {
                let mut hs = result.into_hidden_states()?;
                if !request.want_offsets && hs.offsets.is_empty() {
                    hs.offsets = vec![(0, 0); hs.tokens.len()];
                }
                hs.validate(prompt, i, &layers, self.descriptor.hidden_size)?;
                Ok(hs)
            })
            .collect()
    }

    fn max_in_flight(&self) -> usize {
        self.in_flight.limit
    }
}
