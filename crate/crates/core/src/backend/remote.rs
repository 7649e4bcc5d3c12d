//! HTTP client for remote backends with a bounded retry policy.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::wire::{
    CaptionRequest, DetectRequest, ErrorBody, InpaintRequest, MeshRequest, RequestView, SegmentRequest,
    TagRequest, Validate, WireRequest, V1,
};
use super::{
    check_phrases, BackendError, Capability, Caption, Captioner, Detector, ImagePayload, Inpainter, MeshParams,
    MeshRecoverer, Segmenter, TagSet, Tagger,
};
use crate::geometry::{BoxXYXY, ScoredBox};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub capability: Capability,
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    100
}

impl BackendEndpoint {
    pub fn new(capability: Capability, base_url: impl Into<String>) -> Self {
        Self {
            capability,
            base_url: base_url.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::InvalidRequest(format!(
                "{} endpoint timeout must be positive",
                self.capability
            )));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(BackendError::InvalidRequest(format!(
                "{} endpoint base_url '{}' is not an http(s) URL",
                self.capability, self.base_url
            )));
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), self.capability.route())
    }

    pub fn policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_base: Duration::from_millis(self.backoff_base_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `base * 2^retry`.
    pub fn delay(&self, retry: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connect(String),
}

/// Moves one JSON body to a URL and back.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &[u8], timeout: Duration) -> Result<HttpReply, TransportError>;
}

#[derive(Clone)]
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, body: &[u8], timeout: Duration) -> Result<HttpReply, TransportError> {
        let result = self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .config()
            .timeout_global(Some(timeout))
            .build()
            .send(body);
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
            other => TransportError::Connect(other.to_string()),
        };
        let mut resp = result.map_err(map_err)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_vec().map_err(map_err)?;
        Ok(HttpReply { status, body })
    }
}

fn tcp_reachable(base_url: &str, timeout: Duration) -> bool {
    use std::net::{TcpStream, ToSocketAddrs};

    let Ok(uri) = base_url.parse::<ureq::http::Uri>() else {
        return false;
    };
    let Some(host) = uri.host() else {
        return false;
    };
    let port = uri
        .port_u16()
        .unwrap_or(if uri.scheme_str() == Some("https") { 443 } else { 80 });
    let Ok(addrs) = (host, port).to_socket_addrs() else {
        return false;
    };
    addrs.into_iter().any(|a| TcpStream::connect_timeout(&a, timeout).is_ok())
}

/// A validated response and the number of HTTP attempts it took.
#[derive(Debug, Clone)]
pub struct RemoteResponse<T> {
    pub value: T,
    pub attempts: u32,
}

/// POSTs a versioned request, retrying timeouts, connection failures and 5xx
/// replies with exponential backoff. 4xx replies are returned immediately.
pub fn call_remote<R>(
    transport: &dyn Transport,
    endpoint: &BackendEndpoint,
    request: &R,
) -> Result<RemoteResponse<R::Response>, BackendError>
where
    R: WireRequest + RequestView,
{
    endpoint.validate()?;
    let url = format!("{}{}", endpoint.base_url.trim_end_matches('/'), R::ROUTE);
    let body = serde_json::to_vec(request).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
    let timeout = Duration::from_millis(endpoint.timeout_ms);
    let policy = endpoint.policy();

    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let failure = match transport.post_json(&url, &body, timeout) {
            Ok(reply) if reply.status < 300 => {
                let value: R::Response = serde_json::from_slice(&reply.body).map_err(|e| {
                    BackendError::ProtocolViolation(format!("{} response does not match schema: {e}", R::ROUTE))
                })?;
                value.validate(request)?;
                return Ok(RemoteResponse { value, attempts });
            }
            Ok(reply) if reply.status >= 500 => format!("status {}", reply.status),
            Ok(reply) => {
                let parsed: Option<ErrorBody> = serde_json::from_slice(&reply.body).ok();
                let (code, message) = match parsed {
                    Some(b) => (b.error, b.message),
                    None => (
                        "unknown".to_string(),
                        String::from_utf8_lossy(&reply.body).into_owned(),
                    ),
                };
                return Err(BackendError::NonRetryableStatus {
                    status: reply.status,
                    code,
                    message,
                });
            }
            Err(TransportError::Timeout) => format!("timed out after {} ms", endpoint.timeout_ms),
            Err(TransportError::Connect(msg)) => format!("connection failed: {msg}"),
        };
        let retry = attempts - 1;
        if retry >= policy.max_retries {
            warn!(url = %url, attempts, "giving up: {failure}");
            return Err(BackendError::RetriesExhausted {
                attempts,
                last: failure,
            });
        }
        let delay = policy.delay(retry);
        debug!(url = %url, attempt = attempts, ?delay, "retrying after {failure}");
        std::thread::sleep(delay);
    }
}

/// Speaks the wire protocol to one endpoint per capability.
#[derive(Clone)]
pub struct RemoteBackend {
    endpoints: BTreeMap<Capability, BackendEndpoint>,
    transport: Arc<dyn Transport>,
}

impl RemoteBackend {
    pub fn new(endpoints: impl IntoIterator<Item = BackendEndpoint>) -> Self {
        Self::with_transport(endpoints, Arc::new(UreqTransport::default()))
    }

    pub fn with_transport(
        endpoints: impl IntoIterator<Item = BackendEndpoint>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoints: endpoints.into_iter().map(|e| (e.capability, e)).collect(),
            transport,
        }
    }

    /// Routes every capability to the same base URL.
    pub fn single_host(base_url: &str, timeout_ms: u64, max_retries: u32, backoff_base_ms: u64) -> Self {
        Self::new(Capability::ALL.map(|capability| BackendEndpoint {
            capability,
            base_url: base_url.to_string(),
            timeout_ms,
            max_retries,
            backoff_base_ms,
        }))
    }

    pub fn endpoint(&self, capability: Capability) -> Option<&BackendEndpoint> {
        self.endpoints.get(&capability)
    }

    /// Whether a TCP connection to each configured endpoint succeeds.
    pub fn probe(&self, timeout: Duration) -> BTreeMap<Capability, bool> {
        self.endpoints
            .iter()
            .map(|(cap, e)| (*cap, tcp_reachable(&e.base_url, timeout)))
            .collect()
    }

    fn call<R>(&self, capability: Capability, request: &R) -> Result<R::Response, BackendError>
    where
        R: WireRequest + RequestView,
    {
        let endpoint = self.endpoints.get(&capability).ok_or_else(|| {
            BackendError::Unreachable(format!("no endpoint configured for {capability}"))
        })?;
        Ok(call_remote(self.transport.as_ref(), endpoint, request)?.value)
    }

    fn identity_of(&self, capability: Capability) -> String {
        match self.endpoints.get(&capability) {
            Some(e) => format!("remote:{}", e.base_url),
            None => "remote:unconfigured".to_string(),
        }
    }
}

impl Detector for RemoteBackend {
    fn detect(&self, image: &ImagePayload, phrases: &[String], box_threshold: f64) -> Result<Vec<ScoredBox>, BackendError> {
        let request = DetectRequest {
            version: V1,
            image: image.clone(),
            phrases: check_phrases(phrases)?,
            box_threshold,
        };
        Ok(self.call(Capability::Detector, &request)?.detections)
    }

    fn identity(&self) -> String {
        self.identity_of(Capability::Detector)
    }
}

impl Segmenter for RemoteBackend {
    fn segment(&self, image: &ImagePayload, box_prompts: &[BoxXYXY]) -> Result<Vec<BinaryMask>, BackendError> {
        let request = SegmentRequest {
            version: V1,
            image: image.clone(),
            boxes: box_prompts.to_vec(),
        };
        Ok(self.call(Capability::Segmenter, &request)?.masks)
    }

    fn identity(&self) -> String {
        self.identity_of(Capability::Segmenter)
    }
}

impl Tagger for RemoteBackend {
    fn tag(&self, image: &ImagePayload) -> Result<TagSet, BackendError> {
        let request = TagRequest {
            version: V1,
            image: image.clone(),
        };
        Ok(self.call(Capability::Tagger, &request)?.tags)
    }

    fn identity(&self) -> String {
        self.identity_of(Capability::Tagger)
    }
}

impl Captioner for RemoteBackend {
    fn caption(&self, image: &ImagePayload) -> Result<Caption, BackendError> {
        let request = CaptionRequest {
            version: V1,
            image: image.clone(),
        };
        Ok(self.call(Capability::Captioner, &request)?.caption)
    }

    fn identity(&self) -> String {
        self.identity_of(Capability::Captioner)
    }
}

impl Inpainter for RemoteBackend {
    fn inpaint(&self, image: &ImagePayload, region: &BinaryMask, prompt: &str) -> Result<ImagePayload, BackendError> {
        if region.height() != image.height || region.width() != image.width {
            return Err(BackendError::DimensionMismatch(format!(
                "region {}x{} vs image {}x{}",
                region.height(),
                region.width(),
                image.height,
                image.width
            )));
        }
        let request = InpaintRequest {
            version: V1,
            image: image.clone(),
            region: region.clone(),
            prompt: prompt.to_string(),
        };
        Ok(self.call(Capability::Inpainter, &request)?.image)
    }

    fn identity(&self) -> String {
        self.identity_of(Capability::Inpainter)
    }
}

impl MeshRecoverer for RemoteBackend {
    fn recover_mesh(&self, image: &ImagePayload, person_box: &BoxXYXY) -> Result<MeshParams, BackendError> {
        let request = MeshRequest {
            version: V1,
            image: image.clone(),
            person_box: *person_box,
        };
        Ok(self.call(Capability::MeshRecoverer, &request)?.into())
    }

    fn identity(&self) -> String {
        self.identity_of(Capability::MeshRecoverer)
    }
}
