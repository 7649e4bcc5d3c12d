//! Capability contracts for the foundation-model backends.
//!
//! Each model family is reduced to one trait. Implementations are either
//! [`RemoteBackend`] (HTTP, see [`wire`]) or [`MockBackend`], which answers
//! from synthetic [`FixtureScene`]s.

pub mod fixture;
pub mod mock;
pub mod remote;
pub mod wire;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoxXYXY, ScoredBox};
use crate::mask::BinaryMask;

pub use fixture::{FixtureObject, FixtureScene};
pub use mock::{MockBackend, MockConfig};
pub use remote::{call_remote, BackendEndpoint, RemoteBackend, RetryPolicy, Transport, UreqTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Detector,
    Segmenter,
    Tagger,
    Captioner,
    Inpainter,
    MeshRecoverer,
}

impl Capability {
    pub const ALL: [Capability; 6] = [
        Capability::Detector,
        Capability::Segmenter,
        Capability::Tagger,
        Capability::Captioner,
        Capability::Inpainter,
        Capability::MeshRecoverer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Capability::Detector => "detector",
            Capability::Segmenter => "segmenter",
            Capability::Tagger => "tagger",
            Capability::Captioner => "captioner",
            Capability::Inpainter => "inpainter",
            Capability::MeshRecoverer => "mesh_recoverer",
        }
    }

    /// HTTP route serving this capability.
    pub fn route(&self) -> &'static str {
        match self {
            Capability::Detector => "/v1/detect",
            Capability::Segmenter => "/v1/segment",
            Capability::Tagger => "/v1/tag",
            Capability::Captioner => "/v1/caption",
            Capability::Inpainter => "/v1/inpaint",
            Capability::MeshRecoverer => "/v1/mesh",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Capability {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown capability '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unknown scene '{0}'")]
    UnknownScene(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("backend returned status {status} ({code}): {message}")]
    NonRetryableStatus {
        status: u16,
        code: String,
        message: String,
    },
}

impl BackendError {
    /// Stable machine-readable code used in `{"error": code}` bodies.
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Unreachable(_) => "backend-unreachable",
            BackendError::MalformedResponse(_) => "malformed-response",
            BackendError::UnknownScene(_) => "unknown-scene",
            BackendError::InvalidRequest(_) => "invalid-request",
            BackendError::DimensionMismatch(_) => "dimension-mismatch",
            BackendError::ProtocolViolation(_) => "protocol-violation",
            BackendError::RetriesExhausted { .. } => "retries-exhausted",
            BackendError::NonRetryableStatus { .. } => "non-retryable-status",
        }
    }
}

/// Pixel content carried by an [`ImagePayload`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageContent {
    /// Encoded PNG, carried opaquely.
    Png(Vec<u8>),
    /// Reference to a fixture scene known to mock backends.
    Scene(String),
    /// Raw 8-bit RGB, row-major, `width * height * 3` bytes.
    Rgb(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "wire::ImageRecordWire", into = "wire::ImageRecordWire")]
pub struct ImagePayload {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub content: ImageContent,
}

impl ImagePayload {
    pub fn new(image_id: u64, width: u32, height: u32, content: ImageContent) -> Result<Self, BackendError> {
        if width == 0 || height == 0 {
            return Err(BackendError::InvalidRequest(format!(
                "image {image_id} has empty dimensions {width}x{height}"
            )));
        }
        if let ImageContent::Rgb(bytes) = &content {
            let expected = width as usize * height as usize * 3;
            if bytes.len() != expected {
                return Err(BackendError::InvalidRequest(format!(
                    "rgb content has {} bytes, expected {expected}",
                    bytes.len()
                )));
            }
        }
        Ok(Self {
            image_id,
            width,
            height,
            content,
        })
    }

    pub fn scene(image_id: u64, width: u32, height: u32, scene_id: impl Into<String>) -> Self {
        Self::new(image_id, width, height, ImageContent::Scene(scene_id.into()))
            .expect("scene payload with positive dimensions")
    }

    pub fn scene_id(&self) -> Option<&str> {
        match &self.content {
            ImageContent::Scene(id) => Some(id),
            _ => None,
        }
    }

    /// Name used for the image record in exported datasets.
    pub fn file_name(&self) -> String {
        match &self.content {
            ImageContent::Scene(id) => id.clone(),
            _ => format!("{}.png", self.image_id),
        }
    }

    pub(crate) fn b64(bytes: &[u8]) -> String {
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub(crate) fn unb64(s: &str) -> Result<Vec<u8>, String> {
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(|e| e.to_string())
    }
}

/// Deduplicated, lowercase, lexicographically ordered labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TagSet(Vec<String>);

impl TagSet {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v: Vec<String> = labels
            .into_iter()
            .map(|s| s.as_ref().trim().to_lowercase())
            .filter(|s| !s.is_empty())
            .collect();
        v.sort();
        v.dedup();
        TagSet(v)
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<String>> for TagSet {
    fn from(v: Vec<String>) -> Self {
        TagSet::new(v)
    }
}

impl From<TagSet> for Vec<String> {
    fn from(t: TagSet) -> Self {
        t.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Caption(pub String);

/// Opaque mesh parameters returned by a mesh recoverer, with the box it was run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshParams {
    pub params: Vec<f64>,
    #[serde(rename = "box")]
    pub source_box: BoxXYXY,
}

pub trait Detector: Send + Sync {
    fn detect(
        &self,
        image: &ImagePayload,
        phrases: &[String],
        box_threshold: f64,
    ) -> Result<Vec<ScoredBox>, BackendError>;

    fn identity(&self) -> String;
}

pub trait Segmenter: Send + Sync {
    /// Returns exactly one mask per prompt, in prompt order.
    fn segment(&self, image: &ImagePayload, box_prompts: &[BoxXYXY]) -> Result<Vec<BinaryMask>, BackendError>;

    fn identity(&self) -> String;
}

pub trait Tagger: Send + Sync {
    fn tag(&self, image: &ImagePayload) -> Result<TagSet, BackendError>;

    fn identity(&self) -> String;
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &ImagePayload) -> Result<Caption, BackendError>;

    fn identity(&self) -> String;
}

pub trait Inpainter: Send + Sync {
    fn inpaint(&self, image: &ImagePayload, region: &BinaryMask, prompt: &str) -> Result<ImagePayload, BackendError>;

    fn identity(&self) -> String;
}

pub trait MeshRecoverer: Send + Sync {
    fn recover_mesh(&self, image: &ImagePayload, person_box: &BoxXYXY) -> Result<MeshParams, BackendError>;

    fn identity(&self) -> String;
}

/// One implementation per capability, shared across pipeline runs.
#[derive(Clone)]
pub struct Backends {
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub tagger: Arc<dyn Tagger>,
    pub captioner: Arc<dyn Captioner>,
    pub inpainter: Arc<dyn Inpainter>,
    pub mesh: Arc<dyn MeshRecoverer>,
}

impl Backends {
    /// Uses one object for every capability.
    pub fn uniform<B>(backend: Arc<B>) -> Self
    where
        B: Detector + Segmenter + Tagger + Captioner + Inpainter + MeshRecoverer + 'static,
    {
        Self {
            detector: backend.clone(),
            segmenter: backend.clone(),
            tagger: backend.clone(),
            captioner: backend.clone(),
            inpainter: backend.clone(),
            mesh: backend,
        }
    }
}

/// Checks a detector request's phrase list, returning trimmed phrases.
pub(crate) fn check_phrases(phrases: &[String]) -> Result<Vec<String>, BackendError> {
    if phrases.is_empty() {
        return Err(BackendError::InvalidRequest("phrases must not be empty".into()));
    }
    phrases
        .iter()
        .map(|p| {
            let t = p.trim();
            if t.is_empty() {
                Err(BackendError::InvalidRequest("phrases must be non-empty after trimming".into()))
            } else {
                Ok(t.to_string())
            }
        })
        .collect()
}
