//! JSON documents exchanged with inference backends.
//!
//! Every request and response carries `"version": "v1"`. Errors travel as
//! `{"error": code, "message": text}` with an HTTP status of 400 or above.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendError, Caption, ImageContent, ImagePayload, MeshParams, TagSet};
use crate::geometry::{BoxXYXY, ScoredBox};
use crate::mask::BinaryMask;

pub const VERSION: &str = "v1";

/// The `"version"` field; only `"v1"` deserializes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct V1;

impl TryFrom<String> for V1 {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s == VERSION {
            Ok(V1)
        } else {
            Err(format!("unsupported protocol version '{s}'"))
        }
    }
}

impl From<V1> for String {
    fn from(_: V1) -> Self {
        VERSION.to_string()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecordWire {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_b64: Option<String>,
}

impl TryFrom<ImageRecordWire> for ImagePayload {
    type Error = String;

    fn try_from(w: ImageRecordWire) -> Result<Self, Self::Error> {
        let content = match (w.png_b64, w.scene_id, w.rgb_b64) {
            (Some(png), None, None) => ImageContent::Png(ImagePayload::unb64(&png)?),
            (None, Some(scene), None) => ImageContent::Scene(scene),
            (None, None, Some(rgb)) => ImageContent::Rgb(ImagePayload::unb64(&rgb)?),
            _ => return Err("image needs exactly one of png_b64, scene_id, rgb_b64".into()),
        };
        ImagePayload::new(w.image_id, w.width, w.height, content).map_err(|e| e.to_string())
    }
}

impl From<ImagePayload> for ImageRecordWire {
    fn from(p: ImagePayload) -> Self {
        let mut w = ImageRecordWire {
            image_id: p.image_id,
            width: p.width,
            height: p.height,
            png_b64: None,
            scene_id: None,
            rgb_b64: None,
        };
        match p.content {
            ImageContent::Png(b) => w.png_b64 = Some(ImagePayload::b64(&b)),
            ImageContent::Scene(s) => w.scene_id = Some(s),
            ImageContent::Rgb(b) => w.rgb_b64 = Some(ImagePayload::b64(&b)),
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl From<&BackendError> for ErrorBody {
    fn from(e: &BackendError) -> Self {
        ErrorBody {
            error: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

/// A request document and the response type it expects.
pub trait WireRequest: Serialize {
    type Response: DeserializeOwned + Validate;
    const ROUTE: &'static str;
}

/// Semantic checks applied to a decoded response against its request.
pub trait Validate {
    fn validate<R>(&self, request: &R) -> Result<(), BackendError>
    where
        R: RequestView;
}

/// Fields of a request that response validation needs.
pub trait RequestView {
    fn image(&self) -> &ImagePayload;
    fn prompt_count(&self) -> Option<usize> {
        None
    }
    fn box_threshold(&self) -> Option<f64> {
        None
    }
    fn phrases(&self) -> Option<&[String]> {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectRequest {
    pub version: V1,
    pub image: ImagePayload,
    pub phrases: Vec<String>,
    pub box_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectResponse {
    pub version: V1,
    pub detections: Vec<ScoredBox>,
}

impl RequestView for DetectRequest {
    fn image(&self) -> &ImagePayload {
        &self.image
    }
    fn box_threshold(&self) -> Option<f64> {
        Some(self.box_threshold)
    }
    fn phrases(&self) -> Option<&[String]> {
        Some(&self.phrases)
    }
}

impl WireRequest for DetectRequest {
    type Response = DetectResponse;
    const ROUTE: &'static str = "/v1/detect";
}

impl Validate for DetectResponse {
    fn validate<R: RequestView>(&self, req: &R) -> Result<(), BackendError> {
        let img = req.image();
        let threshold = req.box_threshold().unwrap_or(0.0);
        let phrases: Vec<String> = req
            .phrases()
            .unwrap_or_default()
            .iter()
            .map(|p| p.trim().to_lowercase())
            .collect();
        for d in &self.detections {
            if !(0.0..=1.0).contains(&d.score) || d.score < threshold {
                return Err(BackendError::ProtocolViolation(format!(
                    "detection score {} below threshold {threshold} or outside [0, 1]",
                    d.score
                )));
            }
            if !d.bbox.within_image(img.width as f64, img.height as f64) {
                return Err(BackendError::ProtocolViolation(format!(
                    "detection box {:?} outside {}x{} image",
                    d.bbox.to_array(),
                    img.width,
                    img.height
                )));
            }
            if !phrases.contains(&d.phrase.trim().to_lowercase()) {
                return Err(BackendError::ProtocolViolation(format!(
                    "detection phrase '{}' was not requested",
                    d.phrase
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub version: V1,
    pub image: ImagePayload,
    pub boxes: Vec<BoxXYXY>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub version: V1,
    pub masks: Vec<BinaryMask>,
}

impl RequestView for SegmentRequest {
    fn image(&self) -> &ImagePayload {
        &self.image
    }
    fn prompt_count(&self) -> Option<usize> {
        Some(self.boxes.len())
    }
}

impl WireRequest for SegmentRequest {
    type Response = SegmentResponse;
    const ROUTE: &'static str = "/v1/segment";
}

impl Validate for SegmentResponse {
    fn validate<R: RequestView>(&self, req: &R) -> Result<(), BackendError> {
        check_mask_count(self.masks.len(), req.prompt_count().unwrap_or(0))?;
        let img = req.image();
        for m in &self.masks {
            check_mask_size(m, img)?;
        }
        Ok(())
    }
}

pub(crate) fn check_mask_count(got: usize, expected: usize) -> Result<(), BackendError> {
    if got == expected {
        Ok(())
    } else {
        Err(BackendError::ProtocolViolation(format!(
            "segmenter returned {got} masks for {expected} box prompts"
        )))
    }
}

pub(crate) fn check_mask_size(m: &BinaryMask, img: &ImagePayload) -> Result<(), BackendError> {
    if m.height() == img.height && m.width() == img.width {
        Ok(())
    } else {
        Err(BackendError::ProtocolViolation(format!(
            "mask is {}x{} but image is {}x{}",
            m.height(),
            m.width(),
            img.height,
            img.width
        )))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagRequest {
    pub version: V1,
    pub image: ImagePayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagResponse {
    pub version: V1,
    pub tags: TagSet,
}

impl RequestView for TagRequest {
    fn image(&self) -> &ImagePayload {
        &self.image
    }
}

impl WireRequest for TagRequest {
    type Response = TagResponse;
    const ROUTE: &'static str = "/v1/tag";
}

impl Validate for TagResponse {
    fn validate<R: RequestView>(&self, _: &R) -> Result<(), BackendError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub version: V1,
    pub image: ImagePayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub version: V1,
    pub caption: Caption,
}

impl RequestView for CaptionRequest {
    fn image(&self) -> &ImagePayload {
        &self.image
    }
}

impl WireRequest for CaptionRequest {
    type Response = CaptionResponse;
    const ROUTE: &'static str = "/v1/caption";
}

impl Validate for CaptionResponse {
    fn validate<R: RequestView>(&self, _: &R) -> Result<(), BackendError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub version: V1,
    pub image: ImagePayload,
    pub region: BinaryMask,
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub version: V1,
    pub image: ImagePayload,
}

impl RequestView for InpaintRequest {
    fn image(&self) -> &ImagePayload {
        &self.image
    }
}

impl WireRequest for InpaintRequest {
    type Response = InpaintResponse;
    const ROUTE: &'static str = "/v1/inpaint";
}

impl Validate for InpaintResponse {
    fn validate<R: RequestView>(&self, req: &R) -> Result<(), BackendError> {
        let img = req.image();
        if self.image.width != img.width || self.image.height != img.height {
            return Err(BackendError::ProtocolViolation(format!(
                "inpainted image is {}x{}, request was {}x{}",
                self.image.width, self.image.height, img.width, img.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshRequest {
    pub version: V1,
    pub image: ImagePayload,
    #[serde(rename = "box")]
    pub person_box: BoxXYXY,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshResponse {
    pub version: V1,
    /// Declared parameter count; must equal `params.len()`.
    pub length: usize,
    pub params: Vec<f64>,
    #[serde(rename = "box")]
    pub source_box: BoxXYXY,
}

impl RequestView for MeshRequest {
    fn image(&self) -> &ImagePayload {
        &self.image
    }
}

impl WireRequest for MeshRequest {
    type Response = MeshResponse;
    const ROUTE: &'static str = "/v1/mesh";
}

impl Validate for MeshResponse {
    fn validate<R: RequestView>(&self, _: &R) -> Result<(), BackendError> {
        if self.params.len() != self.length {
            return Err(BackendError::ProtocolViolation(format!(
                "mesh declares length {} but carries {} values",
                self.length,
                self.params.len()
            )));
        }
        Ok(())
    }
}

impl From<MeshResponse> for MeshParams {
    fn from(r: MeshResponse) -> Self {
        MeshParams {
            params: r.params,
            source_box: r.source_box,
        }
    }
}

impl From<&MeshParams> for MeshResponse {
    fn from(m: &MeshParams) -> Self {
        MeshResponse {
            version: V1,
            length: m.params.len(),
            params: m.params.clone(),
            source_box: m.source_box,
        }
    }
}
