//! Box arithmetic shared by the pipelines and the evaluator.
//!
//! Boxes live in continuous pixel space (origin top-left, x right, y down).
//! Conversion to the integer pixel grid only happens inside the mask codec.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("invalid normalized box: {0}")]
    InvalidNormalized(&'static str),
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidImageSize { width: f64, height: f64 },
    #[error("box lies entirely outside the {width}x{height} image")]
    EmptyAfterClip { width: f64, height: f64 },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("phrase must not be empty")]
    EmptyPhrase,
}

/// Axis-aligned box in pixel coordinates with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let invalid = |reason| GeometryError::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid("zero or negative extent"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(xywh[0], xywh[1], xywh[0] + xywh[2], xywh[1] + xywh[3])
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    /// True when `other` lies inside `self` (boundaries inclusive).
    pub fn contains(&self, other: &BoxXYXY) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// True when the box lies within `[0, width] x [0, height]`.
    pub fn within_image(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for BoxXYXY {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        b.to_array()
    }
}

/// Center/size box with every component expressed as a fraction of the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCXCYWHNorm {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCXCYWHNorm {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidNormalized("non-finite component"));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(GeometryError::InvalidNormalized("center outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&w) || !(0.0..=1.0).contains(&h) {
            return Err(GeometryError::InvalidNormalized("size outside [0, 1]"));
        }
        Ok(Self { cx, cy, w, h })
    }
}

/// A detection: box, the phrase it was grounded to, and its confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub phrase: String,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BoxXYXY, phrase: impl Into<String>, score: f64) -> Result<Self, GeometryError> {
        let phrase = phrase.into();
        if phrase.trim().is_empty() {
            return Err(GeometryError::EmptyPhrase);
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        Ok(Self {
            bbox,
            phrase,
            score,
        })
    }
}

fn check_image_size(img_w: f64, img_h: f64) -> Result<(), GeometryError> {
    if img_w > 0.0 && img_h > 0.0 && img_w.is_finite() && img_h.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::InvalidImageSize {
            width: img_w,
            height: img_h,
        })
    }
}

/// Converts a normalized center/size box into pixel corners. No clipping is applied.
pub fn box_from_normalized(
    b: BoxCXCYWHNorm,
    img_w: f64,
    img_h: f64,
) -> Result<BoxXYXY, GeometryError> {
    check_image_size(img_w, img_h)?;
    BoxXYXY::new(
        (b.cx - b.w / 2.0) * img_w,
        (b.cy - b.h / 2.0) * img_h,
        (b.cx + b.w / 2.0) * img_w,
        (b.cy + b.h / 2.0) * img_h,
    )
}

/// Inverse of [`box_from_normalized`].
pub fn box_to_normalized(b: &BoxXYXY, img_w: f64, img_h: f64) -> Result<BoxCXCYWHNorm, GeometryError> {
    check_image_size(img_w, img_h)?;
    BoxCXCYWHNorm::new(
        (b.x1 + b.x2) / 2.0 / img_w,
        (b.y1 + b.y2) / 2.0 / img_h,
        b.width() / img_w,
        b.height() / img_h,
    )
}

pub fn box_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    raw_box_iou(a.to_array(), b.to_array())
}

/// IoU of two `[x1, y1, x2, y2]` arrays; degenerate boxes yield 0.
pub fn raw_box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn clip_box(b: &BoxXYXY, img_w: f64, img_h: f64) -> Result<BoxXYXY, GeometryError> {
    check_image_size(img_w, img_h)?;
    let x1 = b.x1.clamp(0.0, img_w);
    let y1 = b.y1.clamp(0.0, img_h);
    let x2 = b.x2.clamp(0.0, img_w);
    let y2 = b.y2.clamp(0.0, img_h);
    BoxXYXY::new(x1, y1, x2, y2).map_err(|_| GeometryError::EmptyAfterClip {
        width: img_w,
        height: img_h,
    })
}

/// Greedy NMS returning the indices of the kept detections in descending score order.
///
/// Ties in score keep input order. A candidate is suppressed when its IoU with an
/// already kept box exceeds `iou_thresh`; with `class_aware` only boxes sharing a
/// phrase (case-insensitive) suppress each other.
pub fn nms_indices(dets: &[ScoredBox], iou_thresh: f64, class_aware: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let keys: Vec<String> = if class_aware {
        dets.iter().map(|d| d.phrase.trim().to_lowercase()).collect()
    } else {
        Vec::new()
    };
    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            (!class_aware || keys[i] == keys[k])
                && box_iou(&dets[i].bbox, &dets[k].bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[ScoredBox], iou_thresh: f64, class_aware: bool) -> Vec<ScoredBox> {
    nms_indices(dets, iou_thresh, class_aware)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}
