//! COCO instance-segmentation documents with uncompressed RLE masks.
//!
//! Two nonstandard annotation fields are written: `score` (prediction
//! confidence) and `detection_box` (the detector's `[x1, y1, x2, y2]` box).
//! Both are optional on import.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::geometry::BoxXYXY;
use crate::mask::{bbox_from_mask, mask_area, BinaryMask, RleRecord};
use crate::pipeline::{InstanceAnnotation, Provenance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub segmentation: RleRecord,
    pub area: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_box: Option<[f64; 4]>,
}

/// Summary of the review filter that produced a document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewNote {
    pub accepted: usize,
    pub rejected: usize,
    pub relabeled: usize,
    pub unreviewed_kept: usize,
    pub unreviewed_dropped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewNote>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
    #[serde(default)]
    pub info: CocoInfo,
}

impl CocoDocument {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("COCO documents always serialize") + "\n"
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    pub fn annotation_ids(&self) -> BTreeSet<u64> {
        self.annotations.iter().map(|a| a.id).collect()
    }

    /// Checks referential integrity and mask/box consistency.
    pub fn validate(&self) -> Result<(), StoreError> {
        let mut images = HashMap::new();
        for img in &self.images {
            if images.insert(img.id, img).is_some() {
                return Err(StoreError::DuplicateId(format!("image {}", img.id)));
            }
        }
        let mut cat_ids = BTreeSet::new();
        let mut cat_names = BTreeSet::new();
        for c in &self.categories {
            if !cat_ids.insert(c.id) {
                return Err(StoreError::DuplicateId(format!("category {}", c.id)));
            }
            if !cat_names.insert(c.name.as_str()) {
                return Err(StoreError::DuplicateCategory(c.name.clone()));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(StoreError::DuplicateId(format!("annotation {}", a.id)));
            }
            let img = images.get(&a.image_id).ok_or(StoreError::DanglingImage {
                annotation: a.id,
                image: a.image_id,
            })?;
            if !cat_ids.contains(&a.category_id) {
                return Err(StoreError::DanglingCategory {
                    annotation: a.id,
                    category: a.category_id,
                });
            }
            let mask = decode_segmentation(a)?;
            if mask.height() != img.height || mask.width() != img.width {
                return Err(StoreError::Inconsistent(format!(
                    "annotation {} mask is {}x{} but image {} is {}x{}",
                    a.id,
                    mask.height(),
                    mask.width(),
                    img.id,
                    img.height,
                    img.width
                )));
            }
            if a.bbox.iter().any(|v| !v.is_finite()) || a.bbox[2] < 0.0 || a.bbox[3] < 0.0 {
                return Err(StoreError::NegativeBbox(a.id));
            }
            if a.area != mask_area(&mask) {
                return Err(StoreError::Inconsistent(format!(
                    "annotation {} area {} differs from mask area {}",
                    a.id,
                    a.area,
                    mask_area(&mask)
                )));
            }
            if let Some(tight) = bbox_from_mask(&mask) {
                let t = tight.to_xywh();
                let off = (0..4).map(|i| (t[i] - a.bbox[i]).abs()).fold(0.0, f64::max);
                if off > 1.0 {
                    return Err(StoreError::Inconsistent(format!(
                        "annotation {} bbox {:?} is more than 1 px from its mask box {:?}",
                        a.id, a.bbox, t
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn decode_segmentation(a: &CocoAnnotation) -> Result<BinaryMask, StoreError> {
    BinaryMask::try_from(a.segmentation.clone()).map_err(|source| StoreError::MalformedRle {
        annotation: a.id,
        source,
    })
}

/// Builds a document: one category per distinct phrase (ids 1.. in
/// lexicographic order), annotations numbered 1.. in (image id, descending
/// score) order, images sorted by id.
pub fn export_coco(
    annotations: &[InstanceAnnotation],
    images: &[ImageRecord],
    provenance: &Provenance,
) -> Result<CocoDocument, StoreError> {
    let mut images = images.to_vec();
    images.sort_by_key(|i| i.id);
    let known: BTreeSet<u64> = images.iter().map(|i| i.id).collect();

    let names: BTreeSet<&str> = annotations.iter().map(|a| a.phrase.as_str()).collect();
    let categories: Vec<CocoCategory> = names
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory {
            id: i as u64 + 1,
            name: n.to_string(),
        })
        .collect();
    let cat_id: BTreeMap<&str, u64> = categories.iter().map(|c| (c.name.as_str(), c.id)).collect();

    let mut order: Vec<&InstanceAnnotation> = annotations.iter().collect();
    order.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(b.score.total_cmp(&a.score)));

    let mut out = Vec::with_capacity(order.len());
    for (i, a) in order.into_iter().enumerate() {
        if !known.contains(&a.image_id) {
            return Err(StoreError::UnknownImage(a.image_id));
        }
        let bbox = bbox_from_mask(&a.mask).unwrap_or(a.bbox).to_xywh();
        out.push(CocoAnnotation {
            id: i as u64 + 1,
            image_id: a.image_id,
            category_id: cat_id[a.phrase.as_str()],
            bbox,
            segmentation: RleRecord::from(&a.mask),
            area: mask_area(&a.mask),
            score: Some(a.score),
            iscrowd: 0,
            detection_box: Some(a.bbox.to_array()),
        });
    }

    Ok(CocoDocument {
        images,
        annotations: out,
        categories,
        info: CocoInfo {
            description: None,
            provenance: Some(provenance.clone()),
            review: None,
        },
    })
}

/// Reads annotations back in document order.
pub fn import_coco(doc: &CocoDocument) -> Result<(Vec<InstanceAnnotation>, Vec<ImageRecord>), StoreError> {
    doc.validate()?;
    let provenance = doc.info.provenance.clone().unwrap_or_default();
    let annotations = doc
        .annotations
        .iter()
        .map(|a| {
            let mask = decode_segmentation(a)?;
            let raw = match a.detection_box {
                Some(b) => BoxXYXY::try_from(b),
                None => BoxXYXY::from_xywh(a.bbox),
            };
            let bbox = raw.map_err(|e| StoreError::Inconsistent(format!("annotation {}: {e}", a.id)))?;
            let score = a.score.unwrap_or(1.0);
            if !(0.0..=1.0).contains(&score) {
                return Err(StoreError::Inconsistent(format!(
                    "annotation {} score {score} outside [0, 1]",
                    a.id
                )));
            }
            Ok(InstanceAnnotation {
                image_id: a.image_id,
                phrase: doc
                    .category_name(a.category_id)
                    .expect("validated category reference")
                    .to_string(),
                bbox,
                mask,
                score,
                provenance: provenance.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((annotations, doc.images.clone()))
}
