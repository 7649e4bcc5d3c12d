//! Dataset persistence: COCO import/export and review verdicts.

pub mod coco;
pub mod review;

use std::path::PathBuf;

use thiserror::Error;

use crate::mask::MaskError;

pub use coco::{export_coco, import_coco, CocoAnnotation, CocoCategory, CocoDocument, CocoInfo, ImageRecord};
pub use review::{filtered_export, ReviewVerdict, Verdict, VerdictStore};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("annotation references unknown image {0}")]
    UnknownImage(u64),
    #[error("annotation {annotation} references missing image_id {image}")]
    DanglingImage { annotation: u64, image: u64 },
    #[error("annotation {annotation} references missing category_id {category}")]
    DanglingCategory { annotation: u64, category: u64 },
    #[error("annotation {annotation}: {source}")]
    MalformedRle { annotation: u64, source: MaskError },
    #[error("annotation {0} has a negative or non-finite bbox")]
    NegativeBbox(u64),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("duplicate category name '{0}'")]
    DuplicateCategory(String),
    #[error("inconsistent document: {0}")]
    Inconsistent(String),
    #[error("verdict for unknown annotation {0}")]
    UnknownAnnotation(u64),
    #[error("{what}: {message}")]
    Parse { what: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
