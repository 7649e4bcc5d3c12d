//! Open-vocabulary detect-then-segment pipelines over remote model backends.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] and [`mask`] hold box arithmetic and the COCO RLE codec;
//! * [`backend`] defines one trait per model capability, the JSON wire
//!   protocol, a retrying HTTP client and fixture-driven mocks;
//! * [`pipeline`] type-checks stage compositions and runs the built-in
//!   pipelines (detect+segment, auto-annotation, inpainting, mesh);
//! * [`store`] reads and writes COCO documents and review verdicts;
//! * [`eval`] computes COCO-style mask/box AP and suite means.

pub mod backend;
pub mod eval;
pub mod geometry;
pub mod mask;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod pipeline;
pub mod store;

pub use geometry::{box_iou, clip_box, nms, BoxXYXY, ScoredBox};
pub use mask::{bbox_from_mask, mask_area, mask_iou, rle_decode, rle_encode, BinaryMask, Bitmap};
pub use pipeline::{GroundedSamConfig, InstanceAnnotation, Provenance};
pub use store::CocoDocument;
