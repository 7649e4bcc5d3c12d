//! Stage composition and the built-in detect/segment pipelines.

pub mod run;
pub mod typing;

use std::collections::BTreeMap;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Capability};
use crate::geometry::BoxXYXY;
use crate::mask::BinaryMask;
use crate::store::StoreError;

pub use run::{
    phrases_from_caption, run_auto_annotate, run_grounded_inpaint, run_grounded_sam, run_promptable_mesh,
    AutoAnnotateOptions, AutoAnnotateOutput, EditMode, EditOutcome, EditReport, ImageFailure, MeshPair, PhraseSource,
};
pub use typing::{
    binding_mutations, builtin_pipeline, registry_tasks, validate_pipeline, Binding, BindingMutation, Modality,
    PipelineSpec, PipelineTypeError, Port, PortRef, StageSpec, TypedPlan, BUILTIN_PIPELINES,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundedSamConfig {
    pub box_threshold: f64,
    pub nms_iou: f64,
    pub nms_enabled: bool,
    pub class_aware_nms: bool,
    pub max_detections: usize,
}

impl Default for GroundedSamConfig {
    fn default() -> Self {
        Self {
            box_threshold: 0.30,
            nms_iou: 0.5,
            nms_enabled: true,
            class_aware_nms: true,
            max_detections: 100,
        }
    }
}

impl GroundedSamConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [("box_threshold", self.box_threshold), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::InvalidConfig(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.max_detections == 0 {
            return Err(PipelineError::InvalidConfig("max_detections must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where an annotation came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pipeline: String,
    /// Capability name -> backend identity.
    pub backends: BTreeMap<String, String>,
    pub config: GroundedSamConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub timestamp: String,
}

/// Per-run settings that are not thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    pub seed: Option<u64>,
    pub timestamp: DateTime<Utc>,
}

impl RunContext {
    pub fn new(seed: Option<u64>, timestamp: DateTime<Utc>) -> Self {
        Self { seed, timestamp }
    }

    pub fn now() -> Self {
        Self::new(None, Utc::now())
    }

    /// Provenance block for a run of `pipeline` with the given backend identities.
    pub fn provenance(&self, pipeline: &str, cfg: &GroundedSamConfig, backends: &[(Capability, String)]) -> Provenance {
        Provenance {
            pipeline: pipeline.to_string(),
            backends: backends.iter().map(|(c, id)| (c.as_str().to_string(), id.clone())).collect(),
            config: *cfg,
            seed: self.seed,
            timestamp: self.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub image_id: u64,
    pub phrase: String,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub mask: BinaryMask,
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{stage} failed on image {image_id}: {source}")]
    Backend {
        stage: Capability,
        image_id: u64,
        source: BackendError,
    },
    #[error("no instance matched {phrases:?}")]
    TargetNotFound { phrases: Vec<String> },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PipelineError {
    pub(crate) fn backend(stage: Capability, image_id: u64) -> impl FnOnce(BackendError) -> PipelineError {
        move |source| PipelineError::Backend {
            stage,
            image_id,
            source,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::InvalidInput(_) => "invalid-input",
            PipelineError::InvalidConfig(_) => "invalid-config",
            PipelineError::Backend { source, .. } => source.code(),
            PipelineError::TargetNotFound { .. } => "target-not-found",
            PipelineError::Store(_) => "store-error",
        }
    }
}
