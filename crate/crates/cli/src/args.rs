use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use groundseg_core::backend::{BackendEndpoint, Capability, RemoteBackend};
use groundseg_core::GroundedSamConfig;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "groundseg", version, about = "Open-vocabulary detection, segmentation and dataset tooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect and segment images into a COCO document.
    Annotate(AnnotateArgs),
    /// Score predictions against ground truth, or average a suite table.
    Evaluate(EvaluateArgs),
    /// Replace or remove objects named by text.
    Edit(EditArgs),
    /// Serve fixture-backed mock models over the backend wire protocol.
    MockBackend(MockBackendArgs),
    /// Run the pipeline and review service.
    Serve(ServeArgs),
    /// Write a synthetic scene suite and its ground truth.
    GenFixtures(GenFixturesArgs),
    /// Type-check a pipeline description.
    ValidatePipeline(ValidatePipelineArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Base URL serving every capability route.
    #[arg(long, env = "GROUNDSEG_BACKEND")]
    pub backend: Option<String>,
    /// Per-capability base URL, e.g. `segmenter=http://host:9000`. Overrides --backend.
    #[arg(long = "endpoint", value_name = "CAPABILITY=URL")]
    pub endpoints: Vec<String>,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 100)]
    pub backoff_ms: u64,
}

impl BackendArgs {
    pub fn build(&self) -> Result<RemoteBackend, CliError> {
        let mut endpoints: std::collections::BTreeMap<Capability, String> = std::collections::BTreeMap::new();
        if let Some(url) = &self.backend {
            for c in Capability::ALL {
                endpoints.insert(c, url.clone());
            }
        }
        for spec in &self.endpoints {
            let (cap, url) = spec
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--endpoint '{spec}' must be CAPABILITY=URL")))?;
            let cap: Capability = cap.parse().map_err(CliError::Usage)?;
            endpoints.insert(cap, url.to_string());
        }
        if endpoints.is_empty() {
            return Err(CliError::Usage("no backend configured: pass --backend URL or --endpoint".into()));
        }
        let list = endpoints
            .into_iter()
            .map(|(capability, base_url)| {
                let e = BackendEndpoint {
                    capability,
                    base_url,
                    timeout_ms: self.timeout_ms,
                    max_retries: self.max_retries,
                    backoff_base_ms: self.backoff_ms,
                };
                e.validate().map_err(|err| CliError::Usage(err.to_string()))?;
                Ok(e)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(RemoteBackend::new(list))
    }
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = 0.30)]
    pub box_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nms_iou: f64,
    /// Keep overlapping detections.
    #[arg(long)]
    pub no_nms: bool,
    /// Let detections of different phrases suppress each other.
    #[arg(long)]
    pub class_agnostic_nms: bool,
    #[arg(long, default_value_t = 100)]
    pub max_detections: usize,
}

impl ThresholdArgs {
    pub fn config(&self) -> Result<GroundedSamConfig, CliError> {
        let cfg = GroundedSamConfig {
            box_threshold: self.box_threshold,
            nms_iou: self.nms_iou,
            nms_enabled: !self.no_nms,
            class_aware_nms: !self.class_agnostic_nms,
            max_detections: self.max_detections,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Tags,
    Caption,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("inputs").required(true).args(["fixtures", "images"])))]
#[command(group(ArgGroup::new("mode").required(true).args(["phrases", "auto"])))]
pub struct AnnotateArgs {
    /// Directory of `*.scene.json` fixtures; images are referenced by scene id.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// PNG files, numbered 1.. in argument order.
    #[arg(long = "image", value_name = "PNG")]
    pub images: Vec<PathBuf>,
    /// Comma-separated phrases to ground in every image.
    #[arg(long, value_delimiter = ',')]
    pub phrases: Vec<String>,
    /// Take phrases from a tagger or captioner instead.
    #[arg(long)]
    pub auto: bool,
    #[arg(long, value_enum, default_value_t = SourceArg::Tags)]
    pub source: SourceArg,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    /// Worker threads; 0 uses every logical CPU.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Skip images whose backend calls fail.
    #[arg(long)]
    pub continue_on_error: bool,
    /// Seed recorded in provenance.
    #[arg(long)]
    pub seed: Option<u64>,
    /// RFC 3339 provenance timestamp (default: SOURCE_DATE_EPOCH, else now).
    #[arg(long)]
    pub timestamp: Option<String>,
    /// Also write skipped images to this JSON file.
    #[arg(long)]
    pub failures: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IouKindArg {
    Mask,
    Box,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("what").required(true).args(["pred", "suite"])))]
pub struct EvaluateArgs {
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Suite table (datasets plus per-row scores in percent) to average.
    #[arg(long, conflicts_with_all = ["pred", "gt"])]
    pub suite: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = IouKindArg::Mask)]
    pub iou_kind: IouKindArg,
    /// Dataset column name.
    #[arg(long, default_value = "dataset")]
    pub name: String,
    /// Row label.
    #[arg(long, default_value = "predictions")]
    pub label: String,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Replace,
    Remove,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("inputs").required(true).args(["scene", "image"])))]
pub struct EditArgs {
    /// Fixture directory holding --scene.
    #[arg(long, requires = "scene")]
    pub fixtures: Option<PathBuf>,
    #[arg(long, requires = "fixtures")]
    pub scene: Option<String>,
    /// PNG to edit (sent to backends as raw RGB).
    #[arg(long, value_name = "PNG")]
    pub image: Option<PathBuf>,
    /// Phrase naming what to edit; repeatable.
    #[arg(long = "target", required = true)]
    pub targets: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Replace)]
    pub mode: ModeArg,
    /// Replacement description (replace mode).
    #[arg(long)]
    pub prompt: Option<String>,
    /// Edit only the highest-scoring match.
    #[arg(long)]
    pub top_only: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[arg(long)]
    pub timestamp: Option<String>,
    /// Write the edit report (matches, region) as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Output PNG.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MockBackendArgs {
    #[arg(long, alias = "fixtures")]
    pub scenes: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 0)]
    pub port: u16,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub jitter_px: f64,
    #[arg(long, default_value_t = 0)]
    pub drop_per_scene: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// JSON service configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, env = "GROUNDSEG_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "GROUNDSEG_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenFixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("spec").required(true).args(["file", "builtin"])))]
pub struct ValidatePipelineArgs {
    /// Pipeline description (JSON).
    pub file: Option<PathBuf>,
    /// One of the built-in pipeline names.
    #[arg(long)]
    pub builtin: Option<String>,
}
