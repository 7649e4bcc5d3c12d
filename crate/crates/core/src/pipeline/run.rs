//! The four concrete pipelines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GroundedSamConfig, InstanceAnnotation, PipelineError, Provenance, RunContext};
use crate::backend::wire::{check_mask_count, check_mask_size};
use crate::backend::{Backends, Capability, Detector, ImagePayload, MeshParams, Segmenter, TagSet};
use crate::geometry::{clip_box, nms, ScoredBox};
use crate::mask::{mask_area, BinaryMask};
use crate::store::{export_coco, CocoDocument, ImageRecord};

pub fn run_grounded_sam(
    image: &ImagePayload,
    phrases: &[String],
    cfg: &GroundedSamConfig,
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    ctx: &RunContext,
) -> Result<Vec<InstanceAnnotation>, PipelineError> {
    let provenance = ctx.provenance(
        "grounded-sam",
        cfg,
        &[
            (Capability::Detector, detector.identity()),
            (Capability::Segmenter, segmenter.identity()),
        ],
    );
    grounded_sam(image, phrases, cfg, detector, segmenter, &provenance)
}

fn check_phrase_list(phrases: &[String]) -> Result<(), PipelineError> {
    if phrases.is_empty() || phrases.iter().any(|p| p.trim().is_empty()) {
        return Err(PipelineError::InvalidInput("phrases must be a non-empty list of non-blank text".into()));
    }
    Ok(())
}

fn grounded_sam(
    image: &ImagePayload,
    phrases: &[String],
    cfg: &GroundedSamConfig,
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    provenance: &Provenance,
) -> Result<Vec<InstanceAnnotation>, PipelineError> {
    cfg.validate()?;
    check_phrase_list(phrases)?;
    let id = image.image_id;
    let (w, h) = (image.width as f64, image.height as f64);

    let raw = detector
        .detect(image, phrases, cfg.box_threshold)
        .map_err(PipelineError::backend(Capability::Detector, id))?;
    let clipped: Vec<ScoredBox> = raw
        .into_iter()
        .filter(|d| d.score >= cfg.box_threshold)
        .filter_map(|d| {
            clip_box(&d.bbox, w, h).ok().map(|bbox| ScoredBox { bbox, ..d })
        })
        .collect();
    let mut kept = if cfg.nms_enabled {
        nms(&clipped, cfg.nms_iou, cfg.class_aware_nms)
    } else {
        let mut v = clipped;
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v
    };
    kept.truncate(cfg.max_detections);
    if kept.is_empty() {
        return Ok(Vec::new());
    }

    let prompts: Vec<_> = kept.iter().map(|d| d.bbox).collect();
    let masks = segmenter
        .segment(image, &prompts)
        .and_then(|masks| {
            check_mask_count(masks.len(), prompts.len())?;
            masks.iter().try_for_each(|m| check_mask_size(m, image))?;
            Ok(masks)
        })
        .map_err(PipelineError::backend(Capability::Segmenter, id))?;

    Ok(kept
        .into_iter()
        .zip(masks)
        .map(|(d, mask)| InstanceAnnotation {
            image_id: id,
            phrase: d.phrase,
            bbox: d.bbox,
            mask,
            score: d.score,
            provenance: provenance.clone(),
        })
        .collect())
}

/// Where batch annotation gets each image's phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseSource {
    Tags,
    Caption,
    /// The same fixed phrases for every image.
    Phrases(Vec<String>),
}

/// Splits a caption of the form "a photo of x and y" into phrases.
pub fn phrases_from_caption(caption: &str) -> Vec<String> {
    let text = caption.trim().to_lowercase();
    let body = text
        .strip_prefix("a photo of")
        .or_else(|| text.strip_prefix("a photo"))
        .unwrap_or(&text);
    TagSet::new(body.split(" and ")).labels().to_vec()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoAnnotateOptions {
    pub continue_on_error: bool,
    /// Worker threads; 0 means one per logical CPU.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: u64,
    pub stage: String,
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoAnnotateOutput {
    pub document: CocoDocument,
    pub failures: Vec<ImageFailure>,
}

pub fn run_auto_annotate(
    images: &[ImagePayload],
    source: PhraseSource,
    cfg: &GroundedSamConfig,
    backends: &Backends,
    opts: &AutoAnnotateOptions,
    ctx: &RunContext,
) -> Result<AutoAnnotateOutput, PipelineError> {
    if images.is_empty() {
        return Err(PipelineError::InvalidInput("at least one image is required".into()));
    }
    cfg.validate()?;
    let mut ordered: Vec<&ImagePayload> = images.iter().collect();
    ordered.sort_by_key(|i| i.image_id);
    if ordered.windows(2).any(|w| w[0].image_id == w[1].image_id) {
        return Err(PipelineError::InvalidInput("image ids must be unique".into()));
    }

    let mut ids = vec![
        (Capability::Detector, backends.detector.identity()),
        (Capability::Segmenter, backends.segmenter.identity()),
    ];
    let pipeline = match &source {
        PhraseSource::Tags => {
            ids.push((Capability::Tagger, backends.tagger.identity()));
            "auto-annotate"
        }
        PhraseSource::Caption => {
            ids.push((Capability::Captioner, backends.captioner.identity()));
            "auto-annotate"
        }
        PhraseSource::Phrases(p) => {
            check_phrase_list(p)?;
            "grounded-sam"
        }
    };
    let provenance = ctx.provenance(pipeline, cfg, &ids);

    let one = |image: &ImagePayload| -> Result<Vec<InstanceAnnotation>, PipelineError> {
        let id = image.image_id;
        let phrases = match &source {
            PhraseSource::Tags => backends
                .tagger
                .tag(image)
                .map_err(PipelineError::backend(Capability::Tagger, id))?
                .labels()
                .to_vec(),
            PhraseSource::Caption => {
                let c = backends
                    .captioner
                    .caption(image)
                    .map_err(PipelineError::backend(Capability::Captioner, id))?;
                phrases_from_caption(&c.0)
            }
            PhraseSource::Phrases(p) => p.clone(),
        };
        if phrases.is_empty() {
            return Ok(Vec::new());
        }
        grounded_sam(image, &phrases, cfg, backends.detector.as_ref(), backends.segmenter.as_ref(), &provenance)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| PipelineError::InvalidConfig(format!("worker pool: {e}")))?;
    // par_iter + collect keeps input order, which is image-id order here.
    let results: Vec<_> = pool.install(|| ordered.par_iter().map(|img| one(img)).collect());

    let mut annotations = Vec::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (image, result) in ordered.iter().zip(results) {
        match result {
            Ok(anns) => {
                records.push(ImageRecord {
                    id: image.image_id,
                    width: image.width,
                    height: image.height,
                    file_name: image.file_name(),
                });
                annotations.extend(anns);
            }
            Err(e) if opts.continue_on_error => {
                let stage = match &e {
                    PipelineError::Backend { stage, .. } => stage.as_str().to_string(),
                    _ => "pipeline".to_string(),
                };
                tracing::warn!(image_id = image.image_id, error = %e, "image skipped");
                failures.push(ImageFailure {
                    image_id: image.image_id,
                    stage,
                    error: e.code().to_string(),
                    message: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }

    let document = export_coco(&annotations, &records, &provenance)?;
    Ok(AutoAnnotateOutput { document, failures })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "prompt")]
pub enum EditMode {
    Replace(String),
    Remove,
}

impl EditMode {
    pub fn prompt(&self) -> &str {
        match self {
            EditMode::Replace(p) => p,
            EditMode::Remove => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub matched: Vec<InstanceAnnotation>,
    pub region: BinaryMask,
    pub region_area: u64,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub image: ImagePayload,
    pub report: EditReport,
}

pub fn run_grounded_inpaint(
    image: &ImagePayload,
    targets: &[String],
    mode: &EditMode,
    top_only: bool,
    cfg: &GroundedSamConfig,
    backends: &Backends,
    ctx: &RunContext,
) -> Result<EditOutcome, PipelineError> {
    check_phrase_list(targets)?;
    if let EditMode::Replace(p) = mode {
        if p.trim().is_empty() {
            return Err(PipelineError::InvalidInput("replacement prompt must not be blank".into()));
        }
    }
    let provenance = ctx.provenance(
        "grounded-inpaint",
        cfg,
        &[
            (Capability::Detector, backends.detector.identity()),
            (Capability::Segmenter, backends.segmenter.identity()),
            (Capability::Inpainter, backends.inpainter.identity()),
        ],
    );
    let mut matched = grounded_sam(
        image,
        targets,
        cfg,
        backends.detector.as_ref(),
        backends.segmenter.as_ref(),
        &provenance,
    )?;
    if matched.is_empty() {
        return Err(PipelineError::TargetNotFound {
            phrases: targets.to_vec(),
        });
    }
    if top_only {
        matched.truncate(1);
    }

    let mut region = BinaryMask::empty(image.height, image.width).expect("payload dimensions are positive");
    for a in &matched {
        region = region
            .union(&a.mask)
            .expect("segmenter masks were checked against the image size");
    }
    let prompt = mode.prompt().to_string();
    let edited = backends
        .inpainter
        .inpaint(image, &region, &prompt)
        .map_err(PipelineError::backend(Capability::Inpainter, image.image_id))?;
    if edited.width != image.width || edited.height != image.height {
        return Err(PipelineError::backend(Capability::Inpainter, image.image_id)(
            crate::backend::BackendError::DimensionMismatch(format!(
                "inpainter returned {}x{} for a {}x{} image",
                edited.width, edited.height, image.width, image.height
            )),
        ));
    }

    Ok(EditOutcome {
        image: edited,
        report: EditReport {
            matched,
            region_area: mask_area(&region),
            region,
            prompt,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshPair {
    pub annotation: InstanceAnnotation,
    pub mesh: MeshParams,
}

pub fn run_promptable_mesh(
    image: &ImagePayload,
    person_phrase: &str,
    cfg: &GroundedSamConfig,
    backends: &Backends,
    ctx: &RunContext,
) -> Result<Vec<MeshPair>, PipelineError> {
    let phrases = vec![person_phrase.to_string()];
    check_phrase_list(&phrases)?;
    let provenance = ctx.provenance(
        "promptable-mesh",
        cfg,
        &[
            (Capability::Detector, backends.detector.identity()),
            (Capability::Segmenter, backends.segmenter.identity()),
            (Capability::MeshRecoverer, backends.mesh.identity()),
        ],
    );
    let found = grounded_sam(
        image,
        &phrases,
        cfg,
        backends.detector.as_ref(),
        backends.segmenter.as_ref(),
        &provenance,
    )?;
    if found.is_empty() {
        return Err(PipelineError::TargetNotFound { phrases });
    }
    found
        .into_iter()
        .map(|annotation| {
            let mesh = backends
                .mesh
                .recover_mesh(image, &annotation.bbox)
                .map_err(PipelineError::backend(Capability::MeshRecoverer, image.image_id))?;
            Ok(MeshPair { annotation, mesh })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use chrono::TimeZone;

    use super::*;
    use crate::backend::fixture::generate_scenes;
    use std::collections::BTreeSet;

    use crate::backend::{BackendError, FixtureObject, FixtureScene, MockBackend, MockConfig};
    use crate::geometry::{box_iou, BoxXYXY};
    use crate::mask::{mask_iou, rle_decode};

    fn ctx() -> RunContext {
        RunContext::new(Some(7), chrono::Utc.with_ymd_and_hms(2024, 1, 2, 3, 4, 5).unwrap())
    }

    fn object(label: &str, b: [f64; 4], score: f64, w: u32, h: u32) -> FixtureObject {
        let bbox = BoxXYXY::try_from(b).unwrap();
        FixtureObject {
            label: label.into(),
            bbox,
            mask: BinaryMask::from_box(&bbox, h, w).unwrap(),
            detect_score: score,
        }
    }

    fn two_cats() -> FixtureScene {
        FixtureScene {
            scene_id: "cats".into(),
            width: 40,
            height: 30,
            objects: vec![
                object("cat", [2.0, 2.0, 12.0, 10.0], 0.9, 40, 30),
                object("cat", [20.0, 5.0, 30.0, 25.0], 0.8, 40, 30),
                object("dog", [14.0, 14.0, 19.0, 29.0], 0.7, 40, 30),
            ],
        }
    }

    fn labels(scene: &FixtureScene) -> Vec<String> {
        TagSet::new(scene.objects.iter().map(|o| o.label.as_str())).labels().to_vec()
    }

    #[test]
    fn noiseless_mock_reproduces_fixture() {
        for scene in generate_scenes(4, 3, 3) {
            let mock = MockBackend::new([scene.clone()], MockConfig::default());
            let out = run_grounded_sam(&scene.payload(1), &labels(&scene), &GroundedSamConfig::default(), &mock, &mock, &ctx())
                .unwrap();
            let expected = scene.objects.iter().filter(|o| o.detect_score >= 0.30).count();
            assert_eq!(out.len(), expected);
            assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
            for a in &out {
                let o = scene
                    .objects
                    .iter()
                    .find(|o| o.label == a.phrase && o.bbox == a.bbox)
                    .expect("annotation matches a fixture object");
                assert_eq!(mask_iou(&a.mask, &o.mask).unwrap(), 1.0);
                assert_eq!(a.provenance.pipeline, "grounded-sam");
            }
        }
    }

    #[test]
    fn unmatched_phrases_give_empty_list() {
        let scene = two_cats();
        let mock = MockBackend::new([scene.clone()], MockConfig::default());
        let out = run_grounded_sam(&scene.payload(1), &["unicorn".into()], &GroundedSamConfig::default(), &mock, &mock, &ctx())
            .unwrap();
        assert!(out.is_empty());
        assert!(matches!(
            run_grounded_sam(&scene.payload(1), &[], &GroundedSamConfig::default(), &mock, &mock, &ctx()),
            Err(PipelineError::InvalidInput(_))
        ));
    }

    struct Scripted {
        dets: Vec<ScoredBox>,
        extra_mask: bool,
        segment_calls: AtomicUsize,
    }

    impl Detector for Scripted {
        fn detect(&self, _: &ImagePayload, _: &[String], _: f64) -> Result<Vec<ScoredBox>, BackendError> {
            Ok(self.dets.clone())
        }
        fn identity(&self) -> String {
            "scripted".into()
        }
    }

    impl Segmenter for Scripted {
        fn segment(&self, image: &ImagePayload, prompts: &[BoxXYXY]) -> Result<Vec<BinaryMask>, BackendError> {
            self.segment_calls.fetch_add(1, Ordering::SeqCst);
            let mut out: Vec<_> = prompts
                .iter()
                .map(|b| BinaryMask::from_box(b, image.height, image.width).unwrap())
                .collect();
            if self.extra_mask {
                out.push(BinaryMask::empty(image.height, image.width).unwrap());
            }
            Ok(out)
        }
        fn identity(&self) -> String {
            "scripted".into()
        }
    }

    fn scripted(dets: Vec<ScoredBox>, extra_mask: bool) -> Scripted {
        Scripted {
            dets,
            extra_mask,
            segment_calls: AtomicUsize::new(0),
        }
    }

    fn sb(b: [f64; 4], phrase: &str, score: f64) -> ScoredBox {
        ScoredBox::new(BoxXYXY::try_from(b).unwrap(), phrase, score).unwrap()
    }

    #[test]
    fn duplicate_detections_collapse_under_nms() {
        let s = scripted(vec![sb([1.0, 1.0, 9.0, 9.0], "cat", 0.8), sb([1.0, 1.0, 9.0, 9.0], "cat", 0.7)], false);
        let img = ImagePayload::scene(1, 20, 20, "x");
        let out = run_grounded_sam(&img, &["cat".into()], &GroundedSamConfig::default(), &s, &s, &ctx()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.8);
        let cfg = GroundedSamConfig {
            nms_enabled: false,
            ..Default::default()
        };
        assert_eq!(run_grounded_sam(&img, &["cat".into()], &cfg, &s, &s, &ctx()).unwrap().len(), 2);
    }

    #[test]
    fn clipping_thresholds_and_truncation() {
        let s = scripted(
            vec![
                sb([-5.0, -5.0, 4.0, 4.0], "a", 0.5),
                sb([25.0, 25.0, 30.0, 30.0], "b", 0.9),
                sb([10.0, 10.0, 15.0, 15.0], "c", 0.2),
                sb([5.0, 5.0, 15.0, 15.0], "d", 0.6),
            ],
            false,
        );
        let img = ImagePayload::scene(1, 20, 20, "x");
        let cfg = GroundedSamConfig {
            max_detections: 1,
            ..Default::default()
        };
        let out = run_grounded_sam(&img, &["a".into()], &cfg, &s, &s, &ctx()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].phrase, "d");
        let out = run_grounded_sam(&img, &["a".into()], &GroundedSamConfig::default(), &s, &s, &ctx()).unwrap();
        let phrases: Vec<_> = out.iter().map(|a| a.phrase.as_str()).collect();
        assert_eq!(phrases, ["d", "a"]);
        assert_eq!(out[1].bbox.to_array(), [0.0, 0.0, 4.0, 4.0]);
    }

    #[test]
    fn segmenter_count_mismatch_aborts() {
        let s = scripted(vec![sb([1.0, 1.0, 9.0, 9.0], "cat", 0.8)], true);
        let img = ImagePayload::scene(1, 20, 20, "x");
        let err = run_grounded_sam(&img, &["cat".into()], &GroundedSamConfig::default(), &s, &s, &ctx()).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Backend {
                stage: Capability::Segmenter,
                source: BackendError::ProtocolViolation(_),
                ..
            }
        ));
    }

    #[test]
    fn no_detections_skip_segmenter() {
        let s = scripted(vec![], false);
        let img = ImagePayload::scene(1, 20, 20, "x");
        assert!(run_grounded_sam(&img, &["cat".into()], &GroundedSamConfig::default(), &s, &s, &ctx())
            .unwrap()
            .is_empty());
        assert_eq!(s.segment_calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn caption_phrases() {
        assert_eq!(phrases_from_caption("a photo of cat and dog"), vec!["cat", "dog"]);
        assert_eq!(phrases_from_caption("a photo"), Vec::<String>::new());
        assert_eq!(
            phrases_from_caption("A photo of person with pink clothes and cat and cat"),
            vec!["cat", "person with pink clothes"]
        );
    }

    fn mock_backends(scenes: Vec<FixtureScene>, config: MockConfig) -> Backends {
        Backends::uniform(Arc::new(MockBackend::new(scenes, config)))
    }

    #[test]
    fn auto_annotate_matches_fixture_for_both_sources() {
        let scenes = generate_scenes(2, 3, 21);
        let backends = mock_backends(scenes.clone(), MockConfig::default());
        let images = crate::backend::fixture::suite_payloads(&scenes);
        let cfg = GroundedSamConfig {
            box_threshold: 0.0,
            ..Default::default()
        };
        for source in [PhraseSource::Tags, PhraseSource::Caption] {
            let out = run_auto_annotate(&images, source.clone(), &cfg, &backends, &AutoAnnotateOptions::default(), &ctx()).unwrap();
            assert!(out.failures.is_empty());
            let doc = &out.document;
            let all: BTreeSet<String> = scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.label.clone())).collect();
            let cats: BTreeSet<String> = doc.categories.iter().map(|c| c.name.clone()).collect();
            assert_eq!(cats, all);
            let total: usize = scenes.iter().map(|s| s.objects.len()).sum();
            assert_eq!(doc.annotations.len(), total);
            for (img, scene) in images.iter().zip(&scenes) {
                for o in &scene.objects {
                    assert!(doc.annotations.iter().any(|a| a.image_id == img.image_id
                        && doc.category_name(a.category_id) == Some(o.label.as_str())
                        && a.detection_box == Some(o.bbox.to_array())
                        && a.segmentation.counts == o.mask.counts()));
                }
            }
        }
    }

    #[test]
    fn empty_tags_still_list_image() {
        let mut scenes = generate_scenes(2, 3, 5);
        scenes[1].objects.clear();
        let backends = mock_backends(scenes.clone(), MockConfig::default());
        let images = crate::backend::fixture::suite_payloads(&scenes);
        let out = run_auto_annotate(
            &images,
            PhraseSource::Tags,
            &GroundedSamConfig::default(),
            &backends,
            &AutoAnnotateOptions::default(),
            &ctx(),
        )
        .unwrap();
        assert_eq!(out.document.images.len(), 2);
        assert!(out.document.annotations.iter().all(|a| a.image_id == 1));
    }

    #[test]
    fn continue_on_error_skips_failed_image() {
        let scenes = generate_scenes(3, 3, 5);
        let backends = mock_backends(scenes[..2].to_vec(), MockConfig::default());
        let images = crate::backend::fixture::suite_payloads(&scenes);
        let opts = AutoAnnotateOptions {
            continue_on_error: true,
            workers: 2,
        };
        let out = run_auto_annotate(&images, PhraseSource::Tags, &GroundedSamConfig::default(), &backends, &opts, &ctx())
            .unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].image_id, 3);
        assert_eq!(out.failures[0].stage, "tagger");
        assert_eq!(out.document.images.iter().map(|i| i.id).collect::<Vec<_>>(), vec![1, 2]);

        let strict = AutoAnnotateOptions::default();
        let err = run_auto_annotate(&images, PhraseSource::Tags, &GroundedSamConfig::default(), &backends, &strict, &ctx())
            .unwrap_err();
        assert!(matches!(err, PipelineError::Backend { image_id: 3, .. }));
    }

    #[test]
    fn auto_annotate_is_deterministic_across_worker_counts() {
        let scenes = generate_scenes(6, 3, 9);
        let images = crate::backend::fixture::suite_payloads(&scenes);
        let backends = mock_backends(
            scenes.clone(),
            MockConfig {
                seed: 3,
                jitter_px: 2.0,
                drop_per_scene: 1,
            },
        );
        let run = |workers| {
            let opts = AutoAnnotateOptions {
                continue_on_error: false,
                workers,
            };
            let out =
                run_auto_annotate(&images, PhraseSource::Tags, &GroundedSamConfig::default(), &backends, &opts, &ctx()).unwrap();
            out.document.to_json()
        };
        let one = run(1);
        assert_eq!(one, run(4));
        assert_eq!(one, run(1));
    }

    #[test]
    fn inpaint_touches_only_the_region() {
        let scene = two_cats();
        let backends = mock_backends(vec![scene.clone()], MockConfig::default());
        let img = scene.payload(1);
        let out = run_grounded_inpaint(
            &img,
            &["cat".into()],
            &EditMode::Replace("dog body".into()),
            false,
            &GroundedSamConfig::default(),
            &backends,
            &ctx(),
        )
        .unwrap();
        let union = scene.objects[0].mask.union(&scene.objects[1].mask).unwrap();
        assert_eq!(out.report.region_area, mask_area(&union));
        assert_eq!(out.report.matched.len(), 2);

        let before = scene.render_rgb();
        let crate::backend::ImageContent::Rgb(after) = &out.image.content else { panic!() };
        let region = rle_decode(&union);
        let color = crate::backend::mock::prompt_color("dog body");
        for (i, &inside) in region.bits().iter().enumerate() {
            if inside {
                assert_eq!(after[i * 3..i * 3 + 3], color);
            } else {
                assert_eq!(after[i * 3..i * 3 + 3], before[i * 3..i * 3 + 3]);
            }
        }

        let top = run_grounded_inpaint(&img, &["cat".into()], &EditMode::Remove, true, &GroundedSamConfig::default(), &backends, &ctx())
            .unwrap();
        assert_eq!(top.report.matched.len(), 1);
        assert_eq!(top.report.region_area, mask_area(&scene.objects[0].mask));
        assert_eq!(top.report.prompt, "background");
    }

    #[test]
    fn inpaint_missing_target() {
        let scene = two_cats();
        let backends = mock_backends(vec![scene.clone()], MockConfig::default());
        let err = run_grounded_inpaint(
            &scene.payload(1),
            &["unicorn".into()],
            &EditMode::Remove,
            false,
            &GroundedSamConfig::default(),
            &backends,
            &ctx(),
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::TargetNotFound { .. }));
    }

    #[test]
    fn mesh_pairs_in_score_order() {
        let scene = FixtureScene {
            scene_id: "people".into(),
            width: 50,
            height: 40,
            objects: vec![
                object("person with pink clothes", [2.0, 2.0, 12.0, 30.0], 0.6, 50, 40),
                object("person with pink clothes", [20.0, 2.0, 32.0, 35.0], 0.9, 50, 40),
                object("cat", [35.0, 30.0, 45.0, 38.0], 0.9, 50, 40),
            ],
        };
        let backends = mock_backends(vec![scene.clone()], MockConfig::default());
        let pairs = run_promptable_mesh(&scene.payload(1), "person with pink clothes", &GroundedSamConfig::default(), &backends, &ctx())
            .unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].annotation.score, 0.9);
        for p in &pairs {
            assert_eq!(p.mesh.source_box, p.annotation.bbox);
            assert_eq!(p.mesh.params.len(), crate::backend::mock::MOCK_MESH_LEN);
        }
        assert_eq!(box_iou(&pairs[1].annotation.bbox, &scene.objects[0].bbox), 1.0);
        assert!(matches!(
            run_promptable_mesh(&scene.payload(1), "dog", &GroundedSamConfig::default(), &backends, &ctx()),
            Err(PipelineError::TargetNotFound { .. })
        ));
    }
}
