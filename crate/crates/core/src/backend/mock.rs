//! Deterministic in-process backends driven by fixture scenes.
//!
//! Responses are pure functions of (scene, request, config). The only noise
//! source is the seeded box jitter.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fixture::{stable_hash, FixtureScene};
use super::wire::check_mask_size;
use super::{
    check_phrases, BackendError, Caption, Captioner, Detector, ImageContent, ImagePayload, Inpainter, MeshParams,
    MeshRecoverer, Segmenter, TagSet, Tagger,
};
use crate::geometry::{box_iou, clip_box, BoxXYXY, ScoredBox};
use crate::mask::BinaryMask;

/// Length of the mock mesh parameter vector.
pub const MOCK_MESH_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default)]
    pub seed: u64,
    /// Maximum per-corner displacement applied to detected boxes, in pixels.
    #[serde(default)]
    pub jitter_px: f64,
    /// Number of objects per scene the detector silently misses.
    #[serde(default)]
    pub drop_per_scene: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jitter_px: 0.0,
            drop_per_scene: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    scenes: BTreeMap<String, FixtureScene>,
    config: MockConfig,
}

impl MockBackend {
    pub fn new(scenes: impl IntoIterator<Item = FixtureScene>, config: MockConfig) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.scene_id.clone(), s)).collect(),
            config,
        }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    pub fn scenes(&self) -> impl Iterator<Item = &FixtureScene> {
        self.scenes.values()
    }

    fn scene_for(&self, image: &ImagePayload) -> Result<&FixtureScene, BackendError> {
        let id = match &image.content {
            ImageContent::Scene(id) => id,
            _ => {
                return Err(BackendError::InvalidRequest(
                    "mock backends only answer fixture scene references".into(),
                ))
            }
        };
        let scene = self
            .scenes
            .get(id)
            .ok_or_else(|| BackendError::UnknownScene(id.clone()))?;
        if scene.width != image.width || scene.height != image.height {
            return Err(BackendError::DimensionMismatch(format!(
                "image declares {}x{} but scene '{}' is {}x{}",
                image.width, image.height, id, scene.width, scene.height
            )));
        }
        Ok(scene)
    }

    /// Indices of objects the detector is configured to miss.
    fn dropped(&self, scene: &FixtureScene) -> Vec<usize> {
        let mut ranked: Vec<(u64, usize)> = (0..scene.objects.len())
            .map(|i| {
                let h = stable_hash(&[
                    &self.config.seed.to_le_bytes(),
                    scene.scene_id.as_bytes(),
                    &(i as u64).to_le_bytes(),
                ]);
                (h, i)
            })
            .collect();
        ranked.sort();
        ranked
            .into_iter()
            .take(self.config.drop_per_scene)
            .map(|(_, i)| i)
            .collect()
    }

    fn jitter(&self, scene: &FixtureScene, index: usize, b: &BoxXYXY) -> BoxXYXY {
        let j = self.config.jitter_px;
        if j <= 0.0 {
            return *b;
        }
        let seed = stable_hash(&[
            b"jitter",
            &self.config.seed.to_le_bytes(),
            scene.scene_id.as_bytes(),
            &(index as u64).to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = || rng.random_range(-j..=j);
        let (d1, d2, d3, d4) = (d(), d(), d(), d());
        BoxXYXY::new(b.x1() + d1, b.y1() + d2, b.x2() + d3, b.y2() + d4).unwrap_or(*b)
    }

    fn check_prompt(image: &ImagePayload, b: &BoxXYXY) -> Result<(), BackendError> {
        if b.within_image(image.width as f64, image.height as f64) {
            Ok(())
        } else {
            Err(BackendError::InvalidRequest(format!(
                "box {:?} is not clipped to the {}x{} image",
                b.to_array(),
                image.width,
                image.height
            )))
        }
    }

    fn identity_str(&self) -> String {
        format!(
            "mock:seed={},jitter={},drop={}",
            self.config.seed, self.config.jitter_px, self.config.drop_per_scene
        )
    }
}

impl Detector for MockBackend {
    fn detect(&self, image: &ImagePayload, phrases: &[String], box_threshold: f64) -> Result<Vec<ScoredBox>, BackendError> {
        let phrases = check_phrases(phrases)?;
        let scene = self.scene_for(image)?;
        let dropped = self.dropped(scene);
        let mut out = Vec::new();
        for (i, obj) in scene.objects.iter().enumerate() {
            if dropped.contains(&i) || obj.detect_score < box_threshold {
                continue;
            }
            let Some(phrase) = phrases.iter().find(|p| p.to_lowercase() == obj.label) else {
                continue;
            };
            let jittered = self.jitter(scene, i, &obj.bbox);
            let Ok(bbox) = clip_box(&jittered, scene.width as f64, scene.height as f64) else {
                continue;
            };
            out.push(ScoredBox {
                bbox,
                phrase: phrase.clone(),
                score: obj.detect_score,
            });
        }
        Ok(out)
    }

    fn identity(&self) -> String {
        self.identity_str()
    }
}

impl Segmenter for MockBackend {
    fn segment(&self, image: &ImagePayload, box_prompts: &[BoxXYXY]) -> Result<Vec<BinaryMask>, BackendError> {
        let scene = self.scene_for(image)?;
        let to_err = |e: crate::mask::MaskError| BackendError::InvalidRequest(e.to_string());
        box_prompts
            .iter()
            .map(|prompt| {
                Self::check_prompt(image, prompt)?;
                let rect = BinaryMask::from_box(prompt, scene.height, scene.width).map_err(to_err)?;
                let mut best: Option<(f64, usize)> = None;
                for (i, obj) in scene.objects.iter().enumerate() {
                    let iou = box_iou(&obj.bbox, prompt);
                    if iou > 0.0 && best.is_none_or(|(b, _)| iou > b) {
                        best = Some((iou, i));
                    }
                }
                let mask = match best {
                    Some((_, i)) => scene.objects[i].mask.intersect(&rect).map_err(to_err)?,
                    None => rect,
                };
                check_mask_size(&mask, image)?;
                Ok(mask)
            })
            .collect()
    }

    fn identity(&self) -> String {
        self.identity_str()
    }
}

impl Tagger for MockBackend {
    fn tag(&self, image: &ImagePayload) -> Result<TagSet, BackendError> {
        let scene = self.scene_for(image)?;
        Ok(TagSet::new(scene.objects.iter().map(|o| o.label.as_str())))
    }

    fn identity(&self) -> String {
        self.identity_str()
    }
}

/// Caption format produced by the mock captioner.
pub fn mock_caption(tags: &TagSet) -> Caption {
    if tags.is_empty() {
        Caption("a photo".into())
    } else {
        Caption(format!("a photo of {}", tags.labels().join(" and ")))
    }
}

impl Captioner for MockBackend {
    fn caption(&self, image: &ImagePayload) -> Result<Caption, BackendError> {
        Ok(mock_caption(&self.tag(image)?))
    }

    fn identity(&self) -> String {
        self.identity_str()
    }
}

/// Fill colour the mock inpainter uses for `prompt`.
pub fn prompt_color(prompt: &str) -> [u8; 3] {
    let h = stable_hash(&[b"inpaint", prompt.as_bytes()]).to_le_bytes();
    [h[0], h[1], h[2]]
}

impl Inpainter for MockBackend {
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
        if region.is_empty() {
            return Ok(image.clone());
        }
        let mut rgb = match &image.content {
            ImageContent::Scene(_) => self.scene_for(image)?.render_rgb(),
            ImageContent::Rgb(bytes) => bytes.clone(),
            ImageContent::Png(_) => {
                return Err(BackendError::InvalidRequest(
                    "mock inpainter cannot decode png content".into(),
                ))
            }
        };
        let color = prompt_color(prompt);
        let bits = crate::mask::rle_decode(region);
        for (idx, _) in bits.bits().iter().enumerate().filter(|(_, &b)| b) {
            rgb[idx * 3..idx * 3 + 3].copy_from_slice(&color);
        }
        ImagePayload::new(image.image_id, image.width, image.height, ImageContent::Rgb(rgb))
    }

    fn identity(&self) -> String {
        self.identity_str()
    }
}

impl MeshRecoverer for MockBackend {
    fn recover_mesh(&self, image: &ImagePayload, person_box: &BoxXYXY) -> Result<MeshParams, BackendError> {
        Self::check_prompt(image, person_box)?;
        Ok(MeshParams {
            params: vec![0.0; MOCK_MESH_LEN],
            source_box: *person_box,
        })
    }

    fn identity(&self) -> String {
        self.identity_str()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::fixture::{generate_scenes, FixtureObject};
    use crate::mask::{mask_area, mask_iou};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    fn object(label: &str, b: BoxXYXY, score: f64) -> FixtureObject {
        FixtureObject {
            label: label.into(),
            bbox: b,
            mask: BinaryMask::from_box(&b, 40, 40).unwrap(),
            detect_score: score,
        }
    }

    fn scene(objects: Vec<FixtureObject>) -> FixtureScene {
        FixtureScene {
            scene_id: "s".into(),
            width: 40,
            height: 40,
            objects,
        }
    }

    fn phrases(p: &[&str]) -> Vec<String> {
        p.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn detect_examples() {
        let s = scene(vec![object("cat", bx(2.0, 2.0, 10.0, 10.0), 0.9)]);
        let m = MockBackend::new([s.clone()], MockConfig::default());
        let img = s.payload(1);
        let dets = m.detect(&img, &phrases(&["cat", "dog"]), 0.3).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].phrase.as_str(), dets[0].score), ("cat", 0.9));
        assert!(m.detect(&img, &phrases(&["zebra"]), 0.3).unwrap().is_empty());

        let low = scene(vec![object("cat", bx(2.0, 2.0, 10.0, 10.0), 0.2)]);
        let m = MockBackend::new([low], MockConfig::default());
        assert!(m.detect(&img, &phrases(&["cat"]), 0.3).unwrap().is_empty());
    }

    #[test]
    fn unknown_scene() {
        let m = MockBackend::new([], MockConfig::default());
        let err = m.detect(&ImagePayload::scene(1, 4, 4, "nope"), &phrases(&["cat"]), 0.1);
        assert_eq!(err.unwrap_err(), BackendError::UnknownScene("nope".into()));
    }

    #[test]
    fn segment_examples() {
        let s = generate_scenes(1, 3, 3).remove(0);
        let m = MockBackend::new([s.clone()], MockConfig::default());
        let img = s.payload(1);
        let prompts: Vec<BoxXYXY> = s.objects.iter().map(|o| o.bbox).collect();
        let masks = m.segment(&img, &prompts).unwrap();
        assert_eq!(masks.len(), prompts.len());
        for (mask, obj) in masks.iter().zip(&s.objects) {
            assert_eq!(mask_iou(mask, &obj.mask).unwrap(), 1.0);
        }

        let empty = scene(vec![]);
        let m = MockBackend::new([empty.clone()], MockConfig::default());
        let b = bx(3.0, 4.0, 9.0, 7.0);
        let rect = m.segment(&empty.payload(1), &[b]).unwrap();
        assert_eq!(mask_area(&rect[0]), 18);
    }

    #[test]
    fn tag_and_caption() {
        let b = bx(0.0, 0.0, 5.0, 5.0);
        let s = scene(vec![object("cat", b, 0.5), object("dog", b, 0.5), object("cat", b, 0.5)]);
        let m = MockBackend::new([s.clone()], MockConfig::default());
        assert_eq!(m.tag(&s.payload(1)).unwrap().labels(), &["cat".to_string(), "dog".to_string()]);
        assert_eq!(m.caption(&s.payload(1)).unwrap().0, "a photo of cat and dog");

        let e = scene(vec![]);
        let m = MockBackend::new([e.clone()], MockConfig::default());
        assert!(m.tag(&e.payload(1)).unwrap().is_empty());
        assert_eq!(m.caption(&e.payload(1)).unwrap().0, "a photo");

        let moth = scene(vec![object("zale horrida", b, 0.5)]);
        let m = MockBackend::new([moth.clone()], MockConfig::default());
        assert_eq!(m.tag(&moth.payload(1)).unwrap().labels(), &["zale horrida".to_string()]);
        let cow = scene(vec![object("cow", b, 0.5)]);
        let m = MockBackend::new([cow.clone()], MockConfig::default());
        assert_eq!(m.caption(&cow.payload(1)).unwrap().0, "a photo of cow");
    }

    #[test]
    fn inpaint_examples() {
        let s = scene(vec![]);
        let m = MockBackend::new([s.clone()], MockConfig::default());
        let img = ImagePayload::new(1, 40, 40, ImageContent::Rgb(s.render_rgb())).unwrap();

        let none = BinaryMask::empty(40, 40).unwrap();
        assert_eq!(m.inpaint(&img, &none, "dog").unwrap(), img);

        let full = BinaryMask::from_counts(40, 40, vec![0, 1600]).unwrap();
        let a = m.inpaint(&img, &full, "dog").unwrap();
        assert_eq!(a, m.inpaint(&img, &full, "dog").unwrap());
        let ImageContent::Rgb(px) = &a.content else { panic!() };
        assert!(px.chunks(3).all(|c| c == prompt_color("dog")));

        let left = BinaryMask::from_box(&bx(0.0, 0.0, 20.0, 40.0), 40, 40).unwrap();
        let out = m.inpaint(&img, &left, "dog").unwrap();
        let (ImageContent::Rgb(before), ImageContent::Rgb(after)) = (&img.content, &out.content) else {
            panic!()
        };
        for r in 0..40 {
            for c in 0..40 {
                let i = (r * 40 + c) * 3;
                let same = before[i..i + 3] == after[i..i + 3];
                if c < 20 {
                    assert_eq!(&after[i..i + 3], &prompt_color("dog"));
                } else {
                    assert!(same, "pixel ({r},{c}) outside region changed");
                }
            }
        }

        let wrong = BinaryMask::empty(10, 10).unwrap();
        assert!(matches!(m.inpaint(&img, &wrong, "x"), Err(BackendError::DimensionMismatch(_))));
    }

    #[test]
    fn mesh_examples() {
        let s = scene(vec![]);
        let m = MockBackend::new([s.clone()], MockConfig::default());
        let img = s.payload(1);
        let a = m.recover_mesh(&img, &bx(1.0, 1.0, 5.0, 9.0)).unwrap();
        assert_eq!(a.params.len(), MOCK_MESH_LEN);
        assert_eq!(a.source_box, bx(1.0, 1.0, 5.0, 9.0));
        let b = m.recover_mesh(&img, &bx(2.0, 2.0, 6.0, 6.0)).unwrap();
        assert_eq!(b.source_box, bx(2.0, 2.0, 6.0, 6.0));
        assert!(m.recover_mesh(&img, &bx(30.0, 30.0, 50.0, 50.0)).is_err());
    }

    #[test]
    fn jitter_and_drop_are_seeded() {
        let scenes = generate_scenes(3, 3, 9);
        let cfg = MockConfig {
            seed: 4,
            jitter_px: 2.0,
            drop_per_scene: 1,
        };
        let a = MockBackend::new(scenes.clone(), cfg.clone());
        let b = MockBackend::new(scenes.clone(), cfg);
        for s in &scenes {
            let labels: Vec<String> = s.objects.iter().map(|o| o.label.clone()).collect();
            let da = a.detect(&s.payload(1), &labels, 0.0).unwrap();
            assert_eq!(da, b.detect(&s.payload(1), &labels, 0.0).unwrap());
            assert_eq!(da.len(), s.objects.len() - 1);
            for d in &da {
                assert!(d.bbox.within_image(s.width as f64, s.height as f64));
            }
        }
    }
}
