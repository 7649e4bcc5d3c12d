//! Synthetic ground-truth scenes that mock backends answer from.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::ImagePayload;
use crate::geometry::BoxXYXY;
use crate::mask::{bbox_from_mask, rle_encode, BinaryMask, Bitmap};

/// Suffix identifying scene files inside a fixture directory.
pub const SCENE_SUFFIX: &str = ".scene.json";

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("scene '{scene}': {reason}")]
    Invalid { scene: String, reason: String },
    #[error("duplicate scene id '{0}'")]
    DuplicateScene(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub mask: BinaryMask,
    pub detect_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureScene {
    pub scene_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<FixtureObject>,
}

impl FixtureScene {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let invalid = |reason: String| FixtureError::Invalid {
            scene: self.scene_id.clone(),
            reason,
        };
        if self.scene_id.trim().is_empty() {
            return Err(invalid("empty scene id".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("empty dimensions".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.label.trim().is_empty() || o.label != o.label.to_lowercase() {
                return Err(invalid(format!("object {i} label '{}' must be non-empty lowercase", o.label)));
            }
            if o.mask.height() != self.height || o.mask.width() != self.width {
                return Err(invalid(format!("object {i} mask size differs from scene")));
            }
            if !(0.0..=1.0).contains(&o.detect_score) {
                return Err(invalid(format!("object {i} detect_score outside [0, 1]")));
            }
            if !o.bbox.within_image(self.width as f64, self.height as f64) {
                return Err(invalid(format!("object {i} box outside the image")));
            }
            if let Some(tight) = bbox_from_mask(&o.mask) {
                if !o.bbox.contains(&tight) {
                    return Err(invalid(format!("object {i} mask extends beyond its box")));
                }
            }
        }
        Ok(())
    }

    /// Payload referencing this scene.
    pub fn payload(&self, image_id: u64) -> ImagePayload {
        ImagePayload::scene(image_id, self.width, self.height, self.scene_id.clone())
    }

    /// Deterministic RGB rendering: a tinted gradient background with every
    /// object's mask painted in a colour derived from its label.
    pub fn render_rgb(&self) -> Vec<u8> {
        let (w, h) = (self.width as usize, self.height as usize);
        let base = stable_hash(&[self.scene_id.as_bytes()]).to_le_bytes();
        let mut rgb = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * 3;
                rgb[i] = base[0].wrapping_add((x % 64) as u8);
                rgb[i + 1] = base[1].wrapping_add((y % 64) as u8);
                rgb[i + 2] = base[2];
            }
        }
        for o in &self.objects {
            let color = label_color(&o.label);
            let bits = crate::mask::rle_decode(&o.mask);
            for (idx, _) in bits.bits().iter().enumerate().filter(|(_, &b)| b) {
                rgb[idx * 3..idx * 3 + 3].copy_from_slice(&color);
            }
        }
        rgb
    }
}

/// First eight bytes of SHA-256 over the concatenated parts.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

fn label_color(label: &str) -> [u8; 3] {
    let h = stable_hash(&[b"label", label.as_bytes()]).to_le_bytes();
    [h[0], h[1], h[2]]
}

pub fn load_scene(path: &Path) -> Result<FixtureScene, FixtureError> {
    let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let scene: FixtureScene = serde_json::from_str(&text).map_err(|source| FixtureError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    scene.validate()?;
    Ok(scene)
}

/// Loads every `*.scene.json` in `dir`, sorted by scene id.
pub fn load_dir(dir: &Path) -> Result<Vec<FixtureScene>, FixtureError> {
    let io = |source| FixtureError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut scenes = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let is_scene = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(SCENE_SUFFIX));
        if is_scene {
            scenes.push(load_scene(&path)?);
        }
    }
    scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    for pair in scenes.windows(2) {
        if pair[0].scene_id == pair[1].scene_id {
            return Err(FixtureError::DuplicateScene(pair[0].scene_id.clone()));
        }
    }
    Ok(scenes)
}

pub fn save_scene(dir: &Path, scene: &FixtureScene) -> Result<PathBuf, FixtureError> {
    let path = dir.join(format!("{}{SCENE_SUFFIX}", scene.scene_id));
    let json = serde_json::to_string_pretty(scene).map_err(|source| FixtureError::Parse {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json + "\n").map_err(|source| FixtureError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Image payloads for a scene suite: ids are assigned 1.. in scene-id order.
pub fn suite_payloads(scenes: &[FixtureScene]) -> Vec<ImagePayload> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| s.payload(i as u64 + 1))
        .collect()
}

const VOCABULARY: &[&str] = &[
    "cat",
    "dog",
    "cow",
    "bottle",
    "chicken",
    "strawberry",
    "phone",
    "person with pink clothes",
    "zale horrida",
    "elephant",
];

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Diamond,
}

/// Generates `count` scenes with `min_objects..=min_objects + 2` objects each.
///
/// Objects sit in disjoint grid cells, so no two boxes overlap, and every box
/// is the tight box of its mask.
pub fn generate_scenes(count: usize, min_objects: usize, seed: u64) -> Vec<FixtureScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let scene_id = format!("scene-{i:03}");
            let n = rng.random_range(min_objects..=min_objects + 2).min(6);
            let (cols, rows) = (3u32, 2u32);
            let cell_w = rng.random_range(32..=44u32);
            let cell_h = rng.random_range(36..=48u32);
            let (width, height) = (cols * cell_w, rows * cell_h);

            let mut cells: Vec<u32> = (0..cols * rows).collect();
            // partial Fisher-Yates to choose which cells are occupied
            for k in 0..n {
                let j = rng.random_range(k..cells.len());
                cells.swap(k, j);
            }
            let objects = cells[..n]
                .iter()
                .map(|&cell| {
                    let (cx, cy) = ((cell % cols) * cell_w, (cell / cols) * cell_h);
                    let ow = rng.random_range(8..=cell_w - 4);
                    let oh = rng.random_range(8..=cell_h - 4);
                    let ox = cx + rng.random_range(1..=cell_w - ow - 1);
                    let oy = cy + rng.random_range(1..=cell_h - oh - 1);
                    let shape = match rng.random_range(0..3) {
                        0 => Shape::Rect,
                        1 => Shape::Ellipse,
                        _ => Shape::Diamond,
                    };
                    let mask = draw_shape(shape, [ox, oy, ox + ow, oy + oh], width, height);
                    let bbox = bbox_from_mask(&mask).expect("generated shapes are non-empty");
                    let label = VOCABULARY[rng.random_range(0..VOCABULARY.len())].to_string();
                    let detect_score = rng.random_range(35..=99) as f64 / 100.0;
                    FixtureObject {
                        label,
                        bbox,
                        mask,
                        detect_score,
                    }
                })
                .collect();
            FixtureScene {
                scene_id,
                width,
                height,
                objects,
            }
        })
        .collect()
}

fn draw_shape(shape: Shape, b: [u32; 4], width: u32, height: u32) -> BinaryMask {
    let mut bm = Bitmap::zeros(height, width).expect("positive scene size");
    let (x0, y0, x1, y1) = (b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let (rx, ry) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
    for r in b[1]..b[3] {
        for c in b[0]..b[2] {
            let dx = (c as f64 + 0.5 - cx) / rx;
            let dy = (r as f64 + 0.5 - cy) / ry;
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
            };
            if inside {
                bm.set(r, c, true);
            }
        }
    }
    rle_encode(&bm)
}
