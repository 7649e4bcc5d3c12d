//! Slow reference implementations used to check the fast paths.
//!
//! Nothing here calls into [`crate::mask`], [`crate::geometry`] or
//! [`crate::eval`] algorithms; masks are expanded to per-pixel vectors and
//! every quantity is recomputed from its definition. [`random_dataset`] is a
//! test-case generator and does use the crate's encoder.

use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::ScoredBox;
use crate::mask::{bbox_from_mask, mask_area, rle_encode, BinaryMask, Bitmap, RleRecord};
use crate::store::{CocoAnnotation, CocoCategory, CocoDocument, ImageRecord};

/// Column-major run lengths of a bitmap, starting with a (possibly empty) run of zeros.
pub fn rle_counts(bm: &Bitmap) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for c in 0..bm.width() {
        for r in 0..bm.height() {
            let v = bm.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Row-major pixels of an RLE, expanded run by run.
pub fn decode_pixels(height: u32, width: u32, counts: &[u32]) -> Vec<bool> {
    let mut column_major = Vec::new();
    for (i, &n) in counts.iter().enumerate() {
        column_major.extend(std::iter::repeat_n(i % 2 == 1, n as usize));
    }
    assert_eq!(column_major.len(), (height * width) as usize, "counts must cover the image");
    let mut out = vec![false; column_major.len()];
    for c in 0..width as usize {
        for r in 0..height as usize {
            out[r * width as usize + c] = column_major[c * height as usize + r];
        }
    }
    out
}

/// (intersection, union) pixel counts.
pub fn pixel_overlap(a: &[bool], b: &[bool]) -> (u64, u64) {
    assert_eq!(a.len(), b.len());
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as u64;
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as u64;
    (inter, union)
}

/// Box IoU of two `[x1, y1, x2, y2]` boxes, 0 for empty unions.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Indices kept by greedy NMS, in the order they were kept.
pub fn nms(dets: &[ScoredBox], thresh: f64, class_aware: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // selection sort: highest score first, earlier index on ties
    for i in 0..order.len() {
        let mut best = i;
        for j in i + 1..order.len() {
            let (a, b) = (&dets[order[j]], &dets[order[best]]);
            if a.score > b.score || (a.score == b.score && order[j] < order[best]) {
                best = j;
            }
        }
        order.swap(i, best);
    }
    let key = |d: &ScoredBox| d.phrase.trim().to_lowercase();
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            (!class_aware || key(&dets[k]) == key(&dets[i]))
                && box_iou(dets[k].bbox.to_array(), dets[i].bbox.to_array()) > thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// 101-point interpolated AP, straight from the definition.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let points: Vec<(f64, f64)> = (0..flags.len())
        .map(|i| {
            let tp = flags[..=i].iter().filter(|f| **f).count() as f64;
            (tp / num_gt as f64, tp / (i + 1) as f64)
        })
        .collect();
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    Some(sum / 101.0)
}

struct Inst {
    id: u64,
    image: u64,
    score: f64,
    pixels: Vec<bool>,
    bbox: [f64; 4],
}

fn iou(a: &Inst, b: &Inst, masks: bool) -> f64 {
    if masks {
        let (i, u) = pixel_overlap(&a.pixels, &b.pixels);
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    } else {
        box_iou(a.bbox, b.bbox)
    }
}

/// Dataset mAP by exhaustive recomputation: category alignment by trimmed
/// lowercase name, top 100 per image, thresholds 0.50..=0.95, averaged over
/// categories first and thresholds second.
pub fn evaluate_map(preds: &CocoDocument, gts: &CocoDocument, masks: bool) -> f64 {
    let norm = |s: &str| s.trim().to_lowercase();
    let dims: BTreeMap<u64, (u32, u32)> = gts.images.iter().map(|i| (i.id, (i.height, i.width))).collect();
    let inst = |a: &crate::store::CocoAnnotation| {
        let (h, w) = dims[&a.image_id];
        Inst {
            id: a.id,
            image: a.image_id,
            score: a.score.unwrap_or(1.0),
            pixels: decode_pixels(h, w, &a.segmentation.counts),
            bbox: [a.bbox[0], a.bbox[1], a.bbox[0] + a.bbox[2], a.bbox[1] + a.bbox[3]],
        }
    };
    let gt_name: BTreeMap<u64, String> = gts.categories.iter().map(|c| (c.id, norm(&c.name))).collect();
    let pred_name: BTreeMap<u64, String> = preds.categories.iter().map(|c| (c.id, norm(&c.name))).collect();
    let known: BTreeSet<&String> = gt_name.values().collect();

    // top 100 per image among predictions that align to a GT category
    let mut by_image: BTreeMap<u64, Vec<(String, Inst)>> = BTreeMap::new();
    for a in &preds.annotations {
        let name = &pred_name[&a.category_id];
        if known.contains(name) {
            by_image.entry(a.image_id).or_default().push((name.clone(), inst(a)));
        }
    }
    let rank = |x: &Inst, y: &Inst| {
        y.score
            .partial_cmp(&x.score)
            .unwrap()
            .then(x.image.cmp(&y.image))
            .then(x.id.cmp(&y.id))
    };
    let mut pool: Vec<(String, Inst)> = Vec::new();
    for (_, mut v) in by_image {
        v.sort_by(|a, b| rank(&a.1, &b.1));
        v.truncate(100);
        pool.extend(v);
    }

    let mut per_category: Vec<Vec<f64>> = Vec::new();
    for c in &gts.categories {
        let name = norm(&c.name);
        let g: Vec<Inst> = gts.annotations.iter().filter(|a| a.category_id == c.id).map(inst).collect();
        if g.is_empty() {
            continue;
        }
        let mut p: Vec<&Inst> = pool.iter().filter(|(n, _)| *n == name).map(|(_, i)| i).collect();
        p.sort_by(|a, b| rank(a, b));
        let mut aps = Vec::new();
        for t in (50..=95).step_by(5) {
            let thresh = t as f64 / 100.0;
            let mut used = vec![false; g.len()];
            let mut flags = Vec::new();
            // global score order is a valid per-image order, since images never share GTs
            for pi in &p {
                let mut best: Option<(usize, f64)> = None;
                for (j, gj) in g.iter().enumerate() {
                    if used[j] || gj.image != pi.image {
                        continue;
                    }
                    let v = iou(pi, gj, masks);
                    if v < thresh || v == 0.0 {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((b, bv)) => v > bv || (v == bv && gj.id < g[b].id),
                    };
                    if better {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                }
                flags.push(best.is_some());
            }
            aps.push(average_precision(&flags, g.len()).unwrap());
        }
        per_category.push(aps);
    }
    // mean over categories at each threshold, then over thresholds
    let n = per_category.len() as f64;
    let per_threshold: Vec<f64> = (0..10).map(|t| per_category.iter().map(|c| c[t]).sum::<f64>() / n).collect();
    per_threshold.iter().sum::<f64>() / 10.0
}

/// Random small prediction/ground-truth pair for differential tests.
///
/// Predictions are jittered copies of ground-truth objects (some dropped,
/// some relabelled) plus stray boxes, with scores on a coarse grid so ties
/// occur. One predicted category name has no ground-truth counterpart.
pub fn random_dataset(seed: u64, max_images: usize, max_objects: usize) -> (CocoDocument, CocoDocument) {
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gt_names = ["cat", "dog", "bird"];
    let pred_names = [" Cat", "dog", "BIRD ", "zebra"];
    let n_images = rng.random_range(1..=max_images);
    let mut images = Vec::new();
    let mut gt_anns = Vec::new();
    let mut pred_anns = Vec::new();

    let blob = |rng: &mut rand_chacha::ChaCha8Rng, h: u32, w: u32, rect: [i64; 4]| -> Option<BinaryMask> {
        let mut bm = Bitmap::zeros(h, w).unwrap();
        let [x0, y0, x1, y1] = rect;
        for r in y0.max(0)..y1.min(h as i64) {
            for c in x0.max(0)..x1.min(w as i64) {
                if rng.random_bool(0.85) {
                    bm.set(r as u32, c as u32, true);
                }
            }
        }
        if bm.count_ones() == 0 && x0 >= 0 && y0 >= 0 && x0 < x1.min(w as i64) && y0 < y1.min(h as i64) {
            bm.set(y0 as u32, x0 as u32, true);
        }
        (bm.count_ones() > 0).then(|| rle_encode(&bm))
    };

    for image_id in 1..=n_images as u64 {
        let (h, w) = (rng.random_range(6..=14u32), rng.random_range(6..=14u32));
        images.push(ImageRecord {
            id: image_id,
            width: w,
            height: h,
            file_name: format!("{image_id}.png"),
        });
        let n_obj = if image_id == 1 { rng.random_range(1..=max_objects.max(1)) } else { rng.random_range(0..=max_objects) };
        for _ in 0..n_obj {
            let x0 = rng.random_range(0..w as i64 - 1);
            let y0 = rng.random_range(0..h as i64 - 1);
            let rect = [x0, y0, rng.random_range(x0 + 1..=w as i64), rng.random_range(y0 + 1..=h as i64)];
            let Some(mask) = blob(&mut rng, h, w, rect) else { continue };
            let cat = rng.random_range(0..gt_names.len());
            gt_anns.push((image_id, cat as u64 + 1, mask, None));

            if rng.random_bool(0.8) {
                let d = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(-2..=2i64);
                let moved = [rect[0] + d(&mut rng), rect[1] + d(&mut rng), rect[2] + d(&mut rng), rect[3] + d(&mut rng)];
                if let Some(m) = blob(&mut rng, h, w, moved) {
                    let pcat = if rng.random_bool(0.85) { cat } else { rng.random_range(0..pred_names.len()) };
                    let score = rng.random_range(0..=20) as f64 / 20.0;
                    pred_anns.push((image_id, pcat as u64 + 1, m, Some(score)));
                }
            }
        }
        for _ in 0..rng.random_range(0..=2) {
            let x0 = rng.random_range(0..w as i64 - 1);
            let y0 = rng.random_range(0..h as i64 - 1);
            let rect = [x0, y0, x0 + rng.random_range(1..=4), y0 + rng.random_range(1..=4)];
            if let Some(m) = blob(&mut rng, h, w, rect) {
                let pcat = rng.random_range(0..pred_names.len());
                let score = rng.random_range(0..=20) as f64 / 20.0;
                pred_anns.push((image_id, pcat as u64 + 1, m, Some(score)));
            }
        }
    }

    let build = |anns: Vec<(u64, u64, BinaryMask, Option<f64>)>, names: &[&str]| CocoDocument {
        images: images.clone(),
        annotations: anns
            .into_iter()
            .enumerate()
            .map(|(i, (image_id, category_id, mask, score))| CocoAnnotation {
                id: i as u64 + 1,
                image_id,
                category_id,
                bbox: bbox_from_mask(&mask).unwrap().to_xywh(),
                area: mask_area(&mask),
                segmentation: RleRecord::from(&mask),
                score,
                iscrowd: 0,
                detection_box: None,
            })
            .collect(),
        categories: names
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.to_string(),
            })
            .collect(),
        info: Default::default(),
    };
    (build(pred_anns, &pred_names), build(gt_anns, &gt_names))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_definition_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
        assert_eq!(average_precision(&[], 3), Some(0.0));
    }

    #[test]
    fn decode_layout() {
        // 2x2 with only (row 1, col 0) set
        assert_eq!(decode_pixels(2, 2, &[1, 1, 2]), vec![false, false, true, false]);
        let bm = Bitmap::new(2, 2, vec![false, false, true, false]).unwrap();
        assert_eq!(rle_counts(&bm), vec![1, 1, 2]);
    }
}
