//! COCO-style average precision for instance masks and boxes.
//!
//! IoU thresholds are held as integer percentages so that mask comparisons
//! (`100 * inter >= t * union`) are exact.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoxXYXY;
use crate::mask::{mask_overlap, BinaryMask, MaskError};
use crate::store::{CocoAnnotation, CocoDocument, StoreError};

/// Detections kept per image, highest score first.
pub const MAX_DETS: usize = 100;

/// 0.50, 0.55, ..., 0.95 as percentages.
pub const IOU_THRESHOLDS: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    Mask,
    Box,
}

impl std::str::FromStr for IouKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mask" | "segm" => Ok(IouKind::Mask),
            "box" | "bbox" => Ok(IouKind::Box),
            _ => Err(format!("unknown iou kind '{s}' (expected mask or box)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions are not sorted by descending score (ties by id) at position {0}")]
    Unsorted(usize),
    #[error("prediction {annotation} refers to image {image}, which is not in the ground truth")]
    UnknownImage { annotation: u64, image: u64 },
    #[error("annotation {annotation}: mask is {mask_h}x{mask_w} but image {image} is {img_h}x{img_w}")]
    DimensionMismatch {
        annotation: u64,
        image: u64,
        mask_h: u32,
        mask_w: u32,
        img_h: u32,
        img_w: u32,
    },
    #[error("annotation {0} is a crowd region; crowd annotations are not supported")]
    Crowd(u64),
    #[error("ground truth has no annotations")]
    EmptyGroundTruth,
    #[error("suite has no datasets")]
    EmptySuite,
    #[error("invalid document: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// One prediction or ground-truth instance, ready for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub id: u64,
    pub score: f64,
    pub mask: BinaryMask,
    pub bbox: BoxXYXY,
}

impl EvalInstance {
    pub fn from_annotation(a: &CocoAnnotation) -> Result<Self, EvalError> {
        let mask = BinaryMask::try_from(a.segmentation.clone()).map_err(|source| StoreError::MalformedRle {
            annotation: a.id,
            source,
        })?;
        let bbox = BoxXYXY::from_xywh(a.bbox).map_err(|_| StoreError::NegativeBbox(a.id))?;
        Ok(Self {
            id: a.id,
            score: a.score.unwrap_or(1.0),
            mask,
            bbox,
        })
    }
}

/// An IoU kept as a fraction so threshold tests and comparisons are exact
/// for masks.
#[derive(Debug, Clone, Copy)]
enum Iou {
    Pixels { inter: u64, union: u64 },
    Area(f64),
}

impl Iou {
    fn between(kind: IouKind, p: &EvalInstance, g: &EvalInstance) -> Result<Iou, EvalError> {
        Ok(match kind {
            IouKind::Mask => {
                let o = mask_overlap(&p.mask, &g.mask)?;
                Iou::Pixels {
                    inter: o.intersection,
                    union: o.union,
                }
            }
            IouKind::Box => Iou::Area(crate::geometry::box_iou(&p.bbox, &g.bbox)),
        })
    }

    fn meets(self, pct: u32) -> bool {
        match self {
            Iou::Pixels { inter, union } => union > 0 && 100 * inter as u128 >= pct as u128 * union as u128,
            Iou::Area(v) => v * 100.0 >= pct as f64,
        }
    }

    fn cmp(self, other: Iou) -> Ordering {
        match (self, other) {
            (Iou::Pixels { inter: a, union: b }, Iou::Pixels { inter: c, union: d }) => {
                // zero-union pairs have IoU 0
                let (a, b) = if b == 0 { (0, 1) } else { (a, b) };
                let (c, d) = if d == 0 { (0, 1) } else { (c, d) };
                (a as u128 * d as u128).cmp(&(c as u128 * b as u128))
            }
            (Iou::Area(x), Iou::Area(y)) => x.total_cmp(&y),
            _ => unreachable!("one IoU kind per evaluation"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// True positive flag per prediction, in input order.
    pub tp: Vec<bool>,
    /// Matched ground-truth id per prediction.
    pub matched_gt: Vec<Option<u64>>,
    pub unmatched_gt: usize,
}

fn check_sorted(preds: &[EvalInstance]) -> Result<(), EvalError> {
    for (i, w) in preds.windows(2).enumerate() {
        let ok = match w[0].score.total_cmp(&w[1].score) {
            Ordering::Greater => true,
            Ordering::Equal => w[0].id <= w[1].id,
            Ordering::Less => false,
        };
        if !ok {
            return Err(EvalError::Unsorted(i + 1));
        }
    }
    Ok(())
}

/// Greedy COCO matching of one image's predictions of one category.
pub fn match_greedy(
    preds: &[EvalInstance],
    gts: &[EvalInstance],
    iou_pct: u32,
    kind: IouKind,
) -> Result<MatchResult, EvalError> {
    check_sorted(preds)?;
    let ious = iou_matrix(preds, gts, kind)?;
    Ok(match_with(&ious, gts, iou_pct))
}

fn iou_matrix(preds: &[EvalInstance], gts: &[EvalInstance], kind: IouKind) -> Result<Vec<Vec<Iou>>, EvalError> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| Iou::between(kind, p, g)).collect())
        .collect()
}

fn match_with(ious: &[Vec<Iou>], gts: &[EvalInstance], iou_pct: u32) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(ious.len());
    let mut matched_gt = Vec::with_capacity(ious.len());
    for row in ious {
        let mut best: Option<usize> = None;
        for (j, &iou) in row.iter().enumerate() {
            if taken[j] || !iou.meets(iou_pct) {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) => match iou.cmp(row[b]) {
                    Ordering::Greater => Some(j),
                    Ordering::Equal if gts[j].id < gts[b].id => Some(j),
                    _ => Some(b),
                },
            };
        }
        if let Some(j) = best {
            taken[j] = true;
        }
        tp.push(best.is_some());
        matched_gt.push(best.map(|j| gts[j].id));
    }
    MatchResult {
        tp,
        matched_gt,
        unmatched_gt: taken.iter().filter(|t| !**t).count(),
    }
}

/// 101-point interpolated AP over flags ordered by descending score.
///
/// `None` when there is nothing to measure (no ground truth and no
/// predictions).
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0u64;
    let mut recall_tp = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as u64;
        recall_tp.push(tp);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100u64 {
        // first rank whose recall reaches r / 100
        while k < recall_tp.len() && 100 * recall_tp[k] < r * num_gt as u64 {
            k += 1;
        }
        if k < precision.len() {
            sum += precision[k];
        }
    }
    Some(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category_id: u64,
    pub name: String,
    pub num_gt: usize,
    /// AP per entry of [`IOU_THRESHOLDS`].
    pub ap: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub iou_kind: IouKind,
    pub max_dets: usize,
    pub iou_thresholds: Vec<f64>,
    pub categories: Vec<CategoryAp>,
    /// Mean over categories with ground truth, then over thresholds.
    pub map: f64,
    /// Mean AP per threshold across categories.
    pub ap_per_threshold: Vec<f64>,
    /// Predictions whose phrase matched no ground-truth category.
    pub dropped_predictions: usize,
    pub unmatched_phrases: Vec<String>,
}

fn normalize(name: &str) -> String {
    name.trim().to_lowercase()
}

struct Pred<'a> {
    image_id: u64,
    category_id: u64,
    inst: EvalInstance,
    ann: &'a CocoAnnotation,
}

pub fn evaluate_dataset(
    dataset: &str,
    preds: &CocoDocument,
    gts: &CocoDocument,
    kind: IouKind,
) -> Result<DatasetReport, EvalError> {
    gts.validate()?;
    for a in gts.annotations.iter().chain(&preds.annotations) {
        if a.iscrowd != 0 {
            return Err(EvalError::Crowd(a.id));
        }
    }
    if gts.annotations.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let images: BTreeMap<u64, (u32, u32)> = gts.images.iter().map(|i| (i.id, (i.height, i.width))).collect();

    let gt_by_name: BTreeMap<String, u64> = gts.categories.iter().map(|c| (normalize(&c.name), c.id)).collect();
    let pred_cat: BTreeMap<u64, Option<u64>> = preds
        .categories
        .iter()
        .map(|c| (c.id, gt_by_name.get(&normalize(&c.name)).copied()))
        .collect();

    let mut dropped = 0;
    let mut unmatched_phrases = BTreeSet::new();
    let mut per_image: BTreeMap<u64, Vec<Pred>> = BTreeMap::new();
    for a in &preds.annotations {
        let &(h, w) = images.get(&a.image_id).ok_or(EvalError::UnknownImage {
            annotation: a.id,
            image: a.image_id,
        })?;
        let inst = EvalInstance::from_annotation(a)?;
        if inst.mask.height() != h || inst.mask.width() != w {
            return Err(EvalError::DimensionMismatch {
                annotation: a.id,
                image: a.image_id,
                mask_h: inst.mask.height(),
                mask_w: inst.mask.width(),
                img_h: h,
                img_w: w,
            });
        }
        match pred_cat.get(&a.category_id) {
            Some(Some(c)) => per_image.entry(a.image_id).or_default().push(Pred {
                image_id: a.image_id,
                category_id: *c,
                inst,
                ann: a,
            }),
            Some(None) => {
                dropped += 1;
                let name = preds.category_name(a.category_id).unwrap_or_default();
                unmatched_phrases.insert(normalize(name));
            }
            None => {
                return Err(StoreError::DanglingCategory {
                    annotation: a.id,
                    category: a.category_id,
                }
                .into())
            }
        }
    }
    if dropped > 0 {
        tracing::warn!(dataset, dropped, "predictions with no matching ground-truth category");
    }

    let by_rank = |a: &Pred, b: &Pred| {
        b.inst
            .score
            .total_cmp(&a.inst.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.ann.id.cmp(&b.ann.id))
    };
    let mut kept: Vec<Pred> = Vec::new();
    for (_, mut v) in per_image {
        v.sort_by(by_rank);
        v.truncate(MAX_DETS);
        kept.extend(v);
    }

    let mut gt_groups: BTreeMap<(u64, u64), Vec<EvalInstance>> = BTreeMap::new();
    for a in &gts.annotations {
        gt_groups
            .entry((a.category_id, a.image_id))
            .or_default()
            .push(EvalInstance::from_annotation(a)?);
    }
    let mut pred_groups: BTreeMap<(u64, u64), Vec<&Pred>> = BTreeMap::new();
    for p in &kept {
        pred_groups.entry((p.category_id, p.image_id)).or_default().push(p);
    }

    let mut categories = Vec::new();
    for c in &gts.categories {
        let keys: Vec<(u64, u64)> = gt_groups.keys().filter(|k| k.0 == c.id).copied().collect();
        let num_gt: usize = keys.iter().map(|k| gt_groups[k].len()).sum();
        if num_gt == 0 {
            continue;
        }
        // IoUs per image, computed once for all thresholds
        let mut units = Vec::new();
        let empty = Vec::new();
        for ((_, image), preds) in pred_groups.range((c.id, 0)..=(c.id, u64::MAX)) {
            let gts = gt_groups.get(&(c.id, *image)).unwrap_or(&empty);
            let insts: Vec<EvalInstance> = preds.iter().map(|p| p.inst.clone()).collect();
            let ious = iou_matrix(&insts, gts, kind)?;
            units.push((preds, gts, ious));
        }
        let mut ap = Vec::with_capacity(IOU_THRESHOLDS.len());
        for &t in &IOU_THRESHOLDS {
            let mut ranked: Vec<(&Pred, bool)> = Vec::new();
            for (preds, gts, ious) in &units {
                let m = match_with(ious, gts, t);
                ranked.extend(preds.iter().copied().zip(m.tp));
            }
            ranked.sort_by(|a, b| by_rank(a.0, b.0));
            let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            ap.push(average_precision(&flags, num_gt).expect("num_gt > 0"));
        }
        let mean = ap.iter().sum::<f64>() / ap.len() as f64;
        categories.push(CategoryAp {
            category_id: c.id,
            name: c.name.clone(),
            num_gt,
            ap,
            mean,
        });
    }

    let n = categories.len() as f64;
    let ap_per_threshold: Vec<f64> = (0..IOU_THRESHOLDS.len())
        .map(|t| categories.iter().map(|c| c.ap[t]).sum::<f64>() / n)
        .collect();
    let map = ap_per_threshold.iter().sum::<f64>() / ap_per_threshold.len() as f64;
    Ok(DatasetReport {
        dataset: dataset.to_string(),
        iou_kind: kind,
        max_dets: MAX_DETS,
        iou_thresholds: IOU_THRESHOLDS.iter().map(|&t| t as f64 / 100.0).collect(),
        categories,
        map,
        ap_per_threshold,
        dropped_predictions: dropped,
        unmatched_phrases: unmatched_phrases.into_iter().collect(),
    })
}

/// Arithmetic mean of per-dataset scores.
pub fn evaluate_suite(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetReport>,
    pub suite_mean: f64,
    pub aggregation: String,
}

impl EvalReport {
    pub fn new(datasets: Vec<DatasetReport>) -> Result<Self, EvalError> {
        let maps: Vec<f64> = datasets.iter().map(|d| d.map).collect();
        Ok(Self {
            suite_mean: evaluate_suite(&maps)?,
            datasets,
            aggregation: "suite mean = arithmetic mean of per-dataset mAP".into(),
        })
    }

    /// Table row with values in percent.
    pub fn row(&self, label: &str) -> SuiteRow {
        SuiteRow {
            label: label.to_string(),
            scores: self.datasets.iter().map(|d| (d.dataset.clone(), d.map * 100.0)).collect(),
            reported_mean: None,
        }
    }
}

/// A labelled row of per-dataset scores in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub scores: Vec<(String, f64)>,
    /// Mean quoted alongside externally sourced rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_mean: Option<f64>,
}

impl SuiteRow {
    pub fn mean(&self) -> Result<f64, EvalError> {
        let v: Vec<f64> = self.scores.iter().map(|s| s.1).collect();
        evaluate_suite(&v)
    }
}

/// Suite rows as stored on disk: shared dataset names, then scores per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFile {
    pub datasets: Vec<String>,
    pub rows: Vec<SuiteFileRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFileRow {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    pub scores: Vec<f64>,
}

impl SuiteFile {
    pub fn rows(&self) -> Result<Vec<SuiteRow>, String> {
        self.rows
            .iter()
            .map(|r| {
                if r.scores.len() != self.datasets.len() {
                    return Err(format!(
                        "row '{}' has {} scores for {} datasets",
                        r.label,
                        r.scores.len(),
                        self.datasets.len()
                    ));
                }
                Ok(SuiteRow {
                    label: r.label.clone(),
                    scores: self.datasets.iter().cloned().zip(r.scores.iter().copied()).collect(),
                    reported_mean: r.mean,
                })
            })
            .collect()
    }
}

/// Bundled published rows of the segmentation-in-the-wild suite, in the
/// [`SuiteFile`] format.
pub const REPORTED_SUITE_JSON: &str = include_str!("../data/sginw_reported.json");

/// Published per-dataset mask AP rows of the segmentation-in-the-wild suite.
pub fn reported_rows() -> Vec<SuiteRow> {
    let file: SuiteFile = serde_json::from_str(REPORTED_SUITE_JSON).expect("bundled table parses");
    file.rows().expect("bundled table is rectangular")
}

/// Aligned text table: one row per entry, a mean column, then one column
/// per dataset (taken from the first row), all to one decimal.
pub fn render_table(rows: &[SuiteRow]) -> Result<String, EvalError> {
    let Some(first) = rows.first() else {
        return Err(EvalError::EmptySuite);
    };
    let mut header = vec!["method".to_string(), "mean".to_string()];
    header.extend(first.scores.iter().map(|s| s.0.clone()));
    let mut lines = vec![header];
    for r in rows {
        let lookup: BTreeMap<&str, f64> = r.scores.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let mut line = vec![r.label.clone(), format!("{:.1}", r.mean()?)];
        for (name, _) in &first.scores {
            line.push(lookup.get(name.as_str()).map_or("-".into(), |v| format!("{v:.1}")));
        }
        lines.push(line);
    }
    let cols = lines[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        writeln!(out, "{}", cells.join(" | ").trim_end()).unwrap();
    }
    Ok(out)
}
