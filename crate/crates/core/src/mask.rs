//! COCO uncompressed run-length encoding and run-wise mask set operations.
//!
//! Runs follow column-major pixel order and alternate 0-runs and 1-runs,
//! starting with a (possibly empty) 0-run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoxXYXY;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("malformed RLE: {0}")]
    Malformed(String),
    #[error("mask dimensions differ: {a_h}x{a_w} vs {b_h}x{b_w}")]
    DimensionMismatch { a_h: u32, a_w: u32, b_h: u32, b_w: u32 },
    #[error("bitmap must be at least 1x1 with height*width bits, got {height}x{width} and {len} bits")]
    InvalidBitmap { height: u32, width: u32, len: usize },
}

/// Dense binary image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(height: u32, width: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 || bits.len() != height as usize * width as usize {
            return Err(MaskError::InvalidBitmap {
                height,
                width,
                len: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: u32, width: u32) -> Result<Self, MaskError> {
        Self::new(height, width, vec![false; height as usize * width as usize])
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }
}

/// The `{"size": [h, w], "counts": [...]}` record as it appears on the wire,
/// before validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleRecord {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

/// Canonical run-length encoded mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RleRecord", into = "RleRecord")]
pub struct BinaryMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

impl TryFrom<RleRecord> for BinaryMask {
    type Error = MaskError;

    fn try_from(r: RleRecord) -> Result<Self, Self::Error> {
        BinaryMask::from_counts(r.size[0], r.size[1], r.counts)
    }
}

impl From<BinaryMask> for RleRecord {
    fn from(m: BinaryMask) -> Self {
        RleRecord {
            size: [m.height, m.width],
            counts: m.counts,
        }
    }
}

impl From<&BinaryMask> for RleRecord {
    fn from(m: &BinaryMask) -> Self {
        RleRecord {
            size: [m.height, m.width],
            counts: m.counts.clone(),
        }
    }
}

impl BinaryMask {
    /// Validates `counts` against the canonical-form invariants.
    pub fn from_counts(height: u32, width: u32, counts: Vec<u32>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::Malformed(format!(
                "size {height}x{width} must be at least 1x1"
            )));
        }
        if counts.is_empty() {
            return Err(MaskError::Malformed("counts is empty".into()));
        }
        if let Some(i) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(MaskError::Malformed(format!(
                "zero-length run at index {}",
                i + 1
            )));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(MaskError::Malformed(format!(
                "counts sum to {total}, expected {height}x{width} = {expected}"
            )));
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    pub fn empty(height: u32, width: u32) -> Result<Self, MaskError> {
        Self::from_counts(height, width, vec![height * width])
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn is_empty(&self) -> bool {
        self.counts.len() == 1
    }

    fn same_size(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(MaskError::DimensionMismatch {
                a_h: self.height,
                a_w: self.width,
                b_h: other.height,
                b_w: other.width,
            })
        }
    }

    /// Rasterizes a box: a pixel is inside when its center lies in
    /// `[x1, x2) x [y1, y2)`. Integer boxes therefore cover exactly their area.
    pub fn from_box(b: &BoxXYXY, height: u32, width: u32) -> Result<Self, MaskError> {
        let cols = pixel_span(b.x1(), b.x2(), width);
        let rows = pixel_span(b.y1(), b.y2(), height);
        if cols.is_empty() || rows.is_empty() {
            return Self::empty(height, width);
        }
        let h = height as u64;
        let mut runs = RunBuilder::default();
        runs.push(false, cols.start as u64 * h);
        for _ in cols.clone() {
            runs.push(false, rows.start as u64);
            runs.push(true, (rows.end - rows.start) as u64);
            runs.push(false, h - rows.end as u64);
        }
        runs.push(false, (width - cols.end) as u64 * h);
        runs.finish(height, width)
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.combine(other, |a, b| a && b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.combine(other, |a, b| a || b)
    }

    fn combine(&self, other: &BinaryMask, op: impl Fn(bool, bool) -> bool) -> Result<BinaryMask, MaskError> {
        self.same_size(other)?;
        let mut runs = RunBuilder::default();
        for (len, a, b) in RunPairs::new(&self.counts, &other.counts) {
            runs.push(op(a, b), len);
        }
        runs.finish(self.height, self.width)
    }
}

fn pixel_span(lo: f64, hi: f64, limit: u32) -> std::ops::Range<u32> {
    let clamp = |v: f64| v.max(0.0).min(limit as f64) as u32;
    let start = clamp((lo - 0.5).ceil());
    let end = clamp((hi - 0.5).ceil());
    start..end.max(start)
}

/// Accumulates runs and emits canonical counts (merging equal neighbours).
#[derive(Default)]
struct RunBuilder {
    counts: Vec<u64>,
    current: bool,
}

impl RunBuilder {
    fn push(&mut self, value: bool, len: u64) {
        if len == 0 {
            return;
        }
        if self.counts.is_empty() {
            if value {
                self.counts.push(0);
            }
            self.counts.push(len);
            self.current = value;
        } else if value == self.current {
            *self.counts.last_mut().unwrap() += len;
        } else {
            self.counts.push(len);
            self.current = value;
        }
    }

    fn finish(self, height: u32, width: u32) -> Result<BinaryMask, MaskError> {
        let counts = self
            .counts
            .into_iter()
            .map(|c| u32::try_from(c).map_err(|_| MaskError::Malformed("run exceeds u32".into())))
            .collect::<Result<Vec<_>, _>>()?;
        BinaryMask::from_counts(height, width, counts)
    }
}

/// Walks two run streams in lockstep, yielding `(length, value_a, value_b)` segments.
struct RunPairs<'a> {
    a: &'a [u32],
    b: &'a [u32],
    ia: usize,
    ib: usize,
    left_a: u64,
    left_b: u64,
}

impl<'a> RunPairs<'a> {
    fn new(a: &'a [u32], b: &'a [u32]) -> Self {
        Self {
            a,
            b,
            ia: 0,
            ib: 0,
            left_a: a[0] as u64,
            left_b: b[0] as u64,
        }
    }
}

impl Iterator for RunPairs<'_> {
    type Item = (u64, bool, bool);

    fn next(&mut self) -> Option<Self::Item> {
        // skip exhausted runs (only the leading 0-run may be empty)
        while self.left_a == 0 {
            self.ia += 1;
            self.left_a = *self.a.get(self.ia)? as u64;
        }
        while self.left_b == 0 {
            self.ib += 1;
            self.left_b = *self.b.get(self.ib)? as u64;
        }
        let step = self.left_a.min(self.left_b);
        let item = (step, self.ia % 2 == 1, self.ib % 2 == 1);
        self.left_a -= step;
        self.left_b -= step;
        Some(item)
    }
}

pub fn rle_encode(m: &Bitmap) -> BinaryMask {
    let (h, w) = (m.height as usize, m.width as usize);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for col in 0..w {
        for row in 0..h {
            let v = m.bits[row * w + col];
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    BinaryMask {
        height: m.height,
        width: m.width,
        counts,
    }
}

pub fn rle_decode(r: &BinaryMask) -> Bitmap {
    let (h, w) = (r.height as usize, r.width as usize);
    let mut bits = vec![false; h * w];
    let mut idx = 0usize;
    for (i, &c) in r.counts.iter().enumerate() {
        if i % 2 == 1 {
            for flat in idx..idx + c as usize {
                bits[(flat % h) * w + flat / h] = true;
            }
        }
        idx += c as usize;
    }
    Bitmap {
        height: r.height,
        width: r.width,
        bits,
    }
}

/// Validates and decodes raw counts.
pub fn rle_decode_counts(height: u32, width: u32, counts: Vec<u32>) -> Result<Bitmap, MaskError> {
    Ok(rle_decode(&BinaryMask::from_counts(height, width, counts)?))
}

pub fn mask_area(r: &BinaryMask) -> u64 {
    r.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
}

/// Exact intersection and union pixel counts of two masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskOverlap {
    pub intersection: u64,
    pub union: u64,
}

impl MaskOverlap {
    /// IoU as a float; 0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn mask_overlap(a: &BinaryMask, b: &BinaryMask) -> Result<MaskOverlap, MaskError> {
    a.same_size(b)?;
    let (mut intersection, mut union) = (0u64, 0u64);
    for (len, va, vb) in RunPairs::new(&a.counts, &b.counts) {
        if va && vb {
            intersection += len;
        }
        if va || vb {
            union += len;
        }
    }
    Ok(MaskOverlap {
        intersection,
        union,
    })
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    Ok(mask_overlap(a, b)?.iou())
}

/// Tightest box around the set pixels, `None` for an empty mask.
pub fn bbox_from_mask(r: &BinaryMask) -> Option<BoxXYXY> {
    let h = r.height as u64;
    let (mut min_col, mut max_col) = (u64::MAX, 0u64);
    let (mut min_row, mut max_row) = (u64::MAX, 0u64);
    let mut idx = 0u64;
    for (i, &c) in r.counts.iter().enumerate() {
        let c = c as u64;
        if i % 2 == 1 {
            let (first, last) = (idx, idx + c - 1);
            let (col_a, row_a) = (first / h, first % h);
            let (col_b, row_b) = (last / h, last % h);
            min_col = min_col.min(col_a);
            max_col = max_col.max(col_b);
            if col_a == col_b {
                min_row = min_row.min(row_a);
                max_row = max_row.max(row_b);
            } else {
                // a run wrapping a column boundary touches both the first and last row
                min_row = 0;
                max_row = h - 1;
            }
        }
        idx += c;
    }
    if min_col == u64::MAX {
        return None;
    }
    BoxXYXY::new(
        min_col as f64,
        min_row as f64,
        (max_col + 1) as f64,
        (max_row + 1) as f64,
    )
    .ok()
}
