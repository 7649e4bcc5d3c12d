//! Seeded input generators for the kernel benchmarks.

use groundseg_core::geometry::ScoredBox;
use groundseg_core::mask::{rle_encode, BinaryMask, Bitmap};
use groundseg_core::BoxXYXY;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bitmap made of a few filled rectangles, like a segmentation mask.
pub fn blob_bitmap(rng: &mut ChaCha8Rng, h: u32, w: u32) -> Bitmap {
    let mut bm = Bitmap::zeros(h, w).unwrap();
    for _ in 0..rng.random_range(1..4) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
        for r in r0..=r1 {
            for c in c0..=c1 {
                bm.set(r, c, true);
            }
        }
    }
    bm
}

pub fn blob_mask(rng: &mut ChaCha8Rng, h: u32, w: u32) -> BinaryMask {
    rle_encode(&blob_bitmap(rng, h, w))
}

pub fn detections(rng: &mut ChaCha8Rng, n: usize, phrases: &[&str]) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..600.0), rng.random_range(0.0..400.0));
            let (w, h) = (rng.random_range(5.0..120.0), rng.random_range(5.0..120.0));
            let b = BoxXYXY::new(x, y, x + w, y + h).unwrap();
            let p = phrases[rng.random_range(0..phrases.len())];
            ScoredBox::new(b, p, rng.random_range(0.0..1.0)).unwrap()
        })
        .collect()
}
