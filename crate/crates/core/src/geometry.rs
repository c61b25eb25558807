//! Axis-aligned boxes and packed binary masks.
//!
//! Box IoU is analytic (closed intervals, area `(x_max - x_min) * (y_max - y_min)`).
//! Masks are only built when a pixel grid is genuinely needed, using the
//! pixel-center rule: pixel `(i, j)` is covered when `(i + 0.5, j + 0.5)` lies
//! inside the box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) || x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox(coords));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from two arbitrary corners, ordering the coordinates.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips the box to `[0, width] x [0, height]`. A box entirely outside
    /// collapses to a zero-area box on the nearest border.
    pub fn clip(&self, width: f64, height: f64) -> BoundingBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BoundingBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn scale(&self, factor: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes; 0 when the union has zero area.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Row-major bit mask packed into 64-bit words. Bits past `width * height`
/// are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMask(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        let bits = width as usize * height as usize;
        Ok(Self {
            width,
            height,
            words: vec![0; bits.div_ceil(64)],
        })
    }

    pub fn from_bits(width: u32, height: u32, bits: &[bool]) -> Result<Self> {
        let mut mask = Self::new(width, height)?;
        if bits.len() != mask.len() {
            return Err(Error::InvalidMask(format!(
                "expected {} bits for {width}x{height}, got {}",
                mask.len(),
                bits.len()
            )));
        }
        for (i, &b) in bits.iter().enumerate() {
            if b {
                mask.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(mask)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        let i = y as usize * self.width as usize + x as usize;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = y as usize * self.width as usize + x as usize;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Sets bits `[start, end)` of the flat bit array.
    fn fill_range(&mut self, start: usize, end: usize) {
        let mut i = start;
        while i < end {
            let word = i / 64;
            let offset = i % 64;
            let span = (64 - offset).min(end - i);
            let bits = if span == 64 {
                u64::MAX
            } else {
                ((1u64 << span) - 1) << offset
            };
            self.words[word] |= bits;
            i += span;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn iter_row(&self, y: u32) -> impl Iterator<Item = bool> + '_ {
        (0..self.width).map(move |x| self.get(x, y))
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::MaskShape {
                left_width: self.width,
                left_height: self.height,
                right_width: other.width,
                right_height: other.height,
            });
        }
        Ok(())
    }

    /// Returns `(|a AND b|, |a OR b|)`.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        self.check_shape(other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (a, b) in self.words.iter().zip(&other.words) {
            inter += (a & b).count_ones() as u64;
            union += (a | b).count_ones() as u64;
        }
        Ok((inter, union))
    }
}

/// IoU of two equally sized masks. Two empty masks are defined to match
/// perfectly (IoU 1).
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = a.overlap_counts(b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Index range of pixels whose centers `(i + 0.5)` fall inside `[lo, hi]`,
/// restricted to `[0, n)`.
fn covered_pixels(lo: f64, hi: f64, n: u32) -> (u32, u32) {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    if last < first {
        (0, 0)
    } else {
        (first as u32, last as u32 + 1)
    }
}

/// Rasterizes the union of `boxes` onto a `width x height` grid.
pub fn rasterize_boxes(boxes: &[BoundingBox], width: u32, height: u32) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(width, height)?;
    for b in boxes {
        let b = b.clip(width as f64, height as f64);
        let (x0, x1) = covered_pixels(b.x_min, b.x_max, width);
        let (y0, y1) = covered_pixels(b.y_min, b.y_max, height);
        if x0 >= x1 {
            continue;
        }
        for y in y0..y1 {
            let row = y as usize * width as usize;
            mask.fill_range(row + x0 as usize, row + x1 as usize);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    /// Counts unit cells covered by integer-cornered boxes.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let inside = |bb: &BoundingBox, x: i64, y: i64| {
            (x as f64) >= bb.x_min()
                && ((x + 1) as f64) <= bb.x_max()
                && (y as f64) >= bb.y_min()
                && ((y + 1) as f64) <= bb.y_max()
        };
        let (mut inter, mut union) = (0u64, 0u64);
        for x in 0..64 {
            for y in 0..64 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn box_iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        // 50 shared cells out of 150 covered.
        assert_eq!(raster_iou(&a, &b), 50.0 / 150.0);
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = bx(3.0, 3.0, 3.0, 3.0);
        assert_eq!(box_iou(&p, &p), 0.0);
        let line = bx(0.0, 0.0, 10.0, 0.0);
        assert_eq!(box_iou(&line, &bx(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BoundingBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, f64::INFINITY).is_err());
        assert!(BoundingBox::try_from([0.0, 5.0, 1.0, 4.0]).is_err());
    }

    #[test]
    fn mask_iou_examples() {
        let mut a = BinaryMask::new(20, 20).unwrap();
        let mut b = BinaryMask::new(20, 20).unwrap();
        // a covers flat bits 0..100, b covers 50..150: 50 shared, 150 in the union.
        for i in 0..100u32 {
            a.set(i % 20, i / 20, true);
        }
        for i in 50..150u32 {
            b.set(i % 20, i / 20, true);
        }
        let (inter, union) = a.overlap_counts(&b).unwrap();
        assert_eq!((inter, union), (50, 150));
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);

        let mut c = BinaryMask::new(20, 20).unwrap();
        c.set(19, 19, true);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);

        let empty = BinaryMask::new(20, 20).unwrap();
        assert_eq!(mask_iou(&empty, &empty.clone()).unwrap(), 1.0);
    }

    #[test]
    fn mask_shape_mismatch_names_both_shapes() {
        let a = BinaryMask::new(4, 5).unwrap();
        let b = BinaryMask::new(5, 4).unwrap();
        let err = mask_iou(&a, &b).unwrap_err().to_string();
        assert!(err.contains("4x5") && err.contains("5x4"), "{err}");
    }

    #[test]
    fn mask_requires_positive_dims() {
        assert!(BinaryMask::new(0, 3).is_err());
        assert!(BinaryMask::from_bits(2, 2, &[true; 3]).is_err());
    }

    #[test]
    fn rasterize_examples() {
        let empty = rasterize_boxes(&[], 4, 4).unwrap();
        assert_eq!(empty.count_ones(), 0);

        let full = rasterize_boxes(&[bx(0.0, 0.0, 4.0, 4.0)], 4, 4).unwrap();
        assert_eq!(full.count_ones(), 16);

        let m = rasterize_boxes(&[bx(0.0, 0.0, 2.0, 1.0)], 4, 4).unwrap();
        assert_eq!(m.count_ones(), 2);
        assert!(m.get(0, 0) && m.get(1, 0));
    }

    #[test]
    fn rasterize_clips_to_image() {
        let m = rasterize_boxes(&[bx(-10.0, -10.0, 100.0, 1.0)], 7, 3).unwrap();
        assert_eq!(m.count_ones(), 7);
        let outside = rasterize_boxes(&[bx(50.0, 50.0, 60.0, 60.0)], 7, 3).unwrap();
        assert_eq!(outside.count_ones(), 0);
    }

    /// Per-pixel center test, independent of the row-fill path.
    fn rasterize_naive(boxes: &[BoundingBox], w: u32, h: u32) -> Vec<bool> {
        let mut out = vec![false; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                out[(y * w + x) as usize] = boxes.iter().any(|b| {
                    cx >= b.x_min() && cx <= b.x_max() && cy >= b.y_min() && cy <= b.y_max()
                });
            }
        }
        out
    }

    fn arb_box(max: f64) -> impl Strategy<Value = BoundingBox> {
        (-5.0..max, -5.0..max, 0.0..max, 0.0..max)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
    }

    fn arb_int_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..64, 0u32..64, 0u32..64, 0u32..64).prop_map(|(a, b, c, d)| {
            BoundingBox::from_corners(a as f64, b as f64, c as f64, d as f64).unwrap()
        })
    }

    proptest! {
        #[test]
        fn box_iou_symmetric(a in arb_box(50.0), b in arb_box(50.0)) {
            prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
        }

        #[test]
        fn box_iou_self_is_one(a in arb_box(50.0)) {
            prop_assume!(a.area() > 0.0);
            prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn box_iou_matches_pixel_oracle(a in arb_int_box(), b in arb_int_box()) {
            prop_assert!((box_iou(&a, &b) - raster_iou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn rasterize_matches_naive(boxes in prop::collection::vec(arb_box(30.0), 0..5), w in 1u32..40, h in 1u32..40) {
            let fast = rasterize_boxes(&boxes, w, h).unwrap();
            let naive = BinaryMask::from_bits(w, h, &rasterize_naive(&boxes, w, h)).unwrap();
            prop_assert_eq!(fast, naive);
        }

        #[test]
        fn rasterize_monotone(boxes in prop::collection::vec(arb_box(30.0), 1..6)) {
            let mut prev = 0;
            for n in 0..=boxes.len() {
                let count = rasterize_boxes(&boxes[..n], 32, 32).unwrap().count_ones();
                prop_assert!(count >= prev);
                prev = count;
            }
        }

        #[test]
        fn mask_iou_symmetric(bits_a in prop::collection::vec(any::<bool>(), 96), bits_b in prop::collection::vec(any::<bool>(), 96)) {
            let a = BinaryMask::from_bits(12, 8, &bits_a).unwrap();
            let b = BinaryMask::from_bits(12, 8, &bits_b).unwrap();
            prop_assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
        }
    }
}
