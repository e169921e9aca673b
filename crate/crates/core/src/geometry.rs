//! Axis-aligned box arithmetic, pairwise IoU and greedy non-maximum suppression.
//!
//! Boxes use continuous corner coordinates `(x1, y1, x2, y2)` with no `+1`
//! pixel inset. Zero-area boxes are valid data; their IoU with anything is 0.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x2 < x1 || y2 < y1 {
            return Err(invalid("negative extent"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from center and size, clipping nothing.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        Self {
            x1,
            y1,
            x2: self.x2.clamp(x1, width.max(x1)),
            y2: self.y2.clamp(y1, height.max(y1)),
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

#[inline]
pub fn area(b: &BoundingBox) -> f64 {
    (b.x2 - b.x1) * (b.y2 - b.y1)
}

#[inline]
fn intersection(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

#[inline]
fn iou_with_areas(a: &BoundingBox, area_a: f64, b: &BoundingBox, area_b: f64) -> f64 {
    let inter = intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Intersection over union; 0 when the union is empty.
#[inline]
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    iou_with_areas(a, area(a), b, area(b))
}

/// Dense symmetric `n x n` IoU matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUMatrix {
    n: usize,
    values: Vec<f64>,
}

impl IoUMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

pub fn iou_matrix(boxes: &[BoundingBox]) -> Result<IoUMatrix> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("iou_matrix requires at least one box"));
    }
    let n = boxes.len();
    let areas: Vec<f64> = boxes.iter().map(area).collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = iou_with_areas(&boxes[i], areas[i], &boxes[i], areas[i]);
        for j in (i + 1)..n {
            let v = iou_with_areas(&boxes[i], areas[i], &boxes[j], areas[j]);
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(IoUMatrix { n, values })
}

/// Indices sorted by descending score, equal scores by ascending index.
pub(crate) fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS. Returns kept indices in descending score order.
///
/// A box is suppressed when its IoU with an already kept box is strictly
/// greater than `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::length("nms scores", boxes.len(), scores.len()));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::contract(format!(
            "nms iou_threshold must be in (0, 1], got {iou_threshold}"
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("nms score at index {i}")));
    }
    Ok(nms_unchecked(boxes, scores, iou_threshold, usize::MAX))
}

/// NMS without argument validation; stops once `limit` boxes are kept.
pub(crate) fn nms_unchecked(
    boxes: &[BoundingBox],
    scores: &[f64],
    iou_threshold: f64,
    limit: usize,
) -> Vec<usize> {
    let order = descending_order(scores);
    let areas: Vec<f64> = boxes.iter().map(area).collect();
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if keep.len() >= limit {
            break;
        }
        let (bi, ai) = (&boxes[i], areas[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou_with_areas(bi, ai, &boxes[j], areas[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bb(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(area(&bb(5.0, 5.0, 5.0, 9.0)), 0.0);
        assert_eq!(area(&bb(0.0, 0.0, 3.0, 7.0)), 21.0);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(BoundingBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BoundingBox::new(0.0, f64::INFINITY, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[0, 0, -1, 1]").is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&a, &bb(0.0, 5.0, 10.0, 15.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_area_iou_is_zero() {
        let z = bb(5.0, 5.0, 5.0, 9.0);
        assert_eq!(iou(&z, &z), 0.0);
        assert_eq!(iou(&z, &bb(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn matrix_examples() {
        assert!(matches!(iou_matrix(&[]), Err(Error::EmptyInput(_))));
        let m = iou_matrix(&[bb(0.0, 0.0, 1.0, 1.0), bb(5.0, 5.0, 6.0, 6.0)]).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 1.0]);
        let copies = vec![bb(1.0, 2.0, 3.0, 5.0); 4];
        let m = iou_matrix(&copies).unwrap();
        assert!((0..4).all(|i| m.row(i).iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[bb(0.0, 0.0, 1.0, 1.0)], &[0.3], 0.5).unwrap(), vec![0]);
        let b = bb(0.0, 0.0, 4.0, 4.0);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        assert!(matches!(
            nms(&[b, b], &[0.8], 0.5),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(nms(&[b], &[f64::NAN], 0.5).is_err());
        assert!(nms(&[b], &[0.1], 0.0).is_err());
        assert_eq!(nms(&[], &[], 0.5).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let b = bb(0.0, 0.0, 4.0, 4.0);
        assert_eq!(nms(&[b, b, b], &[0.5, 0.5, 0.5], 0.5).unwrap(), vec![0]);
        let far = bb(10.0, 10.0, 12.0, 12.0);
        assert_eq!(nms(&[far, b], &[0.5, 0.5], 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn nms_threshold_is_strict() {
        // IoU exactly 1/3 is kept at threshold 1/3.
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(0.0, 5.0, 10.0, 15.0);
        let t = iou(&a, &b);
        assert_eq!(nms(&[a, b], &[0.9, 0.8], t).unwrap(), vec![0, 1]);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if area(&a) > 0.0 {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
        }

        #[test]
        fn iou_translation_and_scale_invariant(
            a in arb_box(), b in arb_box(),
            dx in -50.0..50.0f64, dy in -50.0..50.0f64, s in 0.25..4.0f64,
        ) {
            let t = |x: &BoundingBox| bb(
                s * x.x1() + dx, s * x.y1() + dy, s * x.x2() + dx, s * x.y2() + dy,
            );
            prop_assert!((iou(&a, &b) - iou(&t(&a), &t(&b))).abs() < 1e-9);
        }

        #[test]
        fn nms_suppression_closed(
            boxes in prop::collection::vec(arb_box(), 1..40),
            seed in any::<u64>(),
            thr in 0.05..1.0f64,
        ) {
            let scores: Vec<f64> = (0..boxes.len())
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 11) % 1000) as f64 / 1000.0)
                .collect();
            let keep = nms(&boxes, &scores, thr).unwrap();
            for (r, &j) in keep.iter().enumerate() {
                for &i in &keep[..r] {
                    prop_assert!(iou(&boxes[i], &boxes[j]) <= thr);
                    prop_assert!(scores[i] >= scores[j]);
                }
            }
        }

        #[test]
        fn nms_invariant_under_monotone_transform(
            boxes in prop::collection::vec(arb_box(), 1..40),
            raw in prop::collection::vec(-3.0..3.0f64, 40),
        ) {
            let scores = &raw[..boxes.len()];
            let mapped: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-2.0 * s).exp()) * 7.0 + 1.0).collect();
            prop_assert_eq!(nms(&boxes, scores, 0.5).unwrap(), nms(&boxes, &mapped, 0.5).unwrap());
        }
    }
}
