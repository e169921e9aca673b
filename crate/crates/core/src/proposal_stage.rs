//! Proposal-stage re-scoring: class-agnostic localization quality from
//! proposal overlap, fused with objectness before NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{area, nms_unchecked, BoundingBox};

/// A first-stage proposal: box, objectness in `[0, 1]` and its region feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub feature: Vec<f32>,
}

impl RegionProposal {
    pub fn new(bbox: BoundingBox, objectness: f64, feature: Vec<f32>) -> Result<Self> {
        if !objectness.is_finite() || !(0.0..=1.0).contains(&objectness) {
            return Err(Error::contract(format!(
                "objectness must be in [0, 1], got {objectness}"
            )));
        }
        if let Some(i) = feature.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("proposal feature entry {i}")));
        }
        Ok(Self {
            bbox,
            objectness,
            feature,
        })
    }
}

/// Per-proposal localization quality, each entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QualityVector(Vec<f64>);

impl QualityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("quality {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Entries at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> QualityVector {
        QualityVector(indices.iter().map(|&i| self.0[i]).collect())
    }
}

impl std::ops::Index<usize> for QualityVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Boxes with positive area as columns, sorted by `x1`.
struct Columns {
    x1: Vec<f64>,
    y1: Vec<f64>,
    x2: Vec<f64>,
    y2: Vec<f64>,
    area: Vec<f64>,
}

impl Columns {
    /// IoU of box `a` with the boxes that follow it, one per slot of `out`.
    /// Every such box must start before box `a` ends along x.
    fn ious_after(&self, a: usize, out: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the CPU supports AVX, checked just above.
            return unsafe { self.ious_after_avx(a, out) };
        }
        self.ious_after_body(a, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx")]
    unsafe fn ious_after_avx(&self, a: usize, out: &mut [f64]) {
        self.ious_after_body(a, out)
    }

    // Plain comparisons rather than `min`/`max` so the loop vectorizes; the
    // inputs are finite, where both agree.
    #[inline(always)]
    fn ious_after_body(&self, a: usize, out: &mut [f64]) {
        let (ay1, ax2, ay2, aa) = (self.y1[a], self.x2[a], self.y2[a], self.area[a]);
        let range = a + 1..a + 1 + out.len();
        let rows = self.x1[range.clone()]
            .iter()
            .zip(&self.y1[range.clone()])
            .zip(&self.x2[range.clone()])
            .zip(&self.y2[range.clone()])
            .zip(&self.area[range]);
        for (o, ((((&bx1, &by1), &bx2), &by2), &ba)) in out.iter_mut().zip(rows) {
            let top = if ay1 > by1 { ay1 } else { by1 };
            let bottom = if ay2 < by2 { ay2 } else { by2 };
            let h = bottom - top;
            let h = if h > 0.0 { h } else { 0.0 };
            let right = if ax2 < bx2 { ax2 } else { bx2 };
            let inter = (right - bx1) * h;
            let v = inter / (aa + ba - inter);
            *o = if v < 1.0 { v } else { 1.0 };
        }
    }
}

/// Mean IoU of each box with its `k` most-overlapping peers (excluding itself).
///
/// When fewer than `k` peers exist the mean runs over the `M - 1` available
/// overlaps; a lone box gets quality 0.
pub fn localization_quality(boxes: &[BoundingBox], k: usize) -> Result<QualityVector> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("localization_quality requires at least one box"));
    }
    if k == 0 {
        return Err(Error::contract("localization_quality requires k >= 1"));
    }
    Ok(QualityVector(quality_unchecked(boxes, k)))
}

pub(crate) fn quality_unchecked(boxes: &[BoundingBox], k: usize) -> Vec<f64> {
    let m = boxes.len();
    if m <= 1 {
        return vec![0.0; m];
    }
    let kk = k.min(m - 1);

    // Sweep over boxes sorted by x1: only pairs overlapping along x can have
    // positive IoU. Rows of top overlaps start at zero, which a zero overlap
    // never displaces and which leaves the sums unchanged.
    let mut order: Vec<usize> = (0..m).filter(|&i| area(&boxes[i]) > 0.0).collect();
    order.sort_by(|&a, &b| boxes[a].x1().total_cmp(&boxes[b].x1()).then(a.cmp(&b)));
    let col = |f: fn(&BoundingBox) -> f64| order.iter().map(|&i| f(&boxes[i])).collect::<Vec<f64>>();
    let sorted = Columns {
        x1: col(BoundingBox::x1),
        y1: col(BoundingBox::y1),
        x2: col(BoundingBox::x2),
        y2: col(BoundingBox::y2),
        area: col(area),
    };
    let n = order.len();
    // Column j holds every box's j-th largest overlap so far.
    let mut tops = vec![0.0; kk * n];
    let mut ious = Vec::new();
    for a in 0..n {
        let end = a + 1 + sorted.x1[a + 1..].partition_point(|&v| v < sorted.x2[a]);
        ious.clear();
        ious.resize(end - a - 1, 0.0);
        sorted.ious_after(a, &mut ious);
        for &v in &ious {
            if v > tops[(kk - 1) * n + a] {
                let mut pos = kk - 1;
                while pos > 0 && tops[(pos - 1) * n + a] < v {
                    tops[pos * n + a] = tops[(pos - 1) * n + a];
                    pos -= 1;
                }
                tops[pos * n + a] = v;
            }
        }
        insert_overlaps(&mut tops, n, a + 1, &mut ious);
    }
    let denom = kk as f64;
    let mut q = vec![0.0; m];
    for (j, &i) in order.iter().enumerate() {
        let sum = (0..kk).map(|c| tops[c * n + j]).sum::<f64>();
        q[i] = (sum / denom).clamp(0.0, 1.0);
    }
    q
}

/// Merges `values[t]` into the top-overlap columns of box `start + t`,
/// consuming `values`.
fn insert_overlaps(tops: &mut [f64], n: usize, start: usize, values: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked just above.
        return unsafe { insert_overlaps_avx(tops, n, start, values) };
    }
    insert_overlaps_body(tops, n, start, values)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn insert_overlaps_avx(tops: &mut [f64], n: usize, start: usize, values: &mut [f64]) {
    insert_overlaps_body(tops, n, start, values)
}

// One compare-exchange per column keeps each box's columns sorted descending.
#[inline(always)]
fn insert_overlaps_body(tops: &mut [f64], n: usize, start: usize, values: &mut [f64]) {
    for column in tops.chunks_exact_mut(n) {
        for (t, v) in column[start..start + values.len()].iter_mut().zip(values.iter_mut()) {
            let (hi, lo) = if *t > *v { (*t, *v) } else { (*v, *t) };
            *t = hi;
            *v = lo;
        }
    }
}

/// Arithmetic mean of objectness and quality, element-wise.
pub fn aggregate_objectness(objectness: &[f64], quality: &QualityVector) -> Result<Vec<f64>> {
    if objectness.len() != quality.len() {
        return Err(Error::length(
            "aggregate_objectness quality",
            objectness.len(),
            quality.len(),
        ));
    }
    Ok(objectness
        .iter()
        .zip(quality.as_slice())
        .map(|(o, q)| (o + q) / 2.0)
        .collect())
}

/// Survivors of the proposal stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSelection {
    /// Indices into the input proposal list, in descending score order.
    pub indices: Vec<usize>,
    /// Score each survivor was ranked by.
    pub scores: Vec<f64>,
    /// Localization quality of each survivor, computed on the full input set.
    pub quality: QualityVector,
}

/// NMS on `scores`, truncated to `keep_max` survivors.
pub(crate) fn select_proposals(
    boxes: &[BoundingBox],
    scores: &[f64],
    nms_iou: f64,
    keep_max: usize,
) -> Vec<usize> {
    nms_unchecked(boxes, scores, nms_iou, keep_max)
}

/// Quality-aware proposal filter: fuse objectness with overlap quality, run
/// NMS on the fused score, and keep at most `keep_max` survivors.
pub fn aggregated_proposal_filter(
    proposals: &[RegionProposal],
    k: usize,
    nms_iou: f64,
    keep_max: usize,
) -> Result<ProposalSelection> {
    if proposals.is_empty() {
        return Err(Error::EmptyInput("aggregated_proposal_filter requires proposals"));
    }
    if !(nms_iou > 0.0 && nms_iou <= 1.0) {
        return Err(Error::contract(format!("nms_iou must be in (0, 1], got {nms_iou}")));
    }
    if keep_max == 0 {
        return Err(Error::contract("keep_max must be positive"));
    }
    let boxes: Vec<BoundingBox> = proposals.iter().map(|p| p.bbox).collect();
    let objectness: Vec<f64> = proposals.iter().map(|p| p.objectness).collect();
    let quality = localization_quality(&boxes, k)?;
    let fused = aggregate_objectness(&objectness, &quality)?;
    let indices = select_proposals(&boxes, &fused, nms_iou, keep_max);
    Ok(ProposalSelection {
        scores: indices.iter().map(|&i| fused[i]).collect(),
        quality: quality.select(&indices),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Full matrix, sort each row's off-diagonal entries, average the top k.
    fn oracle(boxes: &[BoundingBox], k: usize) -> Vec<f64> {
        let m = boxes.len();
        (0..m)
            .map(|i| {
                let mut row: Vec<f64> = (0..m).filter(|&j| j != i).map(|j| iou(&boxes[i], &boxes[j])).collect();
                if row.is_empty() {
                    return 0.0;
                }
                row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let take = k.min(row.len());
                row[..take].iter().sum::<f64>() / take as f64
            })
            .collect()
    }

    #[test]
    fn identical_boxes_have_unit_quality() {
        let boxes = vec![bb(1.0, 1.0, 5.0, 6.0); 4];
        assert_eq!(localization_quality(&boxes, 3).unwrap().as_slice(), &[1.0; 4]);
    }

    #[test]
    fn disjoint_boxes_have_zero_quality() {
        let boxes: Vec<_> = (0..5).map(|i| bb(10.0 * i as f64, 0.0, 10.0 * i as f64 + 5.0, 5.0)).collect();
        for k in 1..7 {
            assert!(localization_quality(&boxes, k).unwrap().as_slice().iter().all(|&q| q == 0.0));
        }
    }

    #[test]
    fn edge_cases() {
        assert!(matches!(localization_quality(&[], 3), Err(Error::EmptyInput(_))));
        assert!(localization_quality(&[bb(0.0, 0.0, 1.0, 1.0)], 0).is_err());
        assert_eq!(localization_quality(&[bb(0.0, 0.0, 1.0, 1.0)], 3).unwrap().as_slice(), &[0.0]);
        // M - 1 < k: mean of the single available overlap.
        let q = localization_quality(&[bb(0.0, 0.0, 10.0, 10.0), bb(0.0, 5.0, 10.0, 15.0)], 3).unwrap();
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-15 && (q[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn jittered_clusters_match_oracle() {
        // Three objects with ten deterministic jitters each.
        let centers = [(50.0, 50.0, 40.0), (120.0, 80.0, 60.0), (60.0, 150.0, 30.0)];
        let mut boxes = Vec::new();
        for (c, &(cx, cy, s)) in centers.iter().enumerate() {
            for j in 0..10 {
                let t = (c * 10 + j) as f64;
                let dx = (t * 1.7).sin() * 0.15 * s;
                let dy = (t * 2.3).cos() * 0.15 * s;
                let ds = 1.0 + 0.1 * (t * 0.9).sin();
                boxes.push(BoundingBox::from_center(cx + dx, cy + dy, s * ds, s / ds).unwrap());
            }
        }
        let q = localization_quality(&boxes, 3).unwrap();
        for (a, b) in q.as_slice().iter().zip(oracle(&boxes, 3)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_objectness_examples() {
        let q = QualityVector::new(vec![0.95]).unwrap();
        assert!((aggregate_objectness(&[0.15], &q).unwrap()[0] - 0.55).abs() < 1e-15);
        let q = QualityVector::new(vec![0.37]).unwrap();
        assert_eq!(aggregate_objectness(&[0.37], &q).unwrap(), vec![0.37]);
        let q = QualityVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(aggregate_objectness(&[0.2, 0.8], &q).unwrap(), vec![0.6, 0.4]);
        assert!(matches!(
            aggregate_objectness(&[0.2], &q),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn proposal(b: BoundingBox, o: f64) -> RegionProposal {
        RegionProposal::new(b, o, vec![0.0; 2]).unwrap()
    }

    #[test]
    fn single_proposal_always_kept() {
        let sel = aggregated_proposal_filter(&[proposal(bb(0.0, 0.0, 3.0, 3.0), 0.0)], 3, 0.7, 10).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(sel.quality.as_slice(), &[0.0]);
    }

    #[test]
    fn fused_score_decides_between_duplicates() {
        // Proposal 1 has lower objectness but sits inside a tight cluster.
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let props = vec![
            proposal(bb(0.0, 0.0, 10.0, 14.0), 0.6),
            proposal(a, 0.5),
            proposal(a, 0.05),
            proposal(a, 0.05),
        ];
        let sel = aggregated_proposal_filter(&props, 2, 0.5, 10).unwrap();
        assert_eq!(sel.indices, vec![1]);
        assert_eq!(sel.quality[0], 1.0);
        // Plain objectness NMS keeps proposal 0 instead.
        let boxes: Vec<_> = props.iter().map(|p| p.bbox).collect();
        let o: Vec<_> = props.iter().map(|p| p.objectness).collect();
        assert_eq!(select_proposals(&boxes, &o, 0.5, 10), vec![0]);
    }

    #[test]
    fn keep_max_truncates() {
        let props: Vec<_> = (0..6)
            .map(|i| proposal(bb(20.0 * i as f64, 0.0, 20.0 * i as f64 + 5.0, 5.0), 0.1 * i as f64))
            .collect();
        let sel = aggregated_proposal_filter(&props, 3, 0.7, 2).unwrap();
        assert_eq!(sel.indices, vec![5, 4]);
        assert!(aggregated_proposal_filter(&props, 3, 0.7, 0).is_err());
        assert!(aggregated_proposal_filter(&[], 3, 0.7, 2).is_err());
    }

    #[test]
    fn rejects_bad_proposals() {
        assert!(RegionProposal::new(bb(0.0, 0.0, 1.0, 1.0), 1.5, vec![]).is_err());
        assert!(RegionProposal::new(bb(0.0, 0.0, 1.0, 1.0), 0.5, vec![f32::NAN]).is_err());
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<BoundingBox>> {
        prop::collection::vec(
            (0.0..60.0f64, 0.0..60.0f64, 0.0..30.0f64, 0.0..30.0f64)
                .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h)),
            1..30,
        )
    }

    proptest! {
        #[test]
        fn matches_oracle(boxes in arb_boxes(), k in 1usize..8) {
            let q = localization_quality(&boxes, k).unwrap();
            for (a, b) in q.as_slice().iter().zip(oracle(&boxes, k)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }

        #[test]
        fn duplicate_never_lowers_quality(boxes in arb_boxes(), k in 1usize..6, pick in any::<prop::sample::Index>()) {
            let i = pick.index(boxes.len());
            let before = localization_quality(&boxes, k).unwrap();
            let mut more = boxes.clone();
            more.push(boxes[i]);
            let after = localization_quality(&more, k).unwrap();
            prop_assert!(after[i] + 1e-12 >= before[i]);
        }

        #[test]
        fn large_k_is_row_mean(boxes in arb_boxes()) {
            let m = boxes.len();
            let q = localization_quality(&boxes, m.max(2)).unwrap();
            for i in 0..m {
                let mean = if m == 1 { 0.0 } else {
                    (0..m).filter(|&j| j != i).map(|j| iou(&boxes[i], &boxes[j])).sum::<f64>() / (m - 1) as f64
                };
                prop_assert!((q[i] - mean).abs() < 1e-12);
            }
        }

        #[test]
        fn constant_quality_keeps_objectness_order(boxes in arb_boxes(), o in prop::collection::vec(0.0..1.0f64, 30)) {
            let o = &o[..boxes.len()];
            let q = QualityVector::new(vec![0.4; boxes.len()]).unwrap();
            let fused = aggregate_objectness(o, &q).unwrap();
            prop_assert_eq!(select_proposals(&boxes, o, 0.7, 1000), select_proposals(&boxes, &fused, 0.7, 1000));
        }
    }
}
