//! Box AP@50 with COCO-style 101-point interpolation, per-split mAP,
//! maximal proposal recall, score histograms and the added-latency benchmark.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{descending_order, iou, BoundingBox};
use crate::pipeline::{median, percentile, Detection, Engine, ImageOutput, ImageRecord, ScoredProposal, Switches};
use crate::prototypes::{ClassCatalog, Split};

pub const AP_IOU: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: u64,
    pub objects: Vec<GroundTruthObject>,
}

impl GroundTruthRecord {
    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        for o in &self.objects {
            let idx = catalog
                .index_of(o.class_id)
                .ok_or_else(|| Error::contract(format!("ground truth class {} not in catalog", o.class_id)))
                .map_err(|e| e.in_image(self.image_id))?;
            if catalog.split(idx) != o.split {
                return Err(Error::contract(format!("ground truth class {} has the wrong split", o.class_id))
                    .in_image(self.image_id));
            }
        }
        Ok(())
    }
}

/// Greedy matching of one image's detections: in descending score order
/// (ties by lower index) each detection claims the unmatched same-class
/// ground truth with the highest IoU, if that IoU is at least
/// `iou_threshold`. Returns one true-positive flag per detection.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    catalog: &ClassCatalog,
    iou_threshold: f64,
) -> Result<Vec<bool>> {
    if let Some(d) = detections.iter().find(|d| catalog.index_of(d.class_id).is_none()) {
        return Err(Error::contract(format!("detection class {} not in catalog", d.class_id)));
    }
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut matched = vec![false; ground_truth.len()];
    let mut tp = vec![false; detections.len()];
    for i in descending_order(&scores) {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if matched[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp[i] = true;
        }
    }
    Ok(tp)
}

/// 101-point interpolated average precision in `[0, 1]`.
///
/// `None` when there is no ground truth and no detection (the class is
/// skipped); 0 when there is no ground truth but detections exist.
pub fn average_precision_50(labels: &[bool], scores: &[f64], num_gt: usize) -> Option<f64> {
    assert_eq!(labels.len(), scores.len(), "labels and scores must align");
    if num_gt == 0 {
        return if labels.is_empty() { None } else { Some(0.0) };
    }
    let order = descending_order(scores);
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (n, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        }
        precision.push(tp as f64 / (n + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Monotone envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut total = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / 101.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Percentages in `[0, 100]`.
    pub novel: f64,
    pub base: f64,
    pub all: f64,
}

/// Fraction of ground-truth objects covered by at least one proposal with
/// score above `conf_floor` and IoU above `iou_floor`, per split.
pub fn max_recall(
    proposals: &[(u64, &[ScoredProposal])],
    ground_truth: &[GroundTruthRecord],
    conf_floor: f64,
    iou_floor: f64,
) -> RecallReport {
    let by_image: HashMap<u64, &[ScoredProposal]> = proposals.iter().copied().collect();
    let mut covered = [0usize; 2];
    let mut total = [0usize; 2];
    for gt in ground_truth {
        let props = by_image.get(&gt.image_id).copied().unwrap_or(&[]);
        for o in &gt.objects {
            let s = o.split.is_novel() as usize;
            total[s] += 1;
            if props.iter().any(|p| p.score > conf_floor && iou(&p.bbox, &o.bbox) > iou_floor) {
                covered[s] += 1;
            }
        }
    }
    let pct = |c: usize, t: usize| if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 };
    RecallReport {
        base: pct(covered[0], total[0]),
        novel: pct(covered[1], total[1]),
        all: pct(covered[0] + covered[1], total[0] + total[1]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub count: usize,
    pub mean: f64,
    /// Counts over equal-width bins spanning `[0, 1]`.
    pub bins: Vec<usize>,
}

impl Histogram {
    fn from_scores(scores: impl Iterator<Item = f64>) -> Self {
        let mut bins = vec![0usize; HISTOGRAM_BINS];
        let mut count = 0usize;
        let mut sum = 0.0;
        for s in scores {
            let b = ((s * HISTOGRAM_BINS as f64).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1);
            bins[b as usize] += 1;
            count += 1;
            sum += s;
        }
        Self {
            count,
            mean: if count == 0 { 0.0 } else { sum / count as f64 },
            bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub novel: Histogram,
    pub base: Histogram,
}

impl ScoreStats {
    /// `mean(base) - mean(novel)`.
    pub fn mean_gap(&self) -> f64 {
        self.base.mean - self.novel.mean
    }
}

/// Fixed-bin histograms and means of final scores, split by class split.
pub fn score_distribution_stats<'a>(
    detections: impl IntoIterator<Item = &'a Detection>,
    catalog: &ClassCatalog,
) -> Result<ScoreStats> {
    let mut novel = Vec::new();
    let mut base = Vec::new();
    for d in detections {
        let idx = catalog
            .index_of(d.class_id)
            .ok_or_else(|| Error::contract(format!("detection class {} not in catalog", d.class_id)))?;
        match catalog.split(idx) {
            Split::Novel => novel.push(d.score),
            Split::Base => base.push(d.score),
        }
    }
    Ok(ScoreStats {
        novel: Histogram::from_scores(novel.into_iter()),
        base: Histogram::from_scores(base.into_iter()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub name: String,
    pub split: Split,
    pub num_gt: usize,
    pub num_detections: usize,
    /// Percentage; absent when the class has neither ground truth nor detections.
    pub ap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub image_id: u64,
    pub gt_novel: usize,
    pub gt_base: usize,
    pub tp_novel: usize,
    pub tp_base: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub images: usize,
    pub repetitions: usize,
    /// Added time per image: pipeline with its switches minus all switches off.
    pub median_added_ms: f64,
    pub p95_added_ms: f64,
    pub median_on_ms: f64,
    pub median_off_ms: f64,
    /// Instrumented time inside the aggregation steps only.
    pub median_instrumented_ms: f64,
    /// Median added time over images, one entry per repetition.
    pub per_repetition_median_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    pub map_novel: f64,
    pub map_base: f64,
    pub map_all: f64,
    pub max_recall: RecallReport,
    /// Which score the proposal recall was thresholded on.
    pub recall_score_stream: String,
    /// Histograms over all detections.
    pub scores: ScoreStats,
    /// Histograms over true-positive detections.
    pub tp_scores: ScoreStats,
    pub images: Vec<ImageSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencySummary>,
}

impl EvalReport {
    pub fn ap_of(&self, class_id: u32) -> Option<f64> {
        self.per_class.iter().find(|c| c.class_id == class_id).and_then(|c| c.ap50)
    }
}

/// Evaluates pipeline outputs against ground truth. Every output image must
/// have a ground-truth record; ground-truth images without output count as
/// missed.
pub fn evaluate(
    outputs: &[ImageOutput],
    ground_truth: &[GroundTruthRecord],
    catalog: &ClassCatalog,
    recall_score_stream: &str,
) -> Result<EvalReport> {
    let gt_by_image: HashMap<u64, &GroundTruthRecord> = ground_truth.iter().map(|g| (g.image_id, g)).collect();
    if gt_by_image.len() != ground_truth.len() {
        return Err(Error::contract("duplicate image id in ground truth"));
    }
    for g in ground_truth {
        g.validate(catalog)?;
    }
    let n_classes = catalog.len();
    let mut per_class_scores: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    let mut per_class_labels: Vec<Vec<bool>> = vec![Vec::new(); n_classes];
    let mut num_gt = vec![0usize; n_classes];
    for g in ground_truth {
        for o in &g.objects {
            num_gt[catalog.index_of(o.class_id).expect("validated")] += 1;
        }
    }
    let mut images = Vec::with_capacity(outputs.len());
    let mut tp_dets: Vec<&Detection> = Vec::new();
    for out in outputs {
        let gt = gt_by_image
            .get(&out.image_id)
            .ok_or_else(|| Error::contract(format!("no ground truth for image {}", out.image_id)))?;
        let tp = match_detections(&out.detections, &gt.objects, catalog, AP_IOU).map_err(|e| e.in_image(out.image_id))?;
        let mut summary = ImageSummary {
            image_id: out.image_id,
            gt_novel: gt.objects.iter().filter(|o| o.split.is_novel()).count(),
            gt_base: gt.objects.iter().filter(|o| !o.split.is_novel()).count(),
            tp_novel: 0,
            tp_base: 0,
            fp: 0,
        };
        for (d, &is_tp) in out.detections.iter().zip(&tp) {
            let c = catalog.index_of(d.class_id).expect("checked by matching");
            per_class_scores[c].push(d.score);
            per_class_labels[c].push(is_tp);
            match (is_tp, catalog.split(c)) {
                (true, Split::Novel) => summary.tp_novel += 1,
                (true, Split::Base) => summary.tp_base += 1,
                (false, _) => summary.fp += 1,
            }
            if is_tp {
                tp_dets.push(d);
            }
        }
        images.push(summary);
    }

    let per_class: Vec<ClassAp> = catalog
        .classes()
        .iter()
        .enumerate()
        .map(|(c, info)| ClassAp {
            class_id: info.id,
            name: info.name.clone(),
            split: info.split,
            num_gt: num_gt[c],
            num_detections: per_class_scores[c].len(),
            ap50: average_precision_50(&per_class_labels[c], &per_class_scores[c], num_gt[c]).map(|v| 100.0 * v),
        })
        .collect();
    let mean_ap = |filter: &dyn Fn(Split) -> bool| {
        let aps: Vec<f64> = per_class
            .iter()
            .filter(|c| c.num_gt > 0 && filter(c.split))
            .filter_map(|c| c.ap50)
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    };
    let proposals: Vec<(u64, &[ScoredProposal])> =
        outputs.iter().map(|o| (o.image_id, o.proposals.as_slice())).collect();
    Ok(EvalReport {
        map_novel: mean_ap(&|s| s == Split::Novel),
        map_base: mean_ap(&|s| s == Split::Base),
        map_all: mean_ap(&|_| true),
        max_recall: max_recall(&proposals, ground_truth, 0.1, 0.5),
        recall_score_stream: recall_score_stream.to_string(),
        scores: score_distribution_stats(outputs.iter().flat_map(|o| &o.detections), catalog)?,
        tp_scores: score_distribution_stats(tp_dets, catalog)?,
        per_class,
        images,
        latency: None,
    })
}

/// Name of the proposal score stream a configuration ranks proposals by.
pub fn score_stream_name(switches: Switches) -> &'static str {
    if switches.arp_lq {
        "aggregated_objectness"
    } else {
        "objectness"
    }
}

/// Times each image with the engine's switches and with all switches off,
/// after one untimed warm-up pass per image.
pub fn latency_bench<I>(engine: &Engine, records: I, repetitions: usize) -> Result<LatencySummary>
where
    I: IntoIterator<Item = Result<ImageRecord>>,
{
    if repetitions < 3 {
        return Err(Error::contract("latency_bench needs at least 3 repetitions"));
    }
    let off = engine.with_switches(Switches::ALL_OFF)?;
    let mut added = Vec::new();
    let mut on_ms = Vec::new();
    let mut off_ms = Vec::new();
    let mut instrumented = Vec::new();
    let mut per_rep: Vec<Vec<f64>> = vec![Vec::new(); repetitions];
    for record in records {
        let record = record?;
        engine.run_image(&record)?;
        off.run_image(&record)?;
        let mut t_on = Vec::with_capacity(repetitions);
        let mut t_off = Vec::with_capacity(repetitions);
        let mut t_agg = Vec::with_capacity(repetitions);
        for rep in per_rep.iter_mut() {
            let t = Instant::now();
            let (_, timings) = engine.run_image_timed(&record)?;
            let a = t.elapsed().as_secs_f64() * 1e3;
            let t = Instant::now();
            off.run_image(&record)?;
            let b = t.elapsed().as_secs_f64() * 1e3;
            rep.push(a - b);
            t_on.push(a);
            t_off.push(b);
            t_agg.push(timings.aggregation.as_secs_f64() * 1e3);
        }
        let (m_on, m_off) = (median(&t_on), median(&t_off));
        on_ms.push(m_on);
        off_ms.push(m_off);
        added.push(m_on - m_off);
        instrumented.push(median(&t_agg));
    }
    Ok(LatencySummary {
        images: added.len(),
        repetitions,
        median_added_ms: median(&added),
        p95_added_ms: percentile(&added, 0.95),
        median_on_ms: median(&on_ms),
        median_off_ms: median(&off_ms),
        median_instrumented_ms: median(&instrumented),
        per_repetition_median_ms: per_rep.iter().map(|r| median(r)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Provenance;
    use crate::prototypes::ClassInfo;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn catalog() -> ClassCatalog {
        let classes = vec![
            ClassInfo { id: 0, name: "a".into(), split: Split::Base },
            ClassInfo { id: 1, name: "b".into(), split: Split::Novel },
        ];
        ClassCatalog::new(classes, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    fn det(b: BoundingBox, class_id: u32, score: f64) -> Detection {
        Detection {
            bbox: b,
            class_id,
            score,
            provenance: Provenance {
                proposal_index: 0,
                objectness: 0.0,
                proposal_score: 0.0,
                proposal_quality: None,
                quality: None,
                raw_similarity: 0.0,
                prototype_similarity: None,
                regulated_score: score,
            },
        }
    }

    fn gt(b: BoundingBox, class_id: u32) -> GroundTruthObject {
        GroundTruthObject {
            bbox: b,
            class_id,
            split: if class_id == 1 { Split::Novel } else { Split::Base },
        }
    }

    #[test]
    fn matching_examples() {
        let cat = catalog();
        let b = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(match_detections(&[det(b, 0, 0.9)], &[gt(b, 0)], &cat, 0.5).unwrap(), vec![true]);
        assert_eq!(
            match_detections(&[det(b, 0, 0.4), det(b, 0, 0.9)], &[gt(b, 0)], &cat, 0.5).unwrap(),
            vec![false, true]
        );
        assert_eq!(match_detections(&[det(b, 1, 0.9)], &[gt(b, 0)], &cat, 0.5).unwrap(), vec![false]);
        // Equal scores: lower detection index wins.
        assert_eq!(
            match_detections(&[det(b, 0, 0.5), det(b, 0, 0.5)], &[gt(b, 0)], &cat, 0.5).unwrap(),
            vec![true, false]
        );
        assert!(match_detections(&[det(b, 9, 0.5)], &[], &cat, 0.5).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision_50(&[true], &[0.9], 1), Some(1.0));
        assert_eq!(average_precision_50(&[], &[], 3), Some(0.0));
        assert_eq!(average_precision_50(&[false], &[0.3], 0), Some(0.0));
        assert_eq!(average_precision_50(&[], &[], 0), None);
        // Half the objects found at full precision: recall points 0..=0.5.
        let ap = average_precision_50(&[true], &[0.9], 2).unwrap();
        assert!((ap - 51.0 / 101.0).abs() < 1e-15);
    }

    /// For each recall threshold, the best precision over all cut-offs
    /// reaching it.
    fn ap_oracle(labels: &[bool], scores: &[f64], num_gt: usize) -> f64 {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut total = 0.0;
        for t in 0..=100 {
            let r = t as f64 / 100.0;
            let mut best: f64 = 0.0;
            for n in 1..=idx.len() {
                let tp = idx[..n].iter().filter(|&&i| labels[i]).count();
                if tp as f64 / num_gt as f64 >= r {
                    best = best.max(tp as f64 / n as f64);
                }
            }
            total += best;
        }
        total / 101.0
    }

    #[test]
    fn ap_matches_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let n = rng.random_range(0..25);
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let num_gt = labels.iter().filter(|&&l| l).count() + rng.random_range(0..4);
            if num_gt == 0 {
                continue;
            }
            let ap = average_precision_50(&labels, &scores, num_gt).unwrap();
            assert!((ap - ap_oracle(&labels, &scores, num_gt)).abs() < 1e-9);
        }
    }

    #[test]
    fn recall_examples() {
        let g = GroundTruthRecord { image_id: 3, objects: vec![gt(bb(0.0, 0.0, 10.0, 10.0), 1)] };
        // IoU 0.6 with the object.
        let near = bb(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&near, &g.objects[0].bbox) - 0.6).abs() < 1e-12);
        let hit = [ScoredProposal { bbox: near, score: 0.2 }];
        let r = max_recall(&[(3, &hit)], std::slice::from_ref(&g), 0.1, 0.5);
        assert_eq!((r.novel, r.all), (100.0, 100.0));
        let low = [ScoredProposal { bbox: near, score: 0.05 }];
        let r = max_recall(&[(3, &low)], std::slice::from_ref(&g), 0.1, 0.5);
        assert_eq!((r.novel, r.all), (0.0, 0.0));
    }

    #[test]
    fn histogram_examples() {
        let cat = catalog();
        let dets = vec![det(bb(0.0, 0.0, 1.0, 1.0), 0, 0.5); 4];
        let s = score_distribution_stats(&dets, &cat).unwrap();
        assert_eq!(s.base.mean, 0.5);
        assert_eq!(s.base.bins.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(s.novel.count, 0);
        let dets = vec![det(bb(0.0, 0.0, 1.0, 1.0), 0, 0.9), det(bb(0.0, 0.0, 1.0, 1.0), 1, 0.1)];
        let s = score_distribution_stats(&dets, &cat).unwrap();
        assert!(s.base.bins.iter().zip(&s.novel.bins).all(|(a, b)| *a == 0 || *b == 0));
        assert!((s.mean_gap() - 0.8).abs() < 1e-15);
        let edge = vec![det(bb(0.0, 0.0, 1.0, 1.0), 0, 1.0)];
        assert_eq!(score_distribution_stats(&edge, &cat).unwrap().base.bins[HISTOGRAM_BINS - 1], 1);
    }

    #[test]
    fn evaluate_small_scene() {
        let cat = catalog();
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(20.0, 20.0, 30.0, 30.0);
        let outputs = vec![ImageOutput {
            image_id: 5,
            detections: vec![det(a, 0, 0.9), det(b, 1, 0.8), det(b, 0, 0.3)],
            proposals: vec![ScoredProposal { bbox: a, score: 0.9 }],
        }];
        let gts = vec![GroundTruthRecord { image_id: 5, objects: vec![gt(a, 0), gt(b, 1)] }];
        let r = evaluate(&outputs, &gts, &cat, "objectness").unwrap();
        assert_eq!((r.map_base, r.map_novel, r.map_all), (100.0, 100.0, 100.0));
        assert_eq!(r.images[0].fp, 1);
        assert_eq!((r.max_recall.base, r.max_recall.novel, r.max_recall.all), (100.0, 0.0, 50.0));
        let missing = vec![ImageOutput { image_id: 6, ..outputs[0].clone() }];
        assert!(evaluate(&missing, &gts, &cat, "objectness").is_err());
    }

    /// Exhaustive version of the greedy rule: walk detections by score and
    /// test every ground truth explicitly.
    fn match_oracle(dets: &[Detection], gts: &[GroundTruthObject]) -> Vec<bool> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; gts.len()];
        let mut out = vec![false; dets.len()];
        for i in order {
            let cands: Vec<(usize, f64)> = (0..gts.len())
                .filter(|&g| !used[g] && gts[g].class_id == dets[i].class_id)
                .map(|g| (g, iou(&dets[i].bbox, &gts[g].bbox)))
                .filter(|&(_, v)| v >= 0.5)
                .collect();
            let best = cands.iter().fold(None::<(usize, f64)>, |acc, &(g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
            if let Some((g, _)) = best {
                used[g] = true;
                out[i] = true;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matching_agrees_with_oracle(seed in any::<u64>()) {
            let cat = catalog();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rbox = |rng: &mut ChaCha8Rng| {
                let x = rng.random_range(0.0..30.0);
                let y = rng.random_range(0.0..30.0);
                bb(x, y, x + rng.random_range(2.0..12.0), y + rng.random_range(2.0..12.0))
            };
            let gts: Vec<_> = (0..rng.random_range(0..6)).map(|_| { let b = rbox(&mut rng); gt(b, rng.random_range(0..2)) }).collect();
            let dets: Vec<_> = (0..rng.random_range(0..12)).map(|_| { let b = rbox(&mut rng); det(b, rng.random_range(0..2), rng.random_range(0..5) as f64 / 5.0) }).collect();
            prop_assert_eq!(match_detections(&dets, &gts, &cat, 0.5).unwrap(), match_oracle(&dets, &gts));
        }

        #[test]
        fn ap_invariant_under_monotone_transform(
            labels in prop::collection::vec(any::<bool>(), 1..30),
            raw in prop::collection::vec(0.0..1.0f64, 30),
            extra in 0usize..4,
        ) {
            let scores = &raw[..labels.len()];
            let num_gt = labels.iter().filter(|&&l| l).count() + extra;
            prop_assume!(num_gt > 0);
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            let a = average_precision_50(&labels, scores, num_gt).unwrap();
            prop_assert_eq!(a, average_precision_50(&labels, &mapped, num_gt).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn recall_grows_as_floor_relaxes(seed in any::<u64>(), lo in 0.0..0.5f64, hi in 0.5..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GroundTruthRecord {
                image_id: 0,
                objects: (0..5).map(|i| gt(bb(10.0 * i as f64, 0.0, 10.0 * i as f64 + 8.0, 8.0), (i % 2) as u32)).collect(),
            };
            let props: Vec<ScoredProposal> = (0..10).map(|_| {
                let x = rng.random_range(0.0..45.0);
                ScoredProposal { bbox: bb(x, 0.0, x + 8.0, 8.0), score: rng.random_range(0.0..1.0) }
            }).collect();
            let strict = max_recall(&[(0, &props)], std::slice::from_ref(&g), hi, 0.5);
            let loose = max_recall(&[(0, &props)], std::slice::from_ref(&g), lo, 0.5);
            prop_assert!(loose.all >= strict.all);
        }
    }
}
