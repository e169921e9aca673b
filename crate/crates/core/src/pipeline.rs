//! End-to-end re-scoring of one image's detector output.
//!
//! ```text
//! proposals ──► quality q ──► (o + q) / 2 ──► NMS ──► top M′
//!                                                  │
//!   s = f·t ──► s + α f·p̂ (novel) ──► σ(s / τ) ──► c^γ q^(1-γ) ──► per-class NMS ──► top N
//! ```
//!
//! Each of the three aggregation steps has a switch; with all switches off
//! the output is exactly the baseline two-stage post-processing.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::proposal_stage::{quality_unchecked, select_proposals, RegionProposal};
use crate::prototypes::{l2_normalized, ClassCatalog, PrototypeBank, Split};
use crate::scoring::{
    apply_aggregation, calibrate, check_gamma, prototype_similarities, prototype_similarities_f32, regulate_value, NovelColumns, ScoreTable,
    Stage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Recompute quality on the refined boxes of the surviving proposals.
    Dense,
    /// Reuse the proposal-stage quality.
    Sparse,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "sparse" => Ok(Mode::Sparse),
            _ => Err(Error::contract(format!("unknown mode '{s}' (expected dense or sparse)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dense => "dense",
            Mode::Sparse => "sparse",
        })
    }
}

/// Independent on/off switches for the three aggregation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Switches {
    /// Quality-fused objectness before proposal NMS.
    pub arp_lq: bool,
    /// Prototype similarity on novel columns.
    pub aoc_vs: bool,
    /// Quality regulation of classification scores.
    pub aoc_lq: bool,
}

impl Switches {
    pub const ALL_ON: Switches = Switches { arp_lq: true, aoc_vs: true, aoc_lq: true };
    pub const ALL_OFF: Switches = Switches { arp_lq: false, aoc_vs: false, aoc_lq: false };

    /// All eight combinations, baseline first and full pipeline last.
    pub fn all_combinations() -> [Switches; 8] {
        let s = |arp_lq, aoc_vs, aoc_lq| Switches { arp_lq, aoc_vs, aoc_lq };
        [
            s(false, false, false),
            s(true, false, false),
            s(false, true, false),
            s(false, false, true),
            s(true, true, false),
            s(true, false, true),
            s(false, true, true),
            s(true, true, true),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Coco,
    Lvis,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco" => Ok(Profile::Coco),
            "lvis" => Ok(Profile::Lvis),
            _ => Err(Error::contract(format!("unknown profile '{s}' (expected coco or lvis)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Neighbours averaged into the localization quality.
    pub k: usize,
    /// Weight of the prototype similarity on novel columns.
    pub alpha: f64,
    /// Exponent of the classification score in the quality regulation.
    pub gamma: f64,
    /// Divides similarities before the sigmoid.
    pub temperature: f64,
    pub proposal_nms_iou: f64,
    pub class_nms_iou: f64,
    pub proposal_keep_max: usize,
    pub detections_per_image: usize,
    /// Detections must score strictly above this.
    pub score_threshold: f64,
    pub mode: Mode,
    pub switches: Switches,
    pub normalize_embeddings: bool,
    /// Constant shift of novel similarities, used instead of prototype
    /// aggregation for the trivial-offset comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel_offset: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::profile(Profile::Coco)
    }
}

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        let (alpha, gamma) = match profile {
            Profile::Coco => (0.05, 3.0 / 4.0),
            Profile::Lvis => (0.01, 2.0 / 3.0),
        };
        Self {
            k: 3,
            alpha,
            gamma,
            temperature: 1.0,
            proposal_nms_iou: 0.7,
            class_nms_iou: 0.5,
            proposal_keep_max: 1000,
            detections_per_image: 300,
            score_threshold: 0.0,
            mode: Mode::Dense,
            switches: Switches::ALL_ON,
            normalize_embeddings: true,
            novel_offset: None,
        }
    }

    pub fn with_switches(&self, switches: Switches) -> Self {
        Self { switches, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("config: {what}")));
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        check_gamma(self.gamma)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        for iou in [self.proposal_nms_iou, self.class_nms_iou] {
            if !(iou > 0.0 && iou <= 1.0) {
                return bad("NMS IoU thresholds must be in (0, 1]");
            }
        }
        if self.proposal_keep_max == 0 || self.detections_per_image == 0 {
            return bad("proposal_keep_max and detections_per_image must be positive");
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return bad("score_threshold must be in [0, 1)");
        }
        if let Some(offset) = self.novel_offset {
            if !offset.is_finite() {
                return bad("novel_offset must be finite");
            }
            if self.switches.aoc_vs {
                return bad("novel_offset cannot be combined with prototype aggregation");
            }
        }
        Ok(())
    }
}

/// Box-regression output aligned with the proposals.
#[derive(Debug, Clone, PartialEq)]
pub enum RefinedBoxes {
    /// One box per proposal.
    Agnostic(Vec<BoundingBox>),
    /// `num_classes` boxes per proposal, row-major.
    PerClass { num_classes: usize, boxes: Vec<BoundingBox> },
}

/// One image of detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub proposals: Vec<RegionProposal>,
    pub refined: Option<RefinedBoxes>,
    /// Pre-temperature similarities, `proposals x classes`, row-major.
    pub raw_logits: Option<Vec<f64>>,
    /// Class id per proposal for labeled (training-sample) dumps.
    pub labels: Option<Vec<Option<u32>>>,
}

impl ImageRecord {
    pub fn validate(&self, num_classes: usize, dim: usize) -> Result<()> {
        let m = self.proposals.len();
        let run = || -> Result<()> {
            for (i, p) in self.proposals.iter().enumerate() {
                if p.feature.len() != dim {
                    return Err(Error::dimension(format!("feature of proposal {i}"), dim, p.feature.len()));
                }
            }
            match &self.refined {
                Some(RefinedBoxes::Agnostic(b)) if b.len() != m => {
                    return Err(Error::length("refined boxes", m, b.len()))
                }
                Some(RefinedBoxes::PerClass { num_classes: c, boxes }) => {
                    if *c != num_classes {
                        return Err(Error::length("refined box classes", num_classes, *c));
                    }
                    if boxes.len() != m * c {
                        return Err(Error::length("refined boxes", m * c, boxes.len()));
                    }
                }
                _ => {}
            }
            if let Some(l) = &self.raw_logits {
                if l.len() != m * num_classes {
                    return Err(Error::length("raw logits", m * num_classes, l.len()));
                }
                if l.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("raw logits".into()));
                }
            }
            if let Some(l) = &self.labels {
                if l.len() != m {
                    return Err(Error::length("labels", m, l.len()));
                }
            }
            Ok(())
        };
        run().map_err(|e| e.in_image(self.image_id))
    }

    fn refined_box(&self, row: usize, class: usize) -> BoundingBox {
        match &self.refined {
            None => self.proposals[row].bbox,
            Some(RefinedBoxes::Agnostic(b)) => b[row],
            Some(RefinedBoxes::PerClass { num_classes, boxes }) => boxes[row * num_classes + class],
        }
    }
}

/// Intermediate values a detection's score was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub proposal_index: usize,
    pub objectness: f64,
    /// Score the proposal was ranked by in proposal NMS.
    pub proposal_score: f64,
    /// Proposal-stage localization quality, when computed.
    pub proposal_quality: Option<f64>,
    /// Quality used for score regulation, when regulation is on.
    pub quality: Option<f64>,
    pub raw_similarity: f64,
    /// Novel-class prototype similarity, when aggregation is on.
    pub prototype_similarity: Option<f64>,
    pub regulated_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub score: f64,
    pub provenance: Provenance,
}

impl Detection {
    /// Recomputes the final score from the stored provenance.
    pub fn replay(&self, config: &PipelineConfig) -> f64 {
        let p = &self.provenance;
        let mut s = p.raw_similarity;
        if let Some(sim) = p.prototype_similarity {
            s += config.alpha * sim;
        }
        let c = crate::scoring::sigmoid(s / config.temperature);
        match p.quality {
            Some(q) => regulate_value(c, q, config.gamma),
            None => c,
        }
    }
}

/// Proposal-stage survivors with their (box, confidence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageOutput {
    pub image_id: u64,
    pub detections: Vec<Detection>,
    /// Proposals that survived proposal NMS, with the score they were ranked by.
    pub proposals: Vec<ScoredProposal>,
}

/// Time spent in aggregation-only work versus the whole image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub aggregation: Duration,
    pub total: Duration,
}

struct Stopwatch {
    spent: Duration,
}

impl Stopwatch {
    fn time<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.spent += t.elapsed();
        out
    }
}

/// Immutable, shareable state for running the pipeline over many images.
#[derive(Debug, Clone)]
pub struct Engine {
    catalog: ClassCatalog,
    config: PipelineConfig,
    novel_columns: Vec<usize>,
    novel_prototypes: Vec<Vec<f64>>,
    is_novel: Vec<bool>,
}

impl Engine {
    /// `bank` may be omitted only when prototype aggregation is off.
    pub fn new(catalog: &ClassCatalog, bank: Option<&PrototypeBank>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let catalog = if config.normalize_embeddings {
            catalog.normalized()
        } else {
            catalog.clone()
        };
        let novel_columns = catalog.novel_indices();
        let novel_prototypes = match bank {
            Some(bank) => {
                bank.check_catalog(&catalog)?;
                let novel = NovelColumns::resolve(&catalog, bank)?;
                novel.prototypes.iter().map(|p| p.to_vec()).collect()
            }
            None if config.switches.aoc_vs => {
                return Err(Error::contract("prototype aggregation needs a prototype bank"))
            }
            None => Vec::new(),
        };
        let is_novel = (0..catalog.len()).map(|i| catalog.split(i) == Split::Novel).collect();
        Ok(Self {
            catalog,
            config,
            novel_columns,
            novel_prototypes,
            is_novel,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    /// Same engine with a different switch combination.
    pub fn with_switches(&self, switches: Switches) -> Result<Self> {
        self.with_config(self.config.with_switches(switches))
    }

    pub fn with_config(&self, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if config.normalize_embeddings != self.config.normalize_embeddings {
            return Err(Error::contract("cannot change embedding normalization of an engine"));
        }
        if config.switches.aoc_vs && self.novel_prototypes.len() != self.novel_columns.len() {
            return Err(Error::contract("prototype aggregation needs a prototype bank"));
        }
        Ok(Self { config, ..self.clone() })
    }

    pub fn run_image(&self, record: &ImageRecord) -> Result<ImageOutput> {
        self.run_image_timed(record).map(|(out, _)| out)
    }

    pub fn run_image_timed(&self, record: &ImageRecord) -> Result<(ImageOutput, StageTimings)> {
        let start = Instant::now();
        record.validate(self.catalog.len(), self.catalog.dim())?;
        let mut agg = Stopwatch { spent: Duration::ZERO };
        let stage1 = self.proposal_stage(record, &mut agg);
        let inputs = self.classification_inputs(record, &stage1, self.config.switches.aoc_vs, &mut agg);
        let out = self.finish(record, &stage1, &inputs, self.config.switches, &mut agg);
        Ok((
            out,
            StageTimings {
                aggregation: agg.spent,
                total: start.elapsed(),
            },
        ))
    }

    fn needs_proposal_quality(&self, arp_lq: bool, aoc_lq: bool) -> bool {
        arp_lq || (aoc_lq && self.config.mode == Mode::Sparse)
    }

    fn proposal_stage(&self, record: &ImageRecord, sw: &mut Stopwatch) -> ProposalStage {
        let s = self.config.switches;
        self.proposal_stage_with(record, s.arp_lq, self.needs_proposal_quality(s.arp_lq, s.aoc_lq), None, sw)
    }

    fn proposal_stage_with(
        &self,
        record: &ImageRecord,
        arp_lq: bool,
        want_quality: bool,
        cached_quality: Option<&[f64]>,
        sw: &mut Stopwatch,
    ) -> ProposalStage {
        let boxes: Vec<BoundingBox> = record.proposals.iter().map(|p| p.bbox).collect();
        let objectness: Vec<f64> = record.proposals.iter().map(|p| p.objectness).collect();
        let quality = if want_quality && !boxes.is_empty() {
            Some(match cached_quality {
                Some(q) => q.to_vec(),
                None => sw.time(|| quality_unchecked(&boxes, self.config.k)),
            })
        } else {
            None
        };
        let scores = match (&quality, arp_lq) {
            (Some(q), true) => sw.time(|| objectness.iter().zip(q).map(|(o, q)| (o + q) / 2.0).collect()),
            _ => objectness,
        };
        let kept = select_proposals(&boxes, &scores, self.config.proposal_nms_iou, self.config.proposal_keep_max);
        ProposalStage { kept, scores, quality }
    }

    fn classification_inputs(
        &self,
        record: &ImageRecord,
        stage1: &ProposalStage,
        want_prototypes: bool,
        sw: &mut Stopwatch,
    ) -> ClassInputs {
        let features = || -> Vec<Vec<f64>> {
            stage1
                .kept
                .iter()
                .map(|&i| {
                    let f: Vec<f64> = record.proposals[i].feature.iter().map(|&v| v as f64).collect();
                    if self.config.normalize_embeddings {
                        l2_normalized(&f)
                    } else {
                        f
                    }
                })
                .collect()
        };
        let cols = self.catalog.len();
        let rows = stage1.kept.len();
        let (raw_values, shared) = match &record.raw_logits {
            Some(logits) => (
                stage1
                    .kept
                    .iter()
                    .flat_map(|&i| logits[i * cols..(i + 1) * cols].iter().copied())
                    .collect(),
                None,
            ),
            None => {
                let features = features();
                let mut v = Vec::with_capacity(rows * cols);
                for f in &features {
                    v.extend(self.catalog.embeddings().iter().map(|t| crate::prototypes::dot(f, t)));
                }
                (v, Some(features))
            }
        };
        let raw = ScoreTable::new(rows, cols, raw_values, Stage::Raw).expect("validated shape");
        let proto_sim = want_prototypes.then(|| {
            sw.time(|| {
                let novel = NovelColumns {
                    columns: self.novel_columns.clone(),
                    prototypes: self.novel_prototypes.iter().map(|p| p.as_slice()).collect(),
                };
                match shared {
                    Some(features) => prototype_similarities(&features, &novel),
                    None => prototype_similarities_f32(
                        stage1.kept.iter().map(|&i| record.proposals[i].feature.as_slice()),
                        self.config.normalize_embeddings,
                        &novel,
                    ),
                }
            })
        });
        ClassInputs { raw, proto_sim }
    }

    fn finish(
        &self,
        record: &ImageRecord,
        stage1: &ProposalStage,
        inputs: &ClassInputs,
        switches: Switches,
        sw: &mut Stopwatch,
    ) -> ImageOutput {
        let cfg = &self.config;
        let kept = &stage1.kept;
        let rows = kept.len();
        let cols = self.catalog.len();

        let aggregated = match (&inputs.proto_sim, switches.aoc_vs, cfg.novel_offset) {
            (Some(sims), true, _) => sw.time(|| apply_aggregation(&inputs.raw, &self.novel_columns, sims, cfg.alpha)),
            (_, false, Some(offset)) => {
                let ones = vec![1.0; rows * self.novel_columns.len()];
                apply_aggregation(&inputs.raw, &self.novel_columns, &ones, offset)
            }
            _ => inputs.raw.clone(),
        };
        let calibrated = calibrate(&aggregated, cfg.temperature).expect("validated temperature");

        let quality: Option<Vec<f64>> = switches.aoc_lq.then(|| {
            sw.time(|| match cfg.mode {
                Mode::Sparse => {
                    let q = stage1.quality.as_ref().expect("sparse regulation computes proposal quality");
                    kept.iter().map(|&i| q[i]).collect()
                }
                Mode::Dense => {
                    let boxes: Vec<BoundingBox> = (0..rows)
                        .map(|r| {
                            let class = match record.refined {
                                Some(RefinedBoxes::PerClass { .. }) => argmax(calibrated.row(r)),
                                _ => 0,
                            };
                            record.refined_box(kept[r], class)
                        })
                        .collect();
                    quality_unchecked(&boxes, cfg.k)
                }
            })
        });
        let final_score = match &quality {
            Some(q) => sw.time(|| FinalScore::regulated(q, cfg.gamma)),
            None => FinalScore::Calibrated,
        };
        let picks = select_detections(
            rows,
            cols,
            calibrated.values(),
            &final_score,
            cfg,
            |r, c| record.refined_box(kept[r], c),
            sw,
        );
        let novel_pos = |c: usize| self.novel_columns.iter().position(|&n| n == c);
        let detections = picks
            .into_iter()
            .map(|(r, c, score)| {
                let i = kept[r];
                let prototype_similarity = match (&inputs.proto_sim, switches.aoc_vs) {
                    (Some(sims), true) => novel_pos(c).map(|j| sims[r * self.novel_columns.len() + j]),
                    _ => None,
                };
                Detection {
                    bbox: record.refined_box(i, c),
                    class_id: self.catalog.classes()[c].id,
                    score,
                    provenance: Provenance {
                        proposal_index: i,
                        objectness: record.proposals[i].objectness,
                        proposal_score: stage1.scores[i],
                        proposal_quality: stage1.quality.as_ref().map(|q| q[i]),
                        quality: quality.as_ref().map(|q| q[r]),
                        raw_similarity: inputs.raw.get(r, c)
                            + match (self.is_novel[c], cfg.novel_offset, switches.aoc_vs) {
                                (true, Some(offset), false) => offset,
                                _ => 0.0,
                            },
                        prototype_similarity,
                        regulated_score: score,
                    },
                }
            })
            .collect();
        ImageOutput {
            image_id: record.image_id,
            detections,
            proposals: kept
                .iter()
                .map(|&i| ScoredProposal {
                    bbox: record.proposals[i].bbox,
                    score: stage1.scores[i],
                })
                .collect(),
        }
    }

    /// Raw and prototype-aggregated similarity tables over the proposals
    /// that survive this engine's proposal stage.
    pub fn similarity_tables(&self, record: &ImageRecord) -> Result<(ScoreTable, ScoreTable)> {
        record.validate(self.catalog.len(), self.catalog.dim())?;
        if self.novel_prototypes.len() != self.novel_columns.len() {
            return Err(Error::contract("similarity tables need a prototype bank"));
        }
        let mut sw = Stopwatch { spent: Duration::ZERO };
        let stage1 = self.proposal_stage(record, &mut sw);
        let inputs = self.classification_inputs(record, &stage1, true, &mut sw);
        let sims = inputs.proto_sim.as_ref().expect("requested above");
        let aggregated = apply_aggregation(&inputs.raw, &self.novel_columns, sims, self.config.alpha);
        Ok((inputs.raw, aggregated))
    }

    /// Raw and prototype-aggregated similarity tables for arbitrary region
    /// features, e.g. a random calibration sample.
    pub fn feature_tables(&self, features: &[Vec<f64>]) -> Result<(ScoreTable, ScoreTable)> {
        if self.novel_prototypes.len() != self.novel_columns.len() {
            return Err(Error::contract("similarity tables need a prototype bank"));
        }
        let dim = self.catalog.dim();
        let features: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                if f.len() != dim {
                    return Err(Error::dimension("calibration feature", dim, f.len()));
                }
                Ok(if self.config.normalize_embeddings { l2_normalized(f) } else { f.clone() })
            })
            .collect::<Result<_>>()?;
        let cols = self.catalog.len();
        let mut raw = Vec::with_capacity(features.len() * cols);
        for f in &features {
            raw.extend(self.catalog.embeddings().iter().map(|t| crate::prototypes::dot(f, t)));
        }
        let raw = ScoreTable::new(features.len(), cols, raw, Stage::Raw)?;
        let novel = NovelColumns {
            columns: self.novel_columns.clone(),
            prototypes: self.novel_prototypes.iter().map(|p| p.as_slice()).collect(),
        };
        let sims = prototype_similarities(&features, &novel);
        let aggregated = apply_aggregation(&raw, &self.novel_columns, &sims, self.config.alpha);
        Ok((raw, aggregated))
    }

    /// Trivial novel offset `alpha0`: the mean shift `s_agg - s` over the
    /// novel-class detections that prototype aggregation alone produces on
    /// `records`.
    pub fn calibrate_trivial_offset(&self, records: &[ImageRecord]) -> Result<f64> {
        let switches = Switches { arp_lq: false, aoc_vs: true, aoc_lq: false };
        let engine = self.with_config(PipelineConfig {
            switches,
            novel_offset: None,
            ..self.config.clone()
        })?;
        let outputs = engine.run_batch(records)?.images;
        let shifts: Vec<f64> = outputs
            .iter()
            .flat_map(|o| &o.detections)
            .filter_map(|d| d.provenance.prototype_similarity)
            .map(|sim| self.config.alpha * sim)
            .collect();
        if shifts.is_empty() {
            return Err(Error::contract("trivial offset calibration produced no novel detections"));
        }
        Ok(shifts.iter().sum::<f64>() / shifts.len() as f64)
    }

    /// Runs every record, in parallel over images, preserving input order.
    pub fn run_batch(&self, records: &[ImageRecord]) -> Result<BatchReport> {
        let results: Vec<Result<(ImageOutput, StageTimings)>> =
            records.par_iter().map(|r| self.run_image_timed(r)).collect();
        let mut images = Vec::with_capacity(records.len());
        let mut timings = Vec::with_capacity(records.len());
        for r in results {
            let (out, t) = r?;
            images.push(out);
            timings.push(t);
        }
        Ok(BatchReport {
            images,
            timing: TimingReport::from_timings(&timings),
        })
    }

    /// Outputs for all eight switch combinations, sharing the proposal
    /// quality and similarity computations across combinations.
    pub fn run_image_ablation(&self, record: &ImageRecord) -> Result<Vec<(Switches, ImageOutput)>> {
        record.validate(self.catalog.len(), self.catalog.dim())?;
        if self.novel_prototypes.len() != self.novel_columns.len() {
            return Err(Error::contract("ablation needs a prototype bank"));
        }
        if self.config.novel_offset.is_some() {
            return Err(Error::contract("ablation does not combine with a trivial novel offset"));
        }
        let mut sw = Stopwatch { spent: Duration::ZERO };
        let boxes: Vec<BoundingBox> = record.proposals.iter().map(|p| p.bbox).collect();
        let quality = (!boxes.is_empty()).then(|| quality_unchecked(&boxes, self.config.k));
        let mut out = Vec::with_capacity(8);
        let mut shared: [Option<(ProposalStage, ClassInputs)>; 2] = [None, None];
        for switches in Switches::all_combinations() {
            let slot = &mut shared[switches.arp_lq as usize];
            if slot.is_none() {
                let stage1 = self.proposal_stage_with(record, switches.arp_lq, true, quality.as_deref(), &mut sw);
                let inputs = self.classification_inputs(record, &stage1, true, &mut sw);
                *slot = Some((stage1, inputs));
            }
            let (stage1, inputs) = slot.as_ref().expect("filled above");
            let mut result = self.finish(record, stage1, inputs, switches, &mut sw);
            strip_unused_provenance(&mut result, switches, self.config.mode);
            out.push((switches, result));
        }
        Ok(out)
    }
}

/// The shared precomputation fills in values a single-configuration run
/// would not compute; drop them so both paths agree exactly.
fn strip_unused_provenance(out: &mut ImageOutput, switches: Switches, mode: Mode) {
    let keep_quality = switches.arp_lq || (switches.aoc_lq && mode == Mode::Sparse);
    if !keep_quality {
        for d in &mut out.detections {
            d.provenance.proposal_quality = None;
        }
    }
}

struct ProposalStage {
    kept: Vec<usize>,
    /// Score of every input proposal used for NMS.
    scores: Vec<f64>,
    /// Quality of every input proposal, when computed.
    quality: Option<Vec<f64>>,
}

struct ClassInputs {
    raw: ScoreTable,
    proto_sim: Option<Vec<f64>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// How final detection scores follow from calibrated confidences.
enum FinalScore {
    Calibrated,
    /// Per row `(1 - gamma) ln q`, or `None` when `q <= 0` zeroes the row.
    Regulated { gamma: f64, log_quality: Vec<Option<f64>> },
}

impl FinalScore {
    fn regulated(quality: &[f64], gamma: f64) -> Self {
        if gamma == 1.0 {
            return FinalScore::Calibrated;
        }
        let log_quality = quality.iter().map(|&q| (q > 0.0).then(|| (1.0 - gamma) * q.ln())).collect();
        FinalScore::Regulated { gamma, log_quality }
    }

    /// Bit-identical to `regulate_value` when regulated.
    #[inline]
    fn score(&self, row: usize, c: f64) -> f64 {
        match self {
            FinalScore::Calibrated => c,
            FinalScore::Regulated { gamma, log_quality } => match log_quality[row] {
                Some(lq) if c > 0.0 => (gamma * c.ln() + lq).exp().min(1.0),
                _ => 0.0,
            },
        }
    }

    /// Confidence below which every entry of `row` scores under `t`.
    fn cut(&self, row: usize, t: f64) -> f64 {
        // Slack in log space absorbs rounding in both this bound and `score`.
        const SLACK: f64 = 1e-9;
        match self {
            FinalScore::Calibrated => t,
            FinalScore::Regulated { gamma, log_quality } => match log_quality[row] {
                Some(lq) => ((t.ln() - lq - SLACK) / gamma).exp(),
                None => f64::INFINITY,
            },
        }
    }
}

/// Score-ordered greedy selection with per-class NMS and a global cap,
/// returning `(row, column, score)` picks.
///
/// Only the head of the score order is ever consumed, so candidates are
/// first restricted to those that can reach a threshold estimated from a
/// strided sample. The restricted pass is accepted only if it fills the cap
/// before its scores drop below the threshold, which makes it identical to
/// the full pass; otherwise a looser threshold, and finally the full pass,
/// is tried.
fn select_detections(
    rows: usize,
    cols: usize,
    calibrated: &[f64],
    final_score: &FinalScore,
    cfg: &PipelineConfig,
    box_of: impl Fn(usize, usize) -> BoundingBox,
    sw: &mut Stopwatch,
) -> Vec<(usize, usize, f64)> {
    const STRIDE: usize = 37;
    let selection = Selection {
        rows,
        cols,
        calibrated,
        final_score,
        cfg,
    };
    let sample = selection.timed(sw, || {
        let mut v: Vec<f64> = (0..rows * cols)
            .step_by(STRIDE)
            .map(|e| final_score.score(e / cols, calibrated[e]))
            .collect();
        v.sort_unstable_by(|a, b| b.total_cmp(a));
        v
    });
    for want in [8, 64].map(|f| f * cfg.detections_per_image / STRIDE) {
        let Some(&t) = sample.get(want) else { break };
        if !(t > cfg.score_threshold) {
            break;
        }
        if let Some(picks) = selection.run(Some(t), &box_of, sw) {
            return picks;
        }
    }
    selection.run(None, &box_of, sw).expect("an unrestricted pass always completes")
}

struct Selection<'a> {
    rows: usize,
    cols: usize,
    calibrated: &'a [f64],
    final_score: &'a FinalScore,
    cfg: &'a PipelineConfig,
}

impl Selection<'_> {
    /// Regulation is aggregation work; plain calibrated scores are not.
    fn timed<T>(&self, sw: &mut Stopwatch, f: impl FnOnce() -> T) -> T {
        match self.final_score {
            FinalScore::Regulated { .. } => sw.time(f),
            FinalScore::Calibrated => f(),
        }
    }

    fn run(
        &self,
        threshold: Option<f64>,
        box_of: impl Fn(usize, usize) -> BoundingBox,
        sw: &mut Stopwatch,
    ) -> Option<Vec<(usize, usize, f64)>> {
        let (cols, n) = (self.cols, self.cfg.detections_per_image);
        let mut candidates = self.timed(sw, || {
            let mut out = Vec::new();
            for r in 0..self.rows {
                let cut = threshold.map_or(f64::NEG_INFINITY, |t| self.final_score.cut(r, t));
                for (c, &v) in self.calibrated[r * cols..(r + 1) * cols].iter().enumerate() {
                    if v >= cut {
                        let s = self.final_score.score(r, v);
                        if s > self.cfg.score_threshold {
                            out.push((s, r, c));
                        }
                    }
                }
            }
            out
        });
        candidates.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut kept_boxes: Vec<Vec<BoundingBox>> = vec![Vec::new(); cols];
        let mut picks = Vec::with_capacity(n.min(candidates.len()));
        let mut last = f64::INFINITY;
        for (s, r, c) in candidates {
            if picks.len() == n {
                break;
            }
            last = s;
            let b = box_of(r, c);
            if kept_boxes[c].iter().any(|k| iou(k, &b) > self.cfg.class_nms_iou) {
                continue;
            }
            kept_boxes[c].push(b);
            picks.push((r, c, s));
        }
        match threshold {
            Some(t) if picks.len() < n || last < t => None,
            _ => Some(picks),
        }
    }
}

/// Reference two-stage post-processing without any aggregation: objectness
/// NMS, top proposals, sigmoid scores, per-class NMS, global top-N.
///
/// Written independently of [`Engine`] and used to check that the pipeline
/// with all switches off adds nothing.
pub fn baseline_postprocess(
    record: &ImageRecord,
    catalog: &ClassCatalog,
    config: &PipelineConfig,
) -> Result<ImageOutput> {
    let catalog = if config.normalize_embeddings {
        catalog.normalized()
    } else {
        catalog.clone()
    };
    record.validate(catalog.len(), catalog.dim())?;
    if record.proposals.is_empty() {
        return Ok(ImageOutput {
            image_id: record.image_id,
            ..Default::default()
        });
    }
    let boxes: Vec<BoundingBox> = record.proposals.iter().map(|p| p.bbox).collect();
    let objectness: Vec<f64> = record.proposals.iter().map(|p| p.objectness).collect();
    let mut kept = crate::geometry::nms(&boxes, &objectness, config.proposal_nms_iou)?;
    kept.truncate(config.proposal_keep_max);

    let features: Vec<Vec<f64>> = kept
        .iter()
        .map(|&i| {
            let f: Vec<f64> = record.proposals[i].feature.iter().map(|&v| v as f64).collect();
            if config.normalize_embeddings {
                l2_normalized(&f)
            } else {
                f
            }
        })
        .collect();
    let c = catalog.len();
    let raw = match &record.raw_logits {
        Some(l) => ScoreTable::new(
            kept.len(),
            c,
            kept.iter().flat_map(|&i| l[i * c..(i + 1) * c].to_vec()).collect(),
            Stage::Raw,
        )?,
        None => crate::scoring::region_text_similarity(&features, &catalog)?,
    };
    let raw = match config.novel_offset {
        Some(offset) => crate::scoring::apply_trivial_offset(&raw, &catalog, offset)?,
        None => raw,
    };
    let probs = calibrate(&raw, config.temperature)?;

    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for class in 0..c {
        let rows: Vec<usize> = (0..kept.len())
            .filter(|&r| probs.get(r, class) > config.score_threshold)
            .collect();
        let class_boxes: Vec<BoundingBox> = rows.iter().map(|&r| record.refined_box(kept[r], class)).collect();
        let class_scores: Vec<f64> = rows.iter().map(|&r| probs.get(r, class)).collect();
        for j in crate::geometry::nms(&class_boxes, &class_scores, config.class_nms_iou)? {
            all.push((class_scores[j], rows[j], class));
        }
    }
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    all.truncate(config.detections_per_image);

    let detections = all
        .into_iter()
        .map(|(score, r, class)| {
            let i = kept[r];
            Detection {
                bbox: record.refined_box(i, class),
                class_id: catalog.classes()[class].id,
                score,
                provenance: Provenance {
                    proposal_index: i,
                    objectness: objectness[i],
                    proposal_score: objectness[i],
                    proposal_quality: None,
                    quality: None,
                    raw_similarity: raw.get(r, class),
                    prototype_similarity: None,
                    regulated_score: score,
                },
            }
        })
        .collect();
    Ok(ImageOutput {
        image_id: record.image_id,
        detections,
        proposals: kept
            .iter()
            .map(|&i| ScoredProposal {
                bbox: boxes[i],
                score: objectness[i],
            })
            .collect(),
    })
}

/// Per-image timing summary in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub images: usize,
    pub total_ms: f64,
    pub aggregation_ms: f64,
    pub median_image_ms: f64,
    pub median_aggregation_ms: f64,
}

impl TimingReport {
    pub fn from_timings(timings: &[StageTimings]) -> Self {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let totals: Vec<f64> = timings.iter().map(|t| ms(t.total)).collect();
        let aggs: Vec<f64> = timings.iter().map(|t| ms(t.aggregation)).collect();
        Self {
            images: timings.len(),
            total_ms: totals.iter().sum(),
            aggregation_ms: aggs.iter().sum(),
            median_image_ms: median(&totals),
            median_aggregation_ms: median(&aggs),
        }
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    percentile(values, 0.5)
}

/// Nearest-rank percentile; 0 for an empty slice.
pub(crate) fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchReport {
    pub images: Vec<ImageOutput>,
    pub timing: TimingReport,
}

pub fn run_image(
    record: &ImageRecord,
    catalog: &ClassCatalog,
    bank: Option<&PrototypeBank>,
    config: &PipelineConfig,
) -> Result<ImageOutput> {
    Engine::new(catalog, bank, config.clone())?.run_image(record)
}

pub fn run_batch(
    records: &[ImageRecord],
    catalog: &ClassCatalog,
    bank: Option<&PrototypeBank>,
    config: &PipelineConfig,
) -> Result<BatchReport> {
    Engine::new(catalog, bank, config.clone())?.run_batch(records)
}
