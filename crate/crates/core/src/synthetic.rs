//! Seeded generator of detector output with suppressed novel objectness and
//! depressed novel region-text similarity, in an embedding space where every
//! class's visual prototype is its text embedding plus one shared offset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{GroundTruthObject, GroundTruthRecord};
use crate::geometry::{iou, BoundingBox};
use crate::pipeline::{ImageRecord, PipelineConfig, RefinedBoxes};
use crate::proposal_stage::RegionProposal;
use crate::prototypes::{dot, l2_normalized, ClassCatalog, ClassInfo, ClassSamples, Split};

/// Per-image detection cap of the benchmark, as in COCO-style evaluation.
pub const BENCHMARK_DETECTIONS_PER_IMAGE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectnessDist {
    pub mean: f64,
    /// Beta concentration `a + b`.
    pub concentration: f64,
}

impl ObjectnessDist {
    fn beta(&self) -> Result<Beta<f64>> {
        Beta::new(self.mean * self.concentration, (1.0 - self.mean) * self.concentration)
            .map_err(|e| Error::contract(format!("objectness distribution: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_width: f64,
    pub image_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side lengths as a fraction of the image side, `[min, max]`.
    pub object_size: [f64; 2],
    pub proposals_per_object: usize,
    pub clutter_per_image: usize,
    /// Std of center jitter (fraction of object size) and of log-size jitter.
    pub jitter: f64,
    pub dim: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub base_objectness: ObjectnessDist,
    pub novel_objectness: ObjectnessDist,
    pub clutter_objectness: ObjectnessDist,
    /// Novel-class similarity suppression in calibrated-logit units; raw
    /// similarities drop by `similarity_suppression * temperature`.
    pub similarity_suppression: f64,
    /// Shared background prior in calibrated-logit units; every raw
    /// similarity drops by `logit_bias * temperature`.
    pub logit_bias: f64,
    /// Expected norm of the per-object feature noise.
    pub feature_noise: f64,
    /// Per-object noise multiplier drawn from `[1 - spread, 1 + spread]`.
    pub noise_spread: f64,
    /// Expected norm of the per-proposal feature noise.
    pub proposal_noise: f64,
    /// Norm of the shared text-to-visual offset.
    pub prototype_offset: f64,
    /// Temperature the generated logits are meant to be read with.
    pub temperature: f64,
    /// Fraction of the way refined boxes move toward a base-class object or
    /// background blob.
    pub base_refinement: f64,
    /// Same for novel-class objects.
    pub novel_refinement: f64,
    /// Unlabeled clusters of overlapping proposals per image.
    pub background_blobs: usize,
    /// Weight of a random class's text embedding in a blob's feature; the
    /// shared visual offset is absent from blobs.
    pub blob_text_weight: f64,
    /// Labeled base-class sample features per class.
    pub samples_per_class: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_width: 640.0,
            image_height: 480.0,
            min_objects: 15,
            max_objects: 30,
            object_size: [0.05, 0.2],
            proposals_per_object: 6,
            clutter_per_image: 0,
            jitter: 0.25,
            dim: 64,
            base_classes: 60,
            novel_classes: 20,
            base_objectness: ObjectnessDist { mean: 0.8, concentration: 8.0 },
            novel_objectness: ObjectnessDist { mean: 0.3, concentration: 1.0 },
            clutter_objectness: ObjectnessDist { mean: 0.15, concentration: 4.0 },
            similarity_suppression: 2.0,
            logit_bias: 8.0,
            feature_noise: 1.6,
            noise_spread: 0.6,
            proposal_noise: 0.3,
            prototype_offset: 1.0,
            temperature: 0.05,
            base_refinement: 0.9,
            novel_refinement: 0.5,
            background_blobs: 30,
            blob_text_weight: 0.6,
            samples_per_class: 300,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("scene spec: {what}")));
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.base_classes == 0 {
            return bad("at least one base class is required");
        }
        if self.proposals_per_object == 0 {
            return bad("proposals_per_object must be >= 1");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0 && self.image_width.is_finite() && self.image_height.is_finite()) {
            return bad("image size must be positive");
        }
        let [lo, hi] = self.object_size;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("object_size must satisfy 0 < min <= max <= 1");
        }
        for (name, v) in [
            ("jitter", self.jitter),
            ("feature_noise", self.feature_noise),
            ("proposal_noise", self.proposal_noise),
            ("prototype_offset", self.prototype_offset),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.similarity_suppression >= 0.0 && self.similarity_suppression.is_finite()) {
            return bad("similarity_suppression must be >= 0");
        }
        if !self.logit_bias.is_finite() {
            return bad("logit_bias must be finite");
        }
        if !(self.blob_text_weight >= 0.0 && self.blob_text_weight.is_finite()) {
            return bad("blob_text_weight must be >= 0");
        }
        if !(0.0..1.0).contains(&self.noise_spread) {
            return bad("noise_spread must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.base_refinement) || !(0.0..=1.0).contains(&self.novel_refinement) {
            return bad("refinement must be in [0, 1]");
        }
        for (name, d) in [
            ("base_objectness", self.base_objectness),
            ("novel_objectness", self.novel_objectness),
            ("clutter_objectness", self.clutter_objectness),
        ] {
            if !(d.mean > 0.0 && d.mean < 1.0 && d.concentration > 0.0 && d.concentration.is_finite()) {
                return bad(&format!("{name} needs mean in (0, 1) and positive concentration"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.base_classes + self.novel_classes
    }

    /// Pipeline settings the benchmark runs with: the given profile read at
    /// the spec's temperature, capped at [`BENCHMARK_DETECTIONS_PER_IMAGE`].
    pub fn benchmark_config(&self, profile: PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            temperature: self.temperature,
            detections_per_image: BENCHMARK_DETECTIONS_PER_IMAGE,
            ..profile
        }
    }
}

/// Where a generated proposal came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// Index into the image's ground-truth objects.
    Object(usize),
    Clutter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub catalog: ClassCatalog,
    pub records: Vec<ImageRecord>,
    pub ground_truth: Vec<GroundTruthRecord>,
    /// Per image, per proposal.
    pub origins: Vec<Vec<Origin>>,
    pub samples: Vec<ClassSamples>,
    /// Shared offset `v` with `p_c = t_c + v`.
    pub offset: Vec<f64>,
    /// `(class_id, t_c + v)` for every class, in catalog order.
    pub true_prototypes: Vec<(u32, Vec<f64>)>,
}

fn quantize(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, norm: f64) -> Vec<f64> {
    let scale = norm / (dim as f64).sqrt();
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        if crate::prototypes::l2_norm(&v) > 1e-6 {
            return l2_normalized(&v);
        }
    }
}

fn class_catalog(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<(ClassCatalog, Vec<f64>)> {
    let mut classes = Vec::with_capacity(spec.num_classes());
    let mut embeddings = Vec::with_capacity(spec.num_classes());
    for c in 0..spec.num_classes() {
        let split = if c < spec.base_classes { Split::Base } else { Split::Novel };
        let prefix = if split == Split::Base { "base" } else { "novel" };
        classes.push(ClassInfo {
            id: c as u32,
            name: format!("{prefix}_{c:03}"),
            split,
        });
        let mut t = unit_vec(rng, spec.dim);
        quantize(&mut t);
        embeddings.push(t);
    }
    let mut offset: Vec<f64> = unit_vec(rng, spec.dim).iter().map(|x| x * spec.prototype_offset).collect();
    quantize(&mut offset);
    Ok((ClassCatalog::new(classes, embeddings)?, offset))
}

fn jittered(rng: &mut impl Rng, gt: &BoundingBox, jitter: f64, w: f64, h: f64) -> BoundingBox {
    let (cx, cy) = gt.center();
    let (bw, bh) = (gt.width(), gt.height());
    let n = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
    let ncx = cx + jitter * bw * n(rng);
    let ncy = cy + jitter * bh * n(rng);
    let nw = bw * (jitter * n(rng)).exp();
    let nh = bh * (jitter * n(rng)).exp();
    BoundingBox::from_center(ncx, ncy, nw, nh).expect("finite positive size").clip(w, h)
}

fn random_box(rng: &mut impl Rng, spec: &SceneSpec) -> BoundingBox {
    let (w, h) = (spec.image_width, spec.image_height);
    let [lo, hi] = spec.object_size;
    let bw = w * rng.random_range(lo..=hi);
    let bh = h * rng.random_range(lo..=hi);
    let x1 = rng.random_range(0.0..=(w - bw));
    let y1 = rng.random_range(0.0..=(h - bh));
    BoundingBox::new(x1, y1, x1 + bw, y1 + bh).expect("box inside the image")
}

fn lerp_box(from: &BoundingBox, to: &BoundingBox, t: f64) -> BoundingBox {
    let a = from.to_array();
    let b = to.to_array();
    let m: Vec<f64> = (0..4).map(|i| a[i] + t * (b[i] - a[i])).collect();
    BoundingBox::new(m[0], m[1], m[2], m[3]).expect("interpolation of valid boxes")
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

struct ImageParts {
    record: ImageRecord,
    ground_truth: GroundTruthRecord,
    origins: Vec<Origin>,
}

fn generate_image(
    spec: &SceneSpec,
    catalog: &ClassCatalog,
    prototypes: &[Vec<f64>],
    index: usize,
) -> Result<ImageParts> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 2);
    let (w, h) = (spec.image_width, spec.image_height);
    let base_beta = spec.base_objectness.beta()?;
    let novel_beta = spec.novel_objectness.beta()?;
    let clutter_beta = spec.clutter_objectness.beta()?;
    let n_classes = catalog.len();

    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects = Vec::with_capacity(n_objects);
    let mut proposals = Vec::new();
    let mut refined = Vec::new();
    let mut origins = Vec::new();
    let mut logits = Vec::new();

    let push_logits = |logits: &mut Vec<f64>, feature: &[f64]| {
        let f = l2_normalized(feature);
        for c in 0..n_classes {
            let mut s = dot(&f, catalog.embedding(c)) - spec.logit_bias * spec.temperature;
            if catalog.split(c) == Split::Novel {
                s -= spec.similarity_suppression * spec.temperature;
            }
            logits.push(s);
        }
    };

    for o in 0..n_objects {
        let gt = random_box(&mut rng, spec);
        let class = rng.random_range(0..n_classes);
        let split = catalog.split(class);
        objects.push(GroundTruthObject {
            bbox: gt,
            class_id: catalog.classes()[class].id,
            split,
        });

        let mut boxes: Vec<BoundingBox> =
            (0..spec.proposals_per_object).map(|_| jittered(&mut rng, &gt, spec.jitter, w, h)).collect();
        if !boxes.iter().any(|b| iou(b, &gt) > 0.5) {
            boxes[0] = gt;
        }
        let beta = if split == Split::Base { &base_beta } else { &novel_beta };
        let mut objectness: Vec<f64> = (0..boxes.len()).map(|_| beta.sample(&mut rng)).collect();
        if split == Split::Base {
            // The detector localizes classes it was trained on: the best
            // objectness goes to the best-aligned proposal.
            objectness.sort_by(|a, b| b.total_cmp(a));
            let mut by_iou: Vec<usize> = (0..boxes.len()).collect();
            by_iou.sort_by(|&a, &b| iou(&boxes[b], &gt).total_cmp(&iou(&boxes[a], &gt)).then(a.cmp(&b)));
            let mut assigned = vec![0.0; boxes.len()];
            for (rank, &i) in by_iou.iter().enumerate() {
                assigned[i] = objectness[rank];
            }
            objectness = assigned;
        }
        let spread = 1.0 + spec.noise_spread * rng.random_range(-1.0..=1.0);
        let object_noise = gaussian_vec(&mut rng, spec.dim, spec.feature_noise * spread);
        for (b, obj) in boxes.into_iter().zip(objectness) {
            let prop_noise = gaussian_vec(&mut rng, spec.dim, spec.proposal_noise);
            let feature: Vec<f64> = (0..spec.dim)
                .map(|i| prototypes[class][i] + object_noise[i] + prop_noise[i])
                .collect();
            let feature = to_f32(&l2_normalized(&feature));
            let f64_feature: Vec<f64> = feature.iter().map(|&x| x as f64).collect();
            push_logits(&mut logits, &f64_feature);
            let t = if split == Split::Base { spec.base_refinement } else { spec.novel_refinement };
            refined.push(lerp_box(&b, &gt, t));
            proposals.push(RegionProposal::new(b, obj, feature)?);
            origins.push(Origin::Object(o));
        }
    }
    for _ in 0..spec.background_blobs {
        let center = random_box(&mut rng, spec);
        let blob_noise = gaussian_vec(&mut rng, spec.dim, spec.feature_noise);
        let lookalike = rng.random_range(0..n_classes);
        let anchor: Vec<f64> = unit_vec(&mut rng, spec.dim)
            .iter()
            .zip(catalog.embedding(lookalike))
            .map(|(x, t)| x * spec.prototype_offset + spec.blob_text_weight * t)
            .collect();
        for _ in 0..spec.proposals_per_object {
            let b = jittered(&mut rng, &center, spec.jitter, w, h);
            let prop_noise = gaussian_vec(&mut rng, spec.dim, spec.proposal_noise);
            let feature: Vec<f64> = (0..spec.dim).map(|i| anchor[i] + blob_noise[i] + prop_noise[i]).collect();
            let feature = to_f32(&l2_normalized(&feature));
            let f64_feature: Vec<f64> = feature.iter().map(|&x| x as f64).collect();
            push_logits(&mut logits, &f64_feature);
            refined.push(lerp_box(&b, &center, spec.base_refinement));
            proposals.push(RegionProposal::new(b, clutter_beta.sample(&mut rng), feature)?);
            origins.push(Origin::Clutter);
        }
    }
    for _ in 0..spec.clutter_per_image {
        let b = random_box(&mut rng, spec);
        let feature = to_f32(&unit_vec(&mut rng, spec.dim));
        let f64_feature: Vec<f64> = feature.iter().map(|&x| x as f64).collect();
        push_logits(&mut logits, &f64_feature);
        refined.push(b);
        proposals.push(RegionProposal::new(b, clutter_beta.sample(&mut rng), feature)?);
        origins.push(Origin::Clutter);
    }
    let labels = origins
        .iter()
        .map(|o| match o {
            Origin::Object(i) if objects[*i].split == Split::Base => Some(objects[*i].class_id),
            _ => None,
        })
        .collect();
    let image_id = index as u64;
    Ok(ImageParts {
        record: ImageRecord {
            image_id,
            width: w,
            height: h,
            proposals,
            refined: Some(RefinedBoxes::Agnostic(refined)),
            raw_logits: Some(logits),
            labels: Some(labels),
        },
        ground_truth: GroundTruthRecord { image_id, objects },
        origins,
    })
}

fn base_samples(spec: &SceneSpec, catalog: &ClassCatalog, prototypes: &[Vec<f64>]) -> Result<Vec<ClassSamples>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let beta = spec.base_objectness.beta()?;
    Ok(catalog
        .base_indices()
        .into_iter()
        .map(|c| {
            let mut features = Vec::with_capacity(spec.samples_per_class);
            let mut scores = Vec::with_capacity(spec.samples_per_class);
            for _ in 0..spec.samples_per_class {
                let noise = gaussian_vec(&mut rng, spec.dim, spec.feature_noise);
                let f: Vec<f64> = prototypes[c].iter().zip(&noise).map(|(p, n)| p + n).collect();
                features.push(l2_normalized(&f));
                scores.push(beta.sample(&mut rng));
            }
            ClassSamples {
                class_id: catalog.classes()[c].id,
                features,
                scores: Some(scores),
            }
        })
        .collect())
}

/// Class catalog, shared offset and true prototypes of a spec, without
/// generating any image.
pub fn generate_space(spec: &SceneSpec) -> Result<(ClassCatalog, Vec<f64>, Vec<(u32, Vec<f64>)>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (catalog, offset) = class_catalog(spec, &mut rng)?;
    let prototypes = (0..catalog.len())
        .map(|c| {
            let p = catalog.embedding(c).iter().zip(&offset).map(|(t, v)| t + v).collect();
            (catalog.classes()[c].id, p)
        })
        .collect();
    Ok((catalog, offset, prototypes))
}

/// Generates a single image of a spec; identical to the image at `index`
/// of `generate_dataset`.
pub fn generate_record(spec: &SceneSpec, catalog: &ClassCatalog, true_prototypes: &[(u32, Vec<f64>)], index: usize) -> Result<(ImageRecord, GroundTruthRecord)> {
    let protos: Vec<Vec<f64>> = true_prototypes.iter().map(|(_, p)| p.clone()).collect();
    let parts = generate_image(spec, catalog, &protos, index)?;
    Ok((parts.record, parts.ground_truth))
}

pub fn generate_dataset(spec: &SceneSpec, num_images: usize) -> Result<SyntheticDataset> {
    let (catalog, offset, true_prototypes) = generate_space(spec)?;
    let protos: Vec<Vec<f64>> = true_prototypes.iter().map(|(_, p)| p.clone()).collect();
    let parts: Vec<ImageParts> = (0..num_images)
        .into_par_iter()
        .map(|i| generate_image(spec, &catalog, &protos, i))
        .collect::<Result<_>>()?;
    let samples = base_samples(spec, &catalog, &protos)?;
    let mut records = Vec::with_capacity(num_images);
    let mut ground_truth = Vec::with_capacity(num_images);
    let mut origins = Vec::with_capacity(num_images);
    for p in parts {
        records.push(p.record);
        ground_truth.push(p.ground_truth);
        origins.push(p.origins);
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        catalog,
        records,
        ground_truth,
        origins,
        samples,
        offset,
        true_prototypes,
    })
}

/// Lowers novel-object objectness by `objectness_delta` (clamped to
/// `[0, 1]`) and every novel raw logit by `similarity_delta` (in the same
/// logit units as the spec's suppression). Base entries are untouched.
pub fn inject_bias(dataset: &SyntheticDataset, objectness_delta: f64, similarity_delta: f64) -> Result<SyntheticDataset> {
    if !(objectness_delta >= 0.0 && similarity_delta >= 0.0) {
        return Err(Error::contract("bias deltas must be >= 0"));
    }
    let mut out = dataset.clone();
    let novel = out.catalog.novel_indices();
    let cols = out.catalog.len();
    let shift = similarity_delta * out.spec.temperature;
    for ((record, origins), gt) in out.records.iter_mut().zip(&out.origins).zip(&out.ground_truth) {
        for (p, origin) in record.proposals.iter_mut().zip(origins) {
            if let Origin::Object(o) = origin {
                if gt.objects[*o].split == Split::Novel {
                    p.objectness = (p.objectness - objectness_delta).clamp(0.0, 1.0);
                }
            }
        }
        if shift != 0.0 {
            if let Some(logits) = record.raw_logits.as_mut() {
                for row in logits.chunks_mut(cols) {
                    for &c in &novel {
                        row[c] -= shift;
                    }
                }
            }
        }
    }
    Ok(out)
}
