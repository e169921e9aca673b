//! Class catalog, base-class visual prototypes and delta-consistent
//! extrapolation of proxy prototypes for novel classes.
//!
//! Novel prototypes are extrapolated as `p̂_k = p̄ + (t_k − t̄)`, where `p̄`
//! and `t̄` are the means of the base-class prototypes and text embeddings,
//! then L2-normalized.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn is_novel(self) -> bool {
        matches!(self, Split::Novel)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Novel => "novel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub split: Split,
}

/// Ordered class list with one text embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCatalog {
    classes: Vec<ClassInfo>,
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

impl ClassCatalog {
    pub fn new(classes: Vec<ClassInfo>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if classes.len() != embeddings.len() {
            return Err(Error::length("catalog embeddings", classes.len(), embeddings.len()));
        }
        if !classes.iter().any(|c| c.split == Split::Base) {
            return Err(Error::contract("catalog needs at least one base class"));
        }
        let dim = embeddings[0].len();
        if dim == 0 {
            return Err(Error::contract("embedding dimension must be positive"));
        }
        for (c, e) in classes.iter().zip(&embeddings) {
            if e.len() != dim {
                return Err(Error::dimension(format!("text embedding of class {}", c.id), dim, e.len()));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("text embedding of class {}", c.id)));
            }
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::contract(format!("duplicate class id {}", c.id)));
            }
        }
        Ok(Self {
            classes,
            embeddings,
            dim,
        })
    }

    /// Catalog for work that only needs ids and splits, such as evaluation;
    /// every class gets the same one-dimensional placeholder embedding.
    pub fn labels_only(classes: Vec<ClassInfo>) -> Result<Self> {
        let embeddings = vec![vec![1.0]; classes.len()];
        if classes.is_empty() {
            return Err(Error::EmptyInput("class list"));
        }
        Self::new(classes, embeddings)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn embedding(&self, index: usize) -> &[f64] {
        &self.embeddings[index]
    }

    pub fn split(&self, index: usize) -> Split {
        self.classes[index].split
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.id == class_id)
    }

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split(i) == Split::Base).collect()
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split(i) == Split::Novel).collect()
    }

    /// Copy with every text embedding scaled to unit L2 norm.
    pub fn normalized(&self) -> Self {
        Self {
            classes: self.classes.clone(),
            embeddings: self.embeddings.iter().map(|e| l2_normalized(e)).collect(),
            dim: self.dim,
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ha, ta) = a.split_at(a.len() / 4 * 4);
    let (hb, tb) = b.split_at(ha.len());
    for (x, y) in ha.chunks_exact(4).zip(hb.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dot(a, b_j)` for every `b_j`, bit-identical to calling [`dot`] per pair
/// but reading `a` once per group of four.
pub fn dot_many(a: &[f64], bs: &[&[f64]], out: &mut Vec<f64>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked just above.
        return unsafe { dot_many_avx(a, bs, out) };
    }
    dot_many_body(a, bs, out)
}

// Same four lanes as the portable build, one register each. Separate
// multiply and add keep the results bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dot_many_avx(a: &[f64], bs: &[&[f64]], out: &mut Vec<f64>) {
    use std::arch::x86_64::*;
    let head = a.len() / 4 * 4;
    let lanes = |v: __m256d| {
        let mut l = [0.0f64; 4];
        _mm256_storeu_pd(l.as_mut_ptr(), v);
        l
    };
    let mut groups = bs.chunks_exact(4);
    for g in &mut groups {
        let (b0, b1, b2, b3) = (&g[0][..head], &g[1][..head], &g[2][..head], &g[3][..head]);
        let mut acc = [_mm256_setzero_pd(); 4];
        let mut i = 0;
        while i < head {
            // SAFETY: i + 4 <= head, which bounds a and every b_j.
            let x = _mm256_loadu_pd(a.as_ptr().add(i));
            acc[0] = _mm256_add_pd(acc[0], _mm256_mul_pd(x, _mm256_loadu_pd(b0.as_ptr().add(i))));
            acc[1] = _mm256_add_pd(acc[1], _mm256_mul_pd(x, _mm256_loadu_pd(b1.as_ptr().add(i))));
            acc[2] = _mm256_add_pd(acc[2], _mm256_mul_pd(x, _mm256_loadu_pd(b2.as_ptr().add(i))));
            acc[3] = _mm256_add_pd(acc[3], _mm256_mul_pd(x, _mm256_loadu_pd(b3.as_ptr().add(i))));
            i += 4;
        }
        for (acc, b) in acc.into_iter().zip(g) {
            let l = lanes(acc);
            let mut tail = 0.0;
            for (x, y) in a[head..].iter().zip(&b[head..]) {
                tail += x * y;
            }
            out.push((l[0] + l[1]) + (l[2] + l[3]) + tail);
        }
    }
    out.extend(groups.remainder().iter().map(|b| dot(a, b)));
}

/// [`dot_many`] for two rows at once: all of `a0`'s products, then `a1`'s.
pub fn dot_many_pair(a0: &[f64], a1: &[f64], bs: &[&[f64]], out: &mut Vec<f64>) {
    #[cfg(target_arch = "x86_64")]
    if a0.len() == a1.len() && std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked just above.
        return unsafe { dot_many_pair_avx(a0, a1, bs, out) };
    }
    dot_many(a0, bs, out);
    dot_many(a1, bs, out);
}

// Both rows share each prototype load; every product keeps the lanes of `dot`.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dot_many_pair_avx(a0: &[f64], a1: &[f64], bs: &[&[f64]], out: &mut Vec<f64>) {
    use std::arch::x86_64::*;
    let head = a0.len() / 4 * 4;
    let start = out.len();
    out.resize(start + 2 * bs.len(), 0.0);
    let (row0, row1) = out[start..].split_at_mut(bs.len());
    let lanes = |v: __m256d| {
        let mut l = [0.0f64; 4];
        _mm256_storeu_pd(l.as_mut_ptr(), v);
        l
    };
    let finish = |acc: __m256d, a: &[f64], b: &[f64]| {
        let l = lanes(acc);
        let mut tail = 0.0;
        for (x, y) in a[head..].iter().zip(&b[head..]) {
            tail += x * y;
        }
        (l[0] + l[1]) + (l[2] + l[3]) + tail
    };
    let mut j = 0;
    while j + 4 <= bs.len() {
        let b = [&bs[j][..head], &bs[j + 1][..head], &bs[j + 2][..head], &bs[j + 3][..head]];
        let mut acc0 = [_mm256_setzero_pd(); 4];
        let mut acc1 = [_mm256_setzero_pd(); 4];
        let mut i = 0;
        while i < head {
            // SAFETY: i + 4 <= head, which bounds both rows and every b.
            let x0 = _mm256_loadu_pd(a0.as_ptr().add(i));
            let x1 = _mm256_loadu_pd(a1.as_ptr().add(i));
            for t in 0..4 {
                let y = _mm256_loadu_pd(b[t].as_ptr().add(i));
                acc0[t] = _mm256_add_pd(acc0[t], _mm256_mul_pd(x0, y));
                acc1[t] = _mm256_add_pd(acc1[t], _mm256_mul_pd(x1, y));
            }
            i += 4;
        }
        for t in 0..4 {
            row0[j + t] = finish(acc0[t], a0, bs[j + t]);
            row1[j + t] = finish(acc1[t], a1, bs[j + t]);
        }
        j += 4;
    }
    for t in j..bs.len() {
        row0[t] = dot(a0, bs[t]);
        row1[t] = dot(a1, bs[t]);
    }
}

#[inline(always)]
fn dot_many_body(a: &[f64], bs: &[&[f64]], out: &mut Vec<f64>) {
    let head = a.len() / 4 * 4;
    let mut groups = bs.chunks_exact(4);
    for g in &mut groups {
        let mut acc = [[0.0f64; 4]; 4];
        let rows = a[..head]
            .chunks_exact(4)
            .zip(g[0][..head].chunks_exact(4))
            .zip(g[1][..head].chunks_exact(4))
            .zip(g[2][..head].chunks_exact(4))
            .zip(g[3][..head].chunks_exact(4));
        for ((((x, y0), y1), y2), y3) in rows {
            for (acc, y) in acc.iter_mut().zip([y0, y1, y2, y3]) {
                acc[0] += x[0] * y[0];
                acc[1] += x[1] * y[1];
                acc[2] += x[2] * y[2];
                acc[3] += x[3] * y[3];
            }
        }
        for (acc, b) in acc.iter().zip(g) {
            let mut tail = 0.0;
            for (x, y) in a[head..].iter().zip(&b[head..]) {
                tail += x * y;
            }
            out.push((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail);
        }
    }
    out.extend(groups.remainder().iter().map(|b| dot(a, b)));
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Unit-norm copy; a zero vector stays zero.
pub fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Loads an `f32` feature into `buf` as `f64`, unit-normalized when asked;
/// bit-identical to [`l2_normalized`] of the widened vector.
pub fn load_feature(src: &[f32], normalize: bool, buf: &mut Vec<f64>) {
    buf.clear();
    buf.resize(src.len(), 0.0);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked just above.
        return unsafe { load_feature_avx(src, normalize, buf) };
    }
    for (d, &v) in buf.iter_mut().zip(src) {
        *d = v as f64;
    }
    if normalize {
        let n = l2_norm(buf);
        if n > 0.0 {
            for x in buf.iter_mut() {
                *x /= n;
            }
        }
    }
}

// Widening is exact, and the norm keeps the four lanes of `dot`.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn load_feature_avx(src: &[f32], normalize: bool, buf: &mut [f64]) {
    use std::arch::x86_64::*;
    let head = src.len() / 4 * 4;
    let mut acc = _mm256_setzero_pd();
    let mut i = 0;
    while i < head {
        // SAFETY: i + 4 <= head <= len of both slices.
        let x = _mm256_cvtps_pd(_mm_loadu_ps(src.as_ptr().add(i)));
        _mm256_storeu_pd(buf.as_mut_ptr().add(i), x);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(x, x));
        i += 4;
    }
    for (d, &v) in buf[head..].iter_mut().zip(&src[head..]) {
        *d = v as f64;
    }
    if !normalize {
        return;
    }
    let mut l = [0.0f64; 4];
    _mm256_storeu_pd(l.as_mut_ptr(), acc);
    let mut tail = 0.0;
    for x in &buf[head..] {
        tail += x * x;
    }
    let n = ((l[0] + l[1]) + (l[2] + l[3]) + tail).sqrt();
    if n > 0.0 {
        let nv = _mm256_set1_pd(n);
        let mut i = 0;
        while i < head {
            // SAFETY: as above.
            let p = buf.as_mut_ptr().add(i);
            _mm256_storeu_pd(p, _mm256_div_pd(_mm256_loadu_pd(p), nv));
            i += 4;
        }
        for x in &mut buf[head..] {
            *x /= n;
        }
    }
}

/// Region-prototype similarity (plain dot product).
pub fn region_prototype_similarity(feature: &[f64], prototype: &[f64]) -> Result<f64> {
    if feature.len() != prototype.len() {
        return Err(Error::dimension("region_prototype_similarity", prototype.len(), feature.len()));
    }
    Ok(dot(feature, prototype))
}

/// How base-class samples are chosen before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Up to `n` samples drawn uniformly without replacement.
    RandomN { n: usize, seed: u64 },
    /// The `k` highest-scoring samples.
    TopK { k: usize },
}

impl SamplingStrategy {
    pub fn random(n: usize, seed: u64) -> Self {
        SamplingStrategy::RandomN { n, seed }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingStrategy::RandomN { n, .. } => write!(f, "random:{n}"),
            SamplingStrategy::TopK { k } => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    /// Parses `random:N` or `topk:K`; the random seed defaults to 0.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::contract(format!("invalid sampling strategy '{s}' (expected random:N or topk:K)"));
        let (kind, count) = s.split_once(':').ok_or_else(bad)?;
        let count: usize = count.trim().parse().map_err(|_| bad())?;
        if count == 0 {
            return Err(bad());
        }
        match kind.trim() {
            "random" => Ok(SamplingStrategy::RandomN { n: count, seed: 0 }),
            "topk" => Ok(SamplingStrategy::TopK { k: count }),
            _ => Err(bad()),
        }
    }
}

/// Region features collected for one base class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSamples {
    pub class_id: u32,
    pub features: Vec<Vec<f64>>,
    /// Per-sample confidence; required by [`SamplingStrategy::TopK`].
    pub scores: Option<Vec<f64>>,
}

/// Measured prototypes for base classes, keyed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePrototypes {
    pub entries: Vec<(u32, Vec<f64>)>,
}

impl BasePrototypes {
    pub fn get(&self, class_id: u32) -> Option<&[f64]> {
        self.entries.iter().find(|(id, _)| *id == class_id).map(|(_, v)| v.as_slice())
    }
}

fn select_samples(samples: &ClassSamples, strategy: SamplingStrategy) -> Result<Vec<usize>> {
    let available = samples.features.len();
    match strategy {
        SamplingStrategy::RandomN { n, seed } => {
            if n >= available {
                return Ok((0..available).collect());
            }
            // Per-class stream so the draw does not depend on class order.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(samples.class_id as u64);
            let mut picked = rand::seq::index::sample(&mut rng, available, n).into_vec();
            picked.sort_unstable();
            Ok(picked)
        }
        SamplingStrategy::TopK { k } => {
            let scores = samples.scores.as_ref().ok_or_else(|| {
                Error::contract(format!("top-k sampling needs scores for class {}", samples.class_id))
            })?;
            if scores.len() != available {
                return Err(Error::length(
                    format!("sample scores of class {}", samples.class_id),
                    available,
                    scores.len(),
                ));
            }
            let mut order = crate::geometry::descending_order(scores);
            order.truncate(k);
            Ok(order)
        }
    }
}

/// Mean of the selected sample features per base class, L2-normalized.
pub fn compute_base_prototypes(samples: &[ClassSamples], strategy: SamplingStrategy) -> Result<BasePrototypes> {
    let mut entries = Vec::with_capacity(samples.len());
    for class in samples {
        if class.features.is_empty() {
            return Err(Error::MissingSamples { class_id: class.class_id });
        }
        let dim = class.features[0].len();
        if let Some(f) = class.features.iter().find(|f| f.len() != dim) {
            return Err(Error::dimension(format!("samples of class {}", class.class_id), dim, f.len()));
        }
        let picked = select_samples(class, strategy)?;
        let mut mean = vec![0.0; dim];
        for &i in &picked {
            for (m, v) in mean.iter_mut().zip(&class.features[i]) {
                *m += v;
            }
        }
        let count = picked.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        entries.push((class.class_id, l2_normalized(&mean)));
    }
    Ok(BasePrototypes { entries })
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        count += 1;
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    sum
}

/// Pre-normalization extrapolation `p̄ + (t − t̄)`.
pub fn extrapolate_raw(mean_prototype: &[f64], mean_text: &[f64], text: &[f64]) -> Vec<f64> {
    mean_prototype
        .iter()
        .zip(mean_text)
        .zip(text)
        .map(|((p, tm), t)| p + (t - tm))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub strategy: SamplingStrategy,
    pub normalized_embeddings: bool,
}

/// Per-class visual prototypes: measured for base classes, extrapolated for
/// novel ones. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub classes: Vec<ClassInfo>,
    /// Text embeddings the bank was built against, aligned with `classes`.
    pub text_embeddings: Vec<Vec<f64>>,
    /// `p_l` for base classes and `p̂_k` for novel classes, aligned with `classes`.
    pub prototypes: Vec<Vec<f64>>,
    pub mean_base_prototype: Vec<f64>,
    pub mean_base_text: Vec<f64>,
    pub provenance: Option<BankProvenance>,
}

impl PrototypeBank {
    pub fn dim(&self) -> usize {
        self.mean_base_prototype.len()
    }

    pub fn prototype_of(&self, class_id: u32) -> Option<&[f64]> {
        self.classes.iter().position(|c| c.id == class_id).map(|i| self.prototypes[i].as_slice())
    }

    pub fn recomputed_means(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.dim();
        let base = || self.classes.iter().enumerate().filter(|(_, c)| c.split == Split::Base).map(|(i, _)| i);
        (
            mean_of(base().map(|i| self.prototypes[i].as_slice()), dim),
            mean_of(base().map(|i| self.text_embeddings[i].as_slice()), dim),
        )
    }

    /// Checks shape and that the stored means match the stored base vectors.
    pub fn validate(&self, tolerance: f64) -> Result<()> {
        let dim = self.dim();
        if self.classes.len() != self.prototypes.len() || self.classes.len() != self.text_embeddings.len() {
            return Err(Error::contract("bank vectors do not align with its class list"));
        }
        if !self.classes.iter().any(|c| c.split == Split::Base) {
            return Err(Error::contract("bank has no base class"));
        }
        if self.mean_base_text.len() != dim {
            return Err(Error::dimension("bank mean text embedding", dim, self.mean_base_text.len()));
        }
        for (c, (p, t)) in self.classes.iter().zip(self.prototypes.iter().zip(&self.text_embeddings)) {
            for v in [p, t] {
                if v.len() != dim {
                    return Err(Error::dimension(format!("bank vector of class {}", c.id), dim, v.len()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("bank vector of class {}", c.id)));
                }
            }
        }
        let (pm, tm) = self.recomputed_means();
        let max_err = pm
            .iter()
            .zip(&self.mean_base_prototype)
            .chain(tm.iter().zip(&self.mean_base_text))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !(max_err <= tolerance) {
            return Err(Error::contract(format!(
                "stored base means differ from recomputed means by {max_err:e}"
            )));
        }
        Ok(())
    }

    /// Checks that the bank carries the same classes and splits as `catalog`.
    pub fn check_catalog(&self, catalog: &ClassCatalog) -> Result<()> {
        if self.dim() != catalog.dim() {
            return Err(Error::dimension("bank vs catalog", catalog.dim(), self.dim()));
        }
        for c in catalog.classes() {
            match self.classes.iter().find(|b| b.id == c.id) {
                None if c.split == Split::Novel => {
                    return Err(Error::contract(format!("bank has no prototype for novel class {}", c.id)))
                }
                Some(b) if b.split != c.split => {
                    return Err(Error::contract(format!(
                        "class {} is {} in the bank but {} in the catalog",
                        c.id, b.split, c.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Builds the full bank from measured base prototypes and the catalog's text
/// embeddings.
pub fn extrapolate_novel_prototypes(base: &BasePrototypes, catalog: &ClassCatalog) -> Result<PrototypeBank> {
    let dim = catalog.dim();
    for (id, v) in &base.entries {
        if v.len() != dim {
            return Err(Error::dimension(format!("base prototype of class {id}"), dim, v.len()));
        }
    }
    let base_idx = catalog.base_indices();
    let mut base_protos = Vec::with_capacity(base_idx.len());
    for &i in &base_idx {
        let id = catalog.classes()[i].id;
        base_protos.push(base.get(id).ok_or(Error::MissingSamples { class_id: id })?);
    }
    let mean_base_prototype = mean_of(base_protos.iter().copied(), dim);
    let mean_base_text = mean_of(base_idx.iter().map(|&i| catalog.embedding(i)), dim);

    let mut prototypes = Vec::with_capacity(catalog.len());
    let mut cursor = base_protos.into_iter();
    for i in 0..catalog.len() {
        prototypes.push(match catalog.split(i) {
            Split::Base => cursor.next().expect("one prototype per base class").to_vec(),
            Split::Novel => l2_normalized(&extrapolate_raw(
                &mean_base_prototype,
                &mean_base_text,
                catalog.embedding(i),
            )),
        });
    }
    Ok(PrototypeBank {
        classes: catalog.classes().to_vec(),
        text_embeddings: catalog.embeddings().to_vec(),
        prototypes,
        mean_base_prototype,
        mean_base_text,
        provenance: None,
    })
}
