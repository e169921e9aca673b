//! Classification-stage re-scoring.
//!
//! Stages run in a fixed order: raw region-text similarity, prototype
//! aggregation on novel columns, sigmoid calibration, and localization
//! quality regulation. Base-class columns are never touched before
//! calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proposal_stage::QualityVector;
use crate::prototypes::{dot, dot_many, dot_many_pair, load_feature, ClassCatalog, PrototypeBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Aggregated,
    Calibrated,
    Regulated,
}

/// Row-major proposals x classes score matrix tagged with its stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    stage: Stage,
}

impl ScoreTable {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, stage: Stage) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::length("score table values", rows * cols, values.len()));
        }
        if stage >= Stage::Calibrated {
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::contract(format!("{stage:?} score {v} outside [0, 1]")));
            }
        } else if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score table".into()));
        }
        Ok(Self { rows, cols, values, stage })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn expect_stage(&self, allowed: &[Stage], op: &str) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::contract(format!("{op} cannot take a {:?} table", self.stage)))
        }
    }
}

fn check_features(features: &[Vec<f64>], dim: usize) -> Result<()> {
    match features.iter().find(|f| f.len() != dim) {
        Some(f) => Err(Error::dimension("region features", dim, f.len())),
        None => Ok(()),
    }
}

/// `s[i][k] = f_i · t_k`.
pub fn region_text_similarity(features: &[Vec<f64>], catalog: &ClassCatalog) -> Result<ScoreTable> {
    check_features(features, catalog.dim())?;
    let cols = catalog.len();
    let mut values = Vec::with_capacity(features.len() * cols);
    for f in features {
        values.extend(catalog.embeddings().iter().map(|t| dot(f, t)));
    }
    Ok(ScoreTable {
        rows: features.len(),
        cols,
        values,
        stage: Stage::Raw,
    })
}

/// Novel-class columns paired with their bank prototypes.
#[derive(Debug, Clone)]
pub struct NovelColumns<'a> {
    pub columns: Vec<usize>,
    pub prototypes: Vec<&'a [f64]>,
}

impl<'a> NovelColumns<'a> {
    pub fn resolve(catalog: &ClassCatalog, bank: &'a PrototypeBank) -> Result<Self> {
        if bank.dim() != catalog.dim() {
            return Err(Error::dimension("prototype bank", catalog.dim(), bank.dim()));
        }
        let columns = catalog.novel_indices();
        let prototypes = columns
            .iter()
            .map(|&c| {
                let id = catalog.classes()[c].id;
                bank.prototype_of(id)
                    .ok_or_else(|| Error::contract(format!("bank has no prototype for novel class {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { columns, prototypes })
    }
}

/// `f_i · p̂_k` for every row and novel column, row-major `rows x novel`.
pub fn prototype_similarities(features: &[Vec<f64>], novel: &NovelColumns<'_>) -> Vec<f64> {
    let mut out = Vec::with_capacity(features.len() * novel.columns.len());
    for f in features {
        dot_many(f, &novel.prototypes, &mut out);
    }
    out
}

/// [`prototype_similarities`] over raw `f32` features, loaded one at a time.
pub(crate) fn prototype_similarities_f32<'a>(
    mut features: impl ExactSizeIterator<Item = &'a [f32]>,
    normalize: bool,
    novel: &NovelColumns<'_>,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(features.len() * novel.columns.len());
    let (mut buf0, mut buf1) = (Vec::new(), Vec::new());
    while let Some(f0) = features.next() {
        load_feature(f0, normalize, &mut buf0);
        match features.next() {
            Some(f1) => {
                load_feature(f1, normalize, &mut buf1);
                dot_many_pair(&buf0, &buf1, &novel.prototypes, &mut out);
            }
            None => dot_many(&buf0, &novel.prototypes, &mut out),
        }
    }
    out
}

/// Adds `alpha * proto_sim` to the novel columns of a raw table.
pub(crate) fn apply_aggregation(raw: &ScoreTable, novel_columns: &[usize], proto_sim: &[f64], alpha: f64) -> ScoreTable {
    let mut out = raw.clone();
    let n = novel_columns.len();
    for r in 0..raw.rows {
        let base = r * raw.cols;
        for (j, &c) in novel_columns.iter().enumerate() {
            out.values[base + c] += alpha * proto_sim[r * n + j];
        }
    }
    out.stage = Stage::Aggregated;
    out
}

/// Visual-similarity aggregation restricted to novel columns:
/// `s + alpha * f · p̂`. Base columns are copied bit-for-bit.
pub fn aggregate_similarity(
    raw: &ScoreTable,
    features: &[Vec<f64>],
    catalog: &ClassCatalog,
    bank: &PrototypeBank,
    alpha: f64,
) -> Result<ScoreTable> {
    raw.expect_stage(&[Stage::Raw], "aggregate_similarity")?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::contract(format!("alpha must be >= 0, got {alpha}")));
    }
    if raw.cols != catalog.len() {
        return Err(Error::length("score table columns", catalog.len(), raw.cols));
    }
    if features.len() != raw.rows {
        return Err(Error::length("aggregate_similarity features", raw.rows, features.len()));
    }
    check_features(features, catalog.dim())?;
    let novel = NovelColumns::resolve(catalog, bank)?;
    let sims = prototype_similarities(features, &novel);
    Ok(apply_aggregation(raw, &novel.columns, &sims, alpha))
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(s / temperature)` element-wise.
pub fn calibrate(table: &ScoreTable, temperature: f64) -> Result<ScoreTable> {
    table.expect_stage(&[Stage::Raw, Stage::Aggregated], "calibrate")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    Ok(ScoreTable {
        rows: table.rows,
        cols: table.cols,
        values: table.values.iter().map(|&s| sigmoid(s / temperature)).collect(),
        stage: Stage::Calibrated,
    })
}

/// Weighted geometric mean `c^gamma * q^(1 - gamma)`, with zero bases mapping to 0.
#[inline]
pub fn regulate_value(c: f64, q: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        return c;
    }
    if c <= 0.0 || q <= 0.0 {
        return 0.0;
    }
    (gamma * c.ln() + (1.0 - gamma) * q.ln()).exp().min(1.0)
}

/// `regulate_value` over one row sharing a quality, appended to `out`.
pub fn regulate_row(row: &[f64], q: f64, gamma: f64, out: &mut Vec<f64>) {
    if gamma == 1.0 {
        out.extend_from_slice(row);
    } else if q <= 0.0 {
        out.extend(std::iter::repeat_n(0.0, row.len()));
    } else {
        let lq = (1.0 - gamma) * q.ln();
        out.extend(row.iter().map(|&c| if c <= 0.0 { 0.0 } else { (gamma * c.ln() + lq).exp().min(1.0) }));
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("gamma must be in (0, 1], got {gamma}")))
    }
}

/// Regulates every class score of row `i` by the row's localization quality.
pub fn quality_regulate(table: &ScoreTable, quality: &QualityVector, gamma: f64) -> Result<ScoreTable> {
    table.expect_stage(&[Stage::Calibrated], "quality_regulate")?;
    check_gamma(gamma)?;
    if quality.len() != table.rows {
        return Err(Error::length("quality_regulate quality", table.rows, quality.len()));
    }
    let mut values = Vec::with_capacity(table.values.len());
    for r in 0..table.rows {
        regulate_row(table.row(r), quality[r], gamma, &mut values);
    }
    Ok(ScoreTable {
        rows: table.rows,
        cols: table.cols,
        values,
        stage: Stage::Regulated,
    })
}

/// Mean shift `s_agg - s` over every novel-class entry of paired tables.
pub fn trivial_offset_calibrate(pairs: &[(ScoreTable, ScoreTable)], catalog: &ClassCatalog) -> Result<f64> {
    let novel = catalog.novel_indices();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (raw, agg) in pairs {
        raw.expect_stage(&[Stage::Raw], "trivial_offset_calibrate")?;
        agg.expect_stage(&[Stage::Aggregated], "trivial_offset_calibrate")?;
        if raw.rows != agg.rows || raw.cols != agg.cols || raw.cols != catalog.len() {
            return Err(Error::contract("calibration tables must share shape with the catalog"));
        }
        for r in 0..raw.rows {
            for &c in &novel {
                sum += agg.get(r, c) - raw.get(r, c);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::contract("trivial offset needs a non-empty calibration set with novel classes"));
    }
    Ok(sum / count as f64)
}

/// Shifts every novel column of a raw table by `alpha0`.
pub fn apply_trivial_offset(raw: &ScoreTable, catalog: &ClassCatalog, alpha0: f64) -> Result<ScoreTable> {
    raw.expect_stage(&[Stage::Raw], "apply_trivial_offset")?;
    if raw.cols != catalog.len() {
        return Err(Error::length("score table columns", catalog.len(), raw.cols));
    }
    let novel = catalog.novel_indices();
    let ones = vec![1.0; raw.rows * novel.len()];
    Ok(apply_aggregation(raw, &novel, &ones, alpha0))
}
