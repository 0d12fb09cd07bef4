//! Histogram-binned average precision.
//!
//! Scores in `[-1, 1]` are softly assigned to `M` uniformly spaced bins with
//! a triangular kernel. Precision and incremental recall are then computed per
//! bin instead of per rank, which makes the resulting `AP_Q` differentiable in
//! the scores almost everywhere.
//!
//! Bin indices are 0-based throughout: bin `m` has center `1 - m * delta`, so
//! bin 0 collects the highest scores.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, DescriptorMatrix, Matrix};

/// Scores may exceed `[-1, 1]` by this much from rounding; they are clamped.
pub const SCORE_TOL: f64 = 1e-6;
/// Below this cumulative mass the quantized precision of a bin is defined as 0.
pub const EMPTY_BIN_MASS: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinGrid {
    bins: usize,
    delta: f64,
}

impl BinGrid {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidBinCount(bins));
        }
        Ok(Self {
            bins,
            delta: 2.0 / (bins - 1) as f64,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn center(&self, m: usize) -> f64 {
        1.0 - m as f64 * self.delta
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|m| self.center(m)).collect()
    }

    /// Bins whose kernel or kernel slope can be nonzero at `x`.
    pub(crate) fn neighborhood(&self, x: f64) -> RangeInclusive<usize> {
        let t = ((1.0 - x) / self.delta).floor().max(0.0) as usize;
        t.saturating_sub(1)..=(t + 2).min(self.bins - 1)
    }
}

impl Default for BinGrid {
    fn default() -> Self {
        Self::new(DEFAULT_BINS).unwrap()
    }
}

/// Clamps `x` into `[-1, 1]`, rejecting values further out than [`SCORE_TOL`].
pub fn check_score(x: f64) -> Result<f64> {
    if !(x.abs() <= 1.0 + SCORE_TOL) {
        return Err(Error::OutOfDomain(x));
    }
    Ok(x.clamp(-1.0, 1.0))
}

#[inline]
pub(crate) fn kernel(x: f64, center: f64, delta: f64) -> f64 {
    (1.0 - (x - center).abs() / delta).max(0.0)
}

/// Triangular membership of score `x` in bin `m`.
pub fn soft_assign(x: f64, grid: &BinGrid, m: usize) -> Result<f64> {
    if m >= grid.bins() {
        return Err(Error::OutOfRange {
            k: m,
            len: grid.bins(),
        });
    }
    let x = check_score(x)?;
    Ok(kernel(x, grid.center(m), grid.delta()))
}

/// Dense `M x N` soft assignment of a score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    values: Matrix,
}

impl SoftAssignment {
    pub fn new(scores: &[f64], grid: &BinGrid) -> Result<Self> {
        let mut values = Matrix::zeros(grid.bins(), scores.len());
        for (i, &s) in scores.iter().enumerate() {
            let s = check_score(s)?;
            for m in 0..grid.bins() {
                values.set(m, i, kernel(s, grid.center(m), grid.delta()));
            }
        }
        Ok(Self { values })
    }

    pub fn bins(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bin(&self, m: usize) -> &[f64] {
        self.values.row(m)
    }

    pub fn cumulative(&self) -> CumulativeAssignment {
        let mut values = self.values.clone();
        for m in 1..values.rows() {
            for i in 0..values.cols() {
                let v = values.get(m - 1, i) + values.get(m, i);
                values.set(m, i, v);
            }
        }
        CumulativeAssignment { values }
    }
}

/// Row `m` holds the soft assignment summed over bins `0..=m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeAssignment {
    values: Matrix,
}

impl CumulativeAssignment {
    pub fn bin(&self, m: usize) -> &[f64] {
        self.values.row(m)
    }
}

fn mass(v: &[f64], relevant: &[bool]) -> (f64, f64) {
    v.iter()
        .zip(relevant)
        .fold((0.0, 0.0), |(pos, all), (&x, &r)| (if r { pos + x } else { pos }, all + x))
}

pub fn quantized_precision(cum: &CumulativeAssignment, relevant: &[bool], m: usize) -> f64 {
    let (pos, all) = mass(cum.bin(m), relevant);
    if all < EMPTY_BIN_MASS {
        0.0
    } else {
        pos / all
    }
}

pub fn quantized_incremental_recall(
    assign: &SoftAssignment,
    relevant: &[bool],
    m: usize,
) -> Result<f64> {
    let n_rel = relevant.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return Err(Error::NoRelevantItems);
    }
    Ok(mass(assign.bin(m), relevant).0 / n_rel as f64)
}

/// Precision with additive-one smoothing that counts within-bin ties as half
/// ranked above, half below.
pub fn tie_aware_precision(
    assign: &SoftAssignment,
    cum: &CumulativeAssignment,
    relevant: &[bool],
    m: usize,
) -> f64 {
    let (pos_here, all_here) = mass(assign.bin(m), relevant);
    let (pos_before, all_before) = if m == 0 {
        (0.0, 0.0)
    } else {
        mass(cum.bin(m - 1), relevant)
    };
    (1.0 + pos_here + 2.0 * pos_before) / (1.0 + all_here + 2.0 * all_before)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Quantized,
    TieAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Balancing {
    #[default]
    Uniform,
    ClassBalanced,
}

fn check_relevance(scores: &[f64], relevant: &[bool]) -> Result<()> {
    if scores.len() != relevant.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: relevant.len(),
        });
    }
    if !relevant.iter().any(|&r| r) {
        return Err(Error::NoRelevantItems);
    }
    Ok(())
}

/// `AP_Q` evaluated through the dense assignment matrices.
pub fn ap_q_variant(
    scores: &[f64],
    relevant: &[bool],
    grid: &BinGrid,
    variant: Variant,
) -> Result<f64> {
    check_relevance(scores, relevant)?;
    let assign = SoftAssignment::new(scores, grid)?;
    let cum = assign.cumulative();
    let mut ap = 0.0;
    for m in 0..grid.bins() {
        let p = match variant {
            Variant::Quantized => quantized_precision(&cum, relevant, m),
            Variant::TieAware => tie_aware_precision(&assign, &cum, relevant, m),
        };
        ap += p * quantized_incremental_recall(&assign, relevant, m)?;
    }
    Ok(ap)
}

pub fn ap_q(scores: &[f64], relevant: &[bool], grid: &BinGrid) -> Result<f64> {
    ap_q_variant(scores, relevant, grid, Variant::Quantized)
}

/// Per-bin quantities of one query, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct QueryStats {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Denominator of the precision at each bin (0 marks an empty bin).
    pub denom: Vec<f64>,
    pub num_relevant: f64,
    pub ap: f64,
}

/// Sparse forward: every score touches at most two bins.
pub(crate) fn query_stats(
    scores: &[f64],
    relevant: &[bool],
    grid: &BinGrid,
    variant: Variant,
) -> Result<QueryStats> {
    check_relevance(scores, relevant)?;
    let bins = grid.bins();
    let mut pos = vec![0.0; bins];
    let mut all = vec![0.0; bins];
    for (&s, &r) in scores.iter().zip(relevant) {
        let s = check_score(s)?;
        for m in grid.neighborhood(s) {
            let w = kernel(s, grid.center(m), grid.delta());
            all[m] += w;
            if r {
                pos[m] += w;
            }
        }
    }
    let num_relevant = relevant.iter().filter(|&&r| r).count() as f64;
    let mut precision = vec![0.0; bins];
    let mut denom = vec![0.0; bins];
    let recall: Vec<f64> = pos.iter().map(|p| p / num_relevant).collect();
    let (mut cum_pos, mut cum_all) = (0.0, 0.0);
    let mut ap = 0.0;
    for m in 0..bins {
        cum_pos += pos[m];
        cum_all += all[m];
        let (num, den) = match variant {
            Variant::Quantized => (cum_pos, cum_all),
            Variant::TieAware => (1.0 + 2.0 * cum_pos - pos[m], 1.0 + 2.0 * cum_all - all[m]),
        };
        if den >= EMPTY_BIN_MASS {
            precision[m] = num / den;
            denom[m] = den;
        }
        ap += precision[m] * recall[m];
    }
    Ok(QueryStats {
        precision,
        recall,
        denom,
        num_relevant,
        ap,
    })
}

/// Class label of every batch item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels {
    class_of: Vec<usize>,
}

impl BatchLabels {
    pub fn new(class_of: Vec<usize>) -> Self {
        Self { class_of }
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn class_of(&self) -> &[usize] {
        &self.class_of
    }

    pub fn relevant(&self, i: usize, j: usize) -> bool {
        self.class_of[i] == self.class_of[j]
    }

    pub fn relevance_row(&self, q: usize) -> Vec<bool> {
        (0..self.len()).map(|j| self.relevant(q, j)).collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &c in &self.class_of {
            *counts.entry(c).or_insert(0) += 1;
        }
        counts
    }

    /// Errors unless every class has at least two members and `B >= 2`.
    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::TooFewItems {
                needed: 2,
                available: self.len(),
            });
        }
        if let Some((&class, _)) = self.class_counts().iter().find(|(_, &n)| n == 1) {
            return Err(Error::SingletonClass { class });
        }
        Ok(())
    }
}

/// Per-query weights summing to one.
pub fn query_weights(labels: &BatchLabels, balancing: Balancing) -> Vec<f64> {
    let b = labels.len() as f64;
    match balancing {
        Balancing::Uniform => vec![1.0 / b; labels.len()],
        Balancing::ClassBalanced => {
            let counts = labels.class_counts();
            let k = counts.len() as f64;
            labels
                .class_of()
                .iter()
                .map(|c| 1.0 / (k * counts[c] as f64))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub grid: BinGrid,
    pub variant: Variant,
    pub balancing: Balancing,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            grid: BinGrid::default(),
            variant: Variant::Quantized,
            balancing: Balancing::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_query_ap: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Everything the backward pass needs from the forward.
pub(crate) struct BatchForward {
    pub scores: Matrix,
    pub relevance: Vec<Vec<bool>>,
    pub stats: Vec<QueryStats>,
    pub output: LossOutput,
}

/// Batch scores from raw rows; the diagonal is fixed at 1.
pub(crate) fn batch_scores(rows: &Matrix) -> Result<Matrix> {
    let b = rows.rows();
    let mut s = Matrix::zeros(b, b);
    for q in 0..b {
        s.set(q, q, 1.0);
        for i in q + 1..b {
            let v = check_score(dot(rows.row(q), rows.row(i)))?;
            s.set(q, i, v);
            s.set(i, q, v);
        }
    }
    Ok(s)
}

pub(crate) fn batch_forward(
    rows: &Matrix,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<BatchForward> {
    if rows.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: rows.rows(),
            found: labels.len(),
        });
    }
    labels.validate()?;
    let scores = batch_scores(rows)?;
    let relevance: Vec<Vec<bool>> = (0..labels.len()).map(|q| labels.relevance_row(q)).collect();
    let stats = (0..labels.len())
        .into_par_iter()
        .map(|q| query_stats(scores.row(q), &relevance[q], &cfg.grid, cfg.variant))
        .collect::<Result<Vec<_>>>()?;
    let weights = query_weights(labels, cfg.balancing);
    let mut map = 0.0;
    for (w, st) in weights.iter().zip(&stats) {
        map += w * st.ap;
    }
    let output = LossOutput {
        loss: 1.0 - map,
        per_query_ap: stats.iter().map(|s| s.ap).collect(),
        weights,
    };
    Ok(BatchForward {
        scores,
        relevance,
        stats,
        output,
    })
}

/// `1 - mAP_Q` over a batch where every item serves as a query against all
/// batch items, itself included.
pub fn map_q_loss(d: &DescriptorMatrix, labels: &BatchLabels, cfg: &LossConfig) -> Result<LossOutput> {
    map_q_loss_rows(d.as_matrix(), labels, cfg)
}

/// Same as [`map_q_loss`] on rows that are only approximately unit-norm;
/// off-diagonal scores must stay within [`SCORE_TOL`] of `[-1, 1]`.
pub fn map_q_loss_rows(rows: &Matrix, labels: &BatchLabels, cfg: &LossConfig) -> Result<LossOutput> {
    Ok(batch_forward(rows, labels, cfg)?.output)
}
