//! Closed-form gradient of `1 - mAP_Q` with respect to the descriptors, and a
//! central-difference checker for it.
//!
//! The backward runs in three steps per query `q`:
//!
//! 1. `dAP_q / d delta_{k,i}` for every bin `k` touched by item `i`. A change in
//!    the assignment to bin `k` moves the incremental recall of bin `k` and the
//!    precision of every bin whose cumulative mass includes `k`; suffix sums
//!    over bins make this O(M) per query.
//! 2. Chain through the triangular kernel slope to get `dAP_q / dS_qi`.
//! 3. Chain through `S_qi = d_q . d_i`, which feeds both `d_q` and `d_i`.
//!
//! The self-score `S_qq` is pinned at 1 (its value on the unit sphere), so it
//! contributes to the loss but not to the gradient. Gradients are taken with
//! respect to the raw rows; projecting onto the sphere is the embedder's job.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{normalize, DescriptorMatrix, Matrix};
use crate::quantized::{
    batch_forward, batch_scores, map_q_loss_rows, BatchLabels, BinGrid, LossConfig, LossOutput,
    QueryStats, Variant,
};

/// Kinks closer than this fraction of the bin width are excluded by [`grad_check`].
pub const KINK_RADIUS_FRACTION: f64 = 1e-3;
/// Valid finite-difference steps.
pub const MIN_STEP: f64 = 1e-8;
pub const MAX_STEP: f64 = 1e-3;
/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Slope of the triangular kernel of bin `m` at `x`, with `sign(0) = 0`.
pub fn soft_assign_grad(x: f64, grid: &BinGrid, m: usize) -> f64 {
    let d = x - grid.center(m);
    if d.abs() > grid.delta() || d == 0.0 {
        0.0
    } else {
        -d.signum() / grid.delta()
    }
}

/// Kernel slope used by the backward pass. Scores pinned at the ends of the
/// domain can only move inward, so there the one-sided slope is used.
fn backward_slope(s: f64, grid: &BinGrid, m: usize) -> f64 {
    let last = grid.bins() - 1;
    let inv = 1.0 / grid.delta();
    if s >= 1.0 {
        match m {
            0 => inv,
            1 => -inv,
            _ => 0.0,
        }
    } else if s <= -1.0 {
        if m == last {
            -inv
        } else if m + 1 == last {
            inv
        } else {
            0.0
        }
    } else {
        soft_assign_grad(s, grid, m)
    }
}

/// `dAP_q / dS_qi` for every item of one query.
pub(crate) fn query_score_grad(
    scores: &[f64],
    relevant: &[bool],
    grid: &BinGrid,
    variant: Variant,
    stats: &QueryStats,
) -> Vec<f64> {
    let bins = grid.bins();
    // For each bin k: dAP/d delta_{k,i} = y_i * rel_coef[k] - all_coef[k].
    let mut rel_coef = vec![0.0; bins];
    let mut all_coef = vec![0.0; bins];
    let later = match variant {
        Variant::Quantized => 1.0,
        Variant::TieAware => 2.0,
    };
    let (mut suffix_a, mut suffix_b) = (0.0, 0.0);
    for k in (0..bins).rev() {
        let (here_a, here_b) = if stats.denom[k] > 0.0 {
            let a = stats.recall[k] / stats.denom[k];
            (a, a * stats.precision[k])
        } else {
            (0.0, 0.0)
        };
        rel_coef[k] = stats.precision[k] / stats.num_relevant + here_a + later * suffix_a;
        all_coef[k] = here_b + later * suffix_b;
        suffix_a += here_a;
        suffix_b += here_b;
    }

    scores
        .iter()
        .zip(relevant)
        .map(|(&s, &r)| {
            let s = s.clamp(-1.0, 1.0);
            grid.neighborhood(s)
                .map(|k| {
                    let coef = if r { rel_coef[k] - all_coef[k] } else { -all_coef[k] };
                    coef * backward_slope(s, grid, k)
                })
                .sum()
        })
        .collect()
}

/// Row `i` holds `d loss / d d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer(Matrix);

impl GradientBuffer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(Matrix::zeros(rows, cols))
    }

    pub fn from_matrix(m: Matrix) -> Self {
        Self(m)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.as_slice().iter().all(|v| v.is_finite())
    }
}

pub fn loss_backward_descriptors(
    d: &DescriptorMatrix,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<(LossOutput, GradientBuffer)> {
    loss_backward_rows(d.as_matrix(), labels, cfg)
}

/// Loss and descriptor gradient for raw rows (see [`map_q_loss_rows`]).
pub fn loss_backward_rows(
    rows: &Matrix,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<(LossOutput, GradientBuffer)> {
    let fwd = batch_forward(rows, labels, cfg)?;
    let b = rows.rows();

    // dl/dS_qi = -w_q dAP_q/dS_qi, with the pinned diagonal dropped.
    let score_grads: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|q| {
            let mut g = query_score_grad(
                fwd.scores.row(q),
                &fwd.relevance[q],
                &cfg.grid,
                cfg.variant,
                &fwd.stats[q],
            );
            let w = fwd.output.weights[q];
            for v in g.iter_mut() {
                *v *= -w;
            }
            g[q] = 0.0;
            g
        })
        .collect();

    // S_qi = d_q . d_i feeds d_q through d_i and d_i through d_q.
    let c = rows.cols();
    let mut grads = Matrix::zeros(b, c);
    for j in 0..b {
        let out = grads.row_mut(j);
        for i in 0..b {
            let coupling = score_grads[j][i] + score_grads[i][j];
            if coupling != 0.0 {
                for (o, v) in out.iter_mut().zip(rows.row(i)) {
                    *o += coupling * v;
                }
            }
        }
    }
    Ok((fwd.output, GradientBuffer(grads)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Kink {
    pub query: usize,
    pub item: usize,
    pub bin: usize,
}

/// Off-diagonal scores sitting on (or within `radius` of) a corner of some
/// bin's kernel, i.e. at distance 0 or `delta` from its center.
#[derive(Debug, Clone, PartialEq)]
pub struct KinkMap {
    kinks: Vec<Kink>,
}

impl KinkMap {
    pub fn new(scores: &Matrix, grid: &BinGrid, radius: f64) -> Self {
        let mut kinks = Vec::new();
        for q in 0..scores.rows() {
            for i in q + 1..scores.cols() {
                let s = scores.get(q, i).clamp(-1.0, 1.0);
                for m in grid.neighborhood(s) {
                    let dist = (s - grid.center(m)).abs();
                    if dist <= radius || (dist - grid.delta()).abs() <= radius {
                        kinks.push(Kink { query: q, item: i, bin: m });
                    }
                }
            }
        }
        Self { kinks }
    }

    /// Kink map of a batch of rows with the default radius.
    pub fn for_rows(rows: &Matrix, grid: &BinGrid) -> Result<Self> {
        let s = batch_scores(rows)?;
        Ok(Self::new(&s, grid, KINK_RADIUS_FRACTION * grid.delta()))
    }

    pub fn kinks(&self) -> &[Kink] {
        &self.kinks
    }

    pub fn len(&self) -> usize {
        self.kinks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinks.is_empty()
    }

    /// Rows whose perturbation moves a kinked score.
    pub fn touched_rows(&self) -> BTreeSet<usize> {
        self.kinks.iter().flat_map(|k| [k.query, k.item]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
    pub kink_count: usize,
    pub step_out_of_range: bool,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient against central differences of the loss,
/// entry by entry. Rows involved in a kink are skipped.
pub fn grad_check(
    rows: &Matrix,
    labels: &BatchLabels,
    cfg: &LossConfig,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_backward_rows(rows, labels, cfg)?;
    let kinks = KinkMap::for_rows(rows, &cfg.grid)?;
    let skip = kinks.touched_rows();
    let step_out_of_range = !(MIN_STEP..=MAX_STEP).contains(&h);

    let (mut max_abs_err, mut max_rel_err) = (0.0_f64, 0.0_f64);
    let (mut checked, mut excluded) = (0, 0);
    let mut probe = rows.clone();
    for i in 0..rows.rows() {
        if skip.contains(&i) {
            excluded += rows.cols();
            continue;
        }
        for c in 0..rows.cols() {
            let x = rows.get(i, c);
            probe.set(i, c, x + h);
            let up = map_q_loss_rows(&probe, labels, cfg)?.loss;
            probe.set(i, c, x - h);
            let down = map_q_loss_rows(&probe, labels, cfg)?.loss;
            probe.set(i, c, x);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.0.get(i, c);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            max_abs_err = max_abs_err.max(abs);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_abs_err,
        max_rel_err,
        checked,
        excluded,
        kink_count: kinks.len(),
        step_out_of_range,
        tolerance: tol,
        passed: !step_out_of_range && max_rel_err <= tol,
    })
}

/// Random gradient-check instance: `b` unit rows in `c` dimensions with
/// labels `i % (b / 2)` (pairs of classes), redrawn until no score sits on a
/// kink of `grid`. Gives up after `max_draws` attempts.
pub fn random_kink_free_instance<R: Rng + ?Sized>(
    rng: &mut R,
    b: usize,
    c: usize,
    grid: &BinGrid,
    max_draws: usize,
) -> Result<(Matrix, BatchLabels)> {
    if b < 2 || c == 0 {
        return Err(Error::TooFewItems {
            needed: 2,
            available: b,
        });
    }
    let labels = BatchLabels::new((0..b).map(|i| i % (b / 2)).collect());
    for _ in 0..max_draws {
        let rows = (0..b)
            .map(|_| normalize(&(0..c).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
            .collect::<Result<Vec<_>>>();
        let Ok(rows) = rows else { continue };
        let rows = Matrix::from_rows(&rows)?;
        if KinkMap::for_rows(&rows, grid)?.is_empty() {
            return Ok((rows, labels));
        }
    }
    Err(Error::InvalidConfig(format!(
        "no kink-free instance with B={b}, C={c}, M={} in {max_draws} draws",
        grid.bins()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normalize;
    use crate::quantized::{map_q_loss, Balancing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| normalize(&(0..c).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn kink_free(rng: &mut ChaCha8Rng, b: usize, c: usize, grid: &BinGrid) -> Matrix {
        loop {
            let rows = random_rows(rng, b, c);
            if KinkMap::for_rows(&rows, grid).unwrap().is_empty() {
                return rows;
            }
        }
    }

    #[test]
    fn kernel_slope_examples() {
        let g = BinGrid::new(5).unwrap();
        assert_eq!(soft_assign_grad(g.center(2), &g, 2), 0.0);
        assert_eq!(soft_assign_grad(g.center(2) - 0.3 * g.delta(), &g, 2), 1.0 / g.delta());
        assert_eq!(soft_assign_grad(g.center(2) + 0.3 * g.delta(), &g, 2), -1.0 / g.delta());
        assert_eq!(soft_assign_grad(g.center(2) + 1.5 * g.delta(), &g, 2), 0.0);
    }

    #[test]
    fn forward_is_shared_with_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = random_rows(&mut rng, 10, 4);
        let labels = BatchLabels::new((0..10).map(|i| i % 3).collect());
        for variant in [Variant::Quantized, Variant::TieAware] {
            let cfg = LossConfig { variant, ..LossConfig::default() };
            let d = DescriptorMatrix::new(rows.clone()).unwrap();
            let (out, _) = loss_backward_descriptors(&d, &labels, &cfg).unwrap();
            assert_eq!(out.loss.to_bits(), map_q_loss(&d, &labels, &cfg).unwrap().loss.to_bits());
        }
    }

    #[test]
    fn duplicate_pair_has_finite_gradient() {
        let rows = Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8]]).unwrap();
        let labels = BatchLabels::new(vec![0, 0]);
        let cfg = LossConfig::default();
        let (out, g) = loss_backward_rows(&rows, &labels, &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(g.is_finite());
        // the pair sits at the top bin center: slope 0 there and no incentive to move
        assert_eq!(g.as_matrix().max_abs(), 0.0);
    }

    #[test]
    fn matches_finite_differences_on_kink_free_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for bins in [5, 20, 50] {
            for variant in [Variant::Quantized, Variant::TieAware] {
                for balancing in [Balancing::Uniform, Balancing::ClassBalanced] {
                    let cfg = LossConfig { grid: BinGrid::new(bins).unwrap(), variant, balancing };
                    let rows = kink_free(&mut rng, 8, 4, &cfg.grid);
                    let labels = BatchLabels::new(vec![0, 0, 0, 1, 1, 2, 2, 2]);
                    let report = grad_check(&rows, &labels, &cfg, 1e-6, 1e-4).unwrap();
                    assert!(report.passed, "{bins} {variant:?} {balancing:?}: {report:?}");
                    assert_eq!(report.checked, 32);
                }
            }
        }
    }

    #[test]
    fn tiny_step_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        let rows = kink_free(&mut rng, 4, 3, &cfg.grid);
        let labels = BatchLabels::new(vec![0, 0, 1, 1]);
        let report = grad_check(&rows, &labels, &cfg, 1e-12, 1e-4).unwrap();
        assert!(report.step_out_of_range);
        assert!(!report.passed);
    }

    #[test]
    fn all_kinks_excluded() {
        // every pairwise score is exactly 0, which is a bin center for odd M
        let rows = Matrix::from_rows(&[
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let labels = BatchLabels::new(vec![0, 0, 1, 1]);
        let cfg = LossConfig { grid: BinGrid::new(21).unwrap(), ..LossConfig::default() };
        let report = grad_check(&rows, &labels, &cfg, 1e-6, 1e-4).unwrap();
        assert_eq!(report.checked, 0);
        assert_eq!(report.excluded, 16);
        // each of the 6 pairs sits on the center of bin 10 and the corners of bins 9 and 11
        assert_eq!(report.kink_count, 18);
        assert!(report.passed);
    }

    #[test]
    fn gradient_localizes_to_misranked_rows() {
        // class {4,5} is an isolated duplicate pair, orthogonal to the rest;
        // classes {0,1} and {2,3} interleave, so only their rows move.
        let a = 0.8f64;
        let b = (1.0 - a * a).sqrt();
        let rows = Matrix::from_rows(&[
            [1.0, 0.0, 0.0],
            [0.6, 0.8, 0.0],
            [a, b, 0.0],
            [0.3, (1.0f64 - 0.09).sqrt(), 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let labels = BatchLabels::new(vec![0, 0, 1, 1, 2, 2]);
        let cfg = LossConfig::default();
        let off_diag = KinkMap::for_rows(&rows, &cfg.grid).unwrap();
        assert!(off_diag.kinks().iter().all(|k| k.query == 4 && k.item == 5));
        let (_, g) = loss_backward_rows(&rows, &labels, &cfg).unwrap();
        for i in 0..4 {
            assert!(g.row(i).iter().any(|v| v.abs() > 1e-6), "row {i} should move");
        }
        for i in 4..6 {
            assert!(g.row(i).iter().all(|&v| v == 0.0), "row {i}: {:?}", g.row(i));
        }
    }

    #[test]
    fn no_nan_on_adversarial_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 0..2000 {
            let b = rng.random_range(2..10);
            let c = rng.random_range(1..5);
            let mut rows = random_rows(&mut rng, b, c);
            // duplicate and near-duplicate rows
            for i in 1..b {
                if rng.random_bool(0.4) {
                    let src = rng.random_range(0..i);
                    let mut r = rows.row(src).to_vec();
                    if rng.random_bool(0.5) {
                        r[0] += 1e-9;
                        r = normalize(&r).unwrap();
                    }
                    rows.row_mut(i).copy_from_slice(&r);
                }
            }
            let mut class_of: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
            // merge singletons into class of item 0
            let counts = BatchLabels::new(class_of.clone()).class_counts();
            for v in class_of.iter_mut() {
                if counts[v] == 1 {
                    *v = usize::MAX;
                }
            }
            if class_of.iter().filter(|&&v| v == usize::MAX).count() == 1 {
                let first = class_of.iter().position(|&v| v != usize::MAX).unwrap();
                let lone = class_of.iter().position(|&v| v == usize::MAX).unwrap();
                class_of[lone] = class_of[first];
            }
            let labels = BatchLabels::new(class_of);
            let bins = [2, 3, 20, 100][t % 4];
            let variant = if t % 2 == 0 { Variant::Quantized } else { Variant::TieAware };
            let cfg = LossConfig { grid: BinGrid::new(bins).unwrap(), variant, balancing: Balancing::ClassBalanced };
            let (out, g) = loss_backward_rows(&rows, &labels, &cfg).unwrap();
            assert!(out.loss.is_finite() && (-1e-12..=1.0 + 1e-12).contains(&out.loss));
            assert!(g.is_finite());
        }
    }
}
