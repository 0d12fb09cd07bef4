//! Post-processing and reporting around retrieval: PCA whitening, alpha
//! query expansion and top-k ranking reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{check_ids, evaluate_retrieval, protocol_view, rank, rank_query, Protocol, QueryAp, RelevanceJudgment};
use crate::numerics::{dot, norm, normalize, DescriptorMatrix, Matrix, NORM_FLOOR};

/// Floor applied to whitening eigenvalues.
pub const WHITENING_EPS: f64 = 1e-10;
pub const DEFAULT_QE_K: usize = 10;
pub const DEFAULT_QE_ALPHA: f64 = 2.0;
pub const DEFAULT_REPORT_K: usize = 10;
pub const WORST_QUERIES: usize = 3;

/// Learned PCA whitening: `normalize(diag(λ^-1/2) Vᵀ (d - μ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningModel {
    pub mean: Vec<f64>,
    /// Retained principal directions, one unit vector per entry, in order of
    /// decreasing eigenvalue.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues (descending, floored at `epsilon`).
    pub eigenvalues: Vec<f64>,
    pub epsilon: f64,
    /// True when the training set had no more samples than dimensions.
    pub rank_deficient: bool,
}

impl WhiteningModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// `C x C'` matrix with the components as columns.
    pub fn eigenvector_matrix(&self) -> Matrix {
        let (c, k) = (self.input_dim(), self.output_dim());
        let mut m = Matrix::zeros(c, k);
        for (j, v) in self.components.iter().enumerate() {
            for (i, x) in v.iter().enumerate() {
                m.set(i, j, *x);
            }
        }
        m
    }

    /// The whitened vector before re-normalization.
    pub fn project(&self, d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: d.len(),
            });
        }
        let centered: Vec<f64> = d.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self
            .components
            .iter()
            .zip(&self.eigenvalues)
            .map(|(v, &l)| dot(v, &centered) / l.max(self.epsilon).sqrt())
            .collect())
    }
}

/// Fits whitening on descriptors, keeping the top `keep` components.
pub fn fit_whitening(train: &DescriptorMatrix, keep: usize) -> Result<WhiteningModel> {
    fit_whitening_rows(train.as_matrix(), keep)
}

/// [`fit_whitening`] on arbitrary (not necessarily unit) rows.
pub fn fit_whitening_rows(train: &Matrix, keep: usize) -> Result<WhiteningModel> {
    let (n, c) = (train.rows(), train.cols());
    if keep == 0 || keep > c {
        return Err(Error::InvalidConfig(format!(
            "cannot keep {keep} whitening components of {c}"
        )));
    }
    if n < 2 {
        return Err(Error::TooFewItems { needed: 2, available: n });
    }
    let rank_deficient = n <= c;
    if rank_deficient {
        log::warn!("whitening fitted on {n} samples in {c} dimensions; eigenvalues are clamped at {WHITENING_EPS}");
    }
    let mut mean = vec![0.0; c];
    for r in train.iter_rows() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, c, |i, j| train.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order.truncate(keep);
    let components = order
        .iter()
        .map(|&j| eig.eigenvectors.column(j).iter().copied().collect())
        .collect();
    let eigenvalues = order
        .iter()
        .map(|&j| eig.eigenvalues[j].max(WHITENING_EPS))
        .collect();
    Ok(WhiteningModel {
        mean,
        components,
        eigenvalues,
        epsilon: WHITENING_EPS,
        rank_deficient,
    })
}

/// Whitens and re-normalizes one descriptor.
pub fn apply_whitening(model: &WhiteningModel, d: &[f64]) -> Result<Vec<f64>> {
    normalize(&model.project(d)?)
}

pub fn whiten_all(model: &WhiteningModel, d: &DescriptorMatrix) -> Result<DescriptorMatrix> {
    let rows = d
        .iter_rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| apply_whitening(model, r))
        .collect::<Result<Vec<_>>>()?;
    DescriptorMatrix::from_rows(&rows)
}

/// Query-expansion settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QeConfig {
    pub k: usize,
    pub alpha: f64,
    /// Adds the query itself with weight 1.
    pub include_self: bool,
}

impl Default for QeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_QE_K,
            alpha: DEFAULT_QE_ALPHA,
            include_self: true,
        }
    }
}

/// Alpha-weighted query expansion:
/// `normalize(q + Σ_{top-k} max(s_i, 0)^α d_i)`.
///
/// Without the query term, an expansion whose weights all vanish returns the
/// query unchanged.
pub fn alpha_qe(query: &[f64], db: &DescriptorMatrix, cfg: &QeConfig) -> Result<Vec<f64>> {
    if query.len() != db.dim() {
        return Err(Error::DimensionMismatch {
            expected: db.dim(),
            found: query.len(),
        });
    }
    if cfg.k == 0 || db.count() < cfg.k {
        return Err(Error::TooFewItems {
            needed: cfg.k.max(1),
            available: db.count(),
        });
    }
    let scores = db.scores(query);
    let mut out = if cfg.include_self {
        query.to_vec()
    } else {
        vec![0.0; query.len()]
    };
    for &i in rank(&scores).iter().take(cfg.k) {
        let w = scores[i].max(0.0).powf(cfg.alpha);
        if w > 0.0 {
            for (o, x) in out.iter_mut().zip(db.row(i)) {
                *o += w * x;
            }
        }
    }
    if norm(&out) < NORM_FLOOR {
        return Ok(query.to_vec());
    }
    normalize(&out)
}

pub fn alpha_qe_all(queries: &DescriptorMatrix, db: &DescriptorMatrix, cfg: &QeConfig) -> Result<DescriptorMatrix> {
    let rows = (0..queries.count())
        .into_par_iter()
        .map(|q| alpha_qe(queries.row(q), db, cfg))
        .collect::<Result<Vec<_>>>()?;
    DescriptorMatrix::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f64,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryReport {
    pub query_id: String,
    pub ap: f64,
    pub top: Vec<RankedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingReport {
    pub protocol: Protocol,
    pub k: usize,
    pub map: f64,
    pub queries: Vec<QueryReport>,
    /// The lowest-AP queries, worst first.
    pub worst: Vec<QueryAp>,
    /// Queries without positives under the protocol (or without judgment).
    pub excluded: Vec<String>,
}

/// Top-k results of every evaluable query, tagged positive or negative under
/// `protocol` (ignored items are dropped), plus the worst queries.
pub fn cmd_report(
    queries: &DescriptorMatrix,
    query_ids: &[String],
    db: &DescriptorMatrix,
    db_ids: &[String],
    judgments: &[RelevanceJudgment],
    protocol: Protocol,
    k: usize,
) -> Result<RankingReport> {
    check_ids(queries, query_ids)?;
    check_ids(db, db_ids)?;
    let eval = evaluate_retrieval(queries, query_ids, db, db_ids, judgments, protocol)?;
    for id in &eval.excluded {
        log::info!("query {id} has no {protocol} positives; left out of the report");
    }
    let by_id: BTreeMap<&str, &RelevanceJudgment> = judgments.iter().map(|j| (j.query_id.as_str(), j)).collect();
    let row_of: BTreeMap<&str, usize> = query_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let reports = eval
        .per_query
        .iter()
        .map(|qa| {
            let q = row_of[qa.query_id.as_str()];
            let view = protocol_view(by_id[qa.query_id.as_str()], protocol);
            let ranking = rank_query(queries.row(q), &qa.query_id, db, db_ids, &view);
            let top = ranking
                .order
                .iter()
                .zip(&ranking.relevant)
                .take(k)
                .map(|(&i, &rel)| RankedItem {
                    id: db_ids[i].clone(),
                    score: dot(queries.row(q), db.row(i)),
                    tag: if rel { Tag::Positive } else { Tag::Negative },
                })
                .collect();
            QueryReport {
                query_id: qa.query_id.clone(),
                ap: qa.ap,
                top,
            }
        })
        .collect();

    let mut worst = eval.per_query.clone();
    worst.sort_by(|a, b| a.ap.total_cmp(&b.ap));
    worst.truncate(WORST_QUERIES);
    Ok(RankingReport {
        protocol,
        k,
        map: eval.map,
        queries: reports,
        worst,
        excluded: eval.excluded,
    })
}

impl RankingReport {
    /// Fixed-width text rendering: one line per query with `+id` for
    /// positives and `-id` for negatives.
    pub fn to_table(&self) -> String {
        let width = self
            .queries
            .iter()
            .map(|q| q.query_id.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "protocol={} k={} mAP={:.6}", self.protocol, self.k, self.map);
        let _ = writeln!(out, "{:<width$}  {:>8}  top-{}", "query", "AP", self.k);
        for q in &self.queries {
            let items: Vec<String> = q
                .top
                .iter()
                .map(|it| match it.tag {
                    Tag::Positive => format!("+{}", it.id),
                    Tag::Negative => format!("-{}", it.id),
                })
                .collect();
            let _ = writeln!(out, "{:<width$}  {:>8.6}  {}", q.query_id, q.ap, items.join(" "));
        }
        let _ = writeln!(out, "worst queries:");
        for w in &self.worst {
            let _ = writeln!(out, "{:<width$}  {:>8.6}", w.query_id, w.ap);
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(out, "excluded (no positives): {}", self.excluded.join(" "));
        }
        out
    }
}
