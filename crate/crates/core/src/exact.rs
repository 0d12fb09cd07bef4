//! Exact ranking metrics and protocol-aware retrieval evaluation.
//!
//! These are the non-differentiable reference quantities. Rankings are
//! stable: equal scores keep their original index order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DescriptorMatrix;

/// Indices of `scores` sorted by decreasing score, ties by increasing index.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn check_lengths(scores: &[f64], relevant: &[bool]) -> Result<()> {
    if scores.len() != relevant.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: relevant.len(),
        });
    }
    Ok(())
}

/// Fraction of relevant items among the top `k`.
pub fn precision_at_k(scores: &[f64], relevant: &[bool], k: usize) -> Result<f64> {
    check_lengths(scores, relevant)?;
    if k == 0 || k > scores.len() {
        return Err(Error::OutOfRange {
            k,
            len: scores.len(),
        });
    }
    let hits = rank(scores)[..k].iter().filter(|&&i| relevant[i]).count();
    Ok(hits as f64 / k as f64)
}

/// AP of a list already in ranked order.
pub fn ap_of_ranked(relevant_in_order: &[bool]) -> Result<f64> {
    let total = relevant_in_order.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::NoRelevantItems);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant_in_order.iter().enumerate() {
        if r {
            hits += 1;
            // precision at rank k+1 times an incremental recall of 1/total
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

pub fn exact_ap(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    check_lengths(scores, relevant)?;
    let ordered: Vec<bool> = rank(scores).into_iter().map(|i| relevant[i]).collect();
    ap_of_ranked(&ordered)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSummary {
    pub map: f64,
    /// `None` for queries without relevant items.
    pub per_query: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Mean of per-query exact AP; queries without relevant items are skipped.
pub fn exact_map(scores: &[Vec<f64>], relevant: &[Vec<bool>]) -> Result<MapSummary> {
    if scores.len() != relevant.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: relevant.len(),
        });
    }
    let per_query = scores
        .iter()
        .zip(relevant)
        .map(|(s, r)| match exact_ap(s, r) {
            Ok(ap) => Ok(Some(ap)),
            Err(Error::NoRelevantItems) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped: Vec<usize> = (0..per_query.len())
        .filter(|&i| per_query[i].is_none())
        .collect();
    let aps: Vec<f64> = per_query.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    Ok(MapSummary {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        per_query,
        skipped,
    })
}

/// Per-query partition of database ids into easy / hard / unclear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub easy: BTreeSet<String>,
    pub hard: BTreeSet<String>,
    pub unclear: BTreeSet<String>,
}

impl RelevanceJudgment {
    pub fn new<I, J, K>(query_id: impl Into<String>, easy: I, hard: J, unclear: K) -> Result<Self>
    where
        I: IntoIterator<Item = String>,
        J: IntoIterator<Item = String>,
        K: IntoIterator<Item = String>,
    {
        let query_id = query_id.into();
        let easy: BTreeSet<String> = easy.into_iter().collect();
        let hard: BTreeSet<String> = hard.into_iter().collect();
        let unclear: BTreeSet<String> = unclear.into_iter().collect();
        let overlap = easy.intersection(&hard).next().is_some()
            || easy.intersection(&unclear).next().is_some()
            || hard.intersection(&unclear).next().is_some();
        if overlap {
            return Err(Error::Format(format!(
                "query {query_id}: easy, hard and unclear sets must be disjoint"
            )));
        }
        if easy.contains(&query_id) || hard.contains(&query_id) || unclear.contains(&query_id) {
            return Err(Error::Format(format!(
                "query {query_id} lists itself in its judgment"
            )));
        }
        Ok(Self {
            query_id,
            easy,
            hard,
            unclear,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Medium,
    Hard,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "medium" => Ok(Protocol::Medium),
            "hard" => Ok(Protocol::Hard),
            _ => Err(Error::UnknownProtocol(s.to_string())),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Medium => "medium",
            Protocol::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProtocolView {
    pub positives: BTreeSet<String>,
    /// Removed from the ranking before scoring.
    pub ignored: BTreeSet<String>,
}

pub fn protocol_view(j: &RelevanceJudgment, protocol: Protocol) -> ProtocolView {
    match protocol {
        Protocol::Medium => ProtocolView {
            positives: j.easy.union(&j.hard).cloned().collect(),
            ignored: j.unclear.clone(),
        },
        Protocol::Hard => ProtocolView {
            positives: j.hard.clone(),
            ignored: j.unclear.union(&j.easy).cloned().collect(),
        },
    }
}

/// Database ranking for one query with ignored items already removed.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    /// Database row indices in rank order.
    pub order: Vec<usize>,
    pub relevant: Vec<bool>,
}

impl QueryRanking {
    pub fn ap(&self) -> Result<f64> {
        ap_of_ranked(&self.relevant)
    }
}

/// Ranks `db` against `query` under `view`; a database item carrying the
/// query's own id is treated as ignored.
pub fn rank_query(
    query: &[f64],
    query_id: &str,
    db: &DescriptorMatrix,
    db_ids: &[String],
    view: &ProtocolView,
) -> QueryRanking {
    let scores = db.scores(query);
    let order: Vec<usize> = rank(&scores)
        .into_iter()
        .filter(|&i| {
            let id = db_ids[i].as_str();
            id != query_id && !view.ignored.contains(id)
        })
        .collect();
    let relevant = order
        .iter()
        .map(|&i| view.positives.contains(&db_ids[i]))
        .collect();
    QueryRanking { order, relevant }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryAp {
    pub query_id: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalEvaluation {
    pub protocol: Protocol,
    pub per_query: Vec<QueryAp>,
    /// Queries with no positive under the protocol, or without a judgment.
    pub excluded: Vec<String>,
    pub map: f64,
}

pub(crate) fn check_ids(m: &DescriptorMatrix, ids: &[String]) -> Result<()> {
    if m.count() != ids.len() {
        return Err(Error::DimensionMismatch {
            expected: m.count(),
            found: ids.len(),
        });
    }
    Ok(())
}

pub fn evaluate_retrieval(
    queries: &DescriptorMatrix,
    query_ids: &[String],
    db: &DescriptorMatrix,
    db_ids: &[String],
    judgments: &[RelevanceJudgment],
    protocol: Protocol,
) -> Result<RetrievalEvaluation> {
    if queries.dim() != db.dim() {
        return Err(Error::DimensionMismatch {
            expected: db.dim(),
            found: queries.dim(),
        });
    }
    check_ids(queries, query_ids)?;
    check_ids(db, db_ids)?;
    let by_id: HashMap<&str, &RelevanceJudgment> =
        judgments.iter().map(|j| (j.query_id.as_str(), j)).collect();

    let results: Vec<Option<f64>> = (0..queries.count())
        .into_par_iter()
        .map(|q| {
            let id = query_ids[q].as_str();
            let j = by_id.get(id)?;
            let view = protocol_view(j, protocol);
            rank_query(queries.row(q), id, db, db_ids, &view).ap().ok()
        })
        .collect();

    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (q, r) in results.into_iter().enumerate() {
        match r {
            Some(ap) => per_query.push(QueryAp {
                query_id: query_ids[q].clone(),
                ap,
            }),
            None => excluded.push(query_ids[q].clone()),
        }
    }
    if per_query.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} queries have no {protocol} positives and were excluded",
            excluded.len()
        );
    }
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    Ok(RetrievalEvaluation {
        protocol,
        per_query,
        excluded,
        map,
    })
}
