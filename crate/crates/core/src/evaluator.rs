//! Filtered ranking evaluation: candidate sets, tie-aware ranks and
//! MR / MRR / Hits@k aggregation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kb::{Direction, EntityId, FilterIndex, Query};
use crate::model::{ModelParams, ScoredCandidates};

pub const DEFAULT_HITS: [usize; 3] = [1, 3, 10];

/// How candidates scoring exactly like the truth affect its rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    Optimistic,
    Pessimistic,
    #[default]
    Average,
}

impl TiePolicy {
    pub const ALL: [TiePolicy; 3] = [
        TiePolicy::Optimistic,
        TiePolicy::Pessimistic,
        TiePolicy::Average,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TiePolicy::Optimistic => "optimistic",
            TiePolicy::Pessimistic => "pessimistic",
            TiePolicy::Average => "average",
        }
    }
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "optimistic" => Ok(TiePolicy::Optimistic),
            "pessimistic" => Ok(TiePolicy::Pessimistic),
            "average" => Ok(TiePolicy::Average),
            _ => Err(Error::Invalid(format!(
                "unknown tie policy {s:?} (expected optimistic, pessimistic or average)"
            ))),
        }
    }
}

/// Anything that can score a query's candidate list: a single model or an
/// ensemble.
pub trait Scorer: Sync {
    fn num_entities(&self) -> usize;

    fn score_candidates(&self, query: &Query, candidates: &[EntityId]) -> Result<ScoredCandidates>;
}

impl Scorer for ModelParams {
    fn num_entities(&self) -> usize {
        ModelParams::num_entities(self)
    }

    fn score_candidates(&self, query: &Query, candidates: &[EntityId]) -> Result<ScoredCandidates> {
        ModelParams::score_candidates(self, query, candidates)
    }
}

/// Every entity whose substitution into the open slot gives a triple not in
/// the filter, plus the truth itself. Sorted ascending.
pub fn build_candidates(query: &Query, num_entities: usize, filter: &FilterIndex) -> Vec<EntityId> {
    let known = filter.known_answers(query);
    let mut candidates = Vec::with_capacity(num_entities.saturating_sub(known.len()) + 1);
    let mut k = 0;
    for e in 0..num_entities {
        while k < known.len() && known[k] < e {
            k += 1;
        }
        let is_known = k < known.len() && known[k] == e;
        if !is_known || e == query.truth {
            candidates.push(e);
        }
    }
    candidates
}

/// Rank of the truth: `G + 1` (optimistic), `G + T + 1` (pessimistic) or
/// `G + 1 + T/2` (average), with `G` the number of strictly higher scores and
/// `T` the number of other candidates tied with the truth.
pub fn rank_of_truth(scored: &ScoredCandidates, policy: TiePolicy) -> f64 {
    let truth = scored.truth_score();
    let mut greater = 0usize;
    let mut ties = 0usize;
    for (j, &s) in scored.scores.iter().enumerate() {
        if j == scored.truth_position {
            continue;
        }
        if s > truth {
            greater += 1;
        } else if s == truth {
            ties += 1;
        }
    }
    let g = greater as f64;
    let t = ties as f64;
    match policy {
        TiePolicy::Optimistic => g + 1.0,
        TiePolicy::Pessimistic => g + t + 1.0,
        TiePolicy::Average => g + 1.0 + t / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_rank: f64,
    pub mean_reciprocal_rank: f64,
    /// Fraction of queries with rank <= k.
    pub hits_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_query_ranks: Option<Vec<f64>>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[f64], ks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Invalid("metrics over an empty query set".into()));
        }
        let n = ranks.len() as f64;
        let mean_rank = ranks.iter().sum::<f64>() / n;
        let mean_reciprocal_rank = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
        let hits_at = ks
            .iter()
            .map(|&k| {
                let hits = ranks.iter().filter(|&&r| r <= k as f64).count();
                (k, hits as f64 / n)
            })
            .collect();
        Ok(Metrics {
            mean_rank,
            mean_reciprocal_rank,
            hits_at,
            num_queries: ranks.len(),
            per_query_ranks: None,
        })
    }

    fn to_json(&self) -> serde_json::Value {
        json!({
            "mr": self.mean_rank,
            "mrr": self.mean_reciprocal_rank,
            "hits": self.hits_at,
            "num_queries": self.num_queries,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryRank {
    pub index: usize,
    pub direction: Direction,
    pub rank: f64,
}

/// Pooled metrics plus per-direction breakdowns and every query's rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub overall: Metrics,
    pub head: Option<Metrics>,
    pub tail: Option<Metrics>,
    pub ranks: Vec<QueryRank>,
    pub tie_policy: TiePolicy,
}

impl Evaluation {
    pub fn to_json(&self) -> serde_json::Value {
        let mut doc = self.overall.to_json();
        doc["tie_policy"] = json!(self.tie_policy.as_str());
        doc["per_direction"] = json!({
            "head": self.head.as_ref().map(Metrics::to_json),
            "tail": self.tail.as_ref().map(Metrics::to_json),
        });
        doc
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(&self.to_json())?;
        text.push('\n');
        Ok(text)
    }

    /// `query,direction,rank` rows in query order.
    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("query,direction,rank\n");
        for r in &self.ranks {
            writeln!(out, "{},{},{}", r.index, r.direction.as_str(), r.rank)
                .expect("write to string");
        }
        out
    }
}

/// Ranks every query's truth against its filtered candidate set. Queries are
/// scored in parallel; ranks are collected in query order.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    queries: &[Query],
    num_entities: usize,
    filter: &FilterIndex,
    policy: TiePolicy,
    ks: &[usize],
) -> Result<Evaluation> {
    if queries.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one query".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Invalid(
            "hits cutoffs must be a non-empty list of positive integers".into(),
        ));
    }
    if scorer.num_entities() != num_entities {
        return Err(Error::VocabularyMismatch(format!(
            "model has {} entities, dataset has {num_entities}",
            scorer.num_entities()
        )));
    }
    let ranks: Vec<f64> = queries
        .par_iter()
        .map(|q| {
            let candidates = build_candidates(q, num_entities, filter);
            let scored = scorer.score_candidates(q, &candidates)?;
            Ok(rank_of_truth(&scored, policy))
        })
        .collect::<Result<_>>()?;

    let direction_metrics = |dir: Direction| -> Result<Option<Metrics>> {
        let subset: Vec<f64> = queries
            .iter()
            .zip(&ranks)
            .filter(|(q, _)| q.direction == dir)
            .map(|(_, &r)| r)
            .collect();
        if subset.is_empty() {
            Ok(None)
        } else {
            Metrics::from_ranks(&subset, ks).map(Some)
        }
    };
    let head = direction_metrics(Direction::Head)?;
    let tail = direction_metrics(Direction::Tail)?;
    let mut overall = Metrics::from_ranks(&ranks, ks)?;
    overall.per_query_ranks = Some(ranks.clone());
    let ranks = queries
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(index, (q, rank))| QueryRank {
            index,
            direction: q.direction,
            rank,
        })
        .collect();
    Ok(Evaluation {
        overall,
        head,
        tail,
        ranks,
        tie_policy: policy,
    })
}
