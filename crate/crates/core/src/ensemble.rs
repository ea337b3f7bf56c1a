//! Equal-weight ensembles that average per-member softmax probabilities over
//! the candidate set. Members may differ in embedding dimension.

use crate::error::{Error, Result};
use crate::evaluator::Scorer;
use crate::kb::{EntityId, Query};
use crate::model::{softmax, ModelParams, ScoredCandidates};

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<ModelParams>,
}

impl Ensemble {
    pub fn new(members: Vec<ModelParams>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Invalid("an ensemble needs at least one member".into()))?;
        let (ne, nr) = (first.num_entities(), first.num_relations());
        for (i, m) in members.iter().enumerate().skip(1) {
            if m.num_entities() != ne || m.num_relations() != nr {
                return Err(Error::VocabularyMismatch(format!(
                    "member {i} has {} entities and {} relations, member 0 has {ne} and {nr}",
                    m.num_entities(),
                    m.num_relations()
                )));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Averaged candidate probabilities, returned as the scores.
    pub fn ensemble_scores(
        &self,
        query: &Query,
        candidates: &[EntityId],
    ) -> Result<ScoredCandidates> {
        let mut per_member = Vec::with_capacity(self.members.len());
        let mut truth_position = 0;
        for member in &self.members {
            let scored = member.score_candidates(query, candidates)?;
            truth_position = scored.truth_position;
            per_member.push(softmax(&scored.scores)?);
        }
        let mut column = Vec::with_capacity(per_member.len());
        let scores = (0..candidates.len())
            .map(|j| {
                column.clear();
                column.extend(per_member.iter().map(|p| p[j]));
                order_free_mean(&mut column)
            })
            .collect();
        Ok(ScoredCandidates {
            candidate_ids: candidates.to_vec(),
            scores,
            truth_position,
        })
    }
}

/// Mean that does not depend on the order of `values` and returns the common
/// value exactly when all values are equal.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let base = values[0];
    let spread: f64 = values.iter().map(|v| v - base).sum();
    base + spread / values.len() as f64
}

impl Scorer for Ensemble {
    fn num_entities(&self) -> usize {
        self.members[0].num_entities()
    }

    fn score_candidates(&self, query: &Query, candidates: &[EntityId]) -> Result<ScoredCandidates> {
        self.ensemble_scores(query, candidates)
    }
}
