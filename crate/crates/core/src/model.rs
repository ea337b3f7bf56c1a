//! DistMult parameters, scoring, softmax and the binary checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kb::{EntityId, Query, RelationId};

/// Entity and relation embedding tables, stored row-major.
///
/// Rows are never normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dim: usize,
    num_entities: usize,
    num_relations: usize,
    entities: Vec<f64>,
    relations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates {
    pub candidate_ids: Vec<EntityId>,
    pub scores: Vec<f64>,
    pub truth_position: usize,
}

impl ScoredCandidates {
    pub fn truth_score(&self) -> f64 {
        self.scores[self.truth_position]
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// One term of the trilinear product. The two entity factors are multiplied
/// first so that swapping head and tail is bit-exact.
#[inline]
fn term(head: f64, relation: f64, tail: f64) -> f64 {
    relation * (head * tail)
}

#[inline]
fn trilinear(head: &[f64], relation: &[f64], tail: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..head.len() {
        sum += term(head[i], relation[i], tail[i]);
    }
    sum
}

impl ModelParams {
    /// Draws every entry from `Normal(0, 1/sqrt(dim))` with a ChaCha8 stream
    /// seeded by `seed`, entity table first.
    pub fn init(num_entities: usize, num_relations: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_entities == 0 || num_relations == 0 {
            return Err(Error::Shape(format!(
                "need at least one entity and one relation, got {num_entities} and {num_relations}"
            )));
        }
        if dim == 0 {
            return Err(Error::Shape(
                "embedding dimension must be at least 1".into(),
            ));
        }
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std dev");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entities = (0..num_entities * dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let relations = (0..num_relations * dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(ModelParams {
            dim,
            num_entities,
            num_relations,
            entities,
            relations,
        })
    }

    pub fn from_tables(dim: usize, entities: Vec<f64>, relations: Vec<f64>) -> Result<Self> {
        if dim == 0 || !entities.len().is_multiple_of(dim) || !relations.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "tables of length {} and {} do not divide into rows of {dim}",
                entities.len(),
                relations.len()
            )));
        }
        Ok(ModelParams {
            dim,
            num_entities: entities.len() / dim,
            num_relations: relations.len() / dim,
            entities,
            relations,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn entity_table(&self) -> &[f64] {
        &self.entities
    }

    pub fn relation_table(&self) -> &[f64] {
        &self.relations
    }

    pub fn entity(&self, id: EntityId) -> &[f64] {
        &self.entities[id * self.dim..(id + 1) * self.dim]
    }

    pub fn relation(&self, id: RelationId) -> &[f64] {
        &self.relations[id * self.dim..(id + 1) * self.dim]
    }

    pub fn entity_mut(&mut self, id: EntityId) -> &mut [f64] {
        &mut self.entities[id * self.dim..(id + 1) * self.dim]
    }

    pub fn relation_mut(&mut self, id: RelationId) -> &mut [f64] {
        &mut self.relations[id * self.dim..(id + 1) * self.dim]
    }

    fn check_entity(&self, id: EntityId) -> Result<()> {
        if id < self.num_entities {
            Ok(())
        } else {
            Err(Error::IdOutOfRange {
                kind: "entity",
                id,
                size: self.num_entities,
            })
        }
    }

    fn check_relation(&self, id: RelationId) -> Result<()> {
        if id < self.num_relations {
            Ok(())
        } else {
            Err(Error::IdOutOfRange {
                kind: "relation",
                id,
                size: self.num_relations,
            })
        }
    }

    /// `sum_i h_i r_i t_i`, accumulated in ascending index order.
    pub fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> Result<f64> {
        self.check_entity(h)?;
        self.check_relation(r)?;
        self.check_entity(t)?;
        Ok(trilinear(self.entity(h), self.relation(r), self.entity(t)))
    }

    /// Scores every candidate for the query's open slot. Because the score is
    /// symmetric in head and tail, head and tail queries share one code path.
    pub fn score_candidates(
        &self,
        query: &Query,
        candidates: &[EntityId],
    ) -> Result<ScoredCandidates> {
        self.check_entity(query.anchor)?;
        self.check_relation(query.relation)?;
        let truth_position = truth_position(query, candidates)?;
        let anchor = self.entity(query.anchor);
        let relation = self.relation(query.relation);
        let mut scores = Vec::with_capacity(candidates.len());
        for &c in candidates {
            self.check_entity(c)?;
            scores.push(trilinear(anchor, relation, self.entity(c)));
        }
        Ok(ScoredCandidates {
            candidate_ids: candidates.to_vec(),
            scores,
            truth_position,
        })
    }

    /// Writes the checkpoint: a text header line
    /// `distmult v1 <entities> <relations> <dim>` followed by the entity and
    /// relation tables as little-endian f64, row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        out.write_all(self.to_bytes().as_slice()).map_err(io_err)?;
        out.flush().map_err(io_err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{CHECKPOINT_MAGIC} {} {} {}\n",
            self.num_entities, self.num_relations, self.dim
        );
        let mut bytes =
            Vec::with_capacity(header.len() + 8 * (self.entities.len() + self.relations.len()));
        bytes.extend_from_slice(header.as_bytes());
        for v in self.entities.iter().chain(&self.relations) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or("missing header line")?;
        let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| "header is not UTF-8")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "distmult" || fields[1] != "v1" {
            return Err(format!("unrecognized header {header:?}"));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| format!("bad size {s:?} in header"))
        };
        let (ne, nr, dim) = (parse(fields[2])?, parse(fields[3])?, parse(fields[4])?);
        if ne == 0 || nr == 0 || dim == 0 {
            return Err("header sizes must be positive".into());
        }
        let body = &bytes[newline + 1..];
        let expected = (ne + nr) * dim * 8;
        if body.len() != expected {
            return Err(format!(
                "expected {expected} payload bytes, found {}",
                body.len()
            ));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let entities: Vec<f64> = values.by_ref().take(ne * dim).collect();
        let relations: Vec<f64> = values.collect();
        if entities.iter().chain(&relations).any(|v| !v.is_finite()) {
            return Err("non-finite parameter value".into());
        }
        Ok(ModelParams {
            dim,
            num_entities: ne,
            num_relations: nr,
            entities,
            relations,
        })
    }
}

const CHECKPOINT_MAGIC: &str = "distmult v1";

pub(crate) fn truth_position(query: &Query, candidates: &[EntityId]) -> Result<usize> {
    let mut found = None;
    for (i, &c) in candidates.iter().enumerate() {
        if c == query.truth {
            if found.is_some() {
                return Err(Error::Invalid(format!(
                    "truth entity {} appears more than once among the candidates",
                    query.truth
                )));
            }
            found = Some(i);
        }
    }
    found.ok_or(Error::TruthNotInCandidates(query.truth))
}

fn log_sum_exp(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("softmax over an empty score list".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore(i));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `log P(target)` under the softmax over `scores`.
pub fn log_softmax(scores: &[f64], target: usize) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::IdOutOfRange {
            kind: "softmax target",
            id: target,
            size: scores.len(),
        });
    }
    Ok(scores[target] - log_sum_exp(scores)?)
}

pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(scores)?;
    Ok(scores.iter().map(|s| (s - lse).exp()).collect())
}
