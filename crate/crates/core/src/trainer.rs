//! Softmax negative log-likelihood training with sampled negatives and a
//! lazy sparse Adam optimizer, plus the epoch loop with early stopping on
//! validation Hits@10.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate, TiePolicy};
use crate::kb::{expand_queries, Dataset, EntityId, Query};
use crate::model::{softmax, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub valid_sample: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Best FB15k setting: N=512, b=2048, M=2000 with Adam at lr=0.001.
    fn default() -> Self {
        TrainConfig {
            dim: 512,
            batch_size: 2048,
            negatives: 2000,
            learning_rate: 0.001,
            l2: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 100,
            patience: 5,
            eval_every: 1,
            valid_sample: Some(1000),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Invalid(format!("train config: {msg}")));
        if self.dim == 0 {
            return fail("dim must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.negatives == 0 {
            return fail("negatives must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail("l2 must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return fail("adam_epsilon must be positive");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1");
        }
        if self.valid_sample == Some(0) {
            return fail("valid_sample must be at least 1 when set");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Table {
    Entity,
    Relation,
}

impl Table {
    fn name(self) -> &'static str {
        match self {
            Table::Entity => "entity",
            Table::Relation => "relation",
        }
    }
}

/// Row-sparse gradient. Contributions to the same row are summed; iteration
/// order is (table, row) ascending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrads {
    rows: BTreeMap<(Table, usize), Vec<f64>>,
    dim: usize,
}

impl SparseGrads {
    pub fn new(dim: usize) -> Self {
        SparseGrads {
            rows: BTreeMap::new(),
            dim,
        }
    }

    pub fn row_mut(&mut self, table: Table, row: usize) -> &mut [f64] {
        let dim = self.dim;
        self.rows
            .entry((table, row))
            .or_insert_with(|| vec![0.0; dim])
    }

    pub fn get(&self, table: Table, row: usize) -> Option<&[f64]> {
        self.rows.get(&(table, row)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Table, usize, &[f64])> {
        self.rows.iter().map(|(&(t, r), g)| (t, r, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn accumulate(&mut self, other: &SparseGrads) {
        for (table, row, g) in other.iter() {
            for (acc, v) in self.row_mut(table, row).iter_mut().zip(g) {
                *acc += v;
            }
        }
    }
}

/// Adam moments shaped like the parameter tables, with a global step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub entity_m: Vec<f64>,
    pub entity_v: Vec<f64>,
    pub relation_m: Vec<f64>,
    pub relation_v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let ne = params.entity_table().len();
        let nr = params.relation_table().len();
        AdamState {
            entity_m: vec![0.0; ne],
            entity_v: vec![0.0; ne],
            relation_m: vec![0.0; nr],
            relation_v: vec![0.0; nr],
            step: 0,
        }
    }
}

/// Draws `min(m, num_entities - 1)` distinct entities uniformly from every
/// entity except the query's truth. Other true answers are not excluded.
pub fn sample_negatives<R: Rng + ?Sized>(
    query: &Query,
    m: usize,
    num_entities: usize,
    rng: &mut R,
) -> Vec<EntityId> {
    assert!(
        num_entities >= 2,
        "negative sampling needs at least two entities"
    );
    let pool = num_entities - 1;
    let amount = m.min(pool);
    // indices over E \ {truth}: shift everything at or above truth by one
    index::sample(rng, pool, amount)
        .into_iter()
        .map(|i| if i >= query.truth { i + 1 } else { i })
        .collect()
}

/// Negative log-likelihood of the truth over the pool `{truth} ∪ negatives`
/// and its analytic gradient.
///
/// With `p_j` the softmax over the pool and `c_j = p_j - [j is truth]`:
/// `d/d anchor = sum_j c_j (r ∘ e_j)`, `d/d r = sum_j c_j (anchor ∘ e_j)`,
/// `d/d e_j = c_j (anchor ∘ r)`. When `l2 > 0` the loss gains
/// `l2/2 * |row|^2` for every distinct row the example touches.
pub fn example_loss_and_grads(
    params: &ModelParams,
    query: &Query,
    negatives: &[EntityId],
    l2: f64,
) -> Result<(f64, SparseGrads)> {
    let dim = params.dim();
    let mut pool = Vec::with_capacity(negatives.len() + 1);
    pool.push(query.truth);
    pool.extend_from_slice(negatives);
    let scored = params.score_candidates(query, &pool)?;
    let probs = softmax(&scored.scores)?;
    let mut loss = -crate::model::log_softmax(&scored.scores, 0)?;

    let anchor = params.entity(query.anchor);
    let relation = params.relation(query.relation);
    let mut grads = SparseGrads::new(dim);

    let mut anchor_grad = vec![0.0; dim];
    let mut relation_grad = vec![0.0; dim];
    for (j, &e) in pool.iter().enumerate() {
        let coeff = probs[j] - if j == 0 { 1.0 } else { 0.0 };
        let row = params.entity(e);
        for i in 0..dim {
            anchor_grad[i] += coeff * relation[i] * row[i];
            relation_grad[i] += coeff * anchor[i] * row[i];
        }
        let g = grads.row_mut(Table::Entity, e);
        for i in 0..dim {
            g[i] += coeff * anchor[i] * relation[i];
        }
    }
    for (acc, v) in grads
        .row_mut(Table::Entity, query.anchor)
        .iter_mut()
        .zip(&anchor_grad)
    {
        *acc += v;
    }
    for (acc, v) in grads
        .row_mut(Table::Relation, query.relation)
        .iter_mut()
        .zip(&relation_grad)
    {
        *acc += v;
    }

    if l2 > 0.0 {
        let touched: Vec<(Table, usize)> = grads.iter().map(|(t, r, _)| (t, r)).collect();
        for (table, row) in touched {
            let values = match table {
                Table::Entity => params.entity(row),
                Table::Relation => params.relation(row),
            };
            loss += 0.5 * l2 * values.iter().map(|v| v * v).sum::<f64>();
            for (acc, v) in grads.row_mut(table, row).iter_mut().zip(values) {
                *acc += l2 * v;
            }
        }
    }
    Ok((loss, grads))
}

/// One Adam step over the rows present in `grads`. Untouched rows and their
/// moments are left as they are; the step counter advances once per call.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    grads: &SparseGrads,
    config: &TrainConfig,
) -> Result<()> {
    for (table, row, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                table: table.name(),
                row,
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let t = state.step as f64;
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    let dim = params.dim();
    for (table, row, g) in grads.iter() {
        let span = row * dim..(row + 1) * dim;
        let (w, m, v) = match table {
            Table::Entity => (
                params.entity_mut(row),
                &mut state.entity_m[span.clone()],
                &mut state.entity_v[span],
            ),
            Table::Relation => (
                params.relation_mut(row),
                &mut state.relation_m[span.clone()],
                &mut state.relation_v[span],
            ),
        };
        for i in 0..dim {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
    Ok(())
}

/// Runs one pass over `queries` in shuffled order, one Adam step per batch
/// with the batch's example gradients summed. Returns the mean example loss.
pub fn train_epoch<R: Rng + ?Sized>(
    params: &mut ModelParams,
    state: &mut AdamState,
    queries: &[Query],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Invalid("no training queries".into()));
    }
    let num_entities = params.num_entities();
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(rng);

    let mut total_loss = 0.0;
    for batch in order.chunks(config.batch_size) {
        let pools: Vec<Vec<EntityId>> = batch
            .iter()
            .map(|&i| sample_negatives(&queries[i], config.negatives, num_entities, rng))
            .collect();
        let frozen = &*params;
        let examples: Vec<(f64, SparseGrads)> = batch
            .par_iter()
            .zip(pools.par_iter())
            .map(|(&i, negatives)| {
                example_loss_and_grads(frozen, &queries[i], negatives, config.l2)
            })
            .collect::<Result<_>>()?;
        // fixed reduction order keeps the update independent of thread count
        let mut grads = SparseGrads::new(params.dim());
        for (loss, g) in &examples {
            total_loss += loss;
            grads.accumulate(g);
        }
        adam_step(params, state, &grads, config)?;
    }
    Ok(total_loss / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_hits10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid_hits10: Option<f64>,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn evaluations(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.epochs
            .iter()
            .filter_map(|e| e.valid_hits10.map(|h| (e.epoch, h)))
    }

    /// One JSON object per epoch, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_valid_hits10": self.best_valid_hits10,
            "stop_reason": self.stop_reason,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut file = fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        file.write_all(text.as_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Improved,
    Stale,
    Stop,
}

/// Tracks the best validation value; signals a stop after `patience`
/// consecutive evaluations without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Observation {
        match self.best {
            Some((_, best)) if value <= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Observation::Stop
                } else {
                    Observation::Stale
                }
            }
            _ => {
                self.best = Some((epoch, value));
                self.stale = 0;
                Observation::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// RNG for the shuffle and negatives of a given epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

fn validation_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Validation queries used for early stopping: all of them, or a fixed
/// seeded subsample of `valid_sample` queries chosen once per run.
pub fn validation_queries(dataset: &Dataset, config: &TrainConfig) -> Vec<Query> {
    let all = expand_queries(&dataset.valid);
    match config.valid_sample {
        Some(n) if n < all.len() => {
            let mut picked =
                index::sample(&mut validation_rng(config.seed), all.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    }
}

pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    fit_with(dataset, config, |_| {})
}

/// Trains from a seeded initialization and returns the parameters of the
/// best validation Hits@10 evaluation. `on_epoch` sees every epoch record.
pub fn fit_with<F: FnMut(&EpochRecord)>(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let mut params = ModelParams::init(
        dataset.num_entities(),
        dataset.num_relations(),
        config.dim,
        config.seed,
    )?;
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: None,
        best_valid_hits10: None,
        stop_reason: StopReason::MaxEpochs,
    };
    if config.max_epochs == 0 {
        return Ok((params, history));
    }
    if dataset.num_entities() < 2 {
        return Err(Error::Invalid(
            "training needs at least two entities".into(),
        ));
    }
    if dataset.valid.is_empty() {
        return Err(Error::Invalid(
            "early stopping needs a non-empty validation split".into(),
        ));
    }
    let train_queries = expand_queries(&dataset.train);
    let valid_queries = validation_queries(dataset, config);
    let mut state = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<ModelParams> = None;

    for epoch in 1..=config.max_epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mean_loss = train_epoch(&mut params, &mut state, &train_queries, config, &mut rng)?;
        let mut record = EpochRecord {
            epoch,
            mean_loss,
            valid_hits10: None,
        };
        let mut stop = false;
        if epoch % config.eval_every == 0 {
            let hits10 = validation_hits10(&params, &valid_queries, dataset)?;
            record.valid_hits10 = Some(hits10);
            match stopper.observe(epoch, hits10) {
                Observation::Improved => best = Some(params.clone()),
                Observation::Stale => {}
                Observation::Stop => stop = true,
            }
        }
        on_epoch(&record);
        history.epochs.push(record);
        if stop {
            history.stop_reason = StopReason::Patience;
            break;
        }
    }
    if let Some((epoch, hits)) = stopper.best() {
        history.best_epoch = Some(epoch);
        history.best_valid_hits10 = Some(hits);
    }
    Ok((best.unwrap_or(params), history))
}

/// Filtered Hits@10 (average tie policy) over `queries`.
pub fn validation_hits10(
    params: &ModelParams,
    queries: &[Query],
    dataset: &Dataset,
) -> Result<f64> {
    let eval = evaluate(
        params,
        queries,
        dataset.num_entities(),
        &dataset.filter,
        TiePolicy::Average,
        &[10],
    )?;
    Ok(eval.overall.hits_at[&10])
}
