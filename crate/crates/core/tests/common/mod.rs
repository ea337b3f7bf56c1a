//! Test helpers: synthetic knowledge bases and implementation-independent
//! oracles for losses and filtered ranks.
#![allow(dead_code)]

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use kbc::kb::{Query, RawTriple, Triple};
use kbc::{ModelParams, TiePolicy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Clustered synthetic KB: entities fall into `clusters` equal groups and
/// relation `r` links cluster `a` to cluster `(a + r) % clusters`. Returns
/// distinct raw triples in random order.
pub fn clustered_kb(
    num_entities: usize,
    num_relations: usize,
    clusters: usize,
    num_triples: usize,
    seed: u64,
) -> Vec<RawTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = num_entities / clusters;
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    while triples.len() < num_triples {
        let r = rng.random_range(0..num_relations);
        let a = rng.random_range(0..clusters);
        let b = (a + r) % clusters;
        let h = a * size + rng.random_range(0..size);
        let t = b * size + rng.random_range(0..size);
        if h != t && seen.insert((h, r, t)) {
            triples.push(RawTriple::new(
                format!("e{h}"),
                format!("r{r}"),
                format!("e{t}"),
            ));
        }
    }
    triples.shuffle(&mut rng);
    triples
}

/// Splits `triples` 90/5/5 into train, valid, test.
pub fn split_90_5_5(triples: &[RawTriple]) -> (Vec<RawTriple>, Vec<RawTriple>, Vec<RawTriple>) {
    let n = triples.len();
    let n_valid = n / 20;
    let n_test = n / 20;
    let n_train = n - n_valid - n_test;
    (
        triples[..n_train].to_vec(),
        triples[n_train..n_train + n_valid].to_vec(),
        triples[n_train + n_valid..].to_vec(),
    )
}

pub fn write_split(path: &Path, triples: &[RawTriple]) {
    let text: String = triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
        .collect();
    fs::write(path, text).unwrap();
}

/// Writes the toy KB used by the end-to-end tests into `dir`.
pub fn write_toy_dataset(dir: &Path, seed: u64) {
    let triples = clustered_kb(50, 5, 5, 500, seed);
    let (train, valid, test) = split_90_5_5(&triples);
    fs::create_dir_all(dir).unwrap();
    write_split(&dir.join("train.txt"), &train);
    write_split(&dir.join("valid.txt"), &valid);
    write_split(&dir.join("test.txt"), &test);
}

/// Naive trilinear score, left-to-right products.
pub fn naive_score(params: &ModelParams, h: usize, r: usize, t: usize) -> f64 {
    let (hv, rv, tv) = (params.entity(h), params.relation(r), params.entity(t));
    (0..params.dim()).map(|i| hv[i] * rv[i] * tv[i]).sum()
}

/// Softmax NLL of the truth over `{truth} ∪ negatives` plus `l2/2 |row|^2`
/// for every distinct row touched, written without the library's helpers.
pub fn oracle_loss(params: &ModelParams, query: &Query, negatives: &[usize], l2: f64) -> f64 {
    let score = |e: usize| match query.direction {
        kbc::Direction::Tail => naive_score(params, query.anchor, query.relation, e),
        kbc::Direction::Head => naive_score(params, e, query.relation, query.anchor),
    };
    let mut pool = vec![query.truth];
    pool.extend_from_slice(negatives);
    let scores: Vec<f64> = pool.iter().map(|&e| score(e)).collect();
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let mut loss = -(scores[0] - max - z.ln());
    if l2 > 0.0 {
        let mut rows: Vec<usize> = pool.clone();
        rows.push(query.anchor);
        rows.sort_unstable();
        rows.dedup();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        for e in rows {
            loss += 0.5 * l2 * sq(params.entity(e));
        }
        loss += 0.5 * l2 * sq(params.relation(query.relation));
    }
    loss
}

/// Filtered rank by brute force: score every entity, keep those whose triple
/// is absent from every split list (or is the truth), sort descending and
/// read the truth's tie block.
pub fn brute_force_rank(
    params: &ModelParams,
    query: &Query,
    splits: &[&[Triple]],
    policy: TiePolicy,
) -> f64 {
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for e in 0..params.num_entities() {
        let triple = query.complete(e);
        let known = splits.iter().any(|s| s.contains(&triple));
        if e == query.truth || !known {
            let s = match query.direction {
                kbc::Direction::Tail => naive_score(params, query.anchor, query.relation, e),
                kbc::Direction::Head => naive_score(params, e, query.relation, query.anchor),
            };
            scored.push((e, s));
        }
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let truth_score = scored.iter().find(|(e, _)| *e == query.truth).unwrap().1;
    let first = scored.iter().position(|(_, s)| *s == truth_score).unwrap() + 1;
    let last = scored.iter().rposition(|(_, s)| *s == truth_score).unwrap() + 1;
    match policy {
        TiePolicy::Optimistic => first as f64,
        TiePolicy::Pessimistic => last as f64,
        TiePolicy::Average => (first + last) as f64 / 2.0,
    }
}

/// Parameters whose entries are multiples of 1/4 in [-1, 1], so every
/// product and sum is exact and ties are common.
pub fn dyadic_params(
    num_entities: usize,
    num_relations: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> ModelParams {
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.random_range(-4i32..=4) as f64 / 4.0)
            .collect()
    };
    let entities = draw(num_entities * dim);
    let relations = draw(num_relations * dim);
    ModelParams::from_tables(dim, entities, relations).unwrap()
}

/// Random KB with `|E| <= 30`, `|R| <= 5` and up to 200 triples spread over
/// three splits (duplicates across splits allowed).
pub fn random_kb(rng: &mut impl Rng) -> (usize, usize, Vec<Triple>, Vec<Triple>, Vec<Triple>) {
    let ne = rng.random_range(2..=30);
    let nr = rng.random_range(1..=5);
    let n = rng.random_range(3..=200);
    let mut all: Vec<Triple> = (0..n)
        .map(|_| {
            Triple::new(
                rng.random_range(0..ne),
                rng.random_range(0..nr),
                rng.random_range(0..ne),
            )
        })
        .collect();
    all.shuffle(rng);
    let a = n * 8 / 10;
    let b = a + (n - a) / 2;
    let test = all.split_off(b);
    let valid = all.split_off(a);
    (ne, nr, all, valid, test)
}
