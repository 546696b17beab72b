//! Sampled-negative ranking evaluation.
//!
//! Each held-out (user, item) pair is ranked against 100 sampled negatives.
//! Ties count against the positive.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Tape};
use crate::dataset::SlicedLog;
use crate::error::{contract, Result};
use crate::graphs::SliceGraph;
use crate::model::{Model, Pass, Side, SliceStates};
use crate::rng::{stream, substream, Purpose};
use crate::tpp::{EventTimes, TppParams};

pub const NEGATIVES_PER_CASE: usize = 100;

/// Cases scored per `predict` call.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub mrr: f64,
    pub k: usize,
    pub num_cases: usize,
    pub negatives_per_case: usize,
    pub seed: u64,
}

/// Metric triple without sampling metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// `1 + #{negatives scoring at least as high as the positive}`.
pub fn rank_from_scores(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

pub fn metrics(ranks: &[usize], k: usize) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(contract("no ranks to summarise"));
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(contract(format!("rank {r} is not 1-indexed")));
    }
    let n = ranks.len() as f64;
    let mut hr = 0.0;
    let mut ndcg = 0.0;
    let mut mrr = 0.0;
    for &r in ranks {
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
        mrr += 1.0 / r as f64;
    }
    Ok(Metrics { hr: hr / n, ndcg: ndcg / n, mrr: mrr / n })
}

/// Candidate negatives for `user` against `positive`: items outside the
/// user's target-slice set. Drawn without replacement when the pool holds at
/// least `count` items, with replacement otherwise.
pub fn sample_negatives(
    pool_size: usize,
    excluded: &BTreeSet<usize>,
    count: usize,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..pool_size).filter(|i| !excluded.contains(i)).collect();
    if pool.is_empty() {
        return Err(contract("no items left to sample negatives from"));
    }
    if pool.len() >= count {
        Ok(rand::seq::index::sample(rng, pool.len(), count).into_iter().map(|k| pool[k]).collect())
    } else {
        Ok((0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }
}

/// Scores `(user, items[k])` for every k with the model in eval mode.
pub fn score_items(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    states: &SliceStates,
    user: usize,
    items: &[usize],
) -> Result<Vec<f64>> {
    let users = vec![user; items.len()];
    score_pairs(model, tape, params, states, &users, items)
}

fn score_pairs(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    states: &SliceStates,
    users: &[usize],
    items: &[usize],
) -> Result<Vec<f64>> {
    let mut rng = stream(0, Purpose::Dropout);
    let y = model.predict(tape, params, states, users, items, &mut Pass { training: false, rng: &mut rng })?;
    Ok(tape.value(y).data().to_vec())
}

/// Rank of `positive` among `negatives` for `user`.
pub fn rank_case(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    states: &SliceStates,
    user: usize,
    positive: usize,
    negatives: &[usize],
) -> Result<usize> {
    if negatives.contains(&positive) {
        return Err(contract(format!("positive item {positive} is among the negatives")));
    }
    let mut items = Vec::with_capacity(negatives.len() + 1);
    items.push(positive);
    items.extend_from_slice(negatives);
    let scores = score_items(model, tape, params, states, user, &items)?;
    Ok(rank_from_scores(scores[0], &scores[1..]))
}

/// Held-out cases of `target`: distinct (user, item) pairs in that slice.
pub fn target_cases(data: &SlicedLog, target: usize) -> Vec<(usize, usize)> {
    let set: BTreeSet<(usize, usize)> = data.slice(target).iter().map(|x| (x.user as usize, x.item as usize)).collect();
    set.into_iter().collect()
}

/// Ranks every case of slice `target` using history slices `0..target`.
pub fn evaluate_ranks(model: &Model, data: &SlicedLog, graphs: &[SliceGraph], target: usize, seed: u64) -> Result<Vec<usize>> {
    if target == 0 || target >= graphs.len() {
        return Err(contract(format!("target slice {target} needs history and must exist")));
    }
    let cases = target_cases(data, target);
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); data.num_users()];
    for &(u, i) in &cases {
        seen[u].insert(i);
    }
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    let mut rng = stream(seed, Purpose::Dropout);
    let states = model.forward_all(&mut tape, &params, &graphs[..target], &mut Pass { training: false, rng: &mut rng })?;

    let mut ranks = Vec::with_capacity(cases.len());
    for (chunk_index, chunk) in cases.chunks(CHUNK).enumerate() {
        let mut users = Vec::with_capacity(chunk.len() * (NEGATIVES_PER_CASE + 1));
        let mut items = Vec::with_capacity(users.capacity());
        for (offset, &(u, pos)) in chunk.iter().enumerate() {
            let case = chunk_index * CHUNK + offset;
            let mut rng = substream(seed, Purpose::Eval, case as u64);
            let negatives = sample_negatives(model.num_items, &seen[u], NEGATIVES_PER_CASE, &mut rng)?;
            users.extend(std::iter::repeat(u).take(NEGATIVES_PER_CASE + 1));
            items.push(pos);
            items.extend(negatives);
        }
        let scores = score_pairs(model, &mut tape, &params, &states, &users, &items)?;
        for case_scores in scores.chunks(NEGATIVES_PER_CASE + 1) {
            ranks.push(rank_from_scores(case_scores[0], &case_scores[1..]));
        }
    }
    Ok(ranks)
}

pub fn evaluate(model: &Model, data: &SlicedLog, graphs: &[SliceGraph], target: usize, k: usize, seed: u64) -> Result<EvalReport> {
    let ranks = evaluate_ranks(model, data, graphs, target, seed)?;
    let m = metrics(&ranks, k)?;
    Ok(EvalReport {
        hr_at_k: m.hr,
        ndcg_at_k: m.ndcg,
        mrr: m.mrr,
        k,
        num_cases: ranks.len(),
        negatives_per_case: NEGATIVES_PER_CASE,
        seed,
    })
}

/// Mean negative log-density of each node's event in slice `target` given
/// its state and event after slices `0..target`. Returns `(mean, terms)`;
/// the mean is NaN when no node is active in both `target − 1` and `target`.
pub fn heldout_tpp_nll(model: &Model, events: &EventTimes, graphs: &[SliceGraph], target: usize) -> Result<(f64, usize)> {
    if target == 0 || target >= graphs.len() {
        return Err(contract(format!("target slice {target} needs history and must exist")));
    }
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    let mut rng = stream(0, Purpose::Dropout);
    let states = model.forward_all(&mut tape, &params, &graphs[..target], &mut Pass { training: false, rng: &mut rng })?;
    let mut total = 0.0;
    let mut count = 0;
    for side in [Side::User, Side::Item] {
        let p = TppParams::from_store(&model.params, side);
        let h = tape.value(match side {
            Side::User => states.final_user(),
            Side::Item => states.final_item(),
        });
        let times = events.side(side);
        for n in 0..h.rows() {
            if let (Some(a), Some(b)) = (times[target - 1][n], times[target][n]) {
                total -= p.log_density(h.row(n), a, b)?;
                count += 1;
            }
        }
    }
    Ok((if count == 0 { f64::NAN } else { total / count as f64 }, count))
}
