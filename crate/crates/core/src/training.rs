//! Joint optimisation of the interaction loss and the auxiliary temporal
//! loss with sliding-window targets, negative sampling and early stopping.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, clip_global_norm, AdamConfig, AdamState, BoundParams, Tape, Tensor, Var};
use crate::dataset::{SliceSplit, SlicedLog};
use crate::error::{contract, Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::graphs::SliceGraph;
use crate::model::{Model, Pass, SliceStates};
use crate::rng::{stream, substream, Purpose, Rng};
use crate::tpp::{aux_loss, EventTimes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Every history end `s` in `[s_min, T−4]`.
    Sliding,
    /// Only the longest training window, `s = T−4`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub beta: f64,
    pub neg_per_pos: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub window: Window,
    pub s_min: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 5e-4,
            l2: 1e-4,
            beta: 1e-3,
            neg_per_pos: 1,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            window: Window::Sliding,
            s_min: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite non-negative number");
        }
        if self.neg_per_pos == 0 {
            return bad("neg_per_pos must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub user: usize,
    pub item: usize,
    pub label: u8,
    /// Graphs `0..=history_end` are visible; the target lies in the next slice.
    pub history_end: usize,
}

/// Everything the loop reads besides the model.
pub struct TrainInputs<'a> {
    pub data: &'a SlicedLog,
    pub graphs: &'a [SliceGraph],
    pub events: &'a EventTimes,
}

impl TrainInputs<'_> {
    fn split(&self) -> SliceSplit {
        self.data.split()
    }
}

/// Positives for each history end, as distinct (user, item) pairs of the
/// next slice.
fn positives(data: &SlicedLog, cfg: &TrainConfig) -> Result<Vec<(usize, Vec<(usize, usize)>)>> {
    let t = data.slice_count;
    if t < 4 {
        return Err(Error::Config(format!("{t} slices leave no training target; need at least 4")));
    }
    let last = t - 4;
    let ends: Vec<usize> = match cfg.window {
        Window::Sliding => (cfg.s_min..=last).collect(),
        Window::Fixed => vec![last],
    };
    let out: Vec<_> = ends
        .into_iter()
        .map(|s| {
            let pairs: BTreeSet<(usize, usize)> = data.slice(s + 1).iter().map(|x| (x.user as usize, x.item as usize)).collect();
            (s, pairs.into_iter().collect::<Vec<_>>())
        })
        .collect();
    if out.iter().all(|(_, p)| p.is_empty()) {
        return Err(Error::Config("no positive training examples in the training slices".into()));
    }
    Ok(out)
}

/// One epoch of examples: every positive plus `neg_per_pos` sampled
/// negatives each, shuffled.
pub fn make_training_examples(data: &SlicedLog, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<TrainExample>> {
    let n = data.num_items();
    let mut out = Vec::new();
    for (s, pairs) in positives(data, cfg)? {
        let mut by_user: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); data.num_users()];
        for &(u, i) in &pairs {
            by_user[u].insert(i);
        }
        for &(u, i) in &pairs {
            out.push(TrainExample { user: u, item: i, label: 1, history_end: s });
            if by_user[u].len() >= n {
                return Err(contract(format!("user {u} interacted with every item in slice {}", s + 1)));
            }
            for _ in 0..cfg.neg_per_pos {
                let item = loop {
                    let j = rng.gen_range(0..n);
                    if !by_user[u].contains(&j) {
                        break j;
                    }
                };
                out.push(TrainExample { user: u, item, label: 0, history_end: s });
            }
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Loss value and its parts for one batch.
pub struct Objective {
    pub loss: Var,
    pub bce: f64,
    pub tpp: f64,
    pub tpp_terms: usize,
}

/// Records `ℒ_c + β L_p` for `batch` on `tape`.
pub fn batch_objective(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    inputs: &TrainInputs,
    batch: &[TrainExample],
    beta: f64,
    pass: &mut Pass,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let mut ends: Vec<usize> = batch.iter().map(|e| e.history_end).collect();
    ends.sort_unstable();
    ends.dedup();
    let s_max = *ends.last().unwrap();
    if s_max + 1 >= inputs.graphs.len() {
        return Err(contract(format!("history end {s_max} leaves no target slice")));
    }

    // Slice states are causal, so one pass to the furthest end serves every
    // example; collapsed graph modes need one pass per distinct end.
    let mut per_end: Vec<(usize, SliceStates)> = Vec::new();
    let full = if model.config.has_slice_states() {
        let st = model.forward_all(tape, params, &inputs.graphs[..=s_max], pass)?;
        for &s in &ends {
            let view = SliceStates { user: st.user[..=s].to_vec(), item: st.item[..=s].to_vec(), per_slice: true };
            per_end.push((s, view));
        }
        Some(st)
    } else {
        for &s in &ends {
            per_end.push((s, model.forward_all(tape, params, &inputs.graphs[..=s], pass)?));
        }
        None
    };

    let mut prob_parts = Vec::new();
    let mut labels = Vec::with_capacity(batch.len());
    for (s, states) in &per_end {
        let members: Vec<&TrainExample> = batch.iter().filter(|e| e.history_end == *s).collect();
        let users: Vec<usize> = members.iter().map(|e| e.user).collect();
        let items: Vec<usize> = members.iter().map(|e| e.item).collect();
        prob_parts.push(model.predict(tape, params, states, &users, &items, pass)?);
        labels.extend(members.iter().map(|e| f64::from(e.label)));
    }
    let probs = tape.concat_rows(&prob_parts)?;
    let bce = tape.bce(probs, &labels)?;

    let (tpp, tpp_terms) = match &full {
        Some(states) => {
            let users: BTreeSet<usize> = batch.iter().map(|e| e.user).collect();
            let items: BTreeSet<usize> = batch.iter().map(|e| e.item).collect();
            let users: Vec<usize> = users.into_iter().collect();
            let items: Vec<usize> = items.into_iter().collect();
            aux_loss(tape, params, states, inputs.events, &users, &items)?
        }
        None => (tape.constant(Tensor::scalar(0.0)), 0),
    };
    let bce_value = tape.value(bce).item();
    let tpp_value = tape.value(tpp).item();
    let loss = if beta > 0.0 && tpp_terms > 0 {
        let weighted = tape.scale(tpp, beta);
        tape.add(bce, weighted)?
    } else {
        bce
    };
    Ok(Objective { loss, bce: bce_value, tpp: tpp_value, tpp_terms })
}

/// Loss and gradients for every parameter with dropout disabled.
pub fn objective_gradients(model: &Model, inputs: &TrainInputs, batch: &[TrainExample], beta: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    let mut rng = stream(0, Purpose::Dropout);
    let obj = batch_objective(model, &mut tape, &params, inputs, batch, beta, &mut Pass { training: false, rng: &mut rng })?;
    let grads = tape.backward(obj.loss)?;
    Ok((tape.value(obj.loss).item(), params.vars().iter().map(|&v| grads.get(v)).collect()))
}

/// Loss with dropout disabled: `(ℒ, ℒ_c, L_p)`.
pub fn objective_value(model: &Model, inputs: &TrainInputs, batch: &[TrainExample], beta: f64) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    let mut rng = stream(0, Purpose::Dropout);
    let obj = batch_objective(model, &mut tape, &params, inputs, batch, beta, &mut Pass { training: false, rng: &mut rng })?;
    Ok((tape.value(obj.loss).item(), obj.bce, obj.tpp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_tpp: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
    pub val_mrr: f64,
    pub seconds: f64,
    /// Exponent evaluations in the temporal term that hit the clamp.
    pub tpp_clamps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    /// Optimiser state at the best validation epoch.
    pub optimizer: AdamState,
    pub best_epoch: usize,
    pub best_validation: EvalReport,
    pub log: Vec<EpochRecord>,
    /// Per-step loss values, in order.
    pub step_losses: Vec<f64>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    step: usize,
    loss: f64,
    bce: f64,
    tpp: f64,
    first_non_finite: Option<&'a str>,
    batch: &'a [TrainExample],
    param_norms: Vec<(&'a str, f64)>,
}

fn abort_numerical(
    dump_dir: Option<&Path>,
    model: &Model,
    tape: &Tape,
    batch: &[TrainExample],
    (epoch, step): (usize, usize),
    (loss, bce, tpp): (f64, f64, f64),
) -> Error {
    let dump = NanDump {
        epoch,
        step,
        loss,
        bce,
        tpp,
        first_non_finite: tape.first_non_finite(),
        batch,
        param_norms: model.params.iter().map(|(n, t)| (n, t.sum_squares().sqrt())).collect(),
    };
    let mut message = format!("non-finite loss {loss} at epoch {epoch}, step {step}");
    if let Some(op) = tape.first_non_finite() {
        message.push_str(&format!(" (first non-finite value from {op})"));
    }
    if let Some(dir) = dump_dir {
        let path = dir.join("nan_dump.json");
        match serde_json::to_vec_pretty(&dump).map_err(Error::from).and_then(|b| std::fs::write(&path, b).map_err(Error::from)) {
            Ok(()) => message.push_str(&format!("; dump written to {}", path.display())),
            Err(e) => message.push_str(&format!("; dump failed: {e}")),
        }
    }
    Error::Numerical(message)
}

/// Runs the training loop, validating after each epoch and keeping the best
/// parameters by NDCG@10. `on_epoch` sees every record as it is produced.
pub fn train(
    mut model: Model,
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    dump_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.graphs.len() != inputs.data.slice_count {
        return Err(contract(format!("{} graphs for {} slices", inputs.graphs.len(), inputs.data.slice_count)));
    }
    let valid = inputs.split().valid_slice();
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &model.params);
    let mut dropout_rng = stream(cfg.seed, Purpose::Dropout);
    let mut best: Option<(f64, usize, EvalReport, Model, AdamState)> = None;
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut sample_rng = substream(cfg.seed, Purpose::Sampling, epoch as u64);
        let examples = make_training_examples(inputs.data, cfg, &mut sample_rng)?;
        let (mut loss_sum, mut bce_sum, mut tpp_sum, mut clamps) = (0.0, 0.0, 0.0, 0);
        let mut batches = 0;
        for (step, batch) in examples.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let params = model.params.bind(&mut tape);
            let obj = batch_objective(
                &model,
                &mut tape,
                &params,
                inputs,
                batch,
                cfg.beta,
                &mut Pass { training: true, rng: &mut dropout_rng },
            )?;
            let loss = tape.value(obj.loss).item();
            if !loss.is_finite() || tape.first_non_finite().is_some() {
                return Err(abort_numerical(dump_dir, &model, &tape, batch, (epoch, step), (loss, obj.bce, obj.tpp)));
            }
            let grads = tape.backward(obj.loss)?;
            let mut g: Vec<Tensor> = params.vars().iter().map(|&v| grads.get(v)).collect();
            let norm = clip_global_norm(&mut g, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(abort_numerical(dump_dir, &model, &tape, batch, (epoch, step), (loss, obj.bce, obj.tpp)));
            }
            adam_step(&mut model.params, &g, &mut adam, cfg.l2)?;
            step_losses.push(loss);
            loss_sum += loss;
            bce_sum += obj.bce;
            tpp_sum += obj.tpp;
            clamps += tape.clamp_hits();
            batches += 1;
        }
        let report = evaluate(&model, inputs.data, inputs.graphs, valid, 10, cfg.seed)?;
        let n = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_bce: bce_sum / n,
            train_tpp: tpp_sum / n,
            val_hr10: report.hr_at_k,
            val_ndcg10: report.ndcg_at_k,
            val_mrr: report.mrr,
            seconds: started.elapsed().as_secs_f64(),
            tpp_clamps: clamps,
        };
        on_epoch(&record)?;
        log.push(record);

        let improved = best.as_ref().map_or(true, |b| report.ndcg_at_k > b.0);
        if improved {
            best = Some((report.ndcg_at_k, epoch, report, model.clone(), adam.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_validation, model, optimizer) =
        best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
    Ok(TrainOutcome { model, optimizer, best_epoch, best_validation, log, step_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_reference_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::column(vec![0.5, 0.5, 0.9]));
        let each = [(0, 1.0), (1, 0.0), (2, 1.0)];
        for (row, y) in each {
            let one = tape.gather_rows(p, &[row]).unwrap();
            let l = tape.bce(one, &[y]).unwrap();
            let want = if row == 2 { -(0.9f64).ln() } else { std::f64::consts::LN_2 };
            assert!((tape.value(l).item() - want).abs() < 1e-15);
        }
        let extremes = tape.constant(Tensor::column(vec![0.0, 1.0]));
        let l = tape.bce(extremes, &[1.0, 0.0]).unwrap();
        // 1 − (1 − 1e-12) is not exactly 1e-12 in binary.
        assert!((tape.value(l).item() + (1e-12f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { neg_per_pos: 0, ..Default::default() }.validate().is_err());
    }
}
