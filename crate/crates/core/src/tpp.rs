//! Auxiliary temporal prediction over consecutive slices.
//!
//! For a node with state `h` whose last event in slice `s` happened at
//! `t_s`, the intensity of its next event is
//! `λ(t) = exp(w·h + ω (t − t_s) + b)` and the log-density of observing it
//! at `t_{s+1}` (gap `τ = t_{s+1} − t_s`) has the closed form
//!
//! `log f(τ) = w·h + ωτ + b + (e^{w·h+b} − e^{w·h+ωτ+b}) / ω`.
//!
//! Times are measured in slice lengths.

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::dataset::SlicedLog;
use crate::error::{contract, Result};
use crate::model::{init_uniform, Side, SliceStates};
use crate::rng::Rng;

pub const OMEGA_INIT: f64 = 0.1;

/// Registers `tpp.{user,item}.{w,omega,b}`.
pub fn register(store: &mut ParamStore, dim: usize, scale: f64, rng: &mut Rng) -> Result<()> {
    for side in ["user", "item"] {
        store.insert(format!("tpp.{side}.w"), init_uniform(dim, 1, scale, rng))?;
        store.insert(format!("tpp.{side}.omega"), Tensor::scalar(OMEGA_INIT))?;
        store.insert(format!("tpp.{side}.b"), Tensor::scalar(0.0))?;
    }
    Ok(())
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::User => "user",
        Side::Item => "item",
    }
}

/// Plain-value parameters for one side.
#[derive(Debug, Clone, PartialEq)]
pub struct TppParams {
    pub w: Vec<f64>,
    pub omega: f64,
    pub b: f64,
}

impl TppParams {
    pub fn from_store(store: &ParamStore, side: Side) -> Self {
        let s = side_name(side);
        Self {
            w: store.get(&format!("tpp.{s}.w")).expect("tpp params registered").data().to_vec(),
            omega: store.get(&format!("tpp.{s}.omega")).expect("tpp params registered").item(),
            b: store.get(&format!("tpp.{s}.b")).expect("tpp params registered").item(),
        }
    }

    fn base(&self, h: &[f64]) -> f64 {
        self.w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    /// `λ(t_prev + gap)`.
    pub fn intensity(&self, h: &[f64], gap: f64) -> f64 {
        (self.base(h) + self.omega * gap).exp()
    }

    /// Closed-form log-density of the next event at `t_next`.
    pub fn log_density(&self, h: &[f64], t_prev: f64, t_next: f64) -> Result<f64> {
        if self.omega == 0.0 {
            return Err(contract("omega must be non-zero"));
        }
        if t_next < t_prev {
            return Err(contract(format!("next event {t_next} precedes previous {t_prev}")));
        }
        let a = self.base(h);
        let g = self.omega * (t_next - t_prev);
        Ok(a + g + (a.exp() - (a + g).exp()) / self.omega)
    }
}

/// Last event time per node and slice, in slice units from `t_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTimes {
    /// `user[s][u]`.
    pub user: Vec<Vec<Option<f64>>>,
    /// `item[s][i]`.
    pub item: Vec<Vec<Option<f64>>>,
}

impl EventTimes {
    pub fn side(&self, side: Side) -> &[Vec<Option<f64>>] {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }
}

pub fn extract_event_times(data: &SlicedLog) -> EventTimes {
    let mut user_raw = vec![vec![None::<i64>; data.num_users()]; data.slice_count];
    let mut item_raw = vec![vec![None::<i64>; data.num_items()]; data.slice_count];
    for s in 0..data.slice_count {
        for x in data.slice(s) {
            let u = &mut user_raw[s][x.user as usize];
            *u = Some(u.map_or(x.timestamp, |t| t.max(x.timestamp)));
            let i = &mut item_raw[s][x.item as usize];
            *i = Some(i.map_or(x.timestamp, |t| t.max(x.timestamp)));
        }
    }
    let norm = |t: i64| (t - data.t_min) as f64 / data.slice_length as f64;
    let convert = |raw: Vec<Vec<Option<i64>>>| raw.into_iter().map(|row| row.into_iter().map(|t| t.map(norm)).collect()).collect();
    EventTimes { user: convert(user_raw), item: convert(item_raw) }
}

/// Log-density for each row of `h` (n×d) with the matching gap, as an n×1
/// column on the tape.
pub fn log_density(tape: &mut Tape, params: &BoundParams, side: Side, h: Var, gaps: &[f64]) -> Result<Var> {
    if gaps.iter().any(|&g| g < 0.0) {
        return Err(contract("negative inter-event gap"));
    }
    let s = side_name(side);
    let w = params.var(&format!("tpp.{s}.w"));
    let omega = params.var(&format!("tpp.{s}.omega"));
    let b = params.var(&format!("tpp.{s}.b"));
    if tape.value(omega).item() == 0.0 {
        return Err(contract("omega must be non-zero"));
    }
    let hw = tape.matmul(h, w)?;
    let base = tape.add_scalar(hw, b)?;
    let gap_const = tape.constant(Tensor::column(gaps.to_vec()));
    let drift = tape.mul_scalar(gap_const, omega)?;
    let shifted = tape.add(base, drift)?;
    let inv_omega = tape.recip(omega)?;
    let start = tape.exp_clamped(base);
    let end = tape.exp_clamped(shifted);
    let start = tape.mul_scalar(start, inv_omega)?;
    let end = tape.mul_scalar(end, inv_omega)?;
    let survival = tape.sub(start, end)?;
    tape.add(shifted, survival)
}

/// Negative log-likelihood of consecutive event pairs for the listed nodes.
/// Pairs with a missing event on either side are skipped. Returns the
/// scalar loss and the number of terms.
pub fn aux_loss(
    tape: &mut Tape,
    params: &BoundParams,
    states: &SliceStates,
    events: &EventTimes,
    users: &[usize],
    items: &[usize],
) -> Result<(Var, usize)> {
    let mut terms = Vec::new();
    let mut count = 0;
    if states.per_slice {
        for (side, nodes) in [(Side::User, users), (Side::Item, items)] {
            let times = events.side(side);
            let slices = states.side(side);
            for s in 0..slices.len().saturating_sub(1) {
                let mut rows = Vec::new();
                let mut gaps = Vec::new();
                for &n in nodes {
                    if let (Some(a), Some(b)) = (times[s][n], times[s + 1][n]) {
                        rows.push(n);
                        gaps.push(b - a);
                    }
                }
                if rows.is_empty() {
                    continue;
                }
                let h = tape.gather_rows(slices[s], &rows)?;
                let logf = log_density(tape, params, side, h, &gaps)?;
                terms.push(tape.sum(logf));
                count += rows.len();
            }
        }
    }
    if terms.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), 0));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((tape.scale(total, -1.0), count))
}
