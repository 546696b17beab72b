//! Synthetic interaction logs with a known generative pattern.
//!
//! Items are partitioned into contiguous clusters of `cluster_size`. In every
//! slice each user interacts with `per_slice` distinct items of one cluster;
//! the [`Pattern`] decides which cluster.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionLog, SlicedLog};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, Rng};

/// Slice length used for every synthetic log.
pub const SLICE_LENGTH: i64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// User `u` always draws from cluster `u mod C`.
    Planted,
    /// Clusters split into an even and an odd half. Users alternate between
    /// a home cluster in each half, so the popular half flips every slice and
    /// the next slice repeats the one before the last.
    PopularityFlip,
    /// Every user is active in slice 0 and returns exactly once, in slice
    /// `1 + u mod (T−1)`, to the same cluster. The cluster lies in the half
    /// matching the parity of the return slice, so item popularity flips
    /// every slice after the first, and the users of slice `s+1` are absent
    /// from slice `s`.
    Returning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub slices: usize,
    pub cluster_size: usize,
    pub per_slice: usize,
    pub pattern: Pattern,
    /// Place each user's last event of every slice at the same offset, so
    /// consecutive events are exactly one slice apart.
    pub regular_gaps: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 50,
            items: 50,
            slices: 6,
            cluster_size: 5,
            per_slice: 3,
            pattern: Pattern::Planted,
            regular_gaps: false,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn clusters(&self) -> usize {
        self.items / self.cluster_size
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.users == 0 || self.cluster_size == 0 || self.items % self.cluster_size != 0 {
            return bad(format!("{} items do not split into clusters of {}", self.items, self.cluster_size));
        }
        if self.per_slice == 0 || self.per_slice > self.cluster_size {
            return bad(format!("per_slice {} must lie in [1, {}]", self.per_slice, self.cluster_size));
        }
        if self.slices < 3 {
            return bad(format!("need at least 3 slices, got {}", self.slices));
        }
        if self.pattern != Pattern::Planted && (self.clusters() < 4 || self.clusters() % 2 != 0) {
            return bad(format!("{} clusters cannot split into two equal halves", self.clusters()));
        }
        Ok(())
    }

    /// Cluster per user and slice; `None` where the user is inactive.
    pub fn schedule(&self, rng: &mut Rng) -> Vec<Vec<Option<usize>>> {
        if self.pattern == Pattern::Returning {
            let half = self.clusters() / 2;
            return (0..self.users)
                .map(|u| {
                    let back = 1 + u % (self.slices - 1);
                    let cluster = (back % 2) * half + rng.gen_range(0..half);
                    (0..self.slices).map(|s| (s == 0 || s == back).then_some(cluster)).collect()
                })
                .collect();
        }
        (0..self.users).map(|u| (0..self.slices).map(|s| Some(self.cluster_of(u, s))).collect()).collect()
    }

    /// Cluster that user `u` draws from in slice `s` for the deterministic
    /// patterns. Returning users draw their cluster at random instead.
    pub fn cluster_of(&self, u: usize, s: usize) -> usize {
        let c = self.clusters();
        match self.pattern {
            Pattern::Planted | Pattern::Returning => u % c,
            Pattern::PopularityFlip => {
                let half = c / 2;
                // Even slices use clusters [0, half), odd slices [half, c).
                // The odd home cluster is decoupled from the even one.
                let home = if s % 2 == 0 { u % half } else { (u / half + 3 * u) % half };
                (s % 2) * half + home
            }
        }
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SlicedLog> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Purpose::Synthetic);
    let schedule = cfg.schedule(&mut rng);
    let mut xs = Vec::new();
    for s in 0..cfg.slices {
        let start = s as i64 * SLICE_LENGTH;
        for u in 0..cfg.users {
            let Some(cluster) = schedule[u][s] else { continue };
            let picks = sample(&mut rng, cfg.cluster_size, cfg.per_slice);
            let offset = if cfg.regular_gaps { SLICE_LENGTH / 4 + (u as i64 * 37) % (SLICE_LENGTH / 2) } else { 0 };
            for (k, p) in picks.into_iter().enumerate() {
                let timestamp = if cfg.regular_gaps {
                    // The final pick lands exactly on the offset.
                    start + offset - (cfg.per_slice - 1 - k) as i64 * 10
                } else {
                    start + rng.gen_range(0..SLICE_LENGTH)
                };
                xs.push(Interaction { user: u as u32, item: (cluster * cfg.cluster_size + p) as u32, timestamp });
            }
        }
    }
    let log = InteractionLog::from_indexed(xs, cfg.users, cfg.items)?;
    SlicedLog::new(log, cfg.slices, SLICE_LENGTH, 0)
}
