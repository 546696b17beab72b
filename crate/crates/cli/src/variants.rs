//! Named configuration diffs for ablation tables and hyperparameter grids.

use dualrec::model::{FusionMode, GraphMode, SideMode};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub type Apply = fn(&mut RunConfig);

/// Component ablations, then fusion and graph variants.
pub const REGISTRY: [(&str, Apply); 13] = [
    ("full", |_| {}),
    ("wo_graph", |c| c.graph_mode = GraphMode::None),
    ("wo_rnn", |c| c.slice_rnn = false),
    ("wo_concat_id", |c| c.concat_id = false),
    ("wo_aux", |c| c.beta = 0.0),
    ("global_graph", |c| c.graph_mode = GraphMode::Global),
    ("last_graph", |c| c.graph_mode = GraphMode::LastOnly),
    ("user_slices", |c| c.sides = SideMode::UserOnly),
    ("item_slices", |c| c.sides = SideMode::ItemOnly),
    ("concat_fusion", |c| c.fusion = FusionMode::Concat),
    ("last_layer", |c| c.fusion = FusionMode::LastLayer),
    ("mean_pooling", |c| c.fusion = FusionMode::MeanPool),
    ("single_gru", |c| c.fusion = FusionMode::GruShared),
];

pub const BETA_GRID: [f64; 7] = [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];
pub const LAYER_GRID: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    Beta,
    Layers,
}

/// Labelled configurations, one per table row.
pub fn expand(base: &RunConfig, names: &[String]) -> Result<Vec<(String, RunConfig)>> {
    names
        .iter()
        .map(|name| {
            let (_, apply) = REGISTRY.iter().find(|(n, _)| n == name).ok_or_else(|| CliError::UnknownVariant {
                name: name.clone(),
                known: REGISTRY.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "),
            })?;
            let mut cfg = base.clone();
            apply(&mut cfg);
            Ok((name.clone(), cfg))
        })
        .collect()
}

pub fn grid(base: &RunConfig, grid: Grid) -> Vec<(String, RunConfig)> {
    match grid {
        Grid::Beta => BETA_GRID.iter().map(|&b| (format!("beta={b:e}"), RunConfig { beta: b, ..base.clone() })).collect(),
        Grid::Layers => LAYER_GRID.iter().map(|&l| (format!("layers={l}"), RunConfig { layers: l, ..base.clone() })).collect(),
    }
}
