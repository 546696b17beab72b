use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the `L+1` per-layer matrices of a slice become one vector per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Separate user and item GRUs over the layer sequence.
    GruPerSide,
    /// One GRU shared by both sides (also shares the cross-slice GRU).
    GruShared,
    /// Concatenate layers and project back to `d`.
    Concat,
    LastLayer,
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// One graph per slice with cross-slice recurrence.
    TimeSliced,
    /// All history slices collapsed into one graph.
    Global,
    /// Only the most recent history slice.
    LastOnly,
    /// No propagation: each node takes the mean of its neighbours' inputs.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideMode {
    Both,
    UserOnly,
    ItemOnly,
}

/// Graph input for a node active in a later slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceInput {
    /// Always the static ID embedding.
    Embedding,
    /// The node's previous dynamic state, or its embedding the first time
    /// it appears.
    Chained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSite {
    Propagation,
    Gru,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub fusion: FusionMode,
    pub graph_mode: GraphMode,
    pub slice_rnn: bool,
    pub concat_id: bool,
    pub sides: SideMode,
    pub slice_input: SliceInput,
    pub dropout: f64,
    pub dropout_sites: Vec<DropoutSite>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            layers: 2,
            fusion: FusionMode::GruPerSide,
            graph_mode: GraphMode::TimeSliced,
            slice_rnn: true,
            concat_id: true,
            sides: SideMode::Both,
            slice_input: SliceInput::Chained,
            dropout: 0.1,
            dropout_sites: vec![DropoutSite::Mlp],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn dropout_at(&self, site: DropoutSite) -> f64 {
        if self.dropout_sites.contains(&site) {
            self.dropout
        } else {
            0.0
        }
    }

    /// Whether per-slice states exist (and the auxiliary loss applies).
    pub fn has_slice_states(&self) -> bool {
        matches!(self.graph_mode, GraphMode::TimeSliced | GraphMode::None)
    }

    pub fn mlp_input_width(&self) -> usize {
        let dynamic = match self.sides {
            SideMode::Both => 2,
            SideMode::UserOnly | SideMode::ItemOnly => 1,
        };
        let fixed = if self.concat_id { 2 } else { 0 };
        (dynamic + fixed) * self.dim
    }
}
