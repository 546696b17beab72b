//! Forward pass: ID embeddings, per-slice propagation, layer fusion,
//! cross-slice recurrence with carry-forward, and the MLP predictor.

mod config;
mod gru;

use std::rc::Rc;

use rand::Rng as _;

pub use config::{DropoutSite, FusionMode, GraphMode, ModelConfig, SideMode, SliceInput};
pub use gru::Gru;

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::graphs::{union_graph, SliceGraph};
use crate::rng::Rng;
use crate::tpp;

pub(crate) fn init_uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| if scale == 0.0 { 0.0 } else { rng.gen_range(-scale..scale) }).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

/// Training/eval switch plus the dropout stream.
pub struct Pass<'a> {
    pub training: bool,
    pub rng: &'a mut Rng,
}

/// Dynamic states per history slice. `user[s]` is M×d, `item[s]` is N×d.
///
/// When the graph mode collapses history (global or last graph) there is a
/// single entry holding the final states.
#[derive(Debug, Clone)]
pub struct SliceStates {
    pub user: Vec<Var>,
    pub item: Vec<Var>,
    pub per_slice: bool,
}

impl SliceStates {
    pub fn final_user(&self) -> Var {
        *self.user.last().expect("at least one slice")
    }

    pub fn final_item(&self) -> Var {
        *self.item.last().expect("at least one slice")
    }

    pub fn side(&self, side: Side) -> &[Var] {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub num_users: usize,
    pub num_items: usize,
}

impl Model {
    /// Allocates and initialises every parameter the configuration uses.
    pub fn new(config: ModelConfig, num_users: usize, num_items: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if num_users == 0 || num_items == 0 {
            return Err(contract("model needs at least one user and one item"));
        }
        let d = config.dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut store = ParamStore::new();
        store.insert("emb.user", init_uniform(num_users, d, scale, rng))?;
        store.insert("emb.item", init_uniform(num_items, d, scale, rng))?;

        let uses_layers = config.graph_mode != GraphMode::None;
        if uses_layers {
            match config.fusion {
                FusionMode::GruPerSide => {
                    Gru::register(&mut store, "fuse.user", d, d, scale, rng)?;
                    Gru::register(&mut store, "fuse.item", d, d, scale, rng)?;
                }
                FusionMode::GruShared => {
                    Gru::register(&mut store, "fuse.shared", d, d, scale, rng)?;
                }
                FusionMode::Concat => {
                    for side in ["user", "item"] {
                        store.insert(format!("fuse.{side}.proj_w"), init_uniform((config.layers + 1) * d, d, scale, rng))?;
                        store.insert(format!("fuse.{side}.proj_b"), Tensor::zeros(1, d))?;
                    }
                }
                FusionMode::LastLayer | FusionMode::MeanPool => {}
            }
        }
        if config.has_slice_states() && config.slice_rnn {
            if config.fusion == FusionMode::GruShared {
                Gru::register(&mut store, "cross.shared", d, d, scale, rng)?;
            } else {
                Gru::register(&mut store, "cross.user", d, d, scale, rng)?;
                Gru::register(&mut store, "cross.item", d, d, scale, rng)?;
            }
        }
        let widths = [config.mlp_input_width(), 2 * d, d, 1];
        for k in 0..3 {
            store.insert(format!("mlp.w{k}"), init_uniform(widths[k], widths[k + 1], scale, rng))?;
            store.insert(format!("mlp.b{k}"), Tensor::zeros(1, widths[k + 1]))?;
        }
        tpp::register(&mut store, d, scale, rng)?;
        Ok(Self { config, params: store, num_users, num_items })
    }

    /// Wraps a checkpointed parameter set, checking it matches the configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore, num_users: usize, num_items: usize) -> Result<Self> {
        let mut probe = crate::rng::stream(0, crate::rng::Purpose::Init);
        let fresh = Model::new(config.clone(), num_users, num_items, &mut probe)?;
        if fresh.params.names() != params.names() {
            return Err(Error::Config("checkpoint parameters do not match the model configuration".into()));
        }
        for ((name, a), b) in fresh.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!("checkpoint parameter {name} has shape {:?}, expected {:?}", b.shape(), a.shape())));
            }
        }
        Ok(Self { config, params, num_users, num_items })
    }

    fn fusion_gru(&self, side: Side) -> Gru {
        if self.config.fusion == FusionMode::GruShared {
            Gru::named("fuse.shared")
        } else {
            Gru::named(&format!("fuse.{}", side.name()))
        }
    }

    fn cross_gru(&self, side: Side) -> Gru {
        if self.config.fusion == FusionMode::GruShared {
            Gru::named("cross.shared")
        } else {
            Gru::named(&format!("cross.{}", side.name()))
        }
    }

    /// `[X₀, Â X₀, …, Â^L X₀]` on the slice graph.
    pub fn propagate_slice(&self, tape: &mut Tape, graph: &SliceGraph, x0: Var, pass: &mut Pass) -> Result<Vec<Var>> {
        if tape.shape(x0).0 != graph.num_nodes() {
            return Err(Error::Dimension(format!("{} input rows for {} nodes", tape.shape(x0).0, graph.num_nodes())));
        }
        let rate = self.config.dropout_at(DropoutSite::Propagation);
        let mut layers = vec![x0];
        for _ in 0..self.config.layers {
            let prev = *layers.last().unwrap();
            let next = graph.propagate(tape, prev)?;
            let next = tape.dropout(next, rate, pass.training, pass.rng)?;
            layers.push(next);
        }
        Ok(layers)
    }

    /// Collapses one side's layer sequence to a single matrix.
    pub fn fuse_layers(&self, tape: &mut Tape, params: &BoundParams, layers: &[Var], side: Side) -> Result<Var> {
        let first = *layers.first().ok_or_else(|| contract("no layers to fuse"))?;
        let shape = tape.shape(first);
        if layers.iter().any(|&l| tape.shape(l) != shape) {
            return Err(Error::Dimension("layer matrices differ in shape".into()));
        }
        match self.config.fusion {
            FusionMode::GruPerSide | FusionMode::GruShared => {
                let h0 = tape.constant(Tensor::zeros(shape.0, shape.1));
                self.fusion_gru(side).run(tape, params, layers, h0)
            }
            FusionMode::Concat => {
                let cat = tape.concat_cols(layers)?;
                let proj = tape.matmul(cat, params.var(&format!("fuse.{}.proj_w", side.name())))?;
                tape.add_bias(proj, params.var(&format!("fuse.{}.proj_b", side.name())))
            }
            FusionMode::LastLayer => Ok(*layers.last().unwrap()),
            FusionMode::MeanPool => {
                let mut acc = first;
                for &l in &layers[1..] {
                    acc = tape.add(acc, l)?;
                }
                Ok(tape.scale(acc, 1.0 / layers.len() as f64))
            }
        }
    }

    /// Per-node slice representations `(X̄_U, X̄_I)` for the graph's active
    /// users and items, given the stacked input features.
    fn slice_representation(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        graph: &SliceGraph,
        x0: Var,
        pass: &mut Pass,
    ) -> Result<(Var, Var)> {
        let mu = graph.num_users();
        let user_rows: Vec<usize> = (0..mu).collect();
        let item_rows: Vec<usize> = (mu..graph.num_nodes()).collect();
        if self.config.graph_mode == GraphMode::None {
            let agg = tape.spmm(Rc::new(graph.mean_aggregator()), x0, false)?;
            let u = tape.gather_rows(agg, &user_rows)?;
            let i = tape.gather_rows(agg, &item_rows)?;
            return Ok((u, i));
        }
        let layers = self.propagate_slice(tape, graph, x0, pass)?;
        let mut user_layers = Vec::with_capacity(layers.len());
        let mut item_layers = Vec::with_capacity(layers.len());
        for &l in &layers {
            user_layers.push(tape.gather_rows(l, &user_rows)?);
            item_layers.push(tape.gather_rows(l, &item_rows)?);
        }
        let u = self.fuse_layers(tape, params, &user_layers, Side::User)?;
        let i = self.fuse_layers(tape, params, &item_layers, Side::Item)?;
        Ok((u, i))
    }

    /// Dynamic user and item states over the history slices `graphs`.
    pub fn forward_all(&self, tape: &mut Tape, params: &BoundParams, graphs: &[SliceGraph], pass: &mut Pass) -> Result<SliceStates> {
        if graphs.is_empty() {
            return Err(contract("forward pass needs at least one history slice"));
        }
        match self.config.graph_mode {
            GraphMode::TimeSliced | GraphMode::None => self.forward_sliced(tape, params, graphs, pass),
            GraphMode::Global => {
                let g = union_graph(graphs.len() - 1, graphs);
                self.forward_collapsed(tape, params, &g, pass)
            }
            GraphMode::LastOnly => self.forward_collapsed(tape, params, graphs.last().unwrap(), pass),
        }
    }

    fn forward_collapsed(&self, tape: &mut Tape, params: &BoundParams, graph: &SliceGraph, pass: &mut Pass) -> Result<SliceStates> {
        let d = self.config.dim;
        let zeros_u = tape.constant(Tensor::zeros(self.num_users, d));
        let zeros_i = tape.constant(Tensor::zeros(self.num_items, d));
        if graph.is_empty() {
            return Ok(SliceStates { user: vec![zeros_u], item: vec![zeros_i], per_slice: false });
        }
        let eu = tape.gather_rows(params.var("emb.user"), &graph.active_users)?;
        let ei = tape.gather_rows(params.var("emb.item"), &graph.active_items)?;
        let x0 = tape.concat_rows(&[eu, ei])?;
        let (xu, xi) = self.slice_representation(tape, params, graph, x0, pass)?;
        let hu = tape.scatter_rows(zeros_u, &graph.active_users, xu)?;
        let hi = tape.scatter_rows(zeros_i, &graph.active_items, xi)?;
        Ok(SliceStates { user: vec![hu], item: vec![hi], per_slice: false })
    }

    fn forward_sliced(&self, tape: &mut Tape, params: &BoundParams, graphs: &[SliceGraph], pass: &mut Pass) -> Result<SliceStates> {
        let d = self.config.dim;
        let (m, n) = (self.num_users, self.num_items);
        let emb = [params.var("emb.user"), params.var("emb.item")];
        let sizes = [m, n];
        let mut state = [tape.constant(Tensor::zeros(m, d)), tape.constant(Tensor::zeros(n, d))];
        // Running sums and counts, used when the cross-slice GRU is off.
        let mut sums = state;
        let mut counts = [vec![0usize; m], vec![0usize; n]];
        let mut seen = [vec![false; m], vec![false; n]];
        let mut out = SliceStates { user: Vec::new(), item: Vec::new(), per_slice: true };
        let gru_rate = self.config.dropout_at(DropoutSite::Gru);

        for graph in graphs {
            if graph.is_empty() {
                out.user.push(state[0]);
                out.item.push(state[1]);
                continue;
            }
            let active = [&graph.active_users, &graph.active_items];
            let mut inputs = [state[0]; 2];
            for k in 0..2 {
                inputs[k] = match self.config.slice_input {
                    SliceInput::Embedding => tape.gather_rows(emb[k], active[k])?,
                    SliceInput::Chained => {
                        // Rows [0, size) of the stacked source are previous
                        // states, rows [size, 2·size) the embeddings.
                        let source = tape.concat_rows(&[state[k], emb[k]])?;
                        let rows: Vec<usize> =
                            active[k].iter().map(|&g| if seen[k][g] { g } else { sizes[k] + g }).collect();
                        tape.gather_rows(source, &rows)?
                    }
                };
            }
            let x0 = tape.concat_rows(&inputs)?;
            let (xu, xi) = self.slice_representation(tape, params, graph, x0, pass)?;
            let fused = [xu, xi];
            for (k, side) in [Side::User, Side::Item].into_iter().enumerate() {
                if self.config.slice_rnn {
                    let prev = tape.gather_rows(state[k], active[k])?;
                    let h = self.cross_gru(side).step(tape, params, fused[k], prev)?;
                    let h = tape.dropout(h, gru_rate, pass.training, pass.rng)?;
                    state[k] = tape.scatter_rows(state[k], active[k], h)?;
                } else {
                    let prev = tape.gather_rows(sums[k], active[k])?;
                    let total = tape.add(prev, fused[k])?;
                    sums[k] = tape.scatter_rows(sums[k], active[k], total)?;
                    for &g in active[k] {
                        counts[k][g] += 1;
                    }
                    let inv: Vec<f64> = counts[k].iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
                    state[k] = tape.row_scale(sums[k], inv)?;
                }
                for &g in active[k] {
                    seen[k][g] = true;
                }
            }
            out.user.push(state[0]);
            out.item.push(state[1]);
        }
        Ok(out)
    }

    /// Interaction probabilities for `(users[k], items[k])`, as an n×1 column.
    pub fn predict(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        states: &SliceStates,
        users: &[usize],
        items: &[usize],
        pass: &mut Pass,
    ) -> Result<Var> {
        if users.len() != items.len() || users.is_empty() {
            return Err(contract(format!("{} users vs {} items", users.len(), items.len())));
        }
        if let Some(&u) = users.iter().find(|&&u| u >= self.num_users) {
            return Err(contract(format!("user {u} out of range ({} users)", self.num_users)));
        }
        if let Some(&i) = items.iter().find(|&&i| i >= self.num_items) {
            return Err(contract(format!("item {i} out of range ({} items)", self.num_items)));
        }
        let mut parts = Vec::with_capacity(4);
        if self.config.sides != SideMode::ItemOnly {
            parts.push(tape.gather_rows(states.final_user(), users)?);
        }
        if self.config.sides != SideMode::UserOnly {
            parts.push(tape.gather_rows(states.final_item(), items)?);
        }
        if self.config.concat_id {
            parts.push(tape.gather_rows(params.var("emb.user"), users)?);
            parts.push(tape.gather_rows(params.var("emb.item"), items)?);
        }
        let mut x = tape.concat_cols(&parts)?;
        let rate = self.config.dropout_at(DropoutSite::Mlp);
        for k in 0..3 {
            let z = tape.matmul(x, params.var(&format!("mlp.w{k}")))?;
            x = tape.add_bias(z, params.var(&format!("mlp.b{k}")))?;
            if k < 2 {
                x = tape.relu(x);
                x = tape.dropout(x, rate, pass.training, pass.rng)?;
            }
        }
        Ok(tape.sigmoid(x))
    }
}
