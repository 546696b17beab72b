//! Per-slice bipartite user-item graphs with symmetrically normalised
//! adjacency `D^{-1/2} A D^{-1/2}`.
//!
//! Local node numbering puts the slice's active users first, in ascending
//! global order, followed by its active items.

use std::io::Write;
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::dataset::SlicedLog;
use crate::error::{Error, Result};
use crate::sparse::Csr;

#[derive(Debug, Clone, PartialEq)]
pub struct SliceGraph {
    pub slice_index: usize,
    /// Global user ids of the slice's active users, ascending.
    pub active_users: Vec<usize>,
    /// Global item ids of the slice's active items, ascending.
    pub active_items: Vec<usize>,
    /// Distinct `(local_user, local_item)` pairs, sorted.
    pub edges: Vec<(usize, usize)>,
    norm_adjacency: Rc<Csr>,
}

impl SliceGraph {
    /// Builds the graph for the distinct pairs in `pairs` (global ids).
    pub fn from_pairs(slice_index: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup();
        let mut active_users: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        active_users.sort_unstable();
        active_users.dedup();
        let mut active_items: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        active_items.sort_unstable();
        active_items.dedup();

        let local = |list: &[usize], g: usize| list.binary_search(&g).expect("active by construction");
        let edges: Vec<(usize, usize)> =
            pairs.iter().map(|&(u, i)| (local(&active_users, u), local(&active_items, i))).collect();

        let mu = active_users.len();
        let n = mu + active_items.len();
        let mut degree = vec![0usize; n];
        for &(u, i) in &edges {
            degree[u] += 1;
            degree[mu + i] += 1;
        }
        let mut triplets = Vec::with_capacity(2 * edges.len());
        for &(u, i) in &edges {
            let w = 1.0 / ((degree[u] * degree[mu + i]) as f64).sqrt();
            triplets.push((u, mu + i, w));
            triplets.push((mu + i, u, w));
        }
        let norm_adjacency = Rc::new(Csr::from_triplets(n, n, triplets).expect("indices in range"));
        Self { slice_index, active_users, active_items, edges, norm_adjacency }
    }

    pub fn num_users(&self) -> usize {
        self.active_users.len()
    }

    pub fn num_items(&self) -> usize {
        self.active_items.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.active_users.len() + self.active_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn norm_adjacency(&self) -> &Csr {
        &self.norm_adjacency
    }

    /// Local row of a global user, if active.
    pub fn local_user(&self, user: usize) -> Option<usize> {
        self.active_users.binary_search(&user).ok()
    }

    /// Local row of a global item (offset past the users), if active.
    pub fn local_item(&self, item: usize) -> Option<usize> {
        self.active_items.binary_search(&item).ok().map(|i| self.num_users() + i)
    }

    /// `D^{-1} A`: each row averages its neighbours, used when propagation is
    /// replaced by plain neighbour mean-pooling.
    pub fn mean_aggregator(&self) -> Csr {
        let mu = self.num_users();
        let n = self.num_nodes();
        let mut degree = vec![0usize; n];
        for &(u, i) in &self.edges {
            degree[u] += 1;
            degree[mu + i] += 1;
        }
        let mut triplets = Vec::with_capacity(2 * self.edges.len());
        for &(u, i) in &self.edges {
            triplets.push((u, mu + i, 1.0 / degree[u] as f64));
            triplets.push((mu + i, u, 1.0 / degree[mu + i] as f64));
        }
        Csr::from_triplets(n, n, triplets).expect("indices in range")
    }

    /// Records `Â · x` on the tape.
    pub fn propagate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.spmm(Rc::clone(&self.norm_adjacency), x, true)
    }
}

/// One graph per slice, in slice order. Empty slices give empty graphs.
pub fn build_slice_graphs(data: &SlicedLog) -> Vec<SliceGraph> {
    (0..data.slice_count)
        .map(|s| SliceGraph::from_pairs(s, data.slice(s).iter().map(|x| (x.user as usize, x.item as usize))))
        .collect()
}

/// Union of the edges of `graphs`, as a single graph.
pub fn union_graph(slice_index: usize, graphs: &[SliceGraph]) -> SliceGraph {
    SliceGraph::from_pairs(
        slice_index,
        graphs.iter().flat_map(|g| g.edges.iter().map(move |&(u, i)| (g.active_users[u], g.active_items[i]))),
    )
}

/// Plain sparse-dense product against the graph's normalised adjacency.
pub fn spmm(graph: &SliceGraph, x: &crate::autodiff::Tensor) -> Result<crate::autodiff::Tensor> {
    if x.rows() != graph.num_nodes() {
        return Err(Error::Dimension(format!("{} feature rows for {} nodes", x.rows(), graph.num_nodes())));
    }
    graph.norm_adjacency.matmul(x)
}

/// Writes `slice<TAB>user<TAB>item<TAB>weight` per edge, global ids.
pub fn write_edge_dump(graphs: &[SliceGraph], mut out: impl Write) -> Result<()> {
    for g in graphs {
        let mu = g.num_users();
        for &(u, i) in &g.edges {
            let w = g.norm_adjacency.get(u, mu + i);
            writeln!(out, "{}\t{}\t{}\t{w}", g.slice_index, g.active_users[u], g.active_items[i])?;
        }
    }
    Ok(())
}
