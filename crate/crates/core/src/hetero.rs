//! LightGCN-style propagation over the user–item interaction graph.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::dataset::InteractionDataset;
use crate::error::{RearmError, Result};
use crate::graph::{GraphKind, SparseGraph};
use crate::tape::LinearOperator;

/// Symmetrically normalised bipartite adjacency stored as one square graph
/// over `n_users + n_items` nodes (item `i` is node `n_users + i`).
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    pub n_users: usize,
    pub n_items: usize,
    graph: SparseGraph,
}

impl BipartiteGraph {
    pub fn from_graph(n_users: usize, n_items: usize, graph: SparseGraph) -> Result<Self> {
        if graph.n() != n_users + n_items {
            return Err(RearmError::shape(
                "bipartite graph",
                format!("{} nodes for {n_users} users + {n_items} items", graph.n()),
            ));
        }
        Ok(BipartiteGraph {
            n_users,
            n_items,
            graph: graph.with_kind(GraphKind::Bipartite),
        })
    }

    pub fn graph(&self) -> &SparseGraph {
        &self.graph
    }

    /// `λ` on edge `(u, i)`, if the pair is a train interaction.
    pub fn weight(&self, user: usize, item: usize) -> Option<f32> {
        self.graph.weight(user, self.n_users + item)
    }
}

/// Per-edge weight `1 / (√deg(u) · √deg(i))` over train degrees.
pub fn build_bipartite(ds: &InteractionDataset) -> Result<BipartiteGraph> {
    if ds.train.is_empty() {
        return Err(RearmError::Data("train split is empty".into()));
    }
    let n = ds.n_users + ds.n_items;
    let mut deg = vec![0usize; n];
    for &(u, i) in &ds.train {
        deg[u] += 1;
        deg[ds.n_users + i] += 1;
    }
    let mut rows = vec![Vec::new(); n];
    for &(u, i) in &ds.train {
        let item_node = ds.n_users + i;
        let w = 1.0 / ((deg[u] as f64).sqrt() * (deg[item_node] as f64).sqrt());
        rows[u].push((item_node, w));
        rows[item_node].push((u, w));
    }
    let graph = SparseGraph::from_rows(n, rows, GraphKind::Bipartite)?;
    BipartiteGraph::from_graph(ds.n_users, ds.n_items, graph)
}

fn layer_average(g: &SparseGraph, x: ArrayView2<f64>, layers: usize) -> Array2<f64> {
    let mut acc = x.to_owned();
    let mut h = x.to_owned();
    for _ in 0..layers {
        h = g.spmm(h.view());
        acc += &h;
    }
    acc / (layers + 1) as f64
}

/// Alternating user/item aggregation for `layers` rounds; returns the mean
/// of layers `0..=layers` for users and items.
pub fn propagate_bipartite(
    g: &BipartiteGraph,
    users: ArrayView2<f64>,
    items: ArrayView2<f64>,
    layers: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if users.nrows() != g.n_users || items.nrows() != g.n_items || users.ncols() != items.ncols() {
        return Err(RearmError::shape(
            "bipartite propagation",
            format!(
                "users {:?} / items {:?} for a {}x{} graph",
                users.dim(),
                items.dim(),
                g.n_users,
                g.n_items
            ),
        ));
    }
    let stacked = ndarray::concatenate(Axis(0), &[users, items]).expect("same width");
    let out = layer_average(&g.graph, stacked.view(), layers);
    Ok((
        out.slice(s![..g.n_users, ..]).to_owned(),
        out.slice(s![g.n_users.., ..]).to_owned(),
    ))
}

/// Layer-averaged propagation on stacked `[users; items]` rows. The
/// normalised adjacency is symmetric, so the operator is self-adjoint.
#[derive(Debug, Clone)]
pub struct BipartitePropagator {
    pub graph: Arc<BipartiteGraph>,
    pub layers: usize,
}

impl LinearOperator for BipartitePropagator {
    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        layer_average(&self.graph.graph, x, self.layers)
    }

    fn apply_transpose(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.apply(x)
    }

    fn name(&self) -> &'static str {
        "bipartite"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalisation_formula() {
        // one user with 4 items, each item with 4 users
        let mut train = Vec::new();
        for u in 0..4 {
            for i in 0..4 {
                train.push((u, i));
            }
        }
        let ds = InteractionDataset::from_indexed(4, 4, train, vec![], vec![]).unwrap();
        let g = build_bipartite(&ds).unwrap();
        assert_eq!(g.weight(0, 0), Some(0.25));

        let ds = InteractionDataset::from_indexed(1, 1, vec![(0, 0)], vec![], vec![]).unwrap();
        let g = build_bipartite(&ds).unwrap();
        assert_eq!(g.weight(0, 0), Some(1.0));
        assert_eq!(g.graph().weight(1, 0), Some(1.0));
    }

    #[test]
    fn zero_layers_is_identity() {
        let ds = InteractionDataset::from_indexed(1, 1, vec![(0, 0)], vec![], vec![]).unwrap();
        let g = build_bipartite(&ds).unwrap();
        let (u, i) = propagate_bipartite(&g, array![[1.0, 2.0]].view(), array![[3.0, 5.0]].view(), 0).unwrap();
        assert_eq!(u, array![[1.0, 2.0]]);
        assert_eq!(i, array![[3.0, 5.0]]);
    }

    #[test]
    fn single_edge_one_layer() {
        let ds = InteractionDataset::from_indexed(1, 1, vec![(0, 0)], vec![], vec![]).unwrap();
        let g = build_bipartite(&ds).unwrap();
        let u0 = array![[1.0, 2.0]];
        let i0 = array![[3.0, 5.0]];
        let (u, i) = propagate_bipartite(&g, u0.view(), i0.view(), 1).unwrap();
        assert_eq!(u, array![[2.0, 3.5]]);
        assert_eq!(i, array![[2.0, 3.5]]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let ds = InteractionDataset::from_indexed(1, 1, vec![(0, 0)], vec![], vec![]).unwrap();
        let g = build_bipartite(&ds).unwrap();
        assert!(propagate_bipartite(&g, array![[1.0]].view(), array![[1.0, 2.0]].view(), 1).is_err());
    }

    #[test]
    fn cold_item_is_scaled_input_not_nan() {
        // item 1 has no train users
        let ds = InteractionDataset::from_indexed(1, 2, vec![(0, 0)], vec![], vec![(0, 1)]).unwrap();
        let g = build_bipartite(&ds).unwrap();
        let (_, i) = propagate_bipartite(&g, array![[1.0]].view(), array![[1.0], [6.0]].view(), 2).unwrap();
        assert_eq!(i[[1, 0]], 2.0);
    }
}
