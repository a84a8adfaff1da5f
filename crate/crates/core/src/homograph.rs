//! User/item co-occurrence and semantic graphs, their fusion, and
//! homogeneous message passing.
//!
//! Graphs are built once from the train split and the raw modality
//! features. No graph contains self-loops.

use std::cmp::Ordering;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::error::{RearmError, Result};
use crate::graph::{GraphKind, SparseGraph};
use crate::tape::LinearOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographConfig {
    pub top_k_co: usize,
    pub top_k_sem: usize,
    /// Modality weights, in `Modality::ALL` order.
    pub alpha_modal_user: Vec<f64>,
    pub alpha_modal_item: Vec<f64>,
    pub alpha_co_user: f64,
    pub alpha_co_item: f64,
    pub layers: usize,
}

impl Default for HomographConfig {
    fn default() -> Self {
        HomographConfig {
            top_k_co: 10,
            top_k_sem: 10,
            alpha_modal_user: vec![0.5, 0.5],
            alpha_modal_item: vec![0.5, 0.5],
            alpha_co_user: 0.5,
            alpha_co_item: 0.5,
            layers: 1,
        }
    }
}

impl HomographConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k_co == 0 || self.top_k_sem == 0 {
            return Err(RearmError::Config("top_k must be >= 1".into()));
        }
        for (side, alphas) in [("user", &self.alpha_modal_user), ("item", &self.alpha_modal_item)] {
            let sum: f64 = alphas.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || alphas.iter().any(|a| *a < 0.0) {
                return Err(RearmError::Config(format!(
                    "{side} modality weights {alphas:?} must be non-negative and sum to 1"
                )));
            }
        }
        for (side, a) in [("user", self.alpha_co_user), ("item", self.alpha_co_item)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(RearmError::Config(format!("alpha_co_{side} = {a} not in [0,1]")));
            }
        }
        if self.layers > 4 {
            return Err(RearmError::Config(format!(
                "homograph layers = {} (supported 0..=4)",
                self.layers
            )));
        }
        Ok(())
    }
}

fn by_weight_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Counts co-interactors over the train split, keeps each node's `top_k`
/// neighbours and softmax-normalises the retained counts per row.
pub fn build_cooccurrence_graph(ds: &InteractionDataset, side: Side, top_k: usize) -> Result<SparseGraph> {
    if top_k == 0 {
        return Err(RearmError::Config("co-occurrence top_k must be >= 1".into()));
    }
    if ds.train.is_empty() {
        return Err(RearmError::Data("train split is empty".into()));
    }
    let (forward, backward) = match side {
        Side::Item => (ds.train_item_adjacency(), ds.train_adjacency.clone()),
        Side::User => (ds.train_adjacency.clone(), ds.train_item_adjacency()),
    };
    let n = forward.len();
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0u32; n], Vec::new()),
            |(counts, touched), node| {
                for &mid in &forward[node] {
                    for &other in &backward[mid] {
                        if other == node {
                            continue;
                        }
                        if counts[other] == 0 {
                            touched.push(other);
                        }
                        counts[other] += 1;
                    }
                }
                let mut cand: Vec<(usize, f64)> =
                    touched.iter().map(|&o| (o, counts[o] as f64)).collect();
                for &o in touched.iter() {
                    counts[o] = 0;
                }
                touched.clear();
                cand.sort_by(by_weight_then_index);
                cand.truncate(top_k);
                softmax_weights(&mut cand);
                cand
            },
        )
        .collect();
    SparseGraph::from_rows(n, rows, GraphKind::Cooccurrence)
}

fn softmax_weights(row: &mut [(usize, f64)]) {
    let Some(max) = row.iter().map(|e| e.1).reduce(f64::max) else {
        return;
    };
    let mut total = 0.0;
    for e in row.iter_mut() {
        e.1 = (e.1 - max).exp();
        total += e.1;
    }
    for e in row.iter_mut() {
        e.1 /= total;
    }
}

const SIM_BLOCK: usize = 256;

/// Cosine kNN graph: keep each row's `top_k` most similar other rows
/// (negative similarities clamped to zero and dropped), then normalise
/// symmetrically by the pre-normalisation row sums.
pub fn build_semantic_graph(features: ArrayView2<f64>, top_k: usize) -> Result<SparseGraph> {
    if top_k == 0 {
        return Err(RearmError::Config("semantic top_k must be >= 1".into()));
    }
    let n = features.nrows();
    let mut unit = features.to_owned();
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let unit_t = unit.t();
    let blocks: Vec<usize> = (0..n).step_by(SIM_BLOCK).collect();
    let rows: Vec<Vec<(usize, f64)>> = blocks
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + SIM_BLOCK).min(n);
            let sims = unit.slice(s![start..end, ..]).dot(&unit_t);
            (start..end)
                .map(|r| {
                    let mut cand: Vec<(usize, f64)> = sims
                        .row(r - start)
                        .iter()
                        .enumerate()
                        .filter(|&(c, _)| c != r)
                        .map(|(c, &v)| (c, v.clamp(0.0, 1.0)))
                        .collect();
                    let k = top_k.min(cand.len());
                    if k > 0 && k < cand.len() {
                        cand.select_nth_unstable_by(k - 1, by_weight_then_index);
                    }
                    cand.truncate(k);
                    cand.sort_by(by_weight_then_index);
                    cand.retain(|e| e.1 > 0.0);
                    cand
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let degree: Vec<f64> = rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(r, row)| {
            row.into_iter()
                .filter_map(|(c, w)| {
                    let denom = (degree[r] * degree[c]).sqrt();
                    (denom > 0.0).then(|| (c, w / denom))
                })
                .collect()
        })
        .collect();
    SparseGraph::from_rows(n, rows, GraphKind::Semantic)
}

/// Edge-wise weighted sum over the union of edge sets. Graphs with a zero
/// weight contribute nothing, not even zero-weight edges.
pub fn combine_graphs(graphs: &[&SparseGraph], weights: &[f64], kind: GraphKind) -> Result<SparseGraph> {
    if graphs.len() != weights.len() {
        return Err(RearmError::Config(format!(
            "{} weights for {} graphs",
            weights.len(),
            graphs.len()
        )));
    }
    let n = graphs.first().map(|g| g.n()).unwrap_or(0);
    if graphs.iter().any(|g| g.n() != n) {
        return Err(RearmError::shape("graph fusion", "graphs differ in node count"));
    }
    let rows = (0..n)
        .map(|r| {
            graphs
                .iter()
                .zip(weights)
                .filter(|(_, &a)| a != 0.0)
                .flat_map(|(g, &a)| g.row(r).map(move |(c, w)| (c, a * w as f64)))
                .collect()
        })
        .collect();
    SparseGraph::from_rows(n, rows, kind)
}

/// Fuses per-modality semantic graphs with modality weights.
pub fn fuse_semantic_graphs(graphs: &[SparseGraph], alphas: &[f64]) -> Result<SparseGraph> {
    let refs: Vec<&SparseGraph> = graphs.iter().collect();
    combine_graphs(&refs, alphas, GraphKind::Semantic)
}

/// `alpha_co * co + (1 - alpha_co) * sem`.
pub fn fuse_homograph(co: &SparseGraph, sem: &SparseGraph, alpha_co: f64) -> Result<SparseGraph> {
    if co.n() != sem.n() {
        return Err(RearmError::shape(
            "homograph fusion",
            format!("co-occurrence has {} nodes, semantic {}", co.n(), sem.n()),
        ));
    }
    combine_graphs(&[co, sem], &[alpha_co, 1.0 - alpha_co], GraphKind::Fused)
}

/// `layers` rounds of weighted neighbour summation; isolated nodes keep
/// their features.
pub fn propagate(g: &SparseGraph, h0: ArrayView2<f64>, layers: usize) -> Array2<f64> {
    let mut h = h0.to_owned();
    for _ in 0..layers {
        h = g.spmm_passthrough(h.view());
    }
    h
}

/// Runs [`propagate`] on an `id ‖ visual ‖ textual` matrix and returns the
/// final layer split into its three slices.
pub fn propagate_homograph(
    g: &SparseGraph,
    h0: ArrayView2<f64>,
    layers: usize,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if h0.ncols() % 3 != 0 {
        return Err(RearmError::shape(
            "homograph propagation",
            format!("input width {} is not 3d", h0.ncols()),
        ));
    }
    if h0.nrows() != g.n() {
        return Err(RearmError::shape(
            "homograph propagation",
            format!("{} rows for {} nodes", h0.nrows(), g.n()),
        ));
    }
    let d = h0.ncols() / 3;
    let h = propagate(g, h0, layers);
    Ok((
        h.slice(s![.., ..d]).to_owned(),
        h.slice(s![.., d..2 * d]).to_owned(),
        h.slice(s![.., 2 * d..]).to_owned(),
    ))
}

/// The homogeneous propagation as a fixed linear operator on the tape.
#[derive(Debug, Clone)]
pub struct HomographPropagator {
    pub graph: Arc<SparseGraph>,
    pub layers: usize,
}

impl LinearOperator for HomographPropagator {
    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        propagate(&self.graph, x, self.layers)
    }

    fn apply_transpose(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for _ in 0..self.layers {
            h = self.graph.spmm_passthrough_t(h.view());
        }
        h
    }

    fn name(&self) -> &'static str {
        "homograph"
    }
}

/// The four homogeneous graphs built before training.
#[derive(Debug, Clone)]
pub struct Homographs {
    pub user_co: SparseGraph,
    pub user_sem: SparseGraph,
    pub item_co: SparseGraph,
    pub item_sem: SparseGraph,
}

impl Homographs {
    /// `user_modal` and `item_modal` are the raw per-modality matrices in
    /// `Modality::ALL` order.
    pub fn build(
        ds: &InteractionDataset,
        user_modal: &[ArrayView2<f64>],
        item_modal: &[ArrayView2<f64>],
        cfg: &HomographConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let sem = |mats: &[ArrayView2<f64>], alphas: &[f64]| -> Result<SparseGraph> {
            let per: Result<Vec<SparseGraph>> = mats
                .iter()
                .map(|m| build_semantic_graph(*m, cfg.top_k_sem))
                .collect();
            fuse_semantic_graphs(&per?, alphas)
        };
        Ok(Homographs {
            user_co: build_cooccurrence_graph(ds, Side::User, cfg.top_k_co)?,
            user_sem: sem(user_modal, &cfg.alpha_modal_user)?,
            item_co: build_cooccurrence_graph(ds, Side::Item, cfg.top_k_co)?,
            item_sem: sem(item_modal, &cfg.alpha_modal_item)?,
        })
    }

    pub fn fused(&self, side: Side, alpha_co: f64) -> Result<SparseGraph> {
        match side {
            Side::User => fuse_homograph(&self.user_co, &self.user_sem, alpha_co),
            Side::Item => fuse_homograph(&self.item_co, &self.item_sem, alpha_co),
        }
    }
}

/// Row sums helper used to check softmax rows.
pub fn row_sums(g: &SparseGraph) -> Vec<f64> {
    (0..g.n()).map(|r| g.row_sum(r)).collect()
}

/// Applies the propagation operator to a column of ones; with `P^L` linear
/// this carries a bias term through propagation.
pub fn propagated_ones(op: &HomographPropagator) -> Array2<f64> {
    op.apply(Array2::ones((op.graph.n(), 1)).view())
}
