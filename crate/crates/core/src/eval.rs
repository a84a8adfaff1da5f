//! All-ranking top-K evaluation (Recall@K, NDCG@K) and score-difference
//! export.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, Split};
use crate::error::{RearmError, Result};
use crate::tape::sigmoid;

/// Inner-product score.
pub fn predict(user: ArrayView1<f64>, item: ArrayView1<f64>) -> Result<f64> {
    if user.len() != item.len() {
        return Err(RearmError::shape(
            "predict",
            format!("user width {} vs item width {}", user.len(), item.len()),
        ));
    }
    Ok(user.dot(&item))
}

fn by_score_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top `k` of `scores` excluding the sorted `mask`; ties go to the smaller
/// index.
pub fn top_k_from_scores(scores: ArrayView1<f64>, mask: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut cand: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.binary_search(i).is_err())
        .map(|(i, &s)| (s, i))
        .collect();
    if k > cand.len() {
        return Err(RearmError::Data(format!(
            "cannot rank {k} items: only {} unmasked candidates",
            cand.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_score_then_index);
        cand.truncate(k);
    }
    cand.sort_by(by_score_then_index);
    Ok(cand.into_iter().map(|(_, i)| i).collect())
}

/// Scores every item against `user` and returns the `k` best unmasked.
pub fn rank_items(user: ArrayView1<f64>, items: ArrayView2<f64>, mask: &[usize], k: usize) -> Result<Vec<usize>> {
    if user.len() != items.ncols() {
        return Err(RearmError::shape(
            "rank_items",
            format!("user width {} vs item width {}", user.len(), items.ncols()),
        ));
    }
    let mut mask = mask.to_vec();
    mask.sort_unstable();
    mask.dedup();
    top_k_from_scores(items.dot(&user).view(), &mask, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAtK {
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub n_users: usize,
    pub metrics: Vec<MetricAtK>,
}

#[derive(Serialize)]
struct ReportRow {
    split: Split,
    #[serde(rename = "K")]
    k: usize,
    recall: f64,
    ndcg: f64,
    n_users: usize,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&MetricAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map(|m| m.recall).unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map(|m| m.ndcg).unwrap_or(f64::NAN)
    }

    /// JSON array of `{split, K, recall, ndcg, n_users}` objects.
    pub fn to_json(&self) -> String {
        let rows: Vec<ReportRow> = self
            .metrics
            .iter()
            .map(|m| ReportRow {
                split: self.split,
                k: m.k,
                recall: m.recall,
                ndcg: m.ndcg,
                n_users: self.n_users,
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("report serializes")
    }
}

/// Per-user `(recall, ndcg)` at each K.
fn user_metrics(ranked: &[usize], truth: &[usize], ks: &[usize]) -> Vec<(f64, f64)> {
    ks.iter()
        .map(|&k| {
            let mut hits = 0usize;
            let mut dcg = 0.0;
            for (pos, item) in ranked.iter().take(k).enumerate() {
                if truth.contains(item) {
                    hits += 1;
                    dcg += 1.0 / ((pos + 2) as f64).log2();
                }
            }
            let ideal: f64 = (0..k.min(truth.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
            (hits as f64 / truth.len() as f64, if ideal > 0.0 { dcg / ideal } else { 0.0 })
        })
        .collect()
}

/// Averages Recall@K and NDCG@K over users whose ground truth is
/// non-empty. `ranked[u]` must hold at least `max(ks)` items when the
/// user is evaluated.
pub fn compute_metrics(ranked: &[Vec<usize>], truth: &[Vec<usize>], ks: &[usize], split: Split) -> EvalReport {
    let mut sums = vec![(0.0, 0.0); ks.len()];
    let mut n = 0usize;
    for (r, t) in ranked.iter().zip(truth) {
        if t.is_empty() {
            continue;
        }
        n += 1;
        for (acc, (rec, nd)) in sums.iter_mut().zip(user_metrics(r, t, ks)) {
            acc.0 += rec;
            acc.1 += nd;
        }
    }
    let metrics = ks
        .iter()
        .zip(sums)
        .map(|(&k, (rec, nd))| MetricAtK {
            k,
            recall: if n > 0 { rec / n as f64 } else { 0.0 },
            ndcg: if n > 0 { nd / n as f64 } else { 0.0 },
        })
        .collect();
    EvalReport {
        split,
        n_users: n,
        metrics,
    }
}

/// Items hidden from ranking for `split`: train pairs for validation,
/// train and validation pairs for test.
pub fn evaluation_masks(ds: &InteractionDataset, split: Split) -> Vec<Vec<usize>> {
    let mut masks = ds.train_adjacency.clone();
    if split == Split::Test {
        for &(u, i) in &ds.val {
            masks[u].push(i);
        }
        for m in &mut masks {
            m.sort_unstable();
        }
    }
    masks
}

const USER_CHUNK: usize = 256;

/// All-ranking evaluation of final user/item representations.
pub fn evaluate(
    users: ArrayView2<f64>,
    items: ArrayView2<f64>,
    ds: &InteractionDataset,
    split: Split,
    ks: &[usize],
) -> Result<EvalReport> {
    if users.ncols() != items.ncols() || users.nrows() != ds.n_users || items.nrows() != ds.n_items {
        return Err(RearmError::shape(
            "evaluation",
            format!("users {:?}, items {:?}", users.dim(), items.dim()),
        ));
    }
    let truth = ds.split_adjacency(split);
    let masks = evaluation_masks(ds, split);
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let starts: Vec<usize> = (0..ds.n_users).step_by(USER_CHUNK).collect();
    let ranked: Result<Vec<Vec<Vec<usize>>>> = starts
        .into_par_iter()
        .map(|start| {
            let end = (start + USER_CHUNK).min(ds.n_users);
            let scores = users.slice(s![start..end, ..]).dot(&items.t());
            (start..end)
                .map(|u| {
                    if truth[u].is_empty() {
                        return Ok(Vec::new());
                    }
                    let k = k_max.min(ds.n_items - masks[u].len());
                    top_k_from_scores(scores.row(u - start), &masks[u], k)
                })
                .collect()
        })
        .collect();
    let ranked: Vec<Vec<usize>> = ranked?.into_iter().flatten().collect();
    Ok(compute_metrics(&ranked, &truth, ks, split))
}

/// `σ(score_b) − σ(score_a)` over a user × item subset.
pub fn score_difference_matrix(
    a: (ArrayView2<f64>, ArrayView2<f64>),
    b: (ArrayView2<f64>, ArrayView2<f64>),
    users: &[usize],
    items: &[usize],
) -> Result<Array2<f64>> {
    let (ua, ia) = a;
    let (ub, ib) = b;
    if ua.dim() != ub.dim() || ia.dim() != ib.dim() {
        return Err(RearmError::shape("score difference", "parameter sets come from different datasets"));
    }
    if let Some(&u) = users.iter().find(|&&u| u >= ua.nrows()) {
        return Err(RearmError::Data(format!("user index {u} out of range ({})", ua.nrows())));
    }
    if let Some(&i) = items.iter().find(|&&i| i >= ia.nrows()) {
        return Err(RearmError::Data(format!("item index {i} out of range ({})", ia.nrows())));
    }
    Ok(Array2::from_shape_fn((users.len(), items.len()), |(r, c)| {
        let (u, i) = (users[r], items[c]);
        sigmoid(ub.row(u).dot(&ib.row(i))) - sigmoid(ua.row(u).dot(&ia.row(i)))
    }))
}

/// TSV with an item-index header row and a user-index first column.
pub fn difference_tsv(m: &Array2<f64>, users: &[usize], items: &[usize]) -> String {
    let mut out = String::from("user\\item");
    for i in items {
        let _ = write!(out, "\t{i}");
    }
    out.push('\n');
    for (r, u) in users.iter().enumerate() {
        let _ = write!(out, "{u}");
        for c in 0..items.len() {
            let _ = write!(out, "\t{:.8}", m[[r, c]]);
        }
        out.push('\n');
    }
    out
}
