//! Forward assembly: homograph → item attention → bipartite propagation →
//! refinement → `u* = share ‖ uni`.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2};

use crate::dataset::{InteractionDataset, Modality, ModalFeatures};
use crate::error::{RearmError, Result};
use crate::fusion::{item_attention_vars, AttentionOptions, DropoutSeed, QkvVars};
use crate::hetero::{build_bipartite, BipartiteGraph, BipartitePropagator};
use crate::homograph::{propagated_ones, HomographPropagator, Homographs, Side};
use crate::refine::{
    fuse_unique_vars, infonce_vars, meta_shared_vars, orthogonal_vars, MetaLearnerVars, MetaVars,
};
use crate::tape::{LinearOperator, ParamId, Tape, Var};

use super::params::{side_name, ParameterStore, ATTENTION_BLOCKS, MODALITY_NAMES};
use super::{Ablation, HyperParams, Triplet};

/// Fixed inputs of the forward pass: propagation operators and the
/// homograph-propagated raw features. Projection is affine and
/// propagation linear, so `P(X·Wᵀ + 1·bᵀ) = (P·X)·Wᵀ + (P·1)·bᵀ` and the
/// propagated raw features are computed once.
#[derive(Clone)]
pub struct ModelInputs {
    pub n_users: usize,
    pub n_items: usize,
    user_hom: Option<Arc<HomographPropagator>>,
    item_hom: Option<Arc<HomographPropagator>>,
    bipartite: Arc<BipartitePropagator>,
    user_feats: [Arc<Array2<f64>>; 2],
    item_feats: [Arc<Array2<f64>>; 2],
    user_ones: Array2<f64>,
    item_ones: Array2<f64>,
}

fn side_inputs(
    graphs: &Homographs,
    side: Side,
    alpha_co: f64,
    layers: usize,
    skip: bool,
    raw: [&Array2<f64>; 2],
) -> Result<(Option<Arc<HomographPropagator>>, [Arc<Array2<f64>>; 2], Array2<f64>)> {
    let n = raw[0].nrows();
    if skip || layers == 0 {
        return Ok((None, raw.map(|m| Arc::new(m.clone())), Array2::ones((n, 1))));
    }
    let op = HomographPropagator {
        graph: Arc::new(graphs.fused(side, alpha_co)?),
        layers,
    };
    if op.graph.n() != n {
        return Err(RearmError::shape(
            "homograph",
            format!("{} graph has {} nodes for {n} rows", side_name(side), op.graph.n()),
        ));
    }
    let feats = raw.map(|m| Arc::new(op.apply(m.view())));
    let ones = propagated_ones(&op);
    Ok((Some(Arc::new(op)), feats, ones))
}

impl ModelInputs {
    /// `hp` must already carry the ablation's α overrides (see
    /// [`Ablation::apply`]).
    pub fn prepare(
        graphs: &Homographs,
        bipartite: Arc<BipartiteGraph>,
        features: &[ModalFeatures],
        hp: &HyperParams,
        ablation: &Ablation,
    ) -> Result<Self> {
        if features.len() != 2 || features.iter().zip(Modality::ALL).any(|(f, m)| f.modality != m) {
            return Err(RearmError::Data("expected visual then textual features".into()));
        }
        let (n_users, n_items) = (bipartite.n_users, bipartite.n_items);
        for f in features {
            if f.item_matrix.nrows() != n_items || f.user_matrix.nrows() != n_users {
                return Err(RearmError::shape(
                    "features",
                    format!(
                        "{} features {:?}/{:?} for {n_users} users, {n_items} items",
                        f.modality.as_str(),
                        f.user_matrix.dim(),
                        f.item_matrix.dim()
                    ),
                ));
            }
        }
        let layers = hp.homograph.layers;
        let (user_hom, user_feats, user_ones) = side_inputs(
            graphs,
            Side::User,
            hp.homograph.alpha_co_user,
            layers,
            ablation.skip_user_hom,
            [&features[0].user_matrix, &features[1].user_matrix],
        )?;
        let (item_hom, item_feats, item_ones) = side_inputs(
            graphs,
            Side::Item,
            hp.homograph.alpha_co_item,
            layers,
            ablation.skip_item_hom,
            [&features[0].item_matrix, &features[1].item_matrix],
        )?;
        Ok(ModelInputs {
            n_users,
            n_items,
            user_hom,
            item_hom,
            bipartite: Arc::new(BipartitePropagator {
                graph: bipartite,
                layers: hp.layers,
            }),
            user_feats,
            item_feats,
            user_ones,
            item_ones,
        })
    }

    /// Builds the homographs and bipartite graph from scratch, then
    /// [`ModelInputs::prepare`].
    pub fn build(
        ds: &InteractionDataset,
        features: &[ModalFeatures],
        hp: &HyperParams,
        ablation: &Ablation,
    ) -> Result<Self> {
        let users: Vec<_> = features.iter().map(|f| f.user_matrix.view()).collect();
        let items: Vec<_> = features.iter().map(|f| f.item_matrix.view()).collect();
        let graphs = Homographs::build(ds, &users, &items, &hp.homograph)?;
        let bipartite = Arc::new(build_bipartite(ds)?);
        ModelInputs::prepare(&graphs, bipartite, features, hp, ablation)
    }

    pub fn modal_dims(&self) -> [usize; 2] {
        [self.item_feats[0].ncols(), self.item_feats[1].ncols()]
    }
}

/// Final-layer intermediates of one eval-mode or train-mode pass over all
/// users and items.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub user_id: Array2<f64>,
    pub user_visual: Array2<f64>,
    pub user_textual: Array2<f64>,
    pub item_id: Array2<f64>,
    pub item_visual: Array2<f64>,
    pub item_textual: Array2<f64>,
    pub user_share: Array2<f64>,
    pub item_share: Array2<f64>,
    pub user_uni: Array2<f64>,
    pub item_uni: Array2<f64>,
    pub user_star: Array2<f64>,
    pub item_star: Array2<f64>,
}

/// Tape variables for parameters, created on first use.
pub(crate) struct ParamVars<'a> {
    store: &'a ParameterStore,
    vars: BTreeMap<ParamId, Var>,
}

impl<'a> ParamVars<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        ParamVars {
            store,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, t: &mut Tape, name: &str) -> Var {
        let id = self.store.id(name);
        *self
            .vars
            .entry(id)
            .or_insert_with(|| t.param(id, self.store.value(id).clone()))
    }

    /// Every tensor in the store, in manifest order.
    pub fn all(&mut self, t: &mut Tape) -> Vec<Var> {
        let names: Vec<String> = self.store.tensors().iter().map(|x| x.name.clone()).collect();
        names.iter().map(|n| self.get(t, n)).collect()
    }

    fn qkv(&mut self, t: &mut Tape, block: &str) -> QkvVars {
        QkvVars {
            query: self.get(t, &format!("attn.{block}.query")),
            key: self.get(t, &format!("attn.{block}.key")),
            value: self.get(t, &format!("attn.{block}.value")),
        }
    }

    fn learner(&mut self, t: &mut Tape, prefix: &str) -> MetaLearnerVars {
        MetaLearnerVars {
            w1: self.get(t, &format!("{prefix}.w1")),
            b1: self.get(t, &format!("{prefix}.b1")),
            slope: self.get(t, &format!("{prefix}.slope")),
            w2: self.get(t, &format!("{prefix}.w2")),
            b2: self.get(t, &format!("{prefix}.b2")),
        }
    }

    fn meta(&mut self, t: &mut Tape, side: Side) -> MetaVars {
        let s = side_name(side);
        MetaVars {
            share_w: self.get(t, &format!("meta.{s}.share_w")),
            share_b: self.get(t, &format!("meta.{s}.share_b")),
            g1: self.learner(t, &format!("meta.{s}.g1")),
            g2: self.learner(t, &format!("meta.{s}.g2")),
            out_slope: self.get(t, &format!("meta.{s}.out_slope")),
            rank: self.store.rank(),
        }
    }
}

/// Named stage outputs, checked in order when a loss turns non-finite.
pub(crate) type Stages = Vec<(&'static str, Var)>;

fn project(
    t: &mut Tape,
    pv: &mut ParamVars,
    feats: &Arc<Array2<f64>>,
    ones: &Array2<f64>,
    modality: usize,
) -> Var {
    let m = MODALITY_NAMES[modality];
    let w = pv.get(t, &format!("proj.{m}.w"));
    let b = pv.get(t, &format!("proj.{m}.b"));
    let xw = t.shared_matmul_nt(Arc::clone(feats), w);
    let ones = t.constant(ones.clone());
    let bias = t.matmul(ones, b);
    t.add(xw, bias)
}

/// Stacked `[users; items]` rows of `id ‖ visual ‖ textual` after bipartite
/// propagation.
pub(crate) fn encode(
    t: &mut Tape,
    pv: &mut ParamVars,
    inputs: &ModelInputs,
    hp: &HyperParams,
    dropout: Option<DropoutSeed>,
    stages: &mut Stages,
) -> Result<Var> {
    let d = pv.store.dim();
    if pv.store.n_users() != inputs.n_users || pv.store.n_items() != inputs.n_items {
        return Err(RearmError::shape(
            "embeddings",
            format!(
                "tables {}x{} / {}x{} for {} users, {} items",
                pv.store.n_users(),
                d,
                pv.store.n_items(),
                d,
                inputs.n_users,
                inputs.n_items
            ),
        ));
    }
    if pv.store.modal_dims() != inputs.modal_dims() {
        return Err(RearmError::shape(
            "projection",
            format!("weights expect {:?}, features are {:?}", pv.store.modal_dims(), inputs.modal_dims()),
        ));
    }

    let user_emb = pv.get(t, "user_emb");
    let item_emb = pv.get(t, "item_emb");
    let user_id = match &inputs.user_hom {
        Some(op) => t.linear(op.clone(), user_emb),
        None => user_emb,
    };
    let item_id = match &inputs.item_hom {
        Some(op) => t.linear(op.clone(), item_emb),
        None => item_emb,
    };
    let uv = project(t, pv, &inputs.user_feats[0], &inputs.user_ones, 0);
    let ut = project(t, pv, &inputs.user_feats[1], &inputs.user_ones, 1);
    let iv = project(t, pv, &inputs.item_feats[0], &inputs.item_ones, 0);
    let it = project(t, pv, &inputs.item_feats[1], &inputs.item_ones, 1);
    stages.extend([("user homograph", user_id), ("item homograph", item_id), ("item visual projection", iv), ("item textual projection", it)]);

    let blocks = ATTENTION_BLOCKS.map(|b| pv.qkv(t, b));
    let opts = AttentionOptions {
        dropout_rate: hp.dropout,
        softmax: hp.softmax,
        dropout,
    };
    let (iv, it) = item_attention_vars(t, iv, it, &blocks, &opts);
    stages.extend([("item visual attention", iv), ("item textual attention", it)]);

    let users = t.concat_cols(&[user_id, uv, ut]);
    let items = t.concat_cols(&[item_id, iv, it]);
    let stacked = t.concat_rows(&[users, items]);
    let out = t.linear(inputs.bipartite.clone(), stacked);
    stages.push(("bipartite propagation", out));
    Ok(out)
}

/// `(share, uni, star)` for rows of `id ‖ visual ‖ textual`.
pub(crate) fn refine_rows(
    t: &mut Tape,
    pv: &mut ParamVars,
    rows: Var,
    side: Side,
    ablation: &Ablation,
) -> (Var, Var, Var) {
    let d = pv.store.dim();
    let id = t.slice_cols(rows, 0, d);
    let v = t.slice_cols(rows, d, 2 * d);
    let w = t.slice_cols(rows, 2 * d, 3 * d);
    let share = if ablation.no_meta {
        id
    } else {
        let meta = pv.meta(t, side);
        meta_shared_vars(t, v, w, id, &meta)
    };
    let slope = pv.get(t, &format!("uni_slope.{}", side_name(side)));
    let uni = fuse_unique_vars(t, v, w, id, slope);
    let star = t.concat_cols(&[share, uni]);
    (share, uni, star)
}

pub(crate) struct LossVars {
    pub total: Var,
    pub bpr: Var,
    pub cl: Var,
    pub ort: Var,
    pub reg: Var,
    pub stages: Stages,
}

fn unique_sorted(xs: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = xs.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Builds the joint objective for one batch of triplets.
pub(crate) fn build_loss(
    t: &mut Tape,
    pv: &mut ParamVars,
    inputs: &ModelInputs,
    hp: &HyperParams,
    ablation: &Ablation,
    batch: &[Triplet],
    dropout: Option<DropoutSeed>,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(RearmError::Data("empty training batch".into()));
    }
    let mut stages = Stages::new();
    let h = encode(t, pv, inputs, hp, dropout, &mut stages)?;
    let d = pv.store.dim();
    let n = inputs.n_users;
    let b = batch.len();

    let users: Vec<usize> = batch.iter().map(|x| x.user).collect();
    let uniq_users = unique_sorted(users.iter().copied());
    let uniq_pos = unique_sorted(batch.iter().map(|x| n + x.pos));
    let uniq_items = unique_sorted(batch.iter().flat_map(|x| [n + x.pos, n + x.neg]));
    // Refinement is row-wise, so it runs once per distinct node.
    let urows = t.gather_rows(h, &uniq_users);
    let irows = t.gather_rows(h, &uniq_items);
    let (_, _, ustar) = refine_rows(t, pv, urows, Side::User, ablation);
    let (_, _, istar) = refine_rows(t, pv, irows, Side::Item, ablation);
    stages.push(("user representation", ustar));
    stages.push(("item representation", istar));
    let position = |rows: &[usize], x: usize| rows.binary_search(&x).expect("row present");
    let upos: Vec<usize> = users.iter().map(|&u| position(&uniq_users, u)).collect();
    let ipos: Vec<usize> = batch
        .iter()
        .map(|x| position(&uniq_items, n + x.pos))
        .chain(batch.iter().map(|x| position(&uniq_items, n + x.neg)))
        .collect();
    let ustar = t.gather_rows(ustar, &upos);
    let istar = t.gather_rows(istar, &ipos);
    let pos = t.slice_rows(istar, 0, b);
    let neg = t.slice_rows(istar, b, 2 * b);
    let ps = t.row_dot(ustar, pos);
    let ns = t.row_dot(ustar, neg);
    let diff = t.sub(ps, ns);
    let bpr = t.softplus_neg_mean(diff);

    let mut cl_parts = Vec::new();
    let mut ort_parts = Vec::new();
    for rows in [&uniq_users, &uniq_pos] {
        let g = t.gather_rows(h, rows);
        let v = t.slice_cols(g, d, 2 * d);
        let w = t.slice_cols(g, 2 * d, 3 * d);
        cl_parts.push(infonce_vars(t, v, w, hp.refine.tau));
        ort_parts.push(orthogonal_vars(t, v, w));
    }
    let cl = t.add(cl_parts[0], cl_parts[1]);
    let ort = t.add(ort_parts[0], ort_parts[1]);

    let params = pv.all(t);
    let mut sq = t.sum_squares(params[0]);
    for &p in &params[1..] {
        let s = t.sum_squares(p);
        sq = t.add(sq, s);
    }
    let reg = t.scale(sq, hp.refine.lambda_p / b as f64);

    let wcl = t.scale(cl, hp.refine.lambda_cl);
    let wort = t.scale(ort, hp.refine.lambda_ort);
    let total = t.add(bpr, wcl);
    let total = t.add(total, wort);
    let total = t.add(total, reg);
    Ok(LossVars {
        total,
        bpr,
        cl,
        ort,
        reg,
        stages,
    })
}

/// Full pass over every user and item. `dropout = None` is evaluation mode.
pub fn forward(
    store: &ParameterStore,
    inputs: &ModelInputs,
    hp: &HyperParams,
    ablation: &Ablation,
    dropout: Option<DropoutSeed>,
) -> Result<ForwardCache> {
    let mut t = Tape::new();
    let mut pv = ParamVars::new(store);
    let mut stages = Stages::new();
    let h = encode(&mut t, &mut pv, inputs, hp, dropout, &mut stages)?;
    let n = inputs.n_users;
    let total = n + inputs.n_items;
    let urows = t.slice_rows(h, 0, n);
    let irows = t.slice_rows(h, n, total);
    let (ushare, uuni, ustar) = refine_rows(&mut t, &mut pv, urows, Side::User, ablation);
    let (ishare, iuni, istar) = refine_rows(&mut t, &mut pv, irows, Side::Item, ablation);
    let d = store.dim();
    let hv = t.value(h);
    let part = |r0: usize, r1: usize, c: usize| hv.slice(s![r0..r1, c * d..(c + 1) * d]).to_owned();
    Ok(ForwardCache {
        user_id: part(0, n, 0),
        user_visual: part(0, n, 1),
        user_textual: part(0, n, 2),
        item_id: part(n, total, 0),
        item_visual: part(n, total, 1),
        item_textual: part(n, total, 2),
        user_share: t.value(ushare).clone(),
        item_share: t.value(ishare).clone(),
        user_uni: t.value(uuni).clone(),
        item_uni: t.value(iuni).clone(),
        user_star: t.value(ustar).clone(),
        item_star: t.value(istar).clone(),
    })
}
