use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rearm::dataset::{InteractionDataset, Modality, ModalFeatures, Split};
use rearm::eval::rank_items;
use rearm::fusion::{item_attention, project_modality, AttentionOptions};
use rearm::hetero::{build_bipartite, propagate_bipartite};
use rearm::homograph::{propagate, HomographConfig, Homographs, Side};
use rearm::refine::{fuse_unique, meta_shared};
use rearm::synthetic::{generate, SyntheticConfig};
use rearm::train::{
    forward, sample_triplets, Ablation, FitOptions, HyperParams, ModelInputs, ParameterStore, TrainContext,
};

fn fixture() -> (InteractionDataset, Vec<ModalFeatures>) {
    let train = vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 0), (3, 3), (3, 1)];
    let ds = InteractionDataset::from_indexed(4, 4, train, vec![(0, 2)], vec![(1, 3)]).unwrap();
    let visual = ndarray::array![[1.0, 0.2, -0.5], [0.9, 0.1, -0.4], [-0.3, 1.0, 0.2], [-0.2, 0.8, 0.5]];
    let textual = ndarray::array![[0.5, -1.0], [0.4, -0.7], [-1.0, 0.3], [0.2, 0.9]];
    let feats = vec![
        ModalFeatures::new(Modality::Visual, &ds, visual).unwrap(),
        ModalFeatures::new(Modality::Textual, &ds, textual).unwrap(),
    ];
    (ds, feats)
}

fn fixture_hp() -> HyperParams {
    HyperParams {
        dim: 4,
        rank: 2,
        layers: 2,
        batch_size: 4,
        homograph: HomographConfig {
            top_k_co: 2,
            top_k_sem: 2,
            layers: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Recomputes the evaluation-mode pass stage by stage from the public
/// building blocks, projecting before propagating.
fn scripted(ds: &InteractionDataset, feats: &[ModalFeatures], store: &ParameterStore, hp: &HyperParams) -> (Array2<f64>, Array2<f64>) {
    let hc = &hp.homograph;
    let users: Vec<_> = feats.iter().map(|f| f.user_matrix.view()).collect();
    let items: Vec<_> = feats.iter().map(|f| f.item_matrix.view()).collect();
    let graphs = Homographs::build(ds, &users, &items, hc).unwrap();
    let gu = graphs.fused(Side::User, hc.alpha_co_user).unwrap();
    let gi = graphs.fused(Side::Item, hc.alpha_co_item).unwrap();

    let proj = |x: &Array2<f64>, m: usize| project_modality(x.view(), &store.projection(m)).unwrap();
    let u_id = propagate(&gu, store.get("user_emb").view(), hc.layers);
    let u_v = propagate(&gu, proj(&feats[0].user_matrix, 0).view(), hc.layers);
    let u_t = propagate(&gu, proj(&feats[1].user_matrix, 1).view(), hc.layers);
    let i_id = propagate(&gi, store.get("item_emb").view(), hc.layers);
    let i_v = propagate(&gi, proj(&feats[0].item_matrix, 0).view(), hc.layers);
    let i_t = propagate(&gi, proj(&feats[1].item_matrix, 1).view(), hc.layers);
    let (i_v, i_t) = item_attention(i_v.view(), i_t.view(), &store.attention(0.0), &AttentionOptions::eval()).unwrap();

    let bip = build_bipartite(ds).unwrap();
    let part = |u: &Array2<f64>, i: &Array2<f64>| propagate_bipartite(&bip, u.view(), i.view(), hp.layers).unwrap();
    let (u_id, i_id) = part(&u_id, &i_id);
    let (u_v, i_v) = part(&u_v, &i_v);
    let (u_t, i_t) = part(&u_t, &i_t);

    let refine = |id: &Array2<f64>, v: &Array2<f64>, t: &Array2<f64>, side: Side| {
        let share = meta_shared(v.view(), t.view(), id.view(), &store.meta(side)).unwrap();
        let uni = fuse_unique(v.view(), t.view(), id.view(), store.uni_slope(side)).unwrap();
        concatenate(Axis(1), &[share.view(), uni.view()]).unwrap()
    };
    (refine(&u_id, &u_v, &u_t, Side::User), refine(&i_id, &i_v, &i_t, Side::Item))
}

#[test]
fn forward_matches_scripted_oracle() {
    let (ds, feats) = fixture();
    let hp = fixture_hp();
    let ablation = Ablation::default();
    let inputs = ModelInputs::build(&ds, &feats, &hp, &ablation).unwrap();
    let ctx = TrainContext {
        ds: &ds,
        inputs: &inputs,
        hp: &hp,
        ablation,
    };
    let mut store = ctx.init_store().unwrap();
    // move biases and slopes off their initial values
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in ["proj.visual.b", "proj.textual.b", "meta.user.share_b", "meta.item.g1.b2", "uni_slope.item"] {
        store.get_mut(name).mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let cache = forward(&store, &inputs, &hp, &ablation, None).unwrap();
    let (u, i) = scripted(&ds, &feats, &store, &hp);
    assert!(max_abs_diff(&cache.user_star, &u) < 1e-10);
    assert!(max_abs_diff(&cache.item_star, &i) < 1e-10);
}

#[test]
fn representation_width_is_three_d() {
    let (ds, feats) = fixture();
    let hp = HyperParams { dim: 64, ..fixture_hp() };
    let inputs = ModelInputs::build(&ds, &feats, &hp, &Ablation::default()).unwrap();
    let store = ParameterStore::init(
        &rearm::train::StoreShape {
            n_users: 4,
            n_items: 4,
            dim: 64,
            rank: 2,
            modal_dims: inputs.modal_dims(),
        },
        1,
    )
    .unwrap();
    let cache = forward(&store, &inputs, &hp, &Ablation::default(), None).unwrap();
    assert_eq!(cache.user_star.ncols(), 192);
    assert_eq!(cache.item_star.ncols(), 192);
}

#[test]
fn ids_alone_without_graphs_or_features() {
    let (ds, feats) = fixture();
    let zeros: Vec<ModalFeatures> = feats
        .iter()
        .map(|f| ModalFeatures::new(f.modality, &ds, Array2::zeros(f.item_matrix.dim())).unwrap())
        .collect();
    let hp = HyperParams { layers: 0, ..fixture_hp() };
    let ablation = rearm::train::Variant::WoHom.ablation();
    let inputs = ModelInputs::build(&ds, &zeros, &hp, &ablation).unwrap();
    let ctx = TrainContext {
        ds: &ds,
        inputs: &inputs,
        hp: &hp,
        ablation,
    };
    let store = ctx.init_store().unwrap();
    let cache = forward(&store, &inputs, &hp, &ablation, None).unwrap();
    let emb = store.get("user_emb");
    assert_eq!(&cache.user_id, emb);
    assert!(cache.user_visual.iter().all(|&x| x == 0.0));
    let d = hp.dim;
    assert_eq!(cache.user_uni.slice(s![.., ..d]), emb.view());
    assert_eq!(cache.user_uni.slice(s![.., d..]), emb.view());
}

fn synthetic_context_parts(seed: u64) -> (InteractionDataset, Vec<ModalFeatures>) {
    let data = generate(&SyntheticConfig {
        n_users: 60,
        n_items: 40,
        band: 6,
        seed,
        ..Default::default()
    })
    .unwrap();
    let ds = data.split(seed).unwrap();
    let feats = Modality::ALL
        .iter()
        .zip(data.aligned_features(&ds).unwrap())
        .map(|(m, x)| ModalFeatures::new(*m, &ds, x).unwrap())
        .collect();
    (ds, feats)
}

#[test]
fn small_step_lowers_batch_loss() {
    let (ds, feats) = synthetic_context_parts(4);
    let hp = HyperParams {
        dim: 16,
        learning_rate: 1e-4,
        ..Default::default()
    };
    let ablation = Ablation::default();
    let inputs = ModelInputs::build(&ds, &feats, &hp, &ablation).unwrap();
    let ctx = TrainContext {
        ds: &ds,
        inputs: &inputs,
        hp: &hp,
        ablation,
    };
    let mut store = ctx.init_store().unwrap();
    let batch = sample_triplets(&ds, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let before = ctx.batch_loss(&store, &batch, 0).unwrap().loss;
    let stats = ctx.train_step(&mut store, &batch).unwrap();
    assert_eq!(stats.loss, before);
    let after = ctx.batch_loss(&store, &batch, 0).unwrap().loss;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn identical_steps_give_identical_losses() {
    let (ds, feats) = synthetic_context_parts(5);
    let hp = HyperParams { dim: 8, ..Default::default() };
    let inputs = ModelInputs::build(&ds, &feats, &hp, &Ablation::default()).unwrap();
    let ctx = TrainContext {
        ds: &ds,
        inputs: &inputs,
        hp: &hp,
        ablation: Ablation::default(),
    };
    let batch = sample_triplets(&ds, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut a = ctx.init_store().unwrap();
    let mut b = a.clone();
    let sa = ctx.train_step(&mut a, &batch).unwrap();
    let sb = ctx.train_step(&mut b, &batch).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.snapshot(), b.snapshot());
}

#[test]
fn scaling_representations_keeps_rankings() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let users = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let items = Array2::from_shape_fn((12, 6), |_| rng.random_range(-1.0..1.0));
        let c: f64 = rng.random_range(0.1..10.0);
        let (su, si) = (&users * c, &items * c);
        for u in 0..5 {
            let base = users.row(u).dot(&items.t());
            let scaled = su.row(u).dot(&si.t());
            for (x, y) in base.iter().zip(&scaled) {
                assert!((y - c * c * x).abs() < 1e-9 * (1.0 + y.abs()));
            }
            let a = rank_items(users.row(u), items.view(), &[2], 12 - 1).unwrap();
            let b = rank_items(su.row(u), si.view(), &[2], 12 - 1).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn fifty_epochs_stay_finite_and_deterministic() {
    let (ds, feats) = synthetic_context_parts(6);
    let hp = HyperParams {
        dim: 16,
        learning_rate: 1e-2,
        batch_size: 256,
        epochs_max: 50,
        patience: 50,
        ..Default::default()
    };
    let inputs = ModelInputs::build(&ds, &feats, &hp, &Ablation::default()).unwrap();
    let ctx = TrainContext {
        ds: &ds,
        inputs: &inputs,
        hp: &hp,
        ablation: Ablation::default(),
    };
    let mut seen = 0;
    let a = ctx
        .fit(&FitOptions::default(), &mut |r| {
            seen += 1;
            assert!(r.loss.is_finite() && r.val_recall20.is_finite());
        })
        .unwrap();
    assert_eq!(seen, 50);
    assert!(a.store.first_non_finite().is_none());
    let b = ctx.fit(&FitOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.store.snapshot(), b.store.snapshot());
    let report = ctx.evaluate(&a.store, Split::Test, &[10, 20]).unwrap();
    assert_eq!(report.metrics.len(), 2);
}
