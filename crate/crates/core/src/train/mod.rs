//! Joint objective, negative sampling, the optimisation loop and early
//! stopping.

mod checkpoint;
mod model;
mod params;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, Split};
use crate::error::{RearmError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::fusion::{DropoutSeed, SoftmaxAxis};
use crate::homograph::HomographConfig;
use crate::refine::RefineLossWeights;
use crate::tape::{softplus, Tape};

pub use crate::eval::predict;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use model::{forward, ForwardCache, ModelInputs};
pub use params::{ParameterStore, StoreShape, Tensor, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use model::{build_loss, ParamVars};

/// Validation metric that drives early stopping.
pub const STOP_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Bipartite propagation layers.
    pub layers: usize,
    pub homograph: HomographConfig,
    pub refine: RefineLossWeights,
    /// Rank of the meta-network factors.
    pub rank: usize,
    pub dropout: f64,
    pub softmax: SoftmaxAxis,
    pub epochs_max: usize,
    pub patience: usize,
    pub eval_topk: Vec<usize>,
    pub seed: u64,
    /// Keep parameters in double precision between steps.
    pub exact: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            dim: 64,
            batch_size: 2048,
            learning_rate: 1e-3,
            layers: 4,
            homograph: HomographConfig::default(),
            refine: RefineLossWeights::default(),
            rank: 4,
            dropout: 0.1,
            softmax: SoftmaxAxis::Cols,
            epochs_max: 2000,
            patience: 20,
            eval_topk: vec![10, 20],
            seed: 2024,
            exact: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RearmError::Config(m));
        if self.dim == 0 {
            return bad("d must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        if self.patience == 0 {
            return bad("patience must be > 0".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.rank == 0 || self.rank >= self.dim {
            return bad(format!("rank {} must satisfy 1 <= rank < d = {}", self.rank, self.dim));
        }
        if self.eval_topk.is_empty() || self.eval_topk.contains(&0) {
            return bad(format!("eval_topk {:?} must list positive cutoffs", self.eval_topk));
        }
        self.homograph.validate()?;
        self.refine.validate()
    }

    /// `eval_topk` plus the stopping cutoff, sorted.
    pub fn validation_ks(&self) -> Vec<usize> {
        let mut ks = self.eval_topk.clone();
        ks.push(STOP_K);
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Component switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub skip_user_hom: bool,
    pub skip_item_hom: bool,
    pub no_co: bool,
    pub no_sim: bool,
    pub no_meta: bool,
    pub no_ort: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WoUu,
    WoIi,
    WoCo,
    WoSim,
    WoHom,
    WoMeta,
    WoOrt,
    WoRef,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::WoUu,
        Variant::WoIi,
        Variant::WoCo,
        Variant::WoSim,
        Variant::WoHom,
        Variant::WoMeta,
        Variant::WoOrt,
        Variant::WoRef,
        Variant::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::WoUu => "wo_uu",
            Variant::WoIi => "wo_ii",
            Variant::WoCo => "wo_co",
            Variant::WoSim => "wo_sim",
            Variant::WoHom => "wo_hom",
            Variant::WoMeta => "wo_meta",
            Variant::WoOrt => "wo_ort",
            Variant::WoRef => "wo_ref",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| RearmError::Config(format!("unknown ablation `{s}`")))
    }

    pub fn ablation(&self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::WoUu => a.skip_user_hom = true,
            Variant::WoIi => a.skip_item_hom = true,
            Variant::WoCo => a.no_co = true,
            Variant::WoSim => a.no_sim = true,
            Variant::WoHom => {
                a.skip_user_hom = true;
                a.skip_item_hom = true;
            }
            Variant::WoMeta => a.no_meta = true,
            Variant::WoOrt => a.no_ort = true,
            Variant::WoRef => {
                a.no_meta = true;
                a.no_ort = true;
            }
            Variant::Full => {}
        }
        a
    }
}

impl Ablation {
    /// Union of the named variants' switches.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut out = Ablation::default();
        for n in names {
            let a = Variant::parse(n.as_ref())?.ablation();
            out.skip_user_hom |= a.skip_user_hom;
            out.skip_item_hom |= a.skip_item_hom;
            out.no_co |= a.no_co;
            out.no_sim |= a.no_sim;
            out.no_meta |= a.no_meta;
            out.no_ort |= a.no_ort;
        }
        if out.no_co && out.no_sim {
            return Err(RearmError::Config("wo_co and wo_sim cannot be combined".into()));
        }
        Ok(out)
    }

    /// Hyperparameters with the loss-weight and graph-mixing overrides of
    /// this ablation applied.
    pub fn apply(&self, hp: &HyperParams) -> HyperParams {
        let mut hp = hp.clone();
        if self.no_co {
            hp.homograph.alpha_co_user = 0.0;
            hp.homograph.alpha_co_item = 0.0;
        }
        if self.no_sim {
            hp.homograph.alpha_co_user = 1.0;
            hp.homograph.alpha_co_item = 1.0;
        }
        if self.no_ort {
            hp.refine.lambda_ort = 0.0;
        }
        hp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Uniform train pairs, each with a uniform negative outside the user's
/// train items.
pub fn sample_triplets(ds: &InteractionDataset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Triplet>> {
    if ds.train.is_empty() {
        return Err(RearmError::Data("train split is empty".into()));
    }
    (0..batch_size)
        .map(|_| {
            let (user, pos) = ds.train[rng.random_range(0..ds.train.len())];
            let seen = &ds.train_adjacency[user];
            if seen.len() >= ds.n_items {
                return Err(RearmError::Data(format!("user {user} interacted with every item")));
            }
            loop {
                let neg = rng.random_range(0..ds.n_items);
                if seen.binary_search(&neg).is_err() {
                    return Ok(Triplet { user, pos, neg });
                }
            }
        })
        .collect()
}

/// Mean of `softplus(neg − pos) = −ln σ(pos − neg)`.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(RearmError::shape(
            "bpr",
            format!("{} positive vs {} negative scores", pos.len(), neg.len()),
        ));
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum::<f64>() / pos.len() as f64)
}

/// `bpr + λ_cl·cl + λ_ort·ort + λ_p·‖Θ‖² / batch`.
pub fn total_loss(bpr: f64, cl: f64, ort: f64, squared_norm: f64, batch: usize, w: &RefineLossWeights) -> f64 {
    bpr + w.lambda_cl * cl + w.lambda_ort * ort + w.lambda_p * squared_norm / batch as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub bpr: f64,
    pub cl: f64,
    pub ort: f64,
    pub reg: f64,
    pub grad_norm: f64,
}

/// Everything a training run reads but never mutates.
pub struct TrainContext<'a> {
    pub ds: &'a InteractionDataset,
    pub inputs: &'a ModelInputs,
    pub hp: &'a HyperParams,
    pub ablation: Ablation,
}

impl TrainContext<'_> {
    fn dropout(&self, step: u64) -> Option<DropoutSeed> {
        (self.hp.dropout > 0.0).then_some(DropoutSeed {
            seed: self.hp.seed,
            step,
        })
    }

    /// Loss on a fixed batch with the dropout masks of `step`.
    pub fn batch_loss(&self, store: &ParameterStore, batch: &[Triplet], step: u64) -> Result<StepStats> {
        let mut t = Tape::new();
        let mut pv = ParamVars::new(store);
        let l = build_loss(&mut t, &mut pv, self.inputs, self.hp, &self.ablation, batch, self.dropout(step))?;
        Ok(StepStats {
            loss: t.scalar(l.total),
            bpr: t.scalar(l.bpr),
            cl: t.scalar(l.cl),
            ort: t.scalar(l.ort),
            reg: t.scalar(l.reg),
            grad_norm: f64::NAN,
        })
    }

    /// Backward pass and gradient load, without the update.
    pub fn compute_gradients(&self, store: &mut ParameterStore, batch: &[Triplet], step: u64) -> Result<StepStats> {
        let (stats, grads) = {
            let mut t = Tape::new();
            let mut pv = ParamVars::new(store);
            let l = build_loss(&mut t, &mut pv, self.inputs, self.hp, &self.ablation, batch, self.dropout(step))?;
            let loss = t.scalar(l.total);
            if !loss.is_finite() {
                let culprit = l
                    .stages
                    .iter()
                    .find(|(_, v)| t.value(*v).iter().any(|x| !x.is_finite()))
                    .map(|(name, _)| name.to_string());
                let (tensor, detail) = match culprit {
                    Some(stage) => (stage, format!("loss is {loss}")),
                    None => {
                        let part = [("bpr", l.bpr), ("contrastive", l.cl), ("orthogonal", l.ort), ("l2", l.reg)]
                            .into_iter()
                            .find(|(_, v)| !t.scalar(*v).is_finite())
                            .map_or("loss", |(n, _)| n);
                        (part.to_string(), format!("loss is {loss}"))
                    }
                };
                return Err(RearmError::NonFinite { tensor, detail });
            }
            let stats = StepStats {
                loss,
                bpr: t.scalar(l.bpr),
                cl: t.scalar(l.cl),
                ort: t.scalar(l.ort),
                reg: t.scalar(l.reg),
                grad_norm: 0.0,
            };
            (stats, t.backward(l.total))
        };
        store.load_gradients(grads);
        Ok(StepStats {
            grad_norm: store.grad_norm(),
            ..stats
        })
    }

    /// Gradient computation and one Adam update.
    pub fn train_step(&self, store: &mut ParameterStore, batch: &[Triplet]) -> Result<StepStats> {
        let step = store.steps();
        let stats = self.compute_gradients(store, batch, step)?;
        if let Some((tensor, what)) = store.first_non_finite() {
            return Err(RearmError::NonFinite {
                tensor,
                detail: format!("non-finite {what} at step {step}"),
            });
        }
        store.adam_step(self.hp.learning_rate, !self.hp.exact);
        if let Some((tensor, what)) = store.first_non_finite() {
            return Err(RearmError::NonFinite {
                tensor,
                detail: format!("non-finite {what} after update {}", step + 1),
            });
        }
        Ok(stats)
    }

    pub fn evaluate(&self, store: &ParameterStore, split: Split, ks: &[usize]) -> Result<EvalReport> {
        let cache = forward(store, self.inputs, self.hp, &self.ablation, None)?;
        evaluate(cache.user_star.view(), cache.item_star.view(), self.ds, split, ks)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.ds.train.len().div_ceil(self.hp.batch_size)
    }

    /// Fresh parameters for this context's shapes.
    pub fn init_store(&self) -> Result<ParameterStore> {
        let shape = StoreShape {
            n_users: self.ds.n_users,
            n_items: self.ds.n_items,
            dim: self.hp.dim,
            rank: self.hp.rank,
            modal_dims: self.inputs.modal_dims(),
        };
        let mut store = ParameterStore::init(&shape, self.hp.seed)?;
        if !self.hp.exact {
            store.round_to_f32();
        }
        Ok(store)
    }

    /// Trains until `epochs_max` or early stopping; the returned store holds
    /// the best-validation parameters.
    pub fn fit(&self, opts: &FitOptions, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<FitOutcome> {
        self.hp.validate()?;
        let mut store = self.init_store()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.hp.seed);
        rng.set_stream(1);
        let ks = self.hp.validation_ks();
        let mut stopper = EarlyStopping::new(self.hp.patience);
        let mut best = store.snapshot();
        let mut history = Vec::new();
        for epoch in 1..=self.hp.epochs_max {
            let start = Instant::now();
            let mut sums = [0.0; 4];
            let steps = self.steps_per_epoch();
            for _ in 0..steps {
                let batch = sample_triplets(self.ds, self.hp.batch_size, &mut rng)?;
                let s = self.train_step(&mut store, &batch)?;
                for (acc, x) in sums.iter_mut().zip([s.loss, s.bpr, s.cl, s.ort]) {
                    *acc += x;
                }
            }
            let report = self.evaluate(&store, Split::Val, &ks)?;
            let metric = report.recall(STOP_K);
            let n = steps as f64;
            let rec = EpochRecord {
                epoch,
                loss: sums[0] / n,
                bpr: sums[1] / n,
                cl: sums[2] / n,
                ort: sums[3] / n,
                val_recall20: metric,
                val_ndcg20: report.ndcg(STOP_K),
                seconds: if opts.record_seconds {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            on_epoch(&rec);
            history.push(rec);
            match stopper.observe(epoch, metric) {
                StopDecision::Improved => best = store.snapshot(),
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        }
        store.restore(best);
        Ok(FitOutcome {
            store,
            history,
            best_epoch: stopper.best_epoch(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Wall-clock seconds per epoch in the history; zero otherwise so
    /// seeded runs produce identical files.
    pub record_seconds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bpr: f64,
    pub cl: f64,
    pub ort: f64,
    pub val_recall20: f64,
    pub val_ndcg20: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub store: ParameterStore,
    pub history: Vec<EpochRecord>,
    /// Zero when no epoch improved on the initial parameters.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` epochs pass without a strictly better metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Finite-difference comparison for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Central differences of the batch loss for every entry of every tensor,
/// against the analytic gradients. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    ctx: &TrainContext,
    store: &ParameterStore,
    batch: &[Triplet],
    h: f64,
    floor: f64,
) -> Result<Vec<TensorCheck>> {
    let mut work = store.clone();
    ctx.compute_gradients(&mut work, batch, 0)?;
    let analytic: Vec<_> = work.tensors().iter().map(|t| t.grad.clone()).collect();
    let mut out = Vec::new();
    for (id, grad) in analytic.iter().enumerate() {
        let mut check = TensorCheck {
            name: store.tensors()[id].name.clone(),
            entries: grad.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for (idx, &a) in grad.indexed_iter() {
            let orig = work.value(id)[idx];
            work.value_mut(id)[idx] = orig + h;
            let up = ctx.batch_loss(&work, batch, 0)?.loss;
            work.value_mut(id)[idx] = orig - h;
            let down = ctx.batch_loss(&work, batch, 0)?.loss;
            work.value_mut(id)[idx] = orig;
            let num = (up - down) / (2.0 * h);
            let abs = (a - num).abs();
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(abs / a.abs().max(num.abs()).max(floor));
        }
        out.push(check);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpr_values() {
        assert!((bpr_loss(&[0.3], &[0.3]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bpr_loss(&[1e6], &[-1e6]).unwrap() < 1e-300);
        assert!((bpr_loss(&[1.0], &[0.0]).unwrap() - 0.3133).abs() < 1e-4);
        assert!(bpr_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let zero = RefineLossWeights {
            tau: 0.2,
            lambda_cl: 0.0,
            lambda_ort: 0.0,
            lambda_p: 0.0,
        };
        assert_eq!(total_loss(0.7, 3.0, 4.0, 10.0, 8, &zero), 0.7);
        let p = RefineLossWeights { lambda_p: 1.0, ..zero };
        assert_eq!(total_loss(0.0, 0.0, 0.0, 25.0, 5, &p), 5.0);
        let w = RefineLossWeights {
            tau: 0.2,
            lambda_cl: 0.1,
            lambda_ort: 0.2,
            lambda_p: 0.3,
        };
        let got = total_loss(1.5, 2.0, 3.0, 4.0, 2, &w);
        assert!((got - (1.5 + 0.2 + 0.6 + 0.6)).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_on_worsening_metric() {
        let mut s = EarlyStopping::new(3);
        let metrics = [0.5, 0.4, 0.3, 0.2, 0.1];
        let mut stopped = None;
        for (e, m) in metrics.iter().enumerate() {
            if s.observe(e + 1, *m) == StopDecision::Stop {
                stopped = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(4));
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn ties_do_not_improve() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(1, 0.5), StopDecision::Improved);
        assert_eq!(s.observe(2, 0.5), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.5), StopDecision::Stop);
    }

    #[test]
    fn protocol_defaults() {
        let hp = HyperParams::default();
        assert_eq!((hp.dim, hp.batch_size, hp.patience, hp.epochs_max), (64, 2048, 20, 2000));
        assert_eq!(hp.eval_topk, vec![10, 20]);
        assert_eq!(STOP_K, 20);
        hp.validate().unwrap();
    }

    #[test]
    fn invalid_hyperparams() {
        for hp in [
            HyperParams { dim: 0, ..Default::default() },
            HyperParams { batch_size: 0, ..Default::default() },
            HyperParams { patience: 0, ..Default::default() },
            HyperParams { rank: 64, ..Default::default() },
            HyperParams { dropout: 1.0, ..Default::default() },
        ] {
            assert!(hp.validate().is_err());
        }
    }

    #[test]
    fn variant_algebra() {
        let names: Vec<&str> = Variant::ALL.iter().map(Variant::name).collect();
        assert_eq!(names, ["wo_uu", "wo_ii", "wo_co", "wo_sim", "wo_hom", "wo_meta", "wo_ort", "wo_ref", "full"]);
        assert_eq!(Variant::WoRef.ablation(), Ablation::from_names(&["wo_meta", "wo_ort"]).unwrap());
        assert_eq!(Variant::WoHom.ablation(), Ablation::from_names(&["wo_uu", "wo_ii"]).unwrap());
        assert!(Ablation::from_names(&["wo_co", "wo_sim"]).is_err());
        assert!(Ablation::from_names(&["wo_everything"]).is_err());
        let hp = Variant::WoOrt.ablation().apply(&HyperParams::default());
        assert_eq!(hp.refine.lambda_ort, 0.0);
        let hp = Variant::WoSim.ablation().apply(&HyperParams::default());
        assert_eq!((hp.homograph.alpha_co_user, hp.homograph.alpha_co_item), (1.0, 1.0));
    }

    #[test]
    fn forced_negative() {
        let ds = InteractionDataset::from_indexed(1, 3, vec![(0, 0), (0, 1)], vec![], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_triplets(&ds, 50, &mut rng).unwrap();
        assert!(b.iter().all(|t| t.neg == 2 && t.pos < 2));
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_triplets(&ds, 20, &mut r1).unwrap(), sample_triplets(&ds, 20, &mut r2).unwrap());
    }

    #[test]
    fn saturated_user_is_an_error() {
        let ds = InteractionDataset::from_indexed(1, 2, vec![(0, 0), (0, 1)], vec![], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triplets(&ds, 1, &mut rng).is_err());
    }

    #[test]
    fn negatives_uniform_over_complement() {
        // user 0 owns items 0..3 of 10; negatives uniform over 7 items
        let ds = InteractionDataset::from_indexed(1, 10, vec![(0, 0), (0, 1), (0, 2)], vec![], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = sample_triplets(&ds, 10_000, &mut rng).unwrap();
        let mut counts = [0usize; 10];
        for t in &draws {
            counts[t.neg] += 1;
        }
        assert_eq!(counts[..3], [0, 0, 0]);
        let expected = 10_000.0 / 7.0;
        let chi2: f64 = counts[3..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 6 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 22.46, "chi2 = {chi2}");
    }
}
