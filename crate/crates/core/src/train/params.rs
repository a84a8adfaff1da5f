//! Named trainable tensors with gradient slots and Adam state.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{RearmError, Result};
use crate::fusion::{AttentionParams, ProjectionParams, QkvWeights};
use crate::homograph::Side;
use crate::refine::{MetaLearner, MetaNetParams, PRELU_INIT};
use crate::tape::{Gradients, ParamId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const ATTENTION_BLOCKS: [&str; 4] = ["self_visual", "self_textual", "cross_visual", "cross_textual"];
pub const MODALITY_NAMES: [&str; 2] = ["visual", "textual"];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Tensor {
    fn new(name: String, value: Array2<f64>) -> Self {
        let z = Array2::zeros(value.dim());
        Tensor {
            name,
            value,
            grad: z.clone(),
            m: z.clone(),
            v: z,
        }
    }
}

/// Shapes the store is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreShape {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub rank: usize,
    pub modal_dims: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

pub fn side_name(side: Side) -> &'static str {
    match side {
        Side::User => "user",
        Side::Item => "item",
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// `(name, shape, init)` for every tensor, in manifest order.
fn layout(s: &StoreShape) -> Vec<(String, (usize, usize), Init)> {
    let d = s.dim;
    let k = s.rank;
    let mut out = vec![
        ("user_emb".to_string(), (s.n_users, d), Init::Xavier),
        ("item_emb".to_string(), (s.n_items, d), Init::Xavier),
    ];
    for (m, dm) in MODALITY_NAMES.iter().zip(s.modal_dims) {
        out.push((format!("proj.{m}.w"), (d, dm), Init::Xavier));
        out.push((format!("proj.{m}.b"), (1, d), Init::Zero));
    }
    for block in ATTENTION_BLOCKS {
        for w in ["query", "key", "value"] {
            out.push((format!("attn.{block}.{w}"), (d, d), Init::Xavier));
        }
    }
    for side in ["user", "item"] {
        out.push((format!("meta.{side}.share_w"), (d, 2 * d), Init::Xavier));
        out.push((format!("meta.{side}.share_b"), (1, d), Init::Zero));
        for g in ["g1", "g2"] {
            out.push((format!("meta.{side}.{g}.w1"), (d, d), Init::Xavier));
            out.push((format!("meta.{side}.{g}.b1"), (1, d), Init::Zero));
            out.push((format!("meta.{side}.{g}.slope"), (1, 1), Init::Slope));
            out.push((format!("meta.{side}.{g}.w2"), (d * k, d), Init::Xavier));
            out.push((format!("meta.{side}.{g}.b2"), (1, d * k), Init::Zero));
        }
        out.push((format!("meta.{side}.out_slope"), (1, 1), Init::Slope));
        out.push((format!("uni_slope.{side}"), (1, 1), Init::Slope));
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zero,
    Slope,
}

impl ParameterStore {
    /// Xavier-uniform matrices and embeddings, zero biases, PReLU slopes
    /// at 0.25.
    pub fn init(shape: &StoreShape, seed: u64) -> Result<Self> {
        if shape.dim == 0 || shape.rank == 0 || shape.rank >= shape.dim {
            return Err(RearmError::Config(format!(
                "need d > 0 and 1 <= rank < d (d = {}, rank = {})",
                shape.dim, shape.rank
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(shape)
            .into_iter()
            .map(|(name, (r, c), init)| {
                let value = match init {
                    Init::Xavier => xavier(&mut rng, r, c),
                    Init::Zero => Array2::zeros((r, c)),
                    Init::Slope => Array2::from_elem((r, c), PRELU_INIT),
                };
                (name, value)
            })
            .collect();
        ParameterStore::from_tensors(tensors)
    }

    pub fn from_tensors(tensors: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut out = Vec::with_capacity(tensors.len());
        for (i, (name, value)) in tensors.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(RearmError::Data(format!("duplicate tensor {name}")));
            }
            out.push(Tensor::new(name, value));
        }
        Ok(ParameterStore {
            tensors: out,
            index,
            step: 0,
        })
    }

    /// Checks that the tensor names and shapes match a freshly built layout.
    pub fn check_layout(&self, shape: &StoreShape) -> Result<()> {
        let want = layout(shape);
        if want.len() != self.tensors.len() {
            return Err(RearmError::Data(format!(
                "{} tensors, expected {}",
                self.tensors.len(),
                want.len()
            )));
        }
        for ((name, dim, _), t) in want.iter().zip(&self.tensors) {
            if *name != t.name || *dim != t.value.dim() {
                return Err(RearmError::Data(format!(
                    "tensor {} {:?} does not match expected {name} {dim:?}",
                    t.name,
                    t.value.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.tensors[self.id(name)].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let id = self.id(name);
        &mut self.tensors[id].value
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id].value
    }

    pub fn grad(&self, name: &str) -> &Array2<f64> {
        &self.tensors[self.id(name)].grad
    }

    pub fn dim(&self) -> usize {
        self.get("user_emb").ncols()
    }

    pub fn n_users(&self) -> usize {
        self.get("user_emb").nrows()
    }

    pub fn n_items(&self) -> usize {
        self.get("item_emb").nrows()
    }

    pub fn rank(&self) -> usize {
        self.get("meta.user.g1.w2").nrows() / self.dim()
    }

    pub fn modal_dims(&self) -> [usize; 2] {
        MODALITY_NAMES.map(|m| self.get(&format!("proj.{m}.w")).ncols())
    }

    pub fn shape(&self) -> StoreShape {
        StoreShape {
            n_users: self.n_users(),
            n_items: self.n_items(),
            dim: self.dim(),
            rank: self.rank(),
            modal_dims: self.modal_dims(),
        }
    }

    /// Sum of squared entries over every tensor.
    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.value.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    /// Zeroes every gradient slot, then copies in the new gradients.
    pub fn load_gradients(&mut self, mut grads: Gradients) {
        for (id, t) in self.tensors.iter_mut().enumerate() {
            match grads.take(id) {
                Some(g) => t.grad = g,
                None => t.grad.fill(0.0),
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.grad.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// First tensor holding a NaN or infinity in its value or gradient.
    pub fn first_non_finite(&self) -> Option<(String, &'static str)> {
        self.tensors.iter().find_map(|t| {
            if t.value.iter().any(|x| !x.is_finite()) {
                Some((t.name.clone(), "value"))
            } else if t.grad.iter().any(|x| !x.is_finite()) {
                Some((t.name.clone(), "gradient"))
            } else {
                None
            }
        })
    }

    /// One bias-corrected Adam update from the loaded gradients. With
    /// `f32_storage` every updated value is rounded to single precision.
    pub fn adam_step(&mut self, lr: f64, f32_storage: bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for p in &mut self.tensors {
            Zip::from(&mut p.value)
                .and(&mut p.m)
                .and(&mut p.v)
                .and(&p.grad)
                .for_each(|x, m, v, &g| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    if f32_storage {
                        *x = *x as f32 as f64;
                    }
                });
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.value.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// Parameter values only, without optimizer state.
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| t.value.clone()).collect()
    }

    pub fn restore(&mut self, values: Vec<Array2<f64>>) {
        for (t, v) in self.tensors.iter_mut().zip(values) {
            t.value = v;
        }
    }

    pub fn projection(&self, modality: usize) -> ProjectionParams {
        let m = MODALITY_NAMES[modality];
        ProjectionParams {
            weight: self.get(&format!("proj.{m}.w")).clone(),
            bias: row_vec(self.get(&format!("proj.{m}.b"))),
        }
    }

    pub fn attention(&self, dropout_rate: f64) -> AttentionParams {
        let qkv = |block: &str| QkvWeights {
            query: self.get(&format!("attn.{block}.query")).clone(),
            key: self.get(&format!("attn.{block}.key")).clone(),
            value: self.get(&format!("attn.{block}.value")).clone(),
        };
        AttentionParams {
            self_visual: qkv("self_visual"),
            self_textual: qkv("self_textual"),
            cross_visual: qkv("cross_visual"),
            cross_textual: qkv("cross_textual"),
            dropout_rate,
        }
    }

    pub fn meta(&self, side: Side) -> MetaNetParams {
        let s = side_name(side);
        let learner = |g: &str| MetaLearner {
            w1: self.get(&format!("meta.{s}.{g}.w1")).clone(),
            b1: row_vec(self.get(&format!("meta.{s}.{g}.b1"))),
            slope: self.get(&format!("meta.{s}.{g}.slope"))[[0, 0]],
            w2: self.get(&format!("meta.{s}.{g}.w2")).clone(),
            b2: row_vec(self.get(&format!("meta.{s}.{g}.b2"))),
        };
        MetaNetParams {
            share_w: self.get(&format!("meta.{s}.share_w")).clone(),
            share_b: row_vec(self.get(&format!("meta.{s}.share_b"))),
            g1: learner("g1"),
            g2: learner("g2"),
            out_slope: self.get(&format!("meta.{s}.out_slope"))[[0, 0]],
            rank: self.rank(),
        }
    }

    pub fn uni_slope(&self, side: Side) -> f64 {
        self.get(&format!("uni_slope.{}", side_name(side)))[[0, 0]]
    }
}

fn row_vec(m: &Array2<f64>) -> Array1<f64> {
    m.row(0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> StoreShape {
        StoreShape {
            n_users: 5,
            n_items: 7,
            dim: 8,
            rank: 2,
            modal_dims: [6, 4],
        }
    }

    #[test]
    fn layout_shapes() {
        let s = ParameterStore::init(&shape(), 1).unwrap();
        assert_eq!(s.get("user_emb").dim(), (5, 8));
        assert_eq!(s.get("proj.textual.w").dim(), (8, 4));
        assert_eq!(s.get("meta.item.g2.w2").dim(), (16, 8));
        assert_eq!(s.rank(), 2);
        assert_eq!(s.shape(), shape());
        assert_eq!(s.get("meta.user.out_slope")[[0, 0]], 0.25);
        assert!(s.get("proj.visual.b").iter().all(|x| *x == 0.0));
        s.check_layout(&shape()).unwrap();
        assert!(s.check_layout(&StoreShape { rank: 3, ..shape() }).is_err());
        s.meta(Side::User).validate().unwrap();
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = ParameterStore::init(&shape(), 7).unwrap();
        let b = ParameterStore::init(&shape(), 7).unwrap();
        let c = ParameterStore::init(&shape(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.get("user_emb"), c.get("user_emb"));
    }

    #[test]
    fn rank_must_be_below_dim() {
        assert!(ParameterStore::init(&StoreShape { rank: 8, ..shape() }, 0).is_err());
        assert!(ParameterStore::init(&StoreShape { rank: 0, ..shape() }, 0).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_values() {
        let mut s = ParameterStore::init(&shape(), 3).unwrap();
        let before = s.snapshot();
        for t in &mut s.tensors {
            t.grad.fill(1.0);
        }
        s.adam_step(0.0, false);
        assert_eq!(s.snapshot(), before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParameterStore::from_tensors(vec![("w".into(), Array2::from_elem((1, 2), 1.0))]).unwrap();
        s.tensors[0].grad = Array2::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap();
        s.adam_step(0.1, false);
        let v = s.get("w");
        assert!((v[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((v[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn f32_storage_rounds() {
        let mut s = ParameterStore::from_tensors(vec![("w".into(), Array2::from_elem((1, 1), 0.1))]).unwrap();
        s.tensors[0].grad.fill(1.0);
        s.adam_step(1e-3, true);
        let x = s.get("w")[[0, 0]];
        assert_eq!(x, x as f32 as f64);
    }

    #[test]
    fn non_finite_detection() {
        let mut s = ParameterStore::init(&shape(), 3).unwrap();
        assert!(s.first_non_finite().is_none());
        s.get_mut("attn.cross_visual.key")[[1, 1]] = f64::NAN;
        assert_eq!(s.first_non_finite().unwrap().0, "attn.cross_visual.key");
    }
}
