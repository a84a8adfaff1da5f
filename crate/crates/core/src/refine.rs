//! Refined contrastive learning: modality alignment, the modal-shared
//! meta-network and the modal-unique orthogonality constraint.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{RearmError, Result};
use crate::tape::{Tape, Var};

pub const PRELU_INIT: f64 = 0.25;

/// Two affine layers with a PReLU between them: `d → hidden → out`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearner {
    /// `hidden × d`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub slope: f64,
    /// `out × hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Meta-network of one side (users or items).
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNetParams {
    /// `d × 2d`
    pub share_w: Array2<f64>,
    pub share_b: Array1<f64>,
    /// Emits the `d×k` factor.
    pub g1: MetaLearner,
    /// Emits the `k×d` factor.
    pub g2: MetaLearner,
    /// Slope of the PReLU applied to the transferred features.
    pub out_slope: f64,
    pub rank: usize,
}

impl MetaNetParams {
    pub fn dim(&self) -> usize {
        self.share_w.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.rank == 0 || self.rank >= d {
            return Err(RearmError::Config(format!(
                "meta-network rank {} must satisfy 1 <= k < d = {d}",
                self.rank
            )));
        }
        let checks = [
            (self.share_w.dim(), (d, 2 * d)),
            (self.g1.w1.dim(), (self.g1.w1.nrows(), d)),
            (self.g1.w2.dim(), (d * self.rank, self.g1.w1.nrows())),
            (self.g2.w1.dim(), (self.g2.w1.nrows(), d)),
            (self.g2.w2.dim(), (self.rank * d, self.g2.w1.nrows())),
        ];
        for (got, want) in checks {
            if got != want {
                return Err(RearmError::shape("meta-network", format!("{got:?} expected {want:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineLossWeights {
    pub tau: f64,
    pub lambda_cl: f64,
    pub lambda_ort: f64,
    pub lambda_p: f64,
}

impl Default for RefineLossWeights {
    fn default() -> Self {
        RefineLossWeights {
            tau: 0.2,
            lambda_cl: 0.01,
            lambda_ort: 0.01,
            lambda_p: 1e-4,
        }
    }
}

impl RefineLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(RearmError::Config(format!("temperature {} must be > 0", self.tau)));
        }
        for (name, v) in [("lambda_cl", self.lambda_cl), ("lambda_ort", self.lambda_ort), ("lambda_p", self.lambda_p)] {
            if !(v >= 0.0) {
                return Err(RearmError::Config(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

pub(crate) struct MetaLearnerVars {
    pub w1: Var,
    pub b1: Var,
    pub slope: Var,
    pub w2: Var,
    pub b2: Var,
}

pub(crate) struct MetaVars {
    pub share_w: Var,
    pub share_b: Var,
    pub g1: MetaLearnerVars,
    pub g2: MetaLearnerVars,
    pub out_slope: Var,
    pub rank: usize,
}

fn affine(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = t.matmul_nt(x, w);
    t.add_row(y, b)
}

fn learner(t: &mut Tape, x: Var, g: &MetaLearnerVars) -> Var {
    let h = affine(t, x, g.w1, g.b1);
    let h = t.prelu(h, g.slope);
    affine(t, h, g.w2, g.b2)
}

/// In-batch InfoNCE between row-aligned views, averaged over rows.
pub(crate) fn infonce_vars(t: &mut Tape, v: Var, w: Var, tau: f64) -> Var {
    let nv = t.normalize_rows(v);
    let nw = t.normalize_rows(w);
    let sims = t.matmul_nt(nv, nw);
    let logits = t.scale(sims, 1.0 / tau);
    t.cross_entropy_diag(logits)
}

pub(crate) fn orthogonal_vars(t: &mut Tape, v: Var, w: Var) -> Var {
    let dots = t.row_dot(v, w);
    t.mean_square(dots)
}

pub(crate) fn meta_shared_vars(t: &mut Tape, v: Var, w: Var, id: Var, p: &MetaVars) -> Var {
    let cat = t.concat_cols(&[v, w]);
    let shared = affine(t, cat, p.share_w, p.share_b);
    let f1 = learner(t, shared, &p.g1);
    let f2 = learner(t, shared, &p.g2);
    let transferred = t.low_rank(f1, f2, id, p.rank);
    let act = t.prelu(transferred, p.out_slope);
    t.add(act, id)
}

pub(crate) fn fuse_unique_vars(t: &mut Tape, v: Var, w: Var, id: Var, slope: Var) -> Var {
    let av = t.prelu(v, slope);
    let av = t.add(av, id);
    let aw = t.prelu(w, slope);
    let aw = t.add(aw, id);
    t.concat_cols(&[av, aw])
}

fn row(b: &Array1<f64>) -> Array2<f64> {
    b.clone().insert_axis(Axis(0))
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

fn learner_constants(t: &mut Tape, g: &MetaLearner) -> MetaLearnerVars {
    MetaLearnerVars {
        w1: t.constant(g.w1.clone()),
        b1: t.constant(row(&g.b1)),
        slope: t.constant(scalar(g.slope)),
        w2: t.constant(g.w2.clone()),
        b2: t.constant(row(&g.b2)),
    }
}

fn same_shape(stage: &'static str, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(RearmError::shape(stage, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean over rows of `-log(exp(cos(v_b, t_b)/τ) / Σ_b' exp(cos(v_b, t_b')/τ))`.
pub fn infonce_loss(v: ArrayView2<f64>, w: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(RearmError::Config(format!("temperature {tau} must be > 0")));
    }
    same_shape("infonce", v, w)?;
    if v.nrows() == 0 {
        return Err(RearmError::shape("infonce", "empty batch"));
    }
    let mut t = Tape::new();
    let a = t.constant(v.to_owned());
    let b = t.constant(w.to_owned());
    let loss = infonce_vars(&mut t, a, b, tau);
    Ok(t.scalar(loss))
}

/// Mean over rows of `(v_b · t_b)²`.
pub fn orthogonal_loss(v: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<f64> {
    same_shape("orthogonal loss", v, w)?;
    if v.nrows() == 0 {
        return Ok(0.0);
    }
    let mut t = Tape::new();
    let a = t.constant(v.to_owned());
    let b = t.constant(w.to_owned());
    let loss = orthogonal_vars(&mut t, a, b);
    Ok(t.scalar(loss))
}

/// Per row: `PReLU(W1·W2·id) + id`, with `W1`, `W2` emitted by the
/// meta-learners from `W_share·(v‖t) + b_share`.
pub fn meta_shared(
    v: ArrayView2<f64>,
    w: ArrayView2<f64>,
    id: ArrayView2<f64>,
    p: &MetaNetParams,
) -> Result<Array2<f64>> {
    p.validate()?;
    same_shape("meta-network", v, w)?;
    same_shape("meta-network", v, id)?;
    if v.ncols() != p.dim() {
        return Err(RearmError::shape("meta-network", format!("width {} vs d = {}", v.ncols(), p.dim())));
    }
    let mut t = Tape::new();
    let vars = MetaVars {
        share_w: t.constant(p.share_w.clone()),
        share_b: t.constant(row(&p.share_b)),
        g1: learner_constants(&mut t, &p.g1),
        g2: learner_constants(&mut t, &p.g2),
        out_slope: t.constant(scalar(p.out_slope)),
        rank: p.rank,
    };
    let (a, b, c) = (t.constant(v.to_owned()), t.constant(w.to_owned()), t.constant(id.to_owned()));
    let out = meta_shared_vars(&mut t, a, b, c, &vars);
    Ok(t.value(out).clone())
}

/// `(PReLU(v) + id) ‖ (PReLU(t) + id)`.
pub fn fuse_unique(v: ArrayView2<f64>, w: ArrayView2<f64>, id: ArrayView2<f64>, slope: f64) -> Result<Array2<f64>> {
    same_shape("unique fusion", v, w)?;
    same_shape("unique fusion", v, id)?;
    let mut t = Tape::new();
    let (a, b, c) = (t.constant(v.to_owned()), t.constant(w.to_owned()), t.constant(id.to_owned()));
    let s = t.constant(scalar(slope));
    let out = fuse_unique_vars(&mut t, a, b, c, s);
    Ok(t.value(out).clone())
}
