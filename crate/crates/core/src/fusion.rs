//! Modality projection and item-side channel attention.
//!
//! Attention here is over feature dimensions: the score matrix is `d×d`
//! whatever the number of items, and right-multiplies the value matrix so
//! each output channel is a convex combination of input channels. Each
//! attended matrix goes through a residual connection and a parameter-free
//! layer norm. User modal features never pass through this module.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RearmError, Result};
use crate::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Affine map from raw modality features to the embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// `d × d_m`
    pub weight: Array2<f64>,
    /// length `d`
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QkvWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub self_visual: QkvWeights,
    pub self_textual: QkvWeights,
    pub cross_visual: QkvWeights,
    pub cross_textual: QkvWeights,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Every column of the `d×d` attention matrix sums to one.
    #[default]
    Cols,
    Rows,
}

/// Source of dropout masks for one forward pass. Each attention block
/// draws from its own stream so masks do not depend on evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutSeed {
    pub seed: u64,
    pub step: u64,
}

impl DropoutSeed {
    /// Inverted-dropout mask: zeros with probability `rate`, otherwise
    /// `1 / (1 - rate)`.
    pub fn mask(&self, stream: u64, shape: (usize, usize), rate: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(stream);
        let keep = 1.0 / (1.0 - rate);
        Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionOptions {
    pub dropout_rate: f64,
    pub softmax: SoftmaxAxis,
    /// `None` disables dropout (evaluation).
    pub dropout: Option<DropoutSeed>,
}

impl AttentionOptions {
    pub fn eval() -> Self {
        AttentionOptions {
            dropout_rate: 0.0,
            softmax: SoftmaxAxis::Cols,
            dropout: None,
        }
    }

    fn mask(&self, stream: u64, shape: (usize, usize)) -> Option<Array2<f64>> {
        match self.dropout {
            Some(seed) if self.dropout_rate > 0.0 => Some(seed.mask(stream, shape, self.dropout_rate)),
            _ => None,
        }
    }
}

pub(crate) struct QkvVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Stream ids for the four attention blocks.
const STREAM_SELF_VISUAL: u64 = 1;
const STREAM_SELF_TEXTUAL: u64 = 2;
const STREAM_CROSS_VISUAL: u64 = 3;
const STREAM_CROSS_TEXTUAL: u64 = 4;

/// `layer_norm(x + dropout((x·Wv) · softmax((q·Wq)ᵀ(x·Wk) / √d)))`
pub(crate) fn attend(
    t: &mut Tape,
    query_src: Var,
    query_w: Var,
    x: Var,
    key_w: Var,
    value_w: Var,
    opts: &AttentionOptions,
    stream: u64,
) -> Var {
    let d = t.shape(x).1;
    let q = t.matmul(query_src, query_w);
    let k = t.matmul(x, key_w);
    let v = t.matmul(x, value_w);
    let scores = t.matmul_tn(q, k);
    let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = match opts.softmax {
        SoftmaxAxis::Cols => t.softmax_cols(scores),
        SoftmaxAxis::Rows => t.softmax_rows(scores),
    };
    let mut attended = t.matmul(v, attn);
    if let Some(mask) = opts.mask(stream, t.shape(attended)) {
        attended = t.mul_const(attended, mask);
    }
    let res = t.add(x, attended);
    t.layer_norm_rows(res, LAYER_NORM_EPS)
}

pub(crate) fn self_attention_vars(t: &mut Tape, x: Var, w: &QkvVars, opts: &AttentionOptions, stream: u64) -> Var {
    attend(t, x, w.query, x, w.key, w.value, opts, stream)
}

/// Returns `(visual, textual)` after cross attention.
pub(crate) fn cross_attention_vars(
    t: &mut Tape,
    xv: Var,
    xt: Var,
    wv: &QkvVars,
    wt: &QkvVars,
    opts: &AttentionOptions,
) -> (Var, Var) {
    let v = attend(t, xt, wt.query, xv, wv.key, wv.value, opts, STREAM_CROSS_VISUAL);
    let tt = attend(t, xv, wv.query, xt, wt.key, wt.value, opts, STREAM_CROSS_TEXTUAL);
    (v, tt)
}

/// Self attention per modality followed by cross attention.
pub(crate) fn item_attention_vars(
    t: &mut Tape,
    xv: Var,
    xt: Var,
    w: &[QkvVars; 4],
    opts: &AttentionOptions,
) -> (Var, Var) {
    let hv = self_attention_vars(t, xv, &w[0], opts, STREAM_SELF_VISUAL);
    let ht = self_attention_vars(t, xt, &w[1], opts, STREAM_SELF_TEXTUAL);
    cross_attention_vars(t, hv, ht, &w[2], &w[3], opts)
}

fn qkv_constants(t: &mut Tape, w: &QkvWeights) -> QkvVars {
    QkvVars {
        query: t.constant(w.query.clone()),
        key: t.constant(w.key.clone()),
        value: t.constant(w.value.clone()),
    }
}

fn check_square(w: &QkvWeights, d: usize, stage: &'static str) -> Result<()> {
    for m in [&w.query, &w.key, &w.value] {
        if m.dim() != (d, d) {
            return Err(RearmError::shape(stage, format!("weight {:?}, expected {d}x{d}", m.dim())));
        }
    }
    Ok(())
}

/// Row-wise `W·x + b`.
pub fn project_modality(raw: ArrayView2<f64>, p: &ProjectionParams) -> Result<Array2<f64>> {
    if p.weight.ncols() != raw.ncols() || p.weight.nrows() != p.bias.len() {
        return Err(RearmError::shape(
            "modality projection",
            format!("input {:?}, weight {:?}, bias {}", raw.dim(), p.weight.dim(), p.bias.len()),
        ));
    }
    Ok(raw.dot(&p.weight.t()) + &p.bias)
}

pub fn self_attention_block(x: ArrayView2<f64>, w: &QkvWeights, opts: &AttentionOptions) -> Result<Array2<f64>> {
    self_attention_block_stream(x, w, opts, STREAM_SELF_VISUAL)
}

pub fn cross_attention_block(
    x_visual: ArrayView2<f64>,
    x_textual: ArrayView2<f64>,
    p: &AttentionParams,
    opts: &AttentionOptions,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x_visual.dim() != x_textual.dim() {
        return Err(RearmError::shape(
            "cross attention",
            format!("visual {:?} vs textual {:?}", x_visual.dim(), x_textual.dim()),
        ));
    }
    let d = x_visual.ncols();
    check_square(&p.cross_visual, d, "cross attention")?;
    check_square(&p.cross_textual, d, "cross attention")?;
    let mut t = Tape::new();
    let xv = t.constant(x_visual.to_owned());
    let xt = t.constant(x_textual.to_owned());
    let wv = qkv_constants(&mut t, &p.cross_visual);
    let wt = qkv_constants(&mut t, &p.cross_textual);
    let (ov, ot) = cross_attention_vars(&mut t, xv, xt, &wv, &wt, opts);
    Ok((t.value(ov).clone(), t.value(ot).clone()))
}

/// Full item refinement: self attention on each modality, then cross.
pub fn item_attention(
    x_visual: ArrayView2<f64>,
    x_textual: ArrayView2<f64>,
    p: &AttentionParams,
    opts: &AttentionOptions,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let hv = self_attention_block_stream(x_visual, &p.self_visual, opts, STREAM_SELF_VISUAL)?;
    let ht = self_attention_block_stream(x_textual, &p.self_textual, opts, STREAM_SELF_TEXTUAL)?;
    cross_attention_block(hv.view(), ht.view(), p, opts)
}

fn self_attention_block_stream(x: ArrayView2<f64>, w: &QkvWeights, opts: &AttentionOptions, stream: u64) -> Result<Array2<f64>> {
    check_square(w, x.ncols(), "self attention")?;
    let mut t = Tape::new();
    let xv = t.constant(x.to_owned());
    let wv = qkv_constants(&mut t, w);
    let out = self_attention_vars(&mut t, xv, &wv, opts, stream);
    Ok(t.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn qkv(rng: &mut ChaCha8Rng, d: usize) -> QkvWeights {
        QkvWeights {
            query: random(rng, d, d),
            key: random(rng, d, d),
            value: random(rng, d, d),
        }
    }

    #[test]
    fn identity_projection_and_zero_input() {
        let x = ndarray::array![[1.0, -2.0], [0.5, 3.0]];
        let p = ProjectionParams {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        assert_eq!(project_modality(x.view(), &p).unwrap(), x);
        let p = ProjectionParams {
            weight: Array2::ones((3, 2)),
            bias: ndarray::array![1.0, 2.0, 3.0],
        };
        let out = project_modality(Array2::zeros((2, 2)).view(), &p).unwrap();
        assert_eq!(out.row(1).to_vec(), vec![1.0, 2.0, 3.0]);
        assert!(project_modality(Array2::zeros((2, 5)).view(), &p).is_err());
    }

    #[test]
    fn projection_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 6);
        let p = ProjectionParams {
            weight: random(&mut rng, 3, 6),
            bias: Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
        };
        let out = project_modality(x.view(), &p).unwrap();
        for r in 0..4 {
            for o in 0..3 {
                let mut acc = p.bias[o];
                for c in 0..6 {
                    acc += p.weight[[o, c]] * x[[r, c]];
                }
                assert!((out[[r, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = qkv(&mut rng, 4);
        let out = self_attention_block(Array2::zeros((5, 4)).view(), &w, &AttentionOptions::eval()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        let p = AttentionParams {
            self_visual: w.clone(),
            self_textual: w.clone(),
            cross_visual: w.clone(),
            cross_textual: w,
            dropout_rate: 0.0,
        };
        let z = Array2::zeros((3, 4));
        let (a, b) = cross_attention_block(z.view(), z.view(), &p, &AttentionOptions::eval()).unwrap();
        assert!(a.iter().chain(b.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn cross_reduces_to_self_with_shared_inputs_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = qkv(&mut rng, 4);
        let x = random(&mut rng, 6, 4);
        let p = AttentionParams {
            self_visual: w.clone(),
            self_textual: w.clone(),
            cross_visual: w.clone(),
            cross_textual: w.clone(),
            dropout_rate: 0.0,
        };
        let s = self_attention_block(x.view(), &w, &AttentionOptions::eval()).unwrap();
        let (a, b) = cross_attention_block(x.view(), x.view(), &p, &AttentionOptions::eval()).unwrap();
        assert!((&a - &s).iter().all(|v| v.abs() < 1e-12));
        assert!((&b - &s).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cross_shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = qkv(&mut rng, 2);
        let p = AttentionParams {
            self_visual: w.clone(),
            self_textual: w.clone(),
            cross_visual: w.clone(),
            cross_textual: w,
            dropout_rate: 0.0,
        };
        let a = Array2::zeros((3, 2));
        let b = Array2::zeros((4, 2));
        assert!(cross_attention_block(a.view(), b.view(), &p, &AttentionOptions::eval()).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = qkv(&mut rng, 6);
        let x = random(&mut rng, 5, 6);
        let out = self_attention_block(x.view(), &w, &AttentionOptions::eval()).unwrap();
        for row in out.axis_iter(Axis(0)) {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_is_deterministic_and_inverted() {
        let seed = DropoutSeed { seed: 9, step: 3 };
        let a = seed.mask(1, (50, 40), 0.25);
        let b = seed.mask(1, (50, 40), 0.25);
        assert_eq!(a, b);
        assert_ne!(a, seed.mask(2, (50, 40), 0.25));
        let kept = a.iter().filter(|v| **v > 0.0).count() as f64 / a.len() as f64;
        assert!((kept - 0.75).abs() < 0.05);
        assert!(a.iter().all(|v| *v == 0.0 || (*v - 4.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn dropout_off_in_eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = qkv(&mut rng, 3);
        let x = random(&mut rng, 4, 3);
        let opts = AttentionOptions {
            dropout_rate: 0.5,
            softmax: SoftmaxAxis::Cols,
            dropout: None,
        };
        let a = self_attention_block(x.view(), &w, &opts).unwrap();
        let b = self_attention_block(x.view(), &w, &opts).unwrap();
        assert_eq!(a, b);
    }
}
