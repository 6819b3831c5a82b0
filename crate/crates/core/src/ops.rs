//! Plain (non-differentiable) numeric primitives.
//!
//! These are the reference implementations: the autodiff graph in
//! [`crate::graph`] and the model code are checked against them, so they
//! stay deliberately direct. Softmax and log-sum-exp subtract the row max
//! before exponentiating; inputs around 1e3 stay finite in tests.

use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

/// Denominator guard for RMS normalization of an all-zero vector.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("non-finite input at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_finite(xs: &[f64]) -> Result<(), NumericsError> {
    for (index, &value) in xs.iter().enumerate() {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { index, value });
        }
    }
    Ok(())
}

/// Numerically stable softmax over one logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::Empty);
    }
    check_finite(logits)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor, NumericsError> {
    let (rows, _cols) = logits.require_matrix()?;
    let mut out = Vec::with_capacity(logits.numel());
    for r in 0..rows {
        out.extend(softmax(logits.row(r)?)?);
    }
    Ok(Tensor::new(logits.shape(), out)?)
}

/// Stable log(sum(exp(x))) over one vector.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64, NumericsError> {
    if xs.is_empty() {
        return Err(NumericsError::Empty);
    }
    check_finite(xs)?;
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Tanh-form Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`] with respect to its input.
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Root-mean-square normalization: y_i = x_i / rms(x) * g_i.
///
/// With `use_scale` false the gain `g` is ignored and the result is the
/// bare normalization. An all-zero input divides by [`RMS_EPS`] instead
/// of producing NaN.
pub fn rms_norm(x: &[f64], g: &[f64], use_scale: bool) -> Result<Vec<f64>, NumericsError> {
    if x.is_empty() {
        return Err(NumericsError::Empty);
    }
    if use_scale && g.len() != x.len() {
        return Err(NumericsError::Tensor(TensorError::ShapeMismatch {
            lhs: vec![x.len()],
            rhs: vec![g.len()],
        }));
    }
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let rms = mean_sq.sqrt().max(RMS_EPS);
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let y = v / rms;
            if use_scale {
                y * g[i]
            } else {
                y
            }
        })
        .collect())
}

/// Plain matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (ar, ac) = a.require_matrix()?;
    let (br, bc) = b.require_matrix()?;
    if ac != br {
        return Err(NumericsError::Tensor(TensorError::InnerDimMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    let mut out = vec![0.0; ar * bc];
    for i in 0..ar {
        for k in 0..ac {
            let aik = a.data()[i * ac + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..bc {
                out[i * bc + j] += aik * b.data()[k * bc + j];
            }
        }
    }
    Ok(Tensor::new(&[ar, bc], out)?)
}

pub fn transpose(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = a.require_matrix()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Ok(Tensor::new(&[c, r], out)?)
}

/// How an expert's learned bias enters the gated feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    None,
    Additive,
    Multiplicative,
}

impl Default for BiasMode {
    fn default() -> Self {
        BiasMode::None
    }
}

/// Feed-forward flavor: gated GELU or the plain ReLU ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Geglu,
    Relu,
}

impl Default for FfnKind {
    fn default() -> Self {
        FfnKind::Geglu
    }
}

/// Gated-GELU feed-forward block over a batch of row vectors.
///
/// h = gelu(x W11) * (x W12), optionally biased, then y = h W2.
/// An additive bias is added to h; a multiplicative bias scales h.
pub fn ffn_geglu(
    x: &Tensor,
    w11: &Tensor,
    w12: &Tensor,
    w2: &Tensor,
    bias_mode: BiasMode,
    bias: Option<&Tensor>,
) -> Result<Tensor, NumericsError> {
    let (_t, d) = x.require_matrix()?;
    let (d11, ff) = w11.require_matrix()?;
    let (d12, ff2) = w12.require_matrix()?;
    let (ffw, dout) = w2.require_matrix()?;
    if d11 != d || d12 != d || ff2 != ff || ffw != ff || dout != d {
        return Err(NumericsError::Tensor(TensorError::ShapeMismatch {
            lhs: x.shape().to_vec(),
            rhs: w11.shape().to_vec(),
        }));
    }
    let gate = matmul(x, w11)?.map(gelu);
    let lin = matmul(x, w12)?;
    let mut h = gate.zip_map(&lin, |a, b| a * b)?;
    match bias_mode {
        BiasMode::None => {
            if bias.is_some() {
                return Err(NumericsError::Tensor(TensorError::ShapeMismatch {
                    lhs: vec![0],
                    rhs: vec![ff],
                }));
            }
        }
        BiasMode::Additive | BiasMode::Multiplicative => {
            let b = bias.ok_or(NumericsError::Empty)?;
            if b.numel() != ff {
                return Err(NumericsError::Tensor(TensorError::ShapeMismatch {
                    lhs: vec![ff],
                    rhs: b.shape().to_vec(),
                }));
            }
            let (rows, cols) = h.require_matrix()?;
            for r in 0..rows {
                for c in 0..cols {
                    let v = h.get2(r, c);
                    let bv = b.data()[c];
                    h.set2(
                        r,
                        c,
                        match bias_mode {
                            BiasMode::Additive => v + bv,
                            BiasMode::Multiplicative => v * bv,
                            BiasMode::None => unreachable!(),
                        },
                    );
                }
            }
        }
    }
    matmul(&h, w2)
}

/// Dense-ReLU-Dense feed-forward block: y = relu(x W1) W2.
pub fn ffn_relu(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor, NumericsError> {
    let (_t, d) = x.require_matrix()?;
    let (d1, ff) = w1.require_matrix()?;
    let (ffw, dout) = w2.require_matrix()?;
    if d1 != d || ffw != ff || dout != d {
        return Err(NumericsError::Tensor(TensorError::ShapeMismatch {
            lhs: x.shape().to_vec(),
            rhs: w1.shape().to_vec(),
        }));
    }
    let h = matmul(x, w1)?.map(|v| v.max(0.0));
    matmul(&h, w2)
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}
