//! Calibrated binarization of encoder hidden states.
//!
//! A hidden state `h` is RMS-normalized with the gain of the norm that opens
//! the first joint encoder layer, and the signs of the normalized values are
//! kept as a [`BitVector`]. The RMS of `h` is kept alongside as a single
//! positive scale, so [`recover`] can restore a vector on the original
//! magnitude: `scale * (±1) / w`.
//!
//! During training the sign is paired with a tanh surrogate gradient
//! (straight-through estimation).

use ndarray::{Array1, Array2, ArrayView1};

use crate::bitvec::{self, BitVector};
use crate::error::{Error, Result};

/// Added inside the RMS so all-zero (padding) tokens stay finite.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Strictly positive norm gains.
#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights(Vec<f64>);

impl NormWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::invalid(format!(
                "norm weight {i} is {w}; binarization requires strictly positive gains"
            )));
        }
        Ok(Self(weights))
    }

    pub fn ones(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// One token: its sign bits and the RMS scale of the pre-norm hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryTokenRep {
    pub bits: BitVector,
    pub scale: f32,
}

impl BinaryTokenRep {
    pub fn new(bits: BitVector, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { bits, scale })
    }

    pub fn dim(&self) -> usize {
        self.bits.dim()
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h != w {
        return Err(Error::invalid(format!(
            "hidden size {h} does not match norm weights of size {w}"
        )));
    }
    Ok(())
}

/// RMS scale `sqrt(mean(h^2) + eps)`.
pub fn rms(h: &[f64], eps: f64) -> f64 {
    let ms = h.iter().map(|v| v * v).sum::<f64>() / h.len().max(1) as f64;
    (ms + eps).sqrt()
}

/// RMS-normalizes `h` and applies gains: `x_i = h_i / scale * w_i`.
pub fn normalize(h: &[f64], w: &NormWeights) -> Result<(Vec<f64>, f64)> {
    normalize_with_eps(h, w, DEFAULT_EPS)
}

pub fn normalize_with_eps(h: &[f64], w: &NormWeights, eps: f64) -> Result<(Vec<f64>, f64)> {
    check_dims(h.len(), w.dim())?;
    if let Some(v) = h.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite hidden value {v}")));
    }
    let scale = rms(h, eps);
    if scale == 0.0 {
        return Err(Error::NumericDegenerate(
            "all-zero hidden state with eps = 0".into(),
        ));
    }
    let x = h
        .iter()
        .zip(w.as_slice())
        .map(|(hv, wv)| hv / scale * wv)
        .collect();
    Ok((x, scale))
}

/// Normalize, then keep signs and the RMS scale.
pub fn binarize(h: &[f64], w: &NormWeights) -> Result<BinaryTokenRep> {
    let (x, scale) = normalize(h, w)?;
    let bits = bitvec::pack(&x, x.len())?;
    BinaryTokenRep::new(bits, scale as f32)
}

/// Restores `scale * (±1) / w_i`, the pre-norm magnitude implied by the bits.
pub fn recover(rep: &BinaryTokenRep, w: &NormWeights) -> Result<Vec<f64>> {
    check_dims(rep.dim(), w.dim())?;
    let scale = rep.scale as f64;
    Ok(w
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, wi)| rep.bits.sign(i) * scale / wi)
        .collect())
}

/// Forward of the straight-through binarizer: strict sign.
pub fn ste_binarize_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect()
}

/// Backward of the straight-through binarizer: `upstream * tanh'(x)`.
pub fn ste_binarize_backward(x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if x.len() != upstream.len() {
        return Err(Error::invalid("ste backward: length mismatch"));
    }
    Ok(x.iter()
        .zip(upstream)
        .map(|(&xv, &g)| g * tanh_grad(xv))
        .collect())
}

#[inline]
pub fn tanh_grad(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

/// Linear recovery head, `b · W + bias`. `W` is `d_in × d_out`.
pub fn recovery_head(
    b: ArrayView1<f64>,
    proj_weights: &Array2<f64>,
    proj_bias: &Array1<f64>,
) -> Result<Array1<f64>> {
    if proj_weights.nrows() != b.len() || proj_weights.ncols() != proj_bias.len() {
        return Err(Error::invalid(format!(
            "recovery head shape {:?} incompatible with input {} and bias {}",
            proj_weights.dim(),
            b.len(),
            proj_bias.len()
        )));
    }
    Ok(b.dot(proj_weights) + proj_bias)
}

/// Mean squared difference between the projection and the pre-binarization state.
pub fn recovery_loss(projected: ArrayView1<f64>, h_pre: ArrayView1<f64>) -> Result<f64> {
    if projected.len() != h_pre.len() || projected.is_empty() {
        return Err(Error::invalid("recovery loss: shape mismatch"));
    }
    let d = projected.len() as f64;
    Ok(projected
        .iter()
        .zip(h_pre)
        .map(|(p, h)| (h - p) * (h - p))
        .sum::<f64>()
        / d)
}

/// Gradients of the recovery loss for one token.
#[derive(Debug, Clone)]
pub struct RecoveryGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// With respect to the binary input `b` (before the straight-through step).
    pub input: Array1<f64>,
    /// With respect to the pre-binarization state.
    pub h_pre: Array1<f64>,
}

/// Analytic gradient of `recovery_loss(recovery_head(b, W, bias), h_pre)`.
pub fn recovery_loss_grad(
    b: ArrayView1<f64>,
    proj_weights: &Array2<f64>,
    proj_bias: &Array1<f64>,
    h_pre: ArrayView1<f64>,
) -> Result<(f64, RecoveryGrads)> {
    let projected = recovery_head(b, proj_weights, proj_bias)?;
    let loss = recovery_loss(projected.view(), h_pre)?;
    let d = projected.len() as f64;
    // dL/dproj = -2/d (h - proj)
    let dproj = (&projected - &h_pre) * (2.0 / d);
    let weights = b
        .to_owned()
        .insert_axis(ndarray::Axis(1))
        .dot(&dproj.view().insert_axis(ndarray::Axis(0)));
    let input = proj_weights.dot(&dproj);
    let h_pre_grad = -&dproj;
    Ok((
        loss,
        RecoveryGrads {
            weights,
            bias: dproj,
            input,
            h_pre: h_pre_grad,
        },
    ))
}
