use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

pub const PROB_EPS: f64 = 1e-7;

/// Time-distributed `σ(w·state + b)` over the rows of `states: [T × K]`.
pub fn sigmoid_head<F: Real>(w: &Tensor<F>, b: F, states: &Tensor<F>) -> Result<Tensor<F>> {
    let [t, k] = states.shape() else {
        return Err(Error::Shape(format!(
            "states must be [T × K], got {:?}",
            states.shape()
        )));
    };
    w.expect_shape("head W", &[1, *k])?;
    let probs = states
        .data()
        .chunks(*k)
        .map(|row| (row.iter().zip(w.data()).map(|(a, b)| *a * *b).sum::<F>() + b).sigmoid())
        .collect();
    Tensor::new(vec![*t], probs)
}

pub(crate) fn check_label<F: Real>(y: F) -> Result<()> {
    if y == F::ZERO || y == F::ONE {
        Ok(())
    } else {
        Err(Error::Config(format!("label {y:?} is not 0 or 1")))
    }
}

/// Mean binary cross-entropy over the first `mask` positions, with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`. Returns the loss and its
/// gradient with respect to `probs` (zero beyond `mask` and where clamped).
pub fn masked_bce<F: Real>(probs: &[F], labels: &[F], mask: usize) -> Result<(F, Vec<F>)> {
    if mask == 0 {
        return Err(Error::Config("mask must be at least 1".into()));
    }
    if probs.len() != labels.len() || mask > probs.len() {
        return Err(Error::Shape(format!(
            "probs {} / labels {} / mask {mask}",
            probs.len(),
            labels.len()
        )));
    }
    for &y in labels {
        check_label(y)?;
    }
    let lo = F::from_f64(PROB_EPS);
    let hi = F::ONE - lo;
    let scale = F::ONE / F::from_f64(mask as f64);
    let mut loss = F::ZERO;
    let mut grad = vec![F::ZERO; probs.len()];
    for t in 0..mask {
        let (p, y) = (probs[t], labels[t]);
        let clamped = if p < lo {
            lo
        } else if p > hi {
            hi
        } else {
            p
        };
        loss -= y * clamped.ln() + (F::ONE - y) * (F::ONE - clamped).ln();
        if clamped == p {
            grad[t] = (-y / p + (F::ONE - y) / (F::ONE - p)) * scale;
        }
    }
    Ok((loss * scale, grad))
}
