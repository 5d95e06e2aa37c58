//! Simplex-constrained weights via the exp reparametrization.
//!
//! Node weights (and the two-stream fusion weights) live on the probability
//! simplex. Instead of projecting after every step, the constrained weights
//! are written as a softmax of free parameters, so any unconstrained update
//! of the free vector keeps the normalized weights exactly feasible.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// A bundle of free parameters together with their normalized weights.
///
/// `weights == softmax(free)` holds after every mutation; entries are in
/// `(0, 1]` and sum to 1 up to rounding.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimplexWeights {
    free: Array1<f64>,
    weights: Array1<f64>,
}

impl SimplexWeights {
    /// Uniform bundle of `n` weights (all free parameters zero).
    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_free(Array1::zeros(n))
    }

    pub fn from_free(free: Array1<f64>) -> Result<Self> {
        let weights = normalize(free.view())?;
        Ok(SimplexWeights { free, weights })
    }

    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn free(&self) -> ArrayView1<'_, f64> {
        self.free.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    /// Replace the free parameters, renormalizing.
    pub fn set_free(&mut self, free: Array1<f64>) -> Result<()> {
        self.weights = normalize(free.view())?;
        self.free = free;
        Ok(())
    }

    /// Gradient-style update `free -= step * grad_free`, renormalizing.
    pub fn step(&mut self, grad_free: ArrayView1<'_, f64>, step: f64) -> Result<()> {
        if grad_free.len() != self.free.len() {
            return Err(Error::invalid("gradient length mismatch"));
        }
        self.free.scaled_add(-step, &grad_free);
        self.weights = normalize(self.free.view())?;
        Ok(())
    }

    /// Pull a loss gradient on the normalized weights back to the free
    /// parameters. See [`backprop_through_simplex`].
    pub fn backprop(&self, grad_weights: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        backprop_through_simplex(grad_weights, self.weights.view())
    }
}

/// Max-subtracted softmax. Entries of the result are in `(0, 1]` and sum
/// to 1; shifting the input by a constant leaves the output unchanged.
pub fn normalize(free: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if free.is_empty() {
        return Err(Error::invalid("cannot normalize an empty weight vector"));
    }
    if free.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("free weights contain non-finite values"));
    }
    let max = free.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = free.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    Ok(out)
}

/// Jacobian of the softmax at the normalized point: entry `(p, j)` is
/// `d weights[p] / d free[j] = weights[j] * (delta(p,j) - weights[p])`.
/// The matrix is symmetric and its columns sum to zero.
pub fn jacobian(weights: ArrayView1<'_, f64>) -> Array2<f64> {
    let n = weights.len();
    let mut out = Array2::zeros((n, n));
    for p in 0..n {
        for j in 0..n {
            let delta = if p == j { 1.0 } else { 0.0 };
            out[[p, j]] = weights[j] * (delta - weights[p]);
        }
    }
    out
}

/// Chain-rule transfer through the softmax without materializing the
/// Jacobian: `grad_free[j] = weights[j] * (grad_weights[j] - <grad_weights, weights>)`.
pub fn backprop_through_simplex(
    grad_weights: ArrayView1<'_, f64>,
    weights: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    if grad_weights.len() != weights.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries, weights have {}",
            grad_weights.len(),
            weights.len()
        )));
    }
    let inner = grad_weights.dot(&weights);
    Ok(ndarray::Zip::from(grad_weights)
        .and(weights)
        .map_collect(|&g, &w| w * (g - inner)))
}
