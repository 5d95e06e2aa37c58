//! Dense, batch-norm and softmax building blocks with explicit backwards.
//!
//! Everything works on row-major batches: shape `(rows, features)` where a
//! row is one frame (encoder) or one video (heads). Backward passes take the
//! cached forward state and accumulate into gradient buffers; nothing here
//! owns an optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply_inplace(self, x: &mut Array2<f64>) {
        match self {
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Derivative evaluated from the activation *output*.
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine map `y = x W^T + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Dense {
    /// `(out, in)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn xavier(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound));
        Dense {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn zero_grad(&self) -> DenseGrad {
        DenseGrad {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        grad_y: ArrayView2<'_, f64>,
        grad: &mut DenseGrad,
    ) -> Array2<f64> {
        grad.w += &grad_y.t().dot(&x);
        grad.b += &grad_y.sum_axis(Axis(0));
        grad_y.dot(&self.w)
    }
}

/// Batch normalization over the row (batch) dimension.
///
/// Training normalizes with biased batch statistics and folds them into the
/// running averages with keep-factor `momentum`; evaluation normalizes with
/// the running averages.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Forward state needed by the batch backward.
#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized inputs (before scale/shift).
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grad(&self) -> BnGrad {
        BnGrad {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }

    /// Training-mode forward with batch statistics; updates the running
    /// averages.
    pub fn forward_train(&mut self, x: ArrayView2<'_, f64>) -> (Array2<f64>, BnCache) {
        let rows = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let mut var = Array1::zeros(x.ncols());
        for row in x.rows() {
            for (j, v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var /= rows;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.to_owned();
        for mut row in xhat.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = row[j] * self.gamma[j] + self.beta[j];
            }
        }
        let m = self.momentum;
        self.running_mean.zip_mut_with(&mean, |r, &b| *r = m * *r + (1.0 - m) * b);
        self.running_var.zip_mut_with(&var, |r, &b| *r = m * *r + (1.0 - m) * b);
        (out, BnCache { xhat, inv_std })
    }

    /// Evaluation-mode forward with the running averages.
    pub fn forward_eval(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                let inv = 1.0 / (self.running_var[j] + self.eps).sqrt();
                row[j] = (row[j] - self.running_mean[j]) * inv * self.gamma[j] + self.beta[j];
            }
        }
        out
    }

    /// Batch backward; returns the input gradient.
    pub fn backward(
        &self,
        cache: &BnCache,
        grad_out: ArrayView2<'_, f64>,
        grad: &mut BnGrad,
    ) -> Array2<f64> {
        let rows = grad_out.nrows() as f64;
        let cols = grad_out.ncols();
        // parameter gradients
        for (row_g, row_x) in grad_out.rows().into_iter().zip(cache.xhat.rows()) {
            for j in 0..cols {
                grad.gamma[j] += row_g[j] * row_x[j];
                grad.beta[j] += row_g[j];
            }
        }
        // input gradient: dxhat = dout * gamma;
        // dx = inv_std/B * (B*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
        let mut sum_dxhat = Array1::<f64>::zeros(cols);
        let mut sum_dxhat_xhat = Array1::<f64>::zeros(cols);
        for (row_g, row_x) in grad_out.rows().into_iter().zip(cache.xhat.rows()) {
            for j in 0..cols {
                let dxh = row_g[j] * self.gamma[j];
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * row_x[j];
            }
        }
        let mut grad_x = Array2::zeros(grad_out.dim());
        for i in 0..grad_out.nrows() {
            for j in 0..cols {
                let dxh = grad_out[[i, j]] * self.gamma[j];
                grad_x[[i, j]] = cache.inv_std[j] / rows
                    * (rows * dxh - sum_dxhat[j] - cache.xhat[[i, j]] * sum_dxhat_xhat[j]);
            }
        }
        grad_x
    }
}

/// Row-wise softmax with max subtraction. Each output row sums to 1.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Softmax backward for one row: `dlogits = p .* dp - p * <p, dp>`.
pub fn softmax_backward_row(probs: &[f64], grad_probs: &[f64], out: &mut [f64]) {
    let inner: f64 = probs
        .iter()
        .zip(grad_probs.iter())
        .map(|(p, g)| p * g)
        .sum();
    for ((o, p), g) in out.iter_mut().zip(probs.iter()).zip(grad_probs.iter()) {
        *o = p * (g - inner);
    }
}
