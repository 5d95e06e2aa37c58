//! Per-node Gram matrices and their simplex-weighted combinations.
//!
//! The shallow path freezes the per-node mean descriptors and learns a
//! kernel machine on top. Every node gets an elementary kernel; the combined
//! kernel is either a convex combination of the per-node Grams (matching
//! concatenation in feature space) or a doubly-weighted sum over node pairs
//! (matching the averaged feature map). Both stay positive semidefinite for
//! any simplex weight vector.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementary per-node kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Gaussian { sigma: f64 },
}

impl KernelKind {
    pub fn eval(self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        match self {
            KernelKind::Linear => x.dot(&y),
            KernelKind::Gaussian { sigma } => {
                let mut sq = 0.0;
                for (a, b) in x.iter().zip(y.iter()) {
                    let d = a - b;
                    sq += d * d;
                }
                (-sq / (2.0 * sigma * sigma)).exp()
            }
        }
    }
}

/// How per-node kernels are combined into the video-level kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComboVariant {
    /// Single sum over nodes, weights enter linearly.
    LinearCombo,
    /// Double sum over node pairs, weights enter as products.
    CrossCombo,
}

/// All per-node (and, for the cross variant, per node-pair) Gram matrices of
/// one training set.
#[derive(Debug, Clone)]
pub struct GramStack {
    node_count: usize,
    n: usize,
    kind: KernelKind,
    cross: bool,
    /// `node_count` matrices for the linear variant (each node against
    /// itself), or `node_count^2` matrices indexed `a * node_count + b` for
    /// the cross variant, where entry `(i, j)` is the kernel between node `a`
    /// of video `i` and node `b` of video `j`.
    grams: Vec<Array2<f64>>,
}

impl GramStack {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Number of videos.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn is_cross(&self) -> bool {
        self.cross
    }

    /// Gram of node `a` against itself.
    pub fn gram(&self, a: usize) -> &Array2<f64> {
        if self.cross {
            &self.grams[a * self.node_count + a]
        } else {
            &self.grams[a]
        }
    }

    /// Gram of node `a` (rows) against node `b` (columns). Only stored for
    /// the cross variant.
    pub fn cross_gram(&self, a: usize, b: usize) -> &Array2<f64> {
        assert!(self.cross, "node-pair grams only exist for the cross variant");
        &self.grams[a * self.node_count + b]
    }
}

fn check_descriptor_set(descriptors: &[Array2<f64>]) -> Result<(usize, usize)> {
    let first = descriptors
        .first()
        .ok_or_else(|| Error::invalid("need at least one descriptor matrix"))?;
    let shape = (first.nrows(), first.ncols());
    for (i, d) in descriptors.iter().enumerate() {
        if (d.nrows(), d.ncols()) != shape {
            return Err(Error::invalid(format!(
                "descriptor {} has shape {}x{}, expected {}x{}",
                i,
                d.nrows(),
                d.ncols(),
                shape.0,
                shape.1
            )));
        }
    }
    Ok(shape)
}

/// Build the Gram stack for a descriptor set (one `node_count x d` matrix
/// per video). For `CrossCombo` all node pairs are materialized.
pub fn compute_grams(
    descriptors: &[Array2<f64>],
    kind: KernelKind,
    variant: ComboVariant,
) -> Result<GramStack> {
    let (node_count, _) = check_descriptor_set(descriptors)?;
    let n = descriptors.len();
    let cross = variant == ComboVariant::CrossCombo;
    let pairs: Vec<(usize, usize)> = if cross {
        (0..node_count)
            .flat_map(|a| (0..node_count).map(move |b| (a, b)))
            .collect()
    } else {
        (0..node_count).map(|a| (a, a)).collect()
    };
    let mut grams = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let mut g = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                g[[i, j]] = kind.eval(descriptors[i].row(a), descriptors[j].row(b));
            }
        }
        grams.push(g);
    }
    Ok(GramStack {
        node_count,
        n,
        kind,
        cross,
        grams,
    })
}

fn check_combo_weights(gs: &GramStack, weights: ArrayView1<'_, f64>) -> Result<()> {
    if weights.len() != gs.node_count {
        return Err(Error::invalid(format!(
            "{} weights for {} nodes",
            weights.len(),
            gs.node_count
        )));
    }
    Ok(())
}

/// `K = sum_a weights[a] * gram_a`. PSD for nonnegative weights.
pub fn combine_linear(gs: &GramStack, weights: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    check_combo_weights(gs, weights)?;
    let mut k = Array2::zeros((gs.n, gs.n));
    for a in 0..gs.node_count {
        k.scaled_add(weights[a], gs.gram(a));
    }
    Ok(k)
}

/// `K = sum_{a,b} weights[a] * weights[b] * gram_ab`. Equals the Gram of the
/// weighted-average feature map when the elementary kernel is linear.
pub fn combine_cross(gs: &GramStack, weights: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    check_combo_weights(gs, weights)?;
    if !gs.cross {
        return Err(Error::invalid(
            "gram stack was built for the linear variant; rebuild with CrossCombo",
        ));
    }
    let mut k = Array2::zeros((gs.n, gs.n));
    for a in 0..gs.node_count {
        for b in 0..gs.node_count {
            let w = weights[a] * weights[b];
            if w != 0.0 {
                k.scaled_add(w, gs.cross_gram(a, b));
            }
        }
    }
    Ok(k)
}

/// Combined kernel between two single videos' descriptor matrices.
pub fn combined_kernel_value(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    kind: KernelKind,
    variant: ComboVariant,
) -> f64 {
    match variant {
        ComboVariant::LinearCombo => (0..x.nrows())
            .map(|a| weights[a] * kind.eval(x.row(a), y.row(a)))
            .sum(),
        ComboVariant::CrossCombo => {
            let mut total = 0.0;
            for a in 0..x.nrows() {
                for b in 0..y.nrows() {
                    total += weights[a] * weights[b] * kind.eval(x.row(a), y.row(b));
                }
            }
            total
        }
    }
}

/// Median pairwise euclidean distance between node descriptors, the default
/// gaussian bandwidth.
pub fn median_pairwise_distance(descriptors: &[Array2<f64>]) -> Result<f64> {
    check_descriptor_set(descriptors)?;
    let rows: Vec<ArrayView1<'_, f64>> = descriptors
        .iter()
        .flat_map(|d| d.rows().into_iter())
        .collect();
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let mut sq = 0.0;
            for (a, b) in rows[i].iter().zip(rows[j].iter()) {
                let d = a - b;
                sq += d * d;
            }
            dists.push(sq.sqrt());
        }
    }
    if dists.is_empty() {
        return Err(Error::invalid("need at least two descriptor rows"));
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(dists[dists.len() / 2])
}

/// Add `1e-10 * trace / n` to the diagonal; guards the solvers against
/// eigenvalue round-off.
pub fn jitter_diagonal(gram: &mut Array2<f64>) {
    let n = gram.nrows();
    if n == 0 {
        return;
    }
    let jitter = 1e-10 * gram.diag().sum() / n as f64;
    for i in 0..n {
        gram[[i, i]] += jitter;
    }
}

/// Gram of the explicitly averaged feature map `sum_a weights[a] * row_a`.
/// Independent route used to cross-check `combine_cross` under the linear
/// kernel.
pub fn averaged_map_gram(
    descriptors: &[Array2<f64>],
    weights: ArrayView1<'_, f64>,
) -> Array2<f64> {
    let n = descriptors.len();
    let maps: Vec<Array1<f64>> = descriptors
        .iter()
        .map(|d| {
            let mut v = Array1::zeros(d.ncols());
            for (a, w) in weights.iter().enumerate() {
                v.scaled_add(*w, &d.row(a));
            }
            v
        })
        .collect();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            k[[i, j]] = maps[i].dot(&maps[j]);
        }
    }
    k
}
