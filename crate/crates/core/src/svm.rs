//! Soft-margin SVM dual solver (SMO with maximal-violating-pair selection).
//!
//! Solves, for one binary problem over a precomputed kernel matrix,
//!
//! ```text
//! max_a  sum_i a_i - 1/2 sum_ij a_i a_j y_i y_j K_ij
//! s.t.   0 <= a_i <= C,   sum_i y_i a_i = 0
//! ```
//!
//! by repeatedly optimizing the most violating pair of dual variables in
//! closed form. No external solver; the kernel matrix is the only input.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    /// Soft-margin box bound.
    pub box_c: f64,
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            box_c: 10.0,
            tol: 1e-5,
            max_iter: 100_000,
        }
    }
}

/// Solution of one binary dual problem.
#[derive(Debug, Clone)]
pub struct BinaryDual {
    pub alpha: Vec<f64>,
    pub bias: f64,
    /// Dual objective value at the solution (the max form above).
    pub objective: f64,
    pub iterations: usize,
    /// Final maximal KKT violation (`<= tol` iff converged).
    pub kkt_violation: f64,
    pub converged: bool,
}

impl BinaryDual {
    /// Decision value for a row of kernel evaluations against the training
    /// set: `sum_i alpha_i y_i k_i + b`.
    pub fn decision(&self, labels: &[f64], kernel_row: &[f64]) -> f64 {
        self.alpha
            .iter()
            .zip(labels.iter())
            .zip(kernel_row.iter())
            .map(|((a, y), k)| a * y * k)
            .sum::<f64>()
            + self.bias
    }
}

/// Solve the soft-margin dual for one class. `labels` must be +-1 with both
/// signs present; `gram` must be symmetric PSD (jitter it beforehand if it
/// came out of a long float pipeline).
pub fn solve_alpha(
    gram: ArrayView2<'_, f64>,
    labels: &[f64],
    params: SvmParams,
) -> Result<BinaryDual> {
    let n = labels.len();
    if gram.nrows() != n || gram.ncols() != n {
        return Err(Error::invalid(format!(
            "gram is {}x{}, labels have {n} entries",
            gram.nrows(),
            gram.ncols()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two training points"));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::invalid("labels must be +1 or -1"));
    }
    if labels.iter().all(|&y| y == 1.0) || labels.iter().all(|&y| y == -1.0) {
        return Err(Error::invalid(
            "one-vs-rest problem needs a positive and a negative example",
        ));
    }
    if !params.box_c.is_finite() || params.box_c <= 0.0 {
        return Err(Error::invalid("box bound must be positive"));
    }

    let c = params.box_c;
    let mut alpha = vec![0.0f64; n];
    // gradient of 1/2 a'Qa - sum(a) with Q_ij = y_i y_j K_ij; at a = 0 it is -1
    let mut grad = vec![-1.0f64; n];

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < params.max_iter {
        // maximal violating pair over -y*grad:
        //   up-candidates can grow along +y, low-candidates along -y
        let mut i_up = None;
        let mut m_up = f64::NEG_INFINITY;
        let mut j_low = None;
        let mut m_low = f64::INFINITY;
        for k in 0..n {
            let yk = labels[k];
            let v = -yk * grad[k];
            let can_up = (yk > 0.0 && alpha[k] < c) || (yk < 0.0 && alpha[k] > 0.0);
            let can_low = (yk > 0.0 && alpha[k] > 0.0) || (yk < 0.0 && alpha[k] < c);
            if can_up && v > m_up {
                m_up = v;
                i_up = Some(k);
            }
            if can_low && v < m_low {
                m_low = v;
                j_low = Some(k);
            }
        }
        violation = m_up - m_low;
        if violation <= params.tol {
            break;
        }
        let (i, j) = match (i_up, j_low) {
            (Some(i), Some(j)) if i != j => (i, j),
            _ => break,
        };

        // closed-form step along (e_i * y_i - e_j * y_j)
        let quad = (gram[[i, i]] + gram[[j, j]] - 2.0 * gram[[i, j]]).max(1e-12);
        let mut delta = violation / quad;
        let (yi, yj) = (labels[i], labels[j]);
        // keep both coordinates inside the box
        let (lo_i, hi_i) = if yi > 0.0 {
            (-alpha[i], c - alpha[i])
        } else {
            (alpha[i] - c, alpha[i])
        };
        let (lo_j, hi_j) = if yj > 0.0 {
            (alpha[j] - c, alpha[j])
        } else {
            (-alpha[j], c - alpha[j])
        };
        delta = delta.min(hi_i).min(hi_j).max(lo_i).max(lo_j);
        if delta.abs() <= f64::EPSILON {
            break;
        }
        alpha[i] += yi * delta;
        alpha[j] -= yj * delta;
        for k in 0..n {
            grad[k] += delta * labels[k] * (gram[[k, i]] - gram[[k, j]]);
        }
        iterations += 1;
    }

    // bias from free support vectors; fallback to the violation midpoint
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    for k in 0..n {
        if alpha[k] > 1e-8 * c && alpha[k] < c * (1.0 - 1e-8) {
            free_sum += -labels[k] * grad[k];
            free_count += 1;
        }
    }
    let bias = if free_count > 0 {
        free_sum / free_count as f64
    } else {
        let mut m_up = f64::NEG_INFINITY;
        let mut m_low = f64::INFINITY;
        for k in 0..n {
            let yk = labels[k];
            let v = -yk * grad[k];
            let can_up = (yk > 0.0 && alpha[k] < c) || (yk < 0.0 && alpha[k] > 0.0);
            let can_low = (yk > 0.0 && alpha[k] > 0.0) || (yk < 0.0 && alpha[k] < c);
            if can_up {
                m_up = m_up.max(v);
            }
            if can_low {
                m_low = m_low.min(v);
            }
        }
        0.5 * (m_up + m_low)
    };

    // dual value: sum(a) - 1/2 a'Qa, with a'Qa = a'grad + sum(a)
    let sum_a: f64 = alpha.iter().sum();
    let a_dot_grad: f64 = alpha.iter().zip(grad.iter()).map(|(a, g)| a * g).sum();
    let objective = 0.5 * (sum_a - a_dot_grad);

    let converged = violation <= params.tol;
    if !converged && iterations >= params.max_iter {
        return Err(Error::numerical(format!(
            "SMO hit the iteration cap ({}) with KKT violation {violation:.3e}",
            params.max_iter
        )));
    }

    Ok(BinaryDual {
        alpha,
        bias,
        objective,
        iterations,
        kkt_violation: violation.max(0.0),
        converged,
    })
}

/// One-vs-rest labels for class `c`: `+1` where `labels[i] == c`, else `-1`.
pub fn one_vs_rest_labels(labels: &[usize], class: usize) -> Vec<f64> {
    labels
        .iter()
        .map(|&l| if l == class { 1.0 } else { -1.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_gram(points: &[Vec<f64>]) -> Array2<f64> {
        let n = points.len();
        Array2::from_shape_fn((n, n), |(i, j)| {
            points[i].iter().zip(points[j].iter()).map(|(a, b)| a * b).sum()
        })
    }

    #[test]
    fn two_point_problem_has_analytic_solution() {
        // x = +1 (y=+1), x = -1 (y=-1): alpha = (1/2, 1/2), b = 0
        let gram = arr2(&[[1.0, -1.0], [-1.0, 1.0]]);
        let sol = solve_alpha(gram.view(), &[1.0, -1.0], SvmParams::default()).unwrap();
        assert!((sol.alpha[0] - 0.5).abs() < 1e-6, "{:?}", sol.alpha);
        assert!((sol.alpha[1] - 0.5).abs() < 1e-6);
        assert!(sol.bias.abs() < 1e-6);
        assert!(sol.converged);
    }

    #[test]
    fn all_same_label_is_rejected() {
        let gram = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(solve_alpha(gram.view(), &[1.0, 1.0], SvmParams::default()).is_err());
    }

    #[test]
    fn kkt_conditions_hold_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 30;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let shift = if i < n / 2 { 1.0 } else { -1.0 };
                (0..3).map(|_| rng.random_range(-1.0..1.0) + shift).collect()
            })
            .collect();
        let labels: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
        let gram = linear_gram(&points);
        let params = SvmParams::default();
        let sol = solve_alpha(gram.view(), &labels, params).unwrap();

        // box
        assert!(sol
            .alpha
            .iter()
            .all(|&a| (-1e-12..=params.box_c + 1e-12).contains(&a)));
        // equality constraint
        let eq: f64 = sol.alpha.iter().zip(labels.iter()).map(|(a, y)| a * y).sum();
        assert!(eq.abs() <= 1e-8, "equality residual {eq}");
        // complementary slackness within tolerance
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| gram[[i, j]]).collect();
            let margin = labels[i] * sol.decision(&labels, &row);
            if sol.alpha[i] < 1e-8 {
                assert!(margin >= 1.0 - 1e-4, "zero alpha but margin {margin}");
            } else if sol.alpha[i] > params.box_c - 1e-8 {
                assert!(margin <= 1.0 + 1e-4, "bound alpha but margin {margin}");
            } else {
                assert!((margin - 1.0).abs() <= 1e-4, "free sv margin {margin}");
            }
        }
    }

    #[test]
    fn margin_support_vector_sits_on_margin() {
        let gram = arr2(&[[1.0, -1.0], [-1.0, 1.0]]);
        let labels = [1.0, -1.0];
        let sol = solve_alpha(gram.view(), &labels, SvmParams::default()).unwrap();
        let row0: Vec<f64> = vec![gram[[0, 0]], gram[[0, 1]]];
        let margin = labels[0] * sol.decision(&labels, &row0);
        assert!((margin - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn duplicated_separable_dataset_keeps_decision_function() {
        // separable with inactive box: duplicating every point leaves the
        // primal solution (and so all decision values) unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let shift = if i % 2 == 0 { 3.0 } else { -3.0 };
                (0..2).map(|_| rng.random_range(-0.5..0.5) + shift).collect()
            })
            .collect();
        let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let params = SvmParams {
            box_c: 1e6,
            tol: 1e-8,
            ..SvmParams::default()
        };

        let gram = linear_gram(&points);
        let single = solve_alpha(gram.view(), &labels, params).unwrap();
        assert!(single.alpha.iter().all(|&a| a < params.box_c * 0.5));

        let mut doubled = points.clone();
        doubled.extend(points.iter().cloned());
        let mut labels2 = labels.clone();
        labels2.extend(labels.iter().copied());
        let gram2 = linear_gram(&doubled);
        let double = solve_alpha(gram2.view(), &labels2, params).unwrap();

        let tests: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..2).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        for t in &tests {
            let row1: Vec<f64> = points
                .iter()
                .map(|p| p.iter().zip(t.iter()).map(|(a, b)| a * b).sum())
                .collect();
            let row2: Vec<f64> = doubled
                .iter()
                .map(|p| p.iter().zip(t.iter()).map(|(a, b)| a * b).sum())
                .collect();
            let d1 = single.decision(&labels, &row1);
            let d2 = double.decision(&labels2, &row2);
            assert!((d1 - d2).abs() <= 1e-4, "{d1} vs {d2}");
        }
    }

    #[test]
    fn objective_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let shift = if i % 2 == 0 { 0.8 } else { -0.8 };
                (0..2).map(|_| rng.random_range(-1.0..1.0) + shift).collect()
            })
            .collect();
        let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let gram = linear_gram(&points);
        let sol = solve_alpha(gram.view(), &labels, SvmParams::default()).unwrap();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += sol.alpha[i] * sol.alpha[j] * labels[i] * labels[j] * gram[[i, j]];
            }
        }
        let direct: f64 = sol.alpha.iter().sum::<f64>() - 0.5 * quad;
        assert!((direct - sol.objective).abs() <= 1e-8);
    }
}
