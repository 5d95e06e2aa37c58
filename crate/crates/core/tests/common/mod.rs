//! Shared oracles for the integration suites. Everything here is
//! deliberately independent of the library's computation paths.

use ndarray::{Array1, Array2};
use rand::Rng;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
///
/// Plain textbook iteration, plenty for the small Gram matrices the tests
/// feed it; keeps the PSD checks independent of any library solver.
pub fn symmetric_eigenvalues(matrix: &Array2<f64>) -> Vec<f64> {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "matrix must be square");
    let mut a = matrix.clone();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[[p, q]].abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).collect()
}

pub fn min_eigenvalue(matrix: &Array2<f64>) -> f64 {
    symmetric_eigenvalues(matrix)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Random point on the probability simplex (softmax of uniform draws).
#[allow(dead_code)]
pub fn random_simplex(n: usize, rng: &mut impl Rng) -> Array1<f64> {
    let free: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let max = free.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = free.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Array1::from(exps.into_iter().map(|v| v / sum).collect::<Vec<_>>())
}

#[allow(dead_code)]
pub fn print_line(index: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {:02} {:<28} {} ({detail})",
        index,
        name,
        if pass { "PASS" } else { "FAIL" }
    );
}
