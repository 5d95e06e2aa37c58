//! Gram-matrix checks against the independent eigensolver oracle.

mod common;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::min_eigenvalue;
use pyra_core::kernel::{compute_grams, ComboVariant, KernelKind};

#[test]
fn per_node_grams_are_psd_on_random_descriptor_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for kind in [KernelKind::Linear, KernelKind::Gaussian { sigma: 0.9 }] {
        let descriptors: Vec<Array2<f64>> = (0..10)
            .map(|_| Array2::from_shape_fn((7, 4), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let gs = compute_grams(&descriptors, kind, ComboVariant::LinearCombo).unwrap();
        for a in 0..gs.node_count() {
            let gram = gs.gram(a);
            // symmetry is exact by construction
            for i in 0..gram.nrows() {
                for j in 0..i {
                    assert_eq!(gram[[i, j]], gram[[j, i]]);
                }
            }
            let floor = -1e-8 * f64::max(1.0, gram.diag().sum() / gram.nrows() as f64);
            let min_eig = min_eigenvalue(gram);
            assert!(
                min_eig >= floor,
                "{kind:?} node {a}: min eigenvalue {min_eig} below {floor}"
            );
        }
    }
}
