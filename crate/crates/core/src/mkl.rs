//! Alternating optimization of dual variables and node weights.
//!
//! Training alternates two half-steps:
//!
//! 1. with the node weights fixed, solve the one-vs-rest soft-margin dual
//!    for every class on the combined kernel;
//! 2. with the duals fixed, move the node weights to reduce the optimal-value
//!    objective `sum_c [sum_i a_i - 1/2 (a*y)' K_w (a*y)]`. Only the
//!    quadratic term depends on the weights, through the per-node
//!    discriminant norms `s_a = sum_c (a*y)' G_a (a*y)`, so the weight
//!    half-step minimizes `-1/2 * <s, w>` (linear variant) or
//!    `-1/2 * w' S w` (cross variant) over the simplex.
//!
//! Descent on that optimal-value function pushes mass toward nodes whose
//! feature space separates the classes (a node blind to the labels has
//! `s_a ~ 0` because of the dual equality constraint), which is what makes
//! the learned weight distribution meaningful.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    combine_cross, combine_linear, combined_kernel_value, compute_grams, jitter_diagonal,
    ComboVariant, GramStack, KernelKind,
};
use crate::svm::{one_vs_rest_labels, solve_alpha, BinaryDual, SvmParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MklParams {
    pub variant: ComboVariant,
    pub kind: KernelKind,
    pub svm: SvmParams,
    /// Cap on the number of alternation rounds.
    pub max_iters: usize,
    /// Stop when both the weights and every dual variable move less than
    /// this between rounds.
    pub tol: f64,
    /// Optional entropic damping of the weight half-step: adds
    /// `lambda * sum w ln w` to the weight subproblem, spreading mass that a
    /// pure vertex solution would collapse.
    pub entropy_damping: Option<f64>,
}

impl Default for MklParams {
    fn default() -> Self {
        MklParams {
            variant: ComboVariant::LinearCombo,
            kind: KernelKind::Linear,
            svm: SvmParams::default(),
            max_iters: 50,
            tol: 1e-6,
            entropy_damping: None,
        }
    }
}

/// Enabled entropic damping strength used when the caller asks for damping
/// without picking a value.
pub const DEFAULT_ENTROPY_DAMPING: f64 = 0.01;

/// Trained kernel machine: node weights, per-class duals, and everything
/// needed to score new videos.
#[derive(Debug, Clone)]
pub struct KernelModel {
    pub variant: ComboVariant,
    pub kind: KernelKind,
    pub box_c: f64,
    pub classes: usize,
    pub weights: Array1<f64>,
    pub duals: Vec<BinaryDual>,
    /// Training descriptors and labels (the duals index into these).
    pub train_descriptors: Vec<Array2<f64>>,
    pub train_labels: Vec<usize>,
    /// Optimal-value objective recorded after every dual half-step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-node discriminant norms `s_a` (linear variant) or their node-pair
/// matrix `S_ab` (cross variant) at fixed duals.
fn discriminant_terms(gs: &GramStack, duals: &[BinaryDual], labels: &[usize]) -> Array2<f64> {
    let nodes = gs.node_count();
    let mut s = Array2::zeros((nodes, nodes));
    for (class, dual) in duals.iter().enumerate() {
        let y = one_vs_rest_labels(labels, class);
        let v: Array1<f64> = dual
            .alpha
            .iter()
            .zip(y.iter())
            .map(|(a, yy)| a * yy)
            .collect();
        if gs.is_cross() {
            for a in 0..nodes {
                for b in 0..nodes {
                    s[[a, b]] += v.dot(&gs.cross_gram(a, b).dot(&v));
                }
            }
        } else {
            for a in 0..nodes {
                s[[a, a]] += v.dot(&gs.gram(a).dot(&v));
            }
        }
    }
    s
}

/// Minimize a linear objective `<coeff, w>` over the probability simplex:
/// the optimum sits on the vertex of the smallest coefficient. With entropic
/// damping the solution smooths into the Gibbs weights
/// `w_a ∝ exp(-coeff_a / lambda)`.
pub fn minimize_linear_over_simplex(coeff: ArrayView1<'_, f64>, damping: Option<f64>) -> Array1<f64> {
    let n = coeff.len();
    match damping {
        None => {
            let mut best = 0;
            for a in 1..n {
                if coeff[a] < coeff[best] {
                    best = a;
                }
            }
            let mut w = Array1::zeros(n);
            w[best] = 1.0;
            w
        }
        Some(lambda) => {
            let free = coeff.mapv(|c| -c / lambda);
            crate::simplex::normalize(free.view()).expect("finite coefficients")
        }
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = v.len();
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    let mut found = false;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            found = true;
            break;
        }
    }
    let _ = found;
    let _ = n;
    v.mapv(|x| (x - theta).max(0.0))
}

/// Weight half-step objective at fixed duals (the part of the optimal-value
/// function that depends on the weights, plus optional entropy).
fn beta_objective(s: &Array2<f64>, w: ArrayView1<'_, f64>, cross: bool, damping: Option<f64>) -> f64 {
    let quad = if cross {
        -0.5 * w.dot(&s.dot(&w))
    } else {
        -0.5 * s.diag().dot(&w)
    };
    let entropy = damping
        .map(|lambda| lambda * w.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>())
        .unwrap_or(0.0);
    quad + entropy
}

/// The weight half-step.
///
/// Linear variant, no damping: the subproblem's optimum is a simplex vertex,
/// so the step scores each vertex (and the current point) by the
/// optimal-value objective — re-solving the per-class duals on that vertex's
/// kernel — and keeps the best. Trusting the linearization alone can jump to
/// a dominated vertex, because the discriminant norms are measured in the
/// current kernel's geometry. Linear variant with damping: Gibbs weights of
/// the linearization coefficients at fixed duals. Cross variant: monotone
/// projected gradient with backtracking at fixed duals, stopping when an
/// accepted step improves the objective by less than `1e-10`.
#[allow(clippy::too_many_arguments)]
pub fn solve_beta(
    variant: ComboVariant,
    duals: &[BinaryDual],
    labels: &[usize],
    classes: usize,
    gs: &GramStack,
    start: ArrayView1<'_, f64>,
    damping: Option<f64>,
    svm: SvmParams,
) -> Result<Array1<f64>> {
    if duals.is_empty() {
        return Err(Error::invalid("need duals for at least one class"));
    }
    let s = discriminant_terms(gs, duals, labels);
    match variant {
        ComboVariant::LinearCombo => {
            if let Some(lambda) = damping {
                let coeff = s.diag().mapv(|x| -0.5 * x);
                return Ok(minimize_linear_over_simplex(coeff.view(), Some(lambda)));
            }
            let nodes = gs.node_count();
            let evals = std::cell::Cell::new(0usize);
            let score = |w: ArrayView1<'_, f64>| -> Result<f64> {
                evals.set(evals.get() + 1);
                Ok(solve_all_classes(gs, w, variant, labels, classes, svm)?.1)
            };
            let mut best = start.to_owned();
            let mut best_objective = score(start)?;
            for a in 0..nodes {
                let mut vertex = Array1::zeros(nodes);
                vertex[a] = 1.0;
                let objective = score(vertex.view())?;
                if objective < best_objective - 1e-12 {
                    best_objective = objective;
                    best = vertex;
                }
            }
            // refinement: line searches from the incumbent toward each
            // vertex, keeping only improving steps. Mixtures win when
            // several nodes carry complementary signal; the evaluation
            // budget keeps large hierarchies cheap.
            let budget = 200usize;
            let mut moved = true;
            while moved && evals.get() < budget {
                moved = false;
                for a in 0..nodes {
                    for t in [0.5, 0.25, 0.1, 0.05, 0.02, 0.01] {
                        if evals.get() >= budget {
                            break;
                        }
                        let mut candidate = best.mapv(|v| v * (1.0 - t));
                        candidate[a] += t;
                        let objective = score(candidate.view())?;
                        if objective < best_objective - 1e-12 {
                            best_objective = objective;
                            best = candidate;
                            moved = true;
                            break;
                        }
                    }
                }
            }
            Ok(best)
        }
        ComboVariant::CrossCombo => {
            let mut w = start.to_owned();
            let mut obj = beta_objective(&s, w.view(), true, damping);
            let scale = s.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-12);
            let mut step = 1.0 / scale;
            for _ in 0..10_000 {
                let mut grad = s.dot(&w).mapv(|x| -x);
                if let Some(lambda) = damping {
                    grad += &w.mapv(|x| lambda * (x.max(1e-300).ln() + 1.0));
                }
                let mut improved = false;
                // backtracking: accept the first improving projected step
                let mut eta = step;
                for _ in 0..60 {
                    let candidate = project_to_simplex((&w - &grad.mapv(|g| g * eta)).view());
                    let cand_obj = beta_objective(&s, candidate.view(), true, damping);
                    if cand_obj < obj {
                        let gain = obj - cand_obj;
                        w = candidate;
                        obj = cand_obj;
                        improved = true;
                        step = eta * 1.5;
                        if gain < 1e-10 {
                            return Ok(w);
                        }
                        break;
                    }
                    eta *= 0.5;
                }
                if !improved {
                    break;
                }
            }
            Ok(w)
        }
    }
}

fn combine(gs: &GramStack, weights: ArrayView1<'_, f64>, variant: ComboVariant) -> Result<Array2<f64>> {
    match variant {
        ComboVariant::LinearCombo => combine_linear(gs, weights),
        ComboVariant::CrossCombo => combine_cross(gs, weights),
    }
}

/// Solve every class's dual on the combined kernel and return the summed
/// optimal-value objective alongside. The kernel is jittered before solving.
pub fn solve_all_classes(
    gs: &GramStack,
    weights: ArrayView1<'_, f64>,
    variant: ComboVariant,
    labels: &[usize],
    classes: usize,
    svm: SvmParams,
) -> Result<(Vec<BinaryDual>, f64)> {
    let mut k = combine(gs, weights, variant)?;
    jitter_diagonal(&mut k);
    let mut duals = Vec::with_capacity(classes);
    let mut objective = 0.0;
    for class in 0..classes {
        let y = one_vs_rest_labels(labels, class);
        let dual = solve_alpha(k.view(), &y, svm)?;
        objective += dual.objective;
        duals.push(dual);
    }
    Ok((duals, objective))
}

/// Alternate dual and weight half-steps until both stall or `max_iters`.
pub fn em_train(
    descriptors: &[Array2<f64>],
    labels: &[usize],
    classes: usize,
    params: MklParams,
) -> Result<KernelModel> {
    if descriptors.len() != labels.len() {
        return Err(Error::invalid("descriptor/label count mismatch"));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    for class in 0..classes {
        let members = labels.iter().filter(|&&l| l == class).count();
        if members == 0 {
            return Err(Error::invalid(format!("class {class} has no examples")));
        }
        if members == labels.len() {
            return Err(Error::invalid(format!("class {class} has no negatives")));
        }
    }
    let gs = compute_grams(descriptors, params.kind, params.variant)?;
    let nodes = gs.node_count();
    let mut weights: Array1<f64> = Array1::from_elem(nodes, 1.0 / nodes as f64);
    let mut duals: Vec<BinaryDual> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..params.max_iters {
        iterations += 1;
        let (new_duals, objective) =
            solve_all_classes(&gs, weights.view(), params.variant, labels, classes, params.svm)?;
        trace.push(objective);

        let alpha_delta = if duals.is_empty() {
            f64::INFINITY
        } else {
            duals
                .iter()
                .zip(new_duals.iter())
                .flat_map(|(old, new)| {
                    old.alpha
                        .iter()
                        .zip(new.alpha.iter())
                        .map(|(a, b)| (a - b).abs())
                })
                .fold(0.0f64, f64::max)
        };
        duals = new_duals;

        // single node: the weight step is a no-op and the problem is a
        // plain one-vs-rest SVM
        let new_weights = if nodes == 1 {
            Array1::from_elem(1, 1.0)
        } else {
            solve_beta(
                params.variant,
                &duals,
                labels,
                classes,
                &gs,
                weights.view(),
                params.entropy_damping,
                params.svm,
            )?
        };
        let beta_delta = (&new_weights - &weights)
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.abs()));
        weights = new_weights;

        if alpha_delta < params.tol && beta_delta < params.tol {
            converged = true;
            break;
        }
    }

    // re-solve the duals so they match the final weights
    let (final_duals, objective) =
        solve_all_classes(&gs, weights.view(), params.variant, labels, classes, params.svm)?;
    trace.push(objective);

    Ok(KernelModel {
        variant: params.variant,
        kind: params.kind,
        box_c: params.svm.box_c,
        classes,
        weights,
        duals: final_duals,
        train_descriptors: descriptors.to_vec(),
        train_labels: labels.to_vec(),
        objective_trace: trace,
        iterations,
        converged,
    })
}

impl KernelModel {
    /// Per-class decision values for one test descriptor matrix.
    pub fn scores(&self, descriptor: &Array2<f64>) -> Result<Array1<f64>> {
        if self.train_descriptors.is_empty() {
            return Err(Error::data("model has no support vectors"));
        }
        if descriptor.nrows() != self.train_descriptors[0].nrows() {
            return Err(Error::invalid(format!(
                "test descriptor has {} nodes, model was trained with {}",
                descriptor.nrows(),
                self.train_descriptors[0].nrows()
            )));
        }
        let kernel_row: Vec<f64> = self
            .train_descriptors
            .iter()
            .map(|train| {
                combined_kernel_value(
                    descriptor.view(),
                    train.view(),
                    self.weights.view(),
                    self.kind,
                    self.variant,
                )
            })
            .collect();
        let mut out = Array1::zeros(self.classes);
        for (class, dual) in self.duals.iter().enumerate() {
            let y = one_vs_rest_labels(&self.train_labels, class);
            out[class] = dual.decision(&y, &kernel_row);
        }
        Ok(out)
    }

    /// Argmax class per test descriptor, plus the raw score matrix.
    pub fn predict(&self, descriptors: &[Array2<f64>]) -> Result<(Vec<usize>, Array2<f64>)> {
        let mut scores = Array2::zeros((descriptors.len(), self.classes));
        let mut labels = Vec::with_capacity(descriptors.len());
        for (i, d) in descriptors.iter().enumerate() {
            let s = self.scores(d)?;
            let best = (0..self.classes)
                .max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap())
                .unwrap();
            labels.push(best);
            scores.row_mut(i).assign(&s);
        }
        Ok((labels, scores))
    }

    /// Mean of per-class accuracies on a labeled descriptor set.
    pub fn mean_class_accuracy(&self, descriptors: &[Array2<f64>], labels: &[usize]) -> Result<f64> {
        let (predicted, _) = self.predict(descriptors)?;
        let mut correct = vec![0usize; self.classes];
        let mut total = vec![0usize; self.classes];
        for (&p, &l) in predicted.iter().zip(labels.iter()) {
            total[l] += 1;
            if p == l {
                correct[l] += 1;
            }
        }
        let present = total.iter().filter(|&&t| t > 0).count();
        if present == 0 {
            return Err(Error::invalid("no labeled examples"));
        }
        Ok((0..self.classes)
            .filter(|&c| total[c] > 0)
            .map(|c| correct[c] as f64 / total[c] as f64)
            .sum::<f64>()
            / present as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&KernelModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<KernelModel> {
        let file: KernelModelFile = serde_json::from_str(text)?;
        file.into_model()
    }
}

/// Serialized form: weights, sparse duals, and the support descriptors the
/// duals reference.
#[derive(Debug, Serialize, Deserialize)]
struct KernelModelFile {
    variant: ComboVariant,
    kernel: KernelKind,
    box_c: f64,
    classes: usize,
    node_count: usize,
    dim: usize,
    weights: Vec<f64>,
    support: Vec<SupportVectorFile>,
    duals: Vec<ClassDualFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SupportVectorFile {
    label: usize,
    /// Row-major `node_count x dim` descriptor.
    descriptor: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassDualFile {
    bias: f64,
    /// `(support index, alpha)` for the nonzero duals of this class.
    alpha: Vec<(usize, f64)>,
}

impl From<&KernelModel> for KernelModelFile {
    fn from(model: &KernelModel) -> Self {
        // keep only videos that support at least one class
        let keep: Vec<usize> = (0..model.train_labels.len())
            .filter(|&i| model.duals.iter().any(|d| d.alpha[i] > 1e-12))
            .collect();
        let position: std::collections::HashMap<usize, usize> =
            keep.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();
        let support = keep
            .iter()
            .map(|&i| SupportVectorFile {
                label: model.train_labels[i],
                descriptor: model.train_descriptors[i].iter().copied().collect(),
            })
            .collect();
        let duals = model
            .duals
            .iter()
            .map(|d| ClassDualFile {
                bias: d.bias,
                alpha: d
                    .alpha
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a > 1e-12)
                    .map(|(i, &a)| (position[&i], a))
                    .collect(),
            })
            .collect();
        KernelModelFile {
            variant: model.variant,
            kernel: model.kind,
            box_c: model.box_c,
            classes: model.classes,
            node_count: model.train_descriptors[0].nrows(),
            dim: model.train_descriptors[0].ncols(),
            weights: model.weights.to_vec(),
            support,
            duals,
        }
    }
}

impl KernelModelFile {
    fn into_model(self) -> Result<KernelModel> {
        let n = self.support.len();
        let descriptors: Vec<Array2<f64>> = self
            .support
            .iter()
            .map(|sv| {
                Array2::from_shape_vec((self.node_count, self.dim), sv.descriptor.clone())
                    .map_err(|e| Error::data(format!("bad support descriptor: {e}")))
            })
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = self.support.iter().map(|sv| sv.label).collect();
        let duals = self
            .duals
            .iter()
            .map(|d| {
                let mut alpha = vec![0.0; n];
                for &(i, a) in &d.alpha {
                    if i >= n {
                        return Err(Error::data("dual references a missing support vector"));
                    }
                    alpha[i] = a;
                }
                Ok(BinaryDual {
                    alpha,
                    bias: d.bias,
                    objective: f64::NAN,
                    iterations: 0,
                    kkt_violation: f64::NAN,
                    converged: true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KernelModel {
            variant: self.variant,
            kind: self.kernel,
            box_c: self.box_c,
            classes: self.classes,
            weights: Array1::from(self.weights),
            duals,
            train_descriptors: descriptors,
            train_labels: labels,
            objective_trace: Vec::new(),
            iterations: 0,
            converged: true,
        })
    }
}
