//! Target-domain finetuning with a frozen feature extractor, target
//! evaluation, and empirical (lower-bound) discrepancy estimators.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domains::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{self, init_weights, ModelSpec, WeightVector};
use crate::seed::{self, Stream};

/// Gradient-norm threshold at which a convex head counts as solved.
pub const HEAD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub target_loss: f64,
    /// `None` for regression models.
    pub target_accuracy: Option<f64>,
    pub finetune_epochs_used: usize,
    pub frozen_split_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub epochs_used: usize,
    /// Head gradient fell below [`HEAD_TOLERANCE`] before the epoch budget.
    pub converged: bool,
    /// `split_index == 0`: nothing is frozen and the whole model is refit.
    pub linear_probe_degenerate: bool,
}

fn head_gradient(spec: &ModelSpec, w: &[f64], data: &Dataset, start: usize) -> Result<(f64, Vec<f64>)> {
    let (l, g) = models::loss_and_gradient(spec, w, data)?;
    let mut g = g.into_inner();
    g[..start].iter_mut().for_each(|x| *x = 0.0);
    Ok((l, g))
}

/// Full-batch GD with step `lr` on the head block only; the block
/// `[0, split_index)` is never written.
pub fn finetune_classifier(
    spec: &ModelSpec,
    pretrained: &WeightVector,
    target_train: &Dataset,
    lr: f64,
    epochs: usize,
) -> Result<(WeightVector, FinetuneOutcome)> {
    if !(lr >= 0.0) {
        return Err(Error::invalid("finetune learning rate must be >= 0"));
    }
    let start = spec.split_index;
    let mut w = pretrained.to_vec();
    let mut used = 0;
    let mut converged = false;
    for epoch in 0..epochs {
        let (_, g) = head_gradient(spec, &w, target_train, start)?;
        if linalg::norm(&g) <= HEAD_TOLERANCE {
            converged = true;
            break;
        }
        for i in start..w.len() {
            w[i] -= lr * g[i];
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                round: None,
                client: None,
                step: epoch,
            });
        }
        used = epoch + 1;
    }
    Ok((
        WeightVector::new(w),
        FinetuneOutcome {
            epochs_used: used,
            converged,
            linear_probe_degenerate: start == 0,
        },
    ))
}

pub fn evaluate_target(spec: &ModelSpec, w: &[f64], target_test: &Dataset) -> Result<TransferResult> {
    if target_test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(TransferResult {
        target_loss: models::loss(spec, w, target_test)?,
        target_accuracy: if spec.is_classifier() {
            Some(models::accuracy(spec, w, target_test)?)
        } else {
            None
        },
        finetune_epochs_used: 0,
        frozen_split_index: spec.split_index,
    })
}

/// Finetunes on `train` and evaluates on `test`.
pub fn transfer(
    spec: &ModelSpec,
    pretrained: &WeightVector,
    train: &Dataset,
    test: &Dataset,
    lr: f64,
    epochs: usize,
) -> Result<(WeightVector, TransferResult)> {
    let (w, outcome) = finetune_classifier(spec, pretrained, train, lr, epochs)?;
    let mut result = evaluate_target(spec, &w, test)?;
    result.finetune_epochs_used = outcome.epochs_used;
    Ok((w, result))
}

/// Result of minimizing the loss over the trainable block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFit {
    pub weights: WeightVector,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes the loss over weights `[start, ..)` by gradient descent with
/// Armijo backtracking, stopping at gradient norm [`HEAD_TOLERANCE`] or after
/// `budget` iterations.
pub fn fit_block(spec: &ModelSpec, w0: &[f64], data: &Dataset, start: usize, budget: usize) -> Result<HeadFit> {
    let mut w = w0.to_vec();
    let (mut f, mut g) = head_gradient(spec, &w, data, start)?;
    let mut step = 1.0;
    for it in 0..budget {
        let gn2 = linalg::norm_sq(&g);
        if gn2.sqrt() <= HEAD_TOLERANCE {
            return Ok(HeadFit {
                weights: WeightVector::new(w),
                loss: f,
                grad_norm: gn2.sqrt(),
                iterations: it,
                converged: true,
            });
        }
        step *= 2.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(x, d)| x - step * d).collect();
            let ft = models::loss(spec, &trial, data)?;
            if ft.is_finite() && ft <= f - 0.5 * step * gn2 {
                w = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No representable decrease left along the gradient.
            break;
        }
        (f, g) = head_gradient(spec, &w, data, start)?;
    }
    let gn = linalg::norm(&g);
    Ok(HeadFit {
        weights: WeightVector::new(w),
        loss: f,
        grad_norm: gn,
        iterations: budget,
        converged: gn <= HEAD_TOLERANCE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscrepancyKind {
    HDiscrepancy,
    CrossClient,
    GfDiscrepancy,
}

/// A sup-type discrepancy evaluated by search; the value is always a lower
/// bound on the true supremum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyEstimate {
    pub value: f64,
    pub kind: DiscrepancyKind,
    pub restarts: usize,
    /// Always `false`: estimates are lower bounds only.
    pub certified: bool,
    /// Some inner minimization hit its iteration budget.
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentOptions {
    pub restarts: usize,
    pub ascent_steps: usize,
    /// Search ball `|w| <= radius`.
    pub radius: f64,
    pub seed: u64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            ascent_steps: 200,
            radius: 5.0,
            seed: 0,
        }
    }
}

fn project(w: &mut [f64], radius: f64) {
    let n = linalg::norm(w);
    if n > radius {
        w.iter_mut().for_each(|x| *x *= radius / n);
    }
}

fn loss_gap(spec: &ModelSpec, w: &[f64], d1: &Dataset, d2: &Dataset) -> Result<(f64, Vec<f64>)> {
    let (l1, g1) = models::loss_and_gradient(spec, w, d1)?;
    let (l2, g2) = models::loss_and_gradient(spec, w, d2)?;
    let diff = l1 - l2;
    let s = if diff >= 0.0 { 1.0 } else { -1.0 };
    Ok((diff.abs(), g1.iter().zip(g2.iter()).map(|(a, b)| s * (a - b)).collect()))
}

/// `sup_{|w| <= r} |L_1(w) - L_2(w)|` by multi-restart projected ascent with
/// normalized steps of size `0.25 r / sqrt(t + 1)`. Starting points are drawn
/// uniformly from the ball; the best value seen anywhere is returned.
pub fn estimate_h_discrepancy(
    spec: &ModelSpec,
    d1: &Dataset,
    d2: &Dataset,
    opts: &AscentOptions,
) -> Result<DiscrepancyEstimate> {
    if opts.restarts == 0 {
        return Err(Error::invalid("need at least one restart"));
    }
    if !(opts.radius >= 0.0) {
        return Err(Error::invalid("radius must be >= 0"));
    }
    let n = spec.total_dim();
    let mut best: f64 = 0.0;
    for r in 0..opts.restarts {
        let mut rng = seed::stream_rng(opts.seed, Stream::Estimator, r as u64);
        let mut w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let wn = linalg::norm(&w).max(f64::MIN_POSITIVE);
        let shrink = rng.random::<f64>().powf(1.0 / n as f64);
        w.iter_mut().for_each(|x| *x *= opts.radius * shrink / wn);
        for t in 0..=opts.ascent_steps {
            let (value, g) = loss_gap(spec, &w, d1, d2)?;
            if value.is_finite() {
                best = best.max(value);
            }
            if t == opts.ascent_steps {
                break;
            }
            let gn = linalg::norm(&g);
            if gn == 0.0 || !gn.is_finite() {
                break;
            }
            let eta = 0.25 * opts.radius / ((t + 1) as f64).sqrt();
            linalg::axpy(eta / gn, &g, &mut w);
            project(&mut w, opts.radius);
        }
    }
    Ok(DiscrepancyEstimate {
        value: best,
        kind: DiscrepancyKind::HDiscrepancy,
        restarts: opts.restarts,
        certified: false,
        budget_exhausted: false,
    })
}

/// Mean of the pairwise discrepancy over ordered client pairs `k1 != k2`.
/// Each unordered pair is searched once (the objective is symmetric) with a
/// seed derived from the pair.
pub fn estimate_cross_client_divergence(
    spec: &ModelSpec,
    clients: &[Dataset],
    opts: &AscentOptions,
) -> Result<DiscrepancyEstimate> {
    let k = clients.len();
    if k < 2 {
        return Err(Error::invalid("cross-client divergence needs at least two clients"));
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            let pair = AscentOptions {
                seed: seed::derive2(opts.seed, Stream::Estimator, a as u64, b as u64),
                ..*opts
            };
            total += 2.0 * estimate_h_discrepancy(spec, &clients[a], &clients[b], &pair)?.value;
        }
    }
    Ok(DiscrepancyEstimate {
        value: total / (k * (k - 1)) as f64,
        kind: DiscrepancyKind::CrossClient,
        restarts: opts.restarts,
        certified: false,
        budget_exhausted: false,
    })
}

/// Feature-extractor blocks to search over: the given trajectory snapshots
/// followed by `random_draws` uniform initializations. Duplicates (e.g. the
/// empty block of a linear model) are dropped.
pub fn feature_samples(
    spec: &ModelSpec,
    snapshots: &[WeightVector],
    random_draws: usize,
    scale: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    let draws =
        (0..random_draws).map(|i| init_weights(spec, seed::derive(seed, Stream::Estimator, 10_000 + i as u64), scale));
    for w in snapshots.iter().cloned().chain(draws) {
        let f = w.feature_block(spec).to_vec();
        if !out.contains(&f) {
            out.push(f);
        }
    }
    out
}

/// `max_f |inf_g L_k(g o f) - inf_g L_T(g o f)|` over the sampled feature
/// blocks, each inner infimum solved by [`fit_block`] from a zero head.
pub fn estimate_gf_discrepancy(
    spec: &ModelSpec,
    source: &Dataset,
    target: &Dataset,
    features: &[Vec<f64>],
    head_budget: usize,
) -> Result<DiscrepancyEstimate> {
    if features.is_empty() {
        return Err(Error::invalid("need at least one feature sample"));
    }
    let n = spec.total_dim();
    let mut best: f64 = 0.0;
    let mut exhausted = false;
    for f in features {
        if f.len() != spec.split_index {
            return Err(Error::DimensionMismatch {
                expected: spec.split_index,
                actual: f.len(),
                context: "feature block",
            });
        }
        let mut w0 = vec![0.0; n];
        w0[..f.len()].copy_from_slice(f);
        let a = fit_block(spec, &w0, source, spec.split_index, head_budget)?;
        let b = fit_block(spec, &w0, target, spec.split_index, head_budget)?;
        exhausted |= !a.converged || !b.converged;
        best = best.max((a.loss - b.loss).abs());
    }
    Ok(DiscrepancyEstimate {
        value: best,
        kind: DiscrepancyKind::GfDiscrepancy,
        restarts: features.len(),
        certified: false,
        budget_exhausted: exhausted,
    })
}

/// Federated form: the mean of [`estimate_gf_discrepancy`] over clients.
pub fn estimate_federated_gf_discrepancy(
    spec: &ModelSpec,
    clients: &[Dataset],
    target: &Dataset,
    features: &[Vec<f64>],
    head_budget: usize,
) -> Result<DiscrepancyEstimate> {
    if clients.is_empty() {
        return Err(Error::invalid("no clients"));
    }
    let mut total = 0.0;
    let mut exhausted = false;
    for c in clients {
        let e = estimate_gf_discrepancy(spec, c, target, features, head_budget)?;
        total += e.value;
        exhausted |= e.budget_exhausted;
    }
    Ok(DiscrepancyEstimate {
        value: total / clients.len() as f64,
        kind: DiscrepancyKind::GfDiscrepancy,
        restarts: features.len(),
        certified: false,
        budget_exhausted: exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{apply_shift, generate_gaussian_mixture, ShiftSpec};
    use crate::models::Activation;

    #[test]
    fn zero_epochs_and_frozen_block() {
        let d = generate_gaussian_mixture(3, 4, 20, 2.0, 0).unwrap();
        let spec = ModelSpec::mlp(4, vec![5], 3, Activation::Tanh);
        let w = init_weights(&spec, 1, 0.5);
        let (same, out) = finetune_classifier(&spec, &w, &d, 0.1, 0).unwrap();
        assert_eq!(same, w);
        assert_eq!(out.epochs_used, 0);
        let (tuned, out) = finetune_classifier(&spec, &w, &d, 0.1, 30).unwrap();
        assert_eq!(tuned.feature_block(&spec), w.feature_block(&spec));
        assert_ne!(tuned.head_block(&spec), w.head_block(&spec));
        assert!(!out.linear_probe_degenerate);
        let lin = ModelSpec::logistic(4, 3);
        let (_, out) = finetune_classifier(&lin, &init_weights(&lin, 0, 0.1), &d, 0.1, 1).unwrap();
        assert!(out.linear_probe_degenerate);
    }

    #[test]
    fn finetune_never_ends_above_start_on_same_domain() {
        let d = generate_gaussian_mixture(3, 4, 30, 2.0, 3).unwrap();
        let spec = ModelSpec::logistic(4, 3);
        let alpha = models::smoothness_constant(&spec, &d).unwrap().alpha;
        let w = init_weights(&spec, 2, 0.5);
        let before = models::loss(&spec, &w, &d).unwrap();
        let (tuned, _) = finetune_classifier(&spec, &w, &d, 1.0 / alpha, 50).unwrap();
        assert!(models::loss(&spec, &tuned, &d).unwrap() <= before + 1e-9);
    }

    #[test]
    fn evaluate_perfect_model() {
        let d = generate_gaussian_mixture(2, 2, 50, 12.0, 0).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let (w, _) = finetune_classifier(&spec, &WeightVector::zeros(spec.total_dim()), &d, 0.05, 500).unwrap();
        let r = evaluate_target(&spec, &w, &d).unwrap();
        assert_eq!(r.target_accuracy, Some(1.0));
        assert!(r.target_loss >= 0.0);
    }

    #[test]
    fn identical_domains_have_zero_discrepancy() {
        let d = generate_gaussian_mixture(3, 2, 10, 2.0, 1).unwrap();
        let spec = ModelSpec::logistic(2, 3);
        let e = estimate_h_discrepancy(&spec, &d, &d, &AscentOptions::default()).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(!e.certified);
        let f = estimate_gf_discrepancy(&spec, &d, &d, &[vec![]], 100).unwrap();
        assert_eq!(f.value, 0.0);
    }

    #[test]
    fn discrepancy_is_symmetric() {
        let d1 = generate_gaussian_mixture(3, 2, 10, 2.0, 1).unwrap();
        let d2 = apply_shift(&d1, &ShiftSpec::rotation(1.0)).unwrap();
        let spec = ModelSpec::logistic(2, 3);
        let opts = AscentOptions {
            seed: 4,
            ..Default::default()
        };
        let a = estimate_h_discrepancy(&spec, &d1, &d2, &opts).unwrap();
        let b = estimate_h_discrepancy(&spec, &d2, &d1, &opts).unwrap();
        assert_eq!(a.value, b.value);
        assert!(a.value > 0.0);
    }

    #[test]
    fn cross_client_needs_two() {
        let d = generate_gaussian_mixture(2, 2, 5, 2.0, 1).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        assert!(estimate_cross_client_divergence(&spec, std::slice::from_ref(&d), &AscentOptions::default()).is_err());
        let d2 = apply_shift(&d, &ShiftSpec::rotation(0.5)).unwrap();
        let opts = AscentOptions::default();
        let pair = estimate_cross_client_divergence(&spec, &[d.clone(), d2.clone()], &opts).unwrap();
        let direct = estimate_h_discrepancy(
            &spec,
            &d,
            &d2,
            &AscentOptions {
                seed: seed::derive2(opts.seed, Stream::Estimator, 0, 1),
                ..opts
            },
        )
        .unwrap();
        assert_eq!(pair.value, direct.value);
    }

    #[test]
    fn fit_block_solves_least_squares() {
        // y = 2x + 1 exactly: the optimum has zero loss.
        let x = [0.0, 1.0, 2.0, 3.0];
        let d = Dataset::new(x.to_vec(), 1, vec![1, 3, 5, 7], 8).unwrap();
        let spec = ModelSpec::linear_regression(1);
        let fit = fit_block(&spec, &[0.0, 0.0], &d, 0, 10_000).unwrap();
        assert!(fit.converged);
        assert!((fit.weights[0] - 2.0).abs() < 1e-7);
        assert!((fit.weights[1] - 1.0).abs() < 1e-7);
        assert!(fit.loss < 1e-12);
    }

    #[test]
    fn feature_samples_dedupe() {
        let lin = ModelSpec::logistic(2, 2);
        let snaps = vec![init_weights(&lin, 0, 1.0), init_weights(&lin, 1, 1.0)];
        assert_eq!(feature_samples(&lin, &snaps, 8, 1.0, 0), vec![Vec::<f64>::new()]);
        let mlp = ModelSpec::mlp(2, vec![3], 2, Activation::Tanh);
        let snaps = vec![init_weights(&mlp, 0, 1.0), init_weights(&mlp, 1, 1.0)];
        let s = feature_samples(&mlp, &snaps, 8, 1.0, 0);
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|f| f.len() == mlp.split_index));
    }
}
