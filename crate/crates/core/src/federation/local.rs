//! Client-side training: plain, norm-aligned (FedGTST) and
//! gradient-aligned (FedIIR-lite) local objectives.

use rand::seq::index;

use super::{BatchMode, Optimizer};
use crate::domains::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{self, HvpMode, ModelSpec, WeightVector};
use crate::seed;

/// Below this Jacobian norm the norm-alignment term's gradient is taken as 0.
pub const NORM_SINGULARITY: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOptions {
    pub lr: f64,
    pub steps: usize,
    pub batch_mode: BatchMode,
    pub optimizer: Optimizer,
    pub hvp_mode: HvpMode,
    /// Seeds minibatch sampling.
    pub seed: u64,
}

impl LocalOptions {
    /// Full-batch gradient descent.
    pub fn gd(spec: &ModelSpec, lr: f64, steps: usize) -> Self {
        Self {
            lr,
            steps,
            batch_mode: BatchMode::FullBatch,
            optimizer: Optimizer::Gd,
            hvp_mode: HvpMode::preferred(spec),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Penalty<'a> {
    None,
    /// `xi (|J(w)| - guide)^2`
    Norm {
        guide: f64,
        xi: f64,
    },
    /// `xi |J(w) - target|^2`
    Alignment {
        target: &'a [f64],
        xi: f64,
    },
}

/// Objective value and gradient of `L + penalty`.
fn penalized(
    spec: &ModelSpec,
    w: &[f64],
    data: &Dataset,
    penalty: Penalty<'_>,
    mode: HvpMode,
) -> Result<(f64, WeightVector)> {
    let (loss, jac) = models::loss_and_gradient(spec, w, data)?;
    match penalty {
        Penalty::None => Ok((loss, jac)),
        Penalty::Norm { xi, .. } | Penalty::Alignment { xi, .. } if xi == 0.0 => Ok((loss, jac)),
        Penalty::Norm { guide, xi } => {
            let jn = jac.norm();
            let residual = jn - guide;
            let value = loss + xi * residual * residual;
            if jn < NORM_SINGULARITY {
                return Ok((value, jac));
            }
            let hj = models::hvp(spec, w, data, &jac, mode)?;
            let mut g = jac.into_inner();
            linalg::axpy(2.0 * xi * residual / jn, &hj, &mut g);
            Ok((value, WeightVector::new(g)))
        }
        Penalty::Alignment { target, xi } => {
            if target.len() != jac.len() {
                return Err(Error::DimensionMismatch {
                    expected: jac.len(),
                    actual: target.len(),
                    context: "alignment target",
                });
            }
            let diff = linalg::sub(&jac, target);
            let value = loss + xi * linalg::norm_sq(&diff);
            let hd = models::hvp(spec, w, data, &diff, mode)?;
            let mut g = jac.into_inner();
            linalg::axpy(2.0 * xi, &hd, &mut g);
            Ok((value, WeightVector::new(g)))
        }
    }
}

/// `L(w) + xi (|J(w)| - guide)^2`
pub fn regularized_objective(spec: &ModelSpec, w: &[f64], data: &Dataset, guide: f64, xi: f64) -> Result<f64> {
    let (loss, jac) = models::loss_and_gradient(spec, w, data)?;
    let r = jac.norm() - guide;
    Ok(loss + xi * r * r)
}

/// `J + 2 xi (|J| - guide) H J / |J|`, with the second term dropped when
/// `|J| < 1e-10`.
pub fn regularized_gradient(
    spec: &ModelSpec,
    w: &[f64],
    data: &Dataset,
    guide: f64,
    xi: f64,
    mode: HvpMode,
) -> Result<WeightVector> {
    penalized(spec, w, data, Penalty::Norm { guide, xi }, mode).map(|(_, g)| g)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn train(
    spec: &ModelSpec,
    w0: &[f64],
    data: &Dataset,
    penalty: Penalty<'_>,
    opts: &LocalOptions,
) -> Result<(WeightVector, f64)> {
    if !(opts.lr >= 0.0) {
        return Err(Error::invalid("local learning rate must be >= 0"));
    }
    let mut w = w0.to_vec();
    let mut adam = Adam {
        m: vec![0.0; w.len()],
        v: vec![0.0; w.len()],
        t: 0,
    };
    let mut rng = seed::rng(opts.seed);
    for step in 0..opts.steps {
        let batch;
        let data_step = match opts.batch_mode {
            BatchMode::Minibatch { size } if size < data.len() => {
                let idx = index::sample(&mut rng, data.len(), size).into_vec();
                batch = data.subset(&idx)?;
                &batch
            }
            _ => data,
        };
        let (value, g) = penalized(spec, &w, data_step, penalty, opts.hvp_mode)?;
        if !value.is_finite() || !g.is_finite() {
            return Err(Error::NonFinite {
                round: None,
                client: None,
                step,
            });
        }
        match opts.optimizer {
            Optimizer::Gd => linalg::axpy(-opts.lr, &g, &mut w),
            Optimizer::Adam { beta1, beta2 } => {
                adam.t += 1;
                let c1 = 1.0 - beta1.powi(adam.t);
                let c2 = 1.0 - beta2.powi(adam.t);
                for i in 0..w.len() {
                    adam.m[i] = beta1 * adam.m[i] + (1.0 - beta1) * g[i];
                    adam.v[i] = beta2 * adam.v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mh = adam.m[i] / c1;
                    let vh = adam.v[i] / c2;
                    w[i] -= opts.lr * mh / (vh.sqrt() + 1e-8);
                }
            }
        }
    }
    let norm = models::gradient(spec, &w, data)?.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            round: None,
            client: None,
            step: opts.steps,
        });
    }
    Ok((WeightVector::new(w), norm))
}

/// Trains on the plain local loss; returns the weights and the post-update
/// Jacobian norm on the full client data.
pub fn local_update_standard(
    spec: &ModelSpec,
    w0: &[f64],
    data: &Dataset,
    opts: &LocalOptions,
) -> Result<(WeightVector, f64)> {
    train(spec, w0, data, Penalty::None, opts)
}

/// Trains on `L + xi (|J| - guide)^2`; with `xi == 0` this is exactly
/// [`local_update_standard`].
pub fn local_update_regularized(
    spec: &ModelSpec,
    w0: &[f64],
    data: &Dataset,
    guide: f64,
    xi: f64,
    opts: &LocalOptions,
) -> Result<(WeightVector, f64)> {
    if !(xi >= 0.0) {
        return Err(Error::invalid("xi must be >= 0"));
    }
    train(spec, w0, data, Penalty::Norm { guide, xi }, opts)
}

/// Trains on `L + xi |J - target|^2`, aligning the local gradient with a
/// broadcast global gradient.
pub fn local_update_aligned(
    spec: &ModelSpec,
    w0: &[f64],
    data: &Dataset,
    target: &[f64],
    xi: f64,
    opts: &LocalOptions,
) -> Result<(WeightVector, f64)> {
    train(spec, w0, data, Penalty::Alignment { target, xi }, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::generate_gaussian_mixture;
    use crate::models::{init_weights, Activation};

    fn fd_gradient(f: impl Fn(&[f64]) -> f64, w: &[f64]) -> Vec<f64> {
        let eps = 1e-5 * linalg::norm(w).max(1.0);
        (0..w.len())
            .map(|i| {
                let mut p = w.to_vec();
                let mut m = w.to_vec();
                p[i] += eps;
                m[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn zero_xi_is_plain_gd() {
        let d = generate_gaussian_mixture(3, 3, 10, 2.0, 0).unwrap();
        let spec = ModelSpec::logistic(3, 3);
        let w0 = init_weights(&spec, 1, 0.2);
        let opts = LocalOptions::gd(&spec, 0.1, 5);
        let a = local_update_standard(&spec, &w0, &d, &opts).unwrap();
        let b = local_update_regularized(&spec, &w0, &d, 3.0, 0.0, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_is_exact_gd() {
        let d = generate_gaussian_mixture(2, 2, 10, 2.0, 0).unwrap();
        let spec = ModelSpec::linear_regression(2);
        let w0 = init_weights(&spec, 1, 0.5);
        let g = models::gradient(&spec, &w0, &d).unwrap();
        let (w1, n) = local_update_standard(&spec, &w0, &d, &LocalOptions::gd(&spec, 0.05, 1)).unwrap();
        for i in 0..w0.len() {
            assert_eq!(w1[i], w0[i] - 0.05 * g[i]);
        }
        assert_eq!(n, models::gradient(&spec, &w1, &d).unwrap().norm());
        let (w_same, _) = local_update_standard(&spec, &w0, &d, &LocalOptions::gd(&spec, 0.0, 1)).unwrap();
        assert_eq!(w_same, w0);
    }

    #[test]
    fn descent_below_two_over_alpha() {
        let d = generate_gaussian_mixture(3, 2, 20, 3.0, 4).unwrap();
        let spec = ModelSpec::linear_regression(2);
        let alpha = models::smoothness_constant(&spec, &d).unwrap().alpha;
        let w0 = init_weights(&spec, 2, 1.0);
        let before = models::loss(&spec, &w0, &d).unwrap();
        let (w1, _) = local_update_standard(&spec, &w0, &d, &LocalOptions::gd(&spec, 1.9 / alpha, 1)).unwrap();
        assert!(models::loss(&spec, &w1, &d).unwrap() <= before);
    }

    #[test]
    fn matched_norm_has_no_penalty_gradient() {
        let d = generate_gaussian_mixture(3, 3, 10, 2.0, 0).unwrap();
        let spec = ModelSpec::logistic(3, 3);
        let w0 = init_weights(&spec, 1, 0.2);
        let jac = models::gradient(&spec, &w0, &d).unwrap();
        let g = regularized_gradient(&spec, &w0, &d, jac.norm(), 5.0, HvpMode::Analytic).unwrap();
        for (a, b) in g.iter().zip(jac.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn regularized_gradient_matches_finite_differences() {
        let d = generate_gaussian_mixture(3, 3, 12, 2.0, 5).unwrap();
        for spec in [
            ModelSpec::linear_regression(3),
            ModelSpec::logistic(3, 3),
            ModelSpec::mlp(3, vec![4], 3, Activation::Tanh),
        ] {
            let w = init_weights(&spec, 3, 0.5);
            let mode = HvpMode::FiniteDifference;
            let g = regularized_gradient(&spec, &w, &d, 0.1, 0.7, mode).unwrap();
            let fd = fd_gradient(|x| regularized_objective(&spec, x, &d, 0.1, 0.7).unwrap(), &w);
            let err = linalg::norm(&linalg::sub(&g, &fd)) / linalg::norm(&fd);
            assert!(err < 1e-4, "{:?}: {err}", spec.kind);
        }
    }

    #[test]
    fn aligned_gradient_matches_finite_differences() {
        let d = generate_gaussian_mixture(3, 2, 12, 2.0, 6).unwrap();
        let spec = ModelSpec::logistic(2, 3);
        let w = init_weights(&spec, 3, 0.5);
        let target: Vec<f64> = (0..spec.total_dim()).map(|i| 0.01 * i as f64).collect();
        let (_, g) = penalized(
            &spec,
            &w,
            &d,
            Penalty::Alignment {
                target: &target,
                xi: 0.4,
            },
            HvpMode::Analytic,
        )
        .unwrap();
        let fd = fd_gradient(
            |x| {
                let (l, j) = models::loss_and_gradient(&spec, x, &d).unwrap();
                l + 0.4 * linalg::norm_sq(&linalg::sub(&j, &target))
            },
            &w,
        );
        let err = linalg::norm(&linalg::sub(&g, &fd)) / linalg::norm(&fd);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn divergence_is_reported() {
        let d = generate_gaussian_mixture(2, 2, 10, 50.0, 0).unwrap();
        let spec = ModelSpec::linear_regression(2);
        let w0 = init_weights(&spec, 1, 1.0);
        let err = local_update_standard(&spec, &w0, &d, &LocalOptions::gd(&spec, 1e3, 400)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = err.at(4, 2);
        assert!(err.to_string().contains("round 4, client 2, step"), "{err}");
    }

    #[test]
    fn adam_and_minibatch_run() {
        let d = generate_gaussian_mixture(3, 3, 20, 3.0, 0).unwrap();
        let spec = ModelSpec::logistic(3, 3);
        let w0 = init_weights(&spec, 1, 0.1);
        let mut opts = LocalOptions::gd(&spec, 0.01, 20);
        opts.optimizer = Optimizer::adam();
        opts.batch_mode = BatchMode::Minibatch { size: 8 };
        opts.seed = 3;
        let before = models::loss(&spec, &w0, &d).unwrap();
        let (w, _) = local_update_regularized(&spec, &w0, &d, 0.5, 0.1, &opts).unwrap();
        assert!(models::loss(&spec, &w, &d).unwrap() < before);
        assert_eq!(local_update_regularized(&spec, &w0, &d, 0.5, 0.1, &opts).unwrap().0, w);
    }
}
