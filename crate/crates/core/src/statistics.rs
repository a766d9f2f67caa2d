//! Cross-client Jacobian statistics, descent-bound coefficients and the
//! bound-minimizing learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::WeightVector;

/// Statistics of one round's participating-client Jacobians, all evaluated at
/// the broadcast global weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossClientStats {
    pub round: usize,
    /// Mean Jacobian `J_p`.
    pub avg_jacobian: WeightVector,
    /// `|J_p|`
    pub avg_norm: f64,
    /// `|J_p|^2`, kept separately so it is exact for exact inputs.
    pub avg_norm_sq: f64,
    /// `sigma_p^2 = mean_k |J_p^(k)|^2 - |J_p|^2`
    pub variance: f64,
    /// `(client id, |J_p^(k)|)` in ascending id order.
    pub client_norms: Vec<(usize, f64)>,
    pub client_count: usize,
}

impl CrossClientStats {
    pub fn avg_norm_sq(&self) -> f64 {
        self.avg_norm_sq
    }

    /// `mean_k |J_p^(k)|^2`
    pub fn mean_sq_client_norm(&self) -> f64 {
        self.client_norms.iter().map(|(_, n)| n * n).sum::<f64>() / self.client_count as f64
    }
}

/// Computes `J_p`, `|J_p|` and `sigma_p^2` with a fixed client-id summation order.
///
/// The variance is evaluated as `mean_k |J^(k) - J_p|^2`, which equals the
/// definition algebraically and cannot go negative; the definition form is
/// still checked and anything below `-1e-12` (relative to the mean squared
/// norm) is reported as an internal inconsistency.
pub fn cross_client_stats(jacobians: &[(usize, WeightVector)], round: usize) -> Result<CrossClientStats> {
    let (_, first) = jacobians.first().ok_or_else(|| Error::invalid("no client Jacobians"))?;
    let dim = first.len();
    if let Some((_, j)) = jacobians.iter().find(|(_, j)| j.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: j.len(),
            context: "client jacobian",
        });
    }
    let mut ordered: Vec<&(usize, WeightVector)> = jacobians.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let k = ordered.len() as f64;

    let identical = ordered.iter().all(|(_, j)| j[..] == first[..]);
    let avg: Vec<f64> = if identical {
        first.to_vec()
    } else {
        let mut sum = vec![0.0; dim];
        for (_, j) in &ordered {
            linalg::axpy(1.0, j, &mut sum);
        }
        sum.iter().map(|s| s / k).collect()
    };
    let client_norms: Vec<(usize, f64)> = ordered.iter().map(|(id, j)| (*id, j.norm())).collect();
    let avg_norm_sq = linalg::norm_sq(&avg);
    let avg_norm = avg_norm_sq.sqrt();
    let mean_sq = client_norms.iter().map(|(_, n)| n * n).sum::<f64>() / k;

    let variance = if identical {
        0.0
    } else {
        ordered
            .iter()
            .map(|(_, j)| linalg::norm_sq(&linalg::sub(j, &avg)))
            .sum::<f64>()
            / k
    };
    let definitional = mean_sq - avg_norm_sq;
    if definitional < -1e-12 * mean_sq.max(1.0) {
        return Err(Error::Internal(format!(
            "negative cross-client variance {definitional:e} at round {round}"
        )));
    }
    Ok(CrossClientStats {
        round,
        avg_jacobian: WeightVector::new(avg),
        avg_norm,
        avg_norm_sq,
        variance,
        client_norms,
        client_count: ordered.len(),
    })
}

/// `beta_2 = alpha lambda^2 / 2`, `beta_1 = lambda - beta_2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCoefficients {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub alpha: f64,
}

impl BoundCoefficients {
    /// `beta_1 > 0`, equivalently `lambda < 2 / alpha` for `lambda > 0`.
    pub fn is_positive(&self) -> bool {
        self.beta1 > 0.0
    }
}

pub fn beta_coefficients(lambda: f64, alpha: f64) -> Result<BoundCoefficients> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "smoothness constant must be positive, got {alpha}"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lambda}")));
    }
    let beta2 = alpha * lambda * lambda / 2.0;
    Ok(BoundCoefficients {
        beta1: lambda - beta2,
        beta2,
        learning_rate: lambda,
        alpha,
    })
}

/// `lambda* = |J_p|^2 / (alpha (sigma_p^2 + |J_p|^2))`.
pub fn optimal_learning_rate(stats: &CrossClientStats, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("smoothness constant must be positive"));
    }
    let denom = stats.variance + stats.avg_norm_sq();
    if denom <= 0.0 || stats.client_norms.iter().all(|(_, n)| *n == 0.0) {
        return Err(Error::Converged);
    }
    Ok(stats.avg_norm_sq() / (alpha * denom))
}

/// The same rate written as `K |J_p|^2 / (alpha sum_k |J_p^(k)|^2)`.
pub fn optimal_learning_rate_from_norms(stats: &CrossClientStats, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("smoothness constant must be positive"));
    }
    let sum_sq: f64 = stats.client_norms.iter().map(|(_, n)| n * n).sum();
    if sum_sq <= 0.0 {
        return Err(Error::Converged);
    }
    Ok(stats.client_count as f64 * stats.avg_norm_sq() / (alpha * sum_sq))
}

/// Right-hand side of the round-wise source-loss bound,
/// `prev_loss - beta_1 |J_p|^2 + beta_2 sigma_p^2`.
pub fn round_bound_rhs(prev_loss: f64, lambda: f64, alpha: f64, stats: &CrossClientStats) -> Result<f64> {
    let c = beta_coefficients(lambda, alpha)?;
    Ok(prev_loss - c.beta1 * stats.avg_norm_sq() + c.beta2 * stats.variance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jac(v: &[&[f64]]) -> Vec<(usize, WeightVector)> {
        v.iter()
            .enumerate()
            .map(|(i, x)| (i, WeightVector::new(x.to_vec())))
            .collect()
    }

    #[test]
    fn orthogonal_pair_by_hand() {
        let s = cross_client_stats(&jac(&[&[1.0, 0.0], &[0.0, 1.0]]), 3).unwrap();
        assert_eq!(s.avg_norm_sq(), 0.5);
        assert_eq!(s.variance, 0.5);
        assert_eq!(s.client_count, 2);
        assert_eq!(s.round, 3);
        assert_eq!(optimal_learning_rate(&s, 1.0).unwrap(), 0.5);
        assert_eq!(optimal_learning_rate_from_norms(&s, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn identical_jacobians_have_zero_variance() {
        let v: &[f64] = &[0.3, -1.7, 2.2];
        let s = cross_client_stats(&jac(&[v, v, v]), 0).unwrap();
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.avg_norm, WeightVector::new(v.to_vec()).norm());
        assert_eq!(optimal_learning_rate(&s, 4.0).unwrap(), 0.25);
        let single = cross_client_stats(&jac(&[v]), 0).unwrap();
        assert_eq!(single.variance, 0.0);
    }

    #[test]
    fn stats_errors() {
        assert!(cross_client_stats(&[], 0).is_err());
        assert!(matches!(
            cross_client_stats(&jac(&[&[1.0], &[1.0, 2.0]]), 0),
            Err(Error::DimensionMismatch { .. })
        ));
        let z = cross_client_stats(&jac(&[&[0.0, 0.0], &[0.0, 0.0]]), 0).unwrap();
        assert!(matches!(optimal_learning_rate(&z, 1.0), Err(Error::Converged)));
    }

    #[test]
    fn order_of_clients_does_not_matter() {
        let a = cross_client_stats(&jac(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]), 0).unwrap();
        let mut shuffled = jac(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        shuffled.reverse();
        let b = cross_client_stats(&shuffled, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beta_examples() {
        let c = beta_coefficients(0.0, 3.0).unwrap();
        assert_eq!((c.beta1, c.beta2), (0.0, 0.0));
        let c = beta_coefficients(0.5, 2.0).unwrap();
        assert_eq!((c.beta1, c.beta2), (0.25, 0.25));
        let c = beta_coefficients(2.0, 1.0).unwrap();
        assert_eq!(c.beta1, 0.0);
        assert!(!c.is_positive());
        assert!(beta_coefficients(1.9, 1.0).unwrap().is_positive());
        assert!(beta_coefficients(0.1, 0.0).is_err());
        assert!(beta_coefficients(-0.1, 1.0).is_err());
    }

    #[test]
    fn rhs_examples() {
        let s = cross_client_stats(&jac(&[&[3.0, 4.0], &[3.0, 4.0]]), 0).unwrap();
        assert_eq!(round_bound_rhs(2.0, 0.0, 1.0, &s).unwrap(), 2.0);
        let alpha = 5.0;
        let l = optimal_learning_rate(&s, alpha).unwrap();
        let rhs = round_bound_rhs(10.0, l, alpha, &s).unwrap();
        assert!((rhs - (10.0 - 25.0 / (2.0 * alpha))).abs() < 1e-12);
        assert!(round_bound_rhs(10.0, 0.1, alpha, &s).unwrap() < 10.0);
    }
}
