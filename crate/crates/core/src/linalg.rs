//! Small dense vector helpers and a symmetric power iteration.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// Largest eigenvalue of a symmetric positive semidefinite row-major matrix.
///
/// Iterates until the Rayleigh quotient changes by less than `tol` (relative),
/// then returns `mu + ||A v - mu v||`. Some eigenvalue lies within the residual
/// of `mu`, so the padded value does not undershoot the converged eigenvalue.
pub fn power_iteration_psd(a: &[f64], n: usize, tol: f64, max_iter: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return 0.0;
    }
    let matvec = |v: &[f64], out: &mut [f64]| {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&a[i * n..(i + 1) * n], v);
        }
    };
    // Deterministic start with a small tilt so it is not orthogonal to the top
    // eigenvector for structured matrices.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * (i as f64 + 1.0).sqrt()).collect();
    let vn = norm(&v);
    v.iter_mut().for_each(|x| *x /= vn);
    let mut av = vec![0.0; n];
    let mut mu = 0.0;
    for _ in 0..max_iter {
        matvec(&v, &mut av);
        let next = dot(&v, &av);
        let an = norm(&av);
        if an == 0.0 {
            return 0.0;
        }
        let done = (next - mu).abs() <= tol * next.abs().max(1e-300);
        mu = next;
        for (vi, ai) in v.iter_mut().zip(&av) {
            *vi = ai / an;
        }
        if done {
            break;
        }
    }
    matvec(&v, &mut av);
    let mu = dot(&v, &av);
    let residual: f64 = av
        .iter()
        .zip(&v)
        .map(|(ai, vi)| (ai - mu * vi).powi(2))
        .sum::<f64>()
        .sqrt();
    mu + residual
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_diagonal() {
        let a = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let l = power_iteration_psd(&a, 3, 1e-12, 10_000);
        assert!((l - 3.0).abs() < 1e-6, "{l}");
        assert!(l >= 3.0 - 1e-12);
    }

    #[test]
    fn power_iteration_rank_one() {
        // x x^T with x = (1, 2): eigenvalue 5
        let a = [1.0, 2.0, 2.0, 4.0];
        let l = power_iteration_psd(&a, 2, 1e-12, 1000);
        assert!((l - 5.0).abs() < 1e-9);
    }
}
