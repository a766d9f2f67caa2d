use fedxfer::domains::{generate_gaussian_mixture, partition_dirichlet, partition_label_subset, read_csv, write_csv};
use fedxfer::models::{self, init_weights, smoothness_constant, Activation};
use fedxfer::seed::{self, Stream};
use fedxfer::statistics::{cross_client_stats, optimal_learning_rate, optimal_learning_rate_from_norms};
use fedxfer::transfer::{estimate_h_discrepancy, AscentOptions};
use fedxfer::{Dataset, ModelSpec, WeightVector};
use proptest::prelude::*;
use rand::Rng;

fn mixture(seed: u64) -> Dataset {
    generate_gaussian_mixture(3, 3, 10, 2.0, seed).unwrap()
}

fn specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::linear_regression(3),
        ModelSpec::logistic(3, 3),
        ModelSpec::logistic(3, 3).without_bias(),
        ModelSpec::mlp(3, vec![4], 3, Activation::Tanh),
    ]
}

fn central_difference(spec: &ModelSpec, w: &[f64], d: &Dataset) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|i| {
            let h = 1e-6 * w[i].abs().max(1.0);
            x[i] = w[i] + h;
            let fp = models::loss(spec, &x, d).unwrap();
            x[i] = w[i] - h;
            let fm = models::loss(spec, &x, d).unwrap();
            x[i] = w[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradients_match_finite_differences(seed in 0u64..1000, which in 0usize..4) {
        let spec = &specs()[which];
        let d = mixture(seed % 7);
        let w = init_weights(spec, seed, 1.0);
        let g = models::gradient(spec, &w, &d).unwrap();
        let fd = central_difference(spec, &w, &d);
        let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-5 * scale.max(1e-3), "err {err} scale {scale}");
    }

    #[test]
    fn linear_models_are_convex(seed in 0u64..1000, t in 0.0f64..1.0, which in 0usize..3) {
        let spec = &specs()[which];
        let d = mixture(seed % 5);
        let a = init_weights(spec, seed, 2.0);
        let b = init_weights(spec, seed + 1, 2.0);
        let mid: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let lhs = models::loss(spec, &mid, &d).unwrap();
        let rhs = t * models::loss(spec, &a, &d).unwrap() + (1.0 - t) * models::loss(spec, &b, &d).unwrap();
        prop_assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn optimal_rate_is_scale_invariant(seed in 0u64..1000, c in 1e-3f64..1e3, alpha in 0.1f64..10.0) {
        let mut rng = seed::rng(seed);
        let k = rng.random_range(2..6);
        let jac: Vec<(usize, WeightVector)> = (0..k)
            .map(|i| (i, WeightVector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect())))
            .collect();
        let scaled: Vec<(usize, WeightVector)> = jac
            .iter()
            .map(|(i, w)| (*i, WeightVector::new(w.iter().map(|x| c * x).collect())))
            .collect();
        let s1 = cross_client_stats(&jac, 1).unwrap();
        let s2 = cross_client_stats(&scaled, 1).unwrap();
        let l1 = optimal_learning_rate(&s1, alpha).unwrap();
        let l2 = optimal_learning_rate(&s2, alpha).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-10 * l1);
        prop_assert!((optimal_learning_rate(&s1, 2.0 * alpha).unwrap() - l1 / 2.0).abs() <= 1e-12 * l1);
        let l3 = optimal_learning_rate_from_norms(&s1, alpha).unwrap();
        prop_assert!((l1 - l3).abs() <= 1e-12 * l1);
        // Never exceeds 1/alpha, reached only when every Jacobian agrees.
        prop_assert!(l1 <= 1.0 / alpha * (1.0 + 1e-12));
    }

    #[test]
    fn partitions_are_disjoint(seed in 0u64..500, k in 1usize..8, conc in 0.05f64..5.0) {
        let d = generate_gaussian_mixture(4, 2, 12, 1.0, seed).unwrap();
        let plan = partition_dirichlet(&d, k, conc, seed).unwrap();
        prop_assert!(plan.validate(d.len()).is_ok());
        prop_assert_eq!(plan.assigned(), d.len());
        let plan = partition_label_subset(&d, k, 2, seed).unwrap();
        prop_assert!(plan.validate(d.len()).is_ok());
    }

    #[test]
    fn csv_round_trip_is_exact(seed in 0u64..200) {
        let d = generate_gaussian_mixture(3, 4, 5, 1.3, seed).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Some(3)).unwrap();
        prop_assert_eq!(back, d);
    }
}

#[test]
fn smoothness_bounds_gradient_lipschitz_ratio() {
    let d = mixture(3);
    for spec in &specs()[..3] {
        let alpha = smoothness_constant(spec, &d).unwrap();
        assert!(alpha.certified);
        let mut rng = seed::rng(seed::derive(9, Stream::Estimator, 0));
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let a: Vec<f64> = (0..spec.total_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..spec.total_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ga = models::gradient(spec, &a, &d).unwrap();
            let gb = models::gradient(spec, &b, &d).unwrap();
            let num: f64 = ga
                .iter()
                .zip(gb.iter())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(num / den);
        }
        assert!(
            worst <= alpha.alpha * (1.0 + 1e-9),
            "{spec:?}: {worst} > {}",
            alpha.alpha
        );
    }
}

#[test]
fn mlp_smoothness_is_flagged_empirical() {
    let spec = ModelSpec::mlp(3, vec![4], 3, Activation::Relu);
    let s = smoothness_constant(&spec, &mixture(1)).unwrap();
    assert!(!s.certified);
    assert!(s.alpha > 0.0);
}

fn one_param_data() -> (ModelSpec, Dataset, Dataset) {
    let spec = ModelSpec::linear_regression(1).without_bias();
    let d1 = Dataset::new(vec![1.0, 2.0, -1.0], 1, vec![1, 0, 2], 3).unwrap();
    let d2 = Dataset::new(vec![0.5, 3.0], 1, vec![2, 1], 3).unwrap();
    (spec, d1, d2)
}

#[test]
fn h_discrepancy_matches_grid_oracle() {
    let (spec, d1, d2) = one_param_data();
    for radius in [0.5, 1.0, 2.0] {
        let n = 200_000;
        let grid = (0..=n)
            .map(|i| -radius + 2.0 * radius * i as f64 / n as f64)
            .map(|w| (models::loss(&spec, &[w], &d1).unwrap() - models::loss(&spec, &[w], &d2).unwrap()).abs())
            .fold(0.0, f64::max);
        let est = estimate_h_discrepancy(
            &spec,
            &d1,
            &d2,
            &AscentOptions {
                radius,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            (est.value - grid).abs() < 1e-3,
            "radius {radius}: {} vs {grid}",
            est.value
        );
        assert!(!est.certified);
    }
}

#[test]
fn h_discrepancy_grows_with_radius() {
    let (spec, d1, d2) = one_param_data();
    let mut last = 0.0;
    for radius in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let e = estimate_h_discrepancy(
            &spec,
            &d1,
            &d2,
            &AscentOptions {
                radius,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(e.value >= last - 1e-9, "radius {radius}: {} < {last}", e.value);
        last = e.value;
    }
}
