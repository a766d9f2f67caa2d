//! WebAssembly bindings for the browser demo. Every entry point takes plain
//! numbers and returns a JSON string, so the page needs no extra glue.

use fedxfer::bounds::{self, HistoryMeta};
use fedxfer::domains::{generate_gaussian_mixture, partition_dirichlet, partition_label_subset, Dataset};
use fedxfer::federation::{Algorithm, Federation, LrSchedule, RoundConfig};
use fedxfer::models::init_weights;
use fedxfer::seed::{self, Stream};
use fedxfer::{ModelSpec, PartitionPlan};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Histogram {
    classes: usize,
    /// `counts[k][c]`: samples of class `c` held by client `k`.
    counts: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct StatsCurve {
    algorithm: &'static str,
    avg_jacobian_norm: Vec<f64>,
    jacobian_variance: Vec<f64>,
    source_loss: Vec<f64>,
}

#[derive(Serialize)]
struct BoundTrace {
    alpha: f64,
    learning_rate: f64,
    certified: bool,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    violations: usize,
}

fn to_json<T: Serialize>(r: fedxfer::Result<T>) -> Result<String, String> {
    let v = r.map_err(|e| e.to_string())?;
    serde_json::to_string(&v).map_err(|e| e.to_string())
}

fn mixture(classes: usize, dim: usize, per_class: usize, seed: u64) -> fedxfer::Result<Dataset> {
    generate_gaussian_mixture(classes, dim, per_class, 3.0, seed::derive(seed, Stream::Data, 0))
}

fn label_subset(data: &Dataset, clients: usize, per_client: usize, seed: u64) -> fedxfer::Result<PartitionPlan> {
    partition_label_subset(data, clients, per_client, seed::derive(seed, Stream::Partition, 0))
}

/// Per-client label counts. `concentration <= 0` selects the label-subset
/// scheme with `classes_per_client`; otherwise a Dirichlet split.
pub fn partition_histogram_json(
    classes: usize,
    clients: usize,
    classes_per_client: usize,
    concentration: f64,
    seed: u64,
) -> Result<String, String> {
    to_json((|| {
        let data = mixture(classes, 2, 60, seed)?;
        let plan = if concentration > 0.0 {
            partition_dirichlet(&data, clients, concentration, seed::derive(seed, Stream::Partition, 0))?
        } else {
            label_subset(&data, clients, classes_per_client, seed)?
        };
        let counts = plan
            .assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; classes];
                idx.iter().for_each(|&i| h[data.label(i)] += 1);
                h
            })
            .collect();
        Ok(Histogram { classes, counts })
    })())
}

/// FedAvg and FedGTST cross-client statistics, round by round, on a 10-class
/// mixture split two classes per client.
pub fn compare_statistics_json(clients: usize, rounds: usize, xi: f64, lr: f64, seed: u64) -> Result<String, String> {
    to_json((|| {
        let data = mixture(10, 10, 40, seed)?;
        let plan = label_subset(&data, clients, 2, seed)?;
        let spec = ModelSpec::logistic(10, 10);
        let mut curves = Vec::new();
        for algorithm in [Algorithm::FedAvg, Algorithm::FedGtst] {
            let mut fed = Federation::new(spec.clone(), &data, &plan)?;
            let config = RoundConfig {
                algorithm,
                xi,
                std_subset_fraction: 0.5,
                ..RoundConfig::fedavg(LrSchedule::Fixed { lr })
            };
            let init = init_weights(&spec, seed::derive(seed, Stream::Init, 0), 0.1);
            let out = fed.run_pretraining(
                init,
                &config,
                rounds,
                None,
                seed::derive(seed, Stream::Participation, 0),
            )?;
            curves.push(StatsCurve {
                algorithm: algorithm.name(),
                avg_jacobian_norm: out.history.iter().map(|r| r.stats.avg_norm).collect(),
                jacobian_variance: out.history.iter().map(|r| r.stats.variance).collect(),
                source_loss: out.history.iter().map(|r| r.post_loss).collect(),
            });
        }
        Ok(curves)
    })())
}

/// Round-wise source bound on linear regression with learning rate
/// `factor / alpha`.
pub fn round_bound_trace_json(clients: usize, rounds: usize, factor: f64, seed: u64) -> Result<String, String> {
    to_json((|| {
        let data = mixture(10, 8, 20, seed)?;
        let plan = label_subset(&data, clients, 2, seed)?;
        let spec = ModelSpec::linear_regression(8);
        let mut fed = Federation::new(spec.clone(), &data, &plan)?;
        let smoothness = fed.smoothness()?;
        let config = RoundConfig::fedavg(LrSchedule::Fixed {
            lr: factor / smoothness.alpha,
        });
        let init = init_weights(&spec, seed::derive(seed, Stream::Init, 0), 0.1);
        let out = fed.run_pretraining(init, &config, rounds, None, seed)?;
        let meta = HistoryMeta {
            spec,
            config,
            num_clients: fed.num_clients(),
            smoothness,
            initial_loss: out.initial_loss,
            seed,
        };
        let report = bounds::verify_round_bound(&meta, &out.history, smoothness)?;
        Ok(BoundTrace {
            alpha: smoothness.alpha,
            learning_rate: factor / smoothness.alpha,
            certified: report.certified,
            lhs: report.entries.iter().map(|e| e.lhs).collect(),
            rhs: report.entries.iter().map(|e| e.rhs).collect(),
            violations: report.violations(),
        })
    })())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = partitionHistogram)]
pub fn partition_histogram(
    classes: usize,
    clients: usize,
    classes_per_client: usize,
    concentration: f64,
    seed: u32,
) -> Result<String, JsValue> {
    js(partition_histogram_json(
        classes,
        clients,
        classes_per_client,
        concentration,
        seed as u64,
    ))
}

#[wasm_bindgen(js_name = compareStatistics)]
pub fn compare_statistics(clients: usize, rounds: usize, xi: f64, lr: f64, seed: u32) -> Result<String, JsValue> {
    js(compare_statistics_json(clients, rounds, xi, lr, seed as u64))
}

#[wasm_bindgen(js_name = roundBoundTrace)]
pub fn round_bound_trace(clients: usize, rounds: usize, factor: f64, seed: u32) -> Result<String, JsValue> {
    js(round_bound_trace_json(clients, rounds, factor, seed as u64))
}
