//! Disjoint assignment of sample indices to federated clients.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    LabelSubset,
    Dirichlet,
}

/// `assignments[k]` holds the sorted sample indices owned by client `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub seed: u64,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn assigned(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Checks pairwise disjointness and index validity against `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.assignments.is_empty() {
            return Err(Error::invalid("partition has no clients"));
        }
        let mut seen = vec![false; n];
        for (k, idx) in self.assignments.iter().enumerate() {
            for &i in idx {
                if i >= n {
                    return Err(Error::invalid(format!("client {k}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    /// Materializes client `k`'s data; `None` when the client owns nothing.
    pub fn client_data(&self, dataset: &Dataset, k: usize) -> Result<Option<Dataset>> {
        match self.assignments.get(k) {
            Some(idx) if !idx.is_empty() => dataset.subset(idx).map(Some),
            Some(_) => Ok(None),
            None => Err(Error::invalid(format!("no client {k}"))),
        }
    }
}

fn class_indices(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Each client picks `classes_per_client` distinct classes uniformly at random
/// (independently of other clients); each class's samples are shuffled and
/// dealt to the clients that picked it in contiguous chunks whose sizes differ
/// by at most one. Classes nobody picked stay unassigned.
pub fn partition_label_subset(
    dataset: &Dataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let classes = dataset.num_classes();
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::invalid(format!("classes per client must be in [1, {classes}]")));
    }
    let mut rng = seed::rng(seed);
    let picks: Vec<Vec<usize>> = (0..num_clients)
        .map(|_| {
            let mut c = index::sample(&mut rng, classes, classes_per_client).into_vec();
            c.sort_unstable();
            c
        })
        .collect();

    let mut assignments = vec![Vec::new(); num_clients];
    for (class, mut samples) in class_indices(dataset).into_iter().enumerate() {
        let takers: Vec<usize> = (0..num_clients).filter(|&k| picks[k].contains(&class)).collect();
        if takers.is_empty() {
            continue;
        }
        if samples.len() < takers.len() {
            return Err(Error::InsufficientClassSamples {
                class,
                available: samples.len(),
                requested: takers.len(),
            });
        }
        samples.shuffle(&mut rng);
        let (q, r) = (samples.len() / takers.len(), samples.len() % takers.len());
        let mut start = 0;
        for (j, &k) in takers.iter().enumerate() {
            let len = q + usize::from(j < r);
            assignments[k].extend_from_slice(&samples[start..start + len]);
            start += len;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::LabelSubset,
        seed,
        assignments,
    })
}

/// Per class, draws client proportions from a symmetric Dirichlet
/// (normalized Gamma(concentration) variates) and assigns each sample of the
/// class to a client sampled from those proportions.
pub fn partition_dirichlet(
    dataset: &Dataset,
    num_clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::invalid("concentration must be positive"));
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let mut assignments = vec![Vec::new(); num_clients];
    for samples in class_indices(dataset) {
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // Underflow for tiny concentrations: all mass on one client.
            let k = rng.random_range(0..num_clients);
            props = (0..num_clients).map(|j| f64::from(u8::from(j == k))).collect();
        }
        let mut cumulative = Vec::with_capacity(num_clients);
        let mut acc = 0.0;
        for p in &props {
            acc += p;
            cumulative.push(acc);
        }
        for i in samples {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cumulative.partition_point(|&c| c <= u).min(num_clients - 1);
            assignments[k].push(i);
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::Dirichlet,
        seed,
        assignments,
    })
}
