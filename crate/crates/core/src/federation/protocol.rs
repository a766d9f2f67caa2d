//! Server-side round protocol and multi-round pretraining driver.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::local::{self, LocalOptions};
use super::{Algorithm, RoundConfig};
use crate::domains::{Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{self, HvpMode, ModelSpec, Smoothness, WeightVector};
use crate::seed::{self, Stream};
use crate::statistics::{self, CrossClientStats};

/// `max(1, round(fraction * k))` distinct ids drawn uniformly without
/// replacement, returned ascending.
pub fn select_participants(k: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let m = ((fraction * k as f64).round() as usize).clamp(1, k);
    if m == k {
        return (0..k).collect();
    }
    let mut rng = seed::stream_rng(seed, Stream::Participation, round as u64);
    let mut ids = index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    ids
}

/// The standard-training subset `phi`: `min(|participants|, max(1 if
/// fraction > 0 else 0, round(fraction * num_clients)))` participants.
pub fn select_standard_subset(
    participants: &[usize],
    fraction: f64,
    num_clients: usize,
    round: usize,
    seed: u64,
) -> Vec<usize> {
    let floor = usize::from(fraction > 0.0);
    let m = ((fraction * num_clients as f64).round() as usize)
        .max(floor)
        .min(participants.len());
    if m == 0 {
        return Vec::new();
    }
    let mut rng = seed::stream_rng(seed, Stream::StandardSubset, round as u64);
    let mut ids: Vec<usize> = index::sample(&mut rng, participants.len(), m)
        .into_iter()
        .map(|i| participants[i])
        .collect();
    ids.sort_unstable();
    ids
}

pub fn surrogate_norm(reg_norm: f64, std_norm: Option<f64>) -> f64 {
    match std_norm {
        Some(s) => reg_norm.max(s),
        None => reg_norm,
    }
}

/// Unweighted mean, summed in ascending client-id order.
pub fn aggregate(models: &[(usize, WeightVector)]) -> Result<WeightVector> {
    let dim = models
        .first()
        .map(|(_, w)| w.len())
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    // Identical uploads (e.g. a zero learning rate) aggregate to themselves
    // exactly rather than up to rounding.
    if models.iter().all(|(_, w)| *w == models[0].1) {
        return Ok(models[0].1.clone());
    }
    let mut ordered: Vec<&(usize, WeightVector)> = models.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let mut sum = vec![0.0; dim];
    for (_, w) in ordered {
        if w.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: w.len(),
                context: "client model",
            });
        }
        linalg::axpy(1.0, w, &mut sum);
    }
    let k = models.len() as f64;
    Ok(WeightVector::new(sum.into_iter().map(|s| s / k).collect()))
}

pub fn update_guide_norm(surrogates: &[f64]) -> Result<f64> {
    surrogates
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::invalid("no surrogate norms received"))
}

/// A client and its local source data.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub data: Dataset,
    pub last_surrogate_norm: f64,
}

/// Scalars and vector entries exchanged in one round (uplink + downlink).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCount {
    pub scalars: u64,
    pub vector_entries: u64,
}

impl CommCount {
    /// Model broadcast and upload cost every algorithm pays, plus the extra
    /// messages of each protocol:
    /// * FedGTST: one norm per participant up, one guide norm broadcast;
    /// * FedIIR-lite: each participant uploads its gradient, and from the
    ///   second round on the server sends the averaged gradient back.
    pub fn for_round(algorithm: Algorithm, dim: usize, participants: usize, has_target: bool) -> Self {
        let (d, n) = (dim as u64, participants as u64);
        let base = 2 * d * n;
        match algorithm {
            Algorithm::FedAvg => Self {
                scalars: 0,
                vector_entries: base,
            },
            Algorithm::FedGtst => Self {
                scalars: n + 1,
                vector_entries: base,
            },
            Algorithm::FedIirLite => Self {
                scalars: 0,
                vector_entries: base + d * n + if has_target { d * n } else { 0 },
            },
        }
    }
}

/// Full trace of one federated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    /// The standard-training subset `phi` (FedGTST only).
    pub std_subset: Vec<usize>,
    pub learning_rate: f64,
    /// Regularizer coefficient actually applied this round.
    pub effective_xi: f64,
    /// Source loss of the broadcast model.
    pub pre_loss: f64,
    /// Source loss of the aggregated model.
    pub post_loss: f64,
    /// Participants' Jacobians at the broadcast model.
    pub stats: CrossClientStats,
    /// New guide norm (for FedAvg and FedIIR-lite: the largest post-update
    /// client norm, observed but never transmitted).
    pub guide_norm: f64,
    /// `(client id, transmitted surrogate norm)`
    pub surrogate_norms: Vec<(usize, f64)>,
    pub comm: CommCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub global: WeightVector,
    pub guide_norm: f64,
    pub round: usize,
    pub seed: u64,
    /// Source loss of `global`.
    pub source_loss: f64,
    pub history: Vec<RoundRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    EarlyStop,
    Converged,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub weights: WeightVector,
    pub history: Vec<RoundRecord>,
    /// Global models at rounds 0, P/4, P/2, 3P/4 and the final round.
    pub snapshots: Vec<(usize, WeightVector)>,
    pub stop: StopReason,
    pub initial_loss: f64,
}

/// Clients with data plus the shared model and execution settings.
pub struct Federation {
    pub spec: ModelSpec,
    pub clients: Vec<Client>,
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<std::sync::Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Federation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Federation")
            .field("spec", &self.spec)
            .field("clients", &self.clients.len())
            .field("threads", &self.threads)
            .finish()
    }
}

struct ClientOutcome {
    id: usize,
    weights: WeightVector,
    reg_norm: f64,
    std_norm: Option<f64>,
}

impl Federation {
    /// Builds one client per non-empty partition cell; empty cells are skipped
    /// but keep their id numbering.
    pub fn new(spec: ModelSpec, dataset: &Dataset, plan: &PartitionPlan) -> Result<Self> {
        spec.validate()?;
        plan.validate(dataset.len())?;
        let mut clients = Vec::new();
        for k in 0..plan.num_clients() {
            if let Some(data) = plan.client_data(dataset, k)? {
                clients.push(Client {
                    id: k,
                    data,
                    last_surrogate_norm: 0.0,
                });
            }
        }
        Self::from_clients(spec, clients)
    }

    pub fn from_clients(spec: ModelSpec, clients: Vec<Client>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("federation has no client with data"));
        }
        Ok(Self {
            spec,
            clients,
            threads: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        })
    }

    /// Worker threads for client updates; results do not depend on it.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.threads = threads.max(1);
        #[cfg(feature = "parallel")]
        {
            self.pool = if self.threads > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(self.threads)
                    .build()
                    .map_err(|e| Error::invalid(e.to_string()))?;
                Some(std::sync::Arc::new(pool))
            } else {
                None
            };
        }
        Ok(self)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    fn map<T, F>(&self, items: &[usize], f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(|&i| f(i)).collect());
        }
        items.iter().map(|&i| f(i)).collect()
    }

    /// `L_src(w)`: unweighted mean of the clients' empirical losses.
    pub fn source_loss(&self, w: &[f64]) -> Result<f64> {
        let losses: Vec<Result<f64>> = self.map(&(0..self.clients.len()).collect::<Vec<_>>(), |i| {
            models::loss(&self.spec, w, &self.clients[i].data)
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / self.clients.len() as f64)
    }

    /// The largest per-client smoothness constant; it bounds the curvature of
    /// every client loss and of their mean.
    pub fn smoothness(&self) -> Result<Smoothness> {
        let mut alpha: f64 = 0.0;
        let mut certified = true;
        for c in &self.clients {
            let s = models::smoothness_constant(&self.spec, &c.data)?;
            alpha = alpha.max(s.alpha);
            certified &= s.certified;
        }
        Ok(Smoothness { alpha, certified })
    }

    pub fn init_state(&self, initial: WeightVector, seed: u64) -> Result<ServerState> {
        if initial.len() != self.spec.total_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.total_dim(),
                actual: initial.len(),
                context: "initial weights",
            });
        }
        let source_loss = self.source_loss(&initial)?;
        Ok(ServerState {
            global: initial,
            guide_norm: 0.0,
            round: 0,
            seed,
            source_loss,
            history: Vec::new(),
        })
    }

    /// Runs round `state.round + 1`, updates `state` and returns the record.
    pub fn run_round(&mut self, state: &mut ServerState, config: &RoundConfig) -> Result<RoundRecord> {
        config.validate()?;
        let round = state.round + 1;
        let seed = state.seed;
        let spec = &self.spec;
        let k_total = self.clients.len();
        let positions = select_participants(k_total, config.participation, round, seed);
        let participant_ids: Vec<usize> = positions.iter().map(|&i| self.clients[i].id).collect();

        let w = &state.global;
        let jacobians: Vec<Result<(usize, WeightVector)>> = self.map(&positions, |i| {
            let c = &self.clients[i];
            models::gradient(spec, w, &c.data).map(|g| (c.id, g))
        });
        let jacobians = jacobians.into_iter().collect::<Result<Vec<_>>>()?;
        let stats = statistics::cross_client_stats(&jacobians, round)?;
        let lr = config.lr_schedule.rate(round, &stats)?;

        let alignment_target = match config.algorithm {
            Algorithm::FedIirLite => state.history.last().map(|r| r.stats.avg_jacobian.clone()),
            _ => None,
        };
        // The first round has no guide norm (or alignment target) yet, so the
        // regularizer stays off until one has been exchanged.
        let effective_xi = match config.algorithm {
            Algorithm::FedAvg => 0.0,
            Algorithm::FedGtst if round == 1 => 0.0,
            Algorithm::FedIirLite if alignment_target.is_none() => 0.0,
            _ => config.xi,
        };
        let phi = match config.algorithm {
            Algorithm::FedGtst => {
                let pos_phi = select_standard_subset(&positions, config.std_subset_fraction, k_total, round, seed);
                pos_phi.iter().map(|&i| self.clients[i].id).collect()
            }
            _ => Vec::new(),
        };

        let guide = state.guide_norm;
        let hvp_mode = HvpMode::preferred(spec);
        let outcomes: Vec<Result<ClientOutcome>> = self.map(&positions, |i| {
            let c = &self.clients[i];
            let opts = LocalOptions {
                lr,
                steps: config.local_steps,
                batch_mode: config.batch_mode,
                optimizer: config.optimizer,
                hvp_mode,
                seed: seed::derive2(seed, Stream::Client, round as u64, c.id as u64),
            };
            let run = || -> Result<ClientOutcome> {
                let (weights, reg_norm) = match (config.algorithm, &alignment_target) {
                    (Algorithm::FedAvg, _) => local::local_update_standard(spec, w, &c.data, &opts)?,
                    (Algorithm::FedGtst, _) => {
                        local::local_update_regularized(spec, w, &c.data, guide, effective_xi, &opts)?
                    }
                    (Algorithm::FedIirLite, Some(t)) => {
                        local::local_update_aligned(spec, w, &c.data, t, effective_xi, &opts)?
                    }
                    (Algorithm::FedIirLite, None) => local::local_update_standard(spec, w, &c.data, &opts)?,
                };
                let std_norm = if phi.contains(&c.id) {
                    Some(local::local_update_standard(spec, w, &c.data, &opts)?.1)
                } else {
                    None
                };
                Ok(ClientOutcome {
                    id: c.id,
                    weights,
                    reg_norm,
                    std_norm,
                })
            };
            run().map_err(|e| e.at(round, c.id))
        });
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let surrogate_norms: Vec<(usize, f64)> = outcomes
            .iter()
            .map(|o| (o.id, surrogate_norm(o.reg_norm, o.std_norm)))
            .collect();
        for &(id, s) in &surrogate_norms {
            if let Some(c) = self.clients.iter_mut().find(|c| c.id == id) {
                c.last_surrogate_norm = s;
            }
        }
        let models: Vec<(usize, WeightVector)> = outcomes.into_iter().map(|o| (o.id, o.weights)).collect();
        let global = aggregate(&models)?;
        let new_guide = update_guide_norm(&surrogate_norms.iter().map(|(_, s)| *s).collect::<Vec<_>>())?;
        let post_loss = self.source_loss(&global)?;
        if !post_loss.is_finite() {
            return Err(Error::NonFinite {
                round: Some(round),
                client: None,
                step: config.local_steps,
            });
        }

        let record = RoundRecord {
            round,
            participants: participant_ids.clone(),
            std_subset: phi,
            learning_rate: lr,
            effective_xi,
            pre_loss: state.source_loss,
            post_loss,
            stats,
            guide_norm: new_guide,
            surrogate_norms,
            comm: CommCount::for_round(
                config.algorithm,
                spec.total_dim(),
                participant_ids.len(),
                alignment_target.is_some(),
            ),
        };
        state.global = global;
        state.guide_norm = if config.algorithm == Algorithm::FedGtst {
            new_guide
        } else {
            0.0
        };
        state.round = round;
        state.source_loss = post_loss;
        state.history.push(record.clone());
        Ok(record)
    }

    /// Runs up to `rounds` rounds. With `patience = Some(n)`, stops once the
    /// source loss has failed to improve on its best value by at least `1e-6`
    /// for `n` consecutive rounds. A round whose clients all report zero
    /// gradients under the optimal schedule ends training as converged.
    pub fn run_pretraining(
        &mut self,
        initial: WeightVector,
        config: &RoundConfig,
        rounds: usize,
        patience: Option<usize>,
        seed: u64,
    ) -> Result<PretrainOutcome> {
        if rounds == 0 {
            return Err(Error::invalid("need at least one round"));
        }
        config.validate()?;
        let mut state = self.init_state(initial, seed)?;
        let initial_loss = state.source_loss;
        let marks = [0, rounds / 4, rounds / 2, 3 * rounds / 4];
        let mut snapshots = vec![(0, state.global.clone())];
        let mut best = state.source_loss;
        let mut stale = 0;
        let mut stop = StopReason::Completed;
        for _ in 0..rounds {
            match self.run_round(&mut state, config) {
                Ok(rec) => {
                    if marks[1..].contains(&rec.round) && snapshots.last().map(|s| s.0) != Some(rec.round) {
                        snapshots.push((rec.round, state.global.clone()));
                    }
                    if rec.post_loss < best - 1e-6 {
                        best = rec.post_loss;
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                    if patience.is_some_and(|p| stale >= p) {
                        stop = StopReason::EarlyStop;
                        break;
                    }
                }
                Err(Error::Converged) => {
                    stop = StopReason::Converged;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if snapshots.last().map(|s| s.0) != Some(state.round) {
            snapshots.push((state.round, state.global.clone()));
        }
        Ok(PretrainOutcome {
            weights: state.global,
            history: state.history,
            snapshots,
            stop,
            initial_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{generate_gaussian_mixture, partition_label_subset};
    use crate::federation::LrSchedule;
    use crate::models::init_weights;

    #[test]
    fn participants_count_and_determinism() {
        assert_eq!(select_participants(7, 1.0, 3, 1), (0..7).collect::<Vec<_>>());
        let p = select_participants(50, 0.5, 4, 9);
        assert_eq!(p.len(), 25);
        assert_eq!(p, select_participants(50, 0.5, 4, 9));
        assert_ne!(p, select_participants(50, 0.5, 5, 9));
        assert_eq!(select_participants(10, 0.01, 1, 0).len(), 1);
    }

    #[test]
    fn standard_subset_rules() {
        let parts: Vec<usize> = (0..100).step_by(2).collect();
        assert!(select_standard_subset(&parts, 0.0, 100, 1, 0).is_empty());
        let phi = select_standard_subset(&parts, 0.1, 100, 1, 0);
        assert_eq!(phi.len(), 10);
        assert!(phi.iter().all(|i| parts.contains(i)));
        assert_eq!(select_standard_subset(&[3, 4], 0.5, 100, 1, 0).len(), 2);
        assert_eq!(select_standard_subset(&[3, 4, 5], 0.001, 10, 1, 0).len(), 1);
    }

    #[test]
    fn surrogate_and_guide() {
        assert_eq!(surrogate_norm(0.3, Some(0.5)), 0.5);
        assert_eq!(surrogate_norm(0.3, None), 0.3);
        assert_eq!(surrogate_norm(0.5, Some(0.5)), 0.5);
        assert_eq!(update_guide_norm(&[0.2, 0.5, 0.3]).unwrap(), 0.5);
        assert_eq!(update_guide_norm(&[0.7]).unwrap(), 0.7);
        assert_eq!(update_guide_norm(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(update_guide_norm(&[]).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let w = WeightVector::new(vec![1.0, -2.5, 3.0]);
        assert_eq!(aggregate(&[(0, w.clone()), (1, w.clone()), (2, w.clone())]).unwrap(), w);
        let neg = WeightVector::new(w.iter().map(|x| -x).collect());
        assert!(aggregate(&[(0, w.clone()), (1, neg)])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let m = aggregate(&[
            (1, WeightVector::new(vec![1.0, 3.0])),
            (0, WeightVector::new(vec![3.0, 1.0])),
        ])
        .unwrap();
        assert_eq!(&m[..], &[2.0, 2.0]);
        assert!(aggregate(&[
            (0, WeightVector::new(vec![1.0])),
            (1, WeightVector::new(vec![1.0, 2.0]))
        ])
        .is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn comm_counts() {
        assert_eq!(
            CommCount::for_round(Algorithm::FedAvg, 10, 5, false),
            CommCount {
                scalars: 0,
                vector_entries: 100
            }
        );
        assert_eq!(
            CommCount::for_round(Algorithm::FedGtst, 10, 5, false),
            CommCount {
                scalars: 6,
                vector_entries: 100
            }
        );
        assert_eq!(
            CommCount::for_round(Algorithm::FedIirLite, 10, 5, true).vector_entries,
            200
        );
    }

    fn small_federation(k: usize) -> (Federation, WeightVector) {
        let d = generate_gaussian_mixture(4, 3, 30, 3.0, 1).unwrap();
        let plan = partition_label_subset(&d, k, 2, 2).unwrap();
        let spec = ModelSpec::linear_regression(3);
        let w0 = init_weights(&spec, 5, 0.5);
        (Federation::new(spec, &d, &plan).unwrap(), w0)
    }

    #[test]
    fn one_round_is_gd_on_the_mean_jacobian() {
        let (mut fed, w0) = small_federation(4);
        let config = RoundConfig::fedavg(LrSchedule::Fixed { lr: 0.01 });
        let mut state = fed.init_state(w0.clone(), 3).unwrap();
        let rec = fed.run_round(&mut state, &config).unwrap();
        for i in 0..w0.len() {
            let expect = w0[i] - 0.01 * rec.stats.avg_jacobian[i];
            assert!((state.global[i] - expect).abs() < 1e-14);
        }
        assert_eq!(rec.pre_loss, fed.source_loss(&w0).unwrap());
        assert_eq!(state.round, 1);
    }

    #[test]
    fn single_client_matches_centralized_step() {
        let d = generate_gaussian_mixture(3, 2, 10, 3.0, 1).unwrap();
        let spec = ModelSpec::logistic(2, 3);
        let plan = PartitionPlan {
            scheme: crate::domains::PartitionScheme::LabelSubset,
            seed: 0,
            assignments: vec![(0..d.len()).collect()],
        };
        let mut fed = Federation::new(spec.clone(), &d, &plan).unwrap();
        let w0 = init_weights(&spec, 1, 0.1);
        let mut state = fed.init_state(w0.clone(), 0).unwrap();
        fed.run_round(&mut state, &RoundConfig::fedavg(LrSchedule::Fixed { lr: 0.3 }))
            .unwrap();
        let (w1, _) = local::local_update_standard(&spec, &w0, &d, &LocalOptions::gd(&spec, 0.3, 1)).unwrap();
        assert_eq!(state.global, w1);
    }

    #[test]
    fn early_stop_and_single_round() {
        let (mut fed, w0) = small_federation(3);
        let config = RoundConfig::fedavg(LrSchedule::Fixed { lr: 0.0 });
        let out = fed.run_pretraining(w0.clone(), &config, 50, Some(3), 1).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.stop, StopReason::EarlyStop);
        let out = fed.run_pretraining(w0, &config, 1, None, 1).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.snapshots.first().unwrap().0, 0);
        assert_eq!(out.snapshots.last().unwrap().0, 1);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (fed, w0) = small_federation(4);
        let spec = fed.spec.clone();
        let clients = fed.clients.clone();
        let mut config = RoundConfig::fedavg(LrSchedule::Fixed { lr: 0.01 });
        config.algorithm = Algorithm::FedGtst;
        config.xi = 0.5;
        config.participation = 0.5;
        config.std_subset_fraction = 0.25;
        let mut a = Federation::from_clients(spec.clone(), clients.clone()).unwrap();
        let mut b = Federation::from_clients(spec, clients)
            .unwrap()
            .with_threads(4)
            .unwrap();
        let ra = a.run_pretraining(w0.clone(), &config, 10, None, 7).unwrap();
        let rb = b.run_pretraining(w0, &config, 10, None, 7).unwrap();
        assert_eq!(ra.history, rb.history);
        assert_eq!(ra.weights, rb.weights);
    }
}
