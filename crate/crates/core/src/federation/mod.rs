//! Federated round protocols: FedAvg, FedGTST and the FedIIR-lite baseline.
//!
//! A round broadcasts the global weights (and, for FedGTST, the guide norm),
//! runs local training on every participant, then aggregates the returned
//! models by an unweighted mean in client-id order. Client work may run on a
//! thread pool; every reduction happens afterwards in a fixed order, so results
//! do not depend on the number of threads.

mod local;
mod protocol;

pub use local::{
    local_update_aligned, local_update_regularized, local_update_standard, regularized_gradient, regularized_objective,
    LocalOptions,
};
pub use protocol::{
    aggregate, select_participants, select_standard_subset, surrogate_norm, update_guide_norm, Client, CommCount,
    Federation, PretrainOutcome, RoundRecord, ServerState, StopReason,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statistics::{self, CrossClientStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedgtst")]
    FedGtst,
    #[serde(rename = "fediir-lite")]
    FedIirLite,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedGtst => "fedgtst",
            Algorithm::FedIirLite => "fediir-lite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Fixed {
        lr: f64,
    },
    /// `initial / factor^floor((round - 1) / period)`
    StepDecay {
        initial: f64,
        factor: f64,
        period: usize,
    },
    /// Bound-minimizing rate from the round's cross-client statistics.
    OptimalFromStats {
        alpha: f64,
    },
}

impl LrSchedule {
    pub fn rate(&self, round: usize, stats: &CrossClientStats) -> Result<f64> {
        match *self {
            LrSchedule::Fixed { lr } => Ok(lr),
            LrSchedule::StepDecay {
                initial,
                factor,
                period,
            } => {
                let k = (round.saturating_sub(1) / period.max(1)) as i32;
                Ok(initial / factor.powi(k))
            }
            LrSchedule::OptimalFromStats { alpha } => statistics::optimal_learning_rate(stats, alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    FullBatch,
    Minibatch { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Gd,
    Adam { beta1: f64, beta2: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub algorithm: Algorithm,
    pub participation: f64,
    /// Fraction of all clients (capped by the participants) that also run
    /// standard training to produce a surrogate norm.
    pub std_subset_fraction: f64,
    /// Regularizer coefficient.
    pub xi: f64,
    pub lr_schedule: LrSchedule,
    pub local_steps: usize,
    pub batch_mode: BatchMode,
    pub optimizer: Optimizer,
}

impl RoundConfig {
    /// Single full-batch GD step, full participation, no regularizer.
    pub fn fedavg(lr_schedule: LrSchedule) -> Self {
        Self {
            algorithm: Algorithm::FedAvg,
            participation: 1.0,
            std_subset_fraction: 0.0,
            xi: 0.0,
            lr_schedule,
            local_steps: 1,
            batch_mode: BatchMode::FullBatch,
            optimizer: Optimizer::Gd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::invalid("participation fraction must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.std_subset_fraction) {
            return Err(Error::invalid("standard-subset fraction must be in [0, 1]"));
        }
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(Error::invalid("xi must be a finite value >= 0"));
        }
        if self.local_steps == 0 {
            return Err(Error::invalid("local steps must be >= 1"));
        }
        if let BatchMode::Minibatch { size: 0 } = self.batch_mode {
            return Err(Error::invalid("minibatch size must be >= 1"));
        }
        match self.lr_schedule {
            LrSchedule::Fixed { lr } if !(lr >= 0.0) => return Err(Error::invalid("learning rate must be >= 0")),
            LrSchedule::StepDecay { initial, factor, .. } if !(initial >= 0.0 && factor > 0.0) => {
                return Err(Error::invalid("step decay needs initial >= 0 and factor > 0"))
            }
            LrSchedule::OptimalFromStats { alpha } => {
                if !(alpha > 0.0) {
                    return Err(Error::invalid("optimal schedule needs alpha > 0"));
                }
                if self.optimizer != Optimizer::Gd || self.local_steps != 1 {
                    return Err(Error::invalid(
                        "optimal-from-stats schedule requires gd with one local step",
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Single full-batch GD step with full participation: the setting the
    /// round-wise descent bound is stated for.
    pub fn is_single_gd_step(&self) -> bool {
        self.optimizer == Optimizer::Gd
            && self.local_steps == 1
            && self.batch_mode == BatchMode::FullBatch
            && self.participation == 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let mut c = RoundConfig::fedavg(LrSchedule::Fixed { lr: 0.1 });
        c.validate().unwrap();
        c.participation = 0.0;
        assert!(c.validate().is_err());
        let mut c = RoundConfig::fedavg(LrSchedule::OptimalFromStats { alpha: 1.0 });
        c.validate().unwrap();
        c.local_steps = 2;
        assert!(c.validate().is_err());
        let mut c = RoundConfig::fedavg(LrSchedule::OptimalFromStats { alpha: 1.0 });
        c.optimizer = Optimizer::adam();
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_decay() {
        let s = LrSchedule::StepDecay {
            initial: 0.01,
            factor: 10.0,
            period: 50,
        };
        let stats = statistics::cross_client_stats(&[(0, crate::models::WeightVector::new(vec![1.0]))], 0).unwrap();
        assert_eq!(s.rate(1, &stats).unwrap(), 0.01);
        assert_eq!(s.rate(50, &stats).unwrap(), 0.01);
        assert!((s.rate(51, &stats).unwrap() - 0.001).abs() < 1e-18);
        assert!((s.rate(101, &stats).unwrap() - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn serde_names() {
        let c = RoundConfig::fedavg(LrSchedule::StepDecay {
            initial: 0.01,
            factor: 10.0,
            period: 50,
        });
        let j = serde_json::to_string(&c).unwrap();
        assert!(j.contains("\"fedavg\""));
        assert!(j.contains("\"step-decay\""));
        let back: RoundConfig = serde_json::from_str(&j).unwrap();
        assert_eq!(back, c);
    }
}
