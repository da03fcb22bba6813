//! Fully specified simulation scenarios.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackSpec;
use crate::belief::CovarianceMode;
use crate::error::{ClientId, Result, SabreError};
use crate::network::{JointClock, Topology};
use crate::task::LinearTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Sabre,
    /// Fixed uniform trust over every received belief.
    Bayp2pfl,
    TrimmedMean,
    Clipping,
    Zeno,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sabre => "sabre",
            Algorithm::Bayp2pfl => "bayp2pfl",
            Algorithm::TrimmedMean => "trimmed-mean",
            Algorithm::Clipping => "clipping",
            Algorithm::Zeno => "zeno",
        }
    }
}

/// How long a received message stays usable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessagePolicy {
    /// Latest message per sender is kept until replaced.
    #[default]
    Persist,
    /// Messages older than one joint tick are discarded.
    ExpireAfterTick,
}

fn default_kappa() -> f64 {
    2.0
}

fn default_zeno_rho() -> f64 {
    1e-3
}

fn default_zeno_validation() -> usize {
    50
}

/// Algorithm-specific knobs. Unused ones are ignored by other algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmParams {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Coordinates compared by the confidence test (`None` = all).
    #[serde(default)]
    pub confidence_coordinates: Option<Vec<usize>>,
    /// Trimmed-mean trim count; defaults to the number of compromised clients.
    /// Clamped per aggregation so at least one value survives.
    #[serde(default)]
    pub trim: Option<usize>,
    /// Clipping radius; `None` uses the median offset norm.
    #[serde(default)]
    pub clip_tau: Option<f64>,
    /// Zeno drop count; defaults to the number of compromised clients.
    #[serde(default)]
    pub zeno_drop: Option<usize>,
    #[serde(default = "default_zeno_rho")]
    pub zeno_rho: f64,
    /// Size of each client's Zeno validation set, drawn from its own data distribution.
    #[serde(default = "default_zeno_validation")]
    pub zeno_validation: usize,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        Self {
            kappa: default_kappa(),
            confidence_coordinates: None,
            trim: None,
            clip_tau: None,
            zeno_drop: None,
            zeno_rho: default_zeno_rho(),
            zeno_validation: default_zeno_validation(),
        }
    }
}

fn default_patience() -> usize {
    20
}

/// Stop training the local model once its validation error stops improving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeParams {
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub validation_size: usize,
}

fn default_prior_variance() -> f64 {
    10.0
}

fn default_batch() -> usize {
    1
}

fn default_sigma_threshold() -> f64 {
    1e-6
}

fn default_t_max() -> u64 {
    8000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub task: LinearTask,
    pub topology: Topology,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub params: AlgorithmParams,
    /// Compromised clients and their behavior.
    #[serde(default)]
    pub attacks: BTreeMap<ClientId, AttackSpec>,
    /// Local cycle length of each client in time units; `None` = all 1.
    #[serde(default)]
    pub cycle_lengths: Option<Vec<u64>>,
    /// Phase offset of each client's first cycle; `None` = all 0.
    #[serde(default)]
    pub phases: Option<Vec<u64>>,
    #[serde(default = "default_prior_variance")]
    pub prior_variance: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub covariance_mode: CovarianceMode,
    #[serde(default = "default_sigma_threshold")]
    pub sigma_threshold: f64,
    #[serde(default = "default_t_max")]
    pub t_max: u64,
    #[serde(default)]
    pub message_policy: MessagePolicy,
    #[serde(default)]
    pub freeze: Option<FreezeParams>,
    pub seed: u64,
}

impl Scenario {
    pub fn num_clients(&self) -> usize {
        self.task.num_clients()
    }

    pub fn client_ids(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.task.client_ids()
    }

    pub fn is_compromised(&self, id: ClientId) -> bool {
        self.attacks.contains_key(&id)
    }

    pub fn benign(&self) -> Vec<ClientId> {
        self.client_ids().filter(|c| !self.is_compromised(*c)).collect()
    }

    pub fn compromised(&self) -> Vec<ClientId> {
        self.attacks.keys().copied().collect()
    }

    pub fn clock(&self) -> Result<JointClock> {
        let n = self.num_clients();
        JointClock::new(
            self.cycle_lengths.clone().unwrap_or_else(|| vec![1; n]),
            self.phases.clone().unwrap_or_else(|| vec![0; n]),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.topology.validate()?;
        let n = self.num_clients();
        let k = self.task.dim();
        if self.topology.nodes != n {
            return Err(SabreError::config(format!(
                "topology.nodes = {} but task has {n} clients",
                self.topology.nodes
            )));
        }
        for (id, spec) in &self.attacks {
            if id.0 == 0 || id.0 as usize > n {
                return Err(SabreError::config(format!("attacks: client {id} is not in 1..={n}")));
            }
            spec.validate(k)
                .map_err(|e| SabreError::config(format!("attacks.{id}: {e}")))?;
        }
        for (what, v) in [("cycle_lengths", &self.cycle_lengths), ("phases", &self.phases)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(SabreError::config(format!("{what} has {} entries, expected {n}", v.len())));
                }
            }
        }
        self.clock()?;
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(SabreError::config("prior_variance must be positive"));
        }
        if self.batch_size == 0 {
            return Err(SabreError::config("batch_size must be >= 1"));
        }
        if !(self.sigma_threshold >= 0.0) {
            return Err(SabreError::config("sigma_threshold must be >= 0"));
        }
        if self.t_max == 0 {
            return Err(SabreError::config("t_max must be >= 1"));
        }
        if self.task.clients.iter().any(|c| c.noise_variance <= 0.0) {
            return Err(SabreError::config("every client's noise_variance must be positive"));
        }
        let p = &self.params;
        crate::aggregation::ConfidenceParams {
            kappa: p.kappa,
            coordinates: p.confidence_coordinates.clone(),
        }
        .validate(k)
        .map_err(|e| SabreError::config(format!("params: {e}")))?;
        if let Some(tau) = p.clip_tau {
            if !(tau > 0.0) {
                return Err(SabreError::config("params.clip_tau must be positive"));
            }
        }
        if !(p.zeno_rho >= 0.0) {
            return Err(SabreError::config("params.zeno_rho must be >= 0"));
        }
        if self.algorithm == Algorithm::Zeno && p.zeno_validation == 0 {
            return Err(SabreError::config("params.zeno_validation must be >= 1"));
        }
        if let Some(f) = &self.freeze {
            if f.patience == 0 || f.validation_size == 0 {
                return Err(SabreError::config("freeze.patience and freeze.validation_size must be >= 1"));
            }
        }
        Ok(())
    }

    /// Benign/compromised pairs that communicate at some point in
    /// `[0, horizon)` yet share no observed coordinate, for label-flip attackers.
    pub fn joint_learning_violations(&self, horizon: u64) -> Vec<(ClientId, ClientId)> {
        let label_flippers: BTreeSet<ClientId> = self
            .attacks
            .iter()
            .filter(|(_, s)| matches!(s, AttackSpec::LabelFlip { .. }))
            .map(|(&id, _)| id)
            .collect();
        if label_flippers.is_empty() {
            return Vec::new();
        }
        let mut seen = BTreeSet::new();
        let mut epochs = BTreeSet::new();
        for t in 0..horizon.max(1) {
            if !epochs.insert(self.topology.epoch(t)) {
                continue;
            }
            let a = self.topology.adjacency(t);
            for b in self.benign() {
                for &c in &label_flippers {
                    let linked = a.get(b.index(), c.index()) || a.get(c.index(), b.index());
                    if linked && !self.task.supports_intersect(b, c) {
                        seen.insert((b, c));
                    }
                }
            }
        }
        seen.into_iter().collect()
    }
}
