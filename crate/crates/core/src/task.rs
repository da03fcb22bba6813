//! The linear data model and the per-client non-IID feature samplers.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ClientId, Result, SabreError};

/// One labelled observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub y: f64,
}

/// Distribution of every active feature coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureDistribution {
    /// Each coordinate in the client's support drawn uniformly on `[low, high)`.
    Uniform { low: f64, high: f64 },
}

impl Default for FeatureDistribution {
    fn default() -> Self {
        FeatureDistribution::Uniform { low: 0.1, high: 1.1 }
    }
}

impl FeatureDistribution {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            FeatureDistribution::Uniform { low, high } => rng.random_range(low..high),
        }
    }

    /// Second moment of a single coordinate.
    pub fn second_moment(&self) -> f64 {
        match *self {
            FeatureDistribution::Uniform { low, high } => {
                (high.powi(3) - low.powi(3)) / (3.0 * (high - low))
            }
        }
    }
}

/// What a single client observes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientData {
    /// Zero-based coordinates on which this client's features may be nonzero.
    pub support: Vec<usize>,
    /// Label noise variance.
    pub noise_variance: f64,
}

/// Decentralised linear regression: `y = <theta*, x> + noise` with per-client
/// feature supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearTask {
    pub theta_star: Vec<f64>,
    /// Client `i` (1-based) is `clients[i - 1]`.
    pub clients: Vec<ClientData>,
    #[serde(default)]
    pub features: FeatureDistribution,
}

impl LinearTask {
    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_ids(&self) -> impl Iterator<Item = ClientId> + '_ {
        (0..self.clients.len()).map(ClientId::from_index)
    }

    pub fn client(&self, id: ClientId) -> Result<&ClientData> {
        if id.0 == 0 {
            return Err(SabreError::UnknownClient(id));
        }
        self.clients.get(id.index()).ok_or(SabreError::UnknownClient(id))
    }

    pub fn theta_star_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_star)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        if k == 0 {
            return Err(SabreError::config("task.theta_star must be nonempty"));
        }
        if self.clients.is_empty() {
            return Err(SabreError::config("task.clients must be nonempty"));
        }
        let FeatureDistribution::Uniform { low, high } = self.features;
        if !(low >= 0.0 && high > low) {
            return Err(SabreError::config(format!(
                "task.features: need 0 <= low < high, got [{low}, {high})"
            )));
        }
        for (i, c) in self.clients.iter().enumerate() {
            let id = ClientId::from_index(i);
            if c.support.is_empty() {
                return Err(SabreError::config(format!("task.clients[{id}].support is empty")));
            }
            if let Some(&bad) = c.support.iter().find(|&&s| s >= k) {
                return Err(SabreError::config(format!(
                    "task.clients[{id}].support contains coordinate {bad} outside 0..{k}"
                )));
            }
            let unique: BTreeSet<_> = c.support.iter().collect();
            if unique.len() != c.support.len() {
                return Err(SabreError::config(format!(
                    "task.clients[{id}].support has duplicates"
                )));
            }
            if !(c.noise_variance >= 0.0 && c.noise_variance.is_finite()) {
                return Err(SabreError::config(format!(
                    "task.clients[{id}].noise_variance must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Draws one feature vector for `client`, supported on its coordinates.
    pub fn sample_features<R: Rng + ?Sized>(&self, client: ClientId, rng: &mut R) -> Result<DVector<f64>> {
        let data = self.client(client)?;
        let mut x = DVector::zeros(self.dim());
        for &k in &data.support {
            x[k] = self.features.draw(rng);
        }
        Ok(x)
    }

    /// Noiseless label `<theta*, x>`.
    pub fn clean_label(&self, x: &DVector<f64>) -> f64 {
        self.theta_star.iter().zip(x.iter()).map(|(t, v)| t * v).sum()
    }

    /// Draws a batch of labelled samples for `client`.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        client: ClientId,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Sample>> {
        if batch_size == 0 {
            return Err(SabreError::config("batch_size must be >= 1"));
        }
        let noise_sd = self.client(client)?.noise_variance.sqrt();
        let noise = if noise_sd > 0.0 {
            Some(Normal::new(0.0, noise_sd).map_err(|e| SabreError::config(e.to_string()))?)
        } else {
            None
        };
        (0..batch_size)
            .map(|_| {
                let x = self.sample_features(client, rng)?;
                let eta = noise.map_or(0.0, |n| n.sample(rng));
                let y = self.clean_label(&x) + eta;
                Ok(Sample { x, y })
            })
            .collect()
    }

    /// Noiseless test samples with every coordinate active.
    pub fn test_set<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let x = DVector::from_fn(self.dim(), |_, _| self.features.draw(rng));
                let y = self.clean_label(&x);
                Sample { x, y }
            })
            .collect()
    }

    /// Whether the union of the given clients' supports covers every coordinate.
    pub fn is_sufficient(&self, clients: impl IntoIterator<Item = ClientId>) -> bool {
        let mut covered = vec![false; self.dim()];
        for id in clients {
            if let Ok(c) = self.client(id) {
                for &k in &c.support {
                    covered[k] = true;
                }
            }
        }
        covered.into_iter().all(|c| c)
    }

    /// Whether two clients observe at least one common coordinate.
    pub fn supports_intersect(&self, a: ClientId, b: ClientId) -> bool {
        match (self.client(a), self.client(b)) {
            (Ok(ca), Ok(cb)) => ca.support.iter().any(|k| cb.support.contains(k)),
            _ => false,
        }
    }
}
