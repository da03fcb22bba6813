//! Exact Bayesian updates for the linear-Gaussian model.

use nalgebra::DVector;

use crate::belief::{symmetrize, GaussianBelief, InformationBelief};
use crate::error::{Result, SabreError};

/// A single observation `y = <theta, x> + noise` with known noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationUpdate {
    pub feature: DVector<f64>,
    pub label: f64,
    pub noise_variance: f64,
}

impl ObservationUpdate {
    pub fn new(feature: DVector<f64>, label: f64, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(SabreError::config(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(Self {
            feature,
            label,
            noise_variance,
        })
    }
}

fn check_dim(expected: usize, obs: &ObservationUpdate) -> Result<()> {
    if obs.feature.len() != expected {
        return Err(SabreError::Dimension {
            expected,
            found: obs.feature.len(),
        });
    }
    Ok(())
}

/// Rank-one Kalman step in moment form.
pub fn kalman_update(belief: &GaussianBelief, obs: &ObservationUpdate) -> Result<GaussianBelief> {
    let mut out = belief.clone();
    kalman_update_in_place(&mut out, obs)?;
    Ok(out)
}

/// Same as [`kalman_update`], overwriting `belief`.
pub fn kalman_update_in_place(belief: &mut GaussianBelief, obs: &ObservationUpdate) -> Result<()> {
    check_dim(belief.dim(), obs)?;
    let x = &obs.feature;
    if x.iter().all(|&v| v == 0.0) {
        return Ok(());
    }
    let sx = belief.covariance() * x;
    let denom = x.dot(&sx) + obs.noise_variance;
    let residual = obs.label - x.dot(belief.mean());
    let gain = &sx / denom;
    belief.mean_mut().axpy(residual, &gain, 1.0);
    let cov = belief.covariance_mut();
    cov.ger(-1.0, &gain, &sx, 1.0);
    symmetrize(cov);
    Ok(())
}

/// Rank-one update in information form: `Z += x xᵀ / σ²`, `h += x y / σ²`.
pub fn information_update(belief: &InformationBelief, obs: &ObservationUpdate) -> Result<InformationBelief> {
    check_dim(belief.dim(), obs)?;
    let mut out = belief.clone();
    let inv = 1.0 / obs.noise_variance;
    let (z, h) = out.parts_mut();
    z.ger(inv, &obs.feature, &obs.feature, 1.0);
    h.axpy(obs.label * inv, &obs.feature, 1.0);
    Ok(out)
}

/// True once the error history has gone `patience` entries without a new minimum.
pub fn should_freeze_local(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for &e in history {
        if e < best {
            best = e;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                return true;
            }
        }
    }
    false
}

/// Latching wrapper around [`should_freeze_local`].
#[derive(Debug, Clone)]
pub struct FreezeMonitor {
    patience: usize,
    best: f64,
    stale: usize,
    frozen: bool,
}

impl FreezeMonitor {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
            frozen: false,
        }
    }

    /// Feeds one validation error; returns whether the local model is frozen.
    pub fn observe(&mut self, error: f64) -> bool {
        if self.frozen {
            return true;
        }
        if error < self.best {
            self.best = error;
            self.stale = 0;
        } else {
            self.stale += 1;
            self.frozen = self.stale >= self.patience;
        }
        self.frozen
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}
