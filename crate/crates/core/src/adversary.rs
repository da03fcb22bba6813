//! Data- and model-poisoning behaviors of compromised clients.

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::belief::GaussianBelief;
use crate::error::{Result, SabreError};
use crate::task::Sample;

fn default_bit() -> u32 {
    62
}

fn default_bit_fraction() -> f64 {
    0.1
}

fn default_z() -> f64 {
    1.5
}

/// One poisoning behavior and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackSpec {
    /// Every label shifted by `bias`.
    #[serde(rename = "label-flip-bias", alias = "label-flip")]
    LabelFlip { bias: f64 },
    /// A fraction of samples get `trigger` added to the features and `target` as label.
    Trojan { trigger: Vec<f64>, target: f64, fraction: f64 },
    /// Flip one bit of the IEEE-754 representation of a fraction of transmitted coordinates.
    BitFlip {
        #[serde(default = "default_bit")]
        bit: u32,
        #[serde(default = "default_bit_fraction")]
        fraction: f64,
    },
    /// Multiply `ceil(fraction * K)` random transmitted coordinates by `multiplier`.
    GeneralRandom {
        fraction: f64,
        multiplier: f64,
        #[serde(default)]
        tamper_covariance: bool,
    },
    /// Transmit `benign mean - z * benign std` on every coordinate.
    #[serde(rename = "a-little-is-enough", alias = "alie")]
    Alie {
        #[serde(default = "default_z")]
        z: f64,
    },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::LabelFlip { .. } => "label-flip-bias",
            AttackSpec::Trojan { .. } => "trojan",
            AttackSpec::BitFlip { .. } => "bit-flip",
            AttackSpec::GeneralRandom { .. } => "general-random",
            AttackSpec::Alie { .. } => "a-little-is-enough",
        }
    }

    pub fn is_data_poisoning(&self) -> bool {
        matches!(self, AttackSpec::LabelFlip { .. } | AttackSpec::Trojan { .. })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let frac = |f: f64, what: &str| {
            if f > 0.0 && f <= 1.0 {
                Ok(())
            } else {
                Err(SabreError::config(format!("{what} must be in (0, 1], got {f}")))
            }
        };
        match self {
            AttackSpec::LabelFlip { bias } => {
                if !bias.is_finite() {
                    return Err(SabreError::config("label-flip bias must be finite"));
                }
            }
            AttackSpec::Trojan { trigger, target, fraction } => {
                frac(*fraction, "trojan fraction")?;
                if trigger.len() != dim {
                    return Err(SabreError::Dimension {
                        expected: dim,
                        found: trigger.len(),
                    });
                }
                if trigger.iter().any(|v| !v.is_finite()) || !target.is_finite() {
                    return Err(SabreError::config("trojan trigger and target must be finite"));
                }
            }
            AttackSpec::BitFlip { bit, fraction } => {
                frac(*fraction, "bit-flip fraction")?;
                if *bit > 63 {
                    return Err(SabreError::config(format!("bit index {bit} outside 0..=63")));
                }
            }
            AttackSpec::GeneralRandom { fraction, multiplier, .. } => {
                frac(*fraction, "general-random fraction")?;
                if !(*multiplier > 1.0) {
                    return Err(SabreError::config(format!(
                        "general-random multiplier must exceed 1, got {multiplier}"
                    )));
                }
            }
            AttackSpec::Alie { z } => {
                if !(z.is_finite() && *z >= 0.0) {
                    return Err(SabreError::config(format!("ALIE z must be finite and >= 0, got {z}")));
                }
            }
        }
        Ok(())
    }
}

/// Number of samples a trojan attacker triggers in a batch of `n`: the integer
/// part of `fraction * n`, plus one more with probability equal to the
/// fractional part.
fn trojan_count<R: Rng + ?Sized>(fraction: f64, n: usize, rng: &mut R) -> usize {
    let exact = fraction * n as f64;
    let base = exact.floor();
    let extra = exact - base;
    let bump = extra > 1e-9 && rng.random::<f64>() < extra;
    (base as usize + bump as usize).min(n)
}

/// Applies a data-poisoning attack to a batch.
/// Trigger entries outside `support` are dropped so poisoned inputs stay in
/// the client's own feature space.
pub fn poison_data<R: Rng + ?Sized>(
    batch: &mut [Sample],
    spec: &AttackSpec,
    support: &[usize],
    rng: &mut R,
) -> Result<()> {
    match spec {
        AttackSpec::LabelFlip { bias } => {
            for s in batch.iter_mut() {
                s.y += bias;
            }
        }
        AttackSpec::Trojan { trigger, target, fraction } => {
            let n = batch.len();
            let count = trojan_count(*fraction, n, rng);
            for i in index::sample(rng, n, count) {
                let s = &mut batch[i];
                if s.x.len() != trigger.len() {
                    return Err(SabreError::Dimension {
                        expected: s.x.len(),
                        found: trigger.len(),
                    });
                }
                for &k in support {
                    s.x[k] = (s.x[k] + trigger[k]).max(0.0);
                }
                s.y = *target;
            }
        }
        other => {
            return Err(SabreError::config(format!(
                "{} is not a data-poisoning attack",
                other.name()
            )))
        }
    }
    Ok(())
}

/// Result of tampering with an outgoing message.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedMessage {
    pub belief: GaussianBelief,
    /// ALIE had no benign messages to imitate and sent the belief unchanged.
    pub degraded: bool,
}

/// Flips bit `bit` of `v`.
pub fn flip_bit(v: f64, bit: u32) -> f64 {
    f64::from_bits(v.to_bits() ^ (1u64 << bit))
}

/// Number of coordinates tampered when a fraction of `dim` is selected.
pub fn tampered_count(fraction: f64, dim: usize) -> usize {
    ((fraction * dim as f64 - 1e-9).ceil() as usize).clamp(1, dim)
}

/// Uniformly random coordinate subset of size `tampered_count(fraction, dim)`.
pub fn tampered_indices<R: Rng + ?Sized>(fraction: f64, dim: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = index::sample(rng, dim, tampered_count(fraction, dim)).into_vec();
    idx.sort_unstable();
    idx
}

/// Coordinate-wise mean and sample standard deviation of benign means.
pub fn benign_statistics(context: &[&DVector<f64>]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = context.len();
    let first = context.first()?;
    let dim = first.len();
    let mut mean = DVector::zeros(dim);
    for m in context {
        mean += *m;
    }
    mean /= n as f64;
    let mut var = DVector::zeros(dim);
    if n > 1 {
        for m in context {
            let d = *m - &mean;
            var += d.component_mul(&d);
        }
        var /= (n - 1) as f64;
    }
    Some((mean, var.map(f64::sqrt)))
}

/// Applies a model-poisoning attack to an outgoing belief. The attacker's own
/// state is not touched.
pub fn poison_model<R: Rng + ?Sized>(
    outgoing: &GaussianBelief,
    context: &[&DVector<f64>],
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<PoisonedMessage> {
    let mut belief = outgoing.clone();
    let dim = belief.dim();
    match spec {
        AttackSpec::BitFlip { bit, fraction } => {
            let idx = tampered_indices(*fraction, dim, rng);
            let mean = belief.mean_mut();
            for k in idx {
                mean[k] = flip_bit(mean[k], *bit);
            }
        }
        AttackSpec::GeneralRandom {
            fraction,
            multiplier,
            tamper_covariance,
        } => {
            let idx = tampered_indices(*fraction, dim, rng);
            let mean = belief.mean_mut();
            for &k in &idx {
                mean[k] *= multiplier;
            }
            if *tamper_covariance {
                // scale rows and columns by sqrt(M) so the matrix stays PSD
                let s = multiplier.sqrt();
                let cov = belief.covariance_mut();
                for &k in &idx {
                    cov.row_mut(k).scale_mut(s);
                    cov.column_mut(k).scale_mut(s);
                }
            }
        }
        AttackSpec::Alie { z } => match benign_statistics(context) {
            Some((mean, std)) => {
                if mean.len() != dim {
                    return Err(SabreError::Dimension {
                        expected: dim,
                        found: mean.len(),
                    });
                }
                *belief.mean_mut() = mean - std * *z;
            }
            None => {
                return Ok(PoisonedMessage {
                    belief,
                    degraded: true,
                })
            }
        },
        other => {
            return Err(SabreError::config(format!(
                "{} is not a model-poisoning attack",
                other.name()
            )))
        }
    }
    Ok(PoisonedMessage {
        belief,
        degraded: false,
    })
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Probability that a random tampered set of `C*K` coordinates meets a
/// client's `L*K` learned coordinates.
pub fn detection_probability(k: u64, l: f64, c: f64) -> Result<f64> {
    if k == 0 {
        return Err(SabreError::config("model size must be >= 1"));
    }
    for (name, f) in [("L", l), ("C", c)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(SabreError::config(format!("{name} must be in (0, 1], got {f}")));
        }
    }
    let learned = ((l * k as f64).round() as u64).clamp(1, k);
    let tampered = ((c * k as f64).round() as u64).clamp(1, k);
    let free = k - learned;
    if free < tampered {
        return Ok(1.0);
    }
    let miss = (ln_choose(free, tampered) - ln_choose(k, tampered)).exp();
    Ok((1.0 - miss).clamp(0.0, 1.0))
}
