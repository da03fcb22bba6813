//! Metrics computed from run records.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adversary::AttackSpec;
use crate::aggregation::validation_loss;
use crate::error::{ClientId, Result, SabreError};
use crate::record::{RecordRow, RunRecord};
use crate::task::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Ordinary least squares of `ln y` against `ln t`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 2 {
        return Err(SabreError::Analysis("need at least two points to fit".into()));
    }
    if points.iter().any(|&(t, y)| !(t > 0.0 && y > 0.0)) {
        return Err(SabreError::Analysis("power-law fit needs positive values".into()));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(SabreError::Analysis("all t values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        points: points.len(),
    })
}

/// Fits the decay of social variance on `coordinate` over cycles `[t_lo, t_hi]`.
pub fn mse_rate_fit(record: &RunRecord, client: ClientId, coordinate: usize, t_lo: u64, t_hi: u64) -> Result<RateFit> {
    if coordinate >= record.dim {
        return Err(SabreError::Analysis(format!("coordinate {coordinate} outside 0..{}", record.dim)));
    }
    let points: Vec<(f64, f64)> = record
        .rows_for(client)
        .filter(|r| r.cycle >= t_lo && r.cycle <= t_hi)
        .map(|r| (r.cycle as f64, r.social_var[coordinate]))
        .collect();
    if points.len() < 10 {
        return Err(SabreError::Analysis(format!(
            "client {client} has {} rows in cycles [{t_lo}, {t_hi}], need at least 10",
            points.len()
        )));
    }
    fit_power_law(&points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasParams {
    pub eps_clean: f64,
    pub eps_c: f64,
    pub final_window: usize,
    /// Coordinates on which "biased" requires `c > eps_c` (`None` = all).
    #[serde(default)]
    pub coordinates: Option<Vec<usize>>,
}

impl Default for BiasParams {
    fn default() -> Self {
        Self {
            eps_clean: 0.05,
            eps_c: 0.02,
            final_window: 50,
            coordinates: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasVerdict {
    Clean,
    Biased,
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate {
    pub client: ClientId,
    /// Final-window mean of the social estimate.
    pub estimate: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub linf_error: f64,
    pub verdict: BiasVerdict,
}

/// Estimates `c` in `theta_bar -> theta* + c b` per client from the mean of
/// its last `final_window` rows.
pub fn bias_vector_estimate(
    record: &RunRecord,
    theta_star: &[f64],
    b: f64,
    params: &BiasParams,
) -> Result<Vec<BiasEstimate>> {
    if b == 0.0 || !b.is_finite() {
        return Err(SabreError::Analysis("bias b must be finite and nonzero".into()));
    }
    if params.final_window == 0 {
        return Err(SabreError::Analysis("final_window must be >= 1".into()));
    }
    let coords: Vec<usize> = params
        .coordinates
        .clone()
        .unwrap_or_else(|| (0..theta_star.len()).collect());
    let mut out = Vec::new();
    for client in record.clients() {
        let rows: Vec<&RecordRow> = record.rows_for(client).collect();
        if rows.len() < params.final_window {
            return Err(SabreError::Analysis(format!(
                "client {client} has {} rows, need {}",
                rows.len(),
                params.final_window
            )));
        }
        let window = &rows[rows.len() - params.final_window..];
        let estimate: Vec<f64> = (0..theta_star.len())
            .map(|k| window.iter().map(|r| r.social_mean[k]).sum::<f64>() / window.len() as f64)
            .collect();
        let c_hat: Vec<f64> = estimate.iter().zip(theta_star).map(|(e, t)| (e - t) / b).collect();
        let linf_error = estimate
            .iter()
            .zip(theta_star)
            .map(|(e, t)| (e - t).abs())
            .fold(0.0, |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v) });
        let verdict = if linf_error < params.eps_clean {
            BiasVerdict::Clean
        } else if coords.iter().all(|&k| c_hat[k] > params.eps_c) {
            BiasVerdict::Biased
        } else {
            BiasVerdict::Neither
        };
        out.push(BiasEstimate {
            client,
            estimate,
            c_hat,
            linf_error,
            verdict,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionEvent {
    pub observer: ClientId,
    pub observed: ClientId,
    /// Local cycle and joint tick from which `observed` was never trusted again.
    pub permanent_from_cycle: Option<u64>,
    pub permanent_from_tick: Option<u64>,
    /// Rows in which `observed` was available but not trusted.
    pub excluded_rows: usize,
}

/// Confidence-set transitions for every (observer, observed) pair that ever
/// appeared as neighbors.
pub fn exclusion_events(record: &RunRecord) -> Vec<ExclusionEvent> {
    #[derive(Default)]
    struct Track {
        out: usize,
        // first exclusion since the latest admission
        streak_start: Option<(u64, u64)>,
    }
    let mut rows: Vec<&RecordRow> = record.rows.iter().collect();
    rows.sort_by_key(|r| (r.tick, r.client, r.cycle));
    let mut tracks: BTreeMap<(ClientId, ClientId), Track> = BTreeMap::new();
    for r in rows {
        for &j in &r.neighbors {
            if j == r.client {
                continue;
            }
            let t = tracks.entry((r.client, j)).or_default();
            if r.confidence_set.contains(&j) {
                t.streak_start = None;
            } else {
                t.out += 1;
                t.streak_start.get_or_insert((r.cycle, r.tick));
            }
        }
    }
    tracks
        .into_iter()
        .map(|((observer, observed), t)| ExclusionEvent {
            observer,
            observed,
            permanent_from_cycle: t.streak_start.map(|s| s.0),
            permanent_from_tick: t.streak_start.map(|s| s.1),
            excluded_rows: t.out,
        })
        .collect()
}

/// Applies the trigger to a clean input, keeping features nonnegative.
pub fn triggered(x: &DVector<f64>, trigger: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len(), x.iter().zip(trigger).map(|(v, t)| (v + t).max(0.0)))
}

/// Mean over benign clients of the clean-test MSE of their final social means.
pub fn clean_test_mse(record: &RunRecord, test: &[Sample]) -> Result<f64> {
    let finals = benign_finals(record)?;
    Ok(finals.iter().map(|m| validation_loss(m, test)).sum::<f64>() / finals.len() as f64)
}

fn benign_finals(record: &RunRecord) -> Result<Vec<DVector<f64>>> {
    let benign = record.benign_clients();
    if benign.is_empty() {
        return Err(SabreError::Analysis("record has no benign clients".into()));
    }
    Ok(benign
        .iter()
        .filter_map(|&c| record.last_row(c))
        .map(|r| DVector::from_column_slice(&r.social_mean))
        .collect())
}

/// Trojan: fraction of triggered test inputs predicted within 0.1 of the
/// target, averaged over benign clients. Other attacks (or none): benign
/// clean-test MSE.
pub fn attack_success(record: &RunRecord, spec: Option<&AttackSpec>, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(SabreError::Analysis("test set is empty".into()));
    }
    match spec {
        Some(AttackSpec::Trojan { trigger, target, .. }) => {
            let finals = benign_finals(record)?;
            let inputs: Vec<DVector<f64>> = test.iter().map(|s| triggered(&s.x, trigger)).collect();
            let per_client = finals.iter().map(|m| {
                inputs.iter().filter(|x| (x.dot(m) - target).abs() < 0.1).count() as f64 / inputs.len() as f64
            });
            Ok(per_client.sum::<f64>() / finals.len() as f64)
        }
        _ => clean_test_mse(record, test),
    }
}
