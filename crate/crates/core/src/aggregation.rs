//! Bounded-confidence trust, precision-weighted fusion, the local overwrite
//! safeguard, and baseline aggregation rules.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{symmetrize, GaussianBelief, InformationBelief};
use crate::error::{ClientId, Result, SabreError};
use crate::task::Sample;

/// Parameters of the per-coordinate confidence test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceParams {
    pub kappa: f64,
    /// Coordinates compared; `None` means all of them.
    #[serde(default)]
    pub coordinates: Option<Vec<usize>>,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            coordinates: None,
        }
    }
}

impl ConfidenceParams {
    pub fn with_kappa(kappa: f64) -> Self {
        Self {
            kappa,
            ..Self::default()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(SabreError::config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if let Some(cs) = &self.coordinates {
            if let Some(&bad) = cs.iter().find(|&&k| k >= dim) {
                return Err(SabreError::config(format!("confidence coordinate {bad} outside 0..{dim}")));
            }
        }
        Ok(())
    }

    fn coords(&self, dim: usize) -> Vec<usize> {
        match &self.coordinates {
            Some(cs) => cs.clone(),
            None => (0..dim).collect(),
        }
    }
}

/// Per-coordinate bounds `kappa * sqrt(local variance)` around the local mean.
#[derive(Debug, Clone)]
pub(crate) struct Bounds {
    center: DVector<f64>,
    radius: Vec<(usize, f64)>,
}

impl Bounds {
    pub(crate) fn new(local: &GaussianBelief, params: &ConfidenceParams) -> Self {
        let cov = local.covariance();
        let radius = params
            .coords(local.dim())
            .into_iter()
            .map(|k| (k, params.kappa * cov[(k, k)].sqrt()))
            .collect();
        Self {
            center: local.mean().clone(),
            radius,
        }
    }

    /// NaN and infinite coordinates never pass.
    pub(crate) fn admits(&self, mean: &DVector<f64>) -> bool {
        self.radius
            .iter()
            .all(|&(k, r)| (self.center[k] - mean[k]).abs() <= r)
    }

    pub(crate) fn violations(&self, mean: &DVector<f64>) -> Vec<usize> {
        self.radius
            .iter()
            .filter(|&&(k, r)| !((self.center[k] - mean[k]).abs() <= r))
            .map(|&(k, _)| k)
            .collect()
    }
}

fn check_same_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(SabreError::Dimension { expected, found });
    }
    Ok(())
}

/// Neighbors whose social mean lies within the local belief's bounds on every
/// compared coordinate.
pub fn confidence_set(
    local: &GaussianBelief,
    received: &BTreeMap<ClientId, GaussianBelief>,
    params: &ConfidenceParams,
) -> Result<BTreeSet<ClientId>> {
    params.validate(local.dim())?;
    for b in received.values() {
        check_same_dim(local.dim(), b.dim())?;
    }
    let bounds = Bounds::new(local, params);
    Ok(received
        .iter()
        .filter(|(_, b)| bounds.admits(b.mean()))
        .map(|(&id, _)| id)
        .collect())
}

/// Trust placed on each neighbor for one aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustWeights {
    weights: BTreeMap<ClientId, f64>,
}

impl TrustWeights {
    /// Equal weight `1/|I|` on every member of `accepted`.
    pub fn uniform(accepted: impl IntoIterator<Item = ClientId>) -> Self {
        let ids: BTreeSet<ClientId> = accepted.into_iter().collect();
        let w = 1.0 / ids.len() as f64;
        Self {
            weights: ids.into_iter().map(|id| (id, w)).collect(),
        }
    }

    /// Arbitrary nonnegative weights, normalized to sum to one. Zero weights are dropped.
    pub fn normalized(raw: BTreeMap<ClientId, f64>) -> Result<Self> {
        if raw.values().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(SabreError::config("trust weights must be finite and nonnegative"));
        }
        let total: f64 = raw.values().sum();
        if total == 0.0 {
            return Ok(Self {
                weights: BTreeMap::new(),
            });
        }
        Ok(Self {
            weights: raw
                .into_iter()
                .filter(|&(_, w)| w > 0.0)
                .map(|(id, w)| (id, w / total))
                .collect(),
        })
    }

    pub fn weight(&self, id: ClientId) -> f64 {
        self.weights.get(&id).copied().unwrap_or(0.0)
    }

    pub fn accepted(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.weights.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClientId, f64)> + '_ {
        self.weights.iter().map(|(&id, &w)| (id, w))
    }
}

/// A belief together with its precomputed information form.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate<'a> {
    pub belief: &'a GaussianBelief,
    pub info: &'a InformationBelief,
}

fn bitwise_equal(a: &GaussianBelief, b: &GaussianBelief) -> bool {
    let eq = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    eq(a.mean().as_slice(), b.mean().as_slice()) && eq(a.covariance().as_slice(), b.covariance().as_slice())
}

/// Weighted sum of precisions and of precision-weighted means.
pub fn fuse_information(parts: &[(&InformationBelief, f64)]) -> Result<InformationBelief> {
    let dim = parts
        .first()
        .map(|(i, _)| i.dim())
        .ok_or_else(|| SabreError::config("nothing to fuse"))?;
    let mut z = DMatrix::zeros(dim, dim);
    let mut h = DVector::zeros(dim);
    for (info, w) in parts {
        check_same_dim(dim, info.dim())?;
        z.zip_apply(info.precision(), |acc, v| *acc += w * v);
        h.axpy(*w, info.shift(), 1.0);
    }
    symmetrize(&mut z);
    InformationBelief::new(z, h)
}

/// Fuses weighted candidates. Returns the belief and whether the eigenvalue
/// floor had to be applied. A single candidate, or candidates that are all
/// bitwise identical, are returned unchanged.
pub(crate) fn fuse_candidates(cands: &[(Candidate<'_>, f64)]) -> (GaussianBelief, bool) {
    let first = cands[0].0.belief;
    if cands.iter().all(|(c, _)| bitwise_equal(c.belief, first)) {
        return (first.clone(), false);
    }
    let parts: Vec<(&InformationBelief, f64)> = cands.iter().map(|(c, w)| (c.info, *w)).collect();
    let fused = fuse_information(&parts).expect("candidates share a dimension");
    fused.to_moment_form_floored()
}

/// Precision-weighted fusion of the trusted beliefs. With an empty trust set
/// the client's own social belief is returned.
pub fn sabre_aggregate(
    own_social: &GaussianBelief,
    received: &BTreeMap<ClientId, GaussianBelief>,
    trust: &TrustWeights,
) -> Result<GaussianBelief> {
    Ok(sabre_aggregate_flagged(own_social, received, trust)?.0)
}

/// [`sabre_aggregate`] also reporting whether an eigenvalue floor fired.
pub fn sabre_aggregate_flagged(
    own_social: &GaussianBelief,
    received: &BTreeMap<ClientId, GaussianBelief>,
    trust: &TrustWeights,
) -> Result<(GaussianBelief, bool)> {
    if trust.is_empty() {
        return Ok((own_social.clone(), false));
    }
    let mut floored = false;
    let mut infos = Vec::with_capacity(trust.len());
    for (id, w) in trust.iter() {
        let b = received.get(&id).ok_or(SabreError::UnknownClient(id))?;
        check_same_dim(own_social.dim(), b.dim())?;
        let (info, f) = b.to_information_form_floored();
        floored |= f;
        infos.push((b, info, w));
    }
    let cands: Vec<(Candidate<'_>, f64)> = infos
        .iter()
        .map(|(b, info, w)| (Candidate { belief: b, info }, *w))
        .collect();
    let (out, f) = fuse_candidates(&cands);
    Ok((out, floored || f))
}

/// Replaces each social-mean coordinate that violates the local bound with the
/// local mean. Returns the corrected belief and the overwritten coordinates.
pub fn overwrite_rule(
    local: &GaussianBelief,
    social: &GaussianBelief,
    params: &ConfidenceParams,
) -> (GaussianBelief, Vec<usize>) {
    let mut out = social.clone();
    let fired = overwrite_in_place(&Bounds::new(local, params), local, &mut out);
    (out, fired)
}

pub(crate) fn overwrite_in_place(bounds: &Bounds, local: &GaussianBelief, social: &mut GaussianBelief) -> Vec<usize> {
    let fired = bounds.violations(social.mean());
    let mean = social.mean_mut();
    for &k in &fired {
        mean[k] = local.mean()[k];
    }
    fired
}

/// Coordinate-wise mean after discarding the `trim` largest and smallest values.
pub fn trimmed_mean(values: &[&DVector<f64>], trim: usize) -> Result<DVector<f64>> {
    let n = values.len();
    if n == 0 {
        return Err(SabreError::config("trimmed mean of no updates"));
    }
    if 2 * trim >= n {
        return Err(SabreError::config(format!(
            "trim count {trim} must be less than half of {n} updates"
        )));
    }
    let dim = values[0].len();
    let mut col = Vec::with_capacity(n);
    let mut out = DVector::zeros(dim);
    for k in 0..dim {
        col.clear();
        col.extend(values.iter().map(|v| v[k]));
        col.sort_by(f64::total_cmp);
        let kept = &col[trim..n - trim];
        out[k] = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    Ok(out)
}

/// Centered clipping: each update's offset from `center` is scaled down to
/// norm at most `tau`, then the clipped points are averaged. `tau = None`
/// uses the median offset norm.
pub fn clipped_mean(center: &DVector<f64>, values: &[&DVector<f64>], tau: Option<f64>) -> DVector<f64> {
    if values.is_empty() {
        return center.clone();
    }
    let diffs: Vec<DVector<f64>> = values.iter().map(|v| *v - center).collect();
    let norms: Vec<f64> = diffs.iter().map(|d| d.norm()).collect();
    let tau = tau.unwrap_or_else(|| median(&norms));
    let mut acc = DVector::zeros(center.len());
    for (d, &n) in diffs.iter().zip(&norms) {
        // a non-finite offset has no usable direction, so it contributes nothing
        if n.is_finite() {
            let scale = if n > tau { tau / n } else { 1.0 };
            acc.axpy(scale, d, 1.0);
        }
    }
    center + acc / values.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean squared error of a parameter on labelled samples.
pub fn validation_loss(theta: &DVector<f64>, samples: &[Sample]) -> f64 {
    let n = samples.len() as f64;
    samples
        .iter()
        .map(|s| {
            let r = s.y - s.x.dot(theta);
            r * r
        })
        .sum::<f64>()
        / n
}

/// Zeno-style scoring. Returns the mean of the kept candidates and the indices
/// kept, after dropping the `drop` lowest scores. Non-finite scores rank last.
pub fn zeno_select(
    own: &DVector<f64>,
    candidates: &[&DVector<f64>],
    validation: &[Sample],
    drop: usize,
    rho: f64,
) -> Result<(DVector<f64>, Vec<usize>)> {
    if candidates.is_empty() {
        return Ok((own.clone(), Vec::new()));
    }
    if validation.is_empty() {
        return Err(SabreError::config("zeno needs a nonempty validation set"));
    }
    let base = validation_loss(own, validation);
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let s = base - validation_loss(c, validation) - rho * (*c - own).norm_squared();
            (i, if s.is_nan() { f64::NEG_INFINITY } else { s })
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = candidates.len().saturating_sub(drop).max(1);
    let mut kept: Vec<usize> = scored[..keep].iter().map(|&(i, _)| i).collect();
    kept.sort_unstable();
    let mut acc = DVector::zeros(own.len());
    for &i in &kept {
        acc += candidates[i];
    }
    Ok((acc / kept.len() as f64, kept))
}
