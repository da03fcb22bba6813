//! Run summaries and pre-run assumption checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adversary::{detection_probability, AttackSpec};
use crate::analysis::{
    attack_success, bias_vector_estimate, clean_test_mse, exclusion_events, mse_rate_fit, BiasEstimate, BiasParams,
    ExclusionEvent, RateFit,
};
use crate::config::AnalysisSettings;
use crate::engine::evaluation_rng;
use crate::error::{ClientId, Result, SabreError};
use crate::network::{check_relaxed_connectivity, ConnectivityVerdict};
use crate::record::RunRecord;
use crate::scenario::{Algorithm, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEstimate {
    pub client: ClientId,
    pub compromised: bool,
    pub cycle: u64,
    pub tick: u64,
    pub social_mean: Vec<f64>,
    pub linf_error: f64,
    pub sq_error: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub client: ClientId,
    pub coordinate: usize,
    #[serde(flatten)]
    pub fit: RateFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub clients: usize,
    pub compromised: Vec<ClientId>,
    pub rows: usize,
    pub theta_star: Vec<f64>,
    pub finals: Vec<FinalEstimate>,
    pub max_benign_linf_error: f64,
    pub clean_test_mse: f64,
    /// Trojan hit rate, or benign clean-test MSE for other attacks; absent without attackers.
    pub attack_success: Option<f64>,
    pub bias_b: f64,
    pub bias: Vec<BiasEstimate>,
    /// Pairs with at least one exclusion.
    pub exclusions: Vec<ExclusionEvent>,
    /// Social-variance decay per benign client and observed coordinate.
    pub mse_slopes: Vec<SlopeFit>,
    pub rate_window: (u64, u64),
    pub floor_events: u64,
    pub events: BTreeMap<String, u64>,
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v) })
}

/// The attack whose success is reported: trojan if present, else the first.
fn headline_attack(scenario: &Scenario) -> Option<&AttackSpec> {
    scenario
        .attacks
        .values()
        .find(|s| matches!(s, AttackSpec::Trojan { .. }))
        .or_else(|| scenario.attacks.values().next())
}

fn default_bias(scenario: &Scenario) -> f64 {
    scenario
        .attacks
        .values()
        .find_map(|s| match s {
            AttackSpec::LabelFlip { bias } if *bias != 0.0 => Some(*bias),
            _ => None,
        })
        .unwrap_or(1.0)
}

/// Everything here is recomputed from `record`; the scenario only supplies
/// theta*, supports, the attack specs and the evaluation seed.
pub fn summarize(scenario: &Scenario, record: &RunRecord, settings: &AnalysisSettings) -> Result<Summary> {
    if record.dim != scenario.task.dim() {
        return Err(SabreError::Dimension {
            expected: scenario.task.dim(),
            found: record.dim,
        });
    }
    if record.rows.is_empty() {
        return Err(SabreError::Analysis("record is empty".into()));
    }
    let theta = &scenario.task.theta_star;
    let finals: Vec<FinalEstimate> = record
        .clients()
        .into_iter()
        .filter_map(|c| record.last_row(c))
        .map(|r| FinalEstimate {
            client: r.client,
            compromised: r.compromised,
            cycle: r.cycle,
            tick: r.tick,
            social_mean: r.social_mean.clone(),
            linf_error: linf(&r.social_mean, theta),
            sq_error: r.sq_error,
            terminated: r.terminated,
        })
        .collect();
    let max_benign_linf_error = finals
        .iter()
        .filter(|f| !f.compromised)
        .map(|f| f.linf_error)
        .fold(0.0, |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v) });

    let test = scenario
        .task
        .test_set(settings.test_samples, &mut evaluation_rng(scenario.seed));
    let clean = clean_test_mse(record, &test)?;
    let success = if scenario.attacks.is_empty() {
        None
    } else {
        Some(attack_success(record, headline_attack(scenario), &test)?)
    };

    let bias_b = settings.bias_b.unwrap_or_else(|| default_bias(scenario));
    let shortest = record
        .clients()
        .into_iter()
        .map(|c| record.rows_for(c).count())
        .min()
        .unwrap_or(0);
    let bias_params = BiasParams {
        final_window: settings.bias.final_window.min(shortest).max(1),
        ..settings.bias.clone()
    };
    let bias = bias_vector_estimate(record, theta, bias_b, &bias_params)?;

    let exclusions = exclusion_events(record)
        .into_iter()
        .filter(|e| e.excluded_rows > 0)
        .collect();

    let rate_to = settings.rate_to.unwrap_or(scenario.t_max);
    let mut mse_slopes = Vec::new();
    for c in record.benign_clients() {
        let Ok(data) = scenario.task.client(c) else { continue };
        for &k in &data.support {
            if let Ok(fit) = mse_rate_fit(record, c, k, settings.rate_from, rate_to) {
                mse_slopes.push(SlopeFit {
                    client: c,
                    coordinate: k,
                    fit,
                });
            }
        }
    }

    let mut events = BTreeMap::new();
    for r in &record.rows {
        for e in &r.events {
            *events.entry(e.clone()).or_insert(0) += 1;
        }
    }
    Ok(Summary {
        scenario: scenario.name.clone(),
        algorithm: scenario.algorithm,
        seed: scenario.seed,
        clients: scenario.num_clients(),
        compromised: scenario.compromised(),
        rows: record.rows.len(),
        theta_star: theta.clone(),
        finals,
        max_benign_linf_error,
        clean_test_mse: clean,
        attack_success: success,
        bias_b,
        bias,
        exclusions,
        mse_slopes,
        rate_window: (settings.rate_from, rate_to),
        floor_events: record.rows.iter().map(|r| r.floor_events as u64).sum(),
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub satisfied: bool,
    /// Coordinates no benign client observes.
    pub uncovered: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub satisfied: bool,
    pub horizon: u64,
    pub window_limit: u64,
    pub windows: usize,
    pub longest_window: u64,
    /// First windows found, as inclusive tick ranges.
    pub witness: Vec<(u64, u64)>,
    /// Tick from which no window within the limit connects the benign subgraph.
    pub violated_from: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLearningReport {
    pub satisfied: bool,
    /// (benign, compromised) pairs that communicate without a shared coordinate.
    pub violations: Vec<(ClientId, ClientId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub attacker: ClientId,
    pub model_size: u64,
    pub tampered_fraction: f64,
    /// Smallest observed-coordinate fraction among benign clients.
    pub learned_fraction: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub scenario: String,
    pub sufficiency: SufficiencyReport,
    pub connectivity: ConnectivityReport,
    pub joint_learning: JointLearningReport,
    pub detection: Vec<DetectionReport>,
}

impl VerifyReport {
    pub fn all_satisfied(&self) -> bool {
        self.sufficiency.satisfied && self.connectivity.satisfied && self.joint_learning.satisfied
    }
}

const WITNESS_LEN: usize = 10;

/// Checks sufficiency, relaxed connectivity of the benign subgraph and joint
/// learning over the run's horizon, without running it.
pub fn verify(scenario: &Scenario) -> Result<VerifyReport> {
    scenario.validate()?;
    let benign = scenario.benign();
    let task = &scenario.task;
    let mut covered = vec![false; task.dim()];
    for &c in &benign {
        for &k in &task.client(c)?.support {
            covered[k] = true;
        }
    }
    let uncovered: Vec<usize> = (0..task.dim()).filter(|&k| !covered[k]).collect();

    let horizon = scenario.t_max + 1;
    let window_limit = scenario.num_clients() as u64;
    let verdict = check_relaxed_connectivity(&scenario.topology, horizon, window_limit, Some(&benign));
    let (windows, violated_from) = match verdict {
        ConnectivityVerdict::Satisfied { windows } => (windows, None),
        ConnectivityVerdict::Violated { start, windows, .. } => (windows, Some(start)),
    };
    let connectivity = ConnectivityReport {
        satisfied: violated_from.is_none(),
        horizon,
        window_limit,
        windows: windows.len(),
        longest_window: windows.iter().map(|w| w.1 - w.0 + 1).max().unwrap_or(0),
        witness: windows.iter().take(WITNESS_LEN).copied().collect(),
        violated_from,
    };

    let violations = scenario.joint_learning_violations(horizon);
    let mut detection = Vec::new();
    for (&attacker, spec) in &scenario.attacks {
        if let AttackSpec::GeneralRandom { fraction, .. } = spec {
            let k = task.dim() as u64;
            let mut worst: Option<(f64, f64)> = None;
            for &c in &benign {
                let l = task.client(c)?.support.len() as f64 / k as f64;
                let p = detection_probability(k, l, *fraction)?;
                if worst.is_none_or(|(_, wp)| p < wp) {
                    worst = Some((l, p));
                }
            }
            if let Some((l, p)) = worst {
                detection.push(DetectionReport {
                    attacker,
                    model_size: k,
                    tampered_fraction: *fraction,
                    learned_fraction: l,
                    probability: p,
                });
            }
        }
    }
    Ok(VerifyReport {
        scenario: scenario.name.clone(),
        sufficiency: SufficiencyReport {
            satisfied: uncovered.is_empty(),
            uncovered,
        },
        connectivity,
        joint_learning: JointLearningReport {
            satisfied: violations.is_empty(),
            violations,
        },
        detection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, EngineOptions};
    use crate::presets::preset;
    use crate::task::ClientData;

    #[test]
    fn p2p5_presets_satisfy_all_assumptions() {
        for name in ["p2p5-benign", "p2p5-node4-labelflip", "p2p5-bayp2pfl-labelflip", "p2p5-majority-compromised"] {
            let r = verify(&preset(name).unwrap()).unwrap();
            assert!(r.all_satisfied(), "{name}: {r:?}");
        }
        let line = verify(&preset("p2p5-line-node4-labelflip").unwrap()).unwrap();
        assert!(!line.connectivity.satisfied);
        assert!(line.sufficiency.satisfied);
    }

    #[test]
    fn disjoint_label_flipper_is_flagged() {
        let mut s = preset("p2p5-node4-labelflip").unwrap();
        s.task.clients[3] = ClientData {
            support: vec![0],
            noise_variance: 0.01,
        };
        s.task.clients[4].support = vec![2];
        let r = verify(&s).unwrap();
        assert!(!r.joint_learning.satisfied);
        assert!(r.joint_learning.violations.contains(&(ClientId(5), ClientId(4))));
    }

    #[test]
    fn general_random_probability_is_the_formula() {
        let s = preset("n50-generalrandom-10").unwrap();
        let r = verify(&s).unwrap();
        assert_eq!(r.detection.len(), 10);
        for d in &r.detection {
            assert_eq!(d.learned_fraction, 0.4);
            assert_eq!(d.probability, detection_probability(20, 0.4, 0.3).unwrap());
        }
    }

    #[test]
    fn benign_summary_is_clean() {
        let mut s = preset("p2p5-benign").unwrap();
        s.t_max = 400;
        let rec = run(&s, EngineOptions::default()).unwrap();
        let sum = summarize(&s, &rec, &AnalysisSettings::default()).unwrap();
        assert_eq!(sum.finals.len(), 5);
        assert!(sum.max_benign_linf_error < 0.05);
        assert!(sum.attack_success.is_none());
        assert!(sum.bias.iter().all(|b| b.verdict == crate::analysis::BiasVerdict::Clean));
        // observed coordinates: 1 + 2 + 3 + 2 + 1
        assert_eq!(sum.mse_slopes.len(), 9);
        let again = summarize(&s, &rec, &AnalysisSettings::default()).unwrap();
        assert_eq!(serde_json::to_string(&sum).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn mismatched_record_is_rejected() {
        let s = preset("p2p5-benign").unwrap();
        assert!(summarize(&s, &RunRecord::new(3), &AnalysisSettings::default()).is_err());
        assert!(summarize(&s, &RunRecord::new(2), &AnalysisSettings::default()).is_err());
    }
}
