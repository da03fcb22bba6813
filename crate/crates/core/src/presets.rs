//! Named, version-pinned scenarios.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adversary::AttackSpec;
use crate::belief::CovarianceMode;
use crate::engine::solo_local_beliefs;
use crate::error::{ClientId, Result, SabreError};
use crate::network::{Schedule, Topology};
use crate::scenario::{Algorithm, AlgorithmParams, MessagePolicy, Scenario};
use crate::task::{ClientData, FeatureDistribution, LinearTask};

/// Bumped whenever any preset's content changes.
pub const PRESET_VERSION: u32 = 1;

pub const P2P5_THETA: [f64; 3] = [-0.7179, 1.3171, -0.6441];
pub const P2P5_T_MAX: u64 = 2000;
pub const N50_CLIENTS: usize = 50;
pub const N50_DIM: usize = 20;
pub const N50_SUPPORT: usize = 8;
pub const N50_T_MAX: u64 = 8000;
const N50_SEED: u64 = 50;
const DEFAULT_SEED: u64 = 7;

pub const N50_ATTACKS: [&str; 5] = ["labelflip", "trojan", "bitflip", "generalrandom", "alie"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresetInfo {
    pub name: String,
    pub description: String,
    /// Deliberately violates an assumption; used for negative tests.
    pub expected_fail: bool,
}

fn info(name: &str, description: &str, expected_fail: bool) -> PresetInfo {
    PresetInfo {
        name: name.into(),
        description: description.into(),
        expected_fail,
    }
}

/// Every preset name, with the n50 sweep family expanded for the default counts.
pub fn list() -> Vec<PresetInfo> {
    let mut out = vec![
        info("p2p5-benign", "five nodes, no attackers", false),
        info("p2p5-node4-labelflip", "five nodes, node 4 label-flipped (b = 1), SABRE", false),
        info("p2p5-bayp2pfl-labelflip", "as p2p5-node4-labelflip under fixed uniform trust", false),
        info("p2p5-majority-compromised", "five nodes, nodes 1, 3, 5 label-flipped, SABRE", false),
        info(
            "p2p5-line-node4-labelflip",
            "node-4 attack on the bare line 1-2-3-4-5: node 5 is cut off from the benign nodes",
            true,
        ),
        info("n50-benign", "50 clients, K = 20, no attackers, SABRE", false),
    ];
    for attack in N50_ATTACKS {
        for count in [10, 30, 40] {
            out.push(info(
                &format!("n50-{attack}-{count}"),
                &format!("50 clients, {count} running {attack}, SABRE; append -best or -worst to place attackers by dataset quality"),
                false,
            ));
        }
    }
    out.push(info("graph-drop20", "n50-labelflip-10 with 20% of directed edges dropped", false));
    out.push(info(
        "graph-timevarying",
        "n50-labelflip-10 with 20% of directed edges dropped, reshuffled every 100 ticks",
        false,
    ));
    out
}

pub fn is_expected_fail(name: &str) -> bool {
    list().iter().any(|p| p.name == name && p.expected_fail)
}

/// Builds the named preset.
pub fn preset(name: &str) -> Result<Scenario> {
    let mut s = match name {
        "p2p5-benign" => p2p5(name, &[], Algorithm::Sabre, p2p5_topology()),
        "p2p5-node4-labelflip" => p2p5(name, &[4], Algorithm::Sabre, p2p5_topology()),
        "p2p5-bayp2pfl-labelflip" => p2p5(name, &[4], Algorithm::Bayp2pfl, p2p5_topology()),
        "p2p5-majority-compromised" => p2p5(name, &[1, 3, 5], Algorithm::Sabre, p2p5_topology()),
        "p2p5-line-node4-labelflip" => p2p5(name, &[4], Algorithm::Sabre, line5()),
        "n50-benign" => n50(name, None, 0, Placement::Ids)?,
        "graph-drop20" | "graph-timevarying" => {
            let mut s = n50(name, Some("labelflip"), 10, Placement::Ids)?;
            s.topology.schedule = Schedule::RandomDrop {
                fraction: 0.2,
                period: (name == "graph-timevarying").then_some(100),
                seed: 20,
            };
            s
        }
        other => parse_n50(other).ok_or_else(|| unknown(other))??,
    };
    s.name = name.to_string();
    Ok(s)
}

fn unknown(name: &str) -> SabreError {
    let names: Vec<String> = list().into_iter().map(|p| p.name).collect();
    SabreError::config(format!(
        "unknown preset {name:?}; available: {} (n50-<attack>-<count> accepts any count 0..=49 and an optional -best/-worst suffix)",
        names.join(", ")
    ))
}

/// Line 1-2-3-4-5 with chords 2-4 and 3-5.
pub fn p2p5_topology() -> Topology {
    Topology::undirected(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (2, 4), (3, 5)])
}

fn line5() -> Topology {
    Topology::undirected(5, &[(1, 2), (2, 3), (3, 4), (4, 5)])
}

fn p2p5_task() -> LinearTask {
    let supports: [&[usize]; 5] = [&[0], &[0, 1], &[0, 1, 2], &[1, 2], &[2]];
    LinearTask {
        theta_star: P2P5_THETA.to_vec(),
        clients: supports
            .iter()
            .map(|s| ClientData {
                support: s.to_vec(),
                noise_variance: 0.01,
            })
            .collect(),
        features: FeatureDistribution::default(),
    }
}

fn base(name: &str, task: LinearTask, topology: Topology, algorithm: Algorithm, t_max: u64) -> Scenario {
    Scenario {
        name: name.into(),
        task,
        topology,
        algorithm,
        params: AlgorithmParams::default(),
        attacks: BTreeMap::new(),
        cycle_lengths: None,
        phases: None,
        prior_variance: 10.0,
        batch_size: 1,
        covariance_mode: CovarianceMode::Full,
        sigma_threshold: 1e-6,
        t_max,
        message_policy: MessagePolicy::Persist,
        freeze: None,
        seed: DEFAULT_SEED,
    }
}

fn p2p5(name: &str, attacked: &[u32], algorithm: Algorithm, topology: Topology) -> Scenario {
    let mut s = base(name, p2p5_task(), topology, algorithm, P2P5_T_MAX);
    for &a in attacked {
        s.attacks.insert(ClientId(a), AttackSpec::LabelFlip { bias: 1.0 });
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placement {
    /// Attackers are the lowest ids; supports are random, so this is a random placement.
    Ids,
    /// Attackers hold the best datasets.
    Best,
    /// Attackers hold the worst datasets.
    Worst,
}

fn parse_n50(name: &str) -> Option<Result<Scenario>> {
    let rest = name.strip_prefix("n50-")?;
    let (rest, placement) = if let Some(r) = rest.strip_suffix("-best") {
        (r, Placement::Best)
    } else if let Some(r) = rest.strip_suffix("-worst") {
        (r, Placement::Worst)
    } else {
        (rest, Placement::Ids)
    };
    let (attack, count) = rest.rsplit_once('-')?;
    let count: usize = count.parse().ok()?;
    if !N50_ATTACKS.contains(&attack) || count >= N50_CLIENTS {
        return None;
    }
    Some(n50(name, Some(attack), count, placement))
}

/// Attack used by the n50 sweep for each short name.
pub fn n50_attack(attack: &str) -> Option<AttackSpec> {
    Some(match attack {
        "labelflip" => AttackSpec::LabelFlip { bias: 1.0 },
        "trojan" => {
            let mut trigger = vec![0.0; N50_DIM];
            trigger[0] = 1.0;
            trigger[1] = 1.0;
            AttackSpec::Trojan {
                trigger,
                target: 10.0,
                fraction: 0.5,
            }
        }
        "bitflip" => AttackSpec::BitFlip { bit: 62, fraction: 0.1 },
        "generalrandom" => AttackSpec::GeneralRandom {
            fraction: 0.3,
            multiplier: 1e10,
            tamper_covariance: false,
        },
        "alie" => AttackSpec::Alie { z: 1.5 },
        _ => return None,
    })
}

/// Random supports of size 8 over 20 coordinates, redrawn per client until
/// every pair of clients shares a coordinate and the union covers everything.
pub fn n50_task() -> LinearTask {
    let mut rng = ChaCha8Rng::seed_from_u64(N50_SEED);
    let theta_star: Vec<f64> = (0..N50_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    loop {
        let mut supports: Vec<BTreeSet<usize>> = Vec::with_capacity(N50_CLIENTS);
        while supports.len() < N50_CLIENTS {
            let s: BTreeSet<usize> = index::sample(&mut rng, N50_DIM, N50_SUPPORT).into_iter().collect();
            if supports.iter().all(|o| !o.is_disjoint(&s)) {
                supports.push(s);
            }
        }
        let covered: BTreeSet<usize> = supports.iter().flatten().copied().collect();
        if covered.len() == N50_DIM {
            return LinearTask {
                theta_star,
                clients: supports
                    .into_iter()
                    .map(|s| ClientData {
                        support: s.into_iter().collect(),
                        noise_variance: 0.01,
                    })
                    .collect(),
                features: FeatureDistribution::default(),
            };
        }
    }
}

fn n50(name: &str, attack: Option<&str>, count: usize, placement: Placement) -> Result<Scenario> {
    let task = n50_task();
    let mut s = base(name, task, Topology::complete(N50_CLIENTS), Algorithm::Sabre, N50_T_MAX);
    let Some(attack) = attack else {
        return Ok(s);
    };
    let spec = n50_attack(attack).ok_or_else(|| unknown(name))?;
    let order: Vec<ClientId> = match placement {
        Placement::Ids => s.client_ids().collect(),
        Placement::Best | Placement::Worst => {
            let ranked = rank_by_dataset_quality(&s)?;
            if placement == Placement::Best {
                ranked
            } else {
                ranked.into_iter().rev().collect()
            }
        }
    };
    for id in order.into_iter().take(count) {
        s.attacks.insert(id, spec.clone());
    }
    Ok(s)
}

/// Clients ordered from best to worst solo-trained local model (clean test MSE).
pub fn rank_by_dataset_quality(s: &Scenario) -> Result<Vec<ClientId>> {
    let beliefs = solo_local_beliefs(&s.task, s.prior_variance, s.batch_size, 200, s.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x7e57);
    let test = s.task.test_set(500, &mut rng);
    let mut scored: Vec<(ClientId, f64)> = s
        .client_ids()
        .zip(&beliefs)
        .map(|(id, b)| (id, crate::aggregation::validation_loss(b.mean(), &test)))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}
