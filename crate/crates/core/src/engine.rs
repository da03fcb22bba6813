//! Discrete-event execution of a scenario.
//!
//! Time advances in abstract units. At each unit, every client whose local
//! cycle ends there observes a batch (phase A), shares its social belief
//! (phase B), then aggregates what it has received and applies the overwrite
//! safeguard (phase C). Phases A and C touch only per-client state and run in
//! parallel when a worker pool is configured; phase B is the only place where
//! clients exchange data and runs sequentially in id order.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{poison_data, poison_model, AttackSpec};
use crate::aggregation::{
    clipped_mean, fuse_candidates, overwrite_in_place, trimmed_mean, validation_loss, zeno_select, Bounds,
    Candidate, ConfidenceParams,
};
use crate::belief::{symmetrize, CovarianceMode, GaussianBelief, InformationBelief};
use crate::error::{ClientId, Result, SabreError};
use crate::learning::{kalman_update_in_place, FreezeMonitor, ObservationUpdate};
use crate::network::{Adjacency, JointClock};
use crate::record::{RecordRow, RunRecord};
use crate::task::LinearTask;
use crate::scenario::{Algorithm, MessagePolicy, Scenario};
use crate::task::Sample;

const STREAM_DATA: u64 = 0;
const STREAM_DATA_POISON: u64 = 1;
const STREAM_MODEL_POISON: u64 = 2;
const STREAM_ZENO: u64 = 3;
const STREAM_FREEZE: u64 = 4;
const STREAM_EVAL: u64 = 5;

/// Independent deterministic stream for one (client, purpose) pair.
fn client_stream(seed: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 3) | purpose);
    rng
}

/// Stream for post-run evaluation data, disjoint from every client stream.
pub fn evaluation_rng(seed: u64) -> ChaCha8Rng {
    client_stream(seed, 0, STREAM_EVAL)
}

/// A shared, immutable belief snapshot as sent on the wire.
#[derive(Debug)]
pub struct Message {
    pub belief: GaussianBelief,
    info: InformationBelief,
    floored: bool,
}

impl Message {
    fn new(belief: GaussianBelief) -> Self {
        let (info, floored) = belief.to_information_form_floored();
        Self { belief, info, floored }
    }

    fn candidate(&self) -> Candidate<'_> {
        Candidate {
            belief: &self.belief,
            info: &self.info,
        }
    }
}

#[derive(Debug, Clone)]
struct Mail {
    message: Arc<Message>,
    tick: u64,
}

/// One client's simulation state.
#[derive(Debug)]
pub struct ClientState {
    pub id: ClientId,
    pub local: GaussianBelief,
    pub social: GaussianBelief,
    /// Local cycles completed.
    pub cycle: u64,
    pub compromise: Option<AttackSpec>,
    pub local_frozen: bool,
    pub terminated: bool,
    rng_data: ChaCha8Rng,
    rng_data_poison: ChaCha8Rng,
    rng_model_poison: ChaCha8Rng,
    mailbox: BTreeMap<ClientId, Mail>,
    own: Option<Arc<Message>>,
    outgoing: Option<Arc<Message>>,
    zeno_validation: Vec<Sample>,
    freeze: Option<(FreezeMonitor, Vec<Sample>)>,
    events: Vec<String>,
}

/// Worker configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    /// 1 runs everything on the calling thread.
    pub workers: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Pool(rayon::ThreadPool),
}

impl Exec {
    fn new(workers: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| SabreError::config(format!("worker pool: {e}")))?;
            return Ok(Exec::Pool(pool));
        }
        let _ = workers;
        Ok(Exec::Sequential)
    }

    /// Applies `f` to every item, returning results in item order.
    fn map<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter_mut().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Pool(pool) => {
                use rayon::prelude::*;
                pool.install(|| items.par_iter_mut().map(f).collect())
            }
        }
    }
}

/// A running simulation.
pub struct Simulation<'a> {
    scenario: &'a Scenario,
    clients: Vec<ClientState>,
    clock: JointClock,
    unit: u64,
    theta_star: DVector<f64>,
    confidence: ConfidenceParams,
    adjacency: Option<(u64, Arc<Adjacency>)>,
    exec: Exec,
    pending: Vec<RecordRow>,
    pending_tick: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(scenario: &'a Scenario, options: EngineOptions) -> Result<Self> {
        scenario.validate()?;
        let k = scenario.task.dim();
        let prior = GaussianBelief::isotropic(k, scenario.prior_variance);
        let mut clients = Vec::with_capacity(scenario.num_clients());
        for id in scenario.client_ids() {
            let i = id.index();
            let zeno_validation = if scenario.algorithm == Algorithm::Zeno {
                let mut rng = client_stream(scenario.seed, i, STREAM_ZENO);
                scenario
                    .task
                    .sample_batch(id, scenario.params.zeno_validation, &mut rng)?
            } else {
                Vec::new()
            };
            let freeze = match &scenario.freeze {
                Some(f) => {
                    let mut rng = client_stream(scenario.seed, i, STREAM_FREEZE);
                    let val = scenario.task.sample_batch(id, f.validation_size, &mut rng)?;
                    Some((FreezeMonitor::new(f.patience), val))
                }
                None => None,
            };
            clients.push(ClientState {
                id,
                local: prior.clone(),
                social: prior.clone(),
                cycle: 0,
                compromise: scenario.attacks.get(&id).cloned(),
                local_frozen: false,
                terminated: false,
                rng_data: client_stream(scenario.seed, i, STREAM_DATA),
                rng_data_poison: client_stream(scenario.seed, i, STREAM_DATA_POISON),
                rng_model_poison: client_stream(scenario.seed, i, STREAM_MODEL_POISON),
                mailbox: BTreeMap::new(),
                own: None,
                outgoing: None,
                zeno_validation,
                freeze,
                events: Vec::new(),
            });
        }
        Ok(Self {
            scenario,
            clients,
            clock: scenario.clock()?,
            unit: 0,
            theta_star: scenario.task.theta_star_vector(),
            confidence: ConfidenceParams {
                kappa: scenario.params.kappa,
                coordinates: scenario.params.confidence_coordinates.clone(),
            },
            adjacency: None,
            exec: Exec::new(options.workers)?,
            pending: Vec::new(),
            pending_tick: 0,
        })
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn is_done(&self) -> bool {
        self.clients.iter().all(|c| c.terminated)
    }

    /// Current time unit (the next one to execute).
    pub fn unit(&self) -> u64 {
        self.unit
    }

    fn adjacency_at(&mut self, tick: u64) -> Arc<Adjacency> {
        let epoch = self.scenario.topology.epoch(tick);
        match &self.adjacency {
            Some((e, a)) if *e == epoch => a.clone(),
            _ => {
                let a = Arc::new(self.scenario.topology.adjacency(tick));
                self.adjacency = Some((epoch, a.clone()));
                a
            }
        }
    }

    /// Executes one time unit and returns the rows of every joint tick that
    /// has been completed, in record order.
    pub fn step_unit(&mut self) -> Result<Vec<RecordRow>> {
        let unit = self.unit;
        let tick = self.clock.joint_tick(unit);
        let active: Vec<bool> = self
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| !c.terminated && self.clock.completes_cycle(i, unit))
            .collect();
        let adjacency = self.adjacency_at(tick);
        let scenario = self.scenario;

        // phase A: observe
        let results = self.exec.map(&mut self.clients, |c| {
            if !active[c.id.index()] {
                return Ok(());
            }
            observe(scenario, c)
        });
        first_error(results)?;

        // phase B: share
        let benign_means: Vec<DVector<f64>> = self
            .clients
            .iter()
            .filter(|c| active[c.id.index()] && c.compromise.is_none())
            .filter_map(|c| c.own.as_ref().map(|m| m.belief.mean().clone()))
            .collect();
        let context: Vec<&DVector<f64>> = benign_means.iter().collect();
        for c in self.clients.iter_mut().filter(|c| active[c.id.index()]) {
            c.outgoing = match &c.compromise {
                Some(spec) if !spec.is_data_poisoning() => {
                    let sent = poison_model(&c.social, &context, spec, &mut c.rng_model_poison)?;
                    if sent.degraded {
                        c.events.push("attack-degraded".into());
                    }
                    Some(Arc::new(Message::new(sent.belief)))
                }
                _ => c.own.clone(),
            };
        }
        let sent: Vec<(usize, Arc<Message>)> = self
            .clients
            .iter()
            .filter(|c| active[c.id.index()])
            .filter_map(|c| c.outgoing.clone().map(|m| (c.id.index(), m)))
            .collect();
        for (s, msg) in &sent {
            for r in adjacency_out(&adjacency, *s) {
                let rc = &mut self.clients[r];
                if !rc.terminated {
                    rc.mailbox.insert(
                        ClientId::from_index(*s),
                        Mail {
                            message: msg.clone(),
                            tick,
                        },
                    );
                }
            }
        }

        // phase C: aggregate
        let confidence = &self.confidence;
        let theta_star = &self.theta_star;
        let compromised = scenario.attacks.len();
        let rows = self.exec.map(&mut self.clients, |c| {
            if !active[c.id.index()] {
                return Ok::<_, SabreError>(None);
            }
            let out = aggregate(scenario, confidence, &adjacency, compromised, tick, c)?;
            Ok::<_, SabreError>(Some(make_row(c, tick, theta_star, out)))
        });
        let mut fresh = Vec::new();
        for r in rows {
            if let Some(row) = r? {
                fresh.push(row);
            }
        }
        self.unit += 1;

        let mut out = Vec::new();
        if tick != self.pending_tick {
            out = self.flush_pending();
            self.pending_tick = tick;
        }
        self.pending.extend(fresh);
        if self.is_done() || self.clock.joint_tick(self.unit) != tick {
            out.extend(self.flush_pending());
        }
        Ok(out)
    }

    fn flush_pending(&mut self) -> Vec<RecordRow> {
        let mut rows = std::mem::take(&mut self.pending);
        rows.sort_by_key(|r| (r.tick, r.client, r.cycle));
        rows
    }

    /// Runs to completion, passing every row to `sink` in record order.
    pub fn run_with<F: FnMut(RecordRow)>(&mut self, mut sink: F) -> Result<()> {
        while !self.is_done() {
            for row in self.step_unit()? {
                sink(row);
            }
        }
        Ok(())
    }
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

fn adjacency_out(a: &Adjacency, sender: usize) -> impl Iterator<Item = usize> + '_ {
    (0..a.size()).filter(move |&r| r != sender && a.get(r, sender))
}

fn observe(scenario: &Scenario, c: &mut ClientState) -> Result<()> {
    c.cycle += 1;
    c.events.clear();
    let data = scenario.task.client(c.id)?;
    let noise = data.noise_variance;
    let mut batch = scenario.task.sample_batch(c.id, scenario.batch_size, &mut c.rng_data)?;
    if let Some(spec) = &c.compromise {
        if spec.is_data_poisoning() {
            poison_data(&mut batch, spec, &data.support, &mut c.rng_data_poison)?;
        }
    }
    for s in batch {
        let obs = ObservationUpdate {
            feature: s.x,
            label: s.y,
            noise_variance: noise,
        };
        if !c.local_frozen {
            kalman_update_in_place(&mut c.local, &obs)?;
        }
        kalman_update_in_place(&mut c.social, &obs)?;
    }
    if scenario.covariance_mode == CovarianceMode::Diagonal {
        c.social = c.social.diagonalized();
    }
    if let Some((monitor, val)) = &mut c.freeze {
        if !c.local_frozen && monitor.observe(validation_loss(c.local.mean(), val)) {
            c.local_frozen = true;
            c.events.push("local-frozen".into());
        }
    }
    c.own = Some(Arc::new(Message::new(c.social.clone())));
    Ok(())
}

/// Covariance whose precision is the uniform average of the candidates' precisions.
fn averaged_covariance(cands: &[Candidate<'_>]) -> (DMatrix<f64>, bool) {
    let dim = cands[0].belief.dim();
    let usable: Vec<&Candidate<'_>> = cands
        .iter()
        .filter(|c| c.info.precision().iter().all(|v| v.is_finite()))
        .collect();
    let mut z = DMatrix::zeros(dim, dim);
    for c in &usable {
        z += c.info.precision();
    }
    z /= usable.len().max(1) as f64;
    symmetrize(&mut z);
    let info = InformationBelief::new(z, DVector::zeros(dim)).expect("square");
    let (moment, floored) = info.to_moment_form_floored();
    (moment.covariance().clone(), floored)
}

fn aggregate(
    scenario: &Scenario,
    confidence: &ConfidenceParams,
    adjacency: &Adjacency,
    compromised: usize,
    tick: u64,
    c: &mut ClientState,
) -> Result<Outcome> {
    let own = c.own.clone().expect("phase A ran");
    let me = c.id.index();
    let mut floors = own.floored as u32;

    // candidates in id order, own social belief under its own id
    let mut ids = Vec::new();
    let mut cands: Vec<Candidate<'_>> = Vec::new();
    for j in 0..adjacency.size() {
        if j == me {
            ids.push(c.id);
            cands.push(own.candidate());
            continue;
        }
        if !adjacency.get(me, j) {
            continue;
        }
        let Some(mail) = c.mailbox.get(&ClientId::from_index(j)) else {
            continue;
        };
        if scenario.message_policy == MessagePolicy::ExpireAfterTick && mail.tick + 1 < tick {
            continue;
        }
        ids.push(ClientId::from_index(j));
        cands.push(mail.message.candidate());
        floors += mail.message.floored as u32;
    }

    let bounds = Bounds::new(&c.local, confidence);
    let (mut next, used): (GaussianBelief, Vec<ClientId>) = match scenario.algorithm {
        Algorithm::Sabre | Algorithm::Bayp2pfl => {
            let chosen: Vec<usize> = if scenario.algorithm == Algorithm::Sabre {
                (0..cands.len()).filter(|&i| bounds.admits(cands[i].belief.mean())).collect()
            } else {
                (0..cands.len()).collect()
            };
            if chosen.is_empty() {
                (c.social.clone(), Vec::new())
            } else {
                let w = 1.0 / chosen.len() as f64;
                let weighted: Vec<(Candidate<'_>, f64)> = chosen.iter().map(|&i| (cands[i], w)).collect();
                let (b, f) = fuse_candidates(&weighted);
                floors += f as u32;
                (b, chosen.iter().map(|&i| ids[i]).collect())
            }
        }
        Algorithm::TrimmedMean | Algorithm::Clipping | Algorithm::Zeno => {
            let means: Vec<&DVector<f64>> = cands.iter().map(|c| c.belief.mean()).collect();
            let (mean, used) = match scenario.algorithm {
                Algorithm::TrimmedMean => {
                    let wanted = scenario.params.trim.unwrap_or(compromised);
                    let trim = wanted.min((means.len() - 1) / 2);
                    (trimmed_mean(&means, trim)?, ids.clone())
                }
                Algorithm::Clipping => (clipped_mean(c.social.mean(), &means, scenario.params.clip_tau), ids.clone()),
                _ => {
                    let drop = scenario.params.zeno_drop.unwrap_or(compromised);
                    let (m, kept) = zeno_select(
                        c.social.mean(),
                        &means,
                        &c.zeno_validation,
                        drop,
                        scenario.params.zeno_rho,
                    )?;
                    (m, kept.into_iter().map(|i| ids[i]).collect())
                }
            };
            let (cov, f) = averaged_covariance(&cands);
            floors += f as u32;
            (GaussianBelief::from_parts_unchecked(mean, cov), used)
        }
    };
    if scenario.covariance_mode == CovarianceMode::Diagonal {
        next = next.diagonalized();
    }
    let overwritten = if scenario.algorithm == Algorithm::Sabre {
        overwrite_in_place(&bounds, &c.local, &mut next)
    } else {
        Vec::new()
    };
    c.social = next;

    if c.compromise.is_none() && !(c.local.is_finite() && c.social.is_finite()) {
        return Err(SabreError::InvariantBreach {
            client: c.id,
            tick,
            detail: format!("non-finite belief after local cycle {}", c.cycle),
        });
    }
    if c.social.trace() <= scenario.sigma_threshold || c.cycle >= scenario.t_max {
        c.terminated = true;
    }
    Ok(Outcome {
        neighbors: ids,
        used,
        overwritten,
        floors,
    })
}

struct Outcome {
    neighbors: Vec<ClientId>,
    used: Vec<ClientId>,
    overwritten: Vec<usize>,
    floors: u32,
}

fn make_row(c: &ClientState, tick: u64, theta_star: &DVector<f64>, out: Outcome) -> RecordRow {
    RecordRow {
        client: c.id,
        cycle: c.cycle,
        tick,
        compromised: c.compromise.is_some(),
        social_mean: c.social.mean().iter().copied().collect(),
        social_var: c.social.variances().iter().copied().collect(),
        social_trace: c.social.trace(),
        local_mean: c.local.mean().iter().copied().collect(),
        local_var: c.local.variances().iter().copied().collect(),
        local_trace: c.local.trace(),
        sq_error: (c.social.mean() - theta_star).norm_squared(),
        neighbors: out.neighbors,
        confidence_set: out.used,
        overwritten: out.overwritten,
        floor_events: out.floors,
        events: c.events.clone(),
        terminated: c.terminated,
    }
}

/// Runs `scenario` to completion and collects the full record.
pub fn run(scenario: &Scenario, options: EngineOptions) -> Result<RunRecord> {
    let mut record = RunRecord::new(scenario.task.dim());
    Simulation::new(scenario, options)?.run_with(|row| record.rows.push(row))?;
    Ok(record)
}

/// Local beliefs each client would hold after `cycles` cycles of training on
/// its own (unpoisoned) data stream, as used for dataset-quality rankings.
pub fn solo_local_beliefs(task: &LinearTask, prior_variance: f64, batch_size: usize, cycles: u64, seed: u64) -> Result<Vec<GaussianBelief>> {
    task.client_ids()
        .map(|id| {
            let mut rng = client_stream(seed, id.index(), STREAM_DATA);
            let noise = task.client(id)?.noise_variance;
            let mut b = GaussianBelief::isotropic(task.dim(), prior_variance);
            for _ in 0..cycles {
                for s in task.sample_batch(id, batch_size, &mut rng)? {
                    kalman_update_in_place(
                        &mut b,
                        &ObservationUpdate {
                            feature: s.x,
                            label: s.y,
                            noise_variance: noise,
                        },
                    )?;
                }
            }
            Ok(b)
        })
        .collect()
}
