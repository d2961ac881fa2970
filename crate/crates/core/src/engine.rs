//! Slotted simulation of an N x N input-queued switch.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::{is_feasible, MatchingError};
use crate::schedulers::{
    CabScheduler, CoflowClass, MwmScheduler, PeriodicMode, PeriodicScheduler, RandomizedMode,
    RandomizedScheduler, SchedulerPolicy,
};
use crate::traffic::{sample_arrivals, Coflow, CoflowId, CoflowModel, Slot, TrafficError};
use crate::tuning::{tune_model, CabParameters, TuningError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error("policy {policy} returned an infeasible matching in slot {slot}")]
    InfeasibleMatching { policy: &'static str, slot: Slot },
    #[error("policy {policy} chose coflow {id} with nothing queued at ({i}, {j}) in slot {slot}")]
    BadPacketChoice {
        policy: &'static str,
        id: CoflowId,
        i: usize,
        j: usize,
        slot: Slot,
    },
    #[error("stationary metrics need rho < 1, got rho = {0}")]
    Supercritical(f64),
    #[error("coflow {0} is not complete")]
    Incomplete(CoflowId),
    #[error("percentile of an empty sample")]
    EmptySample,
}

/// Policy selection with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Randomized {
        #[serde(default)]
        mode: RandomizedMode,
    },
    Periodic {
        #[serde(default)]
        mode: PeriodicMode,
    },
    Mwm,
    Cab {
        /// Fixed frame size; tuned from the traffic model when absent.
        #[serde(default)]
        frame_size: Option<u64>,
        #[serde(default)]
        sctf: bool,
        #[serde(default)]
        dynamic_frames: bool,
    },
}

impl PolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::Randomized { .. } => "randomized",
            PolicyConfig::Periodic { .. } => "periodic",
            PolicyConfig::Mwm => "mwm",
            PolicyConfig::Cab { .. } => "cab",
        }
    }

    pub fn cab(frame_size: Option<u64>, sctf: bool, dynamic_frames: bool) -> Self {
        PolicyConfig::Cab {
            frame_size,
            sctf,
            dynamic_frames,
        }
    }

    pub fn randomized() -> Self {
        PolicyConfig::Randomized {
            mode: RandomizedMode::Uniform,
        }
    }

    pub fn periodic() -> Self {
        PolicyConfig::Periodic {
            mode: PeriodicMode::Uniform,
        }
    }

    /// Parses a bare policy name with default parameters.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "randomized" => Some(Self::randomized()),
            "periodic" => Some(Self::periodic()),
            "mwm" => Some(PolicyConfig::Mwm),
            "cab" => Some(Self::cab(None, false, false)),
            _ => None,
        }
    }
}

fn default_percentiles() -> Vec<f64> {
    vec![0.999]
}

fn default_true() -> bool {
    true
}

fn default_trace_points() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    #[serde(default = "default_percentiles")]
    pub percentiles: Vec<f64>,
    #[serde(default = "default_true")]
    pub dilation: bool,
    /// Refuse to run when rho >= 1.
    #[serde(default = "default_true")]
    pub stationary: bool,
    #[serde(default = "default_trace_points")]
    pub trace_points: usize,
    /// Track per-VOQ batch waiting times.
    #[serde(default)]
    pub voq_wait: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            percentiles: default_percentiles(),
            dilation: true,
            stationary: true,
            trace_points: default_trace_points(),
            voq_wait: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: CoflowModel,
    pub policy: PolicyConfig,
    pub horizon: u64,
    /// Defaults to 10% of the horizon.
    #[serde(default)]
    pub warmup: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl SimConfig {
    pub fn new(model: CoflowModel, policy: PolicyConfig, horizon: u64, seed: u64) -> Self {
        SimConfig {
            model,
            policy,
            horizon,
            warmup: None,
            seed,
            metrics: MetricsConfig::default(),
        }
    }

    pub fn n(&self) -> usize {
        self.model.n
    }

    pub fn warmup_slots(&self) -> u64 {
        self.warmup.unwrap_or(self.horizon / 10)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.model.validate()?;
        if self.horizon == 0 {
            return Err(EngineError::Config("horizon must be positive".into()));
        }
        if self.warmup_slots() >= self.horizon {
            return Err(EngineError::Config(format!(
                "warmup {} must be below horizon {}",
                self.warmup_slots(),
                self.horizon
            )));
        }
        if let PolicyConfig::Cab {
            frame_size: Some(t), ..
        } = self.policy
        {
            if t < 2 {
                return Err(EngineError::Config("CAB frame size must be >= 2".into()));
            }
        }
        if self
            .metrics
            .percentiles
            .iter()
            .any(|q| !(*q > 0.0 && *q < 1.0))
        {
            return Err(EngineError::Config("percentiles must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Random stream indices derived from one seed.
pub mod streams {
    pub const ARRIVALS: u64 = 1;
    pub const SIZES: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const TUNING: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the policy object for a configuration.
pub fn build_policy(config: &SimConfig) -> Result<Box<dyn SchedulerPolicy>, EngineError> {
    let n = config.n();
    let policy_rng = stream_rng(config.seed, streams::POLICY);
    Ok(match &config.policy {
        PolicyConfig::Randomized { mode } => match mode {
            RandomizedMode::Uniform => Box::new(RandomizedScheduler::uniform(n, policy_rng)),
            RandomizedMode::Bvn => Box::new(RandomizedScheduler::bvn(
                &config.model.rate_matrix(),
                policy_rng,
            )?),
        },
        PolicyConfig::Periodic { mode } => match mode {
            PeriodicMode::Uniform => Box::new(PeriodicScheduler::uniform(n)),
            PeriodicMode::BvnCycle => {
                Box::new(PeriodicScheduler::bvn_cycle(&config.model.rate_matrix())?)
            }
        },
        PolicyConfig::Mwm => Box::new(MwmScheduler::new(n)),
        PolicyConfig::Cab {
            frame_size,
            sctf,
            dynamic_frames,
        } => match frame_size {
            Some(t) => Box::new(CabScheduler::new(n, *t, *sctf, *dynamic_frames)),
            None => {
                let params = tune_model(&config.model, &mut stream_rng(config.seed, streams::TUNING))?;
                Box::new(CabScheduler::with_parameters(n, params, *sctf, *dynamic_frames))
            }
        },
    })
}

/// Active coflows keyed by id. Ids are handed out in increasing order, so
/// a window starting at the oldest live id replaces a hash map.
#[derive(Debug, Clone, Default)]
struct Registry {
    base: u64,
    slots: VecDeque<Option<(Coflow, u64)>>,
    len: usize,
}

impl Registry {
    fn index(&self, id: CoflowId) -> Option<usize> {
        id.0.checked_sub(self.base).map(|k| k as usize)
    }

    fn get(&self, id: CoflowId) -> Option<&(Coflow, u64)> {
        self.index(id).and_then(|k| self.slots.get(k)).and_then(Option::as_ref)
    }

    fn get_mut(&mut self, id: CoflowId) -> Option<&mut (Coflow, u64)> {
        let k = self.index(id)?;
        self.slots.get_mut(k).and_then(Option::as_mut)
    }

    fn insert(&mut self, c: Coflow) {
        if self.len == 0 {
            self.base = c.id.0;
            self.slots.clear();
        }
        let k = self.index(c.id).expect("ids are increasing");
        if self.slots.len() <= k {
            self.slots.resize_with(k + 1, || None);
        }
        if self.slots[k].replace((c, 0)).is_none() {
            self.len += 1;
        }
    }

    fn remove(&mut self, id: CoflowId) -> Option<(Coflow, u64)> {
        let k = self.index(id)?;
        let out = self.slots.get_mut(k)?.take();
        if out.is_some() {
            self.len -= 1;
            while let Some(None) = self.slots.front() {
                self.slots.pop_front();
                self.base += 1;
            }
        }
        out
    }

    fn values(&self) -> impl Iterator<Item = &Coflow> {
        self.slots.iter().flatten().map(|e| &e.0)
    }
}

/// VOQ contents and the registry of coflows with packets in the switch.
#[derive(Debug, Clone)]
pub struct SwitchState {
    n: usize,
    slot: Slot,
    voq: Vec<u32>,
    /// Per-VOQ coflow order by arrival. Entries whose coflow has no packet
    /// left in that VOQ are dropped lazily.
    queues: Vec<VecDeque<CoflowId>>,
    registry: Registry,
    backlog: u64,
}

impl SwitchState {
    pub fn new(n: usize) -> Self {
        SwitchState {
            n,
            slot: 0,
            voq: vec![0; n * n],
            queues: vec![VecDeque::new(); n * n],
            registry: Registry::default(),
            backlog: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn slot(&self) -> Slot {
        self.slot
    }

    pub fn voq_len(&self, i: usize, j: usize) -> u32 {
        self.voq[i * self.n + j]
    }

    /// Queue lengths Q_ij, row-major.
    pub fn voq_lengths(&self) -> &[u32] {
        &self.voq
    }

    pub fn backlog(&self) -> u64 {
        self.backlog
    }

    pub fn coflow(&self, id: CoflowId) -> Option<&Coflow> {
        self.registry.get(id).map(|e| &e.0)
    }

    pub fn active_coflows(&self) -> usize {
        self.registry.len
    }

    fn live(&self, id: CoflowId, i: usize, j: usize) -> bool {
        self.registry
            .get(id)
            .is_some_and(|e| e.0.remaining().get(i, j) > 0)
    }

    /// Earliest-arrived coflow with a packet in VOQ (i, j).
    pub fn fifo_head(&self, i: usize, j: usize) -> Option<CoflowId> {
        self.queues[i * self.n + j]
            .iter()
            .copied()
            .find(|&id| self.live(id, i, j))
    }

    /// Coflows with a packet in VOQ (i, j), in arrival order.
    pub fn queue_ids(&self, i: usize, j: usize) -> impl Iterator<Item = CoflowId> + '_ {
        self.queues[i * self.n + j]
            .iter()
            .copied()
            .filter(move |&id| self.live(id, i, j))
    }

    /// Adds a coflow's packets to the VOQs. All-zero coflows are not stored.
    pub fn inject(&mut self, coflow: Coflow) {
        assert_eq!(coflow.n(), self.n, "coflow size mismatch");
        if coflow.remaining_total() == 0 {
            return;
        }
        for (i, j, x) in coflow.remaining().nonzeros() {
            self.voq[i * self.n + j] += x;
            self.queues[i * self.n + j].push_back(coflow.id);
        }
        self.backlog += coflow.remaining_total();
        self.registry.insert(coflow);
    }

    /// Transmits one packet of `id` from VOQ (i, j); true when `id` finished.
    fn serve(&mut self, i: usize, j: usize, id: CoflowId, slot: Slot) -> Result<bool, TrafficError> {
        let (c, delay_sum) = self
            .registry
            .get_mut(id)
            .ok_or(TrafficError::NothingToServe { id, i, j })?;
        let done = c.serve(i, j, slot)?;
        *delay_sum += slot - c.arrival_slot + 1;
        let k = i * self.n + j;
        self.voq[k] -= 1;
        self.backlog -= 1;
        while let Some(&front) = self.queues[k].front() {
            if self.live(front, i, j) {
                break;
            }
            self.queues[k].pop_front();
        }
        Ok(done)
    }

    /// Drops a coflow; returns it with the sum of its packet delays.
    fn remove(&mut self, id: CoflowId) -> Option<(Coflow, u64)> {
        self.registry.remove(id)
    }

    /// Q_ij equals the sum of remaining packets over registered coflows.
    pub fn check_conservation(&self) -> bool {
        let mut sum = vec![0u64; self.n * self.n];
        for c in self.registry.values() {
            for (i, j, x) in c.remaining().nonzeros() {
                sum[i * self.n + j] += x as u64;
            }
        }
        sum.iter().zip(&self.voq).all(|(a, &b)| *a == b as u64)
            && sum.iter().sum::<u64>() == self.backlog
    }
}

/// Delay of a completed coflow: completion - arrival + 1, or 0 for an
/// all-zero coflow.
pub fn coflow_delay(c: &Coflow) -> Result<u64, EngineError> {
    let done = c.completion_slot().ok_or(EngineError::Incomplete(c.id))?;
    if c.demand().is_zero() {
        return Ok(0);
    }
    Ok(done - c.arrival_slot + 1)
}

/// Nearest-rank percentile: the ceil(q n)-th smallest value.
pub fn percentile(values: &[u64], q: f64) -> Result<u64, EngineError> {
    if values.is_empty() {
        return Err(EngineError::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Ok(percentile_sorted(&sorted, q))
}

fn percentile_sorted(sorted: &[u64], q: f64) -> u64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Largest backlog growth rate still called stable, in packets per slot.
pub const STABILITY_SLOPE_THRESHOLD: f64 = 1e-3;

/// True iff the least-squares slope of backlog against time over the last
/// half of `trace` is at most `STABILITY_SLOPE_THRESHOLD`. Traces with
/// fewer than 10 samples are not judged stable.
pub fn stability_probe(trace: &[(Slot, f64)]) -> bool {
    if trace.len() < 10 {
        return false;
    }
    let tail = &trace[trace.len() / 2..];
    backlog_slope(tail) <= STABILITY_SLOPE_THRESHOLD
}

/// Ordinary least-squares slope of backlog against slot.
pub fn backlog_slope(trace: &[(Slot, f64)]) -> f64 {
    let m = trace.len() as f64;
    let mx = trace.iter().map(|p| p.0 as f64).sum::<f64>() / m;
    let my = trace.iter().map(|p| p.1).sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in trace {
        let dx = x as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// A coflow that finished during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedCoflow {
    pub id: CoflowId,
    pub arrival_slot: Slot,
    pub completion_slot: Slot,
    pub delay: u64,
    pub packets: u64,
    pub packet_delay_sum: u64,
    pub clearance_time: u64,
    pub class: Option<CoflowClass>,
}

/// Aggregated statistics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub policy: String,
    pub n: usize,
    pub lambda: f64,
    pub beta: f64,
    pub rho: f64,
    pub seed: u64,
    pub horizon: u64,
    pub warmup: u64,
    pub frame_size: Option<u64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub sctf: Option<bool>,
    pub dynamic_frames: Option<bool>,
    /// Coflows arriving after warmup that completed before the horizon.
    pub completed: u64,
    /// Coflows arriving after warmup still incomplete at the horizon.
    pub censored: u64,
    pub mean_coflow_delay: Option<f64>,
    pub coflow_delay_percentiles: Vec<(f64, u64)>,
    pub mean_packet_delay: Option<f64>,
    /// Mean delay of nonempty coflows over mean packet delay. A ratio of
    /// averages, so it can dip below 1 when large coflows finish last.
    pub dilation: Option<f64>,
    pub eta: Option<f64>,
    pub overflow_freq: Option<f64>,
    pub frames: Option<u64>,
    pub mean_nonconforming_clearance: Option<f64>,
    pub max_conforming_delay: Option<u64>,
    pub conforming_delay_violations: Option<u64>,
    pub mean_voq_batch_wait: Option<f64>,
    pub voq_batches: u64,
    pub packets_arrived: u64,
    pub packets_served: u64,
    pub final_backlog: u64,
    pub stable: bool,
    pub backlog_trace: Vec<(Slot, f64)>,
}

impl MetricsRecord {
    pub fn percentile(&self, q: f64) -> Option<u64> {
        self.coflow_delay_percentiles
            .iter()
            .find(|(p, _)| (*p - q).abs() < 1e-12)
            .map(|p| p.1)
    }
}

/// Batch waiting times per VOQ under FIFO service: slots from a batch's
/// arrival until its first packet is transmitted.
#[derive(Debug, Clone)]
struct VoqWaitTracker {
    arrived: Vec<u64>,
    served: Vec<u64>,
    waiting: Vec<VecDeque<(u64, Slot)>>,
    count: u64,
    sum: u64,
}

impl VoqWaitTracker {
    fn new(n: usize) -> Self {
        VoqWaitTracker {
            arrived: vec![0; n * n],
            served: vec![0; n * n],
            waiting: vec![VecDeque::new(); n * n],
            count: 0,
            sum: 0,
        }
    }

    fn on_batch(&mut self, k: usize, size: u64, slot: Slot) {
        self.waiting[k].push_back((self.arrived[k], slot));
        self.arrived[k] += size;
    }

    fn on_packet(&mut self, k: usize, slot: Slot, warmup: Slot) {
        self.served[k] += 1;
        while let Some(&(first, arrival)) = self.waiting[k].front() {
            if first >= self.served[k] {
                break;
            }
            self.waiting[k].pop_front();
            if arrival >= warmup {
                self.count += 1;
                self.sum += slot - arrival;
            }
        }
    }
}

/// A simulation in progress.
pub struct Simulation {
    config: SimConfig,
    state: SwitchState,
    policy: Box<dyn SchedulerPolicy>,
    arrivals_rng: ChaCha8Rng,
    sizes_rng: ChaCha8Rng,
    generate: bool,
    next_id: u64,
    injected: Vec<Coflow>,
    completed: Vec<CompletedCoflow>,
    packets_arrived: u64,
    packets_served: u64,
    trace: Vec<(Slot, f64)>,
    trace_acc: (u64, u64),
    voq_wait: Option<VoqWaitTracker>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let rho = config.model.rho();
        if config.metrics.stationary && rho >= 1.0 {
            return Err(EngineError::Supercritical(rho));
        }
        let policy = build_policy(&config)?;
        Ok(Self::with_policy(config, policy))
    }

    /// Uses a caller-supplied policy object instead of `config.policy`.
    pub fn with_policy(config: SimConfig, policy: Box<dyn SchedulerPolicy>) -> Self {
        let n = config.n();
        Simulation {
            arrivals_rng: stream_rng(config.seed, streams::ARRIVALS),
            sizes_rng: stream_rng(config.seed, streams::SIZES),
            state: SwitchState::new(n),
            policy,
            generate: true,
            next_id: 0,
            injected: Vec::new(),
            completed: Vec::new(),
            packets_arrived: 0,
            packets_served: 0,
            trace: Vec::new(),
            trace_acc: (0, 0),
            voq_wait: config.metrics.voq_wait.then(|| VoqWaitTracker::new(n)),
            config,
        }
    }

    /// Turns random arrivals off; only injected coflows enter.
    pub fn without_arrivals(mut self) -> Self {
        self.generate = false;
        self
    }

    /// Queues a demand to arrive at the next simulated slot.
    pub fn inject(&mut self, demand: crate::traffic::TrafficMatrix) -> CoflowId {
        let id = CoflowId(self.next_id);
        self.next_id += 1;
        self.injected.push(Coflow::new(id, self.state.slot, demand));
        id
    }

    pub fn state(&self) -> &SwitchState {
        &self.state
    }

    pub fn policy(&self) -> &dyn SchedulerPolicy {
        self.policy.as_ref()
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn completed(&self) -> &[CompletedCoflow] {
        &self.completed
    }

    pub fn packets_arrived(&self) -> u64 {
        self.packets_arrived
    }

    pub fn packets_served(&self) -> u64 {
        self.packets_served
    }

    /// Runs one slot: arrivals, decision, transmission, completions.
    pub fn step(&mut self) -> Result<(), EngineError> {
        let slot = self.state.slot;
        self.policy.begin_slot(slot, &self.state);

        let mut arrivals = std::mem::take(&mut self.injected);
        for c in &mut arrivals {
            c.arrival_slot = slot;
        }
        if self.generate {
            arrivals.extend(sample_arrivals(
                &self.config.model,
                slot,
                &mut self.next_id,
                &mut self.arrivals_rng,
                &mut self.sizes_rng,
            ));
        }
        let mut ids = Vec::with_capacity(arrivals.len());
        for c in arrivals {
            let total = c.remaining_total();
            if total == 0 {
                self.completed.push(CompletedCoflow {
                    id: c.id,
                    arrival_slot: slot,
                    completion_slot: slot,
                    delay: 0,
                    packets: 0,
                    packet_delay_sum: 0,
                    clearance_time: 0,
                    class: None,
                });
                continue;
            }
            self.packets_arrived += total;
            if let Some(w) = &mut self.voq_wait {
                for (i, j, x) in c.demand().nonzeros() {
                    w.on_batch(i * self.state.n + j, x as u64, slot);
                }
            }
            ids.push(c.id);
            self.state.inject(c);
        }
        if !ids.is_empty() {
            self.policy.on_arrivals(slot, &ids, &self.state);
        }

        let matching = self.policy.decide(slot, &self.state);
        if matching.n() != self.state.n || !is_feasible(&matching) {
            return Err(EngineError::InfeasibleMatching {
                policy: self.policy.name(),
                slot,
            });
        }
        let warmup = self.config.warmup_slots();
        let mut finished = Vec::new();
        for (i, j) in matching.pairs() {
            if self.state.voq_len(i, j) == 0 {
                continue;
            }
            let Some(id) = self.policy.choose_packet(i, j, &self.state) else {
                continue;
            };
            if !self.state.live(id, i, j) {
                return Err(EngineError::BadPacketChoice {
                    policy: self.policy.name(),
                    id,
                    i,
                    j,
                    slot,
                });
            }
            if self.state.serve(i, j, id, slot)? {
                finished.push(id);
            }
            self.packets_served += 1;
            if let Some(w) = &mut self.voq_wait {
                w.on_packet(i * self.state.n + j, slot, warmup);
            }
        }
        finished.sort_unstable();
        for id in finished {
            let class = self.policy.coflow_class(id);
            self.policy.on_completion(id, slot);
            let (c, packet_delay_sum) = self.state.remove(id).expect("registered coflow");
            self.completed.push(CompletedCoflow {
                id,
                arrival_slot: c.arrival_slot,
                completion_slot: slot,
                delay: coflow_delay(&c)?,
                packets: c.demand().total(),
                packet_delay_sum,
                clearance_time: c.clearance_time(),
                class,
            });
        }

        debug_assert_eq!(
            self.packets_arrived,
            self.packets_served + self.state.backlog
        );
        #[cfg(debug_assertions)]
        if self.state.n <= 16 && slot % 4096 == 0 {
            debug_assert!(self.state.check_conservation());
        }

        if slot >= warmup {
            let points = self.config.metrics.trace_points.max(1) as u64;
            let every = ((self.config.horizon - warmup) / points).max(1);
            self.trace_acc.0 += self.state.backlog;
            self.trace_acc.1 += 1;
            if (slot - warmup + 1) % every == 0 {
                let (sum, cnt) = self.trace_acc;
                self.trace.push((slot, sum as f64 / cnt as f64));
                self.trace_acc = (0, 0);
            }
        }
        self.state.slot += 1;
        Ok(())
    }

    /// Steps until the configured horizon.
    pub fn run_to_horizon(&mut self) -> Result<(), EngineError> {
        while self.state.slot < self.config.horizon {
            self.step()?;
        }
        Ok(())
    }

    /// Metrics over coflows arriving at or after warmup.
    pub fn metrics(&self) -> MetricsRecord {
        let cfg = &self.config;
        let warmup = cfg.warmup_slots();
        let window: Vec<&CompletedCoflow> = self
            .completed
            .iter()
            .filter(|c| c.arrival_slot >= warmup)
            .collect();
        let censored = self
            .state
            .registry
            .values()
            .filter(|c| c.arrival_slot >= warmup)
            .count() as u64;
        let mut delays: Vec<u64> = window.iter().map(|c| c.delay).collect();
        delays.sort_unstable();
        let completed = delays.len() as u64;
        let mean_coflow_delay =
            (completed > 0).then(|| delays.iter().sum::<u64>() as f64 / completed as f64);
        let coflow_delay_percentiles = if delays.is_empty() {
            Vec::new()
        } else {
            cfg.metrics
                .percentiles
                .iter()
                .map(|&q| (q, percentile_sorted(&delays, q)))
                .collect()
        };
        let packets: u64 = window.iter().map(|c| c.packets).sum();
        let packet_delay: u64 = window.iter().map(|c| c.packet_delay_sum).sum();
        let mean_packet_delay = (packets > 0).then(|| packet_delay as f64 / packets as f64);
        let dilation = if cfg.metrics.dilation {
            let nonempty: Vec<&&CompletedCoflow> = window.iter().filter(|c| c.packets > 0).collect();
            match (nonempty.is_empty(), mean_packet_delay) {
                (false, Some(p)) if p > 0.0 => {
                    let m = nonempty.iter().map(|c| c.delay).sum::<u64>() as f64
                        / nonempty.len() as f64;
                    Some(m / p)
                }
                _ => None,
            }
        } else {
            None
        };

        let stats = self.policy.cab_stats();
        let params: Option<CabParameters> = self.policy.cab_parameters();
        let (frame_size, sctf, dynamic_frames) = match cfg.policy {
            PolicyConfig::Cab {
                frame_size,
                sctf,
                dynamic_frames,
            } => (
                frame_size.or(params.map(|p| p.frame_size)),
                Some(sctf),
                Some(dynamic_frames),
            ),
            _ => (None, None, None),
        };
        let conforming: Vec<u64> = self
            .completed
            .iter()
            .filter(|c| c.class == Some(CoflowClass::Conforming))
            .map(|c| c.delay)
            .collect();
        let (max_conforming_delay, conforming_delay_violations) = match frame_size {
            Some(t) => (
                conforming.iter().copied().max(),
                Some(conforming.iter().filter(|&&d| d > 2 * t).count() as u64),
            ),
            None => (None, None),
        };

        MetricsRecord {
            policy: cfg.policy.name().to_string(),
            n: cfg.n(),
            lambda: cfg.model.lambda,
            beta: cfg.model.beta(),
            rho: cfg.model.rho(),
            seed: cfg.seed,
            horizon: cfg.horizon,
            warmup,
            frame_size,
            gamma: params.map(|p| p.gamma),
            delta: params.map(|p| p.delta),
            sctf,
            dynamic_frames,
            completed,
            censored,
            mean_coflow_delay,
            coflow_delay_percentiles,
            mean_packet_delay,
            dilation,
            eta: stats.map(|s| s.eta()),
            overflow_freq: stats.map(|s| s.overflow_frequency()),
            frames: stats.map(|s| s.frames),
            mean_nonconforming_clearance: stats.map(|s| s.mean_non_conforming_clearance()),
            max_conforming_delay,
            conforming_delay_violations,
            mean_voq_batch_wait: self
                .voq_wait
                .as_ref()
                .and_then(|w| (w.count > 0).then(|| w.sum as f64 / w.count as f64)),
            voq_batches: self.voq_wait.as_ref().map_or(0, |w| w.count),
            packets_arrived: self.packets_arrived,
            packets_served: self.packets_served,
            final_backlog: self.state.backlog,
            stable: stability_probe(&self.trace),
            backlog_trace: self.trace.clone(),
        }
    }
}

/// Runs a configuration to its horizon.
pub fn run(config: &SimConfig) -> Result<MetricsRecord, EngineError> {
    let mut sim = Simulation::new(config.clone())?;
    sim.run_to_horizon()?;
    Ok(sim.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::clearance_schedule;
    use crate::matching::Matching;
    use crate::traffic::TrafficMatrix;

    fn x2() -> TrafficMatrix {
        TrafficMatrix::from_rows(&[[2, 1], [1, 2]]).unwrap()
    }

    fn config(n: usize, lambda: f64, policy: PolicyConfig, horizon: u64) -> SimConfig {
        SimConfig::new(CoflowModel::uniform_geometric(n, lambda, 2.5), policy, horizon, 7)
    }

    /// Replays a fixed list of matchings, then idles.
    struct Replay(Vec<Matching>, usize);

    impl SchedulerPolicy for Replay {
        fn name(&self) -> &'static str {
            "replay"
        }
        fn decide(&mut self, _slot: Slot, _state: &SwitchState) -> Matching {
            let n = self.1;
            self.0.get(_slot as usize).cloned().unwrap_or_else(|| Matching::idle(n))
        }
    }

    #[test]
    fn zero_rate_has_no_completions() {
        let m = run(&config(4, 0.0, PolicyConfig::randomized(), 1000)).unwrap();
        assert_eq!(m.completed, 0);
        assert_eq!(m.mean_coflow_delay, None);
        assert_eq!(m.mean_packet_delay, None);
        assert_eq!(m.dilation, None);
        assert!(m.coflow_delay_percentiles.is_empty());
    }

    #[test]
    fn replayed_clearance_gives_delay_tau() {
        let cfg = config(2, 0.0, PolicyConfig::periodic(), 10);
        let sched = clearance_schedule(&x2());
        let mut sim = Simulation::with_policy(cfg, Box::new(Replay(sched.matchings, 2))).without_arrivals();
        sim.inject(x2());
        for _ in 0..10 {
            sim.step().unwrap();
        }
        assert_eq!(sim.completed().len(), 1);
        assert_eq!(sim.completed()[0].delay, 3);
    }

    #[test]
    fn delay_convention() {
        let mut c = Coflow::new(CoflowId(0), 10, TrafficMatrix::from_rows(&[[1, 1], [0, 0]]).unwrap());
        assert!(matches!(coflow_delay(&c), Err(EngineError::Incomplete(_))));
        c.serve(0, 0, 11).unwrap();
        c.serve(0, 1, 12).unwrap();
        assert_eq!(coflow_delay(&c).unwrap(), 3);
        let z = Coflow::new(CoflowId(1), 4, TrafficMatrix::zeros(2));
        assert_eq!(coflow_delay(&z).unwrap(), 0);
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[5], 0.999).unwrap(), 5);
        let v: Vec<u64> = (1..=1000).collect();
        assert_eq!(percentile(&v, 0.999).unwrap(), 999);
        assert_eq!(percentile(&v, 0.5).unwrap(), 500);
        assert!(percentile(&[], 0.5).is_err());
    }

    #[test]
    fn stability_probe_examples() {
        let flat: Vec<(Slot, f64)> = (0..50).map(|t| (t * 10, 42.0)).collect();
        assert!(stability_probe(&flat));
        let growing: Vec<(Slot, f64)> = (0..50).map(|t| (t * 10, (t * 10) as f64)).collect();
        assert!(!stability_probe(&growing));
        assert!((backlog_slope(&growing) - 1.0).abs() < 1e-12);
        assert!(!stability_probe(&flat[..5]));
    }

    #[test]
    fn supercritical_stationary_run_is_refused() {
        let cfg = config(4, 0.42, PolicyConfig::randomized(), 100);
        assert!(matches!(Simulation::new(cfg.clone()), Err(EngineError::Supercritical(_))));
        let mut cfg = cfg;
        cfg.metrics.stationary = false;
        assert!(Simulation::new(cfg).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(4, 0.3, PolicyConfig::randomized(), 100);
        cfg.warmup = Some(100);
        assert!(cfg.validate().is_err());
        let cfg = config(4, 0.3, PolicyConfig::cab(Some(1), false, false), 100);
        assert!(cfg.validate().is_err());
    }

    struct Collide;

    impl SchedulerPolicy for Collide {
        fn name(&self) -> &'static str {
            "collide"
        }
        fn decide(&mut self, _: Slot, _: &SwitchState) -> Matching {
            Matching::from_assign(vec![Some(0), Some(0)])
        }
    }

    #[test]
    fn infeasible_matching_aborts() {
        let cfg = config(2, 0.3, PolicyConfig::randomized(), 10);
        let mut sim = Simulation::with_policy(cfg, Box::new(Collide));
        assert!(matches!(sim.step(), Err(EngineError::InfeasibleMatching { .. })));
    }

    #[test]
    fn conservation_and_queue_sanity() {
        for policy in [
            PolicyConfig::randomized(),
            PolicyConfig::periodic(),
            PolicyConfig::Mwm,
            PolicyConfig::cab(Some(40), true, true),
        ] {
            let mut sim = Simulation::new(config(6, 0.3, policy, 5000)).unwrap();
            for _ in 0..5000 {
                sim.step().unwrap();
                let s = sim.state();
                assert_eq!(sim.packets_arrived(), sim.packets_served() + s.backlog());
                if s.slot() % 97 == 0 {
                    assert!(s.check_conservation());
                }
            }
            for c in sim.completed() {
                assert!(c.delay >= c.clearance_time);
            }
        }
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        for policy in [PolicyConfig::randomized(), PolicyConfig::cab(Some(30), true, true)] {
            let cfg = config(8, 0.3, policy, 20_000);
            let a = run(&cfg).unwrap();
            let b = run(&cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn policy_choice_does_not_perturb_arrivals() {
        let a = run(&config(8, 0.3, PolicyConfig::randomized(), 5000)).unwrap();
        let b = run(&config(8, 0.3, PolicyConfig::periodic(), 5000)).unwrap();
        assert_eq!(a.packets_arrived, b.packets_arrived);
    }
}
