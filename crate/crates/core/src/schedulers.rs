//! Scheduling policies: randomized, periodic, MWM and CAB.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::SwitchState;
use crate::matching::{bvn_decompose, clearance_schedule, max_weight_matching, BvnDecomposition, ClearanceSchedule, Matching, MatchingError};
use crate::traffic::{aggregate, Coflow, CoflowId, Slot};
use crate::tuning::CabParameters;

/// Whether CAB admitted a coflow to a frame batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoflowClass {
    Conforming,
    NonConforming,
}

/// Frame-level counters kept by CAB.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CabStats {
    pub frames: u64,
    pub overflow_frames: u64,
    pub conforming: u64,
    pub non_conforming: u64,
    /// Sum of clearance times of non-conforming coflows (their service
    /// time in frames).
    pub non_conforming_clearance: u64,
}

impl CabStats {
    pub fn overflow_frequency(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.overflow_frames as f64 / self.frames as f64
        }
    }

    /// Fraction of coflows that went to the FIFO queue.
    pub fn eta(&self) -> f64 {
        let total = self.conforming + self.non_conforming;
        if total == 0 {
            0.0
        } else {
            self.non_conforming as f64 / total as f64
        }
    }

    /// Mean FIFO service time in frames.
    pub fn mean_non_conforming_clearance(&self) -> f64 {
        if self.non_conforming == 0 {
            0.0
        } else {
            self.non_conforming_clearance as f64 / self.non_conforming as f64
        }
    }
}

/// Per-slot decision object driven by the engine.
///
/// Per slot the engine calls `begin_slot`, registers arrivals and reports
/// the nonempty ones through `on_arrivals`, calls `decide`, then
/// `choose_packet` once per activated nonempty VOQ, then `on_completion`
/// for each coflow that finished.
pub trait SchedulerPolicy: Send {
    fn name(&self) -> &'static str;

    fn begin_slot(&mut self, _slot: Slot, _state: &SwitchState) {}

    fn on_arrivals(&mut self, _slot: Slot, _arrivals: &[CoflowId], _state: &SwitchState) {}

    fn decide(&mut self, slot: Slot, state: &SwitchState) -> Matching;

    /// Coflow whose packet VOQ (i, j) transmits; FIFO by default.
    fn choose_packet(&mut self, i: usize, j: usize, state: &SwitchState) -> Option<CoflowId> {
        state.fifo_head(i, j)
    }

    fn on_completion(&mut self, _id: CoflowId, _slot: Slot) {}

    fn coflow_class(&self, _id: CoflowId) -> Option<CoflowClass> {
        None
    }

    fn cab_stats(&self) -> Option<&CabStats> {
        None
    }

    fn cab_parameters(&self) -> Option<CabParameters> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizedMode {
    /// Uniformly random full permutation every slot.
    #[default]
    Uniform,
    /// Sample matching k with probability p_k from a BvN decomposition of
    /// the rate matrix; the leftover probability idles the switch.
    Bvn,
}

pub struct RandomizedScheduler {
    n: usize,
    mode: RandomizedMode,
    decomposition: Option<BvnDecomposition>,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
}

impl RandomizedScheduler {
    pub fn uniform(n: usize, rng: ChaCha8Rng) -> Self {
        RandomizedScheduler {
            n,
            mode: RandomizedMode::Uniform,
            decomposition: None,
            rng,
            perm: (0..n).collect(),
        }
    }

    pub fn bvn(rate: &[Vec<f64>], rng: ChaCha8Rng) -> Result<Self, MatchingError> {
        let n = rate.len();
        Ok(RandomizedScheduler {
            n,
            mode: RandomizedMode::Bvn,
            decomposition: Some(bvn_decompose(rate)?),
            rng,
            perm: (0..n).collect(),
        })
    }
}

impl SchedulerPolicy for RandomizedScheduler {
    fn name(&self) -> &'static str {
        "randomized"
    }

    fn decide(&mut self, _slot: Slot, _state: &SwitchState) -> Matching {
        match self.mode {
            RandomizedMode::Uniform => {
                self.perm.shuffle(&mut self.rng);
                Matching::from_permutation(&self.perm)
            }
            RandomizedMode::Bvn => {
                let d = self.decomposition.as_ref().expect("decomposition");
                let mut u: f64 = self.rng.random();
                for (m, &p) in d.matchings.iter().zip(&d.probabilities) {
                    if u < p {
                        return m.clone();
                    }
                    u -= p;
                }
                Matching::idle(self.n)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodicMode {
    /// Input i serves output (i + 1 + t) mod N at slot t (0-indexed ports).
    #[default]
    Uniform,
    /// Deterministic cycle through a BvN decomposition, each matching
    /// appearing with long-run frequency p_k (smooth weighted round robin).
    BvnCycle,
}

pub struct PeriodicScheduler {
    n: usize,
    mode: PeriodicMode,
    decomposition: Option<BvnDecomposition>,
    credit: Vec<f64>,
}

impl PeriodicScheduler {
    pub fn uniform(n: usize) -> Self {
        PeriodicScheduler {
            n,
            mode: PeriodicMode::Uniform,
            decomposition: None,
            credit: Vec::new(),
        }
    }

    pub fn bvn_cycle(rate: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let d = bvn_decompose(rate)?;
        let k = d.matchings.len();
        Ok(PeriodicScheduler {
            n: rate.len(),
            mode: PeriodicMode::BvnCycle,
            decomposition: Some(d),
            credit: vec![0.0; k + 1],
        })
    }

    /// The rotation used in uniform mode.
    pub fn rotation(n: usize, slot: Slot) -> Matching {
        let shift = (slot % n as u64) as usize;
        Matching::from_permutation(&(0..n).map(|i| (i + 1 + shift) % n).collect::<Vec<_>>())
    }
}

impl SchedulerPolicy for PeriodicScheduler {
    fn name(&self) -> &'static str {
        "periodic"
    }

    fn decide(&mut self, slot: Slot, _state: &SwitchState) -> Matching {
        match self.mode {
            PeriodicMode::Uniform => Self::rotation(self.n, slot),
            PeriodicMode::BvnCycle => {
                let d = self.decomposition.as_ref().expect("decomposition");
                let idle = (1.0 - d.total_probability()).max(0.0);
                let weights = d.probabilities.iter().copied().chain(std::iter::once(idle));
                let mut best = 0;
                for (k, w) in weights.enumerate() {
                    self.credit[k] += w;
                    if self.credit[k] > self.credit[best] {
                        best = k;
                    }
                }
                let total: f64 = d.total_probability() + idle;
                self.credit[best] -= total;
                d.matchings.get(best).cloned().unwrap_or_else(|| Matching::idle(self.n))
            }
        }
    }
}

/// Maximum-weight matching of the queue-length matrix every slot.
pub struct MwmScheduler {
    n: usize,
}

impl MwmScheduler {
    pub fn new(n: usize) -> Self {
        MwmScheduler { n }
    }
}

impl SchedulerPolicy for MwmScheduler {
    fn name(&self) -> &'static str {
        "mwm"
    }

    fn decide(&mut self, _slot: Slot, state: &SwitchState) -> Matching {
        let n = self.n;
        let weights: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| state.voq_len(i, j) as f64).collect())
            .collect();
        max_weight_matching(&weights)
    }
}

/// Splits a frame's arrivals into the conforming batch and the rest.
///
/// Coflows are scanned by (arrival slot, id); each is admitted iff the
/// running aggregate keeps clearance time at most `t - 1`. Scanning
/// continues past rejections.
pub fn cab_select_conforming(frame_coflows: &[&Coflow], t: u64) -> (Vec<CoflowId>, Vec<CoflowId>) {
    let mut order: Vec<&Coflow> = frame_coflows.to_vec();
    order.sort_by_key(|c| (c.arrival_slot, c.id));
    let Some(first) = order.first() else {
        return (Vec::new(), Vec::new());
    };
    let n = first.n();
    let mut rows = vec![0u64; n];
    let mut cols = vec![0u64; n];
    let limit = t.saturating_sub(1);
    let (mut conforming, mut rest) = (Vec::new(), Vec::new());
    for c in order {
        let fits = rows.iter().zip(c.row_sums()).all(|(a, b)| a + b <= limit)
            && cols.iter().zip(c.col_sums()).all(|(a, b)| a + b <= limit);
        if fits {
            rows.iter_mut().zip(c.row_sums()).for_each(|(a, b)| *a += b);
            cols.iter_mut().zip(c.col_sums()).for_each(|(a, b)| *a += b);
            conforming.push(c.id);
        } else {
            rest.push(c.id);
        }
    }
    (conforming, rest)
}

/// Ordering key for packet selection among coflows sharing a VOQ: smallest
/// clearance time first (when `sctf`), then earliest arrival, then id.
pub fn packet_priority(c: &Coflow, sctf: bool) -> (u64, Slot, CoflowId) {
    (if sctf { c.clearance_time() } else { 0 }, c.arrival_slot, c.id)
}

/// Picks the coflow to serve from `candidates`.
pub fn sctf_choose_packet<'a, I>(candidates: I, sctf: bool) -> Option<CoflowId>
where
    I: IntoIterator<Item = &'a Coflow>,
{
    candidates
        .into_iter()
        .min_by_key(|c| packet_priority(c, sctf))
        .map(|c| c.id)
}

/// Dynamic frame rule: start a new frame now.
pub fn dynamic_frame_check(phase: u64, batch_remaining: usize, fifo_len: usize) -> bool {
    phase > 0 && batch_remaining == 0 && fifo_len == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Serving {
    Idle,
    Batch,
    Fifo(CoflowId),
}

struct FifoEntry {
    id: CoflowId,
    schedule: ClearanceSchedule,
    cursor: usize,
}

/// Frame-based CAB scheduler.
pub struct CabScheduler {
    n: usize,
    t: u64,
    sctf: bool,
    dynamic_frames: bool,
    params: Option<CabParameters>,
    frame_start: Option<Slot>,
    pending: Vec<CoflowId>,
    batch: Option<ClearanceSchedule>,
    batch_cursor: usize,
    batch_queues: Vec<VecDeque<CoflowId>>,
    fifo: VecDeque<FifoEntry>,
    serving: Serving,
    class: HashMap<CoflowId, CoflowClass>,
    stats: CabStats,
    frame_starts: Vec<Slot>,
    record_frames: bool,
}

impl CabScheduler {
    pub fn new(n: usize, frame_size: u64, sctf: bool, dynamic_frames: bool) -> Self {
        assert!(frame_size >= 2, "CAB frame size must be >= 2");
        CabScheduler {
            n,
            t: frame_size,
            sctf,
            dynamic_frames,
            params: None,
            frame_start: None,
            pending: Vec::new(),
            batch: None,
            batch_cursor: 0,
            batch_queues: vec![VecDeque::new(); n * n],
            fifo: VecDeque::new(),
            serving: Serving::Idle,
            class: HashMap::new(),
            stats: CabStats::default(),
            frame_starts: Vec::new(),
            record_frames: false,
        }
    }

    pub fn with_parameters(n: usize, params: CabParameters, sctf: bool, dynamic_frames: bool) -> Self {
        let mut s = Self::new(n, params.frame_size, sctf, dynamic_frames);
        s.params = Some(params);
        s
    }

    /// Keep the start slot of every frame (for tests).
    pub fn record_frame_starts(mut self) -> Self {
        self.record_frames = true;
        self
    }

    pub fn frame_starts(&self) -> &[Slot] {
        &self.frame_starts
    }

    pub fn frame_size(&self) -> u64 {
        self.t
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    pub fn batch_remaining(&self) -> usize {
        self.batch
            .as_ref()
            .map_or(0, |b| b.len() - self.batch_cursor)
    }

    fn start_frame(&mut self, slot: Slot, state: &SwitchState) {
        self.stats.frames += 1;
        self.frame_start = Some(slot);
        if self.record_frames {
            self.frame_starts.push(slot);
        }
        self.batch = None;
        self.batch_cursor = 0;
        for q in &mut self.batch_queues {
            q.clear();
        }
        let arrived: Vec<&Coflow> = self
            .pending
            .drain(..)
            .filter_map(|id| state.coflow(id))
            .collect();
        let (conforming, rest) = cab_select_conforming(&arrived, self.t);
        let by_id: HashMap<CoflowId, &Coflow> = arrived.iter().map(|c| (c.id, *c)).collect();

        if !conforming.is_empty() {
            let members: Vec<&Coflow> = conforming.iter().map(|id| by_id[id]).collect();
            let agg = aggregate(self.n, members.iter().map(|c| c.demand())).expect("same size");
            let mut ordered = members.clone();
            ordered.sort_by_key(|c| packet_priority(c, self.sctf));
            for c in &ordered {
                for (i, j, _) in c.demand().nonzeros() {
                    self.batch_queues[i * self.n + j].push_back(c.id);
                }
            }
            self.batch = Some(clearance_schedule(&agg));
            for id in &conforming {
                self.class.insert(*id, CoflowClass::Conforming);
            }
            self.stats.conforming += conforming.len() as u64;
        }
        if !rest.is_empty() {
            self.stats.overflow_frames += 1;
            for id in rest {
                let c = by_id[&id];
                self.stats.non_conforming += 1;
                self.stats.non_conforming_clearance += c.clearance_time();
                self.class.insert(id, CoflowClass::NonConforming);
                self.fifo.push_back(FifoEntry {
                    id,
                    schedule: clearance_schedule(c.demand()),
                    cursor: 0,
                });
            }
        }
    }
}

impl SchedulerPolicy for CabScheduler {
    fn name(&self) -> &'static str {
        "cab"
    }

    fn begin_slot(&mut self, slot: Slot, state: &SwitchState) {
        match self.frame_start {
            None => {
                self.frame_start = Some(slot);
                if self.record_frames {
                    self.frame_starts.push(slot);
                }
            }
            Some(start) => {
                let phase = slot - start;
                let rollover = phase >= self.t
                    || (self.dynamic_frames
                        && dynamic_frame_check(phase, self.batch_remaining(), self.fifo.len()));
                if rollover {
                    self.start_frame(slot, state);
                }
            }
        }
    }

    fn on_arrivals(&mut self, _slot: Slot, arrivals: &[CoflowId], _state: &SwitchState) {
        self.pending.extend_from_slice(arrivals);
    }

    fn decide(&mut self, slot: Slot, _state: &SwitchState) -> Matching {
        let phase = slot - self.frame_start.expect("begin_slot ran");
        self.serving = Serving::Idle;
        if phase == self.t - 1 {
            if let Some(head) = self.fifo.front_mut() {
                let m = head.schedule.matchings[head.cursor].clone();
                head.cursor += 1;
                self.serving = Serving::Fifo(head.id);
                if head.cursor == head.schedule.len() {
                    self.fifo.pop_front();
                }
                return m;
            }
            return Matching::idle(self.n);
        }
        if let Some(batch) = &self.batch {
            if self.batch_cursor < batch.len() {
                let m = batch.matchings[self.batch_cursor].clone();
                self.batch_cursor += 1;
                self.serving = Serving::Batch;
                return m;
            }
        }
        Matching::idle(self.n)
    }

    fn choose_packet(&mut self, i: usize, j: usize, state: &SwitchState) -> Option<CoflowId> {
        match self.serving {
            Serving::Idle => None,
            Serving::Fifo(id) => Some(id),
            Serving::Batch => {
                let q = &mut self.batch_queues[i * self.n + j];
                while let Some(&id) = q.front() {
                    match state.coflow(id) {
                        Some(c) if c.remaining().get(i, j) > 0 => return Some(id),
                        _ => {
                            q.pop_front();
                        }
                    }
                }
                None
            }
        }
    }

    fn on_completion(&mut self, id: CoflowId, _slot: Slot) {
        self.class.remove(&id);
    }

    fn coflow_class(&self, id: CoflowId) -> Option<CoflowClass> {
        self.class.get(&id).copied()
    }

    fn cab_stats(&self) -> Option<&CabStats> {
        Some(&self.stats)
    }

    fn cab_parameters(&self) -> Option<CabParameters> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SwitchState;
    use crate::matching::is_feasible;
    use crate::traffic::TrafficMatrix;
    use rand::SeedableRng;

    fn coflow(id: u64, arrival: Slot, rows: &[&[u32]]) -> Coflow {
        Coflow::new(CoflowId(id), arrival, TrafficMatrix::from_rows(rows).unwrap())
    }

    #[test]
    fn selection_all_fit() {
        let a = coflow(0, 0, &[&[1, 0], &[0, 1]]);
        let b = coflow(1, 1, &[&[0, 1], &[1, 0]]);
        let (c, r) = cab_select_conforming(&[&a, &b], 4);
        assert_eq!(c, vec![CoflowId(0), CoflowId(1)]);
        assert!(r.is_empty());
    }

    #[test]
    fn selection_rejects_coflow_of_clearance_t() {
        let big = coflow(3, 0, &[&[2, 2], &[0, 0]]);
        let (c, r) = cab_select_conforming(&[&big], 4);
        assert!(c.is_empty());
        assert_eq!(r, vec![CoflowId(3)]);
    }

    #[test]
    fn selection_continues_past_rejection() {
        // Arrival order a, b, c with T - 1 = 3: b does not fit after a, c does.
        let a = coflow(0, 0, &[&[2, 0], &[0, 0]]);
        let b = coflow(1, 0, &[&[2, 0], &[0, 0]]);
        let c = coflow(2, 1, &[&[0, 0], &[0, 3]]);
        let (conf, rest) = cab_select_conforming(&[&c, &b, &a], 4);
        assert_eq!(conf, vec![CoflowId(0), CoflowId(2)]);
        assert_eq!(rest, vec![CoflowId(1)]);
    }

    #[test]
    fn sctf_selection() {
        let a = coflow(0, 0, &[&[5, 0], &[0, 0]]);
        let b = coflow(1, 1, &[&[1, 1], &[0, 0]]);
        let c = coflow(2, 2, &[&[9, 0], &[0, 0]]);
        assert_eq!(sctf_choose_packet([&a, &b, &c], true), Some(CoflowId(1)));
        assert_eq!(sctf_choose_packet([&a, &b, &c], false), Some(CoflowId(0)));
        assert_eq!(sctf_choose_packet([&c], true), Some(CoflowId(2)));
        let early = coflow(7, 3, &[&[2, 0], &[0, 0]]);
        let late = coflow(4, 5, &[&[0, 2], &[0, 0]]);
        assert_eq!(sctf_choose_packet([&late, &early], true), Some(CoflowId(7)));
        assert_eq!(sctf_choose_packet(std::iter::empty::<&Coflow>(), true), None);
    }

    #[test]
    fn dynamic_frame_rule() {
        assert!(dynamic_frame_check(3, 0, 0));
        assert!(!dynamic_frame_check(3, 0, 1));
        assert!(!dynamic_frame_check(3, 2, 0));
        assert!(!dynamic_frame_check(0, 0, 0));
    }

    #[test]
    fn periodic_rotation_covers_each_pair_once() {
        let n = 4;
        let m0 = PeriodicScheduler::rotation(n, 0);
        // 1-indexed: input i -> ((i + 0) mod 4) + 1, i.e. 0-indexed i -> i + 1.
        for i in 0..n {
            assert_eq!(m0.output_of(i), Some((i + 1) % n));
        }
        for start in [0u64, 5, 17] {
            let mut seen = vec![0; n * n];
            for t in start..start + n as u64 {
                let m = PeriodicScheduler::rotation(n, t);
                assert!(is_feasible(&m));
                for (i, j) in m.pairs() {
                    seen[i * n + j] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn randomized_uniform_pair_frequency() {
        let n = 8;
        let state = SwitchState::new(n);
        let mut s = RandomizedScheduler::uniform(n, ChaCha8Rng::seed_from_u64(8));
        let slots = 100_000;
        let mut count = vec![0u64; n * n];
        for t in 0..slots {
            let m = s.decide(t, &state);
            assert!(is_feasible(&m));
            for (i, j) in m.pairs() {
                count[i * n + j] += 1;
            }
        }
        for c in count {
            let f = c as f64 / slots as f64;
            assert!((f - 0.125).abs() <= 0.005, "{f}");
        }
    }

    #[test]
    fn randomized_bvn_frequencies_dominate_rates() {
        let rate = vec![vec![0.3, 0.1, 0.0], vec![0.0, 0.5, 0.2], vec![0.4, 0.0, 0.3]];
        let state = SwitchState::new(3);
        let mut s = RandomizedScheduler::bvn(&rate, ChaCha8Rng::seed_from_u64(1)).unwrap();
        let slots = 200_000;
        let mut count = [0u64; 9];
        for t in 0..slots {
            for (i, j) in s.decide(t, &state).pairs() {
                count[i * 3 + j] += 1;
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let f = count[i * 3 + j] as f64 / slots as f64;
                assert!(f >= rate[i][j] - 0.005, "({i},{j}) {f}");
            }
        }
    }

    #[test]
    fn periodic_bvn_cycle_frequencies() {
        let rate = vec![vec![0.5, 0.25], vec![0.25, 0.5]];
        let state = SwitchState::new(2);
        let mut s = PeriodicScheduler::bvn_cycle(&rate).unwrap();
        let mut count = [0u64; 4];
        let slots = 4000;
        for t in 0..slots {
            for (i, j) in s.decide(t, &state).pairs() {
                count[i * 2 + j] += 1;
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let f = count[i * 2 + j] as f64 / slots as f64;
                assert!(f >= rate[i][j] - 1e-3);
            }
        }
    }

    #[test]
    fn mwm_picks_diagonal() {
        let mut state = SwitchState::new(2);
        state.inject(coflow(0, 0, &[&[2, 0], &[0, 3]]));
        let m = MwmScheduler::new(2).decide(0, &state);
        assert_eq!(m, Matching::identity(2));
    }
}
