#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use coflow_switch::engine::{SimConfig, Simulation, SwitchState};
use coflow_switch::matching::Matching;
use coflow_switch::schedulers::{CoflowClass, SchedulerPolicy};
use coflow_switch::tuning::CabParameters;
use coflow_switch::traffic::{CoflowId, CoflowModel, Slot};

/// Lets a test keep a handle on a policy object that the simulation owns,
/// and logs every decision.
pub struct Shared<P> {
    pub inner: Arc<Mutex<P>>,
    pub decisions: Arc<Mutex<Vec<Matching>>>,
}

impl<P> Shared<P> {
    pub fn new(p: P) -> (Self, Arc<Mutex<P>>, Arc<Mutex<Vec<Matching>>>) {
        let inner = Arc::new(Mutex::new(p));
        let decisions = Arc::new(Mutex::new(Vec::new()));
        let s = Shared {
            inner: inner.clone(),
            decisions: decisions.clone(),
        };
        (s, inner, decisions)
    }
}

impl<P: SchedulerPolicy> SchedulerPolicy for Shared<P> {
    fn name(&self) -> &'static str {
        self.inner.lock().unwrap().name()
    }
    fn begin_slot(&mut self, slot: Slot, state: &SwitchState) {
        self.inner.lock().unwrap().begin_slot(slot, state)
    }
    fn on_arrivals(&mut self, slot: Slot, arrivals: &[CoflowId], state: &SwitchState) {
        self.inner.lock().unwrap().on_arrivals(slot, arrivals, state)
    }
    fn decide(&mut self, slot: Slot, state: &SwitchState) -> Matching {
        let m = self.inner.lock().unwrap().decide(slot, state);
        self.decisions.lock().unwrap().push(m.clone());
        m
    }
    fn choose_packet(&mut self, i: usize, j: usize, state: &SwitchState) -> Option<CoflowId> {
        self.inner.lock().unwrap().choose_packet(i, j, state)
    }
    fn on_completion(&mut self, id: CoflowId, slot: Slot) {
        self.inner.lock().unwrap().on_completion(id, slot)
    }
    fn coflow_class(&self, id: CoflowId) -> Option<CoflowClass> {
        self.inner.lock().unwrap().coflow_class(id)
    }
    fn cab_parameters(&self) -> Option<CabParameters> {
        self.inner.lock().unwrap().cab_parameters()
    }
}

pub fn uniform_config(n: usize, lambda: f64, horizon: u64, seed: u64) -> SimConfig {
    SimConfig::new(
        CoflowModel::uniform_geometric(n, lambda, 2.5),
        coflow_switch::engine::PolicyConfig::randomized(),
        horizon,
        seed,
    )
}

pub struct Harness<P> {
    pub sim: Simulation,
    pub policy: Arc<Mutex<P>>,
    pub decisions: Arc<Mutex<Vec<Matching>>>,
}

pub fn simulation_with<P: SchedulerPolicy + 'static>(config: SimConfig, policy: P) -> Harness<P> {
    let (shared, policy, decisions) = Shared::new(policy);
    Harness {
        sim: Simulation::with_policy(config, Box::new(shared)),
        policy,
        decisions,
    }
}
