//! Discrete-event simulation of a replicated microservice.
//!
//! Time is integer microseconds. Requests are dispatched round-robin over
//! healthy instances, each of which serves its own FIFO queue. Crashed
//! instances and instances that miss a deadline are killed and respawned
//! after `respawn_delay`; a long waiting queue triggers scale-up.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedCrash {
    /// Seconds since simulation start.
    pub at: f64,
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub target_instances: usize,
    /// Mean time to crash per instance in seconds; `null` never crashes.
    pub mttf_mean: Option<f64>,
    pub service_time: f64,
    pub deadline: f64,
    pub respawn_delay: f64,
    pub scale_up_queue_threshold: usize,
    pub max_instances: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub crash_script: Vec<ScriptedCrash>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid simulation config: {0}")]
pub struct ConfigError(pub String);

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl ServiceSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError(m.to_string()));
        if self.target_instances < 1 {
            return err("target_instances must be >= 1");
        }
        if self.target_instances > self.max_instances {
            return err("target_instances must be <= max_instances");
        }
        if !(self.service_time.is_finite() && self.service_time >= 0.0) {
            return err("service_time must be finite and >= 0");
        }
        if !(self.deadline.is_finite() && self.deadline > self.service_time) {
            return err("deadline must exceed service_time");
        }
        if !positive(self.respawn_delay) {
            return err("respawn_delay must be > 0");
        }
        if let Some(m) = self.mttf_mean {
            if !positive(m) {
                return err("mttf_mean must be > 0 or null");
            }
        }
        for c in &self.crash_script {
            if !(c.at.is_finite() && c.at >= 0.0) {
                return err("crash_script times must be finite and >= 0");
            }
            if c.instance >= self.max_instances {
                return err("crash_script instance out of range");
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let spec: ServiceSpec = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        ServiceSpec::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub spec: ServiceSpec,
    pub arrival_rate: f64,
    pub duration: f64,
    pub seed: u64,
    pub arrivals: u64,
    pub completed: u64,
    pub failed: u64,
    /// Fraction of simulated time with at least one healthy instance.
    pub availability: f64,
    pub crashes: u64,
    pub slow_kills: u64,
    pub respawns: u64,
    pub scale_ups: u64,
    pub max_queue_len: usize,
    pub max_instances_seen: usize,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Declaration order is the tie-break order for simultaneous events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Arrival,
    Completion,
    Crash,
    SlowDetect,
    RespawnDone,
    ScaleUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: u64,
    kind: EventKind,
    instance: usize,
    seq: u64,
    /// Instance incarnation the event refers to.
    generation: u64,
    request: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Health {
    Healthy,
    Down,
}

#[derive(Debug, Clone, Copy)]
struct Request {
    id: u64,
}

#[derive(Debug)]
struct Instance {
    health: Health,
    generation: u64,
    busy: Option<Request>,
    queue: VecDeque<Request>,
}

pub fn secs_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

struct Sim<'a> {
    spec: &'a ServiceSpec,
    now: u64,
    events: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    instances: Vec<Instance>,
    balancer: VecDeque<Request>,
    cursor: usize,
    /// request id -> (instance, generation) for dispatched, unfinished requests
    outstanding: BTreeMap<u64, (usize, u64)>,
    crash_rng: ChaCha20Rng,
    crash_dist: Option<Exp<f64>>,
    scale_pending: bool,
    up_us: u64,
    last_t: u64,
    report: Counters,
}

#[derive(Default)]
struct Counters {
    arrivals: u64,
    completed: u64,
    failed: u64,
    crashes: u64,
    slow_kills: u64,
    respawns: u64,
    scale_ups: u64,
    max_queue_len: usize,
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: u64, kind: EventKind, instance: usize, generation: u64, request: u64) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(Reverse(Event { time, kind, instance, seq, generation, request }));
    }

    fn healthy_count(&self) -> usize {
        self.instances.iter().filter(|i| i.health == Health::Healthy).count()
    }

    fn queue_len(&self) -> usize {
        self.balancer.len() + self.instances.iter().map(|i| i.queue.len()).sum::<usize>()
    }

    fn bring_up(&mut self, id: usize) {
        let inst = &mut self.instances[id];
        inst.health = Health::Healthy;
        inst.generation += 1;
        let generation = inst.generation;
        if let Some(dist) = self.crash_dist {
            let dt = secs_to_us(dist.sample(&mut self.crash_rng)).max(1);
            self.push(self.now.saturating_add(dt), EventKind::Crash, id, generation, 0);
        }
        while let Some(req) = self.balancer.pop_front() {
            self.dispatch(req);
        }
    }

    fn kill(&mut self, id: usize) {
        let delay = secs_to_us(self.spec.respawn_delay);
        let inst = &mut self.instances[id];
        inst.health = Health::Down;
        let lost: Vec<Request> = inst.busy.take().into_iter().chain(inst.queue.drain(..)).collect();
        for r in lost {
            self.outstanding.remove(&r.id);
            self.report.failed += 1;
        }
        let generation = self.instances[id].generation;
        self.push(self.now + delay, EventKind::RespawnDone, id, generation, 0);
    }

    fn dispatch(&mut self, req: Request) {
        let n = self.instances.len();
        let pick = (0..n).map(|k| (self.cursor + k) % n).find(|&i| self.instances[i].health == Health::Healthy);
        let Some(id) = pick else {
            self.balancer.push_back(req);
            return;
        };
        self.cursor = (id + 1) % n;
        let generation = self.instances[id].generation;
        self.outstanding.insert(req.id, (id, generation));
        let deadline = self.now + secs_to_us(self.spec.deadline);
        self.push(deadline, EventKind::SlowDetect, id, generation, req.id);
        self.instances[id].queue.push_back(req);
        self.start_next(id);
    }

    fn start_next(&mut self, id: usize) {
        let inst = &mut self.instances[id];
        if inst.busy.is_some() || inst.health != Health::Healthy {
            return;
        }
        if let Some(req) = inst.queue.pop_front() {
            inst.busy = Some(req);
            let generation = inst.generation;
            let done = self.now + secs_to_us(self.spec.service_time);
            self.push(done, EventKind::Completion, id, generation, req.id);
        }
    }

    fn maybe_scale(&mut self) {
        let len = self.queue_len();
        self.report.max_queue_len = self.report.max_queue_len.max(len);
        if len > self.spec.scale_up_queue_threshold
            && !self.scale_pending
            && self.instances.len() < self.spec.max_instances
        {
            self.scale_pending = true;
            self.instances.push(Instance { health: Health::Down, generation: 0, busy: None, queue: VecDeque::new() });
            let id = self.instances.len() - 1;
            self.push(self.now + secs_to_us(self.spec.respawn_delay), EventKind::ScaleUp, id, 0, 0);
        }
    }

    fn live(&self, e: &Event) -> bool {
        let inst = &self.instances[e.instance];
        inst.health == Health::Healthy && inst.generation == e.generation
    }

    fn handle(&mut self, e: Event, arrivals: &mut ArrivalStream) {
        match e.kind {
            EventKind::Arrival => {
                self.report.arrivals += 1;
                self.dispatch(Request { id: e.request });
                if let Some(t) = arrivals.next_time(self.now) {
                    self.push(t, EventKind::Arrival, 0, 0, e.request + 1);
                }
            }
            EventKind::Completion => {
                if self.live(&e) && self.outstanding.remove(&e.request).is_some() {
                    self.report.completed += 1;
                    self.instances[e.instance].busy = None;
                    self.start_next(e.instance);
                }
            }
            EventKind::Crash => {
                if self.live(&e) {
                    self.report.crashes += 1;
                    self.kill(e.instance);
                }
            }
            EventKind::SlowDetect => {
                if self.live(&e) && self.outstanding.get(&e.request) == Some(&(e.instance, e.generation)) {
                    log::debug!("instance {} missed deadline for request {}", e.instance, e.request);
                    self.report.slow_kills += 1;
                    self.kill(e.instance);
                }
            }
            EventKind::RespawnDone => {
                self.report.respawns += 1;
                self.bring_up(e.instance);
            }
            EventKind::ScaleUp => {
                self.scale_pending = false;
                self.report.scale_ups += 1;
                self.bring_up(e.instance);
            }
        }
        self.maybe_scale();
    }
}

struct ArrivalStream {
    rng: ChaCha20Rng,
    dist: Option<Exp<f64>>,
}

impl ArrivalStream {
    fn next_time(&mut self, now: u64) -> Option<u64> {
        let dist = self.dist?;
        Some(now.saturating_add(secs_to_us(dist.sample(&mut self.rng))))
    }
}

pub fn simulate(spec: &ServiceSpec, arrival_rate: f64, duration: f64, seed: u64) -> Result<SimReport, ConfigError> {
    spec.validate()?;
    if !positive(duration) {
        return Err(ConfigError("duration must be > 0".into()));
    }
    if !(arrival_rate.is_finite() && arrival_rate >= 0.0) {
        return Err(ConfigError("arrival_rate must be finite and >= 0".into()));
    }
    let end = secs_to_us(duration);

    let mut arrival_rng = ChaCha20Rng::seed_from_u64(seed);
    arrival_rng.set_stream(0);
    let mut crash_rng = ChaCha20Rng::seed_from_u64(seed);
    crash_rng.set_stream(1);

    let mut arrivals = ArrivalStream {
        rng: arrival_rng,
        dist: (arrival_rate > 0.0).then(|| Exp::new(arrival_rate).expect("positive rate")),
    };
    let mut sim = Sim {
        spec,
        now: 0,
        events: BinaryHeap::new(),
        next_seq: 0,
        instances: Vec::new(),
        balancer: VecDeque::new(),
        cursor: 0,
        outstanding: BTreeMap::new(),
        crash_rng,
        crash_dist: spec.mttf_mean.map(|m| Exp::new(1.0 / m).expect("positive mttf")),
        scale_pending: false,
        up_us: 0,
        last_t: 0,
        report: Counters::default(),
    };
    for id in 0..spec.target_instances {
        sim.instances.push(Instance { health: Health::Down, generation: 0, busy: None, queue: VecDeque::new() });
        sim.bring_up(id);
    }
    for c in &spec.crash_script {
        // scripted crashes hit whatever incarnation is alive at that time
        sim.push(secs_to_us(c.at), EventKind::Crash, c.instance, u64::MAX, 0);
    }
    if let Some(t) = arrivals.next_time(0) {
        sim.push(t, EventKind::Arrival, 0, 0, 0);
    }

    let mut max_seen = sim.instances.len();
    while let Some(Reverse(mut e)) = sim.events.pop() {
        if e.time >= end {
            break;
        }
        if sim.healthy_count() > 0 {
            sim.up_us += e.time - sim.last_t;
        }
        sim.last_t = e.time;
        sim.now = e.time;
        if e.kind == EventKind::Crash && e.generation == u64::MAX {
            if e.instance >= sim.instances.len() {
                continue;
            }
            e.generation = sim.instances[e.instance].generation;
        }
        sim.handle(e, &mut arrivals);
        max_seen = max_seen.max(sim.instances.len());
    }
    if sim.healthy_count() > 0 {
        sim.up_us += end - sim.last_t;
    }

    let c = sim.report;
    Ok(SimReport {
        spec: spec.clone(),
        arrival_rate,
        duration,
        seed,
        arrivals: c.arrivals,
        completed: c.completed,
        failed: c.failed,
        availability: sim.up_us as f64 / end as f64,
        crashes: c.crashes,
        slow_kills: c.slow_kills,
        respawns: c.respawns,
        scale_ups: c.scale_ups,
        max_queue_len: c.max_queue_len,
        max_instances_seen: max_seen,
    })
}
