//! Deterministic discrete-event simulation of priced heterogeneous resources
//! running meta-jobs for the broker.
//!
//! Each worker resource has `node_count` nodes that run one job at a time.
//! A job's wall time integrates its work over `nominal_speed × load(t)`,
//! where the load factor is piecewise constant and follows a seeded random
//! walk. The broker ticks every `tick_seconds`; between ticks, idle nodes
//! pull the next job assigned to their resource.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{MarketError, PricingModel, Registry, ServiceEntry, MEG_SERVICE};
use crate::recording::Recording;
use crate::scheduler::{
    tick, BrokerState, Notification, QoS, ResourceState, SchedulerError, Strategy,
};
use crate::wavelet::WaveletConfig;
use crate::workload::{
    execute_meta_job, generate_meta_jobs, JobId, MetaJob, MetaJobOutput, WorkloadError,
    WorkloadSpec,
};

pub const DEFAULT_DISPATCH_LATENCY: f64 = 1.0;
pub const DEFAULT_TICK_SECONDS: f64 = 60.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario has no worker resources")]
    NoWorkers,
    #[error("resource {host}: {reason}")]
    BadResource { host: String, reason: String },
    #[error("tick_seconds must be positive, got {0}")]
    BadTick(f64),
    #[error("dispatch latency must be non-negative, got {0}")]
    BadLatency(f64),
    #[error("price change for unknown host {0}")]
    UnknownHost(String),
    #[error("invalid scenario file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    #[serde(default)]
    pub seed: u64,
    pub step_seconds: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    /// Explicit factor per step; the last value holds afterwards. Replaces
    /// the random walk when non-empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<f64>,
}

impl LoadProfile {
    pub fn constant(factor: f64) -> Self {
        Self {
            seed: 0,
            step_seconds: 300.0,
            min_factor: factor,
            max_factor: factor,
            schedule: Vec::new(),
        }
    }

    pub fn default_walk() -> Self {
        Self {
            seed: 0,
            step_seconds: 300.0,
            min_factor: 0.6,
            max_factor: 1.0,
            schedule: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.step_seconds > 0.0 && self.step_seconds.is_finite()) {
            return Err(format!("load step must be positive, got {}", self.step_seconds));
        }
        if !(self.min_factor > 0.0 && self.min_factor <= self.max_factor && self.max_factor <= 1.0)
        {
            return Err(format!(
                "load factors must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.min_factor, self.max_factor
            ));
        }
        if let Some(f) = self
            .schedule
            .iter()
            .find(|&&f| !(f >= self.min_factor && f <= self.max_factor))
        {
            return Err(format!("scheduled load factor {f} outside [min, max]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub host: String,
    #[serde(default)]
    pub provider_id: Option<String>,
    /// Reference CPU-seconds per wall-second on one node.
    pub nominal_speed: f64,
    pub node_count: u32,
    pub price: f64,
    pub pricing_model: PricingModel,
    pub bandwidth_bytes_per_sec: f64,
    pub worker: bool,
    pub load_profile: LoadProfile,
}

impl ResourceSpec {
    fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: String| SimError::BadResource {
            host: self.host.clone(),
            reason,
        };
        if !(self.price >= 0.0 && self.price.is_finite()) {
            return Err(bad(format!("price must be non-negative, got {}", self.price)));
        }
        if self.worker {
            if !(self.nominal_speed > 0.0 && self.nominal_speed.is_finite()) {
                return Err(bad(format!("speed must be positive, got {}", self.nominal_speed)));
            }
            if self.node_count == 0 {
                return Err(bad("worker needs at least one node".into()));
            }
            if !(self.bandwidth_bytes_per_sec > 0.0) {
                return Err(bad("bandwidth must be positive".into()));
            }
        }
        self.load_profile.validate().map_err(bad)
    }

    fn service_entry(&self, published_at: u64) -> ServiceEntry {
        ServiceEntry {
            provider_id: self.provider_id.clone().unwrap_or_else(|| self.host.clone()),
            resource_host: self.host.clone(),
            pricing_model: self.pricing_model,
            price: self.price,
            service_name: MEG_SERVICE.to_string(),
            published_at,
        }
    }
}

/// A provider re-publishing its price part way through a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceChange {
    pub at_seconds: f64,
    pub host: String,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub resources: Vec<ResourceSpec>,
    pub workload: WorkloadSpec,
    pub qos: QoS,
    pub prestage: bool,
    /// Bytes of raw data each job needs; staged once per resource when
    /// `prestage` is set, otherwise transferred by every job.
    pub data_bytes: u64,
    #[serde(default = "default_tick")]
    pub tick_seconds: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_latency")]
    pub dispatch_latency: f64,
    /// How often the broker takes a fresh directory snapshot; every tick
    /// when unset.
    #[serde(default)]
    pub refresh_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub price_changes: Vec<PriceChange>,
}

fn default_tick() -> f64 {
    DEFAULT_TICK_SECONDS
}

fn default_latency() -> f64 {
    DEFAULT_DISPATCH_LATENCY
}

const TABLE2_JSON: &str = include_str!("../scenarios/table2.json");

impl Scenario {
    /// Five-resource testbed with 100 single-offset meta-jobs, a six-hour
    /// deadline and a 1990 G$ budget.
    pub fn table2() -> Self {
        serde_json::from_str(TABLE2_JSON).expect("bundled scenario is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.qos.strategy = strategy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.resources.iter().any(|r| r.worker) {
            return Err(SimError::NoWorkers);
        }
        for r in &self.resources {
            r.validate()?;
        }
        self.qos.validate()?;
        self.workload.validate()?;
        if !(self.tick_seconds > 0.0 && self.tick_seconds.is_finite()) {
            return Err(SimError::BadTick(self.tick_seconds));
        }
        if !(self.dispatch_latency >= 0.0 && self.dispatch_latency.is_finite()) {
            return Err(SimError::BadLatency(self.dispatch_latency));
        }
        for c in &self.price_changes {
            if !self.resources.iter().any(|r| r.host == c.host) {
                return Err(SimError::UnknownHost(c.host.clone()));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant load factor for one resource.
#[derive(Debug, Clone)]
pub struct LoadTrace {
    profile: LoadProfile,
    factors: Vec<f64>,
    rng: ChaCha8Rng,
}

impl LoadTrace {
    pub fn new(profile: &LoadProfile, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ profile.seed.rotate_left(32));
        rng.set_stream(stream);
        Self {
            profile: profile.clone(),
            factors: Vec::new(),
            rng,
        }
    }

    pub fn step_seconds(&self) -> f64 {
        self.profile.step_seconds
    }

    /// Factor during step `k`, i.e. on `[k·step, (k+1)·step)`.
    pub fn factor(&mut self, k: usize) -> f64 {
        let p = &self.profile;
        if !p.schedule.is_empty() {
            return p.schedule[k.min(p.schedule.len() - 1)];
        }
        let (lo, hi) = (p.min_factor, p.max_factor);
        while self.factors.len() <= k {
            let next = match self.factors.last() {
                _ if lo == hi => lo,
                None => self.rng.random_range(lo..=hi),
                Some(&prev) => {
                    let half = (hi - lo) / 2.0;
                    (prev + self.rng.random_range(-half..=half)).clamp(lo, hi)
                }
            };
            self.factors.push(next);
        }
        self.factors[k]
    }

    pub fn factor_at(&mut self, t: f64) -> f64 {
        self.factor((t / self.profile.step_seconds).floor() as usize)
    }

    /// Time at which `work` reference CPU-seconds started at `start` finish
    /// on a node of speed `speed`.
    pub fn finish_time(&mut self, start: f64, work: f64, speed: f64) -> f64 {
        let step = self.profile.step_seconds;
        let mut k = (start / step).floor() as usize;
        let mut t = start;
        let mut remaining = work;
        loop {
            let rate = speed * self.factor(k);
            let end = (k + 1) as f64 * step;
            let span = (end - t).max(0.0);
            if rate * span >= remaining {
                return t + remaining / rate;
            }
            remaining -= rate * span;
            t = end;
            k += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Tick {
        pending: usize,
        running: usize,
        completed: usize,
        feasible: Option<bool>,
    },
    Published {
        host: String,
        price: f64,
    },
    Assigned {
        job: JobId,
        host: String,
        price: f64,
        estimate: f64,
    },
    Reclaimed {
        job: JobId,
        host: String,
    },
    Dispatched {
        job: JobId,
        host: String,
    },
    PrestageDone {
        host: String,
    },
    Started {
        job: JobId,
        host: String,
    },
    Completed {
        job: JobId,
        host: String,
        cost: f64,
        cpu_seconds: f64,
        wall_seconds: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentLog {
    pub strategy: Strategy,
    pub deadline: f64,
    pub budget: f64,
    pub total_jobs: usize,
    pub workers: Vec<String>,
    pub events: Vec<Event>,
}

impl ExperimentLog {
    pub fn completions(&self) -> impl Iterator<Item = (&Event, JobId, &str, f64)> {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::Completed { job, host, cost, .. } => Some((e, *job, host.as_str(), *cost)),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> SummaryRow {
        summarize(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Phase {
    Price,
    Complete,
    Prestage,
    Arrive,
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pending {
    Price(usize),
    Complete { resource: usize, job: JobId },
    Prestage(usize),
    Arrive { resource: usize, job: JobId },
    Tick,
}

impl Pending {
    fn phase(&self) -> Phase {
        match self {
            Pending::Price(_) => Phase::Price,
            Pending::Complete { .. } => Phase::Complete,
            Pending::Prestage(_) => Phase::Prestage,
            Pending::Arrive { .. } => Phase::Arrive,
            Pending::Tick => Phase::Tick,
        }
    }
}

#[derive(Debug)]
struct Queued {
    t: f64,
    seq: u64,
    what: Pending,
}

impl Queued {
    fn key(&self) -> (f64, Phase, u64) {
        (self.t, self.what.phase(), self.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed so BinaryHeap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, pa, sa) = self.key();
        let (b, pb, sb) = other.key();
        b.total_cmp(&a).then(pb.cmp(&pa)).then(sb.cmp(&sa))
    }
}

struct Node {
    spec_index: usize,
    free: u32,
    ready: bool,
    backlog: VecDeque<JobId>,
    load: LoadTrace,
}

struct Agreed {
    price: f64,
    model: PricingModel,
    dispatched_at: f64,
}

struct Engine<'a> {
    scenario: &'a Scenario,
    jobs: BTreeMap<JobId, MetaJob>,
    broker: BrokerState,
    registry: Registry,
    nodes: Vec<Node>,
    agreed: HashMap<JobId, Agreed>,
    heap: BinaryHeap<Queued>,
    seq: u64,
    events: Vec<Event>,
    future_work: usize,
}

fn millis(t: f64) -> u64 {
    (t * 1000.0).round().max(0.0) as u64
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let jobs = generate_meta_jobs(&scenario.workload)?;
        let mut registry = Registry::in_memory();
        for r in &scenario.resources {
            registry.publish(r.service_entry(0))?;
        }
        let mut states = Vec::new();
        let mut nodes = Vec::new();
        for (i, r) in scenario.resources.iter().enumerate().filter(|(_, r)| r.worker) {
            states.push(ResourceState::new(
                r.host.clone(),
                r.nominal_speed,
                r.node_count,
                r.pricing_model,
                r.price,
            )?);
            nodes.push(Node {
                spec_index: i,
                free: r.node_count,
                ready: !scenario.prestage,
                backlog: VecDeque::new(),
                load: LoadTrace::new(&r.load_profile, scenario.seed, i as u64),
            });
        }
        let broker = BrokerState::new(scenario.qos, jobs.iter().cloned(), states)?;
        Ok(Self {
            scenario,
            jobs: jobs.into_iter().map(|j| (j.id, j)).collect(),
            broker,
            registry,
            nodes,
            agreed: HashMap::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            events: Vec::new(),
            future_work: 0,
        })
    }

    fn schedule(&mut self, t: f64, what: Pending) {
        if !matches!(what, Pending::Tick) {
            self.future_work += 1;
        }
        self.heap.push(Queued {
            t,
            seq: self.seq,
            what,
        });
        self.seq += 1;
    }

    fn emit(&mut self, t: f64, kind: EventKind) {
        self.events.push(Event { t, kind });
    }

    fn spec(&self, node: usize) -> &ResourceSpec {
        &self.scenario.resources[self.nodes[node].spec_index]
    }

    fn node_of(&self, host: &str) -> Option<usize> {
        (0..self.nodes.len()).find(|&n| self.spec(n).host == host)
    }

    fn try_dispatch(&mut self, n: usize, now: f64) {
        while self.nodes[n].ready && self.nodes[n].free > 0 {
            let Some(job) = self.nodes[n].backlog.pop_front() else { break };
            self.nodes[n].free -= 1;
            let host = self.spec(n).host.clone();
            if let Some(a) = self.agreed.get_mut(&job) {
                a.dispatched_at = now;
            }
            self.broker.notify(Notification::Dispatched {
                job_id: job,
                host: host.clone(),
            });
            self.emit(now, EventKind::Dispatched { job, host });
            self.schedule(now + self.scenario.dispatch_latency, Pending::Arrive { resource: n, job });
        }
    }

    fn on_arrive(&mut self, n: usize, job: JobId, now: f64) {
        let spec = self.spec(n).clone();
        self.emit(
            now,
            EventKind::Started {
                job,
                host: spec.host.clone(),
            },
        );
        let transfer = if self.scenario.prestage {
            0.0
        } else {
            self.scenario.data_bytes as f64 / spec.bandwidth_bytes_per_sec
        };
        let work = self.jobs[&job].work_units;
        let done = self.nodes[n].load.finish_time(now + transfer, work, spec.nominal_speed);
        self.schedule(done, Pending::Complete { resource: n, job });
    }

    fn on_complete(&mut self, n: usize, job: JobId, now: f64) {
        let spec = self.spec(n).clone();
        let cpu_seconds = self.jobs[&job].work_units / spec.nominal_speed;
        let agreed = self.agreed.remove(&job).expect("completed job has an agreed price");
        let cost = match agreed.model {
            PricingModel::CpuSec => agreed.price * cpu_seconds,
            PricingModel::Ao => agreed.price,
        };
        let wall_seconds = now - agreed.dispatched_at;
        self.emit(
            now,
            EventKind::Completed {
                job,
                host: spec.host.clone(),
                cost,
                cpu_seconds,
                wall_seconds,
            },
        );
        self.broker.notify(Notification::Completed {
            job_id: job,
            host: spec.host,
            wall_seconds,
            cpu_seconds,
            cost,
            at: now,
        });
        self.nodes[n].free += 1;
        self.try_dispatch(n, now);
    }

    fn on_price(&mut self, idx: usize, now: f64) -> Result<(), SimError> {
        let change = &self.scenario.price_changes[idx];
        let spec = self
            .scenario
            .resources
            .iter()
            .find(|r| r.host == change.host)
            .expect("validated host");
        let mut entry = spec.service_entry(millis(now));
        entry.price = change.price;
        self.registry.publish(entry)?;
        self.emit(
            now,
            EventKind::Published {
                host: change.host.clone(),
                price: change.price,
            },
        );
        Ok(())
    }

    fn on_tick(&mut self, now: f64, snapshot: &crate::market::RegistrySnapshot) -> bool {
        let outcome = tick(&mut self.broker, now, snapshot);
        let before: HashMap<JobId, String> = outcome.reclaimed.iter().cloned().collect();
        let after: HashMap<JobId, &str> = outcome
            .assignments
            .iter()
            .map(|a| (a.job_id, a.host.as_str()))
            .collect();
        for node in &mut self.nodes {
            node.backlog.retain(|j| !before.contains_key(j));
        }
        for (job, host) in &outcome.reclaimed {
            self.agreed.remove(job);
            if after.get(job) != Some(&host.as_str()) {
                self.emit(
                    now,
                    EventKind::Reclaimed {
                        job: *job,
                        host: host.clone(),
                    },
                );
            }
        }
        for a in &outcome.assignments {
            let n = self.node_of(&a.host).expect("broker hosts are workers");
            self.nodes[n].backlog.push_back(a.job_id);
            self.agreed.insert(
                a.job_id,
                Agreed {
                    price: a.price,
                    model: a.pricing_model,
                    dispatched_at: now,
                },
            );
            if before.get(&a.job_id) != Some(&a.host) {
                self.emit(
                    now,
                    EventKind::Assigned {
                        job: a.job_id,
                        host: a.host.clone(),
                        price: a.price,
                        estimate: a.estimate,
                    },
                );
            }
        }
        let running = self.broker.in_flight();
        self.emit(
            now,
            EventKind::Tick {
                pending: self.broker.pending.len(),
                running,
                completed: self.broker.completed,
                feasible: outcome.feasible,
            },
        );
        for n in 0..self.nodes.len() {
            self.try_dispatch(n, now);
        }
        !outcome.assignments.is_empty()
    }

    fn run(mut self) -> Result<ExperimentLog, SimError> {
        let s = self.scenario;
        for (i, c) in s.price_changes.iter().enumerate() {
            self.schedule(c.at_seconds.max(0.0), Pending::Price(i));
        }
        if s.prestage {
            for n in 0..self.nodes.len() {
                let bw = self.spec(n).bandwidth_bytes_per_sec;
                self.schedule(s.data_bytes as f64 / bw, Pending::Prestage(n));
            }
        }
        self.schedule(0.0, Pending::Tick);
        let refresh = s.refresh_seconds.unwrap_or(s.tick_seconds);
        let mut snapshot = self.registry.snapshot_at(0);
        let mut last_refresh = 0.0;
        let max_ticks = ((s.qos.deadline * 4.0 / s.tick_seconds).ceil() as u64).max(1) + 10_000;
        let mut ticks = 0u64;

        while let Some(q) = self.heap.pop() {
            let now = q.t;
            if !matches!(q.what, Pending::Tick) {
                self.future_work -= 1;
            }
            match q.what {
                Pending::Price(i) => self.on_price(i, now)?,
                Pending::Prestage(n) => {
                    self.nodes[n].ready = true;
                    let host = self.spec(n).host.clone();
                    self.emit(now, EventKind::PrestageDone { host });
                    self.try_dispatch(n, now);
                }
                Pending::Arrive { resource, job } => self.on_arrive(resource, job, now),
                Pending::Complete { resource, job } => self.on_complete(resource, job, now),
                Pending::Tick => {
                    ticks += 1;
                    if now - last_refresh >= refresh - 1e-9 {
                        snapshot = self.registry.refresh_at(&snapshot, millis(now));
                        last_refresh = now;
                    }
                    let assigned = self.on_tick(now, &snapshot);
                    if self.broker.is_done() {
                        break;
                    }
                    let stuck = !assigned && self.broker.in_flight() == 0 && self.future_work == 0;
                    if stuck {
                        log::warn!("no progress possible at t={now}; {} jobs left", self.broker.pending.len());
                        break;
                    }
                    if ticks >= max_ticks {
                        log::warn!("tick limit reached at t={now}");
                        break;
                    }
                    self.schedule(now + s.tick_seconds, Pending::Tick);
                }
            }
        }
        let workers = self.nodes.iter().map(|n| s.resources[n.spec_index].host.clone()).collect();
        Ok(ExperimentLog {
            strategy: s.qos.strategy,
            deadline: s.qos.deadline,
            budget: s.qos.budget,
            total_jobs: self.jobs.len(),
            workers,
            events: self.events,
        })
    }
}

/// Runs the scenario in model mode: jobs consume simulated time only.
pub fn run_simulation(scenario: &Scenario) -> Result<ExperimentLog, SimError> {
    Engine::new(scenario)?.run()
}

/// Runs the model, then executes the real wavelet analysis of every
/// completed job against `recording`, writing archives under `out_dir`.
/// Outputs come back ordered by job id.
pub fn run_live(
    scenario: &Scenario,
    recording: &Recording,
    cfg: &WaveletConfig,
    out_dir: impl AsRef<Path>,
) -> Result<(ExperimentLog, Vec<MetaJobOutput>), SimError> {
    let log = run_simulation(scenario)?;
    let jobs: BTreeMap<JobId, MetaJob> = generate_meta_jobs(&scenario.workload)?
        .into_iter()
        .map(|j| (j.id, j))
        .collect();
    let done: BTreeSet<JobId> = log.completions().map(|(_, j, _, _)| j).collect();
    let out_dir = out_dir.as_ref();
    let outputs = done
        .par_iter()
        .map(|id| {
            execute_meta_job(&jobs[id], recording, cfg, scenario.workload.window_len, out_dir)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((log, outputs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CumulativePoint {
    pub t_seconds: f64,
    pub jobs_completed: usize,
    pub spent: f64,
}

/// One row per completion with running totals.
pub fn cumulative_series(log: &ExperimentLog) -> Vec<CumulativePoint> {
    let mut spent = 0.0;
    log.completions()
        .enumerate()
        .map(|(i, (e, _, _, cost))| {
            spent += cost;
            CumulativePoint {
                t_seconds: e.t,
                jobs_completed: i + 1,
                spent,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub start: f64,
    /// Time of the last completion; `None` when nothing completed.
    pub completion: Option<f64>,
    pub spent: f64,
    pub jobs_done: usize,
    pub total_jobs: usize,
}

fn number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:.2}")
    }
}

impl SummaryRow {
    pub fn is_complete(&self) -> bool {
        self.jobs_done == self.total_jobs
    }

    pub fn makespan(&self) -> Option<f64> {
        self.completion.map(|c| c - self.start)
    }

    /// `strategy,completion_seconds,budget_used`.
    pub fn render(&self) -> String {
        let completion = match self.makespan() {
            Some(m) if self.jobs_done > 0 => number(m),
            _ => "incomplete".to_string(),
        };
        format!("{},{},{}", self.strategy, completion, number(self.spent))
    }
}

pub fn summarize(log: &ExperimentLog) -> SummaryRow {
    let mut spent = 0.0;
    let mut jobs_done = 0;
    let mut completion = None;
    for (e, _, _, cost) in log.completions() {
        spent += cost;
        jobs_done += 1;
        completion = Some(e.t);
    }
    SummaryRow {
        strategy: log.strategy,
        start: 0.0,
        completion,
        spent,
        jobs_done,
        total_jobs: log.total_jobs,
    }
}

/// Completed jobs per worker host, including hosts that completed none.
pub fn per_resource_shares(log: &ExperimentLog) -> BTreeMap<String, usize> {
    let mut shares: BTreeMap<String, usize> = log.workers.iter().map(|h| (h.clone(), 0)).collect();
    for (_, _, host, _) in log.completions() {
        *shares.entry(host.to_string()).or_default() += 1;
    }
    shares
}

/// Writes `summary.csv`, `cumulative.csv`, `shares.csv`, and `events.jsonl`.
pub fn write_outputs(log: &ExperimentLog, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, SimError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let s = summarize(log);

    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record([
        "strategy",
        "start",
        "completion_seconds",
        "budget_utilised",
        "jobs_done",
        "total_jobs",
        "deadline",
        "budget",
    ])?;
    w.write_record([
        s.strategy.to_string(),
        number(s.start),
        s.completion.map(number).unwrap_or_else(|| "incomplete".into()),
        number(s.spent),
        s.jobs_done.to_string(),
        s.total_jobs.to_string(),
        number(log.deadline),
        number(log.budget),
    ])?;
    w.flush()?;

    let cumulative = dir.join("cumulative.csv");
    let mut w = csv::Writer::from_path(&cumulative)?;
    for p in cumulative_series(log) {
        w.serialize(p)?;
    }
    w.flush()?;

    let shares = dir.join("shares.csv");
    let mut w = csv::Writer::from_path(&shares)?;
    w.write_record(["host", "jobs_completed", "share"])?;
    for (host, n) in per_resource_shares(log) {
        let frac = if s.jobs_done == 0 {
            0.0
        } else {
            n as f64 / s.jobs_done as f64
        };
        w.write_record([host, n.to_string(), format!("{frac:.4}")])?;
    }
    w.flush()?;

    let events = dir.join("events.jsonl");
    let mut f = BufWriter::new(fs::File::create(&events)?);
    f.write_all(log.to_jsonl().as_bytes())?;
    f.flush()?;

    Ok(vec![summary, cumulative, shares, events])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_load_finish() {
        let mut t = LoadTrace::new(&LoadProfile::constant(1.0), 1, 0);
        assert_eq!(t.finish_time(0.0, 60.0, 1.0), 60.0);
        let mut h = LoadTrace::new(&LoadProfile::constant(0.5), 1, 0);
        assert_eq!(h.finish_time(0.0, 60.0, 1.0), 120.0);
    }

    #[test]
    fn schedule_spans_steps() {
        let p = LoadProfile {
            seed: 0,
            step_seconds: 10.0,
            min_factor: 0.5,
            max_factor: 1.0,
            schedule: vec![0.5, 1.0],
        };
        let mut t = LoadTrace::new(&p, 0, 0);
        // 5 units in the first 10 s at half speed, 5 more at full speed
        assert_eq!(t.finish_time(0.0, 10.0, 1.0), 15.0);
    }

    #[test]
    fn walk_stays_in_bounds() {
        let mut t = LoadTrace::new(&LoadProfile::default_walk(), 9, 3);
        for k in 0..500 {
            let f = t.factor(k);
            assert!((0.6..=1.0).contains(&f));
        }
    }

    #[test]
    fn bundled_scenario_loads() {
        let s = Scenario::table2();
        s.validate().unwrap();
        assert_eq!(s.resources.len(), 5);
        assert_eq!(s.resources.iter().filter(|r| r.worker).count(), 4);
    }

    #[test]
    fn summary_rendering() {
        let row = SummaryRow {
            strategy: Strategy::TimeMin,
            start: 0.0,
            completion: Some(1740.0),
            spent: 399.0,
            jobs_done: 100,
            total_jobs: 100,
        };
        assert_eq!(row.render(), "time,1740,399");
        let empty = SummaryRow {
            completion: None,
            spent: 0.0,
            jobs_done: 0,
            ..row
        };
        assert_eq!(empty.render(), "time,incomplete,0");
    }
}
