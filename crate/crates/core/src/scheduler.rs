//! Deadline- and budget-constrained broker.
//!
//! The broker keeps a forecast of each resource's job completion rate from
//! its history and, once per tick, hands pending meta-jobs to resources
//! under one of three strategies. Jobs assigned to a resource but not yet
//! dispatched to one of its nodes are pulled back at every tick and
//! reallocated, so each tick sees the whole undispatched backlog.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{PricingModel, RegistrySnapshot, MEG_SERVICE};
use crate::workload::{JobId, MetaJob};

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("deadline must be positive, got {0}")]
    BadDeadline(f64),
    #[error("budget must be non-negative, got {0}")]
    BadBudget(f64),
    #[error("unknown strategy `{0}` (expected time, cost, or cost-time)")]
    UnknownStrategy(String),
    #[error("nominal speed of {host} must be positive, got {speed}")]
    BadSpeed { host: String, speed: f64 },
    #[error("{0} must have at least one node")]
    NoNodes(String),
    #[error("duplicate resource {0}")]
    DuplicateResource(String),
    #[error("duplicate job id {0}")]
    DuplicateJob(JobId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "time")]
    TimeMin,
    #[serde(rename = "cost")]
    CostMin,
    #[serde(rename = "cost-time")]
    CostTime,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::TimeMin, Strategy::CostMin, Strategy::CostTime];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TimeMin => "time",
            Strategy::CostMin => "cost",
            Strategy::CostTime => "cost-time",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SchedulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time" | "time-min" => Ok(Strategy::TimeMin),
            "cost" | "cost-min" => Ok(Strategy::CostMin),
            "cost-time" => Ok(Strategy::CostTime),
            other => Err(SchedulerError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoS {
    /// Seconds from experiment start.
    pub deadline: f64,
    /// G$.
    pub budget: f64,
    pub strategy: Strategy,
}

impl QoS {
    pub fn new(deadline: f64, budget: f64, strategy: Strategy) -> Result<Self, SchedulerError> {
        let q = Self {
            deadline,
            budget,
            strategy,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if !(self.deadline > 0.0 && self.deadline.is_finite()) {
            return Err(SchedulerError::BadDeadline(self.deadline));
        }
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(SchedulerError::BadBudget(self.budget));
        }
        Ok(())
    }
}

/// One finished job as observed by the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub job_id: JobId,
    /// Node-seconds from dispatch to completion.
    pub wall_seconds: f64,
    pub cpu_seconds: f64,
    pub completed_at: f64,
}

/// A job held in a resource's queue at an agreed price.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedJob {
    pub job_id: JobId,
    pub dispatched: bool,
    pub estimate: f64,
    pub price: f64,
    pub pricing_model: PricingModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceState {
    pub host: String,
    pub pricing_model: PricingModel,
    pub price: f64,
    /// Reference CPU-seconds per wall-second on one node.
    pub nominal_speed: f64,
    pub nodes: u32,
    pub queue: Vec<QueuedJob>,
    pub history: Vec<Completion>,
    pub busy_seconds: f64,
}

impl ResourceState {
    pub fn new(
        host: impl Into<String>,
        nominal_speed: f64,
        nodes: u32,
        pricing_model: PricingModel,
        price: f64,
    ) -> Result<Self, SchedulerError> {
        let host = host.into();
        if !(nominal_speed > 0.0 && nominal_speed.is_finite()) {
            return Err(SchedulerError::BadSpeed {
                host,
                speed: nominal_speed,
            });
        }
        if nodes == 0 {
            return Err(SchedulerError::NoNodes(host));
        }
        Ok(Self {
            host,
            pricing_model,
            price,
            nominal_speed,
            nodes,
            queue: Vec::new(),
            history: Vec::new(),
            busy_seconds: 0.0,
        })
    }

    pub fn record_completion(&mut self, c: Completion) {
        self.busy_seconds += c.wall_seconds;
        self.history.push(c);
    }

    /// Jobs per second across all nodes, zero while bootstrapping.
    pub fn throughput(&self) -> f64 {
        forecast_rate(self).jobs_per_sec * f64::from(self.nodes)
    }

    fn queue_len(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forecast {
    /// Completions per busy node-second.
    pub jobs_per_sec: f64,
    /// No history yet.
    pub bootstrap: bool,
}

/// Cumulative mean completion rate: completed jobs over accumulated busy
/// node-seconds.
pub fn forecast_rate(r: &ResourceState) -> Forecast {
    if r.history.is_empty() || r.busy_seconds <= 0.0 {
        return Forecast {
            jobs_per_sec: 0.0,
            bootstrap: r.history.is_empty(),
        };
    }
    Forecast {
        jobs_per_sec: r.history.len() as f64 / r.busy_seconds,
        bootstrap: false,
    }
}

/// G$ to run `job` on one node of `r` at its current price.
pub fn job_cost_estimate(job: &MetaJob, r: &ResourceState) -> f64 {
    match r.pricing_model {
        PricingModel::CpuSec => r.price * (job.work_units / r.nominal_speed),
        PricingModel::Ao => r.price,
    }
}

/// A job handed to a resource during a tick.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub job_id: JobId,
    pub host: String,
    pub price: f64,
    pub pricing_model: PricingModel,
    pub estimate: f64,
}

/// Executor reports, consumed at the next tick.
#[derive(Debug, Clone, PartialEq)]
pub enum Notification {
    Dispatched {
        job_id: JobId,
        host: String,
    },
    Completed {
        job_id: JobId,
        host: String,
        wall_seconds: f64,
        cpu_seconds: f64,
        cost: f64,
        at: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TickOutcome {
    pub assignments: Vec<Assignment>,
    /// Undispatched jobs pulled back before allocation, with their former host.
    pub reclaimed: Vec<(JobId, String)>,
    /// Whether known throughput can clear the backlog by the deadline;
    /// `None` while no resource has a forecast.
    pub feasible: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct BrokerState {
    pub qos: QoS,
    pub jobs: BTreeMap<JobId, MetaJob>,
    pub pending: BTreeSet<JobId>,
    pub resources: Vec<ResourceState>,
    pub spent: f64,
    pub committed: f64,
    pub clock: f64,
    pub completed: usize,
    inbox: Vec<Notification>,
}

impl BrokerState {
    pub fn new(
        qos: QoS,
        jobs: impl IntoIterator<Item = MetaJob>,
        resources: Vec<ResourceState>,
    ) -> Result<Self, SchedulerError> {
        qos.validate()?;
        let mut seen = BTreeSet::new();
        for r in &resources {
            if !seen.insert(r.host.clone()) {
                return Err(SchedulerError::DuplicateResource(r.host.clone()));
            }
        }
        let mut map = BTreeMap::new();
        for j in jobs {
            let id = j.id;
            if map.insert(id, j).is_some() {
                return Err(SchedulerError::DuplicateJob(id));
            }
        }
        Ok(Self {
            qos,
            pending: map.keys().copied().collect(),
            jobs: map,
            resources,
            spent: 0.0,
            committed: 0.0,
            clock: 0.0,
            completed: 0,
            inbox: Vec::new(),
        })
    }

    pub fn notify(&mut self, n: Notification) {
        self.inbox.push(n);
    }

    pub fn resource(&self, host: &str) -> Option<&ResourceState> {
        self.resources.iter().find(|r| r.host == host)
    }

    /// Jobs assigned to some resource and not yet completed.
    pub fn in_flight(&self) -> usize {
        self.resources.iter().map(|r| r.queue.len()).sum()
    }

    pub fn is_done(&self) -> bool {
        self.pending.is_empty() && self.in_flight() == 0
    }

    fn index_of(&self, host: &str) -> Option<usize> {
        self.resources.iter().position(|r| r.host == host)
    }

    fn drain_inbox(&mut self) {
        for n in std::mem::take(&mut self.inbox) {
            match n {
                Notification::Dispatched { job_id, host } => {
                    if let Some(i) = self.index_of(&host) {
                        if let Some(q) =
                            self.resources[i].queue.iter_mut().find(|q| q.job_id == job_id)
                        {
                            q.dispatched = true;
                        }
                    }
                }
                Notification::Completed {
                    job_id,
                    host,
                    wall_seconds,
                    cpu_seconds,
                    cost,
                    at,
                } => {
                    let Some(i) = self.index_of(&host) else { continue };
                    let r = &mut self.resources[i];
                    let Some(pos) = r.queue.iter().position(|q| q.job_id == job_id) else {
                        continue;
                    };
                    let q = r.queue.remove(pos);
                    r.record_completion(Completion {
                        job_id,
                        wall_seconds,
                        cpu_seconds,
                        completed_at: at,
                    });
                    self.committed += cost - q.estimate;
                    self.spent += cost;
                    self.completed += 1;
                }
            }
        }
        self.recompute_committed();
    }

    fn apply_prices(&mut self, snapshot: &RegistrySnapshot) {
        for r in &mut self.resources {
            if let Some(e) = snapshot.lookup(&r.host, MEG_SERVICE) {
                r.price = e.price;
                r.pricing_model = e.pricing_model;
            }
        }
    }

    fn reclaim(&mut self) -> Vec<(JobId, String)> {
        let mut out = Vec::new();
        for r in &mut self.resources {
            let (keep, back): (Vec<_>, Vec<_>) = r.queue.drain(..).partition(|q| q.dispatched);
            r.queue = keep;
            for q in back {
                self.committed -= q.estimate;
                self.pending.insert(q.job_id);
                out.push((q.job_id, r.host.clone()));
            }
        }
        self.recompute_committed();
        out
    }

    /// Resets `committed` to spend plus outstanding estimates, dropping any
    /// rounding residue from incremental updates.
    fn recompute_committed(&mut self) {
        let outstanding: f64 = self
            .resources
            .iter()
            .flat_map(|r| r.queue.iter().map(|q| q.estimate))
            .sum();
        self.committed = self.spent + outstanding;
    }

    /// Per-job cost on resource `i` for job `job_id` at the current price.
    fn cost_on(&self, i: usize, job_id: JobId) -> f64 {
        job_cost_estimate(&self.jobs[&job_id], &self.resources[i])
    }

    /// Whether assigning `job_id` to resource `i` keeps enough budget to run
    /// every still-unassigned job at the same per-job cost.
    fn affordable(&self, i: usize, job_id: JobId) -> bool {
        let cost = self.cost_on(i, job_id);
        let unassigned = self.pending.len() as f64;
        cost * unassigned <= self.qos.budget - self.committed + 1e-9 * self.qos.budget.max(1.0)
    }

    fn assign(&mut self, i: usize, job_id: JobId) -> Assignment {
        let estimate = self.cost_on(i, job_id);
        let r = &mut self.resources[i];
        r.queue.push(QueuedJob {
            job_id,
            dispatched: false,
            estimate,
            price: r.price,
            pricing_model: r.pricing_model,
        });
        self.pending.remove(&job_id);
        self.committed += estimate;
        Assignment {
            job_id,
            host: r.host.clone(),
            price: r.price,
            pricing_model: r.pricing_model,
            estimate,
        }
    }

    fn remaining_time(&self) -> f64 {
        (self.qos.deadline - self.clock).max(0.0)
    }

    /// Jobs resource `i` can still finish by the deadline beyond its queue.
    fn capacity(&self, i: usize) -> usize {
        let r = &self.resources[i];
        let total = (r.throughput() * self.remaining_time()).floor();
        (total as usize).saturating_sub(r.queue_len())
    }

    fn bootstrap(&mut self) -> Vec<Assignment> {
        let mut out = Vec::new();
        for i in 0..self.resources.len() {
            let r = &self.resources[i];
            if !r.history.is_empty() || !r.queue.is_empty() {
                continue;
            }
            let Some(&job) = self.pending.iter().next() else { break };
            if self.affordable(i, job) {
                out.push(self.assign(i, job));
            }
        }
        out
    }

    fn feasibility(&self) -> Option<bool> {
        let known: Vec<usize> = (0..self.resources.len())
            .filter(|&i| self.resources[i].throughput() > 0.0)
            .collect();
        if known.is_empty() {
            return None;
        }
        let cap: usize = known.iter().map(|&i| self.capacity(i)).sum();
        Some(cap >= self.pending.len())
    }

    /// Projected-finish greedy over `candidates`, assigning at most `limit`
    /// jobs.
    fn time_greedy(&mut self, candidates: &[usize], limit: usize) -> Vec<Assignment> {
        let mut out = Vec::new();
        let candidates: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| self.resources[i].throughput() > 0.0)
            .collect();
        let rates: Vec<f64> = candidates.iter().map(|&i| self.resources[i].throughput()).collect();
        while out.len() < limit {
            let Some(&job) = self.pending.iter().next() else { break };
            let mut best: Option<(usize, f64, f64)> = None;
            for (k, &i) in candidates.iter().enumerate() {
                if !self.affordable(i, job) {
                    continue;
                }
                let rate = rates[k];
                let finish = (self.resources[i].queue_len() + 1) as f64 / rate;
                let better = match best {
                    None => true,
                    Some((bi, bf, br)) => finish
                        .total_cmp(&bf)
                        .then_with(|| br.total_cmp(&rate))
                        .then_with(|| self.resources[i].host.cmp(&self.resources[bi].host))
                        .is_lt(),
                };
                if better {
                    best = Some((i, finish, rate));
                }
            }
            match best {
                Some((i, _, _)) => out.push(self.assign(i, job)),
                None => break,
            }
        }
        out
    }

    fn known_resources(&self) -> Vec<usize> {
        (0..self.resources.len())
            .filter(|&i| self.resources[i].throughput() > 0.0)
            .collect()
    }
}

/// Bootstrap probes, then each pending job to the resource with the
/// earliest projected finish that the budget allows.
pub fn allocate_time_min(state: &mut BrokerState) -> Vec<Assignment> {
    let mut out = state.bootstrap();
    let known = state.known_resources();
    out.extend(state.time_greedy(&known, usize::MAX));
    out
}

/// Bootstrap probes, then fill resources cheapest-first up to what each can
/// finish by the deadline. Overflow goes out by projected finish time and is
/// reported as infeasible.
pub fn allocate_cost_min(state: &mut BrokerState) -> (Vec<Assignment>, Option<bool>) {
    let mut out = state.bootstrap();
    let mut known = state.known_resources();
    let Some(&probe_job) = state.pending.iter().next() else {
        return (out, if known.is_empty() { None } else { Some(true) });
    };
    let feasible = state.feasibility();
    let job = &state.jobs[&probe_job];
    let keys: BTreeMap<usize, (f64, f64)> = known
        .iter()
        .map(|&i| {
            let r = &state.resources[i];
            (i, (job_cost_estimate(job, r), r.throughput()))
        })
        .collect();
    known.sort_by(|&a, &b| {
        let (ca, ra) = keys[&a];
        let (cb, rb) = keys[&b];
        ca.total_cmp(&cb)
            .then_with(|| rb.total_cmp(&ra))
            .then_with(|| state.resources[a].host.cmp(&state.resources[b].host))
    });
    for &i in &known {
        let mut room = state.capacity(i);
        while room > 0 {
            let Some(&j) = state.pending.iter().next() else { break };
            if !state.affordable(i, j) {
                break;
            }
            out.push(state.assign(i, j));
            room -= 1;
        }
    }
    if !state.pending.is_empty() {
        out.extend(state.time_greedy(&known, usize::MAX));
    }
    (out, feasible)
}

/// Bootstrap probes, then projected-finish allocation inside each group of
/// equally priced resources, cheapest group first. A group takes at most
/// what it can finish by the deadline; the most expensive group takes the
/// rest.
pub fn allocate_cost_time(state: &mut BrokerState) -> Vec<Assignment> {
    let mut out = state.bootstrap();
    let known = state.known_resources();
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for &i in &known {
        let p = state.resources[i].price;
        match groups.iter_mut().find(|(gp, _)| *gp == p) {
            Some((_, g)) => g.push(i),
            None => groups.push((p, vec![i])),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    let last = groups.len().saturating_sub(1);
    for (g, (_, members)) in groups.iter().enumerate() {
        if state.pending.is_empty() {
            break;
        }
        let limit = if g == last {
            usize::MAX
        } else {
            let rate: f64 = members.iter().map(|&i| state.resources[i].throughput()).sum();
            let queued: usize = members.iter().map(|&i| state.resources[i].queue_len()).sum();
            ((rate * state.remaining_time()).floor() as usize).saturating_sub(queued)
        };
        out.extend(state.time_greedy(members, limit));
    }
    out
}

/// One broker step at time `now`: absorb executor reports, take prices from
/// `snapshot`, pull back undispatched work, and allocate.
pub fn tick(state: &mut BrokerState, now: f64, snapshot: &RegistrySnapshot) -> TickOutcome {
    state.clock = now;
    state.drain_inbox();
    state.apply_prices(snapshot);
    let reclaimed = state.reclaim();
    let (assignments, feasible) = match state.qos.strategy {
        Strategy::TimeMin => {
            let f = state.feasibility();
            (allocate_time_min(state), f)
        }
        Strategy::CostMin => allocate_cost_min(state),
        Strategy::CostTime => {
            let f = state.feasibility();
            (allocate_cost_time(state), f)
        }
    };
    TickOutcome {
        assignments,
        reclaimed,
        feasible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: JobId, work: f64) -> MetaJob {
        MetaJob {
            id,
            offset_start: id,
            offset_count: 1,
            sensor_count: 2,
            work_units: work,
            input_bytes: 0,
        }
    }

    fn with_history(mut r: ResourceState, jobs: usize, busy: f64) -> ResourceState {
        for k in 0..jobs {
            r.record_completion(Completion {
                job_id: 1000 + k as u64,
                wall_seconds: busy / jobs as f64,
                cpu_seconds: 1.0,
                completed_at: k as f64,
            });
        }
        r
    }

    #[test]
    fn forecast_from_history() {
        let r = ResourceState::new("a", 1.0, 1, PricingModel::CpuSec, 1.0).unwrap();
        assert_eq!(forecast_rate(&r), Forecast { jobs_per_sec: 0.0, bootstrap: true });
        let r = with_history(r, 4, 20.0);
        assert!((forecast_rate(&r).jobs_per_sec - 0.2).abs() < 1e-12);
    }

    #[test]
    fn cost_models() {
        let mut r = ResourceState::new("a", 2.0, 1, PricingModel::CpuSec, 3.0).unwrap();
        assert_eq!(job_cost_estimate(&job(0, 10.0), &r), 15.0);
        r.pricing_model = PricingModel::Ao;
        r.price = 5.0;
        assert_eq!(job_cost_estimate(&job(0, 10.0), &r), 5.0);
        r.price = 0.0;
        assert_eq!(job_cost_estimate(&job(0, 99.0), &r), 0.0);
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("fast".parse::<Strategy>().is_err());
    }

    #[test]
    fn qos_bounds() {
        assert!(QoS::new(0.0, 1.0, Strategy::TimeMin).is_err());
        assert!(QoS::new(1.0, -1.0, Strategy::TimeMin).is_err());
        assert!(QoS::new(1.0, 0.0, Strategy::TimeMin).is_ok());
    }
}
