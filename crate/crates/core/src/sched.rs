// SPDX-License-Identifier: Apache-2.0

//! Discrete-event model of the Xen credit scheduler.
//!
//! Time advances in 10 ms slices. Every third slice boundary (30 ms) is an
//! accounting boundary where credits are handed out to runnable domains in
//! proportion to their weight. At each slice boundary every pCPU picks one
//! eligible vCPU, preferring `Under` (credit left) over `Over` (credit
//! spent). Capped domains additionally hold a cap budget that refills by
//! `cap% x 30 ms` per period; a domain whose budget is exhausted is `Parked`
//! and its vCPUs do not run until the next refill brings it above zero.
//!
//! Dom_0 is always present as the first domain. It owns one vCPU per pCPU
//! and is runnable only while it has queued work (I/O proxying, balloon
//! servicing), see [`CreditScheduler::queue_dom0_work`].
//!
//! There is no BOOST priority. Ties inside a priority class are broken by
//! least-recently-run, then ascending `(domain, vcpu)` order, which makes
//! the schedule fully deterministic.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{Cap, DomainConfig, MachineSpec, Pinning, DEFAULT_WEIGHT};

pub const SLICE_MS: u64 = 10;
pub const ACCOUNTING_MS: u64 = 30;
pub const DOM0_ID: &str = "Domain-0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Priority {
    Under,
    Over,
    Parked,
}

impl Priority {
    pub fn as_str(self) -> &'static str {
        match self {
            Priority::Under => "UNDER",
            Priority::Over => "OVER",
            Priority::Parked => "PARKED",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VcpuState {
    pub owner: String,
    pub index: u32,
    /// Milliseconds of CPU the vCPU is still entitled to this period.
    pub credits: f64,
    pub priority: Priority,
    /// pCPU the vCPU last ran on.
    pub assigned_pcpu: Option<u32>,
    /// Milliseconds of CPU consumed since start.
    pub cpu_time_ms: u64,
}

impl VcpuState {
    pub fn cpu_time(&self) -> f64 {
        self.cpu_time_ms as f64 / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerClock {
    pub now_ms: u64,
    pub slice_ms: u64,
    pub accounting_ms: u64,
}

impl Default for SchedulerClock {
    fn default() -> Self {
        Self {
            now_ms: 0,
            slice_ms: SLICE_MS,
            accounting_ms: ACCOUNTING_MS,
        }
    }
}

impl SchedulerClock {
    pub fn at_slice_boundary(&self) -> bool {
        self.now_ms.is_multiple_of(self.slice_ms)
    }

    pub fn at_accounting_boundary(&self) -> bool {
        self.now_ms.is_multiple_of(self.accounting_ms)
    }
}

/// CPU demand of a guest domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// Every vCPU always wants to run.
    CpuBound,
    /// Never runnable.
    Idle,
    /// Periodic on/off load: runnable for `busy_ms`, then idle for `idle_ms`.
    Intermittent { busy_ms: u64, idle_ms: u64 },
}

impl Workload {
    fn active_at(self, now_ms: u64) -> bool {
        match self {
            Workload::CpuBound => true,
            Workload::Idle => false,
            Workload::Intermittent { busy_ms, idle_ms } => {
                let period = busy_ms + idle_ms;
                period > 0 && now_ms % period < busy_ms
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DomainEntry {
    id: String,
    weight: u32,
    cap: Cap,
    allowed: Option<Vec<u32>>,
    workload: Workload,
    is_dom0: bool,
    dom0_pending_ms: f64,
    /// Remaining cap allowance in ms; only meaningful for capped domains.
    cap_budget: f64,
    first_vcpu: usize,
    vcpu_count: usize,
    last_grant: f64,
}

impl DomainEntry {
    fn runnable(&self, now_ms: u64) -> bool {
        if self.is_dom0 {
            self.dom0_pending_ms > 0.0
        } else {
            self.workload.active_at(now_ms)
        }
    }

    fn parked(&self) -> bool {
        self.cap.is_capped() && self.cap_budget <= 0.0
    }

    fn cap_allowance_ms(&self) -> Option<f64> {
        match self.cap {
            Cap::Uncapped => None,
            Cap::Percent(p) => Some(p as f64 / 100.0 * ACCOUNTING_MS as f64),
        }
    }

    fn eligible_on(&self, pcpu: u32) -> bool {
        self.allowed.as_ref().is_none_or(|l| l.contains(&pcpu))
    }

    /// Most CPU the domain can absorb in one accounting period.
    fn ceiling_ms(&self, pcpus: u32) -> f64 {
        let usable = match &self.allowed {
            Some(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l.len().min(self.vcpu_count)
            }
            None => self.vcpu_count.min(pcpus as usize),
        };
        let mut ceil = usable as f64 * ACCOUNTING_MS as f64;
        if let Some(a) = self.cap_allowance_ms() {
            ceil = ceil.min(a);
        }
        ceil
    }
}

/// One row of the optional per-slice trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub time_ms: u64,
    pub pcpu: u32,
    pub domain_id: String,
    pub vcpu: u32,
    pub priority: Priority,
}

/// Per-domain CPU use over a trailing window, in physical CPUs.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareReport {
    pub window: f64,
    pub shares: BTreeMap<String, f64>,
}

impl ShareReport {
    pub fn share(&self, domain_id: &str) -> f64 {
        self.shares.get(domain_id).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedError {
    #[error("WINDOW_TOO_LARGE: window {window}s exceeds elapsed {elapsed}s")]
    WindowTooLarge { window: f64, elapsed: f64 },
    #[error("cannot run backwards from {now}s to {target}s")]
    TimeReversal { now: f64, target: f64 },
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("clock at {0} ms is not on the required boundary")]
    NotOnBoundary(u64),
}

#[derive(Debug, Clone)]
pub struct CreditScheduler {
    pcpus: u32,
    clock: SchedulerClock,
    domains: Vec<DomainEntry>,
    vcpus: Vec<VcpuState>,
    /// Slice sequence number in which each vCPU last ran.
    last_run: Vec<u64>,
    slice_seq: u64,
    last_accounted: Option<u64>,
    /// ms per (vcpu, pcpu).
    placement_ms: Vec<Vec<u64>>,
    pcpu_busy_ms: Vec<u64>,
    /// Cumulative ms per domain at each slice boundary.
    history: Vec<(u64, Vec<u64>)>,
    trace: Option<Vec<TraceRow>>,
}

impl CreditScheduler {
    /// Build scheduler state for a validated host and its guests.
    ///
    /// Guests start CPU-bound with zero credits; Dom_0 starts idle.
    pub fn new(machine: &MachineSpec, domains: &[DomainConfig]) -> Self {
        let mut guests: Vec<&DomainConfig> = domains.iter().collect();
        guests.sort_by(|a, b| a.domain_id.cmp(&b.domain_id));

        let mut entries = Vec::with_capacity(guests.len() + 1);
        let mut vcpus = Vec::new();
        let mut push = |id: &str,
                        n: u32,
                        weight: u32,
                        cap: Cap,
                        allowed: Option<Vec<u32>>,
                        is_dom0: bool,
                        workload: Workload,
                        vcpus: &mut Vec<VcpuState>| {
            let first = vcpus.len();
            for i in 0..n {
                vcpus.push(VcpuState {
                    owner: id.to_string(),
                    index: i,
                    credits: 0.0,
                    priority: Priority::Over,
                    assigned_pcpu: None,
                    cpu_time_ms: 0,
                });
            }
            let mut e = DomainEntry {
                id: id.to_string(),
                weight,
                cap,
                allowed,
                workload,
                is_dom0,
                dom0_pending_ms: 0.0,
                cap_budget: 0.0,
                first_vcpu: first,
                vcpu_count: n as usize,
                last_grant: 0.0,
            };
            e.cap_budget = e.cap_allowance_ms().unwrap_or(0.0);
            entries.push(e);
        };

        push(
            DOM0_ID,
            machine.pcpus,
            DEFAULT_WEIGHT,
            Cap::Uncapped,
            None,
            true,
            Workload::Idle,
            &mut vcpus,
        );
        for d in guests {
            let allowed = match &d.pinning {
                Pinning::FairShare => None,
                Pinning::Pinned(l) => Some(l.clone()),
            };
            push(
                &d.domain_id,
                d.vcpus,
                d.weight,
                d.cap,
                allowed,
                false,
                Workload::CpuBound,
                &mut vcpus,
            );
        }

        let n_vcpu = vcpus.len();
        let n_dom = entries.len();
        Self {
            pcpus: machine.pcpus,
            clock: SchedulerClock::default(),
            domains: entries,
            vcpus,
            last_run: vec![0; n_vcpu],
            slice_seq: 0,
            last_accounted: None,
            placement_ms: vec![vec![0; machine.pcpus as usize]; n_vcpu],
            pcpu_busy_ms: vec![0; machine.pcpus as usize],
            history: vec![(0, vec![0; n_dom])],
            trace: None,
        }
    }

    /// Record one [`TraceRow`] per executed slice from now on.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn clock(&self) -> SchedulerClock {
        self.clock
    }

    pub fn now(&self) -> f64 {
        self.clock.now_ms as f64 / 1000.0
    }

    pub fn vcpus(&self) -> &[VcpuState] {
        &self.vcpus
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(|d| d.id.as_str())
    }

    fn domain_index(&self, id: &str) -> Result<usize, SchedError> {
        self.domains
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| SchedError::UnknownDomain(id.to_string()))
    }

    pub fn set_workload(&mut self, domain_id: &str, workload: Workload) -> Result<(), SchedError> {
        let i = self.domain_index(domain_id)?;
        self.domains[i].workload = workload;
        Ok(())
    }

    /// Queue CPU work for Dom_0 (ms of CPU time).
    pub fn queue_dom0_work(&mut self, ms: f64) {
        self.domains[0].dom0_pending_ms += ms.max(0.0);
    }

    pub fn dom0_pending_ms(&self) -> f64 {
        self.domains[0].dom0_pending_ms
    }

    /// Credits handed to each domain at the most recent accounting boundary.
    pub fn last_grants(&self) -> BTreeMap<String, f64> {
        self.domains
            .iter()
            .map(|d| (d.id.clone(), d.last_grant))
            .collect()
    }

    /// Seconds of CPU consumed by a domain since start.
    pub fn cpu_time(&self, domain_id: &str) -> Result<f64, SchedError> {
        let d = &self.domains[self.domain_index(domain_id)?];
        let ms: u64 = self.vcpus[d.first_vcpu..d.first_vcpu + d.vcpu_count]
            .iter()
            .map(|v| v.cpu_time_ms)
            .sum();
        Ok(ms as f64 / 1000.0)
    }

    /// Seconds a given vCPU has spent on a given pCPU.
    pub fn time_on_pcpu(&self, domain_id: &str, vcpu: u32, pcpu: u32) -> Result<f64, SchedError> {
        let d = &self.domains[self.domain_index(domain_id)?];
        let v = d.first_vcpu + vcpu as usize;
        Ok(self.placement_ms[v][pcpu as usize] as f64 / 1000.0)
    }

    /// Busy seconds per pCPU.
    pub fn pcpu_busy(&self) -> Vec<f64> {
        self.pcpu_busy_ms.iter().map(|&ms| ms as f64 / 1000.0).collect()
    }

    /// Total CPU seconds consumed by guest domains (Dom_0 excluded).
    pub fn guest_cpu_time(&self) -> f64 {
        self.domains
            .iter()
            .filter(|d| !d.is_dom0)
            .map(|d| self.cpu_time(&d.id).unwrap_or(0.0))
            .sum()
    }

    fn refresh_priority(&mut self, dom: usize) {
        let parked = self.domains[dom].parked();
        let (first, n) = (self.domains[dom].first_vcpu, self.domains[dom].vcpu_count);
        for v in &mut self.vcpus[first..first + n] {
            v.priority = if parked {
                Priority::Parked
            } else if v.credits > 0.0 {
                Priority::Under
            } else {
                Priority::Over
            };
        }
    }

    /// Hand out one accounting period's credits.
    ///
    /// The machine's capacity for the period (`pcpus x 30 ms`) is divided
    /// among runnable domains in proportion to weight. A domain never
    /// receives more than it can absorb (its usable vCPUs, and its cap);
    /// the excess is redistributed to the others. Per-vCPU credits are
    /// clamped to one period's worth in either direction.
    pub fn account_credits(&mut self) -> Result<(), SchedError> {
        if !self.clock.at_accounting_boundary() {
            return Err(SchedError::NotOnBoundary(self.clock.now_ms));
        }
        let now = self.clock.now_ms;
        let period = ACCOUNTING_MS as f64;
        let capacity = self.pcpus as f64 * period;

        let active: Vec<usize> = (0..self.domains.len())
            .filter(|&i| self.domains[i].runnable(now))
            .collect();
        let ceilings: Vec<f64> = active
            .iter()
            .map(|&i| self.domains[i].ceiling_ms(self.pcpus))
            .collect();
        let grants = water_fill(
            capacity,
            &active
                .iter()
                .map(|&i| self.domains[i].weight as f64)
                .collect::<Vec<_>>(),
            &ceilings,
        );

        for d in &mut self.domains {
            d.last_grant = 0.0;
        }
        for (k, &i) in active.iter().enumerate() {
            let d = &mut self.domains[i];
            d.last_grant = grants[k];
            let per_vcpu = grants[k] / d.vcpu_count as f64;
            let (first, n) = (d.first_vcpu, d.vcpu_count);
            for v in &mut self.vcpus[first..first + n] {
                v.credits = (v.credits + per_vcpu).clamp(-period, period);
            }
        }

        for d in &mut self.domains {
            if let Some(allow) = d.cap_allowance_ms() {
                d.cap_budget = (d.cap_budget + allow).min(allow);
            }
        }
        for i in 0..self.domains.len() {
            self.refresh_priority(i);
        }
        self.last_accounted = Some(now);
        Ok(())
    }

    /// Pick a vCPU for every pCPU and run one full slice.
    pub fn run_slice(&mut self) -> Result<(), SchedError> {
        if !self.clock.at_slice_boundary() {
            return Err(SchedError::NotOnBoundary(self.clock.now_ms));
        }
        self.run_partial_slice(self.clock.slice_ms);
        Ok(())
    }

    fn pick(&self, pcpu: u32, taken: &[bool]) -> Option<usize> {
        let now = self.clock.now_ms;
        let mut best: Option<(usize, (Priority, u64, usize))> = None;
        for d in &self.domains {
            if !d.runnable(now) || d.parked() || !d.eligible_on(pcpu) {
                continue;
            }
            for v in (d.first_vcpu..d.first_vcpu + d.vcpu_count).filter(|&v| !taken[v]) {
                let key = (self.vcpus[v].priority, self.last_run[v], v);
                if best.as_ref().is_none_or(|(_, k)| key < *k) {
                    best = Some((v, key));
                }
            }
        }
        best.map(|(v, _)| v)
    }

    fn owner_of(&self, vcpu: usize) -> usize {
        self.domains
            .iter()
            .position(|d| vcpu >= d.first_vcpu && vcpu < d.first_vcpu + d.vcpu_count)
            .expect("every vcpu has an owner")
    }

    fn run_partial_slice(&mut self, len_ms: u64) {
        self.slice_seq += 1;
        let mut taken = vec![false; self.vcpus.len()];
        let mut chosen = Vec::with_capacity(self.pcpus as usize);
        for p in 0..self.pcpus {
            if let Some(v) = self.pick(p, &taken) {
                taken[v] = true;
                chosen.push((p, v));
            }
        }

        let now = self.clock.now_ms;
        let mut touched = Vec::new();
        for (p, v) in chosen {
            let dom = self.owner_of(v);
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceRow {
                    time_ms: now,
                    pcpu: p,
                    domain_id: self.domains[dom].id.clone(),
                    vcpu: self.vcpus[v].index,
                    priority: self.vcpus[v].priority,
                });
            }
            let ms = len_ms as f64;
            let vc = &mut self.vcpus[v];
            vc.credits = (vc.credits - ms).max(-(ACCOUNTING_MS as f64));
            vc.cpu_time_ms += len_ms;
            vc.assigned_pcpu = Some(p);
            self.placement_ms[v][p as usize] += len_ms;
            self.pcpu_busy_ms[p as usize] += len_ms;
            self.last_run[v] = self.slice_seq;

            let d = &mut self.domains[dom];
            if d.cap.is_capped() {
                d.cap_budget -= ms;
            }
            if d.is_dom0 {
                d.dom0_pending_ms = (d.dom0_pending_ms - ms).max(0.0);
            }
            touched.push(dom);
        }
        touched.dedup();
        for dom in touched {
            self.refresh_priority(dom);
        }

        self.clock.now_ms += len_ms;
        let cumulative = self
            .domains
            .iter()
            .map(|d| {
                self.vcpus[d.first_vcpu..d.first_vcpu + d.vcpu_count]
                    .iter()
                    .map(|v| v.cpu_time_ms)
                    .sum()
            })
            .collect();
        self.history.push((self.clock.now_ms, cumulative));
    }

    /// Advance the simulation to `t` seconds.
    ///
    /// Accounting runs at every 30 ms boundary crossed and slices run back
    /// to back; a final partial slice is run when `t` is not on a slice
    /// boundary.
    pub fn run_until(&mut self, t: f64) -> Result<(), SchedError> {
        let target = (t * 1000.0).round() as u64;
        if target < self.clock.now_ms {
            return Err(SchedError::TimeReversal {
                now: self.now(),
                target: t,
            });
        }
        while self.clock.now_ms < target {
            let now = self.clock.now_ms;
            if self.clock.at_accounting_boundary() && self.last_accounted != Some(now) {
                self.account_credits()?;
            }
            let next_boundary = (now / SLICE_MS + 1) * SLICE_MS;
            let end = next_boundary.min(target);
            self.run_partial_slice(end - now);
        }
        Ok(())
    }

    /// Share of a pCPU each domain used over the trailing `window` seconds.
    pub fn cpu_share_report(&self, window: f64) -> Result<ShareReport, SchedError> {
        let window_ms = (window * 1000.0).round() as u64;
        if window_ms > self.clock.now_ms || window_ms == 0 {
            return Err(SchedError::WindowTooLarge {
                window,
                elapsed: self.now(),
            });
        }
        let from = self.clock.now_ms - window_ms;
        let idx = match self.history.binary_search_by_key(&from, |(t, _)| *t) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let (t0, ref then) = self.history[idx];
        let (t1, ref now) = self.history[self.history.len() - 1];
        let span = (t1 - t0) as f64;
        let shares = self
            .domains
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), (now[i] - then[i]) as f64 / span))
            .collect();
        Ok(ShareReport { window, shares })
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    /// Write the slice trace as CSV: `time_ms,pcpu,domain_id,vcpu,priority`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_ms", "pcpu", "domain_id", "vcpu", "priority"])?;
        for r in self.trace.as_deref().unwrap_or(&[]) {
            w.write_record([
                r.time_ms.to_string(),
                r.pcpu.to_string(),
                r.domain_id.clone(),
                r.vcpu.to_string(),
                r.priority.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Weighted max-min split of `capacity` with per-claimant ceilings.
fn water_fill(capacity: f64, weights: &[f64], ceilings: &[f64]) -> Vec<f64> {
    let n = weights.len();
    let mut grant = vec![0.0; n];
    let mut open: Vec<usize> = (0..n).collect();
    let mut left = capacity;
    while !open.is_empty() && left > 1e-12 {
        let wsum: f64 = open.iter().map(|&i| weights[i]).sum();
        let mut saturated = Vec::new();
        for &i in &open {
            let offer = left * weights[i] / wsum;
            if grant[i] + offer >= ceilings[i] - 1e-12 {
                saturated.push(i);
            }
        }
        if saturated.is_empty() {
            for &i in &open {
                grant[i] += left * weights[i] / wsum;
            }
            break;
        }
        for &i in &saturated {
            left -= ceilings[i] - grant[i];
            grant[i] = ceilings[i];
        }
        open.retain(|i| !saturated.contains(i));
    }
    grant
}

/// Long-run CPU share of every guest when all of them are CPU-bound.
///
/// Runs the scheduler for `warmup + window` seconds and reports the trailing
/// window, in physical CPUs per domain. Dom_0 is idle.
pub fn steady_state_shares(
    machine: &MachineSpec,
    domains: &[DomainConfig],
    warmup: f64,
    window: f64,
) -> BTreeMap<String, f64> {
    let mut s = CreditScheduler::new(machine, domains);
    s.run_until(warmup + window).expect("forward in time");
    let mut r = s
        .cpu_share_report(window)
        .expect("window within elapsed time")
        .shares;
    r.remove(DOM0_ID);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host(pcpus: u32) -> MachineSpec {
        MachineSpec {
            pcpus,
            ..MachineSpec::default()
        }
    }

    #[test]
    fn init_builds_vcpus_and_dom0() {
        let s = CreditScheduler::new(&host(4), &[DomainConfig::new("vm1", 4, 2048)]);
        assert_eq!(s.vcpus().iter().filter(|v| v.owner == "vm1").count(), 4);
        assert_eq!(s.vcpus().iter().filter(|v| v.owner == DOM0_ID).count(), 4);
        assert!(s.vcpus().iter().all(|v| v.credits == 0.0));
        assert_eq!(s.now(), 0.0);

        let s = CreditScheduler::new(&host(4), &[]);
        assert_eq!(s.domain_ids().collect::<Vec<_>>(), vec![DOM0_ID]);

        let doms: Vec<_> = (1..=3)
            .map(|i| DomainConfig::new(format!("vm{i}"), 1, 2048))
            .collect();
        let s = CreditScheduler::new(&host(4), &doms);
        assert_eq!(s.vcpus().len(), 3 + 4);
    }

    #[test]
    fn grants_follow_weight() {
        let doms = [
            DomainConfig::new("a", 1, 512).with_weight(512),
            DomainConfig::new("b", 1, 512).with_weight(256),
        ];
        let mut s = CreditScheduler::new(&host(1), &doms);
        s.account_credits().unwrap();
        let g = s.last_grants();
        assert!((g["a"] / g["b"] - 2.0).abs() < 1e-12);
        assert_eq!(g[DOM0_ID], 0.0);
    }

    #[test]
    fn cap_clamps_grant() {
        let doms = [DomainConfig::new("a", 4, 512).with_cap(50)];
        let mut s = CreditScheduler::new(&host(4), &doms);
        s.account_credits().unwrap();
        assert!((s.last_grants()["a"] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn sole_claimant_gets_what_it_can_use() {
        let doms = [DomainConfig::new("a", 4, 512)];
        let mut s = CreditScheduler::new(&host(4), &doms);
        s.account_credits().unwrap();
        assert!((s.last_grants()["a"] - 120.0).abs() < 1e-12);
    }

    #[test]
    fn accounting_off_boundary_is_rejected() {
        let mut s = CreditScheduler::new(&host(1), &[DomainConfig::new("a", 1, 512)]);
        s.run_until(0.01).unwrap();
        assert_eq!(s.account_credits(), Err(SchedError::NotOnBoundary(10)));
    }

    #[test]
    fn two_under_vcpus_alternate() {
        let doms = [DomainConfig::new("a", 1, 512), DomainConfig::new("b", 1, 512)];
        let mut s = CreditScheduler::new(&host(1), &doms);
        s.enable_trace();
        s.run_until(0.06).unwrap();
        let owners: Vec<_> = s.trace().unwrap().iter().map(|r| r.domain_id.as_str()).collect();
        assert_eq!(owners, vec!["a", "b", "a", "b", "a", "b"]);
    }

    #[test]
    fn under_beats_over() {
        let doms = [DomainConfig::new("a", 1, 512), DomainConfig::new("b", 1, 512)];
        let mut s = CreditScheduler::new(&host(1), &doms);
        s.account_credits().unwrap();
        // drain b's credit so it sits in OVER
        let b = s.vcpus.iter().position(|v| v.owner == "b").unwrap();
        s.vcpus[b].credits = -5.0;
        s.refresh_priority(2);
        s.enable_trace();
        s.run_slice().unwrap();
        let row = &s.trace().unwrap()[0];
        assert_eq!(row.domain_id, "a");
        assert_eq!(row.priority, Priority::Under);
    }

    #[test]
    fn pinned_vcpu_leaves_other_pcpu_idle() {
        let doms = [DomainConfig::new("a", 2, 512).with_pinning(vec![0])];
        let mut s = CreditScheduler::new(&host(2), &doms);
        s.run_until(1.0).unwrap();
        assert_eq!(s.pcpu_busy(), vec![1.0, 0.0]);
        assert_eq!(s.time_on_pcpu("a", 1, 1).unwrap(), 0.0);
        assert!((s.cpu_time("a").unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sole_domain_runs_continuously() {
        let mut s = CreditScheduler::new(&host(4), &[DomainConfig::new("a", 1, 512)]);
        s.run_until(60.0).unwrap();
        assert!((s.cpu_time("a").unwrap() - 60.0).abs() <= 0.010);
    }

    #[test]
    fn partial_slice_lands_exactly() {
        let mut s = CreditScheduler::new(&host(1), &[DomainConfig::new("a", 1, 512)]);
        s.run_until(0.025).unwrap();
        assert_eq!(s.clock().now_ms, 25);
        assert_eq!(s.cpu_time("a").unwrap(), 0.025);
        s.run_until(0.05).unwrap();
        assert_eq!(s.clock().now_ms, 50);
        assert!(matches!(
            s.run_until(0.01),
            Err(SchedError::TimeReversal { .. })
        ));
    }

    #[test]
    fn idle_domain_has_zero_share() {
        let doms = [DomainConfig::new("a", 1, 512), DomainConfig::new("b", 1, 512)];
        let mut s = CreditScheduler::new(&host(2), &doms);
        s.set_workload("b", Workload::Idle).unwrap();
        s.run_until(3.0).unwrap();
        let r = s.cpu_share_report(3.0).unwrap();
        assert_eq!(r.share("b"), 0.0);
        assert!((r.share("a") - 1.0).abs() < 1e-9);
    }

    #[test]
    fn window_larger_than_elapsed_fails() {
        let mut s = CreditScheduler::new(&host(1), &[]);
        s.run_until(1.0).unwrap();
        assert!(matches!(
            s.cpu_share_report(2.0),
            Err(SchedError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn dom0_runs_only_with_pending_work() {
        let mut s = CreditScheduler::new(&host(1), &[DomainConfig::new("a", 1, 512)]);
        s.run_until(0.3).unwrap();
        assert_eq!(s.cpu_time(DOM0_ID).unwrap(), 0.0);
        s.queue_dom0_work(40.0);
        s.run_until(1.2).unwrap();
        assert!((s.cpu_time(DOM0_ID).unwrap() - 0.04).abs() < 1e-9);
        assert_eq!(s.dom0_pending_ms(), 0.0);
    }

    #[test]
    fn water_fill_redistributes_excess() {
        let g = water_fill(120.0, &[1.0, 1.0], &[30.0, 120.0]);
        assert_eq!(g, vec![30.0, 90.0]);
        let g = water_fill(30.0, &[4.0, 2.0, 1.0], &[30.0; 3]);
        assert!((g[0] - 120.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_header() {
        let mut s = CreditScheduler::new(&host(1), &[DomainConfig::new("a", 1, 512)]);
        s.enable_trace();
        s.run_until(0.02).unwrap();
        let mut buf = Vec::new();
        s.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "time_ms,pcpu,domain_id,vcpu,priority\n0,0,a,0,UNDER\n10,0,a,0,UNDER\n"
        );
    }
}
