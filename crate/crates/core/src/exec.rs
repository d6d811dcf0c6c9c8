// SPDX-License-Identifier: Apache-2.0

//! Job progress on the simulated host.
//!
//! A job's compute phase is tracked as a completed fraction. Between host
//! changes the fraction grows at `1 / compute_seconds(share, n_vm)`, so a
//! job that keeps the same share the whole time finishes exactly at the
//! closed-form completion time. Whoever drives the clock reports host
//! changes through [`SimExecutor::set_host`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{DomainConfig, JobSpec, MachineSpec};
use crate::perf::{
    closed_form_share, compute_seconds, direct_compute_seconds, simulate_ballooning,
    MemoryOutcome, PerfParams,
};

/// Finish times closer than this to the clock count as reached.
const TIME_EPS: f64 = 1e-6;

/// Where a job runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    Direct,
    Domain(DomainConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobOutcome {
    Completed,
    OutOfMemory,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub outcome: JobOutcome,
    pub exit_code: i32,
    pub events_processed: u64,
    pub started_at: f64,
    pub finished_at: f64,
    /// Mean physical CPUs delivered while the job ran.
    pub cpu_share_avg: f64,
}

impl JobResult {
    pub fn succeeded(&self) -> bool {
        self.outcome == JobOutcome::Completed
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExecStatus {
    Running { eta: f64 },
    Finished,
}

#[derive(Debug, Clone)]
struct RunningJob {
    job: JobSpec,
    placement: Placement,
    started_at: f64,
    last: f64,
    fraction: f64,
    /// Fraction at which the job dies of memory starvation.
    stop_fraction: f64,
    oom: bool,
    rate: f64,
    share: f64,
    cpu_integral: f64,
    result: Option<JobResult>,
}

/// Handle to a job started on a [`SimExecutor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobHandle(usize);

#[derive(Debug, Clone)]
pub struct SimExecutor {
    params: PerfParams,
    machine: MachineSpec,
    shares: BTreeMap<String, f64>,
    n_vm: u32,
    jobs: Vec<RunningJob>,
}

impl SimExecutor {
    pub fn new(params: PerfParams, machine: MachineSpec) -> Self {
        Self {
            params,
            machine,
            shares: BTreeMap::new(),
            n_vm: 0,
            jobs: Vec::new(),
        }
    }

    /// Integrate progress up to `now`, then adopt new shares and the number
    /// of running guests.
    pub fn set_host(&mut self, now: f64, shares: BTreeMap<String, f64>, n_vm: u32) {
        self.advance_to(now);
        self.shares = shares;
        self.n_vm = n_vm;
        for i in 0..self.jobs.len() {
            self.rerate(i);
        }
    }

    fn rerate(&mut self, i: usize) {
        let j = &mut self.jobs[i];
        if j.result.is_some() {
            return;
        }
        let (share, seconds) = match &j.placement {
            Placement::Direct => (
                self.machine.pcpus as f64,
                direct_compute_seconds(&self.params, &self.machine, &j.job),
            ),
            Placement::Domain(d) => {
                let share = self.shares.get(&d.domain_id).copied().unwrap_or(0.0);
                (
                    share,
                    compute_seconds(&self.params, &j.job, d.memory as f64, share, self.n_vm.max(1)),
                )
            }
        };
        j.share = share;
        j.rate = match seconds {
            Ok(s) if s > 0.0 && s.is_finite() => 1.0 / s,
            Ok(_) => f64::INFINITY,
            Err(_) => 0.0,
        };
    }

    /// Begin the compute phase of `job` at `now`.
    ///
    /// For sandboxed jobs the memory trajectory is checked up front against
    /// the domain's balloon behaviour; a job that would run out of memory
    /// stops at the corresponding fraction of its work.
    pub fn start(&mut self, job: &JobSpec, placement: Placement, now: f64) -> JobHandle {
        let mut stop_fraction = 1.0;
        let mut oom = false;
        if let Placement::Domain(d) = &placement {
            let n = self.n_vm.max(1);
            let share = closed_form_share(&self.machine, d, n);
            if let Ok(duration) = compute_seconds(&self.params, job, d.memory as f64, share, n) {
                let trace = simulate_ballooning(&self.params, d, job, duration);
                if let MemoryOutcome::OutOfMemory { at, .. } = trace.outcome {
                    stop_fraction = if duration > 0.0 { at / duration } else { 0.0 };
                    oom = true;
                }
            }
        }
        self.jobs.push(RunningJob {
            job: job.clone(),
            placement,
            started_at: now,
            last: now,
            fraction: 0.0,
            stop_fraction,
            oom,
            rate: 0.0,
            share: 0.0,
            cpu_integral: 0.0,
            result: None,
        });
        let i = self.jobs.len() - 1;
        self.rerate(i);
        self.settle(i, now);
        JobHandle(i)
    }

    /// Integrate every running job up to `now`.
    pub fn advance_to(&mut self, now: f64) {
        for i in 0..self.jobs.len() {
            self.settle(i, now);
        }
    }

    fn settle(&mut self, i: usize, now: f64) {
        let j = &mut self.jobs[i];
        if j.result.is_some() || now <= j.last {
            if j.result.is_none() {
                finish_if_due(j, now);
            }
            return;
        }
        let dt = now - j.last;
        let remaining = j.stop_fraction - j.fraction;
        if j.rate > 0.0 && j.rate * dt >= remaining {
            let t_end = if j.rate.is_finite() { j.last + remaining / j.rate } else { j.last };
            j.cpu_integral += j.share * (t_end - j.last);
            j.fraction = j.stop_fraction;
            j.last = t_end;
        } else {
            j.fraction += j.rate * dt;
            j.cpu_integral += j.share * dt;
            j.last = now;
        }
        finish_if_due(j, now);
    }

    /// Expected finish time under the current host state.
    pub fn eta(&self, h: JobHandle) -> f64 {
        let j = &self.jobs[h.0];
        match &j.result {
            Some(r) => r.finished_at,
            None if j.rate > 0.0 => j.last + (j.stop_fraction - j.fraction) / j.rate,
            None => f64::INFINITY,
        }
    }

    pub fn poll(&mut self, h: JobHandle, now: f64) -> ExecStatus {
        self.settle(h.0, now);
        match self.jobs[h.0].result {
            Some(_) => ExecStatus::Finished,
            None => ExecStatus::Running { eta: self.eta(h) },
        }
    }

    pub fn result(&self, h: JobHandle) -> Option<&JobResult> {
        self.jobs[h.0].result.as_ref()
    }

    /// Abort a running job, e.g. after its lease was lost.
    pub fn cancel(&mut self, h: JobHandle, now: f64) -> JobResult {
        self.settle(h.0, now);
        let j = &mut self.jobs[h.0];
        if j.result.is_none() {
            let r = make_result(j, JobOutcome::Cancelled, now);
            j.result = Some(r);
        }
        j.result.clone().expect("set above")
    }
}

fn finish_if_due(j: &mut RunningJob, now: f64) {
    let due = j.fraction >= j.stop_fraction - 1e-12
        || (j.rate > 0.0 && (j.stop_fraction - j.fraction) / j.rate <= TIME_EPS);
    if due && j.last <= now + TIME_EPS {
        j.fraction = j.stop_fraction;
        let outcome = if j.oom {
            JobOutcome::OutOfMemory
        } else {
            JobOutcome::Completed
        };
        let at = j.last;
        j.result = Some(make_result(j, outcome, at));
    }
}

fn make_result(j: &RunningJob, outcome: JobOutcome, at: f64) -> JobResult {
    let elapsed = at - j.started_at;
    let events = (j.fraction.min(1.0) * j.job.event_count as f64).floor() as u64;
    JobResult {
        outcome,
        exit_code: match outcome {
            JobOutcome::Completed => 0,
            JobOutcome::OutOfMemory => 137,
            JobOutcome::Cancelled => 143,
        },
        events_processed: if outcome == JobOutcome::Completed {
            j.job.event_count
        } else {
            events
        },
        started_at: j.started_at,
        finished_at: at,
        cpu_share_avg: if elapsed > 0.0 { j.cpu_integral / elapsed } else { j.share },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job() -> JobSpec {
        JobSpec {
            id: "j".into(),
            cpu_work: 1000.0,
            event_count: 100,
            mem_base: 256.0,
            mem_per_event: 0.0,
            input_size: 0.0,
            output_size: 0.0,
        }
    }

    fn identity() -> PerfParams {
        let mut p = PerfParams {
            mem_curve: vec![(2048.0, 1.0), (8192.0, 1.0)],
            ..PerfParams::default()
        };
        p.composition.cpu_bound_fraction = 1.0;
        p.composition.job_parallelism = 4.0;
        p
    }

    #[test]
    fn constant_share_matches_closed_form() {
        let mut x = SimExecutor::new(identity(), MachineSpec::default());
        let d = DomainConfig::new("vm1", 1, 2048);
        x.set_host(0.0, BTreeMap::from([("vm1".to_string(), 1.0)]), 1);
        let h = x.start(&job(), Placement::Domain(d), 10.0);
        assert_eq!(x.eta(h), 1010.0);
        assert_eq!(x.poll(h, 500.0), ExecStatus::Running { eta: 1010.0 });
        assert_eq!(x.poll(h, 1010.0), ExecStatus::Finished);
        let r = x.result(h).unwrap();
        assert_eq!(r.finished_at, 1010.0);
        assert_eq!(r.cpu_share_avg, 1.0);
        assert_eq!(r.events_processed, 100);
    }

    #[test]
    fn share_change_midway() {
        let mut x = SimExecutor::new(identity(), MachineSpec::default());
        let d = DomainConfig::new("vm1", 2, 2048);
        x.set_host(0.0, BTreeMap::from([("vm1".to_string(), 2.0)]), 1);
        let h = x.start(&job(), Placement::Domain(d), 0.0);
        assert_eq!(x.eta(h), 500.0);
        // half the work done at t=250, then the share halves
        x.set_host(250.0, BTreeMap::from([("vm1".to_string(), 1.0)]), 2);
        assert_eq!(x.eta(h), 750.0);
        x.advance_to(800.0);
        let r = x.result(h).unwrap();
        assert_eq!(r.finished_at, 750.0);
        assert!((r.cpu_share_avg - (2.0 * 250.0 + 500.0) / 750.0).abs() < 1e-12);
    }

    #[test]
    fn direct_uses_whole_host() {
        let mut x = SimExecutor::new(identity(), MachineSpec::default());
        let h = x.start(&job(), Placement::Direct, 0.0);
        assert_eq!(x.eta(h), 250.0);
    }

    #[test]
    fn starved_memory_ends_early() {
        let mut x = SimExecutor::new(identity(), MachineSpec::default());
        let d = DomainConfig::new("vm1", 1, 512);
        x.set_host(0.0, BTreeMap::from([("vm1".to_string(), 1.0)]), 1);
        let mut j = job();
        j.mem_per_event = 20.0;
        let h = x.start(&j, Placement::Domain(d), 0.0);
        x.advance_to(2000.0);
        let r = x.result(h).unwrap();
        assert_eq!(r.outcome, JobOutcome::OutOfMemory);
        assert!(r.finished_at < 1000.0);
        assert!(r.events_processed < 100);
        assert_ne!(r.exit_code, 0);
    }

    #[test]
    fn zero_share_never_finishes() {
        let mut x = SimExecutor::new(identity(), MachineSpec::default());
        let h = x.start(&job(), Placement::Domain(DomainConfig::new("vm1", 1, 2048)), 0.0);
        assert_eq!(x.eta(h), f64::INFINITY);
        let r = x.cancel(h, 50.0);
        assert_eq!(r.outcome, JobOutcome::Cancelled);
    }
}
