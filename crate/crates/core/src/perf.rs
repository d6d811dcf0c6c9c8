// SPDX-License-Identifier: Apache-2.0

//! Performance model: turns CPU shares, memory and network placement into
//! completion and transfer times.
//!
//! Completion time of a sandboxed job is
//!
//! ```text
//! T = K + f(M) * W * ((1 - phi) + phi / s_eff)
//! s_eff = min(s, p) / (1 + c * (n_vm - 1))
//! ```
//!
//! where `K` is the VM setup-plus-shutdown time, `f(M)` the memory slowdown
//! curve, `W` the job's CPU work at one reference core, `phi` the fraction of
//! that work which is CPU-bound, `s` the physical CPUs the scheduler delivers
//! to the domain (already limited by cap and weight), `p` the most cores
//! the job can keep busy and `c` the per-VM interference between co-located
//! guests. [`Composition`] holds `phi`, `p` and `c`; they come out of
//! [`crate::calibrate`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Cap, DomainConfig, JobSpec, MachineSpec, ScenarioError, DEFAULT_WEIGHT, MEGABITS_PER_GB,
};

/// Where one end of a data transfer lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EndpointKind {
    /// A bare-metal host (grid storage element, worker node without Xen).
    Physical,
    /// A guest domain's virtual NIC.
    Virtual,
    /// The privileged domain of a Xen host.
    Dom0,
}

impl EndpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EndpointKind::Physical => "PHYSICAL",
            EndpointKind::Virtual => "VIRTUAL",
            EndpointKind::Dom0 => "DOM0",
        }
    }
}

impl fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EndpointKind {
    type Err = PerfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PHYSICAL" => Ok(EndpointKind::Physical),
            "VIRTUAL" => Ok(EndpointKind::Virtual),
            "DOM0" | "DOM_0" => Ok(EndpointKind::Dom0),
            _ => Err(PerfError::UnknownEndpointKind(s.to_string())),
        }
    }
}

/// One measured link throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEntry {
    pub src: EndpointKind,
    pub dst: EndpointKind,
    /// Guest domains running in parallel during the measurement.
    pub parallel: u32,
    /// Mb/s.
    pub throughput: f64,
}

/// The five measured 3 GB scp transfers, in table order.
pub fn table2_matrix() -> Vec<TransferEntry> {
    use EndpointKind::*;
    let row = |parallel, src, dst, throughput| TransferEntry {
        src,
        dst,
        parallel,
        throughput,
    };
    vec![
        row(0, Physical, Physical, 62.8),
        row(0, Physical, Virtual, 8.8),
        row(3, Physical, Virtual, 8.3),
        row(3, Virtual, Virtual, 6.4),
        row(3, Virtual, Virtual, 6.6),
    ]
}

/// How the completion-time terms combine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    /// Fraction of the job's time that scales with delivered CPU.
    pub cpu_bound_fraction: f64,
    /// Most physical CPUs the job can keep busy.
    pub job_parallelism: f64,
    /// Extra slowdown of the CPU term per additional co-located guest.
    pub contention_per_vm: f64,
    /// Evaluate the completion formula literally, dividing by `cap x n_vm`.
    /// Kept only for comparison; more VMs then finish faster.
    #[serde(default)]
    pub literal_eq1: bool,
}

impl Default for Composition {
    fn default() -> Self {
        Self {
            cpu_bound_fraction: 0.636_200_3,
            job_parallelism: 1.148_072_6,
            contention_per_vm: 0.0,
            literal_eq1: false,
        }
    }
}

impl Composition {
    fn contention(&self, n_vm: u32) -> f64 {
        1.0 + self.contention_per_vm * n_vm.saturating_sub(1) as f64
    }
}

/// Memory ballooning service model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalloonParams {
    /// MiB/s Dom_0 releases to an uncapped guest.
    pub base_rate: f64,
    /// MiB per balloon request.
    pub chunk: f64,
    /// MiB of ungranted demand a guest survives before it is OOM-killed.
    pub queue_limit: f64,
}

impl Default for BalloonParams {
    fn default() -> Self {
        Self {
            base_rate: 32.0,
            chunk: 64.0,
            queue_limit: 256.0,
        }
    }
}

/// Calibrated constants of the performance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfParams {
    /// Seconds to set up and shut down one VM.
    pub k_setup_shutdown: f64,
    /// `(memory MiB, slowdown factor)` sorted by memory.
    pub mem_curve: Vec<(f64, f64)>,
    /// `(Dom_0 memory MiB, Mb/s)` sorted by memory.
    pub dom0_throughput_curve: Vec<(f64, f64)>,
    pub transfer_matrix: Vec<TransferEntry>,
    #[serde(default)]
    pub composition: Composition,
    #[serde(default)]
    pub balloon: BalloonParams,
}

/// Memory below which the slowdown curve starts to matter.
pub const MEM_ANCHOR_LOW: f64 = 2048.0;
/// Memory from which the slowdown is flat at 1.
pub const MEM_ANCHOR_FLAT: f64 = 8192.0;
/// Intermediate anchor inside the flat band.
pub const MEM_ANCHOR_MID: f64 = 3072.0;

impl Default for PerfParams {
    /// Calibrated values.
    fn default() -> Self {
        Self {
            k_setup_shutdown: 180.0,
            mem_curve: vec![
                (MEM_ANCHOR_LOW, 1.01),
                (MEM_ANCHOR_MID, 1.01),
                (MEM_ANCHOR_FLAT, 1.0),
            ],
            dom0_throughput_curve: vec![(512.0, 20.0), (1024.0, 50.0), (2048.0, 50.0)],
            transfer_matrix: table2_matrix(),
            composition: Composition::default(),
            balloon: BalloonParams::default(),
        }
    }
}

impl PerfParams {
    pub fn validate(&self) -> Vec<ScenarioError> {
        let mut errs = Vec::new();
        let bad = |s: &str| ScenarioError::InvalidPerfParams(s.to_string());
        if !(self.k_setup_shutdown >= 0.0) {
            errs.push(bad("k_setup_shutdown must be >= 0"));
        }
        if self.mem_curve.is_empty() {
            errs.push(bad("mem_curve is empty"));
        }
        if self.mem_curve.windows(2).any(|w| w[1].0 <= w[0].0) {
            errs.push(bad("mem_curve must be sorted by memory"));
        }
        if self.mem_curve.iter().any(|&(_, f)| !(f >= 1.0)) {
            errs.push(bad("mem_curve slowdown factors must be >= 1"));
        }
        if self.mem_curve.windows(2).any(|w| w[1].1 > w[0].1) {
            errs.push(bad("mem_curve must be non-increasing in memory"));
        }
        if self.dom0_throughput_curve.is_empty() {
            errs.push(bad("dom0_throughput_curve is empty"));
        }
        if self.dom0_throughput_curve.windows(2).any(|w| w[1].0 <= w[0].0) {
            errs.push(bad("dom0_throughput_curve must be sorted by memory"));
        }
        if self.dom0_throughput_curve.windows(2).any(|w| w[1].1 < w[0].1) {
            errs.push(bad("dom0_throughput_curve must be non-decreasing"));
        }
        if self.transfer_matrix.iter().any(|e| !(e.throughput > 0.0)) {
            errs.push(bad("transfer_matrix throughputs must be > 0"));
        }
        let c = &self.composition;
        if !(0.0..=1.0).contains(&c.cpu_bound_fraction)
            || !(c.job_parallelism >= 1.0)
            || !(c.contention_per_vm >= 0.0)
        {
            errs.push(bad("composition out of range"));
        }
        let b = &self.balloon;
        if !(b.base_rate > 0.0) || !(b.chunk > 0.0) || !(b.queue_limit >= 0.0) {
            errs.push(bad("balloon parameters out of range"));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerfError {
    #[error("ZERO_CAPACITY: domain {0} is capped to 0% of a CPU")]
    ZeroCapacity(String),
    #[error("UNKNOWN_ENDPOINT_KIND: {0}")]
    UnknownEndpointKind(String),
    #[error("UNKNOWN_ENDPOINT_KIND: no measurement for {src}->{dst}")]
    UnmeasuredLink { src: EndpointKind, dst: EndpointKind },
    #[error("transfer size must be >= 0, got {0}")]
    NegativeSize(f64),
    #[error("n_vm must be >= 1")]
    NoVms,
}

impl PerfError {
    pub fn code(&self) -> &'static str {
        match self {
            PerfError::ZeroCapacity(_) => "ZERO_CAPACITY",
            PerfError::UnknownEndpointKind(_) | PerfError::UnmeasuredLink { .. } => {
                "UNKNOWN_ENDPOINT_KIND"
            }
            PerfError::NegativeSize(_) => "NEGATIVE_SIZE",
            PerfError::NoVms => "NO_VMS",
        }
    }
}

/// Piecewise-linear interpolation; flat beyond the last point, and
/// either flat or extrapolated along the first segment below the first.
fn interpolate(curve: &[(f64, f64)], x: f64, extrapolate_low: bool) -> f64 {
    match curve {
        [] => 1.0,
        [(_, y)] => *y,
        _ => {
            let (x0, y0) = curve[0];
            if x <= x0 {
                if !extrapolate_low {
                    return y0;
                }
                let (x1, y1) = curve[1];
                return y0 + (x - x0) * (y1 - y0) / (x1 - x0);
            }
            for w in curve.windows(2) {
                let ((xa, ya), (xb, yb)) = (w[0], w[1]);
                if x <= xb {
                    return ya + (x - xa) * (yb - ya) / (xb - xa);
                }
            }
            curve[curve.len() - 1].1
        }
    }
}

/// Slowdown factor of a domain with `memory` MiB.
///
/// Below the lowest anchor the first segment is extrapolated; above the
/// highest the factor is flat.
pub fn mem_slowdown(params: &PerfParams, memory: f64) -> f64 {
    interpolate(&params.mem_curve, memory, true).max(1.0)
}

/// Reference throughput of an unvirtualised host, Mb/s.
pub fn bare_metal_throughput(params: &PerfParams) -> f64 {
    lookup(params, EndpointKind::Physical, EndpointKind::Physical, 0)
        .map(|e| e.throughput)
        .unwrap_or(f64::INFINITY)
}

/// Network throughput of Dom_0 given its memory, Mb/s.
pub fn dom0_throughput(params: &PerfParams, dom0_memory: f64) -> f64 {
    interpolate(&params.dom0_throughput_curve, dom0_memory, false)
        .min(bare_metal_throughput(params))
}

fn lookup(
    params: &PerfParams,
    src: EndpointKind,
    dst: EndpointKind,
    n_parallel: u32,
) -> Option<&TransferEntry> {
    params
        .transfer_matrix
        .iter()
        .filter(|e| e.src == src && e.dst == dst)
        .min_by_key(|e| e.parallel.abs_diff(n_parallel))
}

/// Throughput of a link, Mb/s.
///
/// Any leg touching Dom_0 runs at Dom_0's memory-dependent throughput.
/// Other pairs come from the measured matrix; the entry with the nearest
/// parallel-domain count wins, and among equals the first listed.
pub fn link_throughput(
    params: &PerfParams,
    src: EndpointKind,
    dst: EndpointKind,
    n_parallel: u32,
    dom0_memory: f64,
) -> Result<f64, PerfError> {
    if src == EndpointKind::Dom0 || dst == EndpointKind::Dom0 {
        return Ok(dom0_throughput(params, dom0_memory));
    }
    lookup(params, src, dst, n_parallel)
        .map(|e| e.throughput)
        .ok_or(PerfError::UnmeasuredLink { src, dst })
}

/// Seconds to move `size` GB over a link.
pub fn transfer_time(
    params: &PerfParams,
    size: f64,
    src: EndpointKind,
    dst: EndpointKind,
    n_parallel: u32,
    dom0_memory: f64,
) -> Result<f64, PerfError> {
    if !(size >= 0.0) {
        return Err(PerfError::NegativeSize(size));
    }
    let mbps = link_throughput(params, src, dst, n_parallel, dom0_memory)?;
    Ok(size * MEGABITS_PER_GB / mbps)
}

/// Seconds to move `size` GB at a given matrix row's measured throughput.
pub fn transfer_time_for_entry(entry: &TransferEntry, size: f64) -> Result<f64, PerfError> {
    if !(size >= 0.0) {
        return Err(PerfError::NegativeSize(size));
    }
    Ok(size * MEGABITS_PER_GB / entry.throughput)
}

/// Compute-phase seconds for a job given the physical CPUs delivered to it.
///
/// `n_vm` counts co-located guests including this one; pass 0 for a run on
/// bare metal.
pub fn compute_seconds(
    params: &PerfParams,
    job: &JobSpec,
    memory: f64,
    delivered_cpus: f64,
    n_vm: u32,
) -> Result<f64, PerfError> {
    let c = &params.composition;
    let effective = delivered_cpus.min(c.job_parallelism) / c.contention(n_vm);
    if !(effective > 0.0) {
        return Err(PerfError::ZeroCapacity(job.id.clone()));
    }
    let phi = c.cpu_bound_fraction;
    Ok(mem_slowdown(params, memory) * job.cpu_work * ((1.0 - phi) + phi / effective))
}

/// Compute-phase seconds for a job run directly on the host.
pub fn direct_compute_seconds(
    params: &PerfParams,
    machine: &MachineSpec,
    job: &JobSpec,
) -> Result<f64, PerfError> {
    compute_seconds(
        params,
        job,
        machine.total_memory as f64,
        machine.pcpus as f64,
        0,
    )
}

/// Physical CPUs one of `n_vm` identical CPU-bound guests receives.
///
/// Weights are equal among identical guests, so each gets `pcpus / n_vm`,
/// bounded by its vCPU count and its cap.
pub fn closed_form_share(machine: &MachineSpec, dom: &DomainConfig, n_vm: u32) -> f64 {
    let weight_share = machine.pcpus as f64 / n_vm.max(1) as f64;
    let by_weight = (dom.vcpus as f64).min(weight_share);
    by_weight.min(dom.cap.cpus(dom.vcpus))
}

/// Completion time of a sandboxed job, seconds.
///
/// Uses [`closed_form_share`] for the CPU the domain receives; callers
/// holding a scheduler measurement should use [`estimate_with_share`].
pub fn eq1_estimate(
    params: &PerfParams,
    machine: &MachineSpec,
    dom: &DomainConfig,
    job: &JobSpec,
    n_vm: u32,
) -> Result<f64, PerfError> {
    if n_vm == 0 {
        return Err(PerfError::NoVms);
    }
    if dom.cap == Cap::Percent(0) {
        return Err(PerfError::ZeroCapacity(dom.domain_id.clone()));
    }
    if params.composition.literal_eq1 {
        return literal_eq1(params, dom, job, n_vm);
    }
    let share = closed_form_share(machine, dom, n_vm);
    estimate_with_share(params, dom, job, n_vm, share)
}

/// Completion time given a measured CPU share, seconds.
pub fn estimate_with_share(
    params: &PerfParams,
    dom: &DomainConfig,
    job: &JobSpec,
    n_vm: u32,
    share: f64,
) -> Result<f64, PerfError> {
    Ok(params.k_setup_shutdown + compute_seconds(params, job, dom.memory as f64, share, n_vm)?)
}

/// `K + f(M) * f(W*P) / (C * n_vm)` read term by term.
///
/// `f(W*P)` is the CPU work spread over weight-scaled vCPUs and `C` the cap
/// in CPUs (all vCPUs when uncapped).
fn literal_eq1(
    params: &PerfParams,
    dom: &DomainConfig,
    job: &JobSpec,
    n_vm: u32,
) -> Result<f64, PerfError> {
    let weighted_cpus = dom.weight as f64 / DEFAULT_WEIGHT as f64 * dom.vcpus as f64;
    let work_term = job.cpu_work / weighted_cpus;
    let cap = dom.cap.cpus(dom.vcpus);
    if !(cap > 0.0) {
        return Err(PerfError::ZeroCapacity(dom.domain_id.clone()));
    }
    Ok(params.k_setup_shutdown
        + mem_slowdown(params, dom.memory as f64) * work_term / (cap * n_vm as f64))
}

/// Breakdown of one pilot's end-to-end time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompletionEstimate {
    pub t_total: f64,
    pub t_setup: f64,
    pub t_compute: f64,
    pub t_stage_in: f64,
    pub t_stage_out: f64,
    pub n_parallel: u32,
}

impl CompletionEstimate {
    pub fn new(t_setup: f64, t_compute: f64, t_stage_in: f64, t_stage_out: f64, n: u32) -> Self {
        Self {
            t_total: t_setup + t_compute + t_stage_in + t_stage_out,
            t_setup,
            t_compute,
            t_stage_in,
            t_stage_out,
            n_parallel: n,
        }
    }
}

/// Fraction of wall time a domain holds a CPU, as seen by Dom_0 when it
/// services the domain's balloon requests.
pub fn activity_fraction(dom: &DomainConfig) -> f64 {
    match dom.cap {
        Cap::Uncapped => 1.0,
        Cap::Percent(p) => (p as f64 / 100.0).min(1.0),
    }
}

/// Rate at which Dom_0 releases memory to a domain, MiB/s.
pub fn balloon_drain_rate(params: &PerfParams, dom: &DomainConfig, pending: f64) -> f64 {
    if !(pending > 0.0) {
        return 0.0;
    }
    params.balloon.base_rate * activity_fraction(dom)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalloonRequest {
    /// Seconds since the job started.
    pub issued_at: f64,
    /// MiB.
    pub size: f64,
    /// `None` when the request would exceed the domain's memory ceiling.
    pub granted_at: Option<f64>,
}

impl BalloonRequest {
    pub fn time_to_grant(&self) -> Option<f64> {
        self.granted_at.map(|g| g - self.issued_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum MemoryOutcome {
    Completed,
    OutOfMemory { at: f64, events_done: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalloonTrace {
    pub requests: Vec<BalloonRequest>,
    pub outcome: MemoryOutcome,
}

/// Memory trajectory of a leaking job inside a ballooned domain.
///
/// The domain boots holding `mem_base`. Events are spread evenly over
/// `duration` seconds and each leaks `mem_per_event`; whenever demand passes
/// what has been requested so far a `chunk`-sized request is queued with
/// Dom_0, which serves the queue in order at [`balloon_drain_rate`]. Memory
/// beyond the domain's configured size is never granted. The job dies once
/// ungranted demand exceeds the queue limit.
pub fn simulate_ballooning(
    params: &PerfParams,
    dom: &DomainConfig,
    job: &JobSpec,
    duration: f64,
) -> BalloonTrace {
    let ceiling = dom.memory as f64;
    let b = &params.balloon;
    let rate = balloon_drain_rate(params, dom, b.chunk);
    let reservation = job.mem_base.min(ceiling);
    if job.mem_base - ceiling > b.queue_limit {
        return BalloonTrace {
            requests: Vec::new(),
            outcome: MemoryOutcome::OutOfMemory {
                at: 0.0,
                events_done: 0,
            },
        };
    }

    let mut requests: Vec<BalloonRequest> = Vec::new();
    let mut requested = reservation;
    let mut server_free = 0.0_f64;
    let mut blocked = false;
    let n = job.event_count.max(1);

    for k in 1..=n {
        let t = duration * k as f64 / n as f64;
        let demand = job.demand_after(k);
        while requested < demand {
            let size = b.chunk;
            let granted_at = if !blocked && requested + size <= ceiling + 1e-9 {
                let start = server_free.max(t);
                let done = start + size / rate;
                server_free = done;
                Some(done)
            } else {
                // FIFO: an unservable request stalls everything behind it.
                blocked = true;
                None
            };
            requests.push(BalloonRequest {
                issued_at: t,
                size,
                granted_at,
            });
            requested += size;
        }
        let granted: f64 = reservation
            + requests
                .iter()
                .filter(|r| r.granted_at.is_some_and(|g| g <= t))
                .map(|r| r.size)
                .sum::<f64>();
        if demand - granted > b.queue_limit {
            return BalloonTrace {
                requests,
                outcome: MemoryOutcome::OutOfMemory {
                    at: t,
                    events_done: k - 1,
                },
            };
        }
    }
    BalloonTrace {
        requests,
        outcome: MemoryOutcome::Completed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(cpu_work: f64) -> JobSpec {
        JobSpec {
            id: "j".into(),
            cpu_work,
            event_count: 100,
            mem_base: 512.0,
            mem_per_event: 0.0,
            input_size: 0.0,
            output_size: 0.0,
        }
    }

    #[test]
    fn mem_slowdown_anchors() {
        let p = PerfParams::default();
        assert_eq!(mem_slowdown(&p, 8192.0), 1.0);
        assert_eq!(mem_slowdown(&p, 16384.0), 1.0);
        assert!(mem_slowdown(&p, 3072.0) <= 1.015);
        assert!(mem_slowdown(&p, 2048.0) >= mem_slowdown(&p, 3072.0));
    }

    #[test]
    fn mem_slowdown_extrapolates_below_lowest_anchor() {
        let p = PerfParams {
            mem_curve: vec![(2048.0, 1.1), (3072.0, 1.01), (8192.0, 1.0)],
            ..PerfParams::default()
        };
        let slope = (1.01 - 1.1) / 1024.0;
        assert!((mem_slowdown(&p, 1024.0) - (1.1 - 1024.0 * slope)).abs() < 1e-12);
    }

    #[test]
    fn dom0_curve() {
        let p = PerfParams::default();
        assert_eq!(dom0_throughput(&p, 1024.0), 50.0);
        assert_eq!(dom0_throughput(&p, 2048.0), 50.0);
        assert_eq!(dom0_throughput(&p, 8192.0), 50.0);
        assert!(dom0_throughput(&p, 512.0) <= 25.0);
        assert_eq!(bare_metal_throughput(&p), 62.8);
    }

    #[test]
    fn transfer_examples() {
        use EndpointKind::*;
        let p = PerfParams::default();
        let t = transfer_time(&p, 3.0, Physical, Physical, 0, 2048.0).unwrap();
        assert!((t - 24576.0 / 62.8).abs() < 1e-9);
        assert!((t - 391.3).abs() < 0.05);
        let t = transfer_time(&p, 3.0, Virtual, Virtual, 3, 2048.0).unwrap();
        assert_eq!(t, 3840.0);
        assert_eq!(transfer_time(&p, 0.0, Physical, Virtual, 0, 2048.0).unwrap(), 0.0);
        let t = transfer_time(&p, 3.0, Physical, Dom0, 0, 2048.0).unwrap();
        assert!((t - 491.52).abs() < 1e-9);
    }

    #[test]
    fn nearest_parallel_count_wins() {
        use EndpointKind::*;
        let p = PerfParams::default();
        assert_eq!(link_throughput(&p, Physical, Virtual, 1, 2048.0).unwrap(), 8.8);
        assert_eq!(link_throughput(&p, Physical, Virtual, 2, 2048.0).unwrap(), 8.3);
        assert_eq!(link_throughput(&p, Physical, Physical, 5, 2048.0).unwrap(), 62.8);
    }

    #[test]
    fn unknown_links_and_kinds() {
        use EndpointKind::*;
        let p = PerfParams::default();
        let e = transfer_time(&p, 1.0, Virtual, Physical, 0, 2048.0).unwrap_err();
        assert_eq!(e.code(), "UNKNOWN_ENDPOINT_KIND");
        let e = "floppy".parse::<EndpointKind>().unwrap_err();
        assert_eq!(e.code(), "UNKNOWN_ENDPOINT_KIND");
        assert_eq!("dom0".parse::<EndpointKind>().unwrap(), Dom0);
    }

    #[test]
    fn identity_composition() {
        let p = PerfParams {
            k_setup_shutdown: 0.0,
            mem_curve: vec![(1.0, 1.0)],
            composition: Composition {
                cpu_bound_fraction: 1.0,
                job_parallelism: 1.0,
                contention_per_vm: 0.0,
                literal_eq1: false,
            },
            ..PerfParams::default()
        };
        let dom = DomainConfig::new("a", 1, 2048);
        let t = estimate_with_share(&p, &dom, &job(100.0), 1, 1.0).unwrap();
        assert_eq!(t, 100.0);
    }

    #[test]
    fn explicit_zero_cap_has_no_capacity() {
        let p = PerfParams::default();
        let mut dom = DomainConfig::new("a", 1, 2048);
        dom.cap = Cap::Percent(0);
        let e = eq1_estimate(&p, &MachineSpec::default(), &dom, &job(1.0), 1).unwrap_err();
        assert_eq!(e.code(), "ZERO_CAPACITY");
    }

    #[test]
    fn literal_reading_rewards_more_vms() {
        let mut p = PerfParams::default();
        p.composition.literal_eq1 = true;
        let m = MachineSpec::default();
        let dom = DomainConfig::new("a", 1, 2048);
        let one = eq1_estimate(&p, &m, &dom, &job(7000.0), 1).unwrap();
        let three = eq1_estimate(&p, &m, &dom, &job(7000.0), 3).unwrap();
        assert!(three < one);
    }

    #[test]
    fn drain_rate_scales_with_cap() {
        let p = PerfParams::default();
        let free = DomainConfig::new("a", 1, 2048);
        let capped = DomainConfig::new("b", 1, 2048).with_cap(50);
        assert_eq!(balloon_drain_rate(&p, &free, 0.0), 0.0);
        assert_eq!(
            balloon_drain_rate(&p, &capped, 64.0),
            0.5 * p.balloon.base_rate
        );
        assert!(balloon_drain_rate(&p, &free, 64.0) > balloon_drain_rate(&p, &capped, 64.0));
    }

    #[test]
    fn ballooning_oom_when_demand_outgrows_domain() {
        let p = PerfParams::default();
        let dom = DomainConfig::new("a", 1, 512);
        let mut j = job(100.0);
        j.mem_base = 256.0;
        j.mem_per_event = 8.0;
        let tr = simulate_ballooning(&p, &dom, &j, 1000.0);
        assert!(matches!(tr.outcome, MemoryOutcome::OutOfMemory { .. }));
        assert!(tr.requests.iter().any(|r| r.granted_at.is_none()));
    }

    #[test]
    fn ballooning_completes_within_ceiling() {
        let p = PerfParams::default();
        let dom = DomainConfig::new("a", 1, 2048);
        let mut j = job(100.0);
        j.mem_per_event = 5.0;
        let tr = simulate_ballooning(&p, &dom, &j, 5000.0);
        assert_eq!(tr.outcome, MemoryOutcome::Completed);
        assert!(tr.requests.iter().all(|r| r.time_to_grant() == Some(2.0)));
    }
}
