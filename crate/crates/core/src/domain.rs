// SPDX-License-Identifier: Apache-2.0

//! Shared vocabulary: hosts, domains, jobs, lease policy, scenario files.
//!
//! Units used everywhere in the crate:
//!
//! * memory in MiB
//! * bandwidth in Mb/s
//! * data sizes in GB, where 1 GB = 8192 Mb for transfer arithmetic
//! * time in seconds (the credit scheduler works internally in milliseconds)

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perf::PerfParams;

/// Megabits carried by one GB of payload.
pub const MEGABITS_PER_GB: f64 = 8192.0;

/// Xen's default credit-scheduler weight.
pub const DEFAULT_WEIGHT: u32 = 256;

/// A physical host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub pcpus: u32,
    /// MiB.
    pub total_memory: u64,
    /// MiB reserved for Dom_0.
    pub dom0_memory: u64,
    /// Mb/s.
    pub nic_bandwidth: f64,
}

impl Default for MachineSpec {
    /// Two dual-core sockets, 8 GB of RAM and a gigabit NIC.
    fn default() -> Self {
        Self {
            pcpus: 4,
            total_memory: 8192,
            dom0_memory: 2048,
            nic_bandwidth: 1000.0,
        }
    }
}

/// CPU cap of a domain, in percent of one physical CPU.
///
/// On the wire a cap is a plain integer where `0` means uncapped, following
/// the `xm sched-credit` convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "u32", into = "u32")]
pub enum Cap {
    #[default]
    Uncapped,
    Percent(u32),
}

impl From<u32> for Cap {
    fn from(v: u32) -> Self {
        if v == 0 {
            Cap::Uncapped
        } else {
            Cap::Percent(v)
        }
    }
}

impl From<Cap> for u32 {
    fn from(c: Cap) -> u32 {
        match c {
            Cap::Uncapped => 0,
            Cap::Percent(p) => p,
        }
    }
}

impl Cap {
    /// Ceiling in physical CPUs for a domain with `vcpus` virtual CPUs.
    pub fn cpus(self, vcpus: u32) -> f64 {
        match self {
            Cap::Uncapped => vcpus as f64,
            Cap::Percent(p) => (p as f64 / 100.0).min(vcpus as f64),
        }
    }

    pub fn is_capped(self) -> bool {
        matches!(self, Cap::Percent(_))
    }
}

/// Placement policy for a domain's vCPUs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pinning {
    /// Any vCPU may run on any pCPU.
    #[default]
    FairShare,
    /// vCPUs may only run on the listed pCPUs.
    Pinned(Vec<u32>),
}

fn default_weight() -> u32 {
    DEFAULT_WEIGHT
}

/// One guest domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain_id: String,
    pub vcpus: u32,
    /// MiB.
    pub memory: u64,
    #[serde(default = "default_weight")]
    pub weight: u32,
    #[serde(default)]
    pub cap: Cap,
    #[serde(default)]
    pub pinning: Pinning,
}

impl DomainConfig {
    /// An uncapped, fair-share domain with the default weight.
    pub fn new(domain_id: impl Into<String>, vcpus: u32, memory: u64) -> Self {
        Self {
            domain_id: domain_id.into(),
            vcpus,
            memory,
            weight: DEFAULT_WEIGHT,
            cap: Cap::Uncapped,
            pinning: Pinning::FairShare,
        }
    }

    pub fn with_weight(mut self, weight: u32) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_cap(mut self, cap: u32) -> Self {
        self.cap = Cap::from(cap);
        self
    }

    pub fn with_pinning(mut self, pcpus: Vec<u32>) -> Self {
        self.pinning = Pinning::Pinned(pcpus);
        self
    }

    /// Check the invariants that do not depend on the host.
    pub fn validate(&self) -> Vec<ScenarioError> {
        let mut errs = Vec::new();
        let bad = |detail: String| ScenarioError::InvalidDomain {
            domain_id: self.domain_id.clone(),
            detail,
        };
        if self.domain_id.is_empty() {
            errs.push(bad("empty domain_id".into()));
        }
        if self.vcpus == 0 {
            errs.push(bad("vcpus must be >= 1".into()));
        }
        if self.memory == 0 {
            errs.push(bad("memory must be > 0".into()));
        }
        if self.weight == 0 {
            errs.push(bad("weight must be >= 1".into()));
        }
        if let Cap::Percent(p) = self.cap {
            if p > 100 * self.vcpus {
                errs.push(bad(format!("cap {p} exceeds 100 x {} vcpus", self.vcpus)));
            }
        }
        errs
    }
}

/// A workload to be run by one pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: String,
    /// CPU-seconds on one fully provisioned reference core.
    pub cpu_work: f64,
    pub event_count: u64,
    /// MiB resident after initialisation.
    pub mem_base: f64,
    /// MiB leaked per processed event.
    pub mem_per_event: f64,
    /// GB.
    pub input_size: f64,
    /// GB.
    pub output_size: f64,
}

impl JobSpec {
    /// Memory demand after `events` events have been processed.
    pub fn demand_after(&self, events: u64) -> f64 {
        self.mem_base + events as f64 * self.mem_per_event
    }

    pub fn peak_demand(&self) -> f64 {
        self.demand_after(self.event_count)
    }

    pub fn validate(&self) -> Vec<ScenarioError> {
        let mut errs = Vec::new();
        let bad = |detail: &str| ScenarioError::InvalidJob {
            job_id: self.id.clone(),
            detail: detail.to_string(),
        };
        if !(self.cpu_work > 0.0) {
            errs.push(bad("cpu_work must be > 0"));
        }
        if self.event_count == 0 {
            errs.push(bad("event_count must be >= 1"));
        }
        if !(self.mem_base >= 0.0) || !(self.mem_per_event >= 0.0) {
            errs.push(bad("memory figures must be >= 0"));
        }
        if !(self.input_size >= 0.0) || !(self.output_size >= 0.0) {
            errs.push(bad("dataset sizes must be >= 0"));
        }
        errs
    }
}

/// Keep-alive contract between a sandboxed job and the service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatPolicy {
    /// Seconds between heartbeats.
    pub interval: f64,
    pub miss_threshold: u32,
    /// Seconds between lease sweeps.
    pub sweep_period: f64,
}

impl Default for HeartbeatPolicy {
    fn default() -> Self {
        Self {
            interval: 30.0,
            miss_threshold: 3,
            sweep_period: 10.0,
        }
    }
}

impl HeartbeatPolicy {
    /// How long a lease survives without a heartbeat.
    pub fn lease(&self) -> f64 {
        self.interval * self.miss_threshold as f64
    }

    pub fn validate(&self) -> Vec<ScenarioError> {
        let mut errs = Vec::new();
        if !(self.interval > 0.0) {
            errs.push(ScenarioError::InvalidHeartbeat("interval must be > 0".into()));
        }
        if self.miss_threshold == 0 {
            errs.push(ScenarioError::InvalidHeartbeat("miss_threshold must be >= 1".into()));
        }
        if !(self.sweep_period > 0.0) || self.sweep_period > self.interval {
            errs.push(ScenarioError::InvalidHeartbeat(
                "sweep_period must be in (0, interval]".into(),
            ));
        }
        errs
    }
}

/// A single constraint violation found while validating a scenario.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("scenario has no domains and no jobs")]
    EmptyScenario,
    #[error("memory over-commit: {requested} MiB requested on a {total} MiB host")]
    OverCommitMemory { requested: u64, total: u64 },
    #[error("domain {domain_id}: bad pinning: {detail}")]
    BadPinning { domain_id: String, detail: String },
    #[error("machine: {0}")]
    InvalidMachine(String),
    #[error("domain {domain_id}: {detail}")]
    InvalidDomain { domain_id: String, detail: String },
    #[error("duplicate domain_id {0}")]
    DuplicateDomain(String),
    #[error("job {job_id}: {detail}")]
    InvalidJob { job_id: String, detail: String },
    #[error("{domains} domains cannot host {jobs} jobs one-to-one")]
    DomainJobMismatch { domains: usize, jobs: usize },
    #[error("heartbeat: {0}")]
    InvalidHeartbeat(String),
    #[error("perf_params: {0}")]
    InvalidPerfParams(String),
}

impl ScenarioError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::EmptyScenario => "EMPTY_SCENARIO",
            ScenarioError::OverCommitMemory { .. } => "OVER_COMMIT_MEMORY",
            ScenarioError::BadPinning { .. } => "BAD_PINNING",
            ScenarioError::InvalidMachine(_) => "INVALID_MACHINE",
            ScenarioError::InvalidDomain { .. } => "INVALID_DOMAIN",
            ScenarioError::DuplicateDomain(_) => "DUPLICATE_DOMAIN",
            ScenarioError::InvalidJob { .. } => "INVALID_JOB",
            ScenarioError::DomainJobMismatch { .. } => "DOMAIN_JOB_MISMATCH",
            ScenarioError::InvalidHeartbeat(_) => "INVALID_HEARTBEAT",
            ScenarioError::InvalidPerfParams(_) => "INVALID_PERF_PARAMS",
        }
    }
}

/// Every violation found in one validation pass.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationErrors(pub Vec<ScenarioError>);

impl ValidationErrors {
    pub fn codes(&self) -> Vec<&'static str> {
        self.0.iter().map(ScenarioError::code).collect()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.0.iter().any(|e| e.code() == code)
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Host, domains and jobs that passed [`validate_scenario`].
///
/// Fields are private so a value of this type always satisfies the
/// invariants it was checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedScenario {
    machine: MachineSpec,
    domains: Vec<DomainConfig>,
    jobs: Vec<JobSpec>,
}

impl ValidatedScenario {
    pub fn machine(&self) -> &MachineSpec {
        &self.machine
    }

    pub fn domains(&self) -> &[DomainConfig] {
        &self.domains
    }

    pub fn jobs(&self) -> &[JobSpec] {
        &self.jobs
    }
}

fn machine_errors(machine: &MachineSpec) -> Vec<ScenarioError> {
    let mut errs = Vec::new();
    if machine.pcpus == 0 {
        errs.push(ScenarioError::InvalidMachine("pcpus must be >= 1".into()));
    }
    if machine.dom0_memory >= machine.total_memory {
        errs.push(ScenarioError::InvalidMachine(
            "dom0_memory must be below total_memory".into(),
        ));
    }
    if !(machine.nic_bandwidth > 0.0) {
        errs.push(ScenarioError::InvalidMachine("nic_bandwidth must be > 0".into()));
    }
    errs
}

/// Pinning constraints of one domain against a host.
pub(crate) fn pinning_errors(machine: &MachineSpec, dom: &DomainConfig) -> Vec<ScenarioError> {
    let mut errs = Vec::new();
    if let Pinning::Pinned(list) = &dom.pinning {
        if list.is_empty() {
            errs.push(ScenarioError::BadPinning {
                domain_id: dom.domain_id.clone(),
                detail: "empty pCPU list".into(),
            });
        }
        for &p in list {
            if p >= machine.pcpus {
                errs.push(ScenarioError::BadPinning {
                    domain_id: dom.domain_id.clone(),
                    detail: format!("pCPU {p} out of range (host has {})", machine.pcpus),
                });
            }
        }
    }
    errs
}

/// Check a host, its domains and the jobs to run on it.
///
/// Returns every violated constraint rather than stopping at the first.
pub fn validate_scenario(
    machine: &MachineSpec,
    domains: &[DomainConfig],
    jobs: &[JobSpec],
) -> Result<ValidatedScenario, ValidationErrors> {
    let mut errs = Vec::new();
    if domains.is_empty() && jobs.is_empty() {
        errs.push(ScenarioError::EmptyScenario);
    }
    errs.extend(machine_errors(machine));

    let mut seen = BTreeSet::new();
    for dom in domains {
        errs.extend(dom.validate());
        errs.extend(pinning_errors(machine, dom));
        if !seen.insert(dom.domain_id.as_str()) {
            errs.push(ScenarioError::DuplicateDomain(dom.domain_id.clone()));
        }
    }

    let requested: u64 = domains.iter().map(|d| d.memory).sum::<u64>() + machine.dom0_memory;
    if requested > machine.total_memory {
        errs.push(ScenarioError::OverCommitMemory {
            requested,
            total: machine.total_memory,
        });
    }

    for job in jobs {
        errs.extend(job.validate());
    }

    if errs.is_empty() {
        Ok(ValidatedScenario {
            machine: machine.clone(),
            domains: domains.to_vec(),
            jobs: jobs.to_vec(),
        })
    } else {
        Err(ValidationErrors(errs))
    }
}

/// Relative slowdown of a run against a baseline, in percent.
///
/// The value is not rounded; see [`display_overhead`] for the integer form
/// used in reports.
pub fn overhead_percent(t_measured: f64, t_baseline: f64) -> Result<f64, OverheadError> {
    if !(t_baseline > 0.0) {
        return Err(OverheadError::NonPositiveBaseline(t_baseline));
    }
    Ok(100.0 * (t_measured - t_baseline) / t_baseline)
}

/// Round an overhead to the nearest whole percent.
pub fn display_overhead(pct: f64) -> i64 {
    pct.round() as i64
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OverheadError {
    #[error("NON_POSITIVE_BASELINE: baseline must be > 0, got {0}")]
    NonPositiveBaseline(f64),
}

/// A scenario file: a host, its guests, the jobs to run and model tuning.
///
/// When `domains` is empty every job runs directly on the host. Otherwise
/// job `i` runs inside domain `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Label used for metrics rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub machine: MachineSpec,
    #[serde(default)]
    pub domains: Vec<DomainConfig>,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
    #[serde(default)]
    pub perf_params: PerfParams,
    #[serde(default)]
    pub heartbeat: HeartbeatPolicy,
}

#[derive(Debug, Error)]
pub enum ScenarioLoadError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing scenario: {0}")]
    Parse(#[from] serde_json::Error),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioLoadError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioLoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioLoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or("scenario")
    }

    /// Full validation: host, domains, jobs, lease policy and model curves.
    pub fn validate(&self) -> Result<ValidatedScenario, ValidationErrors> {
        let base = validate_scenario(&self.machine, &self.domains, &self.jobs);
        let mut extra = self.heartbeat.validate();
        extra.extend(self.perf_params.validate());
        if !self.domains.is_empty() && self.domains.len() != self.jobs.len() {
            extra.push(ScenarioError::DomainJobMismatch {
                domains: self.domains.len(),
                jobs: self.jobs.len(),
            });
        }
        match base {
            Ok(v) if extra.is_empty() => Ok(v),
            Ok(_) => Err(ValidationErrors(extra)),
            Err(ValidationErrors(mut errs)) => {
                errs.extend(extra);
                Err(ValidationErrors(errs))
            }
        }
    }
}
