// SPDX-License-Identifier: Apache-2.0

//! The workspace service: volumes, VM lifecycle and heartbeat leases on a
//! simulated host.
//!
//! A workspace moves through
//!
//! ```text
//! REQUESTED -> PROVISIONED -> MOUNTED <-> UNMOUNTED -> RUNNING -> STOPPED -> REMOVED
//! ```
//!
//! with two abort exits (PROVISIONED and UNMOUNTED may be removed directly)
//! and a single boot per workspace. The service owns a virtual clock that
//! only its caller advances; lease sweeps fire on every `sweep_period`
//! boundary the clock crosses.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{pinning_errors, DomainConfig, HeartbeatPolicy, MachineSpec, ValidationErrors};
use crate::perf::PerfParams;
use crate::sched::steady_state_shares;

/// The image every simulated engine carries.
pub const DEFAULT_IMAGE: &str = "slc4";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkspaceState {
    Requested,
    Provisioned,
    Mounted,
    Unmounted,
    Running,
    Stopped,
    Removed,
}

impl WorkspaceState {
    pub const ALL: [WorkspaceState; 7] = [
        WorkspaceState::Requested,
        WorkspaceState::Provisioned,
        WorkspaceState::Mounted,
        WorkspaceState::Unmounted,
        WorkspaceState::Running,
        WorkspaceState::Stopped,
        WorkspaceState::Removed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkspaceState::Requested => "REQUESTED",
            WorkspaceState::Provisioned => "PROVISIONED",
            WorkspaceState::Mounted => "MOUNTED",
            WorkspaceState::Unmounted => "UNMOUNTED",
            WorkspaceState::Running => "RUNNING",
            WorkspaceState::Stopped => "STOPPED",
            WorkspaceState::Removed => "REMOVED",
        }
    }
}

/// The declared transition relation.
pub fn transition_allowed(from: WorkspaceState, to: WorkspaceState) -> bool {
    use WorkspaceState::*;
    matches!(
        (from, to),
        (Requested, Provisioned)
            | (Provisioned, Mounted)
            | (Mounted, Unmounted)
            | (Unmounted, Mounted)
            | (Unmounted, Running)
            | (Running, Stopped)
            | (Stopped, Removed)
            | (Provisioned, Removed)
            | (Unmounted, Removed)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceRecord {
    pub workspace_id: String,
    pub state: WorkspaceState,
    pub domain: DomainConfig,
    pub image_id: String,
    /// GB.
    pub volume_size: f64,
    /// Unset until the VM boots.
    pub last_heartbeat: Option<f64>,
    pub created_at: f64,
    /// The engine is busy with this workspace until then; calls that need
    /// the engine are refused before it.
    pub busy_until: f64,
    /// Contextualization payload, file name to contents.
    pub context: BTreeMap<String, String>,
    pub booted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestReceipt {
    pub workspace_id: String,
    pub ready_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopReceipt {
    pub busy_until: f64,
}

/// What a client can see of a workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceStatus {
    pub workspace_id: String,
    pub state: WorkspaceState,
    pub domain: DomainConfig,
    pub last_heartbeat: Option<f64>,
    pub busy_until: f64,
}

impl From<&WorkspaceRecord> for WorkspaceStatus {
    fn from(r: &WorkspaceRecord) -> Self {
        Self {
            workspace_id: r.workspace_id.clone(),
            state: r.state,
            domain: r.domain.clone(),
            last_heartbeat: r.last_heartbeat,
            busy_until: r.busy_until,
        }
    }
}

/// One accepted state change, for audit and property tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub at: f64,
    pub workspace_id: String,
    pub from: WorkspaceState,
    pub to: WorkspaceState,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VirmError {
    #[error("UNKNOWN_WORKSPACE: {0}")]
    UnknownWorkspace(String),
    #[error("BAD_STATE: cannot {op} workspace {workspace_id} in {state:?}")]
    BadState {
        workspace_id: String,
        op: String,
        state: WorkspaceState,
    },
    #[error("BAD_STATE: workspace {workspace_id} busy until t={until}")]
    Busy { workspace_id: String, until: f64 },
    #[error("UNKNOWN_IMAGE: {0}")]
    UnknownImage(String),
    #[error("INSUFFICIENT_CAPACITY: {requested} MiB requested, {available} MiB free")]
    InsufficientCapacity { requested: u64, available: u64 },
    #[error("validation failed: {0}")]
    Validation(ValidationErrors),
    #[error("INVALID_REQUEST: {0}")]
    InvalidRequest(String),
    #[error("CLOCK_REVERSAL: clock at {now}, asked for {requested}")]
    ClockReversal { now: f64, requested: f64 },
    #[error("engine: {0}")]
    Engine(String),
    /// Error reported by a remote service, reconstructed from its body.
    #[error("{code}: {detail}")]
    Remote { code: String, detail: String },
    #[error("TRANSPORT: {0}")]
    Transport(String),
}

impl VirmError {
    pub fn code(&self) -> &str {
        match self {
            VirmError::UnknownWorkspace(_) => "UNKNOWN_WORKSPACE",
            VirmError::BadState { .. } | VirmError::Busy { .. } => "BAD_STATE",
            VirmError::UnknownImage(_) => "UNKNOWN_IMAGE",
            VirmError::InsufficientCapacity { .. } => "INSUFFICIENT_CAPACITY",
            VirmError::Validation(_) => "VALIDATION_FAILED",
            VirmError::InvalidRequest(_) => "INVALID_REQUEST",
            VirmError::ClockReversal { .. } => "CLOCK_REVERSAL",
            VirmError::Engine(_) => "ENGINE_ERROR",
            VirmError::Remote { code, .. } => code,
            VirmError::Transport(_) => "TRANSPORT",
        }
    }
}

/// Handle to a volume held by a deployment engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VolumeHandle(pub u64);

/// Handle to a booted VM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VmHandle(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EngineCall {
    Provision { volume: VolumeHandle, image: String },
    Attach(VolumeHandle),
    Detach(VolumeHandle),
    Boot { volume: VolumeHandle, vm: VmHandle, domain_id: String },
    Shutdown(VmHandle),
    Destroy(VolumeHandle),
}

/// Back end that actually creates volumes and VMs.
pub trait DeploymentEngine: Send {
    fn knows_image(&self, image: &str) -> bool;
    fn provision_volume(&mut self, image: &str, size_gb: f64) -> Result<VolumeHandle, String>;
    fn attach(&mut self, volume: VolumeHandle) -> Result<(), String>;
    fn detach(&mut self, volume: VolumeHandle) -> Result<(), String>;
    /// Needs a detached volume that has been attached at least once.
    fn boot(&mut self, domain: &DomainConfig, volume: VolumeHandle) -> Result<VmHandle, String>;
    fn shutdown(&mut self, vm: VmHandle) -> Result<(), String>;
    /// Refused while a VM booted from the volume is still up.
    fn destroy_volume(&mut self, volume: VolumeHandle) -> Result<(), String>;
    /// Calls made so far, oldest first. Engines that keep no log return
    /// an empty list.
    fn call_log(&self) -> Vec<EngineCall> {
        Vec::new()
    }
}

#[derive(Debug, Default)]
struct SimVolume {
    attached: bool,
    contextualized: bool,
    vm: Option<VmHandle>,
}

/// In-memory engine that checks the lifecycle contract and logs each call.
#[derive(Debug)]
pub struct SimulatedEngine {
    images: BTreeSet<String>,
    volumes: BTreeMap<VolumeHandle, SimVolume>,
    vms: BTreeMap<VmHandle, VolumeHandle>,
    next_id: u64,
    log: Vec<EngineCall>,
}

impl Default for SimulatedEngine {
    fn default() -> Self {
        Self::new()
    }
}

impl SimulatedEngine {
    pub fn new() -> Self {
        Self::with_images([DEFAULT_IMAGE])
    }

    pub fn with_images<I, S>(images: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            images: images.into_iter().map(Into::into).collect(),
            volumes: BTreeMap::new(),
            vms: BTreeMap::new(),
            next_id: 1,
            log: Vec::new(),
        }
    }

    fn volume(&mut self, v: VolumeHandle) -> Result<&mut SimVolume, String> {
        self.volumes
            .get_mut(&v)
            .ok_or_else(|| format!("no volume {}", v.0))
    }
}

impl DeploymentEngine for SimulatedEngine {
    fn knows_image(&self, image: &str) -> bool {
        self.images.contains(image)
    }

    fn provision_volume(&mut self, image: &str, _size_gb: f64) -> Result<VolumeHandle, String> {
        if !self.knows_image(image) {
            return Err(format!("unknown image {image}"));
        }
        let h = VolumeHandle(self.next_id);
        self.next_id += 1;
        self.volumes.insert(h, SimVolume::default());
        self.log.push(EngineCall::Provision {
            volume: h,
            image: image.to_string(),
        });
        Ok(h)
    }

    fn attach(&mut self, volume: VolumeHandle) -> Result<(), String> {
        let v = self.volume(volume)?;
        if v.attached || v.vm.is_some() {
            return Err("volume busy".into());
        }
        v.attached = true;
        self.log.push(EngineCall::Attach(volume));
        Ok(())
    }

    fn detach(&mut self, volume: VolumeHandle) -> Result<(), String> {
        let v = self.volume(volume)?;
        if !v.attached {
            return Err("volume not attached".into());
        }
        v.attached = false;
        v.contextualized = true;
        self.log.push(EngineCall::Detach(volume));
        Ok(())
    }

    fn boot(&mut self, domain: &DomainConfig, volume: VolumeHandle) -> Result<VmHandle, String> {
        let vm = VmHandle(self.next_id);
        let v = self.volume(volume)?;
        if v.attached || !v.contextualized || v.vm.is_some() {
            return Err("boot needs a detached, contextualized, idle volume".into());
        }
        v.vm = Some(vm);
        self.next_id += 1;
        self.vms.insert(vm, volume);
        self.log.push(EngineCall::Boot {
            volume,
            vm,
            domain_id: domain.domain_id.clone(),
        });
        Ok(vm)
    }

    fn shutdown(&mut self, vm: VmHandle) -> Result<(), String> {
        let volume = self
            .vms
            .remove(&vm)
            .ok_or_else(|| format!("no vm {}", vm.0))?;
        self.volume(volume)?.vm = None;
        self.log.push(EngineCall::Shutdown(vm));
        Ok(())
    }

    fn destroy_volume(&mut self, volume: VolumeHandle) -> Result<(), String> {
        let v = self.volume(volume)?;
        if v.vm.is_some() {
            return Err("volume still has a running vm".into());
        }
        self.volumes.remove(&volume);
        self.log.push(EngineCall::Destroy(volume));
        Ok(())
    }

    fn call_log(&self) -> Vec<EngineCall> {
        self.log.clone()
    }
}

/// True when the log never destroys a volume whose VM is still up.
pub fn destroy_follows_shutdown(log: &[EngineCall]) -> bool {
    let mut live: BTreeMap<VmHandle, VolumeHandle> = BTreeMap::new();
    for call in log {
        match call {
            EngineCall::Boot { volume, vm, .. } => {
                live.insert(*vm, *volume);
            }
            EngineCall::Shutdown(vm) => {
                live.remove(vm);
            }
            EngineCall::Destroy(volume)
                if live.values().any(|v| v == volume) => {
                    return false;
                }
            _ => {}
        }
    }
    true
}

/// Domains currently running on the host, and their CPU shares.
///
/// Shares are measured by running the credit scheduler with every running
/// domain CPU-bound and are cached until the set of domains changes.
#[derive(Debug, Clone)]
pub struct HostModel {
    machine: MachineSpec,
    running: BTreeMap<String, DomainConfig>,
    shares: Option<BTreeMap<String, f64>>,
    epoch: u64,
}

impl HostModel {
    pub fn new(machine: MachineSpec) -> Self {
        Self {
            machine,
            running: BTreeMap::new(),
            shares: None,
            epoch: 0,
        }
    }

    pub fn machine(&self) -> &MachineSpec {
        &self.machine
    }

    pub fn register(&mut self, domain: &DomainConfig) {
        self.running
            .insert(domain.domain_id.clone(), domain.clone());
        self.shares = None;
        self.epoch += 1;
    }

    pub fn unregister(&mut self, domain_id: &str) {
        if self.running.remove(domain_id).is_some() {
            self.shares = None;
            self.epoch += 1;
        }
    }

    pub fn is_running(&self, domain_id: &str) -> bool {
        self.running.contains_key(domain_id)
    }

    pub fn running_count(&self) -> u32 {
        self.running.len() as u32
    }

    /// Bumped on every change to the running set.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Physical CPUs each running domain receives; absent domains get 0.
    pub fn shares(&mut self) -> &BTreeMap<String, f64> {
        if self.shares.is_none() {
            let doms: Vec<DomainConfig> = self.running.values().cloned().collect();
            let s = if doms.is_empty() {
                BTreeMap::new()
            } else {
                steady_state_shares(
                    &self.machine,
                    &doms,
                    crate::calibrate::SHARE_WARMUP_S,
                    crate::calibrate::SHARE_WINDOW_S,
                )
            };
            self.shares = Some(s);
        }
        self.shares.as_ref().expect("just filled")
    }

    pub fn share(&mut self, domain_id: &str) -> f64 {
        self.shares().get(domain_id).copied().unwrap_or(0.0)
    }
}

struct Inner {
    now: f64,
    next_sweep: f64,
    next_id: u64,
    records: BTreeMap<String, WorkspaceRecord>,
    volumes: BTreeMap<String, VolumeHandle>,
    vms: BTreeMap<String, VmHandle>,
    transitions: Vec<Transition>,
    engine: Box<dyn DeploymentEngine>,
    host: HostModel,
}

/// The workspace service. Safe to share between threads; every call is
/// serialized through one lock, so operations on a workspace never
/// interleave.
pub struct VirmService {
    machine: MachineSpec,
    policy: HeartbeatPolicy,
    k_setup_shutdown: f64,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for VirmService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VirmService")
            .field("machine", &self.machine)
            .field("policy", &self.policy)
            .field("now", &self.now())
            .finish()
    }
}

impl VirmService {
    pub fn new(
        machine: MachineSpec,
        params: &PerfParams,
        policy: HeartbeatPolicy,
        engine: Box<dyn DeploymentEngine>,
    ) -> Self {
        let host = HostModel::new(machine.clone());
        Self {
            machine,
            k_setup_shutdown: params.k_setup_shutdown,
            inner: Mutex::new(Inner {
                now: 0.0,
                next_sweep: policy.sweep_period,
                next_id: 1,
                records: BTreeMap::new(),
                volumes: BTreeMap::new(),
                vms: BTreeMap::new(),
                transitions: Vec::new(),
                engine,
                host,
            }),
            policy,
        }
    }

    /// Service on the default host with the simulated engine.
    pub fn simulated(machine: MachineSpec, params: &PerfParams, policy: HeartbeatPolicy) -> Self {
        Self::new(machine, params, policy, Box::new(SimulatedEngine::new()))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // a panic while holding the lock leaves the records consistent:
        // every mutation is applied only after its checks pass
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn machine(&self) -> &MachineSpec {
        &self.machine
    }

    pub fn policy(&self) -> &HeartbeatPolicy {
        &self.policy
    }

    pub fn now(&self) -> f64 {
        self.lock().now
    }

    /// Move the clock forward, running a lease sweep at every sweep
    /// boundary crossed (including `t` itself). Returns the ids stopped.
    pub fn advance_clock_to(&self, t: f64) -> Result<Vec<String>, VirmError> {
        let mut g = self.lock();
        if t < g.now {
            return Err(VirmError::ClockReversal {
                now: g.now,
                requested: t,
            });
        }
        let mut expired = Vec::new();
        while g.next_sweep <= t {
            let at = g.next_sweep;
            g.now = at;
            expired.extend(self.sweep_locked(&mut g, at));
            g.next_sweep = at + self.policy.sweep_period;
        }
        g.now = t;
        Ok(expired)
    }

    pub fn advance_by(&self, dt: f64) -> Result<Vec<String>, VirmError> {
        let t = self.now() + dt;
        self.advance_clock_to(t)
    }

    /// Time of the next scheduled lease sweep.
    pub fn next_sweep(&self) -> f64 {
        self.lock().next_sweep
    }

    fn set_state(&self, g: &mut Inner, id: &str, to: WorkspaceState) {
        let now = g.now;
        let rec = g.records.get_mut(id).expect("caller checked");
        debug_assert!(transition_allowed(rec.state, to), "{:?} -> {:?}", rec.state, to);
        g.transitions.push(Transition {
            at: now,
            workspace_id: id.to_string(),
            from: rec.state,
            to,
        });
        rec.state = to;
    }

    fn record<'a>(g: &'a Inner, id: &str) -> Result<&'a WorkspaceRecord, VirmError> {
        g.records
            .get(id)
            .ok_or_else(|| VirmError::UnknownWorkspace(id.to_string()))
    }

    /// Check the workspace exists, is idle and is in one of `allowed`.
    fn expect(g: &Inner, id: &str, op: &str, allowed: &[WorkspaceState]) -> Result<(), VirmError> {
        let rec = Self::record(g, id)?;
        if !allowed.contains(&rec.state) {
            return Err(VirmError::BadState {
                workspace_id: id.to_string(),
                op: op.to_string(),
                state: rec.state,
            });
        }
        if g.now < rec.busy_until {
            return Err(VirmError::Busy {
                workspace_id: id.to_string(),
                until: rec.busy_until,
            });
        }
        Ok(())
    }

    /// Provision a volume from `image_id` and reserve `domain`'s memory.
    /// The workspace becomes usable after half of the setup/shutdown time.
    pub fn request_diskspace(
        &self,
        image_id: &str,
        size_gb: f64,
        domain: &DomainConfig,
    ) -> Result<RequestReceipt, VirmError> {
        let mut errs = domain.validate();
        errs.extend(pinning_errors(&self.machine, domain));
        if !errs.is_empty() {
            return Err(VirmError::Validation(ValidationErrors(errs)));
        }
        if !(size_gb > 0.0 && size_gb.is_finite()) {
            return Err(VirmError::InvalidRequest(format!(
                "volume size must be positive, got {size_gb}"
            )));
        }
        let mut g = self.lock();
        if !g.engine.knows_image(image_id) {
            return Err(VirmError::UnknownImage(image_id.to_string()));
        }
        if g.records.values().any(|r| r.domain.domain_id == domain.domain_id) {
            return Err(VirmError::InvalidRequest(format!(
                "domain {} already has a workspace",
                domain.domain_id
            )));
        }
        let used: u64 = g.records.values().map(|r| r.domain.memory).sum::<u64>()
            + self.machine.dom0_memory;
        let available = self.machine.total_memory.saturating_sub(used);
        if domain.memory > available {
            return Err(VirmError::InsufficientCapacity {
                requested: domain.memory,
                available,
            });
        }
        let volume = g
            .engine
            .provision_volume(image_id, size_gb)
            .map_err(VirmError::Engine)?;

        let id = format!("ws-{:04}", g.next_id);
        g.next_id += 1;
        let now = g.now;
        let ready_at = now + self.k_setup_shutdown / 2.0;
        g.records.insert(
            id.clone(),
            WorkspaceRecord {
                workspace_id: id.clone(),
                state: WorkspaceState::Requested,
                domain: domain.clone(),
                image_id: image_id.to_string(),
                volume_size: size_gb,
                last_heartbeat: None,
                created_at: now,
                busy_until: ready_at,
                context: BTreeMap::new(),
                booted: false,
            },
        );
        g.volumes.insert(id.clone(), volume);
        self.set_state(&mut g, &id, WorkspaceState::Provisioned);
        Ok(RequestReceipt {
            workspace_id: id,
            ready_at,
        })
    }

    pub fn mount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        use WorkspaceState::*;
        let mut g = self.lock();
        Self::expect(&g, id, "mount", &[Provisioned, Unmounted])?;
        let v = g.volumes[id];
        g.engine.attach(v).map_err(VirmError::Engine)?;
        self.set_state(&mut g, id, Mounted);
        Ok(())
    }

    pub fn unmount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        let mut g = self.lock();
        Self::expect(&g, id, "unmount", &[WorkspaceState::Mounted])?;
        let v = g.volumes[id];
        g.engine.detach(v).map_err(VirmError::Engine)?;
        self.set_state(&mut g, id, WorkspaceState::Unmounted);
        Ok(())
    }

    /// Write contextualization files into a mounted workspace. Existing
    /// files with the same name are replaced.
    pub fn write_context(&self, id: &str, files: &BTreeMap<String, String>) -> Result<(), VirmError> {
        let mut g = self.lock();
        Self::expect(&g, id, "write context to", &[WorkspaceState::Mounted])?;
        let rec = g.records.get_mut(id).expect("checked");
        rec.context
            .extend(files.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(())
    }

    /// Boot the VM and register its domain with the host.
    pub fn start_vm(&self, id: &str) -> Result<(), VirmError> {
        let mut g = self.lock();
        Self::expect(&g, id, "start", &[WorkspaceState::Unmounted])?;
        let volume = g.volumes[id];
        let domain = g.records[id].domain.clone();
        let vm = g.engine.boot(&domain, volume).map_err(VirmError::Engine)?;
        g.vms.insert(id.to_string(), vm);
        g.host.register(&domain);
        let now = g.now;
        let rec = g.records.get_mut(id).expect("checked");
        rec.last_heartbeat = Some(now);
        rec.booted = true;
        self.set_state(&mut g, id, WorkspaceState::Running);
        Ok(())
    }

    /// Shut the VM down. The workspace can be removed after the shutdown
    /// half of the setup/shutdown time.
    pub fn stop_vm(&self, id: &str) -> Result<StopReceipt, VirmError> {
        let mut g = self.lock();
        Self::expect(&g, id, "stop", &[WorkspaceState::Running])?;
        let busy_until = self.stop_locked(&mut g, id)?;
        Ok(StopReceipt { busy_until })
    }

    fn stop_locked(&self, g: &mut Inner, id: &str) -> Result<f64, VirmError> {
        let vm = g.vms[id];
        g.engine.shutdown(vm).map_err(VirmError::Engine)?;
        g.vms.remove(id);
        let dom_id = g.records[id].domain.domain_id.clone();
        g.host.unregister(&dom_id);
        let busy_until = g.now + self.k_setup_shutdown / 2.0;
        g.records.get_mut(id).expect("checked").busy_until = busy_until;
        self.set_state(g, id, WorkspaceState::Stopped);
        Ok(busy_until)
    }

    /// Destroy the volume. The record is dropped; the id is never reused.
    pub fn remove_diskspace(&self, id: &str) -> Result<(), VirmError> {
        use WorkspaceState::*;
        let mut g = self.lock();
        Self::expect(&g, id, "remove", &[Stopped, Provisioned, Unmounted])?;
        let v = g.volumes[id];
        g.engine.destroy_volume(v).map_err(VirmError::Engine)?;
        g.volumes.remove(id);
        self.set_state(&mut g, id, Removed);
        g.records.remove(id);
        Ok(())
    }

    /// Renew the lease; returns its new expiry.
    pub fn heartbeat(&self, id: &str) -> Result<f64, VirmError> {
        let mut g = self.lock();
        Self::expect(&g, id, "heartbeat", &[WorkspaceState::Running])?;
        let now = g.now;
        g.records.get_mut(id).expect("checked").last_heartbeat = Some(now);
        Ok(now + self.policy.lease())
    }

    /// Stop every RUNNING workspace whose lease ran out before `now`.
    pub fn lease_sweep(&self, now: f64) -> Vec<String> {
        let mut g = self.lock();
        self.sweep_locked(&mut g, now)
    }

    fn sweep_locked(&self, g: &mut Inner, now: f64) -> Vec<String> {
        let lease = self.policy.lease();
        let expired: Vec<String> = g
            .records
            .values()
            .filter(|r| r.state == WorkspaceState::Running)
            .filter(|r| now - r.last_heartbeat.unwrap_or(r.created_at) > lease)
            .map(|r| r.workspace_id.clone())
            .collect();
        let mut stopped = Vec::new();
        for id in expired {
            if self.stop_locked(g, &id).is_ok() {
                stopped.push(id);
            }
        }
        stopped
    }

    pub fn status(&self, id: &str) -> Result<WorkspaceStatus, VirmError> {
        let g = self.lock();
        Self::record(&g, id).map(WorkspaceStatus::from)
    }

    pub fn record_of(&self, id: &str) -> Result<WorkspaceRecord, VirmError> {
        let g = self.lock();
        Self::record(&g, id).cloned()
    }

    /// All live (non-removed) workspaces.
    pub fn workspaces(&self) -> Vec<WorkspaceRecord> {
        self.lock().records.values().cloned().collect()
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.lock().transitions.clone()
    }

    pub fn engine_log(&self) -> Vec<EngineCall> {
        self.lock().engine.call_log()
    }

    /// Memory held by live workspaces plus Dom_0.
    pub fn committed_memory(&self) -> u64 {
        self.lock()
            .records
            .values()
            .map(|r| r.domain.memory)
            .sum::<u64>()
            + self.machine.dom0_memory
    }

    pub fn host_epoch(&self) -> u64 {
        self.lock().host.epoch()
    }

    pub fn running_domains(&self) -> u32 {
        self.lock().host.running_count()
    }

    pub fn is_domain_running(&self, domain_id: &str) -> bool {
        self.lock().host.is_running(domain_id)
    }

    /// CPU shares of the running domains, in physical CPUs.
    pub fn cpu_shares(&self) -> BTreeMap<String, f64> {
        self.lock().host.shares().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svc() -> VirmService {
        VirmService::simulated(
            MachineSpec::default(),
            &PerfParams::default(),
            HeartbeatPolicy::default(),
        )
    }

    fn dom(id: &str) -> DomainConfig {
        DomainConfig::new(id, 4, 2048)
    }

    /// Request, wait out provisioning, mount, unmount, start.
    fn running(s: &VirmService, d: &str) -> String {
        let r = s.request_diskspace(DEFAULT_IMAGE, 10.0, &dom(d)).unwrap();
        s.advance_clock_to(r.ready_at).unwrap();
        s.mount_diskspace(&r.workspace_id).unwrap();
        s.unmount_diskspace(&r.workspace_id).unwrap();
        s.start_vm(&r.workspace_id).unwrap();
        r.workspace_id
    }

    #[test]
    fn request_provisions_after_half_k() {
        let s = svc();
        let r = s.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm1")).unwrap();
        assert_eq!(r.workspace_id, "ws-0001");
        assert_eq!(r.ready_at, 90.0);
        assert_eq!(s.status(&r.workspace_id).unwrap().state, WorkspaceState::Provisioned);
        assert_eq!(s.mount_diskspace(&r.workspace_id).unwrap_err().code(), "BAD_STATE");
    }

    #[test]
    fn unknown_image_and_capacity() {
        let s = svc();
        assert_eq!(
            s.request_diskspace("fedora", 10.0, &dom("vm1")).unwrap_err().code(),
            "UNKNOWN_IMAGE"
        );
        for i in 1..=3 {
            s.request_diskspace(DEFAULT_IMAGE, 10.0, &dom(&format!("vm{i}")))
                .unwrap();
        }
        assert_eq!(
            s.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm4")).unwrap_err(),
            VirmError::InsufficientCapacity {
                requested: 2048,
                available: 0
            }
        );
    }

    #[test]
    fn context_survives_remount() {
        let s = svc();
        let r = s.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm1")).unwrap();
        let id = r.workspace_id;
        s.advance_clock_to(r.ready_at).unwrap();
        s.mount_diskspace(&id).unwrap();
        let files = BTreeMap::from([("env".to_string(), "JOB_ID=1".to_string())]);
        s.write_context(&id, &files).unwrap();
        s.unmount_diskspace(&id).unwrap();
        s.mount_diskspace(&id).unwrap();
        assert_eq!(s.record_of(&id).unwrap().context, files);
    }

    #[test]
    fn start_requires_unmount() {
        let s = svc();
        let r = s.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm1")).unwrap();
        s.advance_clock_to(r.ready_at).unwrap();
        s.mount_diskspace(&r.workspace_id).unwrap();
        assert_eq!(s.start_vm(&r.workspace_id).unwrap_err().code(), "BAD_STATE");
    }

    #[test]
    fn start_registers_and_stop_unregisters() {
        let s = svc();
        let id = running(&s, "vm1");
        assert!(s.is_domain_running("vm1"));
        assert_eq!(s.cpu_shares()["vm1"], 4.0);
        assert_eq!(s.mount_diskspace(&id).unwrap_err().code(), "BAD_STATE");
        assert_eq!(s.remove_diskspace(&id).unwrap_err().code(), "BAD_STATE");
        let stop = s.stop_vm(&id).unwrap();
        assert_eq!(stop.busy_until, 90.0 + 90.0);
        assert!(s.cpu_shares().is_empty());
        assert_eq!(s.remove_diskspace(&id).unwrap_err().code(), "BAD_STATE");
        s.advance_clock_to(stop.busy_until).unwrap();
        s.remove_diskspace(&id).unwrap();
        assert_eq!(s.status(&id).unwrap_err().code(), "UNKNOWN_WORKSPACE");
        assert_eq!(s.heartbeat(&id).unwrap_err().code(), "UNKNOWN_WORKSPACE");
        assert!(destroy_follows_shutdown(&s.engine_log()));
    }

    #[test]
    fn ids_are_not_reused() {
        let s = svc();
        let r = s.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm1")).unwrap();
        s.advance_clock_to(r.ready_at).unwrap();
        s.remove_diskspace(&r.workspace_id).unwrap();
        let r2 = s.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm1")).unwrap();
        assert_eq!(r2.workspace_id, "ws-0002");
    }

    #[test]
    fn heartbeat_extends_lease() {
        let s = VirmService::simulated(
            MachineSpec::default(),
            &PerfParams {
                k_setup_shutdown: 0.0,
                ..PerfParams::default()
            },
            HeartbeatPolicy::default(),
        );
        let id = running(&s, "vm1");
        assert_eq!(s.heartbeat(&id).unwrap(), 90.0);
        s.advance_clock_to(30.0).unwrap();
        assert_eq!(s.heartbeat(&id).unwrap(), 120.0);
    }

    #[test]
    fn sweep_threshold_is_strict() {
        let s = VirmService::simulated(
            MachineSpec::default(),
            &PerfParams {
                k_setup_shutdown: 0.0,
                ..PerfParams::default()
            },
            HeartbeatPolicy {
                sweep_period: 1000.0,
                ..HeartbeatPolicy::default()
            },
        );
        assert!(s.lease_sweep(0.0).is_empty());
        let id = running(&s, "vm1");
        assert!(s.lease_sweep(89.0).is_empty());
        assert!(s.lease_sweep(90.0).is_empty());
        assert_eq!(s.lease_sweep(91.0), vec![id.clone()]);
        assert_eq!(s.status(&id).unwrap().state, WorkspaceState::Stopped);
        assert_eq!(s.heartbeat(&id).unwrap_err().code(), "BAD_STATE");
    }

    #[test]
    fn clock_sweeps_on_boundaries() {
        let s = svc();
        let id = running(&s, "vm1");
        let started = s.now();
        let expired = s.advance_clock_to(started + 100.0).unwrap();
        assert_eq!(expired, vec![id]);
        assert!(s.advance_clock_to(0.0).is_err());
    }

    #[test]
    fn transition_relation() {
        use WorkspaceState::*;
        assert!(transition_allowed(Unmounted, Mounted));
        assert!(!transition_allowed(Mounted, Running));
        assert!(!transition_allowed(Running, Removed));
        assert!(WorkspaceState::ALL
            .iter()
            .all(|&to| !transition_allowed(Removed, to)));
    }
}
