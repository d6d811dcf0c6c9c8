// SPDX-License-Identifier: Apache-2.0

//! The pilot: one job through detect, environment preparation, stage-in,
//! optional VM sandbox, execution, teardown and stage-out.
//!
//! The pilot is a step function over virtual time. Whoever owns the clock
//! calls [`Pilot::step`] whenever [`Pilot::next_wake`] comes due; a step does
//! everything that can happen at that instant and then sets its next wake.
//! The service is reached through [`VirmApi`], which the in-process service,
//! the HTTP client and the test wrappers all implement.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainConfig, HeartbeatPolicy, JobSpec, MachineSpec};
use crate::exec::{ExecStatus, JobHandle, JobOutcome, JobResult, Placement, SimExecutor};
use crate::perf::{transfer_time, EndpointKind, PerfParams};
use crate::virm::{
    RequestReceipt, StopReceipt, VirmError, VirmService, WorkspaceState, WorkspaceStatus,
    DEFAULT_IMAGE,
};

pub const DEFAULT_STATUS_INTERVAL: f64 = 300.0;
/// Seconds the pilot waits for the service identity probe.
pub const PROBE_TIMEOUT_S: f64 = 2.0;
/// Size of the error-log bundle shipped instead of output on failure, GB.
pub const ERROR_BUNDLE_GB: f64 = 0.01;
pub const DEFAULT_VOLUME_GB: f64 = 10.0;
const MAX_TEARDOWN_ATTEMPTS: u32 = 8;
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Direct,
    Virtualized,
}

/// Lifecycle phases in the order a pilot passes through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Init,
    Detect,
    PrepareEnv,
    StageIn,
    SandboxSetup,
    RunJob,
    SandboxTeardown,
    StageOut,
    Done,
    Failed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "INIT",
            Phase::Detect => "DETECT",
            Phase::PrepareEnv => "PREPARE_ENV",
            Phase::StageIn => "STAGE_IN",
            Phase::SandboxSetup => "SANDBOX_SETUP",
            Phase::RunJob => "RUN_JOB",
            Phase::SandboxTeardown => "SANDBOX_TEARDOWN",
            Phase::StageOut => "STAGE_OUT",
            Phase::Done => "DONE",
            Phase::Failed => "FAILED",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusEntry {
    pub ts: f64,
    pub phase: Phase,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub at: f64,
    /// GB.
    pub size_gb: f64,
    pub src: EndpointKind,
    pub dst: EndpointKind,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotState {
    pub phase: Phase,
    pub mode: Mode,
    pub job: JobSpec,
    pub workspace_id: Option<String>,
    pub status_log: Vec<StatusEntry>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PilotError {
    #[error("WORKDIR_UNWRITABLE: {path}: {reason}")]
    WorkdirUnwritable { path: String, reason: String },
    #[error("TRANSFER_FAILED: {0}")]
    TransferFailed(String),
    #[error("JOB_FAILED: {0}")]
    JobFailed(String),
    #[error("HEARTBEAT_REJECTED: {0}")]
    HeartbeatRejected(String),
    #[error("VIRM call {call} failed: {source}")]
    Virm { call: String, source: VirmError },
}

impl PilotError {
    pub fn code(&self) -> &'static str {
        match self {
            PilotError::WorkdirUnwritable { .. } => "WORKDIR_UNWRITABLE",
            PilotError::TransferFailed(_) => "TRANSFER_FAILED",
            PilotError::JobFailed(_) => "JOB_FAILED",
            PilotError::HeartbeatRejected(_) => "HEARTBEAT_REJECTED",
            PilotError::Virm { .. } => "VIRM_ERROR",
        }
    }
}

/// Environment handed to the job, and written into the sandbox as its
/// contextualization payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvManifest {
    pub workdir: PathBuf,
    pub vars: BTreeMap<String, String>,
}

impl EnvManifest {
    /// `KEY=VALUE` lines in key order.
    pub fn to_env_file(&self) -> String {
        self.vars
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Build the job's environment. With `base` set, the working directory is
/// created under it and the manifest written to `<workdir>/job.env`;
/// otherwise the layout is only described.
pub fn prepare_env(job: &JobSpec, base: Option<&Path>) -> Result<EnvManifest, PilotError> {
    let root = base.map_or_else(|| PathBuf::from("/scratch/pilot"), Path::to_path_buf);
    let workdir = root.join(&job.id);
    let mut vars = BTreeMap::new();
    vars.insert("JOB_ID".to_string(), job.id.clone());
    vars.insert("JOB_EVENTS".to_string(), job.event_count.to_string());
    vars.insert("WORKDIR".to_string(), workdir.display().to_string());
    vars.insert("INPUT_DIR".to_string(), workdir.join("input").display().to_string());
    vars.insert("OUTPUT_DIR".to_string(), workdir.join("output").display().to_string());
    let manifest = EnvManifest { workdir, vars };

    if base.is_some() {
        let unwritable = |e: std::io::Error| PilotError::WorkdirUnwritable {
            path: manifest.workdir.display().to_string(),
            reason: e.to_string(),
        };
        for sub in ["input", "output"] {
            std::fs::create_dir_all(manifest.workdir.join(sub)).map_err(unwritable)?;
        }
        std::fs::write(manifest.workdir.join("job.env"), manifest.to_env_file())
            .map_err(unwritable)?;
    }
    Ok(manifest)
}

/// Endpoints used to stage data in and out. Guests never move data
/// themselves; in a sandbox the host's Dom_0 does it.
pub fn staging_endpoints(mode: Mode) -> (EndpointKind, EndpointKind) {
    match mode {
        Mode::Direct => (EndpointKind::Physical, EndpointKind::Physical),
        Mode::Virtualized => (EndpointKind::Dom0, EndpointKind::Physical),
    }
}

/// The workspace service as seen by a pilot.
pub trait VirmApi {
    fn request_diskspace(
        &self,
        image_id: &str,
        size_gb: f64,
        domain: &DomainConfig,
    ) -> Result<RequestReceipt, VirmError>;
    fn mount_diskspace(&self, id: &str) -> Result<(), VirmError>;
    fn unmount_diskspace(&self, id: &str) -> Result<(), VirmError>;
    fn write_context(&self, id: &str, files: &BTreeMap<String, String>) -> Result<(), VirmError>;
    fn start_vm(&self, id: &str) -> Result<(), VirmError>;
    fn stop_vm(&self, id: &str) -> Result<StopReceipt, VirmError>;
    fn remove_diskspace(&self, id: &str) -> Result<(), VirmError>;
    fn heartbeat(&self, id: &str) -> Result<f64, VirmError>;
    fn status(&self, id: &str) -> Result<WorkspaceStatus, VirmError>;
}

/// A clock shared between the pilot's driver and the service.
pub trait VirtualClock {
    fn now(&self) -> Result<f64, VirmError>;
    fn advance_to(&self, t: f64) -> Result<(), VirmError>;
}

impl VirmApi for VirmService {
    fn request_diskspace(
        &self,
        image_id: &str,
        size_gb: f64,
        domain: &DomainConfig,
    ) -> Result<RequestReceipt, VirmError> {
        VirmService::request_diskspace(self, image_id, size_gb, domain)
    }
    fn mount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        VirmService::mount_diskspace(self, id)
    }
    fn unmount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        VirmService::unmount_diskspace(self, id)
    }
    fn write_context(&self, id: &str, files: &BTreeMap<String, String>) -> Result<(), VirmError> {
        VirmService::write_context(self, id, files)
    }
    fn start_vm(&self, id: &str) -> Result<(), VirmError> {
        VirmService::start_vm(self, id)
    }
    fn stop_vm(&self, id: &str) -> Result<StopReceipt, VirmError> {
        VirmService::stop_vm(self, id)
    }
    fn remove_diskspace(&self, id: &str) -> Result<(), VirmError> {
        VirmService::remove_diskspace(self, id)
    }
    fn heartbeat(&self, id: &str) -> Result<f64, VirmError> {
        VirmService::heartbeat(self, id)
    }
    fn status(&self, id: &str) -> Result<WorkspaceStatus, VirmError> {
        VirmService::status(self, id)
    }
}

impl VirtualClock for VirmService {
    fn now(&self) -> Result<f64, VirmError> {
        Ok(VirmService::now(self))
    }
    fn advance_to(&self, t: f64) -> Result<(), VirmError> {
        self.advance_clock_to(t).map(|_| ())
    }
}

macro_rules! forward_api {
    ($($ty:ty),*) => {$(
        impl<T: VirmApi + ?Sized> VirmApi for $ty {
            fn request_diskspace(&self, image_id: &str, size_gb: f64, domain: &DomainConfig)
                -> Result<RequestReceipt, VirmError> {
                (**self).request_diskspace(image_id, size_gb, domain)
            }
            fn mount_diskspace(&self, id: &str) -> Result<(), VirmError> { (**self).mount_diskspace(id) }
            fn unmount_diskspace(&self, id: &str) -> Result<(), VirmError> { (**self).unmount_diskspace(id) }
            fn write_context(&self, id: &str, files: &BTreeMap<String, String>) -> Result<(), VirmError> {
                (**self).write_context(id, files)
            }
            fn start_vm(&self, id: &str) -> Result<(), VirmError> { (**self).start_vm(id) }
            fn stop_vm(&self, id: &str) -> Result<StopReceipt, VirmError> { (**self).stop_vm(id) }
            fn remove_diskspace(&self, id: &str) -> Result<(), VirmError> { (**self).remove_diskspace(id) }
            fn heartbeat(&self, id: &str) -> Result<f64, VirmError> { (**self).heartbeat(id) }
            fn status(&self, id: &str) -> Result<WorkspaceStatus, VirmError> { (**self).status(id) }
        }
    )*};
}

forward_api!(&T, Arc<T>, Box<T>);

/// Names of the service calls, as they appear in call traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VirmCall {
    Request,
    Mount,
    Unmount,
    WriteContext,
    Start,
    Stop,
    Delete,
    Heartbeat,
    Status,
}

impl VirmCall {
    pub fn as_str(self) -> &'static str {
        match self {
            VirmCall::Request => "request",
            VirmCall::Mount => "mount",
            VirmCall::Unmount => "unmount",
            VirmCall::WriteContext => "context",
            VirmCall::Start => "start",
            VirmCall::Stop => "stop",
            VirmCall::Delete => "delete",
            VirmCall::Heartbeat => "heartbeat",
            VirmCall::Status => "status",
        }
    }

    /// Calls that change a workspace's lifecycle state or lease.
    pub fn is_lifecycle(self) -> bool {
        !matches!(self, VirmCall::WriteContext | VirmCall::Status)
    }
}

/// Passes calls through to `inner`, failing exactly one of them.
///
/// Calls are numbered from 0 in the order they are made; call number
/// `fail_at` returns a transport error instead of reaching `inner`.
#[derive(Debug)]
pub struct FaultInjector<A> {
    inner: A,
    fail_at: usize,
    made: Mutex<usize>,
}

impl<A> FaultInjector<A> {
    pub fn new(inner: A, fail_at: usize) -> Self {
        Self {
            inner,
            fail_at,
            made: Mutex::new(0),
        }
    }

    fn gate(&self, call: VirmCall) -> Result<(), VirmError> {
        let mut n = self.made.lock().unwrap_or_else(|p| p.into_inner());
        let this = *n;
        *n += 1;
        if this == self.fail_at {
            Err(VirmError::Transport(format!(
                "injected fault on call {this} ({})",
                call.as_str()
            )))
        } else {
            Ok(())
        }
    }
}

/// Records every call made through it, with whether it succeeded.
#[derive(Debug)]
pub struct RecordingApi<A> {
    inner: A,
    calls: Mutex<Vec<(VirmCall, bool)>>,
}

impl<A> RecordingApi<A> {
    pub fn new(inner: A) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<(VirmCall, bool)> {
        self.calls.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn into_inner(self) -> A {
        self.inner
    }

    fn note<T>(&self, call: VirmCall, r: Result<T, VirmError>) -> Result<T, VirmError> {
        self.calls
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push((call, r.is_ok()));
        r
    }
}

impl<A: VirmApi> VirmApi for FaultInjector<A> {
    fn request_diskspace(&self, image_id: &str, size_gb: f64, domain: &DomainConfig) -> Result<RequestReceipt, VirmError> {
        self.gate(VirmCall::Request)?;
        self.inner.request_diskspace(image_id, size_gb, domain)
    }
    fn mount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.gate(VirmCall::Mount)?;
        self.inner.mount_diskspace(id)
    }
    fn unmount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.gate(VirmCall::Unmount)?;
        self.inner.unmount_diskspace(id)
    }
    fn write_context(&self, id: &str, files: &BTreeMap<String, String>) -> Result<(), VirmError> {
        self.gate(VirmCall::WriteContext)?;
        self.inner.write_context(id, files)
    }
    fn start_vm(&self, id: &str) -> Result<(), VirmError> {
        self.gate(VirmCall::Start)?;
        self.inner.start_vm(id)
    }
    fn stop_vm(&self, id: &str) -> Result<StopReceipt, VirmError> {
        self.gate(VirmCall::Stop)?;
        self.inner.stop_vm(id)
    }
    fn remove_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.gate(VirmCall::Delete)?;
        self.inner.remove_diskspace(id)
    }
    fn heartbeat(&self, id: &str) -> Result<f64, VirmError> {
        self.gate(VirmCall::Heartbeat)?;
        self.inner.heartbeat(id)
    }
    fn status(&self, id: &str) -> Result<WorkspaceStatus, VirmError> {
        self.gate(VirmCall::Status)?;
        self.inner.status(id)
    }
}

impl<A: VirmApi> VirmApi for RecordingApi<A> {
    fn request_diskspace(&self, image_id: &str, size_gb: f64, domain: &DomainConfig) -> Result<RequestReceipt, VirmError> {
        self.note(VirmCall::Request, self.inner.request_diskspace(image_id, size_gb, domain))
    }
    fn mount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.note(VirmCall::Mount, self.inner.mount_diskspace(id))
    }
    fn unmount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.note(VirmCall::Unmount, self.inner.unmount_diskspace(id))
    }
    fn write_context(&self, id: &str, files: &BTreeMap<String, String>) -> Result<(), VirmError> {
        self.note(VirmCall::WriteContext, self.inner.write_context(id, files))
    }
    fn start_vm(&self, id: &str) -> Result<(), VirmError> {
        self.note(VirmCall::Start, self.inner.start_vm(id))
    }
    fn stop_vm(&self, id: &str) -> Result<StopReceipt, VirmError> {
        self.note(VirmCall::Stop, self.inner.stop_vm(id))
    }
    fn remove_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.note(VirmCall::Delete, self.inner.remove_diskspace(id))
    }
    fn heartbeat(&self, id: &str) -> Result<f64, VirmError> {
        self.note(VirmCall::Heartbeat, self.inner.heartbeat(id))
    }
    fn status(&self, id: &str) -> Result<WorkspaceStatus, VirmError> {
        self.note(VirmCall::Status, self.inner.status(id))
    }
}

/// Everything a pilot needs to know up front.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotConfig {
    pub job: JobSpec,
    /// Sandbox to request; `None` runs the job directly on the host.
    pub domain: Option<DomainConfig>,
    pub machine: MachineSpec,
    pub params: PerfParams,
    pub heartbeat: HeartbeatPolicy,
    pub image_id: String,
    pub volume_size_gb: f64,
    pub status_interval: f64,
    /// Real directory to lay the job's workdir out under, if any.
    pub workdir: Option<PathBuf>,
}

impl PilotConfig {
    pub fn new(job: JobSpec, domain: Option<DomainConfig>, machine: MachineSpec, params: PerfParams) -> Self {
        Self {
            job,
            domain,
            machine,
            params,
            heartbeat: HeartbeatPolicy::default(),
            image_id: DEFAULT_IMAGE.to_string(),
            volume_size_gb: DEFAULT_VOLUME_GB,
            status_interval: DEFAULT_STATUS_INTERVAL,
            workdir: None,
        }
    }
}

/// Summary of a finished pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub job_id: String,
    pub mode: Mode,
    pub phase: Phase,
    pub workspace_id: Option<String>,
    pub started_at: f64,
    pub finished_at: f64,
    pub heartbeats_sent: u32,
    pub status_updates: u32,
    pub transfers: Vec<TransferRecord>,
    pub job_result: Option<JobResult>,
    pub error: Option<String>,
}

impl PilotReport {
    /// Wall time from the pilot's start to the end of stage-out.
    pub fn t_total(&self) -> f64 {
        self.finished_at - self.started_at
    }

    pub fn staging_seconds(&self) -> f64 {
        self.transfers.iter().map(|t| t.seconds).sum()
    }

    /// Time spent outside staging: sandbox setup, the job and teardown.
    pub fn t_job(&self) -> f64 {
        self.t_total() - self.staging_seconds()
    }

    pub fn succeeded(&self) -> bool {
        self.phase == Phase::Done
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SetupStep {
    Request,
    Mount,
    Context,
    Unmount,
    Start,
}

#[derive(Debug, Clone)]
struct RunState {
    handle: JobHandle,
    next_heartbeat: f64,
    next_status: f64,
}

#[derive(Debug, Clone)]
struct TeardownState {
    believed: Option<WorkspaceState>,
    busy_until: f64,
    resync: bool,
    attempts: u32,
}

#[derive(Debug, Clone)]
pub struct Pilot {
    cfg: PilotConfig,
    state: PilotState,
    manifest: Option<EnvManifest>,
    wake: Option<f64>,
    /// A timed activity (transfer, provisioning wait) is in progress.
    waiting: bool,
    setup: SetupStep,
    run: Option<RunState>,
    teardown: TeardownState,
    job_result: Option<JobResult>,
    error: Option<PilotError>,
    started_at: f64,
    finished_at: f64,
    heartbeats_sent: u32,
    status_updates: u32,
    transfers: Vec<TransferRecord>,
}

impl Pilot {
    /// A pilot whose service probe came back with `detected`.
    ///
    /// A pilot without a domain to request always runs directly.
    pub fn new(cfg: PilotConfig, detected: Mode) -> Self {
        let mode = if cfg.domain.is_some() {
            detected
        } else {
            Mode::Direct
        };
        Self {
            state: PilotState {
                phase: Phase::Init,
                mode,
                job: cfg.job.clone(),
                workspace_id: None,
                status_log: Vec::new(),
            },
            cfg,
            manifest: None,
            wake: Some(0.0),
            waiting: false,
            setup: SetupStep::Request,
            run: None,
            teardown: TeardownState {
                believed: None,
                busy_until: 0.0,
                resync: false,
                attempts: 0,
            },
            job_result: None,
            error: None,
            started_at: 0.0,
            finished_at: 0.0,
            heartbeats_sent: 0,
            status_updates: 0,
            transfers: Vec::new(),
        }
    }

    /// Start the pilot at `t` rather than 0.
    pub fn starting_at(mut self, t: f64) -> Self {
        self.wake = Some(t);
        self
    }

    pub fn state(&self) -> &PilotState {
        &self.state
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    pub fn is_finished(&self) -> bool {
        self.state.phase.is_terminal()
    }

    pub fn error(&self) -> Option<&PilotError> {
        self.error.as_ref()
    }

    /// When the pilot next needs to run, given the job's current progress.
    pub fn next_wake(&self, exec: &SimExecutor) -> Option<f64> {
        if self.is_finished() {
            return None;
        }
        match (&self.run, self.state.phase) {
            (Some(r), Phase::RunJob) => Some(
                r.next_heartbeat
                    .min(r.next_status)
                    .min(exec.eta(r.handle)),
            ),
            _ => self.wake,
        }
    }

    pub fn report(&self) -> PilotReport {
        PilotReport {
            job_id: self.cfg.job.id.clone(),
            mode: self.state.mode,
            phase: self.state.phase,
            workspace_id: self.state.workspace_id.clone(),
            started_at: self.started_at,
            finished_at: self.finished_at,
            heartbeats_sent: self.heartbeats_sent,
            status_updates: self.status_updates,
            transfers: self.transfers.clone(),
            job_result: self.job_result.clone(),
            error: self.error.as_ref().map(|e| e.to_string()),
        }
    }

    /// Status log as JSON lines of `{ts, phase, detail}`.
    pub fn status_log_jsonl(&self) -> String {
        self.state
            .status_log
            .iter()
            .map(|e| serde_json::to_string(e).expect("status entry serializes") + "\n")
            .collect()
    }

    fn log(&mut self, ts: f64, detail: impl Into<String>) {
        self.state.status_log.push(StatusEntry {
            ts,
            phase: self.state.phase,
            detail: detail.into(),
        });
    }

    fn enter(&mut self, phase: Phase) {
        self.state.phase = phase;
        self.waiting = false;
    }

    fn fail(&mut self, now: f64, err: PilotError) {
        self.log(now, format!("error: {err}"));
        if self.error.is_none() {
            self.error = Some(err);
        }
    }

    /// Move a dataset; returns false and records the error on failure.
    fn start_transfer(&mut self, now: f64, size: f64, src: EndpointKind, dst: EndpointKind) -> bool {
        match transfer_time(
            &self.cfg.params,
            size,
            src,
            dst,
            0,
            self.cfg.machine.dom0_memory as f64,
        ) {
            Ok(seconds) => {
                self.transfers.push(TransferRecord {
                    at: now,
                    size_gb: size,
                    src,
                    dst,
                    seconds,
                });
                self.log(
                    now,
                    format!("transfer {size} GB {} -> {} ({seconds:.3} s)", src.as_str(), dst.as_str()),
                );
                self.wake = Some(now + seconds);
                self.waiting = true;
                true
            }
            Err(e) => {
                self.fail(now, PilotError::TransferFailed(e.to_string()));
                false
            }
        }
    }

    /// Run everything due at `now`.
    pub fn step(&mut self, now: f64, api: &dyn VirmApi, exec: &mut SimExecutor) {
        loop {
            if self.is_finished() {
                return;
            }
            if self.state.phase != Phase::RunJob {
                if let Some(w) = self.wake {
                    if now + TIME_EPS < w {
                        return;
                    }
                }
            }
            if !self.advance(now, api, exec) {
                return;
            }
        }
    }

    /// One transition. Returns false when the pilot has to wait.
    fn advance(&mut self, now: f64, api: &dyn VirmApi, exec: &mut SimExecutor) -> bool {
        match self.state.phase {
            Phase::Init => {
                self.started_at = now;
                let detail = format!("pilot started for job {}", self.cfg.job.id);
                self.log(now, detail);
                self.enter(Phase::Detect);
            }
            Phase::Detect => {
                let detail = match self.mode() {
                    Mode::Virtualized => "workspace service found; running sandboxed",
                    Mode::Direct => "no workspace service; running directly",
                };
                self.log(now, detail);
                self.enter(Phase::PrepareEnv);
            }
            Phase::PrepareEnv => {
                match prepare_env(&self.cfg.job, self.cfg.workdir.as_deref()) {
                    Ok(m) => {
                        let detail = format!("workdir {}", m.workdir.display());
                        self.log(now, detail);
                        self.manifest = Some(m);
                        self.enter(Phase::StageIn);
                    }
                    Err(e) => {
                        self.fail(now, e);
                        self.finish(now, Phase::Failed);
                    }
                }
            }
            Phase::StageIn => {
                if self.waiting {
                    self.log(now, "input staged");
                    let next = match self.mode() {
                        Mode::Virtualized => Phase::SandboxSetup,
                        Mode::Direct => Phase::RunJob,
                    };
                    self.enter(next);
                } else {
                    // input lands in the host-visible staging area
                    let (host, _) = staging_endpoints(self.mode());
                    if !self.start_transfer(now, self.cfg.job.input_size, EndpointKind::Physical, host) {
                        self.enter(Phase::StageOut);
                    }
                    return true;
                }
            }
            Phase::SandboxSetup => return self.advance_setup(now, api),
            Phase::RunJob => return self.advance_run(now, api, exec),
            Phase::SandboxTeardown => return self.advance_teardown(now, api),
            Phase::StageOut => {
                if self.waiting {
                    let outcome = if self.error.is_none() {
                        Phase::Done
                    } else {
                        Phase::Failed
                    };
                    self.log(now, "stage-out complete");
                    self.finish(now, outcome);
                } else {
                    let (host, remote) = staging_endpoints(self.mode());
                    let size = if self.error.is_none() {
                        self.cfg.job.output_size
                    } else {
                        ERROR_BUNDLE_GB
                    };
                    if !self.start_transfer(now, size, host, remote) {
                        self.finish(now, Phase::Failed);
                    }
                    return true;
                }
            }
            Phase::Done | Phase::Failed => return false,
        }
        true
    }

    fn finish(&mut self, now: f64, phase: Phase) {
        self.enter(phase);
        self.finished_at = now;
        self.wake = None;
        let detail = match &self.error {
            None => "job done".to_string(),
            Some(e) => format!("pilot failed: {}", e.code()),
        };
        self.log(now, detail);
    }

    fn abort_setup(&mut self, now: f64, call: VirmCall, err: VirmError) -> bool {
        self.fail(
            now,
            PilotError::Virm {
                call: call.as_str().to_string(),
                source: err,
            },
        );
        self.teardown.resync = true;
        self.enter(Phase::SandboxTeardown);
        true
    }

    fn advance_setup(&mut self, now: f64, api: &dyn VirmApi) -> bool {
        let domain = self.cfg.domain.clone().expect("sandboxed pilots have a domain");
        let id = self.state.workspace_id.clone().unwrap_or_default();
        match self.setup {
            SetupStep::Request => {
                match api.request_diskspace(&self.cfg.image_id, self.cfg.volume_size_gb, &domain) {
                    Ok(r) => {
                        self.log(now, format!("workspace {} requested, ready at {}", r.workspace_id, r.ready_at));
                        self.state.workspace_id = Some(r.workspace_id);
                        self.teardown.believed = Some(WorkspaceState::Provisioned);
                        self.teardown.busy_until = r.ready_at;
                        self.setup = SetupStep::Mount;
                        if now + TIME_EPS < r.ready_at {
                            self.wake = Some(r.ready_at);
                            return false;
                        }
                    }
                    Err(e) => return self.abort_setup(now, VirmCall::Request, e),
                }
            }
            SetupStep::Mount => match api.mount_diskspace(&id) {
                Ok(()) => {
                    self.teardown.believed = Some(WorkspaceState::Mounted);
                    self.setup = SetupStep::Context;
                }
                Err(e) => return self.abort_setup(now, VirmCall::Mount, e),
            },
            SetupStep::Context => {
                let env = self
                    .manifest
                    .as_ref()
                    .map(EnvManifest::to_env_file)
                    .unwrap_or_default();
                let files = BTreeMap::from([("job.env".to_string(), env)]);
                match api.write_context(&id, &files) {
                    Ok(()) => {
                        self.log(now, "contextualization written");
                        self.setup = SetupStep::Unmount;
                    }
                    Err(e) => return self.abort_setup(now, VirmCall::WriteContext, e),
                }
            }
            SetupStep::Unmount => match api.unmount_diskspace(&id) {
                Ok(()) => {
                    self.teardown.believed = Some(WorkspaceState::Unmounted);
                    self.setup = SetupStep::Start;
                }
                Err(e) => return self.abort_setup(now, VirmCall::Unmount, e),
            },
            SetupStep::Start => match api.start_vm(&id) {
                Ok(()) => {
                    self.teardown.believed = Some(WorkspaceState::Running);
                    self.log(now, "vm started");
                    self.enter(Phase::RunJob);
                }
                Err(e) => return self.abort_setup(now, VirmCall::Start, e),
            },
        }
        true
    }

    fn advance_run(&mut self, now: f64, api: &dyn VirmApi, exec: &mut SimExecutor) -> bool {
        let sandboxed = self.mode() == Mode::Virtualized;
        let Some(run) = self.run.clone() else {
            let placement = match (&self.cfg.domain, sandboxed) {
                (Some(d), true) => Placement::Domain(d.clone()),
                _ => Placement::Direct,
            };
            let handle = exec.start(&self.cfg.job, placement, now);
            self.run = Some(RunState {
                handle,
                next_heartbeat: if sandboxed { now } else { f64::INFINITY },
                next_status: now,
            });
            return true;
        };

        if let ExecStatus::Finished = exec.poll(run.handle, now) {
            let r = exec.result(run.handle).expect("finished").clone();
            self.log(
                now,
                format!("job finished: exit {} after {} events", r.exit_code, r.events_processed),
            );
            if !r.succeeded() {
                let why = match r.outcome {
                    JobOutcome::OutOfMemory => "out of memory",
                    _ => "nonzero exit",
                };
                self.fail(now, PilotError::JobFailed(why.to_string()));
            }
            self.job_result = Some(r);
            self.enter(if sandboxed { Phase::SandboxTeardown } else { Phase::StageOut });
            return true;
        }

        let mut run = run;
        if now + TIME_EPS >= run.next_heartbeat {
            let id = self.state.workspace_id.clone().unwrap_or_default();
            match api.heartbeat(&id) {
                Ok(_) => {
                    self.heartbeats_sent += 1;
                    run.next_heartbeat += self.cfg.heartbeat.interval;
                }
                Err(e) => {
                    let r = exec.cancel(run.handle, now);
                    self.job_result = Some(r);
                    self.run = Some(run);
                    self.fail(now, PilotError::HeartbeatRejected(e.to_string()));
                    self.teardown.resync = true;
                    self.enter(Phase::SandboxTeardown);
                    return true;
                }
            }
        }
        if now + TIME_EPS >= run.next_status {
            self.status_updates += 1;
            run.next_status += self.cfg.status_interval;
            self.log(now, "status: running");
        }
        self.run = Some(run);
        false
    }

    fn advance_teardown(&mut self, now: f64, api: &dyn VirmApi) -> bool {
        let Some(id) = self.state.workspace_id.clone() else {
            self.enter(Phase::StageOut);
            return true;
        };
        if self.teardown.attempts >= MAX_TEARDOWN_ATTEMPTS {
            self.log(now, format!("giving up on workspace {id}"));
            self.enter(Phase::StageOut);
            return true;
        }
        if self.teardown.resync {
            match api.status(&id) {
                Ok(st) => {
                    self.teardown.believed = Some(st.state);
                    self.teardown.busy_until = st.busy_until;
                    self.teardown.resync = false;
                }
                Err(VirmError::UnknownWorkspace(_)) => {
                    self.log(now, format!("workspace {id} already gone"));
                    self.enter(Phase::StageOut);
                    return true;
                }
                Err(_) => {
                    self.teardown.attempts += 1;
                    return true;
                }
            }
        }
        if now + TIME_EPS < self.teardown.busy_until {
            self.wake = Some(self.teardown.busy_until);
            return false;
        }
        let (call, result) = match self.teardown.believed {
            Some(WorkspaceState::Mounted) => (VirmCall::Unmount, api.unmount_diskspace(&id).map(|_| None)),
            Some(WorkspaceState::Running) => (VirmCall::Stop, api.stop_vm(&id).map(|r| Some(r.busy_until))),
            Some(WorkspaceState::Provisioned | WorkspaceState::Unmounted | WorkspaceState::Stopped) => {
                (VirmCall::Delete, api.remove_diskspace(&id).map(|_| None))
            }
            Some(WorkspaceState::Requested | WorkspaceState::Removed) | None => {
                self.teardown.resync = true;
                self.teardown.attempts += 1;
                return true;
            }
        };
        match result {
            Ok(busy) => {
                self.teardown.believed = Some(match call {
                    VirmCall::Unmount => WorkspaceState::Unmounted,
                    VirmCall::Stop => WorkspaceState::Stopped,
                    _ => WorkspaceState::Removed,
                });
                if let Some(b) = busy {
                    self.teardown.busy_until = b;
                }
                match call {
                    VirmCall::Delete => {
                        self.log(now, format!("workspace {id} removed"));
                        self.enter(Phase::StageOut);
                    }
                    VirmCall::Stop => self.log(now, "vm stopped"),
                    _ => {}
                }
            }
            Err(e) => {
                self.teardown.attempts += 1;
                self.teardown.resync = true;
                self.log(now, format!("teardown {} failed: {e}", call.as_str()));
            }
        }
        true
    }
}

/// Drive a single pilot to completion against a service sharing `clock`.
///
/// `shares` and `n_vm` describe the host the job sees; with one pilot on an
/// otherwise idle host that is the pilot's own domain alone.
pub fn run_pilot(
    pilot: &mut Pilot,
    api: &dyn VirmApi,
    clock: &dyn VirtualClock,
    exec: &mut SimExecutor,
    shares: BTreeMap<String, f64>,
    n_vm: u32,
) -> Result<PilotReport, VirmError> {
    let t0 = clock.now()?;
    exec.set_host(t0, shares, n_vm);
    let mut now = t0;
    while !pilot.is_finished() {
        pilot.step(now, api, exec);
        let Some(next) = pilot.next_wake(exec) else {
            break;
        };
        if !next.is_finite() {
            break;
        }
        if next > now {
            clock.advance_to(next)?;
            exec.advance_to(next);
            now = next;
        }
    }
    Ok(pilot.report())
}
