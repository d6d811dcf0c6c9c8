// SPDX-License-Identifier: Apache-2.0

//! Scenario runner: pilots, the workspace service and the executor on one
//! virtual clock.
//!
//! The loop jumps from event to event. Events are pilot wake-ups, job
//! completions and lease sweeps; at equal times pilots run in scenario
//! order. Whenever the set of running domains changes the executor is told
//! the new CPU shares, so jobs speed up or slow down from that instant.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{
    calibrate, reference_job_template, table1_rows, CalibrationError, Table1Row,
};
use crate::domain::{
    overhead_percent, HeartbeatPolicy, JobSpec, MachineSpec, Scenario, ScenarioLoadError,
    ValidationErrors,
};
use crate::exec::SimExecutor;
use crate::perf::{
    direct_compute_seconds, table2_matrix, transfer_time_for_entry, EndpointKind, PerfParams,
};
use crate::pilot::{Mode, Pilot, PilotConfig, PilotReport, TransferRecord};
use crate::virm::VirmService;

/// A run still going after this many virtual seconds is abandoned.
pub const MAX_SIM_TIME: f64 = 1e8;

/// Dataset size used for the network table, GB.
pub const TABLE2_SIZE_GB: f64 = 3.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("VALIDATION_FAILED: {0}")]
    Validation(ValidationErrors),
    #[error(transparent)]
    Load(#[from] ScenarioLoadError),
    #[error("IO_FAILED: {0}")]
    Io(#[from] std::io::Error),
    #[error("IO_FAILED: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

impl HarnessError {
    pub fn code(&self) -> &str {
        match self {
            HarnessError::Validation(_) => "VALIDATION_FAILED",
            HarnessError::Load(_) => "LOAD_FAILED",
            HarnessError::Io(_) | HarnessError::Csv(_) => "IO_FAILED",
            HarnessError::Calibration(e) => e.code(),
        }
    }
}

/// One entry of the run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    pub actor: String,
    pub event: String,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub conf_id: String,
    /// Pilot start to end of stage-out, seconds.
    pub t_total: f64,
    /// `t_total` without staging: sandbox setup, job and teardown.
    pub t_job: f64,
    /// `t_job` against the job's bare-metal compute time.
    pub overhead_pct: f64,
    /// Physical CPUs delivered to the job, averaged over its run.
    pub cpu_share_avg: f64,
    pub heartbeats_sent: u32,
    pub transfers: Vec<TransferRecord>,
    pub succeeded: bool,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub reports: Vec<PilotReport>,
    /// Clock value when the last pilot finished.
    pub clock: f64,
    pub metrics: Vec<MetricsRecord>,
    pub trace: Vec<TraceEvent>,
}

impl ScenarioRun {
    /// Every transfer made by any pilot.
    pub fn transfers(&self) -> impl Iterator<Item = &TransferRecord> {
        self.trace.iter().filter_map(|e| e.transfer.as_ref())
    }
}

struct Slot {
    label: String,
    pilot: Pilot,
    logged: usize,
    transferred: usize,
}

fn fmt_shares(shares: &BTreeMap<String, f64>) -> String {
    let parts: Vec<String> = shares.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    parts.join(",")
}

/// Run a scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioRun, HarnessError> {
    scenario.validate().map_err(HarnessError::Validation)?;
    let machine = scenario.machine.clone();
    let params = scenario.perf_params.clone();
    let svc = VirmService::simulated(machine.clone(), &params, scenario.heartbeat);
    let mut exec = SimExecutor::new(params.clone(), machine.clone());
    let mode = if scenario.domains.is_empty() {
        Mode::Direct
    } else {
        Mode::Virtualized
    };

    let mut slots: Vec<Slot> = scenario
        .jobs
        .iter()
        .enumerate()
        .map(|(i, job)| {
            let mut cfg = PilotConfig::new(
                job.clone(),
                scenario.domains.get(i).cloned(),
                machine.clone(),
                params.clone(),
            );
            cfg.heartbeat = scenario.heartbeat;
            Slot {
                label: format!("{}/{}", scenario.label(), job.id),
                pilot: Pilot::new(cfg, mode),
                logged: 0,
                transferred: 0,
            }
        })
        .collect();

    let mut trace = Vec::new();
    let mut now = 0.0_f64;
    let mut epoch = svc.host_epoch();
    loop {
        // run everything due now, repeating until nothing is
        loop {
            let mut ran = false;
            for slot in slots.iter_mut() {
                let due = slot.pilot.next_wake(&exec).is_some_and(|w| w <= now + 1e-9);
                if !due {
                    continue;
                }
                ran = true;
                slot.pilot.step(now, &svc, &mut exec);
                collect(slot, &mut trace);
                if svc.host_epoch() != epoch {
                    epoch = svc.host_epoch();
                    let shares = svc.cpu_shares();
                    trace.push(TraceEvent {
                        t: now,
                        actor: "host".into(),
                        event: "shares".into(),
                        detail: fmt_shares(&shares),
                        transfer: None,
                    });
                    exec.set_host(now, shares, svc.running_domains());
                }
            }
            if !ran {
                break;
            }
        }

        let next_pilot = slots
            .iter()
            .filter_map(|s| s.pilot.next_wake(&exec))
            .fold(f64::INFINITY, f64::min);
        if !(next_pilot.is_finite() && next_pilot <= MAX_SIM_TIME) {
            break;
        }
        let next = if svc.running_domains() > 0 {
            next_pilot.min(svc.next_sweep())
        } else {
            next_pilot
        };
        exec.advance_to(next);
        let expired = svc
            .advance_clock_to(next)
            .expect("harness clock only moves forward");
        now = next;
        for id in expired {
            trace.push(TraceEvent {
                t: now,
                actor: "virm".into(),
                event: "lease_expired".into(),
                detail: id,
                transfer: None,
            });
        }
        if svc.host_epoch() != epoch {
            epoch = svc.host_epoch();
            exec.set_host(now, svc.cpu_shares(), svc.running_domains());
        }
    }

    let reports: Vec<PilotReport> = slots.iter().map(|s| s.pilot.report()).collect();
    let metrics = slots
        .iter()
        .zip(&reports)
        .map(|(s, r)| metrics_for(&s.label, r, &s.pilot.state().job, &params, &machine))
        .collect();
    let clock = reports.iter().map(|r| r.finished_at).fold(0.0, f64::max);
    Ok(ScenarioRun {
        scenario: scenario.clone(),
        reports,
        clock,
        metrics,
        trace,
    })
}

pub fn run_scenario_file(path: &Path) -> Result<ScenarioRun, HarnessError> {
    run_scenario(&Scenario::load(path)?)
}

fn collect(slot: &mut Slot, trace: &mut Vec<TraceEvent>) {
    let state = slot.pilot.state();
    for e in &state.status_log[slot.logged..] {
        trace.push(TraceEvent {
            t: e.ts,
            actor: slot.label.clone(),
            event: e.phase.as_str().to_string(),
            detail: e.detail.clone(),
            transfer: None,
        });
    }
    slot.logged = state.status_log.len();
    let report = slot.pilot.report();
    for t in &report.transfers[slot.transferred..] {
        trace.push(TraceEvent {
            t: t.at,
            actor: slot.label.clone(),
            event: "transfer".into(),
            detail: format!("{} -> {}", t.src.as_str(), t.dst.as_str()),
            transfer: Some(t.clone()),
        });
    }
    slot.transferred = report.transfers.len();
}

fn metrics_for(
    label: &str,
    r: &PilotReport,
    job: &JobSpec,
    params: &PerfParams,
    machine: &MachineSpec,
) -> MetricsRecord {
    let t_job = r.t_job();
    let overhead_pct = direct_compute_seconds(params, machine, job)
        .ok()
        .and_then(|base| overhead_percent(t_job, base).ok())
        .unwrap_or(0.0);
    MetricsRecord {
        conf_id: label.to_string(),
        t_total: r.t_total(),
        t_job,
        overhead_pct,
        cpu_share_avg: r.job_result.as_ref().map_or(0.0, |j| j.cpu_share_avg),
        heartbeats_sent: r.heartbeats_sent,
        transfers: r.transfers.clone(),
        succeeded: r.succeeded(),
    }
}

/// Write `conf_id,t_total_s,overhead_pct,cpu_share_avg,heartbeats_sent`.
pub fn write_metrics_csv<W: Write>(metrics: &[MetricsRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["conf_id", "t_total_s", "overhead_pct", "cpu_share_avg", "heartbeats_sent"])?;
    for m in metrics {
        w.write_record([
            m.conf_id.clone(),
            format!("{:.3}", m.t_total),
            format!("{:.2}", m.overhead_pct),
            format!("{:.4}", m.cpu_share_avg),
            m.heartbeats_sent.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_jsonl<W: Write>(trace: &[TraceEvent], mut out: W) -> Result<(), HarnessError> {
    for e in trace {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Write the run's metrics CSV to `path`, and its trace to `trace_path`.
pub fn emit_metrics(run: &ScenarioRun, path: &Path, trace_path: Option<&Path>) -> Result<(), HarnessError> {
    write_metrics_csv(&run.metrics, std::fs::File::create(path)?)?;
    if let Some(tp) = trace_path {
        write_trace_jsonl(&run.trace, std::io::BufWriter::new(std::fs::File::create(tp)?))?;
    }
    Ok(())
}

/// The reference job with its CPU work set by the default parameters.
pub fn reference_job() -> JobSpec {
    let params = PerfParams::default();
    let machine = MachineSpec::default();
    let mut job = reference_job_template();
    let unit = direct_compute_seconds(&params, &machine, &job).expect("positive capacity");
    job.cpu_work = table1_rows()[0].t_measured / unit;
    job
}

/// File stem used for a row's shipped scenario, e.g. `conf10_1`.
pub fn scenario_stem(conf_id: &str) -> String {
    conf_id.to_lowercase().replace(['.'], "_").replace("conf_", "conf")
}

/// Scenario that runs one row of the completion-time table.
pub fn table1_scenario(row: &Table1Row, params: &PerfParams, job: &JobSpec) -> Scenario {
    let n = row.n_vm.max(1);
    Scenario {
        name: Some(row.conf_id.clone()),
        machine: MachineSpec::default(),
        domains: row.domains(),
        jobs: (1..=n)
            .map(|i| JobSpec {
                id: format!("job{i}"),
                ..job.clone()
            })
            .collect(),
        perf_params: params.clone(),
        heartbeat: HeartbeatPolicy::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Comparison {
    pub conf_id: String,
    pub t_measured: f64,
    /// Mean sandbox-plus-job time over the row's pilots; staging excluded.
    pub t_model: f64,
    pub residual_pct: f64,
    /// Against the bare-metal row.
    pub overhead_pct: f64,
    /// Mean staging time per pilot, reported separately.
    pub staging_s: f64,
}

/// Run every row of the completion-time table through the full stack.
///
/// Without `fitted` parameters the table is calibrated first.
pub fn replay_table1(fitted: Option<(&PerfParams, &JobSpec)>) -> Result<Vec<Table1Comparison>, HarnessError> {
    let rows = table1_rows();
    let (params, job) = match fitted {
        Some((p, j)) => (p.clone(), j.clone()),
        None => {
            let c = calibrate(&rows, &MachineSpec::default())?;
            (c.params, c.reference_job)
        }
    };
    let mut out = Vec::new();
    let mut baseline = None;
    for row in &rows {
        let run = run_scenario(&table1_scenario(row, &params, &job))?;
        let n = run.metrics.len() as f64;
        let t_model = run.metrics.iter().map(|m| m.t_job).sum::<f64>() / n;
        let staging = run
            .reports
            .iter()
            .map(PilotReport::staging_seconds)
            .sum::<f64>()
            / n;
        if row.is_baseline() {
            baseline = Some(t_model);
        }
        let overhead = baseline
            .and_then(|b| overhead_percent(t_model, b).ok())
            .unwrap_or(0.0);
        out.push(Table1Comparison {
            conf_id: row.conf_id.clone(),
            t_measured: row.t_measured,
            t_model,
            residual_pct: 100.0 * (t_model - row.t_measured) / row.t_measured,
            overhead_pct: overhead,
            staging_s: staging,
        });
    }
    Ok(out)
}

pub fn write_table1_csv<W: Write>(rows: &[Table1Comparison], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["conf_id", "t_paper", "t_model", "residual_pct", "overhead_pct", "staging_s"])?;
    for r in rows {
        w.write_record([
            r.conf_id.clone(),
            format!("{:.3}", r.t_measured),
            format!("{:.3}", r.t_model),
            format!("{:.4}", r.residual_pct),
            format!("{:.2}", r.overhead_pct),
            format!("{:.3}", r.staging_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Comparison {
    pub parallel: u32,
    pub src: EndpointKind,
    pub dst: EndpointKind,
    /// Mb/s.
    pub throughput: f64,
    pub transfer_time_s: f64,
    /// Throughput recomputed from the transfer time.
    pub throughput_readback: f64,
}

/// Transfer times for every measured row of the network table.
pub fn replay_table2(params: &PerfParams) -> Vec<Table2Comparison> {
    params
        .transfer_matrix
        .iter()
        .map(|e| {
            let t = transfer_time_for_entry(e, TABLE2_SIZE_GB).expect("size is positive");
            Table2Comparison {
                parallel: e.parallel,
                src: e.src,
                dst: e.dst,
                throughput: e.throughput,
                transfer_time_s: t,
                throughput_readback: TABLE2_SIZE_GB * crate::domain::MEGABITS_PER_GB / t,
            }
        })
        .collect()
}

/// The published network table, independent of any parameter file.
pub fn replay_table2_default() -> Vec<Table2Comparison> {
    let params = PerfParams {
        transfer_matrix: table2_matrix(),
        ..PerfParams::default()
    };
    replay_table2(&params)
}

pub fn write_table2_csv<W: Write>(rows: &[Table2Comparison], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parallel", "src", "dst", "throughput_mbps", "transfer_time_s", "throughput_readback"])?;
    for r in rows {
        w.write_record([
            r.parallel.to_string(),
            r.src.as_str().to_string(),
            r.dst.as_str().to_string(),
            format!("{}", r.throughput),
            format!("{:.4}", r.transfer_time_s),
            format!("{:.6}", r.throughput_readback),
        ])?;
    }
    w.flush()?;
    Ok(())
}
