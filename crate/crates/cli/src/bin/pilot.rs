// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use virm_cli::{exit, init_logging, output, CliError};
use virm_core::calibrate::{SHARE_WARMUP_S, SHARE_WINDOW_S};
use virm_core::exec::SimExecutor;
use virm_core::pilot::{run_pilot, Mode, Pilot, PilotConfig, PROBE_TIMEOUT_S};
use virm_core::sched::steady_state_shares;
use virm_core::virm::VirmService;
use virm_core::Scenario;
use virm_http::{detect_virm, HttpVirm};

#[derive(Parser)]
#[command(name = "pilot", version, about = "Run one job, sandboxed when a workspace service is present")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Id of the job in the scenario.
        #[arg(long)]
        job: String,
        /// Workspace service to probe.
        #[arg(long, default_value = "http://127.0.0.1:18700")]
        virm: String,
        /// Skip the probe and run on the host.
        #[arg(long)]
        direct: bool,
        /// Status log (JSON lines); stdout when omitted.
        #[arg(long)]
        status_log: Option<PathBuf>,
        /// Create the job's working directory under this path.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let Cmd::Run {
        scenario,
        job,
        virm,
        direct,
        status_log,
        workdir,
    } = cli.cmd;
    let sc = Scenario::load(&scenario).map_err(CliError::config)?;
    sc.validate().map_err(CliError::config)?;
    let idx = sc
        .jobs
        .iter()
        .position(|j| j.id == job)
        .ok_or_else(|| CliError::config(anyhow!("no job {job} in {}", scenario.display())))?;
    let domain = sc.domains.get(idx).cloned();

    let mode = match (&domain, direct) {
        (Some(_), false) => detect_virm(&virm, Duration::from_secs_f64(PROBE_TIMEOUT_S)),
        _ => Mode::Direct,
    };
    let mut cfg = PilotConfig::new(sc.jobs[idx].clone(), domain.clone(), sc.machine.clone(), sc.perf_params.clone());
    cfg.heartbeat = sc.heartbeat;
    cfg.workdir = workdir;
    let mut exec = SimExecutor::new(sc.perf_params.clone(), sc.machine.clone());
    let shares = domain
        .as_ref()
        .map(|d| steady_state_shares(&sc.machine, std::slice::from_ref(d), SHARE_WARMUP_S, SHARE_WINDOW_S))
        .unwrap_or_default();

    let (pilot, report) = match mode {
        Mode::Virtualized => {
            let api = HttpVirm::new(&virm).map_err(CliError::failed)?;
            let start = virm_core::pilot::VirtualClock::now(&api).map_err(CliError::failed)?;
            let mut pilot = Pilot::new(cfg, Mode::Virtualized).starting_at(start);
            let rep = run_pilot(&mut pilot, &api, &api, &mut exec, shares, 1)
                .context("talking to the workspace service")
                .map_err(CliError::failed)?;
            (pilot, rep)
        }
        Mode::Direct => {
            // no service: a private clock stands in for it
            let local = VirmService::simulated(sc.machine.clone(), &sc.perf_params, sc.heartbeat);
            let mut pilot = Pilot::new(cfg, Mode::Direct);
            let rep = run_pilot(&mut pilot, &local, &local, &mut exec, shares, 1)
                .map_err(CliError::failed)?;
            (pilot, rep)
        }
    };

    let mut w = output(status_log.as_deref()).map_err(CliError::failed)?;
    w.write_all(pilot.status_log_jsonl().as_bytes())
        .and_then(|_| w.flush())
        .map_err(CliError::failed)?;
    eprintln!(
        "{} job {} in {:?} mode: t_total {:.1} s, {} heartbeats",
        report.phase,
        report.job_id,
        report.mode,
        report.t_total(),
        report.heartbeats_sent
    );
    Ok(report.succeeded())
}

fn main() {
    init_logging();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(true) => exit::OK,
        Ok(false) => exit::FAILED,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            e.code
        }
    };
    std::process::exit(code);
}
