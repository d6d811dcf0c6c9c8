// SPDX-License-Identifier: Apache-2.0

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use virm_cli::{exit, init_logging, output, CliError};
use virm_core::calibrate::{calibrate, table1_rows, write_residuals_csv, ParamsFile};
use virm_core::harness::{
    emit_metrics, replay_table1, replay_table2, replay_table2_default, run_scenario_file,
    write_metrics_csv, write_table1_csv, write_table2_csv, write_trace_jsonl, HarnessError,
};
use virm_core::virm::VirmService;
use virm_core::{MachineSpec, Scenario};

#[derive(Parser)]
#[command(name = "virm-sim", version, about = "Simulated virtualized worker nodes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write per-pilot metrics.
    Run {
        scenario: PathBuf,
        /// Metrics CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare the model against a published table.
    Replay {
        table: Table,
        /// Parameter file from `calibrate`; calibrates afresh when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the completion model and write the parameter file.
    Calibrate {
        #[arg(long)]
        out: PathBuf,
        /// Residual CSV; stdout when omitted.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
    /// Serve the workspace API on loopback.
    Serve {
        #[arg(long, env = "VIRM_PORT", default_value_t = virm_http::DEFAULT_PORT)]
        port: u16,
        /// Scenario supplying the host, model parameters and lease policy.
        #[arg(long, env = "VIRM_SCENARIO")]
        scenario: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Table1,
    Table2,
}

fn load_params(path: &Path) -> Result<ParamsFile, CliError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::config)?;
    let p: ParamsFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(CliError::config)?;
    if p.jobs.is_empty() {
        return Err(CliError::config(anyhow::anyhow!(
            "{} holds no reference job",
            path.display()
        )));
    }
    Ok(p)
}

fn harness_err(e: HarnessError) -> CliError {
    match e {
        HarnessError::Validation(_) | HarnessError::Load(_) => CliError::config(e),
        other => CliError::failed(other),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Run { scenario, out, trace } => {
            let run = run_scenario_file(&scenario).map_err(harness_err)?;
            match &out {
                Some(p) => emit_metrics(&run, p, trace.as_deref()).map_err(harness_err)?,
                None => {
                    let w = output(None).map_err(CliError::failed)?;
                    write_metrics_csv(&run.metrics, w).map_err(harness_err)?;
                    if let Some(tp) = &trace {
                        let w = output(Some(tp)).map_err(CliError::failed)?;
                        write_trace_jsonl(&run.trace, w).map_err(harness_err)?;
                    }
                }
            }
            if run.metrics.iter().any(|m| !m.succeeded) {
                tracing::warn!("some pilots failed; see the trace for details");
            }
        }
        Cmd::Replay { table, params, out } => {
            let params = params.as_deref().map(load_params).transpose()?;
            let w = output(out.as_deref()).map_err(CliError::failed)?;
            match table {
                Table::Table1 => {
                    let fitted = params
                        .as_ref()
                        .map(|p| (&p.perf_params, p.reference_job().expect("checked on load")));
                    let rows = replay_table1(fitted).map_err(harness_err)?;
                    write_table1_csv(&rows, w).map_err(harness_err)?;
                    eprintln!("note: t_model excludes staging; staging_s is reported separately");
                }
                Table::Table2 => {
                    let rows = match &params {
                        Some(p) => replay_table2(&p.perf_params),
                        None => replay_table2_default(),
                    };
                    write_table2_csv(&rows, w).map_err(harness_err)?;
                }
            }
        }
        Cmd::Calibrate { out, residuals } => {
            let c = calibrate(&table1_rows(), &MachineSpec::default())
                .map_err(CliError::failed)?;
            let json = serde_json::to_string_pretty(&ParamsFile::from(&c)).expect("serializes");
            std::fs::write(&out, json + "\n")
                .with_context(|| format!("writing {}", out.display()))
                .map_err(CliError::failed)?;
            let w = output(residuals.as_deref()).map_err(CliError::failed)?;
            write_residuals_csv(&c.residuals, w)
                .map_err(|e| CliError::failed(anyhow::Error::from(e)))?;
        }
        Cmd::Serve { port, scenario } => {
            let sc = match scenario {
                Some(p) => {
                    let s = Scenario::load(&p).map_err(CliError::config)?;
                    s.validate().map_err(CliError::config)?;
                    s
                }
                None => Scenario {
                    name: None,
                    machine: MachineSpec::default(),
                    domains: Vec::new(),
                    jobs: Vec::new(),
                    perf_params: Default::default(),
                    heartbeat: Default::default(),
                },
            };
            let svc = Arc::new(VirmService::simulated(sc.machine, &sc.perf_params, sc.heartbeat));
            let addr = SocketAddr::from(([127, 0, 0, 1], port));
            let rt = tokio::runtime::Runtime::new().map_err(CliError::failed)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("workspace service listening on http://{addr}");
                virm_http::serve(listener, svc).await?;
                Ok::<_, anyhow::Error>(())
            })
            .map_err(CliError::failed)?;
        }
    }
    Ok(())
}

fn main() {
    init_logging();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            e.code
        }
    };
    std::process::exit(code);
}
