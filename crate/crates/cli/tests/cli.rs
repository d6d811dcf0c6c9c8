// SPDX-License-Identifier: Apache-2.0

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use virm_core::virm::VirmService;
use virm_core::{HeartbeatPolicy, MachineSpec, Scenario};
use virm_http::spawn_server;

fn sim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_virm-sim"))
}

fn pilot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pilot"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn run_writes_one_row_per_pilot() {
    let out = sim().arg("run").arg(scenario("conf9.json")).output().unwrap();
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("conf_id,t_total_s,overhead_pct,cpu_share_avg,heartbeats_sent"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn overcommitted_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("over.json");
    let mut sc = Scenario::load(&scenario("conf9.json")).unwrap();
    for d in &mut sc.domains {
        d.memory = 4096;
    }
    std::fs::write(&p, sc.to_json_pretty()).unwrap();
    let out = sim().arg("run").arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("VALIDATION_FAILED"));
}

#[test]
fn missing_scenario_is_a_config_error() {
    let out = sim().args(["run", "/nonexistent/scenario.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_output_feeds_replay() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.json");
    let out = sim().arg("calibrate").arg("--out").arg(&params).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("conf_id,t_paper,t_model,residual_pct"));
    let out = sim().args(["replay", "table1", "--params"]).arg(&params).output().unwrap();
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.contains("Conf_1,7080.000,7080.000"));
}

#[test]
fn pilot_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("status.jsonl");
    let out = pilot()
        .args(["run", "--direct", "--job", "job1", "--scenario"])
        .arg(scenario("conf1.json"))
        .arg("--status-log")
        .arg(&log)
        .arg("--workdir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["phase"], "DONE");
    assert!(dir.path().join("job1").join("job.env").exists());
}

#[test]
fn pilot_without_service_falls_back_to_direct() {
    // nothing listens on port 9 of loopback
    let out = pilot()
        .args(["run", "--job", "job1", "--virm", "http://127.0.0.1:9", "--scenario"])
        .arg(scenario("conf2.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Direct"));
}

#[test]
fn pilot_uses_a_live_service() {
    let svc = Arc::new(VirmService::simulated(
        MachineSpec::default(),
        &Default::default(),
        HeartbeatPolicy::default(),
    ));
    let server = spawn_server(svc.clone(), SocketAddr::from(([127, 0, 0, 1], 0))).unwrap();
    let out = pilot()
        .args(["run", "--job", "job1", "--virm", &server.base_url(), "--scenario"])
        .arg(scenario("conf2.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Virtualized"));
    assert!(svc.workspaces().is_empty());
    assert!(svc.now() > 7000.0);
}

#[test]
fn pilot_unknown_job_is_a_config_error() {
    let out = pilot()
        .args(["run", "--direct", "--job", "nope", "--scenario"])
        .arg(scenario("conf1.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
