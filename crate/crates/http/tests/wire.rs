// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use virm_core::exec::SimExecutor;
use virm_core::pilot::{run_pilot, Mode, Pilot, PilotConfig, Phase, VirmApi, VirtualClock};
use virm_core::sched::steady_state_shares;
use virm_core::virm::{VirmError, VirmService, WorkspaceState, DEFAULT_IMAGE};
use virm_core::{DomainConfig, HeartbeatPolicy, JobSpec, MachineSpec};
use virm_core::perf::PerfParams;
use virm_http::{detect_virm, spawn_server, HttpVirm, ServerHandle};

fn start() -> (Arc<VirmService>, ServerHandle, HttpVirm) {
    let svc = Arc::new(VirmService::simulated(
        MachineSpec::default(),
        &PerfParams::default(),
        HeartbeatPolicy::default(),
    ));
    let h = spawn_server(svc.clone(), "127.0.0.1:0".parse().unwrap()).unwrap();
    let c = HttpVirm::new(&h.base_url()).unwrap();
    (svc, h, c)
}

fn dom(id: &str) -> DomainConfig {
    DomainConfig::new(id, 1, 2048)
}

#[test]
fn lifecycle_over_the_wire() {
    let (_svc, _h, c) = start();
    let r = c.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm1")).unwrap();
    assert_eq!(r.workspace_id, "ws-0001");
    let id = r.workspace_id;
    // still provisioning
    assert_eq!(c.mount_diskspace(&id).unwrap_err().code(), "BAD_STATE");
    c.advance_to(r.ready_at).unwrap();
    c.mount_diskspace(&id).unwrap();
    c.write_context(&id, &BTreeMap::from([("a".into(), "b".into())])).unwrap();
    c.unmount_diskspace(&id).unwrap();
    c.start_vm(&id).unwrap();
    assert_eq!(c.status(&id).unwrap().state, WorkspaceState::Running);
    assert_eq!(c.heartbeat(&id).unwrap(), r.ready_at + 90.0);
    let stop = c.stop_vm(&id).unwrap();
    c.advance_to(stop.busy_until).unwrap();
    c.remove_diskspace(&id).unwrap();
    assert!(matches!(c.status(&id), Err(VirmError::UnknownWorkspace(_))));
}

#[test]
fn error_statuses() {
    let (_svc, h, c) = start();
    let raw = reqwest::blocking::Client::new();
    let base = h.base_url();

    let resp = raw.get(format!("{base}/v1/workspace/ws-9999")).send().unwrap();
    assert_eq!(resp.status().as_u16(), 404);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["error_code"], "UNKNOWN_WORKSPACE");

    let r = c.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm1")).unwrap();
    let resp = raw.post(format!("{base}/v1/workspace/{}/start", r.workspace_id)).send().unwrap();
    assert_eq!(resp.status().as_u16(), 409);

    let resp = raw
        .post(format!("{base}/v1/workspace"))
        .json(&serde_json::json!({"image_id": "slc4", "size_gb": 10.0, "domain": {"domain_id": "x", "vcpus": 0, "memory": 512}}))
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 422);

    let resp = raw
        .post(format!("{base}/v1/workspace"))
        .json(&serde_json::json!({"image_id": "slc4", "size_gb": 10.0}))
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 422);

    c.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm2")).unwrap();
    c.request_diskspace(DEFAULT_IMAGE, 10.0, &dom("vm3")).unwrap();
    let resp = raw
        .post(format!("{base}/v1/workspace"))
        .json(&serde_json::json!({"image_id": "slc4", "size_gb": 10.0, "domain": dom("vm4")}))
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 507);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["error_code"], "INSUFFICIENT_CAPACITY");
}

#[test]
fn probe_finds_service() {
    let (_svc, h, _c) = start();
    assert_eq!(detect_virm(&h.base_url(), Duration::from_secs(2)), Mode::Virtualized);
}

#[test]
fn probe_without_listener_is_direct() {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    assert_eq!(detect_virm(&format!("http://{addr}"), Duration::from_secs(2)), Mode::Direct);
}

#[test]
fn probe_with_malformed_reply_is_direct() {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    let t = std::thread::spawn(move || {
        let (mut s, _) = l.accept().unwrap();
        let mut buf = [0u8; 1024];
        let _ = s.read(&mut buf);
        let _ = s.write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 5\r\nConnection: close\r\n\r\nhello");
    });
    assert_eq!(detect_virm(&format!("http://{addr}"), Duration::from_secs(2)), Mode::Direct);
    t.join().unwrap();
}

#[test]
fn pilot_runs_over_http() {
    let (svc, _h, c) = start();
    let job = JobSpec {
        id: "job1".into(),
        cpu_work: 600.0,
        event_count: 10,
        mem_base: 256.0,
        mem_per_event: 0.0,
        input_size: 0.5,
        output_size: 0.1,
    };
    let d = DomainConfig::new("vm1", 2, 2048);
    let cfg = PilotConfig::new(job, Some(d.clone()), MachineSpec::default(), PerfParams::default());
    let mut exec = SimExecutor::new(cfg.params.clone(), cfg.machine.clone());
    let mut pilot = Pilot::new(cfg, Mode::Virtualized);
    let shares = steady_state_shares(&MachineSpec::default(), &[d], 0.3, 3.0);
    let rep = run_pilot(&mut pilot, &c, &c, &mut exec, shares, 1).unwrap();
    assert_eq!(rep.phase, Phase::Done, "{:?}", pilot.state().status_log);
    assert!(rep.heartbeats_sent > 0);
    assert!(svc.workspaces().is_empty());
    assert_eq!(svc.now(), rep.finished_at);
}
