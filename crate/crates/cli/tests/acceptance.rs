// SPDX-License-Identifier: Apache-2.0

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::net::SocketAddr;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use virm_core::calibrate::{calibrate, table1_rows, Calibration, SHARE_WARMUP_S, SHARE_WINDOW_S};
use virm_core::exec::SimExecutor;
use virm_core::harness::{replay_table1, replay_table2_default, run_scenario, table1_scenario};
use virm_core::perf::{simulate_ballooning, EndpointKind, MemoryOutcome};
use virm_core::pilot::{run_pilot, FaultInjector, Mode, Pilot, PilotConfig, RecordingApi, VirmApi, VirtualClock};
use virm_core::sched::{steady_state_shares, CreditScheduler, Workload};
use virm_core::virm::{VirmError, VirmService, WorkspaceState};
use virm_core::{DomainConfig, HeartbeatPolicy, JobSpec, MachineSpec, Scenario};
use virm_http::{spawn_server, HttpVirm};

// Pinned tolerances.
const TABLE1_TOL: f64 = 0.10;
const CONF10_MIN_OVERHEAD_PCT: f64 = 70.0;
const TABLE1_RUNTIME_S: f64 = 10.0;
const TABLE2_SIG_REL: f64 = 5e-6;
const WEIGHT_RATIO_TOL: f64 = 0.05;
const CAP_SHARE: (f64, f64) = (0.48, 0.51);
const MEMORY_BAND_S: f64 = 100.0;
const LEASE_DEADLINE_S: f64 = 100.0;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn fitted() -> &'static Calibration {
    use std::sync::OnceLock;
    static C: OnceLock<Calibration> = OnceLock::new();
    C.get_or_init(|| calibrate(&table1_rows(), &MachineSpec::default()).expect("calibration converges"))
}

fn table1() -> Outcome {
    let t0 = Instant::now();
    let c = calibrate(&table1_rows(), &MachineSpec::default()).map_err(|e| e.to_string())?;
    let rows = replay_table1(Some((&c.params, &c.reference_job))).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let mut bad = Vec::new();
    let mut summary = Vec::new();
    for r in &rows {
        let rel = (r.t_model - r.t_measured).abs() / r.t_measured;
        summary.push(format!("{} {:.0}s ({:+.2}%)", r.conf_id, r.t_model, r.residual_pct));
        if rel > TABLE1_TOL {
            bad.push(format!("{} off by {:.1}%", r.conf_id, rel * 100.0));
        }
    }
    let base = rows.iter().find(|r| r.conf_id == "Conf_1").ok_or("no Conf_1 row")?;
    if base.t_model != 7080.0 {
        bad.push(format!("baseline {} != 7080", base.t_model));
    }
    let c10 = rows.iter().find(|r| r.conf_id == "Conf_10.1").ok_or("no Conf_10.1 row")?;
    if c10.overhead_pct < CONF10_MIN_OVERHEAD_PCT {
        bad.push(format!("Conf_10.1 overhead {:.1}%", c10.overhead_pct));
    }
    if secs >= TABLE1_RUNTIME_S {
        bad.push(format!("took {secs:.1}s"));
    }
    let s = format!("{}; Conf_10.1 overhead {:.1}%; {secs:.2}s", summary.join(", "), c10.overhead_pct);
    check(bad.is_empty(), s, bad.join("; "))
}

fn table2() -> Outcome {
    let rows = replay_table2_default();
    let want = [62.8, 8.8, 8.3, 6.4, 6.6];
    if rows.len() != want.len() {
        return Err(format!("{} rows", rows.len()));
    }
    let mut bad = Vec::new();
    for (r, w) in rows.iter().zip(want) {
        if r.throughput_readback != w {
            bad.push(format!("readback {} != {w}", r.throughput_readback));
        }
        let oracle = 3.0 * 1024.0 * 8.0 / w;
        if (r.transfer_time_s - oracle).abs() / oracle > TABLE2_SIG_REL {
            bad.push(format!("{} s vs {oracle} s", r.transfer_time_s));
        }
    }
    check(bad.is_empty(), "5 rows exact; 3 GB times match 24576/throughput".into(), bad.join("; "))
}

fn proportional_share() -> Outcome {
    let m = MachineSpec {
        pcpus: 1,
        ..MachineSpec::default()
    };
    let doms = [
        DomainConfig::new("a", 1, 1024).with_weight(1024),
        DomainConfig::new("b", 1, 1024).with_weight(512),
        DomainConfig::new("c", 1, 1024).with_weight(256),
    ];
    let mut s = CreditScheduler::new(&m, &doms);
    s.run_until(60.0).map_err(|e| e.to_string())?;
    let t: Vec<f64> = ["a", "b", "c"].iter().map(|d| s.cpu_time(d).unwrap()).collect();
    let ab = t[0] / t[1];
    let bc = t[1] / t[2];
    let ac = t[0] / t[2];
    let ok = (ab / 2.0 - 1.0).abs() <= WEIGHT_RATIO_TOL
        && (bc / 2.0 - 1.0).abs() <= WEIGHT_RATIO_TOL
        && (ac / 4.0 - 1.0).abs() <= WEIGHT_RATIO_TOL;
    let s = format!("cpu_time {:.2}/{:.2}/{:.2} s, ratios {ab:.3} {bc:.3} {ac:.3}", t[0], t[1], t[2]);
    check(ok, s.clone(), s)
}

fn cap_enforcement() -> Outcome {
    let m = MachineSpec {
        pcpus: 1,
        ..MachineSpec::default()
    };
    let mut s = CreditScheduler::new(&m, &[DomainConfig::new("a", 1, 1024).with_cap(50)]);
    s.run_until(60.0).map_err(|e| e.to_string())?;
    let share = s.cpu_time("a").unwrap() / 60.0;
    let msg = format!("share {share:.4}");
    check((CAP_SHARE.0..=CAP_SHARE.1).contains(&share), msg.clone(), msg)
}

fn fair_share_vs_pinned() -> Outcome {
    let m = MachineSpec {
        pcpus: 2,
        ..MachineSpec::default()
    };
    let total = |pin: bool| -> Result<f64, String> {
        let mut a = DomainConfig::new("a", 2, 1024);
        let mut b = DomainConfig::new("b", 2, 1024);
        if pin {
            a = a.with_pinning(vec![0]);
            b = b.with_pinning(vec![1]);
        }
        let mut s = CreditScheduler::new(&m, &[a, b]);
        s.set_workload("b", Workload::Intermittent { busy_ms: 300, idle_ms: 700 })
            .map_err(|e| e.to_string())?;
        s.run_until(60.0).map_err(|e| e.to_string())?;
        Ok(s.guest_cpu_time())
    };
    let fair = total(false)?;
    let pinned = total(true)?;
    let msg = format!("fair-share {fair:.2} s vs pinned {pinned:.2} s");
    check(fair >= pinned, msg.clone(), msg)
}

fn memory_band() -> Outcome {
    let c = fitted();
    let machine = MachineSpec {
        total_memory: 8192 + MachineSpec::default().dom0_memory,
        ..MachineSpec::default()
    };
    let mut totals = Vec::new();
    for mem in [8192u64, 7168, 6144, 3072] {
        let sc = Scenario {
            name: Some(format!("mem{mem}")),
            machine: machine.clone(),
            domains: vec![DomainConfig::new("vm1", 4, mem)],
            jobs: vec![JobSpec {
                id: "job1".into(),
                ..c.reference_job.clone()
            }],
            perf_params: c.params.clone(),
            heartbeat: HeartbeatPolicy::default(),
        };
        let run = run_scenario(&sc).map_err(|e| format!("{mem} MiB: {e}"))?;
        let m = &run.metrics[0];
        if !m.succeeded {
            return Err(format!("{mem} MiB run failed"));
        }
        totals.push((mem, m.t_total));
    }
    let lo = totals.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    let hi = totals.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let parts: Vec<String> = totals.iter().map(|(m, t)| format!("{m}:{t:.1}")).collect();
    let msg = format!("t_total {} spread {:.1} s", parts.join(" "), hi - lo);
    check(hi - lo <= MEMORY_BAND_S, msg.clone(), msg)
}

fn balloon_under_cap() -> Outcome {
    let c = fitted();
    let job = JobSpec {
        id: "job1".into(),
        ..c.reference_job.clone()
    };
    let mut results = Vec::new();
    for cap in [0u32, 50] {
        let dom = DomainConfig::new("vm1", 1, 2048).with_cap(cap);
        let sc = Scenario {
            name: Some(format!("cap{cap}")),
            machine: MachineSpec::default(),
            domains: vec![dom.clone()],
            jobs: vec![job.clone()],
            perf_params: c.params.clone(),
            heartbeat: HeartbeatPolicy::default(),
        };
        let run = run_scenario(&sc).map_err(|e| e.to_string())?;
        let r = run.reports[0].job_result.clone().ok_or("no job result")?;
        if !r.succeeded() {
            return Err(format!("cap {cap}: job ended {:?}", r.outcome));
        }
        let trace = simulate_ballooning(&c.params, &dom, &job, r.finished_at - r.started_at);
        if trace.outcome != MemoryOutcome::Completed {
            return Err(format!("cap {cap}: balloon trace {:?}", trace.outcome));
        }
        results.push(trace);
    }
    let (free, capped) = (&results[0], &results[1]);
    if free.requests.is_empty() || free.requests.len() != capped.requests.len() {
        return Err(format!("{} vs {} requests", free.requests.len(), capped.requests.len()));
    }
    let slower = free
        .requests
        .iter()
        .zip(&capped.requests)
        .all(|(f, c)| match (f.time_to_grant(), c.time_to_grant()) {
            (Some(f), Some(c)) => c > f,
            _ => false,
        });
    let msg = format!(
        "{} requests; time-to-grant {:.2} s uncapped vs {:.2} s capped; both completed",
        free.requests.len(),
        free.requests[0].time_to_grant().unwrap_or(f64::NAN),
        capped.requests[0].time_to_grant().unwrap_or(f64::NAN)
    );
    check(slower, msg.clone(), msg)
}

fn lease_liveness() -> Outcome {
    let policy = HeartbeatPolicy {
        interval: 30.0,
        miss_threshold: 3,
        sweep_period: 10.0,
    };
    let svc = Arc::new(VirmService::simulated(MachineSpec::default(), &Default::default(), policy));
    let server = spawn_server(svc, SocketAddr::from(([127, 0, 0, 1], 0))).map_err(|e| e.to_string())?;
    let api = HttpVirm::new(&server.base_url()).map_err(|e| e.to_string())?;
    let e = |e: VirmError| e.to_string();
    let r = api
        .request_diskspace("slc4", 10.0, &DomainConfig::new("vm1", 1, 2048))
        .map_err(e)?;
    let id = r.workspace_id;
    let now = api.now().map_err(e)?;
    api.tick((r.ready_at - now).max(0.0)).map_err(e)?;
    api.mount_diskspace(&id).map_err(e)?;
    api.unmount_diskspace(&id).map_err(e)?;
    api.start_vm(&id).map_err(e)?;
    api.tick(45.0).map_err(e)?;
    api.heartbeat(&id).map_err(e)?;
    let mut waited = 0.0;
    loop {
        let st = api.status(&id).map_err(e)?;
        if st.state == WorkspaceState::Stopped {
            break;
        }
        if waited > LEASE_DEADLINE_S {
            return Err(format!("still {} at t+{waited}s", st.state.as_str()));
        }
        api.tick(1.0).map_err(e)?;
        waited += 1.0;
    }
    let msg = format!("STOPPED {waited:.0} s after the last heartbeat (over {})", server.base_url());
    check(waited <= LEASE_DEADLINE_S, msg.clone(), msg)
}

fn protocol_conformance() -> Outcome {
    let small_job = JobSpec {
        id: "job1".into(),
        cpu_work: 900.0,
        event_count: 100,
        mem_base: 512.0,
        mem_per_event: 0.0,
        input_size: 1.0,
        output_size: 0.5,
    };
    let machine = MachineSpec::default();
    let dom = DomainConfig::new("vm1", 4, 2048);
    let cfg = PilotConfig::new(small_job, Some(dom.clone()), machine.clone(), Default::default());
    let shares = steady_state_shares(&machine, std::slice::from_ref(&dom), SHARE_WARMUP_S, SHARE_WINDOW_S);
    let drive = |api: &dyn VirmApi, svc: &VirmService| -> Result<Pilot, String> {
        let mut exec = SimExecutor::new(cfg.params.clone(), machine.clone());
        let mut pilot = Pilot::new(cfg.clone(), Mode::Virtualized).starting_at(svc.now());
        run_pilot(&mut pilot, api, svc, &mut exec, shares.clone(), 1).map_err(|e| e.to_string())?;
        Ok(pilot)
    };

    let svc = VirmService::simulated(machine.clone(), &Default::default(), HeartbeatPolicy::default());
    let rec = RecordingApi::new(&svc);
    let pilot = drive(&rec, &svc)?;
    let rep = pilot.report();
    let seq: Vec<&str> = rec
        .calls()
        .iter()
        .filter(|(c, _)| c.is_lifecycle())
        .map(|(c, _)| c.as_str())
        .collect();
    let mut want = vec!["request", "mount", "unmount", "start"];
    want.extend(std::iter::repeat_n("heartbeat", rep.heartbeats_sent as usize));
    want.extend(["stop", "delete"]);
    if !rep.succeeded() || seq != want || rep.heartbeats_sent == 0 {
        return Err(format!("happy path gave {seq:?}"));
    }
    let total_calls = rec.calls().len();

    let mut leaks = Vec::new();
    for k in 0..total_calls {
        let svc = VirmService::simulated(machine.clone(), &Default::default(), HeartbeatPolicy::default());
        let api = FaultInjector::new(&svc, k);
        drive(&api, &svc)?;
        if !svc.workspaces().is_empty() {
            leaks.push(k);
        }
    }
    check(
        leaks.is_empty(),
        format!(
            "sequence ok ({} heartbeats); all {total_calls} injection points end REMOVED",
            rep.heartbeats_sent
        ),
        format!("workspace left behind when call(s) {leaks:?} fail"),
    )
}

fn staging_policy() -> Outcome {
    let c = fitted();
    let mut runs = 0;
    let mut transfers = 0;
    let mut bad = 0;
    for row in table1_rows().iter().filter(|r| !r.is_baseline()) {
        let run = run_scenario(&table1_scenario(row, &c.params, &c.reference_job)).map_err(|e| e.to_string())?;
        runs += run.reports.len();
        for t in run.transfers() {
            transfers += 1;
            if t.src == EndpointKind::Virtual || t.dst == EndpointKind::Virtual {
                bad += 1;
            }
        }
    }
    if transfers == 0 {
        return Err("no transfers traced".into());
    }
    check(
        bad == 0,
        format!("{runs} sandboxed pilots, {transfers} transfers, none touching a guest"),
        format!("{bad} of {transfers} transfers have a VIRTUAL endpoint"),
    )
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_virm-sim");
    let scen = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/conf9.json");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let suite = |tag: &str| -> Result<Vec<Vec<u8>>, String> {
        let p = |n: &str| dir.path().join(format!("{tag}-{n}"));
        let runs: Vec<Vec<String>> = vec![
            vec!["calibrate".into(), "--out".into(), p("params.json").display().to_string(), "--residuals".into(), p("residuals.csv").display().to_string()],
            vec!["replay".into(), "table1".into(), "--params".into(), p("params.json").display().to_string(), "--out".into(), p("table1.csv").display().to_string()],
            vec!["replay".into(), "table2".into(), "--out".into(), p("table2.csv").display().to_string()],
            vec!["run".into(), scen.into(), "--out".into(), p("metrics.csv").display().to_string(), "--trace".into(), p("trace.jsonl").display().to_string()],
        ];
        for args in runs {
            let out = Command::new(bin).args(&args).output().map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
        ["params.json", "residuals.csv", "table1.csv", "table2.csv", "metrics.csv", "trace.jsonl"]
            .iter()
            .map(|n| std::fs::read(p(n)).map_err(|e| e.to_string()))
            .collect()
    };
    let a = suite("a")?;
    let b = suite("b")?;
    let bytes: usize = a.iter().map(Vec::len).sum();
    check(a == b, format!("6 outputs, {bytes} bytes, identical across runs"), "outputs differ between runs".into())
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("table1_reproduction", table1),
        ("table2_reproduction", table2),
        ("proportional_share", proportional_share),
        ("cap_enforcement", cap_enforcement),
        ("fair_share_vs_pinned", fair_share_vs_pinned),
        ("memory_band", memory_band),
        ("balloon_under_cap", balloon_under_cap),
        ("lease_liveness", lease_liveness),
        ("protocol_conformance", protocol_conformance),
        ("staging_policy", staging_policy),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(msg) => println!("PASS {:>2} {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
