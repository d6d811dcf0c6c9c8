// SPDX-License-Identifier: Apache-2.0

//! The shipped scenario files must match what the generator produces.
//! Set `VIRM_REGEN_SCENARIOS=1` to rewrite them.

use std::path::PathBuf;

use virm_core::calibrate::table1_rows;
use virm_core::harness::{reference_job, run_scenario, scenario_stem, table1_scenario};
use virm_core::perf::PerfParams;
use virm_core::Scenario;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn shipped_scenarios_match_generator() {
    let regen = std::env::var_os("VIRM_REGEN_SCENARIOS").is_some();
    let params = PerfParams::default();
    let job = reference_job();
    for row in table1_rows() {
        let sc = table1_scenario(&row, &params, &job);
        let path = dir().join(format!("{}.json", scenario_stem(&row.conf_id)));
        if regen {
            std::fs::write(&path, sc.to_json_pretty() + "\n").unwrap();
            continue;
        }
        let shipped = Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(shipped, sc, "{} is stale", path.display());
        shipped.validate().unwrap();
    }
}

#[test]
fn conf9_runs_three_pilots_within_five_percent() {
    let sc = Scenario::load(&dir().join("conf9.json")).unwrap();
    let run = run_scenario(&sc).unwrap();
    assert_eq!(run.metrics.len(), 3);
    let tp = 7970.0;
    for m in &run.metrics {
        assert!(m.succeeded);
        assert!((m.t_job - tp).abs() / tp <= 0.05, "{m:?}");
    }
}
