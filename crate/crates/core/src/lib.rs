// SPDX-License-Identifier: Apache-2.0

//! Simulation of virtualized batch worker nodes: a Xen-style credit
//! scheduler, a completion-time model for jobs inside guests, a
//! workspace-management service, the pilot that drives it, and a harness
//! that replays configurations end to end.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod domain;
pub mod exec;
pub mod harness;
pub mod perf;
pub mod pilot;
pub mod sched;
pub mod virm;

pub use domain::{
    validate_scenario, Cap, DomainConfig, HeartbeatPolicy, JobSpec, MachineSpec, Pinning,
    Scenario, ScenarioError, ValidatedScenario, ValidationErrors,
};

/// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/scheduler.md")]
    pub struct Scheduler;
    #[doc = include_str!("../../../book/src/completion-model.md")]
    pub struct CompletionModel;
    #[doc = include_str!("../../../book/src/memory.md")]
    pub struct Memory;
    #[doc = include_str!("../../../book/src/staging.md")]
    pub struct Staging;
    #[doc = include_str!("../../../book/src/workspace-api.md")]
    pub struct WorkspaceApi;
    #[doc = include_str!("../../../book/src/pilot.md")]
    pub struct Pilot;
    #[doc = include_str!("../../../book/src/harness.md")]
    pub struct Harness;
}
