// SPDX-License-Identifier: Apache-2.0

//! HTTP front end for the workspace service, the matching blocking client,
//! and the loopback probe pilots use to find the service.

mod client;
mod server;

pub use client::{detect_virm, HttpVirm};
pub use server::{router, serve, spawn_server, ErrorBody, ServerHandle, DEFAULT_PORT};

/// Body of `GET /v1/identity`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Identity {
    pub service: String,
    pub api_version: String,
}

impl Identity {
    pub fn current() -> Self {
        Self {
            service: "virm".into(),
            api_version: "v1".into(),
        }
    }
}
