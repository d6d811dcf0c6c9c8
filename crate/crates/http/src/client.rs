// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use virm_core::pilot::{Mode, VirmApi, VirtualClock};
use virm_core::virm::{RequestReceipt, StopReceipt, VirmError, WorkspaceStatus};
use virm_core::DomainConfig;

use crate::server::ErrorBody;
use crate::Identity;

/// Blocking client for a remote workspace service.
#[derive(Debug, Clone)]
pub struct HttpVirm {
    base: String,
    client: Client,
}

#[derive(Deserialize)]
struct Expiry {
    expires_at: f64,
}

#[derive(Deserialize)]
struct Now {
    now: f64,
}

impl HttpVirm {
    pub fn new(base_url: &str) -> Result<Self, VirmError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| VirmError::Transport(e.to_string()))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, VirmError> {
        let resp = req.send().map_err(|e| VirmError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| VirmError::Transport(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| VirmError::Transport(format!("bad response body: {e}")));
        }
        match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) if b.error_code == "UNKNOWN_WORKSPACE" => Err(VirmError::UnknownWorkspace(b.detail)),
            Ok(b) => Err(VirmError::Remote {
                code: b.error_code,
                detail: b.detail,
            }),
            Err(_) => Err(VirmError::Remote {
                code: format!("HTTP_{}", status.as_u16()),
                detail: text,
            }),
        }
    }

    fn post_empty(&self, path: &str) -> Result<serde_json::Value, VirmError> {
        self.send(self.client.post(self.url(path)))
    }
}

impl VirmApi for HttpVirm {
    fn request_diskspace(
        &self,
        image_id: &str,
        size_gb: f64,
        domain: &DomainConfig,
    ) -> Result<RequestReceipt, VirmError> {
        let body = json!({ "image_id": image_id, "size_gb": size_gb, "domain": domain });
        self.send(self.client.post(self.url("/v1/workspace")).json(&body))
    }

    fn mount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.post_empty(&format!("/v1/workspace/{id}/mount")).map(|_| ())
    }

    fn unmount_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.post_empty(&format!("/v1/workspace/{id}/unmount")).map(|_| ())
    }

    fn write_context(&self, id: &str, files: &BTreeMap<String, String>) -> Result<(), VirmError> {
        let req = self
            .client
            .put(self.url(&format!("/v1/workspace/{id}/context")))
            .json(&json!({ "files": files }));
        self.send::<serde_json::Value>(req).map(|_| ())
    }

    fn start_vm(&self, id: &str) -> Result<(), VirmError> {
        self.post_empty(&format!("/v1/workspace/{id}/start")).map(|_| ())
    }

    fn stop_vm(&self, id: &str) -> Result<StopReceipt, VirmError> {
        self.send(self.client.post(self.url(&format!("/v1/workspace/{id}/stop"))))
    }

    fn remove_diskspace(&self, id: &str) -> Result<(), VirmError> {
        self.send::<serde_json::Value>(self.client.delete(self.url(&format!("/v1/workspace/{id}"))))
            .map(|_| ())
    }

    fn heartbeat(&self, id: &str) -> Result<f64, VirmError> {
        self.send::<Expiry>(self.client.post(self.url(&format!("/v1/workspace/{id}/heartbeat"))))
            .map(|e| e.expires_at)
    }

    fn status(&self, id: &str) -> Result<WorkspaceStatus, VirmError> {
        self.send(self.client.get(self.url(&format!("/v1/workspace/{id}"))))
    }
}

impl VirtualClock for HttpVirm {
    fn now(&self) -> Result<f64, VirmError> {
        self.send::<Now>(self.client.get(self.url("/v1/_clock")))
            .map(|n| n.now)
    }

    fn advance_to(&self, t: f64) -> Result<(), VirmError> {
        let req = self
            .client
            .post(self.url("/v1/_clock"))
            .json(&json!({ "advance_to": t }));
        self.send::<serde_json::Value>(req).map(|_| ())
    }
}

impl HttpVirm {
    /// Advance the remote clock by `dt` seconds; returns the workspaces the
    /// lease sweeps stopped.
    pub fn tick(&self, dt: f64) -> Result<Vec<String>, VirmError> {
        #[derive(Deserialize)]
        struct Tick {
            expired: Vec<String>,
        }
        let req = self
            .client
            .post(self.url("/v1/_clock"))
            .json(&json!({ "advance_s": dt }));
        self.send::<Tick>(req).map(|t| t.expired)
    }
}

/// Probe `endpoint` for a workspace service.
///
/// Returns [`Mode::Virtualized`] only for a well-formed identity response
/// within `timeout`; anything else, including connection errors, means
/// [`Mode::Direct`].
pub fn detect_virm(endpoint: &str, timeout: Duration) -> Mode {
    let Ok(client) = Client::builder().timeout(timeout).build() else {
        return Mode::Direct;
    };
    let url = format!("{}/v1/identity", endpoint.trim_end_matches('/'));
    let Ok(resp) = client.get(url).send() else {
        return Mode::Direct;
    };
    if !resp.status().is_success() {
        return Mode::Direct;
    }
    match resp.json::<Identity>() {
        Ok(id) if id == Identity::current() => Mode::Virtualized,
        _ => Mode::Direct,
    }
}
