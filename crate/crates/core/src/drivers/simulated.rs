//! Driver for the simulator's plain JSON shape (`/sim/status`, `/sim/info`).

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::http::HttpGet;
use super::{
    Capabilities, DeviceDescriptor, DriverError, DriverErrorKind, DriverReading, PlugDriver,
};
use crate::model::PlugConfig;

pub const STATUS_PATH: &str = "/sim/status";
pub const INFO_PATH: &str = "/sim/info";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStatus {
    pub plug_id: String,
    pub t_ms: i64,
    pub power_w: f64,
    #[serde(default)]
    pub energy_wh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimInfo {
    pub model: String,
    pub firmware: String,
    pub has_energy_counter: bool,
}

fn expect_ok(status: u16, body: &str) -> Result<(), DriverError> {
    if (200..300).contains(&status) {
        Ok(())
    } else {
        Err(DriverError::new(
            DriverErrorKind::DeviceError,
            format!("HTTP {status}: {body}"),
        ))
    }
}

fn malformed(e: serde_json::Error, body: &str) -> DriverError {
    DriverError::new(
        DriverErrorKind::MalformedResponse,
        format!("{e}; body: {body}"),
    )
}

#[derive(Debug, Clone)]
pub struct SimulatedDriver {
    http: HttpGet,
}

impl SimulatedDriver {
    pub fn new(plug: &PlugConfig) -> Result<Self, DriverError> {
        Ok(SimulatedDriver {
            http: HttpGet::new(
                plug.address.base_url(),
                Duration::from_millis(plug.timeout_ms),
            )?,
        })
    }
}

#[async_trait]
impl PlugDriver for SimulatedDriver {
    async fn poll(&self) -> Result<DriverReading, DriverError> {
        let resp = self.http.get(STATUS_PATH).await?;
        expect_ok(resp.status, &resp.body)?;
        let s: SimStatus = serde_json::from_str(&resp.body).map_err(|e| malformed(e, &resp.body))?;
        DriverReading {
            power_w: s.power_w,
            energy_counter_wh: s.energy_wh,
            device_ts: Some(s.t_ms),
            raw: resp.body,
        }
        .validated()
    }

    async fn identify(&self) -> Result<DeviceDescriptor, DriverError> {
        let resp = self.http.get(INFO_PATH).await?;
        expect_ok(resp.status, &resp.body)?;
        let info: SimInfo = serde_json::from_str(&resp.body).map_err(|e| malformed(e, &resp.body))?;
        Ok(DeviceDescriptor {
            model: info.model,
            firmware: info.firmware,
            capabilities: Capabilities {
                has_energy_counter: info.has_energy_counter,
            },
        })
    }
}
