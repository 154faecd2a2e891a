//! Shelly Plus Plug S (Gen2 local RPC over HTTP).
//!
//! Only `apower`, `aenergy.total` and `aenergy.minute_ts` are read from
//! `Switch.GetStatus`; everything else in the body is ignored so newer
//! firmware with extra fields keeps working. The recorded bodies under
//! `fixtures/shelly/` pin the mapping.

use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;

use super::http::HttpGet;
use super::{
    Capabilities, DeviceDescriptor, DriverError, DriverErrorKind, DriverReading, PlugDriver,
};
use crate::model::PlugConfig;

pub const STATUS_PATH: &str = "/rpc/Switch.GetStatus?id=0";
pub const DEVICE_INFO_PATH: &str = "/rpc/Shelly.GetDeviceInfo";

#[derive(Deserialize)]
struct SwitchStatus {
    apower: Option<f64>,
    aenergy: Option<ActiveEnergy>,
}

#[derive(Deserialize)]
struct ActiveEnergy {
    total: f64,
    minute_ts: Option<i64>,
}

#[derive(Deserialize)]
struct RpcError {
    code: i64,
    message: String,
}

#[derive(Deserialize)]
struct DeviceInfo {
    model: String,
    #[serde(default)]
    ver: Option<String>,
    #[serde(default)]
    fw_id: Option<String>,
}

fn malformed(detail: String) -> DriverError {
    DriverError::new(DriverErrorKind::MalformedResponse, detail)
}

fn check_status(status: u16, body: &str) -> Result<(), DriverError> {
    if (200..300).contains(&status) {
        if let Ok(err) = serde_json::from_str::<RpcError>(body) {
            return Err(DriverError::new(
                DriverErrorKind::DeviceError,
                format!("rpc error {}: {}", err.code, err.message),
            ));
        }
        return Ok(());
    }
    let detail = match serde_json::from_str::<RpcError>(body) {
        Ok(err) => format!("HTTP {status}, rpc error {}: {}", err.code, err.message),
        Err(_) => format!("HTTP {status}: {body}"),
    };
    Err(DriverError::new(DriverErrorKind::DeviceError, detail))
}

/// Maps a `Switch.GetStatus` body to a reading.
pub fn parse_switch_status(body: &str) -> Result<DriverReading, DriverError> {
    let status: SwitchStatus = serde_json::from_str(body)
        .map_err(|e| malformed(format!("{e}; body: {body}")))?;
    let power_w = status
        .apower
        .ok_or_else(|| malformed(format!("missing apower; body: {body}")))?;
    DriverReading {
        power_w,
        energy_counter_wh: status.aenergy.as_ref().map(|a| a.total),
        device_ts: status
            .aenergy
            .as_ref()
            .and_then(|a| a.minute_ts)
            .map(|s| s * 1000),
        raw: body.to_owned(),
    }
    .validated()
}

/// Model and firmware from `Shelly.GetDeviceInfo`.
pub fn parse_device_info(body: &str) -> Result<(String, String), DriverError> {
    let info: DeviceInfo = serde_json::from_str(body)
        .map_err(|e| malformed(format!("{e}; body: {body}")))?;
    let firmware = info.ver.or(info.fw_id).unwrap_or_default();
    Ok((info.model, firmware))
}

#[derive(Debug, Clone)]
pub struct ShellyDriver {
    http: HttpGet,
}

impl ShellyDriver {
    pub fn new(plug: &PlugConfig) -> Result<Self, DriverError> {
        Ok(ShellyDriver {
            http: HttpGet::new(
                plug.address.base_url(),
                Duration::from_millis(plug.timeout_ms),
            )?,
        })
    }
}

#[async_trait]
impl PlugDriver for ShellyDriver {
    async fn poll(&self) -> Result<DriverReading, DriverError> {
        let resp = self.http.get(STATUS_PATH).await?;
        check_status(resp.status, &resp.body)?;
        parse_switch_status(&resp.body)
    }

    async fn identify(&self) -> Result<DeviceDescriptor, DriverError> {
        let info = self.http.get(DEVICE_INFO_PATH).await?;
        check_status(info.status, &info.body)?;
        let (model, firmware) = parse_device_info(&info.body)?;
        let status = self.http.get(STATUS_PATH).await?;
        check_status(status.status, &status.body)?;
        let reading = parse_switch_status(&status.body)?;
        Ok(DeviceDescriptor {
            model,
            firmware,
            capabilities: Capabilities {
                has_energy_counter: reading.energy_counter_wh.is_some(),
            },
        })
    }
}
