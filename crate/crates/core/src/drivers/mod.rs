//! Plug drivers: one uniform read-only contract over different devices.
//!
//! A driver performs exactly one HTTP round trip per [`PlugDriver::poll`]
//! and never takes longer than the plug's configured timeout. New device
//! types are added by registering a factory under an `extension:<name>`
//! driver kind, see [`DriverRegistry::register`].

mod http;
mod shelly;
mod simulated;
pub mod simulator;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::model::{DriverKind, PlugConfig};

pub use shelly::{parse_device_info, parse_switch_status, ShellyDriver};
pub use simulated::SimulatedDriver;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverErrorKind {
    Unreachable,
    Timeout,
    MalformedResponse,
    DeviceError,
    Unsupported,
}

impl fmt::Display for DriverErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriverErrorKind::Unreachable => "unreachable",
            DriverErrorKind::Timeout => "timeout",
            DriverErrorKind::MalformedResponse => "malformed-response",
            DriverErrorKind::DeviceError => "device-error",
            DriverErrorKind::Unsupported => "unsupported",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {detail}")]
pub struct DriverError {
    pub kind: DriverErrorKind,
    pub detail: String,
    pub occurred_at: i64,
}

impl DriverError {
    pub fn new(kind: DriverErrorKind, detail: impl Into<String>) -> Self {
        DriverError {
            kind,
            detail: detail.into(),
            occurred_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as i64)
                .unwrap_or(0),
        }
    }
}

/// A successful sensor read.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverReading {
    pub power_w: f64,
    pub energy_counter_wh: Option<f64>,
    /// Device-reported time, epoch ms. Informational only.
    pub device_ts: Option<i64>,
    /// Response body exactly as received.
    pub raw: String,
}

impl DriverReading {
    pub(crate) fn validated(self) -> Result<Self, DriverError> {
        if !(self.power_w.is_finite() && self.power_w >= 0.0) {
            return Err(DriverError::new(
                DriverErrorKind::MalformedResponse,
                format!("power {} W out of range in {}", self.power_w, self.raw),
            ));
        }
        if let Some(wh) = self.energy_counter_wh {
            if !(wh.is_finite() && wh >= 0.0) {
                return Err(DriverError::new(
                    DriverErrorKind::MalformedResponse,
                    format!("energy counter {wh} Wh out of range in {}", self.raw),
                ));
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub has_energy_counter: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub model: String,
    pub firmware: String,
    pub capabilities: Capabilities,
}

#[async_trait]
pub trait PlugDriver: Send + Sync {
    async fn poll(&self) -> Result<DriverReading, DriverError>;
    async fn identify(&self) -> Result<DeviceDescriptor, DriverError>;
}

pub type DriverFactory =
    Arc<dyn Fn(&PlugConfig) -> Result<Arc<dyn PlugDriver>, DriverError> + Send + Sync>;

/// Maps driver kinds to constructors.
#[derive(Clone, Default)]
pub struct DriverRegistry {
    extensions: HashMap<String, DriverFactory>,
}

impl DriverRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a driver for `extension:<name>` plugs.
    pub fn register(&mut self, name: impl Into<String>, factory: DriverFactory) {
        self.extensions.insert(name.into(), factory);
    }

    pub fn build(&self, plug: &PlugConfig) -> Result<Arc<dyn PlugDriver>, DriverError> {
        match &plug.driver {
            DriverKind::ShellyGen2 => Ok(Arc::new(ShellyDriver::new(plug)?)),
            DriverKind::Simulated => Ok(Arc::new(SimulatedDriver::new(plug)?)),
            DriverKind::Extension(name) => match self.extensions.get(name) {
                Some(factory) => factory(plug),
                None => Err(DriverError::new(
                    DriverErrorKind::Unsupported,
                    format!("no driver registered for extension:{name}"),
                )),
            },
        }
    }
}

impl fmt::Debug for DriverRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverRegistry")
            .field("extensions", &self.extensions.keys().collect::<Vec<_>>())
            .finish()
    }
}
