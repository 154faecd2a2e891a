//! Domain types shared by every subsystem.
//!
//! Units: power in watts, energy in watt-hours. Kilowatt-hours only appear in
//! [`EnergySummary`] and presentation code. Timestamps are integer
//! milliseconds since the Unix epoch, taken from the collector host's clock.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MIN_POLL_INTERVAL_MS: u64 = 100;
pub const MAX_POLL_INTERVAL_MS: u64 = 3_600_000;
pub const DEFAULT_POLL_INTERVAL_MS: u64 = 1000;
pub const DEFAULT_POLL_TIMEOUT_MS: u64 = 2000;

pub const MS_PER_HOUR: f64 = 3_600_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {what} {value:?}: must be 1-64 characters of [a-z0-9-]")]
pub struct InvalidToken {
    pub what: &'static str,
    pub value: String,
}

fn is_token(s: &str) -> bool {
    (1..=64).contains(&s.len())
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

macro_rules! token_type {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Result<Self, InvalidToken> {
                let value = value.into();
                if is_token(&value) {
                    Ok(Self(value))
                } else {
                    Err(InvalidToken { what: $what, value })
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = InvalidToken;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::new(s).map_err(serde::de::Error::custom)
            }
        }
    };
}

token_type!(
    /// Identifier of a configured plug; doubles as a directory name.
    PlugId,
    "plug_id"
);
token_type!(ExperimentId, "experiment_id");
token_type!(SessionId, "session_id");

/// Which driver talks to a plug.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DriverKind {
    ShellyGen2,
    Simulated,
    /// Registered by name at runtime, e.g. `extension:tapo-p115`.
    Extension(String),
}

impl DriverKind {
    pub fn is_builtin(&self) -> bool {
        !matches!(self, DriverKind::Extension(_))
    }
}

impl fmt::Display for DriverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverKind::ShellyGen2 => f.write_str("shelly-gen2"),
            DriverKind::Simulated => f.write_str("simulated"),
            DriverKind::Extension(name) => write!(f, "extension:{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown driver kind {0:?} (expected shelly-gen2, simulated or extension:<name>)")]
pub struct UnknownDriverKind(pub String);

impl FromStr for DriverKind {
    type Err = UnknownDriverKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shelly-gen2" => Ok(DriverKind::ShellyGen2),
            "simulated" => Ok(DriverKind::Simulated),
            _ => match s.strip_prefix("extension:") {
                Some(name) if is_token(name) => Ok(DriverKind::Extension(name.to_owned())),
                _ => Err(UnknownDriverKind(s.to_owned())),
            },
        }
    }
}

impl Serialize for DriverKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DriverKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Network location of a plug: `host[:port][/path-prefix]`.
///
/// The path prefix lets one simulator process expose many plugs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Address {
    pub host: String,
    pub port: Option<u16>,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid address {0:?}")]
pub struct InvalidAddress(pub String);

impl Address {
    pub fn base_url(&self) -> String {
        let host = if self.host.contains(':') {
            format!("[{}]", self.host)
        } else {
            self.host.clone()
        };
        match self.port {
            Some(port) => format!("http://{host}:{port}{}", self.path),
            None => format!("http://{host}{}", self.path),
        }
    }
}

impl FromStr for Address {
    type Err = InvalidAddress;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || InvalidAddress(s.to_owned());
        let rest = s.strip_prefix("http://").unwrap_or(s);
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].trim_end_matches('/')),
            None => (rest, ""),
        };
        let (host, port) = if let Some(stripped) = authority.strip_prefix('[') {
            let end = stripped.find(']').ok_or_else(err)?;
            let host = &stripped[..end];
            let tail = &stripped[end + 1..];
            let port = match tail.strip_prefix(':') {
                Some(p) => Some(p.parse().map_err(|_| err())?),
                None if tail.is_empty() => None,
                None => return Err(err()),
            };
            (host, port)
        } else {
            match authority.rsplit_once(':') {
                Some((h, p)) => (h, Some(p.parse().map_err(|_| err())?)),
                None => (authority, None),
            }
        };
        let host_ok = !host.is_empty()
            && host
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | ':' | '_'));
        if !host_ok {
            return Err(err());
        }
        Ok(Address {
            host: host.to_owned(),
            port,
            path: path.to_owned(),
        })
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.host.contains(':') {
            write!(f, "[{}]", self.host)?;
        } else {
            f.write_str(&self.host)?;
        }
        if let Some(port) = self.port {
            write!(f, ":{port}")?;
        }
        f.write_str(&self.path)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A registered plug, validated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlugConfig {
    pub id: PlugId,
    pub driver: DriverKind,
    pub address: Address,
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
}

fn default_interval() -> u64 {
    DEFAULT_POLL_INTERVAL_MS
}

fn default_timeout() -> u64 {
    DEFAULT_POLL_TIMEOUT_MS
}

impl PlugConfig {
    pub fn new(id: PlugId, driver: DriverKind, address: Address) -> Self {
        PlugConfig {
            id,
            driver,
            address,
            interval_ms: DEFAULT_POLL_INTERVAL_MS,
            timeout_ms: DEFAULT_POLL_TIMEOUT_MS,
            label: String::new(),
        }
    }

    pub fn with_interval(mut self, interval_ms: u64) -> Self {
        self.interval_ms = interval_ms;
        self
    }

    pub fn with_timeout(mut self, timeout_ms: u64) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }
}

/// Per-sample annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct SampleFlags {
    /// The interval following this sample is an outage.
    pub gap_after: bool,
    pub estimated: bool,
}

impl SampleFlags {
    pub const GAP_AFTER: SampleFlags = SampleFlags {
        gap_after: true,
        estimated: false,
    };

    pub fn is_empty(&self) -> bool {
        !self.gap_after && !self.estimated
    }
}

impl Serialize for SampleFlags {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut names = Vec::with_capacity(2);
        if self.gap_after {
            names.push("gap-after");
        }
        if self.estimated {
            names.push("estimated");
        }
        names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SampleFlags {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let mut flags = SampleFlags::default();
        for name in names {
            match name.as_str() {
                "gap-after" => flags.gap_after = true,
                "estimated" => flags.estimated = true,
                other => {
                    return Err(serde::de::Error::custom(format!("unknown flag {other:?}")))
                }
            }
        }
        Ok(flags)
    }
}

/// One reading from one plug. Serialized as a single JSON line with keys
/// `ts, seq, plug, w, wh, flags` in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub ts: i64,
    pub seq: u64,
    #[serde(rename = "plug")]
    pub plug_id: PlugId,
    #[serde(rename = "w")]
    pub power_w: f64,
    #[serde(rename = "wh", default, skip_serializing_if = "Option::is_none")]
    pub energy_counter_wh: Option<f64>,
    #[serde(default, skip_serializing_if = "SampleFlags::is_empty")]
    pub flags: SampleFlags,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("power {0} W is negative or not finite")]
    BadPower(f64),
    #[error("energy counter {0} Wh is negative or not finite")]
    BadCounter(f64),
}

impl PowerSample {
    pub fn new(ts: i64, seq: u64, plug_id: PlugId, power_w: f64) -> Self {
        PowerSample {
            ts,
            seq,
            plug_id,
            power_w,
            energy_counter_wh: None,
            flags: SampleFlags::default(),
        }
    }

    pub fn with_counter(mut self, wh: f64) -> Self {
        self.energy_counter_wh = Some(wh);
        self
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.power_w.is_finite() && self.power_w >= 0.0) {
            return Err(SampleError::BadPower(self.power_w));
        }
        if let Some(wh) = self.energy_counter_wh {
            if !(wh.is_finite() && wh >= 0.0) {
                return Err(SampleError::BadCounter(wh));
            }
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        // Serializing plain data with string keys cannot fail.
        serde_json::to_string(self).expect("sample serializes")
    }
}

/// A named measurement window bound to one plug. Persisted as the
/// session's `.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSession {
    pub experiment_id: ExperimentId,
    pub session_id: SessionId,
    pub plug_id: PlugId,
    pub start_ts: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_ts: Option<i64>,
    pub interval_ms: u64,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub error_count: u64,
}

impl ExperimentSession {
    pub fn is_closed(&self) -> bool {
        self.end_ts.is_some()
    }

    /// Whether `ts` lies inside the session bounds. The upper bound only
    /// applies once the session is closed.
    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start_ts && self.end_ts.is_none_or(|end| ts <= end)
    }
}

/// Conversion rates for the what-if cost and footprint figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TariffSettings {
    pub price_per_kwh: f64,
    #[serde(default = "default_currency")]
    pub currency_label: String,
    pub carbon_g_per_kwh: f64,
}

fn default_currency() -> String {
    "EUR".to_owned()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TariffError {
    #[error("price per kWh {0} must be finite and non-negative")]
    Price(f64),
    #[error("carbon intensity {0} g/kWh must be finite and non-negative")]
    Carbon(f64),
}

impl TariffSettings {
    pub fn new(
        price_per_kwh: f64,
        currency_label: impl Into<String>,
        carbon_g_per_kwh: f64,
    ) -> Result<Self, TariffError> {
        let t = TariffSettings {
            price_per_kwh,
            currency_label: currency_label.into(),
            carbon_g_per_kwh,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TariffError> {
        if !(self.price_per_kwh.is_finite() && self.price_per_kwh >= 0.0) {
            return Err(TariffError::Price(self.price_per_kwh));
        }
        if !(self.carbon_g_per_kwh.is_finite() && self.carbon_g_per_kwh >= 0.0) {
            return Err(TariffError::Carbon(self.carbon_g_per_kwh));
        }
        Ok(())
    }

    pub fn cost(&self, energy_kwh: f64) -> f64 {
        energy_kwh * self.price_per_kwh
    }

    pub fn carbon_g(&self, energy_kwh: f64) -> f64 {
        energy_kwh * self.carbon_g_per_kwh
    }
}

impl Default for TariffSettings {
    fn default() -> Self {
        TariffSettings {
            price_per_kwh: 0.0,
            currency_label: default_currency(),
            carbon_g_per_kwh: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergySource {
    /// Difference of the device's cumulative counter.
    Counter,
    /// Trapezoidal integration of the sampled power.
    Integrated,
    /// Aggregate over parts using different sources.
    Mixed,
}

/// Statistics for one session, one experiment, or an aggregate of several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub experiment_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_ts: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_ts: Option<i64>,
    pub session_count: usize,
    pub duration_s: f64,
    pub sample_count: usize,
    pub mean_power_w: f64,
    pub std_power_w: f64,
    pub min_power_w: f64,
    pub max_power_w: f64,
    pub energy_kwh_integrated: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_kwh_counter: Option<f64>,
    #[serde(default)]
    pub counter_resets: usize,
    /// Headline energy: the counter figure when available, else integrated.
    pub energy_kwh: f64,
    pub energy_source: EnergySource,
    pub cost: f64,
    pub currency: String,
    pub carbon_g: f64,
    pub gap_count: usize,
    pub gap_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net_energy_kwh: Option<f64>,
}

/// Idle draw of a machine, reported as `mean ± half_spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub plug_id: PlugId,
    pub mean_w: f64,
    pub half_spread_w: f64,
    pub sample_count: usize,
    pub window_s: f64,
}

impl fmt::Display for BaselineStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2} W", self.mean_w, self.half_spread_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plug(s: &str) -> PlugId {
        PlugId::new(s).unwrap()
    }

    #[test]
    fn tokens_reject_uppercase_and_length() {
        assert!(PlugId::new("desk-1").is_ok());
        assert!(PlugId::new("Desk").is_err());
        assert!(PlugId::new("").is_err());
        assert!(PlugId::new("a".repeat(64)).is_ok());
        assert!(PlugId::new("a".repeat(65)).is_err());
        assert!(ExperimentId::new("bpr_train").is_err());
    }

    #[test]
    fn driver_kind_round_trip() {
        for s in ["shelly-gen2", "simulated", "extension:tapo-p115"] {
            let k: DriverKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert!("tapo".parse::<DriverKind>().is_err());
        assert!("extension:".parse::<DriverKind>().is_err());
    }

    #[test]
    fn address_forms() {
        let a: Address = "192.168.1.40".parse().unwrap();
        assert_eq!(a.base_url(), "http://192.168.1.40");
        let a: Address = "127.0.0.1:9000/plug/sim1".parse().unwrap();
        assert_eq!(a.port, Some(9000));
        assert_eq!(a.path, "/plug/sim1");
        assert_eq!(a.to_string(), "127.0.0.1:9000/plug/sim1");
        let a: Address = "[::1]:80".parse().unwrap();
        assert_eq!(a.base_url(), "http://[::1]:80");
        assert!("".parse::<Address>().is_err());
        assert!("host:notaport".parse::<Address>().is_err());
    }

    #[test]
    fn sample_line_format() {
        let s = PowerSample::new(1_700_000_000_000, 1, plug("desk"), 69.15);
        assert_eq!(
            s.to_line(),
            r#"{"ts":1700000000000,"seq":1,"plug":"desk","w":69.15}"#
        );
        let s = s.with_counter(1234.5);
        assert_eq!(
            s.to_line(),
            r#"{"ts":1700000000000,"seq":1,"plug":"desk","w":69.15,"wh":1234.5}"#
        );
        let mut s = s;
        s.flags.gap_after = true;
        assert_eq!(
            s.to_line(),
            r#"{"ts":1700000000000,"seq":1,"plug":"desk","w":69.15,"wh":1234.5,"flags":["gap-after"]}"#
        );
        let back: PowerSample = serde_json::from_str(&s.to_line()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn sample_validation() {
        let mut s = PowerSample::new(0, 1, plug("p"), -1.0);
        assert!(s.validate().is_err());
        s.power_w = f64::NAN;
        assert!(s.validate().is_err());
        s.power_w = 0.0;
        assert!(s.validate().is_ok());
        s.energy_counter_wh = Some(f64::INFINITY);
        assert!(s.validate().is_err());
    }

    #[test]
    fn session_bounds() {
        let mut s = ExperimentSession {
            experiment_id: ExperimentId::new("e").unwrap(),
            session_id: SessionId::new("s").unwrap(),
            plug_id: plug("p"),
            start_ts: 10,
            end_ts: None,
            interval_ms: 1000,
            notes: String::new(),
            error_count: 0,
        };
        assert!(s.contains(1_000_000));
        assert!(!s.contains(9));
        s.end_ts = Some(20);
        assert!(s.contains(20));
        assert!(!s.contains(21));
    }

    #[test]
    fn tariff_rejects_negative() {
        assert!(TariffSettings::new(-0.1, "EUR", 1.0).is_err());
        assert!(TariffSettings::new(0.1, "EUR", f64::NAN).is_err());
        let t = TariffSettings::new(0.30, "EUR", 400.0).unwrap();
        assert_eq!(t.cost(1.0), 0.30);
        assert_eq!(t.carbon_g(1.0), 400.0);
    }

    #[test]
    fn baseline_display_matches_table_style() {
        let b = BaselineStats {
            plug_id: plug("ws"),
            mean_w: 69.15,
            half_spread_w: 2.45,
            sample_count: 600,
            window_s: 600.0,
        };
        assert_eq!(b.to_string(), "69.15 ± 2.45 W");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sample_round_trip(
                ts in 0i64..4_000_000_000_000,
                seq in 1u64..u64::MAX / 2,
                w in 0.0f64..1e6,
                wh in proptest::option::of(0.0f64..1e9),
                gap in any::<bool>(),
                est in any::<bool>(),
            ) {
                let mut s = PowerSample::new(ts, seq, PlugId::new("p-1").unwrap(), w);
                s.energy_counter_wh = wh;
                s.flags = SampleFlags { gap_after: gap, estimated: est };
                let back: PowerSample = serde_json::from_str(&s.to_line()).unwrap();
                prop_assert_eq!(back, s);
            }

            #[test]
            fn session_round_trip(start in 0i64..1i64<<42, len in proptest::option::of(0i64..1i64<<30), errors in 0u64..1000) {
                let s = ExperimentSession {
                    experiment_id: ExperimentId::new("exp-1").unwrap(),
                    session_id: SessionId::new("s-1").unwrap(),
                    plug_id: PlugId::new("desk").unwrap(),
                    start_ts: start,
                    end_ts: len.map(|l| start + l),
                    interval_ms: 1000,
                    notes: "x".into(),
                    error_count: errors,
                };
                let back: ExperimentSession = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
                prop_assert_eq!(back, s);
            }

            #[test]
            fn baseline_round_trip(mean in 0.0f64..1e4, spread in 0.0f64..1e3, n in 2usize..100_000) {
                let b = BaselineStats { plug_id: PlugId::new("p").unwrap(), mean_w: mean, half_spread_w: spread, sample_count: n, window_s: n as f64 };
                let back: BaselineStats = serde_json::from_str(&serde_json::to_string(&b).unwrap()).unwrap();
                prop_assert_eq!(back, b);
            }
        }
    }
}
