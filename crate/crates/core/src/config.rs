//! Configuration file (`emers.toml`) parsing and validation.
//!
//! Validation never stops at the first problem: every violation in the
//! document is collected so an operator can fix them in one pass.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::model::{
    Address, DriverKind, PlugConfig, PlugId, TariffSettings, DEFAULT_POLL_INTERVAL_MS,
    DEFAULT_POLL_TIMEOUT_MS, MAX_POLL_INTERVAL_MS, MIN_POLL_INTERVAL_MS,
};

pub const DEFAULT_PORT: u16 = 8808;

/// Which interfaces the monitoring server listens on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BindScope {
    /// Loopback only.
    #[default]
    Host,
    /// All interfaces; warns at startup when a public address is present.
    Lan,
    /// All interfaces.
    All,
}

impl fmt::Display for BindScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BindScope::Host => "host",
            BindScope::Lan => "lan",
            BindScope::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSettings {
    #[serde(default)]
    pub bind: BindScope,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reports_dir: Option<PathBuf>,
}

fn default_port() -> u16 {
    DEFAULT_PORT
}

impl Default for ServerSettings {
    fn default() -> Self {
        ServerSettings {
            bind: BindScope::Host,
            port: DEFAULT_PORT,
            static_dir: None,
            reports_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logs: Option<PathBuf>,
    #[serde(default)]
    pub server: ServerSettings,
    #[serde(default)]
    pub tariff: TariffSettings,
    #[serde(default)]
    pub plugs: Vec<PlugConfig>,
}

impl Config {
    pub fn plug(&self, id: &str) -> Option<&PlugConfig> {
        self.plugs.iter().find(|p| p.id.as_str() == id)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Loads and validates a config file. A missing file yields the default
    /// configuration.
    pub fn load(path: &Path) -> Result<Validated, ConfigErrors> {
        match std::fs::read(path) {
            Ok(bytes) => validate_config(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Validated {
                config: Config::default(),
                warnings: Vec::new(),
            }),
            Err(e) => Err(ConfigErrors(vec![ConfigIssue::Io(e.to_string())])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigIssue {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("config is not valid UTF-8")]
    NotUtf8,
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("{path}: missing required field")]
    Missing { path: String },
    #[error("{path}: expected {expected}")]
    WrongType { path: String, expected: &'static str },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("duplicate plug_id: {0}")]
    DuplicatePlug(String),
    #[error("{path}: interval {value} ms is outside [{MIN_POLL_INTERVAL_MS} ms, {MAX_POLL_INTERVAL_MS} ms]")]
    IntervalOutOfRange { path: String, value: i64 },
    #[error("{path}: unknown key")]
    UnknownKey { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&msgs.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub config: Config,
    pub warnings: Vec<String>,
}

/// Parses and validates a raw configuration document.
pub fn validate_config(raw: &[u8]) -> Result<Validated, ConfigErrors> {
    let text = std::str::from_utf8(raw).map_err(|_| ConfigErrors(vec![ConfigIssue::NotUtf8]))?;
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigErrors(vec![ConfigIssue::Syntax(e.message().to_owned())]))?;

    let mut v = Validator::default();
    let mut config = Config::default();

    for key in table.keys() {
        if !matches!(key.as_str(), "logs" | "server" | "tariff" | "plugs") {
            v.issues.push(ConfigIssue::UnknownKey { path: key.clone() });
        }
    }

    config.logs = v.opt_string(&table, "logs", "logs").map(PathBuf::from);

    if let Some(server) = v.opt_table(&table, "server", "server") {
        config.server = v.server(server);
    }
    if let Some(tariff) = v.opt_table(&table, "tariff", "tariff") {
        config.tariff = v.tariff(tariff);
    }

    match table.get("plugs") {
        None => {}
        Some(Value::Array(items)) => {
            let mut seen = BTreeSet::new();
            for (i, item) in items.iter().enumerate() {
                let path = format!("plugs[{i}]");
                let Value::Table(t) = item else {
                    v.issues.push(ConfigIssue::WrongType { path, expected: "table" });
                    continue;
                };
                if let Some(plug) = v.plug(t, &path) {
                    if !seen.insert(plug.id.clone()) {
                        v.issues.push(ConfigIssue::DuplicatePlug(plug.id.to_string()));
                    }
                    config.plugs.push(plug);
                }
            }
        }
        Some(_) => v.issues.push(ConfigIssue::WrongType {
            path: "plugs".into(),
            expected: "array of tables",
        }),
    }

    if v.issues.is_empty() {
        Ok(Validated {
            config,
            warnings: v.warnings,
        })
    } else {
        Err(ConfigErrors(v.issues))
    }
}

#[derive(Default)]
struct Validator {
    issues: Vec<ConfigIssue>,
    warnings: Vec<String>,
}

impl Validator {
    fn wrong(&mut self, path: String, expected: &'static str) {
        self.issues.push(ConfigIssue::WrongType { path, expected });
    }

    fn opt_table<'a>(&mut self, t: &'a Table, key: &str, path: &str) -> Option<&'a Table> {
        match t.get(key)? {
            Value::Table(inner) => Some(inner),
            _ => {
                self.wrong(path.to_owned(), "table");
                None
            }
        }
    }

    fn opt_string(&mut self, t: &Table, key: &str, path: &str) -> Option<String> {
        match t.get(key)? {
            Value::String(s) => Some(s.clone()),
            _ => {
                self.wrong(path.to_owned(), "string");
                None
            }
        }
    }

    fn opt_int(&mut self, t: &Table, key: &str, path: &str) -> Option<i64> {
        match t.get(key)? {
            Value::Integer(i) => Some(*i),
            _ => {
                self.wrong(path.to_owned(), "integer");
                None
            }
        }
    }

    fn opt_number(&mut self, t: &Table, key: &str, path: &str) -> Option<f64> {
        match t.get(key)? {
            Value::Integer(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => {
                self.wrong(path.to_owned(), "number");
                None
            }
        }
    }

    fn unknown_keys(&mut self, t: &Table, path: &str, known: &[&str]) {
        for key in t.keys() {
            if !known.contains(&key.as_str()) {
                self.issues.push(ConfigIssue::UnknownKey {
                    path: format!("{path}.{key}"),
                });
            }
        }
    }

    fn server(&mut self, t: &Table) -> ServerSettings {
        self.unknown_keys(t, "server", &["bind", "port", "static_dir", "reports_dir"]);
        let mut s = ServerSettings::default();
        if let Some(bind) = self.opt_string(t, "bind", "server.bind") {
            match bind.as_str() {
                "host" => s.bind = BindScope::Host,
                "lan" => s.bind = BindScope::Lan,
                "all" => s.bind = BindScope::All,
                _ => self.issues.push(ConfigIssue::Invalid {
                    path: "server.bind".into(),
                    message: format!("unknown bind scope {bind:?} (expected host, lan or all)"),
                }),
            }
        }
        if let Some(port) = self.opt_int(t, "port", "server.port") {
            match u16::try_from(port) {
                Ok(p) => s.port = p,
                Err(_) => self.issues.push(ConfigIssue::Invalid {
                    path: "server.port".into(),
                    message: format!("port {port} out of range"),
                }),
            }
        }
        s.static_dir = self
            .opt_string(t, "static_dir", "server.static_dir")
            .map(PathBuf::from);
        s.reports_dir = self
            .opt_string(t, "reports_dir", "server.reports_dir")
            .map(PathBuf::from);
        s
    }

    fn tariff(&mut self, t: &Table) -> TariffSettings {
        self.unknown_keys(
            t,
            "tariff",
            &["price_per_kwh", "currency_label", "carbon_g_per_kwh"],
        );
        let mut tariff = TariffSettings::default();
        if let Some(p) = self.opt_number(t, "price_per_kwh", "tariff.price_per_kwh") {
            if p.is_finite() && p >= 0.0 {
                tariff.price_per_kwh = p;
            } else {
                self.issues.push(ConfigIssue::Invalid {
                    path: "tariff.price_per_kwh".into(),
                    message: "must be finite and non-negative".into(),
                });
            }
        }
        if let Some(c) = self.opt_number(t, "carbon_g_per_kwh", "tariff.carbon_g_per_kwh") {
            if c.is_finite() && c >= 0.0 {
                tariff.carbon_g_per_kwh = c;
            } else {
                self.issues.push(ConfigIssue::Invalid {
                    path: "tariff.carbon_g_per_kwh".into(),
                    message: "must be finite and non-negative".into(),
                });
            }
        }
        if let Some(label) = self.opt_string(t, "currency_label", "tariff.currency_label") {
            tariff.currency_label = label;
        }
        tariff
    }

    fn plug(&mut self, t: &Table, path: &str) -> Option<PlugConfig> {
        self.unknown_keys(
            t,
            path,
            &["id", "driver", "address", "interval_ms", "timeout_ms", "label"],
        );
        let before = self.issues.len();

        let id = match self.opt_string(t, "id", &format!("{path}.id")) {
            Some(s) => match PlugId::new(s) {
                Ok(id) => Some(id),
                Err(e) => {
                    self.issues.push(ConfigIssue::Invalid {
                        path: format!("{path}.id"),
                        message: e.to_string(),
                    });
                    None
                }
            },
            None => {
                if !t.contains_key("id") {
                    self.issues.push(ConfigIssue::Missing {
                        path: format!("{path}.id"),
                    });
                }
                None
            }
        };

        let driver = match self.opt_string(t, "driver", &format!("{path}.driver")) {
            Some(s) => match s.parse::<DriverKind>() {
                Ok(kind) => {
                    if let DriverKind::Extension(name) = &kind {
                        self.warnings.push(format!(
                            "{path}.driver: extension driver {name:?} must be registered at runtime"
                        ));
                    }
                    Some(kind)
                }
                Err(e) => {
                    self.issues.push(ConfigIssue::Invalid {
                        path: format!("{path}.driver"),
                        message: e.to_string(),
                    });
                    None
                }
            },
            None => {
                if !t.contains_key("driver") {
                    self.issues.push(ConfigIssue::Missing {
                        path: format!("{path}.driver"),
                    });
                }
                None
            }
        };

        let address = match self.opt_string(t, "address", &format!("{path}.address")) {
            Some(s) => match s.parse::<Address>() {
                Ok(a) => Some(a),
                Err(e) => {
                    self.issues.push(ConfigIssue::Invalid {
                        path: format!("{path}.address"),
                        message: e.to_string(),
                    });
                    None
                }
            },
            None => {
                if !t.contains_key("address") {
                    self.issues.push(ConfigIssue::Missing {
                        path: format!("{path}.address"),
                    });
                }
                None
            }
        };

        let interval_path = format!("{path}.interval_ms");
        let interval = self
            .opt_int(t, "interval_ms", &interval_path)
            .unwrap_or(DEFAULT_POLL_INTERVAL_MS as i64);
        if !(MIN_POLL_INTERVAL_MS as i64..=MAX_POLL_INTERVAL_MS as i64).contains(&interval) {
            self.issues.push(ConfigIssue::IntervalOutOfRange {
                path: interval_path,
                value: interval,
            });
        }

        let timeout_path = format!("{path}.timeout_ms");
        let timeout = self
            .opt_int(t, "timeout_ms", &timeout_path)
            .unwrap_or(DEFAULT_POLL_TIMEOUT_MS as i64);
        if !(1..=MAX_POLL_INTERVAL_MS as i64).contains(&timeout) {
            self.issues.push(ConfigIssue::Invalid {
                path: timeout_path,
                message: format!("timeout {timeout} ms out of range"),
            });
        }

        let label = self
            .opt_string(t, "label", &format!("{path}.label"))
            .unwrap_or_default();

        if self.issues.len() != before {
            return None;
        }
        Some(PlugConfig {
            id: id?,
            driver: driver?,
            address: address?,
            interval_ms: interval as u64,
            timeout_ms: timeout as u64,
            label,
        })
    }
}

/// Checks an interval against the allowed polling range.
pub fn check_interval(interval_ms: u64) -> Result<(), ConfigIssue> {
    if (MIN_POLL_INTERVAL_MS..=MAX_POLL_INTERVAL_MS).contains(&interval_ms) {
        Ok(())
    } else {
        Err(ConfigIssue::IntervalOutOfRange {
            path: "interval".into(),
            value: interval_ms as i64,
        })
    }
}
