use std::time::Duration;

use super::{DriverError, DriverErrorKind};

/// Minimal GET client shared by the HTTP-based drivers.
#[derive(Debug, Clone)]
pub(crate) struct HttpGet {
    client: reqwest::Client,
    base: String,
}

pub(crate) struct Response {
    pub status: u16,
    pub body: String,
}

impl HttpGet {
    pub fn new(base: String, timeout: Duration) -> Result<Self, DriverError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout)
            .pool_max_idle_per_host(1)
            .no_proxy()
            .build()
            .map_err(|e| DriverError::new(DriverErrorKind::Unsupported, e.to_string()))?;
        Ok(HttpGet { client, base })
    }

    pub async fn get(&self, path: &str) -> Result<Response, DriverError> {
        let url = format!("{}{}", self.base, path);
        let resp = self.client.get(&url).send().await.map_err(|e| map_err(&url, e))?;
        let status = resp.status().as_u16();
        let body = resp.text().await.map_err(|e| map_err(&url, e))?;
        Ok(Response { status, body })
    }
}

fn map_err(url: &str, e: reqwest::Error) -> DriverError {
    let kind = if e.is_connect() {
        DriverErrorKind::Unreachable
    } else if e.is_timeout() {
        DriverErrorKind::Timeout
    } else if e.is_decode() || e.is_body() {
        DriverErrorKind::MalformedResponse
    } else {
        DriverErrorKind::Unreachable
    };
    DriverError::new(kind, format!("GET {url}: {e}"))
}
