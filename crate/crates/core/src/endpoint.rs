use std::fmt;

use http::Uri;

/// A `host:port` pair as it appears inside ROS URIs and protocol parameters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Self {
            host: host.into(),
            port,
        }
    }

    /// Parses `<scheme>://<host>:<port>[/]`, requiring the given scheme and an
    /// explicit port.
    pub fn from_uri(uri: &str, scheme: &str) -> Option<Self> {
        let parsed: Uri = uri.parse().ok()?;
        if parsed.scheme_str() != Some(scheme) {
            return None;
        }
        let host = parsed.host()?.trim_start_matches('[').trim_end_matches(']');
        if host.is_empty() {
            return None;
        }
        Some(Self::new(host, parsed.port_u16()?))
    }

    pub fn http_uri(&self) -> String {
        format!("http://{self}/")
    }

    pub fn rosrpc_uri(&self) -> String {
        format!("rosrpc://{self}")
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.host.contains(':') {
            write!(f, "[{}]:{}", self.host, self.port)
        } else {
            write!(f, "{}:{}", self.host, self.port)
        }
    }
}
