//! Proxy configuration from command-line flags and `ROSPROXY_*` environment
//! variables. Flags override the environment, which overrides defaults.

use std::collections::HashMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr};
use std::time::Duration;

use clap::{Args, Parser};
use thiserror::Error;

use crate::ports::{PortRange, MIN_PORT};
use crate::registry::PingPolicy;
use crate::transport::split_http_uri;
use crate::xmlrpc::CodecLimits;

pub const DEFAULT_MAIN_PORT: u16 = 11311;
pub const DEFAULT_PORT_RANGE: &str = "30000-30099";
pub const DEFAULT_PING_INTERVAL: Duration = Duration::from_secs(10);
pub const DEFAULT_PING_FAILURES: u32 = 3;
pub const DEFAULT_PURGE_GRACE: Duration = Duration::from_secs(30);
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(5);

const ENV_PREFIX: &str = "ROSPROXY_";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {key} ({env} / --{key}): {message}")]
pub struct ConfigError {
    pub key: String,
    pub env: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_owned(),
            env: env_name(key),
            message: message.into(),
        }
    }
}

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('-', "_"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyConfig {
    /// URI of the real ROS master all calls are forwarded to.
    pub upstream_master_uri: String,
    /// Host name or address written into every rewritten endpoint.
    pub advertised_host: String,
    /// Local address all listeners bind to.
    pub bind_address: IpAddr,
    /// Port the master gateway listens on.
    pub main_port: u16,
    pub port_range: PortRange,
    /// Added to a leased port to obtain the port advertised to the outside,
    /// for deployments where the forwarded host range differs from the
    /// internal one.
    pub host_port_offset: i32,
    pub ping: PingPolicy,
    pub purge_grace: Duration,
    pub request_timeout: Duration,
    pub log_level: tracing::Level,
    pub limits: CodecLimits,
}

impl ProxyConfig {
    /// A configuration with defaults for everything but the required keys.
    pub fn new(
        upstream_master_uri: impl Into<String>,
        advertised_host: impl Into<String>,
        port_range: PortRange,
    ) -> Self {
        Self {
            upstream_master_uri: upstream_master_uri.into(),
            advertised_host: advertised_host.into(),
            bind_address: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            main_port: DEFAULT_MAIN_PORT,
            port_range,
            host_port_offset: 0,
            ping: PingPolicy::default(),
            purge_grace: DEFAULT_PURGE_GRACE,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
            log_level: tracing::Level::INFO,
            limits: CodecLimits::default(),
        }
    }

    /// The externally reachable port for a leased port.
    pub fn advertised_port(&self, port: u16) -> u16 {
        u16::try_from(i32::from(port) + self.host_port_offset)
            .expect("offset validated to keep ports in range")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        split_http_uri(&self.upstream_master_uri)
            .map_err(|e| ConfigError::new("master-uri", e.to_string()))?;
        let host = &self.advertised_host;
        if host.is_empty() || host.contains(|c: char| c.is_whitespace() || c == '/') {
            return Err(ConfigError::new(
                "advertised-host",
                format!("{host:?} is not a host name or address"),
            ));
        }
        if self.main_port == 0 {
            return Err(ConfigError::new("port", "main port must be non-zero"));
        }
        if self.port_range.contains(self.main_port) {
            return Err(ConfigError::new(
                "port",
                format!(
                    "main port {} lies inside port range {}",
                    self.main_port, self.port_range
                ),
            ));
        }
        if self.port_range.len() < 2 {
            return Err(ConfigError::new(
                "port-range",
                format!(
                    "range {} is too small; at least one gateway and one relay port are needed",
                    self.port_range
                ),
            ));
        }
        let low = i32::from(self.port_range.low()) + self.host_port_offset;
        let high = i32::from(self.port_range.high()) + self.host_port_offset;
        if low < i32::from(MIN_PORT) || high > i32::from(u16::MAX) {
            return Err(ConfigError::new(
                "host-port-offset",
                format!(
                    "offset {} maps range {} to {low}-{high}, outside {MIN_PORT}-65535",
                    self.host_port_offset, self.port_range
                ),
            ));
        }
        if self.ping.interval.is_zero() {
            return Err(ConfigError::new(
                "ping-interval",
                "must be greater than zero",
            ));
        }
        if self.ping.failure_threshold == 0 {
            return Err(ConfigError::new("ping-failures", "must be at least 1"));
        }
        Ok(())
    }

    /// The effective configuration as `key=value` lines.
    pub fn echo_lines(&self) -> Vec<String> {
        vec![
            format!("master_uri={}", self.upstream_master_uri),
            format!("advertised_host={}", self.advertised_host),
            format!("bind_address={}", self.bind_address),
            format!("port={}", self.main_port),
            format!("port_range={}", self.port_range),
            format!("host_port_offset={}", self.host_port_offset),
            format!(
                "ping_interval={}",
                humantime::format_duration(self.ping.interval)
            ),
            format!("ping_failures={}", self.ping.failure_threshold),
            format!(
                "purge_grace={}",
                humantime::format_duration(self.purge_grace)
            ),
            format!(
                "request_timeout={}",
                humantime::format_duration(self.request_timeout)
            ),
            format!("log_level={}", self.log_level),
        ]
    }
}

impl fmt::Display for ProxyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.echo_lines().join("\n"))
    }
}

/// Command-line flags of the proxy. Every flag has a `ROSPROXY_*`
/// environment counterpart.
#[derive(Debug, Clone, Default, Args)]
pub struct ProxyArgs {
    /// URI of the upstream ROS master [env: ROSPROXY_MASTER_URI]
    #[arg(long)]
    pub master_uri: Option<String>,
    /// Host name or address advertised in rewritten endpoints [env: ROSPROXY_ADVERTISED_HOST]
    #[arg(long)]
    pub advertised_host: Option<String>,
    /// Local address to bind listeners on [env: ROSPROXY_BIND_ADDRESS, default: 0.0.0.0]
    #[arg(long)]
    pub bind_address: Option<String>,
    /// Master gateway port [env: ROSPROXY_PORT, default: 11311]
    #[arg(long)]
    pub port: Option<String>,
    /// Range of ports for gateways and relays, LOW-HIGH [env: ROSPROXY_PORT_RANGE, default: 30000-30099]
    #[arg(long)]
    pub port_range: Option<String>,
    /// Offset between leased and advertised ports [env: ROSPROXY_HOST_PORT_OFFSET, default: 0]
    #[arg(long, allow_hyphen_values = true)]
    pub host_port_offset: Option<String>,
    /// Interval between node pings, e.g. 10s [env: ROSPROXY_PING_INTERVAL]
    #[arg(long)]
    pub ping_interval: Option<String>,
    /// Consecutive failed pings before a node is purged [env: ROSPROXY_PING_FAILURES]
    #[arg(long)]
    pub ping_failures: Option<String>,
    /// Delay before purging a node without registrations [env: ROSPROXY_PURGE_GRACE]
    #[arg(long)]
    pub purge_grace: Option<String>,
    /// Timeout for forwarded XML-RPC calls [env: ROSPROXY_REQUEST_TIMEOUT]
    #[arg(long)]
    pub request_timeout: Option<String>,
    /// Log level: error, warn, info, debug or trace [env: ROSPROXY_LOG_LEVEL]
    #[arg(long)]
    pub log_level: Option<String>,
}

#[derive(Debug, Parser)]
#[command(name = "rosproxy")]
struct ArgvOnly {
    #[command(flatten)]
    args: ProxyArgs,
}

/// Builds a configuration from an environment map and argument list
/// (without the program name).
pub fn load_config(
    env: &HashMap<String, String>,
    argv: &[String],
) -> Result<ProxyConfig, ConfigError> {
    let parsed = ArgvOnly::try_parse_from(
        std::iter::once("rosproxy".to_owned()).chain(argv.iter().cloned()),
    )
    .map_err(|e| ConfigError {
        key: "arguments".into(),
        env: String::new(),
        message: e.to_string(),
    })?;
    from_sources(env, &parsed.args)
}

pub fn from_sources(
    env: &HashMap<String, String>,
    args: &ProxyArgs,
) -> Result<ProxyConfig, ConfigError> {
    let lookup = |key: &str, flag: &Option<String>| -> Option<String> {
        flag.clone()
            .or_else(|| env.get(&env_name(key)).cloned())
            .map(|v| v.trim().to_owned())
    };

    let master_uri = lookup("master-uri", &args.master_uri)
        .ok_or_else(|| ConfigError::new("master-uri", "required but not set"))?;
    let advertised_host = lookup("advertised-host", &args.advertised_host)
        .ok_or_else(|| ConfigError::new("advertised-host", "required but not set"))?;
    let range =
        lookup("port-range", &args.port_range).unwrap_or_else(|| DEFAULT_PORT_RANGE.to_owned());
    let range: PortRange = range
        .parse()
        .map_err(|e: crate::ports::RangeError| ConfigError::new("port-range", e.to_string()))?;

    let mut config = ProxyConfig::new(master_uri, advertised_host, range);

    if let Some(v) = lookup("bind-address", &args.bind_address) {
        config.bind_address = v
            .parse()
            .map_err(|_| ConfigError::new("bind-address", format!("{v:?} is not an IP address")))?;
    }
    if let Some(v) = lookup("port", &args.port) {
        config.main_port = parse_number("port", &v)?;
    }
    if let Some(v) = lookup("host-port-offset", &args.host_port_offset) {
        config.host_port_offset = parse_number("host-port-offset", &v)?;
    }
    if let Some(v) = lookup("ping-interval", &args.ping_interval) {
        config.ping.interval = parse_duration("ping-interval", &v)?;
    }
    if let Some(v) = lookup("ping-failures", &args.ping_failures) {
        config.ping.failure_threshold = parse_number("ping-failures", &v)?;
    }
    if let Some(v) = lookup("purge-grace", &args.purge_grace) {
        config.purge_grace = parse_duration("purge-grace", &v)?;
    }
    if let Some(v) = lookup("request-timeout", &args.request_timeout) {
        config.request_timeout = parse_duration("request-timeout", &v)?;
    }
    if let Some(v) = lookup("log-level", &args.log_level) {
        config.log_level = v
            .parse()
            .map_err(|_| ConfigError::new("log-level", format!("unknown level {v:?}")))?;
    }

    config.validate()?;
    Ok(config)
}

fn parse_number<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| ConfigError::new(key, format!("{v:?} is not a valid number")))
}

/// Accepts humantime syntax (`10s`, `500ms`, `1m 30s`) or bare seconds.
fn parse_duration(key: &str, v: &str) -> Result<Duration, ConfigError> {
    if let Ok(secs) = v.parse::<f64>() {
        return Duration::try_from_secs_f64(secs)
            .map_err(|_| ConfigError::new(key, format!("{v:?} is not a valid duration")));
    }
    humantime::parse_duration(v).map_err(|e| ConfigError::new(key, format!("{v:?}: {e}")))
}
