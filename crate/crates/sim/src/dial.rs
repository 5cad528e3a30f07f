//! Record of every outbound connection made by harness actors.

use std::fmt;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DialPurpose {
    XmlRpc,
    TcpRos,
}

impl fmt::Display for DialPurpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DialPurpose::XmlRpc => "xmlrpc",
            DialPurpose::TcpRos => "tcpros",
        })
    }
}

/// Which side of the segment boundary an actor lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dial {
    pub actor: String,
    pub side: Side,
    pub host: String,
    pub port: u16,
    pub purpose: DialPurpose,
}

impl fmt::Display for Dial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} -> {}:{} ({})",
            self.actor, self.host, self.port, self.purpose
        )
    }
}

/// Append-only, shared between all actors of a scenario.
#[derive(Debug, Clone, Default)]
pub struct DialLog {
    entries: Arc<Mutex<Vec<Dial>>>,
    internal: Arc<Mutex<Vec<SocketAddr>>>,
}

impl DialLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, actor: &str, side: Side, host: &str, port: u16, purpose: DialPurpose) {
        self.entries.lock().expect("dial log poisoned").push(Dial {
            actor: actor.to_owned(),
            side,
            host: host.to_owned(),
            port,
            purpose,
        });
    }

    /// Registers a listening address that belongs to the internal segment.
    pub fn mark_internal(&self, addr: SocketAddr) {
        self.internal.lock().expect("dial log poisoned").push(addr);
    }

    pub fn entries(&self) -> Vec<Dial> {
        self.entries.lock().expect("dial log poisoned").clone()
    }

    pub fn internal_addrs(&self) -> Vec<SocketAddr> {
        self.internal.lock().expect("dial log poisoned").clone()
    }

    pub fn is_internal_target(&self, host: &str, port: u16) -> bool {
        self.internal
            .lock()
            .expect("dial log poisoned")
            .iter()
            .any(|a| a.port() == port && a.ip().to_string() == host)
    }

    /// Dials by external actors that reach an internal listener directly.
    pub fn external_to_internal(&self) -> Vec<Dial> {
        self.entries()
            .into_iter()
            .filter(|d| d.side == Side::External && self.is_internal_target(&d.host, d.port))
            .collect()
    }
}
