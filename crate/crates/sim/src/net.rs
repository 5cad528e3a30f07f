//! Addresses and ports for in-process scenarios.
//!
//! On Linux the whole 127/8 block is loopback, so the internal segment, the
//! external network and the proxy's advertised address each get their own
//! IP. Elsewhere everything shares 127.0.0.1 and segmentation is checked by
//! socket address alone.

use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::sync::atomic::{AtomicU16, Ordering};
use std::time::Duration;

use rosproxy::transport;
use rosproxy::xmlrpc::{MethodCall, MethodResponse};
use tokio::net::TcpStream;

use crate::dial::{DialLog, DialPurpose, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segments {
    pub internal: IpAddr,
    pub external: IpAddr,
    pub proxy: IpAddr,
}

impl Segments {
    pub fn detect() -> Self {
        let candidate = Self {
            internal: IpAddr::V4(Ipv4Addr::new(127, 0, 0, 2)),
            external: IpAddr::V4(Ipv4Addr::new(127, 0, 0, 3)),
            proxy: IpAddr::V4(Ipv4Addr::LOCALHOST),
        };
        let usable = [candidate.internal, candidate.external]
            .iter()
            .all(|ip| TcpListener::bind((*ip, 0)).is_ok());
        if usable {
            candidate
        } else {
            let lo = IpAddr::V4(Ipv4Addr::LOCALHOST);
            Self {
                internal: lo,
                external: lo,
                proxy: lo,
            }
        }
    }

    pub fn ip(&self, side: Side) -> IpAddr {
        match side {
            Side::Internal => self.internal,
            Side::External => self.external,
        }
    }
}

const BLOCK_FLOOR: u16 = 21000;
const BLOCK_CEIL: u16 = 32000;

static NEXT_BLOCK: AtomicU16 = AtomicU16::new(0);

/// Finds `len` consecutive ports that are currently bindable on every
/// address used by scenarios. Successive calls in one process never return
/// overlapping blocks.
pub fn free_port_block(len: u16) -> Option<u16> {
    let span = BLOCK_CEIL - BLOCK_FLOOR;
    // Spread concurrent test processes over the window.
    let seed = (std::process::id() % u32::from(span / 2)) as u16;
    let _ = NEXT_BLOCK.compare_exchange(0, BLOCK_FLOOR + seed, Ordering::SeqCst, Ordering::SeqCst);
    for _ in 0..(span / len.max(1)) {
        let mut start = NEXT_BLOCK.fetch_add(len, Ordering::SeqCst);
        if start < BLOCK_FLOOR || start.checked_add(len).map_or(true, |end| end > BLOCK_CEIL) {
            NEXT_BLOCK.store(BLOCK_FLOOR + len, Ordering::SeqCst);
            start = BLOCK_FLOOR;
        }
        if (start..start + len).all(port_is_free) {
            return Some(start);
        }
    }
    None
}

pub fn port_is_free(port: u16) -> bool {
    TcpListener::bind((Ipv4Addr::UNSPECIFIED, port)).is_ok()
}

/// True once `addr` refuses TCP connections.
pub async fn refuses(addr: SocketAddr) -> bool {
    match tokio::time::timeout(Duration::from_millis(500), TcpStream::connect(addr)).await {
        Ok(Err(e)) => e.kind() == std::io::ErrorKind::ConnectionRefused,
        _ => false,
    }
}

/// The identity an actor dials out with.
#[derive(Debug, Clone)]
pub struct Actor {
    pub name: String,
    pub side: Side,
    pub dials: DialLog,
    pub timeout: Duration,
}

impl Actor {
    pub fn new(name: impl Into<String>, side: Side, dials: DialLog) -> Self {
        Self {
            name: name.into(),
            side,
            dials,
            timeout: Duration::from_secs(5),
        }
    }

    pub async fn rpc(
        &self,
        uri: &str,
        call: &MethodCall,
    ) -> Result<MethodResponse, transport::ClientError> {
        if let Ok((host, port, _)) = transport::split_http_uri(uri) {
            self.dials
                .record(&self.name, self.side, &host, port, DialPurpose::XmlRpc);
        }
        transport::call(uri, call, self.timeout).await
    }

    pub async fn connect_tcpros(&self, host: &str, port: u16) -> std::io::Result<TcpStream> {
        self.dials
            .record(&self.name, self.side, host, port, DialPurpose::TcpRos);
        let stream = tokio::time::timeout(self.timeout, TcpStream::connect((host, port)))
            .await
            .map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::TimedOut, "connect timed out")
            })??;
        stream.set_nodelay(true)?;
        Ok(stream)
    }
}
