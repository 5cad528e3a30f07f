//! Byte-transparent TCP relays from a leased port to an internal endpoint.
//!
//! TCPROS frames carry no addressing, so forwarding bytes unmodified is all a
//! topic or service connection needs. Each relay owns its accept loop and
//! every connection task; closing the relay drops the listener and aborts
//! those tasks, so the port refuses connections immediately afterwards.

use std::io;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::{JoinHandle, JoinSet};

use crate::endpoint::Endpoint;
use crate::ports::PortLease;

const BUFFER_SIZE: usize = 64 * 1024;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum RelayError {
    #[error("cannot bind port {port}: {source}")]
    BindFailed { port: u16, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelayState {
    Listening,
    Closed,
}

#[derive(Debug, Default)]
pub struct RelayStats {
    accepted_total: AtomicU64,
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
    live_connections: AtomicUsize,
}

impl RelayStats {
    pub fn accepted_total(&self) -> u64 {
        self.accepted_total.load(Ordering::Relaxed)
    }

    /// Bytes copied from accepted clients towards the target.
    pub fn bytes_in(&self) -> u64 {
        self.bytes_in.load(Ordering::Relaxed)
    }

    /// Bytes copied from the target back to clients.
    pub fn bytes_out(&self) -> u64 {
        self.bytes_out.load(Ordering::Relaxed)
    }

    pub fn live_connections(&self) -> usize {
        self.live_connections.load(Ordering::Relaxed)
    }
}

struct LiveGuard(Arc<RelayStats>);

impl LiveGuard {
    fn new(stats: Arc<RelayStats>) -> Self {
        stats.live_connections.fetch_add(1, Ordering::Relaxed);
        Self(stats)
    }
}

impl Drop for LiveGuard {
    fn drop(&mut self) {
        self.0.live_connections.fetch_sub(1, Ordering::Relaxed);
    }
}

pub struct RelayHandle {
    lease: PortLease,
    local_addr: SocketAddr,
    stats: Arc<RelayStats>,
    task: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for RelayHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RelayHandle")
            .field("lease", &self.lease)
            .field("local_addr", &self.local_addr)
            .field("state", &self.state())
            .finish()
    }
}

/// Starts relaying `bind_ip:lease.port` to `lease.target`.
pub async fn open_relay(lease: PortLease, bind_ip: IpAddr) -> Result<RelayHandle, RelayError> {
    let listener = TcpListener::bind((bind_ip, lease.port))
        .await
        .map_err(|source| RelayError::BindFailed {
            port: lease.port,
            source,
        })?;
    let local_addr = listener
        .local_addr()
        .map_err(|source| RelayError::BindFailed {
            port: lease.port,
            source,
        })?;
    let stats = Arc::new(RelayStats::default());
    let task = tokio::spawn(accept_loop(listener, lease.target.clone(), stats.clone()));
    tracing::debug!(port = lease.port, target = %lease.target, owner = %lease.owner, "relay open");
    Ok(RelayHandle {
        lease,
        local_addr,
        stats,
        task: Mutex::new(Some(task)),
    })
}

impl RelayHandle {
    pub fn lease(&self) -> &PortLease {
        &self.lease
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> &RelayStats {
        &self.stats
    }

    pub fn state(&self) -> RelayState {
        if self.task.lock().expect("relay lock poisoned").is_some() {
            RelayState::Listening
        } else {
            RelayState::Closed
        }
    }

    /// Closes the listener and severs in-flight connections. Idempotent.
    pub async fn close(&self) {
        let task = self.task.lock().expect("relay lock poisoned").take();
        if let Some(task) = task {
            task.abort();
            let _ = task.await;
            tracing::debug!(port = self.lease.port, "relay closed");
        }
    }
}

impl Drop for RelayHandle {
    fn drop(&mut self) {
        if let Some(task) = self.task.get_mut().ok().and_then(Option::take) {
            task.abort();
        }
    }
}

async fn accept_loop(listener: TcpListener, target: Endpoint, stats: Arc<RelayStats>) {
    let mut connections = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((client, peer)) => {
                    stats.accepted_total.fetch_add(1, Ordering::Relaxed);
                    let guard = LiveGuard::new(stats.clone());
                    let target = target.clone();
                    connections.spawn(async move {
                        if let Err(e) = relay_connection(client, &target, &guard.0).await {
                            tracing::debug!(%peer, %target, error = %e, "relayed connection failed");
                        }
                        drop(guard);
                    });
                }
                Err(e) => tracing::warn!(error = %e, "relay accept failed"),
            },
            Some(_) = connections.join_next() => {}
        }
    }
}

async fn relay_connection(
    client: TcpStream,
    target: &Endpoint,
    stats: &RelayStats,
) -> io::Result<()> {
    let upstream = tokio::time::timeout(
        CONNECT_TIMEOUT,
        TcpStream::connect((target.host.as_str(), target.port)),
    )
    .await
    .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "connect to relay target timed out"))??;
    let _ = client.set_nodelay(true);
    let _ = upstream.set_nodelay(true);

    let (client_read, client_write) = client.into_split();
    let (upstream_read, upstream_write) = upstream.into_split();
    tokio::try_join!(
        pump(client_read, upstream_write, &stats.bytes_in),
        pump(upstream_read, client_write, &stats.bytes_out),
    )?;
    Ok(())
}

/// Copies until EOF, then shuts down the write side so the peer sees the
/// half-close while the opposite direction keeps flowing.
async fn pump<R, W>(mut from: R, mut to: W, counter: &AtomicU64) -> io::Result<()>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut buf = vec![0u8; BUFFER_SIZE];
    loop {
        let n = from.read(&mut buf).await?;
        if n == 0 {
            // The peer may already be gone; EOF has been delivered either way.
            let _ = to.shutdown().await;
            return Ok(());
        }
        to.write_all(&buf[..n]).await?;
        counter.fetch_add(n as u64, Ordering::Relaxed);
    }
}
