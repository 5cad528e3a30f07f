//! Composition root: binds the master gateway, starts the ping timer and
//! tears everything down on shutdown.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;
use tokio::task::JoinHandle;

use crate::config::ProxyConfig;
use crate::master::{MainPortHandler, MasterGateway};
use crate::ports::PortLease;
use crate::registry::Registry;
use crate::transport::RpcServer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("cannot bind main port {port}: {source}")]
    BindFailed { port: u16, source: io::Error },
}

/// A running proxy.
pub struct Proxy {
    config: Arc<ProxyConfig>,
    registry: Arc<Registry>,
    gateway: Arc<MasterGateway>,
    main: RpcServer,
    pinger: JoinHandle<()>,
}

impl Proxy {
    pub async fn start(config: ProxyConfig) -> Result<Self, ProxyError> {
        let config = Arc::new(config);
        for line in config.echo_lines() {
            tracing::info!(target: "rosproxy::config", "{line}");
        }
        let registry = Registry::new(config.clone());
        let gateway = Arc::new(MasterGateway::new(registry.clone()));
        let addr = SocketAddr::new(config.bind_address, config.main_port);
        let main = RpcServer::bind(
            addr,
            Arc::new(MainPortHandler::new(gateway.clone())),
            config.limits,
        )
        .await
        .map_err(|source| ProxyError::BindFailed {
            port: config.main_port,
            source,
        })?;
        let pinger = registry.spawn_pinger();
        tracing::info!(addr = %main.local_addr(), upstream = %config.upstream_master_uri, "rosproxy listening");
        Ok(Self {
            config,
            registry,
            gateway,
            main,
            pinger,
        })
    }

    pub fn config(&self) -> &Arc<ProxyConfig> {
        &self.config
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn gateway(&self) -> &Arc<MasterGateway> {
        &self.gateway
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.main.local_addr()
    }

    pub fn live_leases(&self) -> Vec<PortLease> {
        self.registry.allocator().live_leases()
    }

    /// Stops accepting, purges every node and releases every lease.
    pub async fn shutdown(self) -> Vec<PortLease> {
        self.pinger.abort();
        let _ = self.pinger.await;
        self.main.close().await;
        self.registry.purge_all().await;
        let leftover = self.registry.allocator().live_leases();
        if leftover.is_empty() {
            tracing::info!("rosproxy stopped, all ports released");
        } else {
            tracing::error!(count = leftover.len(), "leases still held at shutdown");
        }
        leftover
    }
}

/// Runs the proxy until SIGINT/SIGTERM and returns the process exit code.
pub async fn run(config: ProxyConfig) -> i32 {
    let proxy = match Proxy::start(config).await {
        Ok(p) => p,
        Err(e) => {
            tracing::error!("{e}");
            eprintln!("rosproxy: {e}");
            return EXIT_RUNTIME;
        }
    };
    wait_for_signal().await;
    tracing::info!("shutdown requested");
    if proxy.shutdown().await.is_empty() {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

#[cfg(unix)]
async fn wait_for_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = match signal(SignalKind::terminate()) {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!(error = %e, "cannot install SIGTERM handler");
            let _ = tokio::signal::ctrl_c().await;
            return;
        }
    };
    tokio::select! {
        _ = term.recv() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
}

#[cfg(not(unix))]
async fn wait_for_signal() {
    let _ = tokio::signal::ctrl_c().await;
}
