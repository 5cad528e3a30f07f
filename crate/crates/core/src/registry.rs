//! Per-node proxy state and its lifetime.
//!
//! Every proxied node owns a slave API gateway (one leased port with an
//! XML-RPC listener in front of the node's real slave API) and any number of
//! TCPROS relays. A node stays alive while it has registrations or while it
//! answers pings; once it has neither, its listeners are closed and its
//! ports returned. The closed gateway port is what lets `rosnode cleanup`
//! detect the node as dead and remove it from the master.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::sync::Mutex;
use tokio::task::{JoinHandle, JoinSet};
use tokio::time::MissedTickBehavior;

use crate::config::ProxyConfig;
use crate::endpoint::Endpoint;
use crate::ports::{LeasePurpose, PortAllocator, PortError, PortLease};
use crate::relay::{self, RelayError, RelayHandle};
use crate::slave;
use crate::transport::{self, RpcHandler, RpcRequest, RpcServer};
use crate::xmlrpc::{MethodCall, MethodResponse, RosResult};

/// Caller id the proxy uses for its own calls.
pub const PROXY_CALLER_ID: &str = "/rosproxy";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PingPolicy {
    pub interval: Duration,
    pub failure_threshold: u32,
}

impl Default for PingPolicy {
    fn default() -> Self {
        Self {
            interval: Duration::from_secs(10),
            failure_threshold: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegistrationKind {
    Publisher,
    Subscriber,
    Service,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    Exhausted(#[from] PortError),
    #[error("cannot bind port {port}: {source}")]
    BindFailed { port: u16, source: io::Error },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("invalid slave API URI {0:?}")]
    InvalidUri(String),
}

impl From<RelayError> for RegistryError {
    fn from(e: RelayError) -> Self {
        match e {
            RelayError::BindFailed { port, source } => RegistryError::BindFailed { port, source },
        }
    }
}

/// Snapshot of one proxied node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub caller_id: String,
    /// The node's own slave API URI on the internal network.
    pub real_slave_uri: String,
    pub gateway_lease: PortLease,
    /// Slave API URI advertised to the outside.
    pub advertised_uri: String,
    pub publications: BTreeSet<String>,
    pub subscriptions: BTreeSet<String>,
    pub services: BTreeSet<String>,
    /// Relay leases keyed by the internal endpoint they forward to.
    pub tcpros_relays: BTreeMap<Endpoint, PortLease>,
    pub ping_failures: u32,
    pub created_at: Instant,
    pub last_seen: Instant,
}

impl NodeRecord {
    pub fn refcount(&self) -> usize {
        self.publications.len() + self.subscriptions.len() + self.services.len()
    }

    fn names_mut(&mut self, kind: RegistrationKind) -> &mut BTreeSet<String> {
        match kind {
            RegistrationKind::Publisher => &mut self.publications,
            RegistrationKind::Subscriber => &mut self.subscriptions,
            RegistrationKind::Service => &mut self.services,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PingOutcome {
    Ok,
    Failed { failures: u32 },
    Purged,
}

impl fmt::Display for PingOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PingOutcome::Ok => f.write_str("ok"),
            PingOutcome::Failed { failures } => write!(f, "failed({failures})"),
            PingOutcome::Purged => f.write_str("purged"),
        }
    }
}

struct NodeEntry {
    record: NodeRecord,
    generation: u64,
    gateway: RpcServer,
    relays: BTreeMap<Endpoint, RelayHandle>,
    grace: Option<JoinHandle<()>>,
}

pub struct Registry {
    config: Arc<ProxyConfig>,
    allocator: Arc<PortAllocator>,
    nodes: Mutex<BTreeMap<String, NodeEntry>>,
    generation: AtomicU64,
    this: Weak<Registry>,
}

impl Registry {
    pub fn new(config: Arc<ProxyConfig>) -> Arc<Self> {
        let allocator = Arc::new(PortAllocator::new(config.port_range));
        Arc::new_cyclic(|this| Self {
            config,
            allocator,
            nodes: Mutex::new(BTreeMap::new()),
            generation: AtomicU64::new(0),
            this: this.clone(),
        })
    }

    pub fn config(&self) -> &Arc<ProxyConfig> {
        &self.config
    }

    pub fn allocator(&self) -> &Arc<PortAllocator> {
        &self.allocator
    }

    pub async fn node(&self, caller_id: &str) -> Option<NodeRecord> {
        self.nodes
            .lock()
            .await
            .get(caller_id)
            .map(|e| e.record.clone())
    }

    pub async fn nodes(&self) -> Vec<NodeRecord> {
        self.nodes
            .lock()
            .await
            .values()
            .map(|e| e.record.clone())
            .collect()
    }

    /// Leases that the current records account for: one gateway per node
    /// plus one per relay.
    pub async fn expected_lease_count(&self) -> usize {
        self.nodes
            .lock()
            .await
            .values()
            .map(|e| 1 + e.relays.len())
            .sum()
    }

    /// Returns the node's record, creating it (lease + gateway) if needed.
    ///
    /// A known node reporting a different slave URI has restarted: its old
    /// resources are purged and fresh ones allocated. Reporting the URI the
    /// proxy advertises for it counts as unchanged.
    pub async fn ensure_node(
        &self,
        caller_id: &str,
        real_slave_uri: &str,
    ) -> Result<NodeRecord, RegistryError> {
        let mut nodes = self.nodes.lock().await;
        let restarted = match nodes.get(caller_id) {
            Some(entry) => {
                let r = &entry.record;
                if r.real_slave_uri == real_slave_uri || r.advertised_uri == real_slave_uri {
                    return Ok(r.clone());
                }
                tracing::info!(caller_id, old = %r.real_slave_uri, new = real_slave_uri, "node restarted, recreating");
                true
            }
            None => false,
        };

        // A restarted node gets a fresh port while the old one is still held,
        // so peers holding the stale URI see it refuse.
        let entry = match self.create_entry(caller_id, real_slave_uri).await {
            Err(RegistryError::Exhausted(_)) if restarted => {
                self.purge_locked(&mut nodes, caller_id).await;
                self.create_entry(caller_id, real_slave_uri).await?
            }
            Err(e) => return Err(e),
            Ok(entry) => {
                if restarted {
                    self.purge_locked(&mut nodes, caller_id).await;
                }
                entry
            }
        };
        let record = entry.record.clone();
        nodes.insert(caller_id.to_owned(), entry);
        Ok(record)
    }

    async fn create_entry(
        &self,
        caller_id: &str,
        real_slave_uri: &str,
    ) -> Result<NodeEntry, RegistryError> {
        let target = Endpoint::from_uri(real_slave_uri, "http")
            .ok_or_else(|| RegistryError::InvalidUri(real_slave_uri.to_owned()))?;
        let lease = self
            .allocator
            .lease(LeasePurpose::SlaveApiGateway, target, caller_id)?;
        let generation = self.generation.fetch_add(1, Ordering::Relaxed);
        let handler: Arc<dyn RpcHandler> = Arc::new(GatewayHandler {
            registry: self.this.clone(),
            caller_id: caller_id.to_owned(),
        });
        let addr = SocketAddr::new(self.config.bind_address, lease.port);
        let gateway = match RpcServer::bind(addr, handler, self.config.limits).await {
            Ok(server) => server,
            Err(source) => {
                self.release(&lease);
                return Err(RegistryError::BindFailed {
                    port: lease.port,
                    source,
                });
            }
        };

        let now = Instant::now();
        let record = NodeRecord {
            caller_id: caller_id.to_owned(),
            real_slave_uri: real_slave_uri.to_owned(),
            advertised_uri: slave::advertised_uri(&self.config, &lease),
            gateway_lease: lease,
            publications: BTreeSet::new(),
            subscriptions: BTreeSet::new(),
            services: BTreeSet::new(),
            tcpros_relays: BTreeMap::new(),
            ping_failures: 0,
            created_at: now,
            last_seen: now,
        };
        tracing::info!(caller_id, real = real_slave_uri, advertised = %record.advertised_uri, "node added");
        Ok(NodeEntry {
            record,
            generation,
            gateway,
            relays: BTreeMap::new(),
            grace: None,
        })
    }

    /// Records a registration; returns the node's refcount afterwards.
    pub async fn add_registration(
        &self,
        caller_id: &str,
        kind: RegistrationKind,
        name: &str,
    ) -> Result<usize, RegistryError> {
        let mut nodes = self.nodes.lock().await;
        let entry = nodes
            .get_mut(caller_id)
            .ok_or_else(|| RegistryError::UnknownNode(caller_id.to_owned()))?;
        entry.record.names_mut(kind).insert(name.to_owned());
        if let Some(timer) = entry.grace.take() {
            timer.abort();
            tracing::debug!(caller_id, "purge grace cancelled");
        }
        Ok(entry.record.refcount())
    }

    /// Drops a registration; returns the remaining refcount. At zero the node
    /// is purged after the grace period unless it registers again.
    pub async fn remove_registration(
        &self,
        caller_id: &str,
        kind: RegistrationKind,
        name: &str,
    ) -> Result<usize, RegistryError> {
        let mut nodes = self.nodes.lock().await;
        let entry = nodes
            .get_mut(caller_id)
            .ok_or_else(|| RegistryError::UnknownNode(caller_id.to_owned()))?;
        entry.record.names_mut(kind).remove(name);
        let remaining = entry.record.refcount();
        if remaining == 0 && entry.grace.is_none() {
            let registry = self.this.clone();
            let id = caller_id.to_owned();
            let generation = entry.generation;
            let grace = self.config.purge_grace;
            tracing::debug!(caller_id, ?grace, "no registrations left, purge scheduled");
            entry.grace = Some(tokio::spawn(async move {
                tokio::time::sleep(grace).await;
                if let Some(registry) = registry.upgrade() {
                    registry.purge_if_idle(&id, generation).await;
                }
            }));
        }
        Ok(remaining)
    }

    async fn purge_if_idle(&self, caller_id: &str, generation: u64) {
        let mut nodes = self.nodes.lock().await;
        let Some(entry) = nodes.get_mut(caller_id) else {
            return;
        };
        if entry.generation != generation || entry.record.refcount() != 0 {
            return;
        }
        // This runs on the grace task itself; it must not be aborted.
        entry.grace = None;
        tracing::info!(caller_id, "purging node without registrations");
        self.purge_locked(&mut nodes, caller_id).await;
    }

    /// Closes the node's gateway and relays, releases its ports and drops
    /// the record. The upstream master is deliberately left untouched.
    pub async fn purge_node(&self, caller_id: &str) -> Result<(), RegistryError> {
        let mut nodes = self.nodes.lock().await;
        if !nodes.contains_key(caller_id) {
            return Err(RegistryError::UnknownNode(caller_id.to_owned()));
        }
        self.purge_locked(&mut nodes, caller_id).await;
        Ok(())
    }

    pub async fn purge_all(&self) {
        let mut nodes = self.nodes.lock().await;
        let ids: Vec<String> = nodes.keys().cloned().collect();
        for id in ids {
            self.purge_locked(&mut nodes, &id).await;
        }
    }

    async fn purge_locked(&self, nodes: &mut BTreeMap<String, NodeEntry>, caller_id: &str) {
        let Some(entry) = nodes.get_mut(caller_id) else {
            return;
        };
        if let Some(timer) = entry.grace.take() {
            timer.abort();
        }
        // Listeners go down before the record disappears.
        entry.gateway.close().await;
        for relay in entry.relays.values() {
            relay.close().await;
        }
        let entry = nodes.remove(caller_id).expect("entry checked above");
        for relay in entry.relays.values() {
            self.release(relay.lease());
        }
        self.release(&entry.record.gateway_lease);
        tracing::info!(caller_id, relays = entry.relays.len(), "node purged");
    }

    fn release(&self, lease: &PortLease) {
        if let Err(e) = self.allocator.release(lease) {
            tracing::warn!(error = %e, "lease release");
        }
    }

    /// Returns the relay forwarding to `target` for this node, opening one if
    /// none exists yet.
    pub async fn ensure_relay(
        &self,
        caller_id: &str,
        target: Endpoint,
    ) -> Result<PortLease, RegistryError> {
        let mut nodes = self.nodes.lock().await;
        let entry = nodes
            .get_mut(caller_id)
            .ok_or_else(|| RegistryError::UnknownNode(caller_id.to_owned()))?;
        if let Some(existing) = entry.relays.get(&target) {
            return Ok(existing.lease().clone());
        }
        let lease = self
            .allocator
            .lease(LeasePurpose::TcprosRelay, target.clone(), caller_id)?;
        let handle = match relay::open_relay(lease.clone(), self.config.bind_address).await {
            Ok(h) => h,
            Err(e) => {
                self.release(&lease);
                return Err(e.into());
            }
        };
        tracing::info!(caller_id, port = lease.port, %target, "relay added");
        entry.relays.insert(target.clone(), handle);
        entry.record.tcpros_relays.insert(target, lease.clone());
        Ok(lease)
    }

    /// Looks up an existing relay without creating one.
    pub async fn relay_for(&self, caller_id: &str, target: &Endpoint) -> Option<PortLease> {
        self.nodes
            .lock()
            .await
            .get(caller_id)
            .and_then(|e| e.record.tcpros_relays.get(target).cloned())
    }

    /// Pings every node's real slave API once with `getPid`. Faults and
    /// non-success results count as failures; reaching the threshold purges.
    pub async fn ping_cycle(&self) -> Vec<(String, PingOutcome)> {
        let targets: Vec<(String, String, u64)> = {
            let nodes = self.nodes.lock().await;
            nodes
                .values()
                .map(|e| {
                    (
                        e.record.caller_id.clone(),
                        e.record.real_slave_uri.clone(),
                        e.generation,
                    )
                })
                .collect()
        };

        let timeout = self.config.request_timeout;
        let mut pings = JoinSet::new();
        for (caller_id, uri, generation) in targets {
            pings.spawn(async move {
                let call = MethodCall::new("getPid", vec![PROXY_CALLER_ID.into()]);
                let healthy = match transport::call(&uri, &call, timeout).await {
                    Ok(MethodResponse::Success(v)) => {
                        RosResult::from_value(&v).is_some_and(|r| r.is_success())
                    }
                    Ok(MethodResponse::Fault { .. }) => false,
                    Err(e) => {
                        tracing::debug!(caller_id, error = %e, "ping failed");
                        false
                    }
                };
                (caller_id, generation, healthy)
            });
        }

        let mut report = Vec::new();
        while let Some(joined) = pings.join_next().await {
            let Ok((caller_id, generation, healthy)) = joined else {
                continue;
            };
            let mut nodes = self.nodes.lock().await;
            let Some(entry) = nodes.get_mut(&caller_id) else {
                continue;
            };
            if entry.generation != generation {
                continue;
            }
            let outcome = if healthy {
                entry.record.ping_failures = 0;
                entry.record.last_seen = Instant::now();
                PingOutcome::Ok
            } else {
                entry.record.ping_failures += 1;
                let failures = entry.record.ping_failures;
                if failures >= self.config.ping.failure_threshold {
                    tracing::warn!(caller_id, failures, "node unresponsive, purging");
                    self.purge_locked(&mut nodes, &caller_id).await;
                    PingOutcome::Purged
                } else {
                    PingOutcome::Failed { failures }
                }
            };
            report.push((caller_id, outcome));
        }
        report.sort_by(|a, b| a.0.cmp(&b.0));
        report
    }

    /// Runs `ping_cycle` every `ping.interval` until the handle is aborted.
    pub fn spawn_pinger(&self) -> JoinHandle<()> {
        let registry = self.this.clone();
        let period = self.config.ping.interval;
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(period);
            ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
            loop {
                ticker.tick().await;
                let Some(registry) = registry.upgrade() else {
                    return;
                };
                for (caller_id, outcome) in registry.ping_cycle().await {
                    if outcome != PingOutcome::Ok {
                        tracing::debug!(caller_id, %outcome, "ping");
                    }
                }
            }
        })
    }
}

struct GatewayHandler {
    registry: Weak<Registry>,
    caller_id: String,
}

impl RpcHandler for GatewayHandler {
    fn handle(&self, request: RpcRequest) -> transport::BoxFuture<MethodResponse> {
        let registry = self.registry.clone();
        let caller_id = self.caller_id.clone();
        Box::pin(async move {
            match registry.upgrade() {
                Some(registry) => {
                    slave::handle_slave_call(&registry, &caller_id, request.call).await
                }
                None => MethodResponse::fault(slave::FAULT_UNKNOWN_NODE, "proxy shutting down"),
            }
        })
    }
}
