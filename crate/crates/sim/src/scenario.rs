//! Scripted end-to-end runs, each available with nodes talking to the master
//! directly or through the proxy.

use std::fmt::{self, Write as _};
use std::net::SocketAddr;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rosproxy::config::ProxyConfig;
use rosproxy::ports::{PortLease, PortRange};
use rosproxy::registry::PingPolicy;
use rosproxy::{Endpoint, Proxy};
use sha2::{Digest, Sha256};

use crate::dial::{Dial, DialLog, Side};
use crate::master::{MiniMaster, MiniMasterState};
use crate::net::{self, Actor, Segments};
use crate::node::{self, MiniNode, NodeEnv};
use crate::probe;

pub const TOPIC: &str = "/chat";
pub const SERVICE: &str = "/echo";
const RECEIVE_DEADLINE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Direct,
    Proxied,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Direct => "direct",
            Mode::Proxied => "proxied",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Internal talker registers first, external listener follows.
    Fig1,
    /// External listener registers first and learns of the internal talker
    /// through `publisherUpdate`.
    Fig1ListenerFirst,
    /// External talker, internal listener registered first.
    Fig1Inbound,
    /// Internal echo service, external client.
    ServiceCall,
    /// Talker and listener as in `Fig1`, then the talker dies and a
    /// cleanup probe runs.
    StaleNode,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Fig1,
        Scenario::Fig1ListenerFirst,
        Scenario::Fig1Inbound,
        Scenario::ServiceCall,
        Scenario::StaleNode,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Fig1 => "fig1",
            Scenario::Fig1ListenerFirst => "fig1_listener_first",
            Scenario::Fig1Inbound => "fig1_inbound",
            Scenario::ServiceCall => "service_call",
            Scenario::StaleNode => "stale_node",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scenario::ALL.iter().map(Scenario::name).collect();
                format!(
                    "unknown scenario {s:?}; expected one of {}",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub ping: PingPolicy,
    pub purge_grace: Duration,
    /// Number of ports in the proxy range.
    pub range_len: u16,
    /// First port of a block of `range_len + 1` free ports (main port, then
    /// the range). Picked automatically when `None`.
    pub port_block: Option<u16>,
    pub payloads: Vec<Vec<u8>>,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            ping: PingPolicy {
                interval: Duration::from_secs(1),
                failure_threshold: 3,
            },
            purge_grace: Duration::from_millis(300),
            range_len: 16,
            port_block: None,
            payloads: default_payloads(),
        }
    }
}

pub fn default_payloads() -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = (0..5)
        .map(|i| format!("hello world {i}").into_bytes())
        .collect();
    out.push(Vec::new());
    out.push((0..=255u8).collect());
    out
}

/// Timings of the stale-node phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaleReport {
    /// Kill until the node's advertised slave API refuses connections.
    pub refused_after: Duration,
    /// Kill until none of the node's leases remain.
    pub released_after: Duration,
    pub cleanup_removed: Vec<String>,
    pub master_entry_removed: bool,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub mode: Mode,
    pub failures: Vec<String>,
    pub sent: Vec<Vec<u8>>,
    pub received: Vec<Vec<u8>>,
    /// Final master state.
    pub master_snapshot: MiniMasterState,
    /// Master states captured while the scenario ran, hygiene-checked too.
    pub snapshots: Vec<MiniMasterState>,
    pub dials: Vec<Dial>,
    pub external_to_internal: Vec<Dial>,
    pub internal_nodes: Vec<String>,
    pub hygiene_violations: Vec<String>,
    pub advertised_host: Option<String>,
    pub main_port: Option<u16>,
    pub port_range: Option<PortRange>,
    pub leases_before: Vec<PortLease>,
    pub leases_peak: Vec<PortLease>,
    pub leases_after: Vec<PortLease>,
    pub ports_rebindable: Option<bool>,
    pub service_uri_seen: Option<String>,
    pub stale: Option<StaleReport>,
    pub duration: Duration,
}

impl ScenarioReport {
    fn new(scenario: Scenario, mode: Mode) -> Self {
        Self {
            scenario,
            mode,
            failures: Vec::new(),
            sent: Vec::new(),
            received: Vec::new(),
            master_snapshot: MiniMasterState::default(),
            snapshots: Vec::new(),
            dials: Vec::new(),
            external_to_internal: Vec::new(),
            internal_nodes: Vec::new(),
            hygiene_violations: Vec::new(),
            advertised_host: None,
            main_port: None,
            port_range: None,
            leases_before: Vec::new(),
            leases_peak: Vec::new(),
            leases_after: Vec::new(),
            ports_rebindable: None,
            service_uri_seen: None,
            stale: None,
            duration: Duration::ZERO,
        }
    }

    pub fn delivered(&self) -> bool {
        !self.sent.is_empty() && self.sent == self.received
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, what: impl Into<String>) {
        self.failures.push(what.into());
    }

    /// Machine-readable `key=value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("scenario", &self.scenario);
        kv("mode", &self.mode);
        kv("passed", &self.passed());
        kv("delivered", &self.delivered());
        kv("payloads_sent", &self.sent.len());
        kv("payloads_received", &self.received.len());
        kv("payload_digest", &payload_digest(&self.received));
        kv("duration_ms", &self.duration.as_millis());
        kv("dials", &self.dials.len());
        kv(
            "external_to_internal_dials",
            &self.external_to_internal.len(),
        );
        kv("hygiene_violations", &self.hygiene_violations.len());
        kv(
            "master_publishers",
            &self
                .master_snapshot
                .publishers
                .values()
                .map(|s| s.len())
                .sum::<usize>(),
        );
        kv(
            "master_subscribers",
            &self
                .master_snapshot
                .subscribers
                .values()
                .map(|s| s.len())
                .sum::<usize>(),
        );
        kv("master_services", &self.master_snapshot.services.len());
        if let Some(host) = &self.advertised_host {
            kv("advertised_host", host);
        }
        if let Some(port) = self.main_port {
            kv("main_port", &port);
        }
        if let Some(range) = self.port_range {
            kv("port_range", &range);
            kv("leases_before", &self.leases_before.len());
            kv("leases_peak", &self.leases_peak.len());
            kv("leases_after", &self.leases_after.len());
            kv("lease_ports", &join_ports(&self.leases_peak));
        }
        if let Some(ok) = self.ports_rebindable {
            kv("ports_rebindable", &ok);
        }
        if let Some(uri) = &self.service_uri_seen {
            kv("service_uri_seen", uri);
        }
        if let Some(stale) = &self.stale {
            kv("stale_refused_after_ms", &stale.refused_after.as_millis());
            kv("stale_released_after_ms", &stale.released_after.as_millis());
            kv("stale_cleanup_removed", &stale.cleanup_removed.join(","));
            kv("stale_master_entry_removed", &stale.master_entry_removed);
        }
        for (i, f) in self.failures.iter().enumerate() {
            kv(&format!("failure.{i}"), f);
        }
        out
    }
}

fn join_ports(leases: &[PortLease]) -> String {
    leases
        .iter()
        .map(|l| l.port.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// SHA-256 over the length-prefixed payload sequence, hex encoded.
pub fn payload_digest(payloads: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    for p in payloads {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// URIs the master holds for internal nodes that do not point at the
/// advertised host within the advertised port range.
pub fn hygiene_violations(
    snapshot: &MiniMasterState,
    internal_nodes: &[String],
    advertised_host: &str,
    advertised_ports: (u16, u16),
) -> Vec<String> {
    let mut bad = Vec::new();
    let ok = |uri: &str, scheme: &str| {
        Endpoint::from_uri(uri, scheme).is_some_and(|e| {
            e.host == advertised_host && (advertised_ports.0..=advertised_ports.1).contains(&e.port)
        })
    };
    for id in internal_nodes {
        for set in snapshot
            .publishers
            .values()
            .chain(snapshot.subscribers.values())
        {
            for (_, api) in set.iter().filter(|(who, _)| who == id) {
                if !ok(api, "http") {
                    bad.push(format!("{id} caller_api {api}"));
                }
            }
        }
        for (name, s) in snapshot.services.iter().filter(|(_, s)| &s.caller_id == id) {
            if !ok(&s.caller_api, "http") {
                bad.push(format!("{id} caller_api {} for {name}", s.caller_api));
            }
            if !ok(&s.service_api, "rosrpc") {
                bad.push(format!("{id} service_api {} for {name}", s.service_api));
            }
        }
    }
    bad
}

struct World {
    segments: Segments,
    dials: DialLog,
    master: MiniMaster,
    proxy: Option<Proxy>,
    internal_master_uri: String,
}

impl World {
    fn actor(&self, name: &str, side: Side) -> Actor {
        Actor::new(name, side, self.dials.clone())
    }

    async fn node(&self, caller_id: &str, side: Side) -> std::io::Result<MiniNode> {
        let master_uri = match side {
            Side::Internal => self.internal_master_uri.clone(),
            Side::External => self.master.uri(),
        };
        let env = NodeEnv {
            actor: self.actor(caller_id, side),
            bind_ip: self.segments.ip(side),
            master_uri,
        };
        MiniNode::start(caller_id, env).await
    }

    fn leases(&self) -> Vec<PortLease> {
        self.proxy
            .as_ref()
            .map(Proxy::live_leases)
            .unwrap_or_default()
    }
}

/// Runs one scenario to completion. Failures are reported, never panicked.
pub async fn run(scenario: Scenario, mode: Mode, opts: &ScenarioOptions) -> ScenarioReport {
    let started = Instant::now();
    let mut report = ScenarioReport::new(scenario, mode);
    let world = match setup(mode, opts, &mut report).await {
        Ok(w) => w,
        Err(e) => {
            report.fail(format!("setup: {e}"));
            report.duration = started.elapsed();
            return report;
        }
    };
    report.leases_before = world.leases();

    let body = match scenario {
        Scenario::Fig1 => {
            fig1(
                &world,
                opts,
                &mut report,
                Order::TalkerFirst,
                Side::Internal,
            )
            .await
        }
        Scenario::Fig1ListenerFirst => {
            fig1(
                &world,
                opts,
                &mut report,
                Order::ListenerFirst,
                Side::Internal,
            )
            .await
        }
        Scenario::Fig1Inbound => {
            fig1(
                &world,
                opts,
                &mut report,
                Order::ListenerFirst,
                Side::External,
            )
            .await
        }
        Scenario::ServiceCall => service_call(&world, &mut report).await,
        Scenario::StaleNode => stale_node(&world, opts, &mut report).await,
    };
    if let Err(e) = body {
        report.fail(e);
    }
    finish(world, &mut report).await;
    report.duration = started.elapsed();
    report
}

async fn setup(
    mode: Mode,
    opts: &ScenarioOptions,
    report: &mut ScenarioReport,
) -> Result<World, String> {
    let segments = Segments::detect();
    let dials = DialLog::new();
    let master = MiniMaster::serve(
        SocketAddr::new(segments.external, 0),
        Actor::new("master", Side::External, dials.clone()),
    )
    .await
    .map_err(|e| format!("mini master: {e}"))?;

    let (proxy, internal_master_uri) = match mode {
        Mode::Direct => (None, master.uri()),
        Mode::Proxied => {
            let block = match opts.port_block {
                Some(b) => b,
                None => net::free_port_block(opts.range_len + 1).ok_or("no free port block")?,
            };
            let range =
                PortRange::new(block + 1, block + opts.range_len).map_err(|e| e.to_string())?;
            let mut config = ProxyConfig::new(master.uri(), segments.proxy.to_string(), range);
            config.bind_address = segments.proxy;
            config.main_port = block;
            config.ping = opts.ping;
            config.purge_grace = opts.purge_grace;
            config.request_timeout = Duration::from_secs(2);
            config.validate().map_err(|e| e.to_string())?;
            report.advertised_host = Some(config.advertised_host.clone());
            report.main_port = Some(block);
            report.port_range = Some(range);
            let proxy = Proxy::start(config).await.map_err(|e| e.to_string())?;
            let uri = Endpoint::new(segments.proxy.to_string(), block).http_uri();
            (Some(proxy), uri)
        }
    };
    Ok(World {
        segments,
        dials,
        master,
        proxy,
        internal_master_uri,
    })
}

async fn finish(world: World, report: &mut ScenarioReport) {
    report.master_snapshot = world.master.snapshot();
    report.dials = world.dials.entries();
    report.external_to_internal = world.dials.external_to_internal();
    let now = world.leases();
    if now.len() > report.leases_peak.len() {
        report.leases_peak = now;
    }

    if let Some(proxy) = world.proxy {
        let config = proxy.config().clone();
        if report.mode == Mode::Proxied {
            let range = config.port_range;
            let ports = (
                config.advertised_port(range.low()),
                config.advertised_port(range.high()),
            );
            for snapshot in report.snapshots.iter().chain([&report.master_snapshot]) {
                for v in hygiene_violations(
                    snapshot,
                    &report.internal_nodes,
                    &config.advertised_host,
                    ports,
                ) {
                    if !report.hygiene_violations.contains(&v) {
                        report.hygiene_violations.push(v);
                    }
                }
            }
            let main = config.main_port;
            let allowed = |d: &Dial| {
                d.host != config.advertised_host
                    || d.port == main
                    || (ports.0..=ports.1).contains(&d.port)
            };
            for d in report
                .dials
                .iter()
                .filter(|d| d.side == Side::External && !allowed(d))
            {
                report
                    .failures
                    .push(format!("external dial outside advertised ports: {d}"));
            }
        }
        report.leases_after = proxy.shutdown().await;
        let range = config.port_range;
        let rebindable = net::port_is_free(config.main_port)
            && (range.low()..=range.high()).all(net::port_is_free);
        report.ports_rebindable = Some(rebindable);
        if !rebindable {
            report.fail("ports still bound after shutdown");
        }
        if !report.leases_after.is_empty() {
            report.fail(format!(
                "{} leases left after shutdown",
                report.leases_after.len()
            ));
        }
    }
    world.master.close().await;

    if !report.hygiene_violations.is_empty() {
        report.fail(format!(
            "master holds internal URIs: {}",
            report.hygiene_violations.join("; ")
        ));
    }
    if report.mode == Mode::Proxied && !report.external_to_internal.is_empty() {
        let dials: Vec<String> = report
            .external_to_internal
            .iter()
            .map(ToString::to_string)
            .collect();
        report.fail(format!(
            "external actors dialed internal addresses: {}",
            dials.join("; ")
        ));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    TalkerFirst,
    ListenerFirst,
}

/// Talker on `talker_side`, listener on the other side. Returns the talker
/// so that callers can continue with it.
async fn fig1_nodes(
    world: &World,
    opts: &ScenarioOptions,
    report: &mut ScenarioReport,
    order: Order,
    talker_side: Side,
) -> Result<(MiniNode, MiniNode), String> {
    let listener_side = match talker_side {
        Side::Internal => Side::External,
        Side::External => Side::Internal,
    };
    let talker = world
        .node("/talker", talker_side)
        .await
        .map_err(|e| format!("talker: {e}"))?;
    let listener = world
        .node("/listener", listener_side)
        .await
        .map_err(|e| format!("listener: {e}"))?;
    for (node, side) in [(&talker, talker_side), (&listener, listener_side)] {
        if side == Side::Internal {
            report.internal_nodes.push(node.caller_id().to_owned());
        }
    }
    report.sent = opts.payloads.clone();

    let mut inbox = match order {
        Order::TalkerFirst => {
            talker
                .advertise(TOPIC, opts.payloads.clone())
                .await
                .map_err(|e| e.to_string())?;
            listener.subscribe(TOPIC).await.map_err(|e| e.to_string())?
        }
        Order::ListenerFirst => {
            let inbox = listener.subscribe(TOPIC).await.map_err(|e| e.to_string())?;
            talker
                .advertise(TOPIC, opts.payloads.clone())
                .await
                .map_err(|e| e.to_string())?;
            inbox
        }
    };
    match inbox.take(opts.payloads.len(), RECEIVE_DEADLINE).await {
        Ok(got) => report.received = got,
        Err(e) => report.fail(format!("listener: {e}")),
    }
    report.leases_peak = world.leases();
    report.snapshots.push(world.master.snapshot());
    if !report.delivered() {
        report.fail("payload sequence differs from what the talker sent");
    }
    Ok((talker, listener))
}

async fn fig1(
    world: &World,
    opts: &ScenarioOptions,
    report: &mut ScenarioReport,
    order: Order,
    talker_side: Side,
) -> Result<(), String> {
    let (_talker, _listener) = fig1_nodes(world, opts, report, order, talker_side).await?;
    Ok(())
}

async fn service_call(world: &World, report: &mut ScenarioReport) -> Result<(), String> {
    let server = world
        .node("/echo_server", Side::Internal)
        .await
        .map_err(|e| format!("server: {e}"))?;
    report.internal_nodes.push(server.caller_id().to_owned());
    server
        .advertise_service(SERVICE)
        .await
        .map_err(|e| e.to_string())?;

    let client = world.actor("/echo_client", Side::External);
    let request = b"ping".to_vec();
    report.sent = vec![request.clone()];
    match node::call_service(
        &client,
        &world.master.uri(),
        "/echo_client",
        SERVICE,
        &request,
    )
    .await
    {
        Ok((uri, response)) => {
            report.service_uri_seen = Some(uri);
            report.received = vec![response];
        }
        Err(e) => report.fail(format!("client: {e}")),
    }
    if !report.delivered() {
        report.fail("echo response differs from request");
    }
    report.leases_peak = world.leases();
    report.snapshots.push(world.master.snapshot());

    server
        .unadvertise_service(SERVICE)
        .await
        .map_err(|e| e.to_string())?;
    if world.master.snapshot().services.contains_key(SERVICE) {
        report.fail("service still registered after unregisterService");
    }
    if let Some(proxy) = &world.proxy {
        // With no registrations left the node is purged after the grace period.
        let deadline = Instant::now() + proxy.config().purge_grace + Duration::from_secs(2);
        while proxy
            .live_leases()
            .iter()
            .any(|l| l.owner == server.caller_id())
        {
            if Instant::now() > deadline {
                report.fail("service relay not released after the node went idle");
                break;
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
    }
    Ok(())
}

async fn stale_node(
    world: &World,
    opts: &ScenarioOptions,
    report: &mut ScenarioReport,
) -> Result<(), String> {
    let (talker, listener) =
        fig1_nodes(world, opts, report, Order::TalkerFirst, Side::Internal).await?;
    let before = report.snapshots.last().cloned().unwrap_or_default();
    let advertised_api = before
        .node_api(talker.caller_id())
        .ok_or("talker missing from master before kill")?;
    let gateway =
        Endpoint::from_uri(&advertised_api, "http").ok_or("talker API is not an http URI")?;
    let gateway_addr: SocketAddr = tokio::net::lookup_host((gateway.host.as_str(), gateway.port))
        .await
        .map_err(|e| e.to_string())?
        .next()
        .ok_or("talker API does not resolve")?;

    let killed = Instant::now();
    talker.kill().await;
    let limit = opts.ping.interval * (opts.ping.failure_threshold + 3);
    let mut refused_after = None;
    let mut released_after = None;
    while refused_after.is_none() || released_after.is_none() {
        if killed.elapsed() > limit {
            break;
        }
        if refused_after.is_none() && net::refuses(gateway_addr).await {
            refused_after = Some(killed.elapsed());
        }
        let held = world.leases().iter().any(|l| l.owner == talker.caller_id());
        if released_after.is_none() && !held {
            released_after = Some(killed.elapsed());
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let (Some(refused_after), Some(released_after)) = (refused_after, released_after) else {
        return Err(format!("talker not detected as stale within {limit:?}"));
    };

    let probe_actor = world.actor("/rosnode", Side::External);
    let cleanup = probe::cleanup(&probe_actor, &world.master.uri()).await;
    let after = world.master.snapshot();
    let removed = !after.caller_ids().contains(talker.caller_id());
    if !removed {
        report.fail("cleanup probe left the dead talker registered");
    }
    if !after.caller_ids().contains(listener.caller_id()) {
        report.fail("cleanup probe removed the live listener");
    }
    report.stale = Some(StaleReport {
        refused_after,
        released_after,
        cleanup_removed: cleanup.removed,
        master_entry_removed: removed,
    });
    report.snapshots.push(after);
    Ok(())
}
