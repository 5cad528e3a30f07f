//! Acceptance gate. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, SocketAddr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use rosproxy::config::ProxyConfig;
use rosproxy::ports::{LeasePurpose, PortAllocator, PortLease, PortRange};
use rosproxy::xmlrpc::{self, MethodCall, MethodResponse, RosResult, Value};
use rosproxy::{open_relay, transport, Endpoint, Proxy};
use rosproxy_sim::net::{self, Actor, Segments};
use rosproxy_sim::scenario::{self, Mode, Scenario, ScenarioOptions, ScenarioReport};
use rosproxy_sim::{DialLog, MiniMaster, MiniNode, NodeEnv, Side};
use sha2::{Digest, Sha256};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

const FIG1_LIMIT: Duration = Duration::from_secs(10);
const RELAY_STREAM_BYTES: u64 = 64 * 1024 * 1024;
const RELAY_MIN_MIB_PER_S: f64 = 50.0;
const RELAY_CONCURRENT: usize = 16;
const STALE_NOMINAL: Duration = Duration::from_secs(3);
const STALE_TOLERANCE: Duration = Duration::from_secs(1);
const CONSERVATION_EVENTS: usize = 1200;
const CONSERVATION_NODES: usize = 8;
const CODEC_CASES: u32 = 10_000;
const CODEC_MAX_DEPTH: u32 = 8;
const FUZZ_MUTATIONS: usize = 20_000;

type Check<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime");

    let reports = rt.block_on(run_all_scenarios());
    let criteria: Vec<(u8, &str, Check<'_>)> = vec![
        (
            1,
            "fig1 end to end through the proxy",
            Box::new(|| fig1_end_to_end(&reports)),
        ),
        (
            2,
            "registry hygiene",
            Box::new(|| registry_hygiene(&reports)),
        ),
        (
            3,
            "rewrite completeness",
            Box::new(|| rt.block_on(rewrite_completeness())),
        ),
        (
            4,
            "relay transparency",
            Box::new(|| rt.block_on(relay_transparency())),
        ),
        (
            5,
            "stale node lifecycle",
            Box::new(|| stale_lifecycle(&reports)),
        ),
        (
            6,
            "resource conservation",
            Box::new(|| rt.block_on(resource_conservation())),
        ),
        (
            7,
            "port determinism and exhaustion",
            Box::new(|| rt.block_on(determinism_and_exhaustion())),
        ),
        (8, "xml-rpc codec", Box::new(codec_round_trip_and_fuzz)),
        (
            9,
            "transparency equivalence",
            Box::new(|| transparency_equivalence(&reports)),
        ),
    ];

    let mut failed = 0;
    for (id, name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Outcome::check(false, format!("panicked: {}", panic_text(&p))));
        if !outcome.passed {
            failed += 1;
        }
        println!(
            "criterion {id} ({name}): {} | {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

type Reports = BTreeMap<(&'static str, &'static str), ScenarioReport>;

async fn run_all_scenarios() -> Reports {
    let opts = ScenarioOptions::default();
    let mut out = BTreeMap::new();
    for sc in Scenario::ALL {
        for mode in [Mode::Direct, Mode::Proxied] {
            let report = scenario::run(sc, mode, &opts).await;
            let mode_name = match mode {
                Mode::Direct => "direct",
                Mode::Proxied => "proxied",
            };
            out.insert((sc.name(), mode_name), report);
        }
    }
    out
}

fn proxied(reports: &Reports) -> impl Iterator<Item = &ScenarioReport> {
    reports.values().filter(|r| r.mode == Mode::Proxied)
}

// 1 ---------------------------------------------------------------------

fn fig1_end_to_end(reports: &Reports) -> Outcome {
    let mut problems = Vec::new();
    let mut details = Vec::new();
    for key in [("fig1", "proxied"), ("fig1_listener_first", "proxied")] {
        let Some(r) = reports.get(&key) else {
            problems.push(format!("{} missing", key.0));
            continue;
        };
        let external_dials = r.dials.iter().filter(|d| d.side == Side::External).count();
        details.push(format!(
            "{}: received {}/{} byte-identical={} in {} ms, external dials {} of which to internal {}",
            key.0,
            r.received.len(),
            r.sent.len(),
            r.delivered(),
            r.duration.as_millis(),
            external_dials,
            r.external_to_internal.len()
        ));
        if !r.delivered() {
            problems.push(format!("{}: payloads differ", key.0));
        }
        if r.duration >= FIG1_LIMIT {
            problems.push(format!("{}: took {:?}", key.0, r.duration));
        }
        if !r.external_to_internal.is_empty() {
            problems.push(format!("{}: external dials to internal addresses", key.0));
        }
        if !r.passed() {
            problems.push(format!("{}: {}", key.0, r.failures.join("; ")));
        }
    }
    finish(problems, details)
}

fn finish(problems: Vec<String>, details: Vec<String>) -> Outcome {
    if problems.is_empty() {
        Outcome::check(true, details.join("; "))
    } else {
        Outcome::check(
            false,
            format!("{} [{}]", problems.join("; "), details.join("; ")),
        )
    }
}

// 2 ---------------------------------------------------------------------

/// `scheme://host:port[/]` split without the library's URI parser.
fn split_uri(uri: &str, scheme: &str) -> Option<(String, u16)> {
    let rest = uri.strip_prefix(scheme)?.strip_prefix("://")?;
    let authority = rest.split('/').next()?;
    let (host, port) = authority.rsplit_once(':')?;
    Some((host.to_string(), port.parse().ok()?))
}

fn registry_hygiene(reports: &Reports) -> Outcome {
    let mut problems = Vec::new();
    let mut checked = 0;
    for r in proxied(reports) {
        let (Some(host), Some(range)) = (&r.advertised_host, r.port_range) else {
            problems.push(format!("{}: no proxy settings in report", r.scenario));
            continue;
        };
        for snap in r.snapshots.iter().chain([&r.master_snapshot]) {
            for id in &r.internal_nodes {
                let mut uris: Vec<(String, &str)> = Vec::new();
                for set in snap.publishers.values().chain(snap.subscribers.values()) {
                    uris.extend(
                        set.iter()
                            .filter(|(who, _)| who == id)
                            .map(|(_, api)| (api.clone(), "http")),
                    );
                }
                for s in snap.services.values().filter(|s| &s.caller_id == id) {
                    uris.push((s.caller_api.clone(), "http"));
                    uris.push((s.service_api.clone(), "rosrpc"));
                }
                for (uri, scheme) in uris {
                    checked += 1;
                    match split_uri(&uri, scheme) {
                        Some((h, p)) if &h == host && range.contains(p) => {}
                        _ => problems.push(format!("{}: {id} registered as {uri}", r.scenario)),
                    }
                }
            }
        }
        if !r.hygiene_violations.is_empty() {
            problems.push(format!(
                "{}: {}",
                r.scenario,
                r.hygiene_violations.join(", ")
            ));
        }
    }
    if checked == 0 {
        problems.push("no internal-node URIs were observed".into());
    }
    finish(
        problems,
        vec![format!(
            "{checked} internal-node URIs checked across all proxied scenarios, 0 violations"
        )],
    )
}

// 3 ---------------------------------------------------------------------

/// Paths at which two values differ structurally.
fn diff_paths(a: &Value, b: &Value, path: &mut Vec<String>, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                path.push(i.to_string());
                diff_paths(p, q, path, out);
                path.pop();
            }
        }
        (Value::Struct(x), Value::Struct(y)) if x.keys().eq(y.keys()) => {
            for (k, p) in x {
                path.push(k.clone());
                diff_paths(p, &y[k], path, out);
                path.pop();
            }
        }
        _ if a == b => {}
        _ => out.push(format!("[{}]", path.join("]["))),
    }
}

fn diff(a: &Value, b: &Value) -> BTreeSet<String> {
    let mut out = Vec::new();
    diff_paths(a, b, &mut Vec::new(), &mut out);
    out.into_iter().collect()
}

fn ros_value(resp: &MethodResponse) -> Option<Value> {
    match resp {
        MethodResponse::Success(v) => RosResult::from_value(v)
            .filter(RosResult::is_success)
            .map(|r| r.value),
        MethodResponse::Fault { .. } => None,
    }
}

struct Rig {
    segments: Segments,
    dials: DialLog,
    master: MiniMaster,
    proxy: Proxy,
    proxy_uri: String,
}

async fn rig(range_len: u16, tweak: impl FnOnce(&mut ProxyConfig)) -> Rig {
    let segments = Segments::detect();
    let dials = DialLog::new();
    let master = MiniMaster::serve(
        SocketAddr::new(segments.external, 0),
        Actor::new("master", Side::External, dials.clone()),
    )
    .await
    .expect("mini master");
    let block = net::free_port_block(range_len + 1).expect("free ports");
    let range = PortRange::new(block + 1, block + range_len).expect("range");
    let mut config = ProxyConfig::new(master.uri(), segments.proxy.to_string(), range);
    config.bind_address = segments.proxy;
    config.main_port = block;
    config.request_timeout = Duration::from_secs(2);
    tweak(&mut config);
    let proxy = Proxy::start(config).await.expect("proxy start");
    let proxy_uri = Endpoint::new(segments.proxy.to_string(), block).http_uri();
    Rig {
        segments,
        dials,
        master,
        proxy,
        proxy_uri,
    }
}

impl Rig {
    async fn internal_node(&self, caller_id: &str) -> MiniNode {
        let env = NodeEnv {
            actor: Actor::new(caller_id, Side::Internal, self.dials.clone()),
            bind_ip: self.segments.internal,
            master_uri: self.proxy_uri.clone(),
        };
        MiniNode::start(caller_id, env).await.expect("node start")
    }

    async fn call(&self, uri: &str, call: &MethodCall) -> MethodResponse {
        transport::call(uri, call, Duration::from_secs(5))
            .await
            .expect("xml-rpc call")
    }

    async fn close(self) -> Vec<PortLease> {
        let left = self.proxy.shutdown().await;
        self.master.close().await;
        left
    }
}

fn strs(items: &[&str]) -> Vec<Value> {
    items.iter().map(|s| Value::from(*s)).collect()
}

async fn rewrite_completeness() -> Outcome {
    let rig = rig(8, |_| {}).await;
    let node = rig.internal_node("/talker").await;
    node.offer_topic("/chat", vec![b"x".to_vec()]);
    let api = node.slave_uri().to_string();
    let svc = node.service_uri();
    let host = rig.proxy.config().advertised_host.clone();
    let range = rig.proxy.config().port_range;

    let cases: Vec<(MethodCall, BTreeSet<String>)> = vec![
        (
            MethodCall::new(
                "registerPublisher",
                strs(&["/talker", "/chat", "std_msgs/String", &api]),
            ),
            ["[3]".to_string()].into(),
        ),
        (
            MethodCall::new(
                "registerSubscriber",
                strs(&["/talker", "/other", "std_msgs/String", &api]),
            ),
            ["[3]".to_string()].into(),
        ),
        (
            MethodCall::new("registerService", strs(&["/talker", "/echo", &svc, &api])),
            ["[2]".to_string(), "[3]".to_string()].into(),
        ),
        (
            MethodCall::new("unregisterSubscriber", strs(&["/talker", "/other", &api])),
            ["[2]".to_string()].into(),
        ),
        (
            MethodCall::new("unregisterPublisher", strs(&["/talker", "/chat", &api])),
            ["[2]".to_string()].into(),
        ),
    ];

    let mut problems = Vec::new();
    let mut details = Vec::new();
    let mut request_topic_checked = false;
    for (sent, expected) in cases {
        let resp = rig.call(&rig.proxy_uri, &sent).await;
        if ros_value(&resp).is_none() {
            problems.push(format!("{} rejected: {resp:?}", sent.method_name));
            continue;
        }
        let Some(seen) = rig
            .master
            .calls()
            .into_iter()
            .rev()
            .find(|c| c.method_name == sent.method_name)
        else {
            problems.push(format!("{} never reached the master", sent.method_name));
            continue;
        };
        let changed = diff(
            &Value::Array(sent.params.clone()),
            &Value::Array(seen.params.clone()),
        );
        if changed != expected {
            problems.push(format!(
                "{}: changed {changed:?}, expected {expected:?}",
                sent.method_name
            ));
        }
        let record = rig.proxy.registry().node("/talker").await;
        for idx in expected
            .iter()
            .map(|p| p.trim_matches(['[', ']']).parse::<usize>().unwrap())
        {
            let got = seen.params[idx].as_str().unwrap_or_default();
            let ok = if got.starts_with("rosrpc://") {
                split_uri(got, "rosrpc").is_some_and(|(h, p)| h == host && range.contains(p))
            } else {
                record.as_ref().is_some_and(|r| r.advertised_uri == got)
                    && split_uri(got, "http").is_some_and(|(h, p)| h == host && range.contains(p))
            };
            if !ok {
                problems.push(format!(
                    "{} param {idx} rewritten to {got}",
                    sent.method_name
                ));
            }
        }
        details.push(format!("{} {:?}", sent.method_name, changed));

        if sent.method_name == "registerPublisher" {
            let rt = MethodCall::new(
                "requestTopic",
                vec![
                    "/listener".into(),
                    "/chat".into(),
                    Value::Array(vec![Value::Array(vec!["TCPROS".into()])]),
                ],
            );
            let advertised = record.map(|r| r.advertised_uri).unwrap_or_default();
            let (MethodResponse::Success(raw), MethodResponse::Success(via)) =
                (rig.call(&api, &rt).await, rig.call(&advertised, &rt).await)
            else {
                problems.push("requestTopic faulted".into());
                continue;
            };
            let changed = diff(&raw, &via);
            let expected: BTreeSet<String> = ["[2][1]".to_string(), "[2][2]".to_string()].into();
            if changed != expected {
                problems.push(format!(
                    "requestTopic: changed {changed:?}, expected {expected:?}"
                ));
            }
            let params = via
                .as_array()
                .and_then(|a| a.get(2))
                .and_then(Value::as_array)
                .unwrap_or_default();
            let host_ok = params.get(1).and_then(Value::as_str) == Some(host.as_str());
            let port_ok = params
                .get(2)
                .and_then(Value::as_i32)
                .and_then(|p| u16::try_from(p).ok())
                .is_some_and(|p| range.contains(p));
            if !(host_ok && port_ok) {
                problems.push(format!("requestTopic rewritten to {via}"));
            }
            request_topic_checked = true;
            details.push(format!("requestTopic {changed:?}"));
        }
    }
    if !request_topic_checked {
        problems.push("requestTopic not exercised".into());
    }
    drop(node);
    let left = rig.close().await;
    if !left.is_empty() {
        problems.push(format!("{} leases left", left.len()));
    }
    finish(problems, details)
}

// 4 ---------------------------------------------------------------------

const CHUNK: usize = 64 * 1024;

/// Writes `len` seeded pseudo-random bytes, returning their digest.
async fn send_stream<W: AsyncWriteExt + Unpin>(
    w: &mut W,
    seed: u64,
    len: u64,
) -> std::io::Result<[u8; 32]> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; CHUNK];
    let mut left = len;
    while left > 0 {
        let n = left.min(CHUNK as u64) as usize;
        rng.fill_bytes(&mut buf[..n]);
        hasher.update(&buf[..n]);
        w.write_all(&buf[..n]).await?;
        left -= n as u64;
    }
    w.shutdown().await?;
    Ok(hasher.finalize().into())
}

async fn recv_stream<R: AsyncReadExt + Unpin>(r: &mut R) -> std::io::Result<([u8; 32], u64)> {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; CHUNK];
    let mut total = 0u64;
    loop {
        let n = r.read(&mut buf).await?;
        if n == 0 {
            return Ok((hasher.finalize().into(), total));
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
}

/// Per connection: (id, digest sent by server, digest received by server).
type ServerSide = (u64, [u8; 32], [u8; 32], u64);

async fn stream_server(listener: TcpListener, tx: tokio::sync::mpsc::UnboundedSender<ServerSide>) {
    loop {
        let Ok((stream, _)) = listener.accept().await else {
            return;
        };
        let tx = tx.clone();
        tokio::spawn(async move {
            let (mut rd, mut wr) = stream.into_split();
            let (Ok(id), Ok(len)) = (rd.read_u64_le().await, rd.read_u64_le().await) else {
                return;
            };
            let recv = tokio::spawn(async move { recv_stream(&mut rd).await });
            let sent = send_stream(&mut wr, id ^ 0xa5a5, len).await;
            if let (Ok(sent), Ok(Ok((got, n)))) = (sent, recv.await) {
                let _ = tx.send((id, sent, got, n));
            }
        });
    }
}

/// Client side of one connection: (sent digest, received digest, bytes received).
async fn stream_client(
    addr: SocketAddr,
    id: u64,
    len: u64,
) -> std::io::Result<([u8; 32], [u8; 32], u64)> {
    let stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    let (mut rd, mut wr) = stream.into_split();
    let send = async {
        // Id and length travel in-band ahead of the payload, outside the digest.
        wr.write_u64_le(id).await?;
        wr.write_u64_le(len).await?;
        send_stream(&mut wr, id, len).await
    };
    let (sent, (got, n)) = tokio::try_join!(send, recv_stream(&mut rd))?;
    Ok((sent, got, n))
}

async fn relay_transparency() -> Outcome {
    let ip: IpAddr = "127.0.0.1".parse().unwrap();
    let listener = TcpListener::bind((ip, 0)).await.expect("bind target");
    let target = listener.local_addr().unwrap();
    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();

    let block = net::free_port_block(2).expect("free ports");
    let alloc = PortAllocator::new(PortRange::new(block, block + 1).unwrap());
    let lease = alloc
        .lease(
            LeasePurpose::TcprosRelay,
            Endpoint::new(ip.to_string(), target.port()),
            "/bench",
        )
        .expect("lease");
    let relay = open_relay(lease.clone(), ip).await.expect("relay");
    let relay_addr = relay.local_addr();

    let mut problems = Vec::new();
    let mut details = Vec::new();

    // One 64 MiB stream each way.
    let server = tokio::spawn(stream_server(listener, tx.clone()));
    let started = Instant::now();
    let client = stream_client(relay_addr, 1, RELAY_STREAM_BYTES).await;
    let elapsed = started.elapsed();
    let server_side = tokio::time::timeout(Duration::from_secs(30), rx.recv())
        .await
        .ok()
        .flatten();
    match (client, server_side) {
        (Ok((c_sent, c_got, c_n)), Some((1, s_sent, s_got, s_n))) => {
            let mib = RELAY_STREAM_BYTES as f64 / (1024.0 * 1024.0);
            let rate = mib / elapsed.as_secs_f64();
            details.push(format!(
                "64 MiB each way in {:.2} s ({rate:.0} MiB/s per direction), digests equal both ways",
                elapsed.as_secs_f64()
            ));
            if c_sent != s_got
                || s_sent != c_got
                || c_n != RELAY_STREAM_BYTES
                || s_n != RELAY_STREAM_BYTES
            {
                problems.push("digest mismatch on the 64 MiB stream".into());
            }
            if rate < RELAY_MIN_MIB_PER_S {
                problems.push(format!(
                    "throughput {rate:.1} MiB/s below {RELAY_MIN_MIB_PER_S}"
                ));
            }
        }
        (c, s) => problems.push(format!(
            "64 MiB stream failed: client {:?}, server {:?}",
            c.err(),
            s.map(|x| x.0)
        )),
    }

    // Concurrent connections, 1 MiB each way.
    let per = 1024 * 1024;
    let mut clients = tokio::task::JoinSet::new();
    for id in 0..RELAY_CONCURRENT as u64 {
        clients.spawn(async move { (id + 100, stream_client(relay_addr, id + 100, per).await) });
    }
    let mut client_results = BTreeMap::new();
    while let Some(j) = clients.join_next().await {
        if let Ok((id, Ok(r))) = j {
            client_results.insert(id, r);
        }
    }
    let mut server_results = BTreeMap::new();
    while server_results.len() < client_results.len() {
        match tokio::time::timeout(Duration::from_secs(10), rx.recv()).await {
            Ok(Some((id, sent, got, n))) => {
                server_results.insert(id, (sent, got, n));
            }
            _ => break,
        }
    }
    let good = client_results
        .iter()
        .filter(|(id, (c_sent, c_got, c_n))| {
            server_results.get(id).is_some_and(|(s_sent, s_got, s_n)| {
                s_got == c_sent && s_sent == c_got && *c_n == per && *s_n == per
            })
        })
        .count();
    details.push(format!(
        "{good}/{RELAY_CONCURRENT} concurrent connections intact"
    ));
    if good != RELAY_CONCURRENT {
        problems.push(format!(
            "only {good} of {RELAY_CONCURRENT} concurrent connections intact"
        ));
    }
    if relay.stats().accepted_total() != 1 + RELAY_CONCURRENT as u64 {
        problems.push(format!(
            "relay accepted {} connections",
            relay.stats().accepted_total()
        ));
    }

    relay.close().await;
    server.abort();
    alloc.release(&lease).expect("release");
    finish(problems, details)
}

// 5 ---------------------------------------------------------------------

fn stale_lifecycle(reports: &Reports) -> Outcome {
    let Some(r) = reports.get(&("stale_node", "proxied")) else {
        return Outcome::check(false, "stale_node scenario missing");
    };
    let Some(stale) = &r.stale else {
        return Outcome::check(false, format!("no stale phase: {}", r.failures.join("; ")));
    };
    let lo = STALE_NOMINAL - STALE_TOLERANCE;
    let hi = STALE_NOMINAL + STALE_TOLERANCE;
    let mut problems = Vec::new();
    if !(lo..=hi).contains(&stale.refused_after) {
        problems.push(format!("gateway refused after {:?}", stale.refused_after));
    }
    if !(lo..=hi).contains(&stale.released_after) {
        problems.push(format!("leases released after {:?}", stale.released_after));
    }
    if !stale.master_entry_removed || !stale.cleanup_removed.iter().any(|n| n == "/talker") {
        problems.push("cleanup probe did not remove /talker".into());
    }
    if !r.passed() {
        problems.push(r.failures.join("; "));
    }
    finish(
        problems,
        vec![format!(
            "ping 1 s x 3: port refused {} ms and leases released {} ms after kill (window {}-{} ms); cleanup removed {:?}",
            stale.refused_after.as_millis(),
            stale.released_after.as_millis(),
            lo.as_millis(),
            hi.as_millis(),
            stale.cleanup_removed
        )],
    )
}

// 6 ---------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ModelEntry {
    uri: String,
    names: BTreeSet<(u8, String)>,
    relays: BTreeSet<SocketAddr>,
}

struct SimNode {
    id: String,
    process: Option<MiniNode>,
    entry: Option<ModelEntry>,
}

const KINDS: [&str; 3] = ["Publisher", "Subscriber", "Service"];
const NAMES: [&str; 3] = ["/a", "/b", "/c"];

async fn resource_conservation() -> Outcome {
    let rig = rig(40, |c| {
        c.ping.interval = Duration::from_secs(3600);
        c.ping.failure_threshold = 1;
        c.purge_grace = Duration::from_secs(3600);
    })
    .await;
    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    let mut nodes: Vec<SimNode> = (0..CONSERVATION_NODES)
        .map(|i| SimNode {
            id: format!("/node{i}"),
            process: None,
            entry: None,
        })
        .collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut problems = Vec::new();

    for step in 0..CONSERVATION_EVENTS {
        let n = rng.random_range(0..nodes.len());
        let roll = rng.random_range(0..100);
        let kind = rng.random_range(0..3u8);
        let name = NAMES[rng.random_range(0..NAMES.len())];
        let label = match roll {
            0..=34 => "register",
            35..=59 => "unregister",
            60..=74 => "request_topic",
            75..=86 => "kill",
            _ => "ping_cycle",
        };
        *counts.entry(label).or_default() += 1;

        match label {
            "register" | "unregister" => {
                let node = &mut nodes[n];
                if node.process.is_none() {
                    let p = rig.internal_node(&node.id).await;
                    p.offer_topic(NAMES[0], vec![b"x".to_vec()]);
                    node.process = Some(p);
                }
                let p = node.process.as_ref().unwrap();
                let api = p.slave_uri().to_string();
                let svc = p.service_uri();
                let kind_name = KINDS[kind as usize];
                let call = if label == "register" {
                    let middle = if kind == 2 {
                        svc.clone()
                    } else {
                        "std_msgs/String".to_string()
                    };
                    let params = if kind == 2 {
                        strs(&[&node.id, name, &svc, &api])
                    } else {
                        strs(&[&node.id, name, &middle, &api])
                    };
                    MethodCall::new(format!("register{kind_name}"), params)
                } else {
                    let last = if kind == 2 { svc.clone() } else { api.clone() };
                    MethodCall::new(
                        format!("unregister{kind_name}"),
                        strs(&[&node.id, name, &last]),
                    )
                };
                let resp = rig.call(&rig.proxy_uri, &call).await;
                if ros_value(&resp).is_none() {
                    problems.push(format!(
                        "step {step}: {} failed: {resp:?}",
                        call.method_name
                    ));
                }
                if label == "register" {
                    let tcpros = p.tcpros_addr();
                    match &mut node.entry {
                        Some(e) if e.uri == api => {
                            e.names.insert((kind, name.to_string()));
                        }
                        _ => {
                            node.entry = Some(ModelEntry {
                                uri: api,
                                names: [(kind, name.to_string())].into(),
                                relays: BTreeSet::new(),
                            })
                        }
                    }
                    if kind == 2 {
                        node.entry.as_mut().unwrap().relays.insert(tcpros);
                    }
                } else if let Some(e) = &mut node.entry {
                    e.names.remove(&(kind, name.to_string()));
                }
            }
            "request_topic" => {
                let node = &mut nodes[n];
                if let Some(record) = rig.proxy.registry().node(&node.id).await {
                    let call = MethodCall::new(
                        "requestTopic",
                        vec![
                            "/peer".into(),
                            NAMES[0].into(),
                            Value::Array(vec![Value::Array(vec!["TCPROS".into()])]),
                        ],
                    );
                    let _ = transport::call(&record.advertised_uri, &call, Duration::from_secs(5))
                        .await;
                    if let (Some(p), Some(e)) = (&node.process, &mut node.entry) {
                        if p.slave_uri() == e.uri {
                            e.relays.insert(p.tcpros_addr());
                        }
                    }
                }
            }
            "kill" => {
                if let Some(p) = nodes[n].process.take() {
                    p.kill().await;
                }
            }
            _ => {
                rig.proxy.registry().ping_cycle().await;
                for node in &mut nodes {
                    let alive_uri = node.process.as_ref().map(|p| p.slave_uri().to_string());
                    if node
                        .entry
                        .as_ref()
                        .is_some_and(|e| Some(&e.uri) != alive_uri.as_ref())
                    {
                        node.entry = None;
                    }
                }
            }
        }

        let expected: usize = nodes
            .iter()
            .filter_map(|n| n.entry.as_ref())
            .map(|e| 1 + e.relays.len())
            .sum();
        let live = rig.proxy.registry().allocator().live_count();
        let accounted = rig.proxy.registry().expected_lease_count().await;
        if live != expected || accounted != expected {
            problems.push(format!(
                "step {step} after {label}: live {live}, records {accounted}, model {expected}"
            ));
            break;
        }
    }

    let peak_nodes = nodes.iter().filter(|n| n.entry.is_some()).count();
    drop(nodes);
    let left = rig.close().await;
    if !left.is_empty() {
        problems.push(format!("{} leases leaked after teardown", left.len()));
    }
    let counts: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    finish(
        problems,
        vec![format!(
            "{CONSERVATION_EVENTS} events over {CONSERVATION_NODES} nodes ({}), leases matched the model after every event, {peak_nodes} nodes live at the end, 0 leases after teardown",
            counts.join(" ")
        )],
    )
}

// 7 ---------------------------------------------------------------------

fn lease_signature(report: &ScenarioReport) -> Vec<(u16, LeasePurpose, String)> {
    report
        .leases_peak
        .iter()
        .map(|l| {
            (
                l.port - report.port_range.map_or(0, |r| r.low()),
                l.purpose,
                l.owner.clone(),
            )
        })
        .collect()
}

async fn determinism_and_exhaustion() -> Outcome {
    let mut problems = Vec::new();
    let mut details = Vec::new();

    for sc in [Scenario::Fig1, Scenario::ServiceCall, Scenario::StaleNode] {
        let block = net::free_port_block(17).expect("free ports");
        let opts = ScenarioOptions {
            port_block: Some(block),
            ..ScenarioOptions::default()
        };
        let first = scenario::run(sc, Mode::Proxied, &opts).await;
        let second = scenario::run(sc, Mode::Proxied, &opts).await;
        let (a, b) = (lease_signature(&first), lease_signature(&second));
        let ports_a: Vec<u16> = first.leases_peak.iter().map(|l| l.port).collect();
        let ports_b: Vec<u16> = second.leases_peak.iter().map(|l| l.port).collect();
        if a.is_empty() || a != b || ports_a != ports_b {
            problems.push(format!("{sc}: {ports_a:?} then {ports_b:?}"));
        }
        if !first.passed() || !second.passed() {
            problems.push(format!(
                "{sc}: {} / {}",
                first.failures.join(";"),
                second.failures.join(";")
            ));
        }
        details.push(format!("{sc} replayed on ports {ports_a:?} twice"));
    }

    let rig = rig(2, |c| c.ping.interval = Duration::from_secs(3600)).await;
    let range = rig.proxy.config().port_range;
    let mut last = None;
    for i in 0..3 {
        let id = format!("/n{i}");
        let api = format!("http://{}:{}/", rig.segments.internal, 40000 + i);
        let call = MethodCall::new(
            "registerPublisher",
            strs(&[&id, "/t", "std_msgs/String", &api]),
        );
        last = Some(rig.call(&rig.proxy_uri, &call).await);
        if i < 2 && last.as_ref().and_then(ros_value).is_none() {
            problems.push(format!("registration {i} failed early"));
        }
    }
    match last {
        Some(MethodResponse::Success(v)) => match RosResult::from_value(&v) {
            Some(r)
                if r.code == RosResult::ERROR
                    && r.status_message.contains("exhausted")
                    && r.status_message.contains(&range.to_string()) =>
            {
                details.push(format!(
                    "third registration in range {range}: \"{}\"",
                    r.status_message
                ));
            }
            other => problems.push(format!("third registration answered {other:?}")),
        },
        other => problems.push(format!("third registration answered {other:?}")),
    }
    if rig.proxy.live_leases().len() != 2 {
        problems.push(format!(
            "{} leases after exhaustion",
            rig.proxy.live_leases().len()
        ));
    }
    if rig.master.snapshot().caller_ids().contains("/n2") {
        problems.push("exhausted registration still reached the master".into());
    }
    let left = rig.close().await;
    if !left.is_empty() {
        problems.push("leases left after exhaustion run".into());
    }
    finish(problems, details)
}

// 8 ---------------------------------------------------------------------

fn xml_text() -> impl Strategy<Value = String> {
    "[^\u{0}-\u{8}\u{b}\u{c}\u{e}-\u{1f}\u{fffe}\u{ffff}]{0,16}"
}

fn value_strategy() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        any::<i32>().prop_map(Value::Int),
        any::<bool>().prop_map(Value::Bool),
        xml_text().prop_map(Value::String),
        any::<f64>()
            .prop_filter("finite", |d| d.is_finite())
            .prop_map(Value::Double),
        proptest::collection::vec(any::<u8>(), 0..32).prop_map(Value::Base64),
        "[0-9]{8}T[0-9]{2}:[0-9]{2}:[0-9]{2}".prop_map(Value::DateTime),
    ];
    let bushy = leaf.prop_recursive(CODEC_MAX_DEPTH, 48, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            proptest::collection::btree_map(xml_text(), inner, 0..4).prop_map(Value::Struct),
        ]
    });
    // Wide trees stay shallow; wrap them in single-child containers so every
    // depth up to the limit is generated.
    let wraps =
        proptest::collection::vec((any::<bool>(), xml_text()), 0..=CODEC_MAX_DEPTH as usize);
    (bushy, wraps).prop_map(|(mut v, wraps)| {
        for (as_array, key) in wraps {
            if v.depth() >= CODEC_MAX_DEPTH as usize {
                break;
            }
            v = if as_array {
                Value::Array(vec![v])
            } else {
                Value::Struct([(key, v)].into())
            };
        }
        v
    })
}

fn malformed_corpus() -> Vec<Vec<u8>> {
    let mut corpus: Vec<Vec<u8>> = [
        "",
        "<",
        "<methodCall>",
        "<methodCall></methodCall>",
        "<methodCall><methodName></methodName></methodCall>",
        "<methodCall><methodName>a b</methodName></methodCall>",
        "<methodCall><methodName>m</methodName><params><param></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><int>x</int></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><int>2147483648</int></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><boolean>2</boolean></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><double>1.2.3</double></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><base64>!!!</base64></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><nil/></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><array></array></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><struct><member><value><int>1</int></value></member></struct></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params><param><value><int>1</int><int>2</int></value></param></params></methodCall>",
        "<methodCall><methodName>m</methodName><params>junk</params></methodCall>",
        "<methodCall><methodName>m</methodName></methodCall><extra/>",
        "<methodResponse></methodResponse>",
        "<methodResponse><params></params></methodResponse>",
        "<methodResponse><fault><value><int>1</int></value></fault></methodResponse>",
        "<methodResponse><fault><value><struct><member><name>faultCode</name><value><string>x</string></value></member></struct></value></fault></methodResponse>",
        "<!DOCTYPE x [<!ENTITY a \"aaaa\">]><methodCall><methodName>&a;</methodName></methodCall>",
        "<html><body>502 Bad Gateway</body></html>",
        "<methodCall><methodName>m</methodName><params><param><value><string>unterminated</value></param></params></methodCall>",
    ]
    .iter()
    .map(|s| s.as_bytes().to_vec())
    .collect();
    corpus.push(vec![0xff, 0xfe, b'<', 0x00]);
    let deep = |n: usize| {
        let mut s = String::from("<methodCall><methodName>m</methodName><params><param>");
        s.push_str(&"<value><array><data>".repeat(n));
        s.push_str(&"</data></array></value>".repeat(n));
        s.push_str("</param></params></methodCall>");
        s.into_bytes()
    };
    corpus.push(deep(33));
    corpus.push(deep(100_000));
    corpus
}

fn codec_round_trip_and_fuzz() -> Outcome {
    let mut problems = Vec::new();
    let config = PropConfig {
        cases: CODEC_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    };
    let mut runner = TestRunner::new(config.clone());
    let max_depth = std::cell::Cell::new(0);
    let depths = std::cell::RefCell::new(BTreeSet::new());
    let kinds = std::cell::RefCell::new(BTreeSet::new());
    let result = runner.run(&value_strategy(), |v| {
        max_depth.set(max_depth.get().max(v.depth()));
        depths.borrow_mut().insert(v.depth());
        collect_kinds(&v, &mut kinds.borrow_mut());
        prop_assert!(v.depth() <= CODEC_MAX_DEPTH as usize);
        let call = MethodCall::new("m", vec![v.clone(), Value::Int(1)]);
        let back = xmlrpc::parse_call(&xmlrpc::encode_call(&call))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(back, call);
        let resp = MethodResponse::Success(v.clone());
        let back = xmlrpc::parse_response(&xmlrpc::encode_response(&resp))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(back, resp);
        Ok(())
    });
    if let Err(e) = result {
        problems.push(format!("round trip failed: {e}"));
    }

    let corpus = malformed_corpus();
    let mut crashes = 0;
    let mut accepted = Vec::new();
    for input in &corpus {
        match catch_unwind(|| {
            (
                xmlrpc::parse_call(input).is_err(),
                xmlrpc::parse_response(input).is_err(),
            )
        }) {
            Ok((true, true)) => {}
            Ok(_) => accepted.push(
                String::from_utf8_lossy(input)
                    .chars()
                    .take(60)
                    .collect::<String>(),
            ),
            Err(_) => crashes += 1,
        }
    }
    if !accepted.is_empty() {
        problems.push(format!("malformed inputs accepted: {accepted:?}"));
    }

    // Mutations of valid documents must never panic; they may still parse.
    let mut rng = StdRng::seed_from_u64(0xf022);
    let mut seeds = Vec::new();
    let mut seed_runner = TestRunner::new(PropConfig {
        cases: 64,
        ..config
    });
    for _ in 0..64 {
        let v = value_strategy()
            .new_tree(&mut seed_runner)
            .expect("tree")
            .current();
        seeds.push(xmlrpc::encode_call(&MethodCall::new("m", vec![v.clone()])));
        seeds.push(xmlrpc::encode_response(&MethodResponse::Success(v)));
    }
    let tokens: [&[u8]; 8] = [
        b"<",
        b">",
        b"</value>",
        b"<array>",
        b"&",
        b"&#0;",
        b"\xff",
        b"<struct>",
    ];
    let mut mutation_errors = 0;
    for _ in 0..FUZZ_MUTATIONS {
        let mut doc = seeds[rng.random_range(0..seeds.len())].clone();
        for _ in 0..rng.random_range(1..4) {
            let at = rng.random_range(0..=doc.len());
            match rng.random_range(0..4) {
                0 => doc.truncate(at),
                1 if at < doc.len() => doc[at] ^= 1 << rng.random_range(0..8),
                2 => {
                    let t = tokens[rng.random_range(0..tokens.len())];
                    doc.splice(at..at, t.iter().copied());
                }
                _ if at < doc.len() => {
                    doc.remove(at);
                }
                _ => {}
            }
        }
        match catch_unwind(|| {
            (
                xmlrpc::parse_call(&doc).is_err(),
                xmlrpc::parse_response(&doc).is_err(),
            )
        }) {
            Ok((a, b)) => mutation_errors += usize::from(a) + usize::from(b),
            Err(_) => crashes += 1,
        }
    }
    if crashes > 0 {
        problems.push(format!("{crashes} parser panics"));
    }
    let all_kinds = [
        "array",
        "base64",
        "boolean",
        "dateTime.iso8601",
        "double",
        "int",
        "string",
        "struct",
    ];
    let (max_depth, kinds) = (max_depth.get(), kinds.into_inner());
    if depths.into_inner() != (0..=CODEC_MAX_DEPTH as usize).collect() {
        problems.push("generator missed some nesting depths".into());
    }
    if !all_kinds.iter().all(|k| kinds.contains(*k)) {
        problems.push(format!("generator covered only {kinds:?}"));
    }
    finish(
        problems,
        vec![format!(
            "{CODEC_CASES} generated values (every depth 0 to {max_depth}, {} variants) round-tripped as call and response; {} malformed inputs rejected; {FUZZ_MUTATIONS} mutated documents parsed without panic ({mutation_errors} parse errors)",
            kinds.len(),
            corpus.len()
        )],
    )
}

fn collect_kinds(v: &Value, out: &mut BTreeSet<&'static str>) {
    out.insert(v.kind());
    match v {
        Value::Array(items) => items.iter().for_each(|i| collect_kinds(i, out)),
        Value::Struct(members) => members.values().for_each(|i| collect_kinds(i, out)),
        _ => {}
    }
}

// 9 ---------------------------------------------------------------------

fn transparency_equivalence(reports: &Reports) -> Outcome {
    let mut problems = Vec::new();
    let mut details = Vec::new();
    for sc in Scenario::ALL {
        let (Some(direct), Some(proxied)) = (
            reports.get(&(sc.name(), "direct")),
            reports.get(&(sc.name(), "proxied")),
        ) else {
            problems.push(format!("{sc}: missing run"));
            continue;
        };
        if !direct.passed() {
            problems.push(format!("{sc} direct: {}", direct.failures.join("; ")));
        }
        if !proxied.passed() {
            problems.push(format!("{sc} proxied: {}", proxied.failures.join("; ")));
        }
        if direct.received != proxied.received || direct.received.is_empty() {
            problems.push(format!("{sc}: payload sequences differ"));
        }
        details.push(format!(
            "{sc} {}",
            &scenario::payload_digest(&proxied.received)[..12]
        ));
    }
    finish(
        problems,
        vec![format!(
            "all {} scenarios pass in both modes with identical payloads ({})",
            Scenario::ALL.len(),
            details.join(", ")
        )],
    )
}
