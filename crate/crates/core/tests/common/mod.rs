#![allow(dead_code)]

use std::net::{Ipv4Addr, SocketAddr, TcpListener};
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rosproxy::config::ProxyConfig;
use rosproxy::ports::PortRange;
use rosproxy::transport::{RpcRequest, RpcServer};
use rosproxy::xmlrpc::{CodecLimits, MethodCall, MethodResponse, RosResult, Value};
use rosproxy::{transport, Proxy};

pub const LOCALHOST: &str = "127.0.0.1";
pub const TIMEOUT: Duration = Duration::from_secs(5);

static CURSOR: AtomicU16 = AtomicU16::new(0);

/// `len` consecutive free ports below the ephemeral range.
pub fn free_port_block(len: u16) -> u16 {
    const LOW: u16 = 21_000;
    const HIGH: u16 = 32_000;
    let span = HIGH - LOW;
    let seed = (std::process::id() % u32::from(span)) as u16;
    for _ in 0..span {
        let offset = CURSOR.fetch_add(len, Ordering::Relaxed);
        let start = LOW + (seed.wrapping_add(offset)) % (span - len);
        let all_free =
            (start..start + len).all(|p| TcpListener::bind((Ipv4Addr::UNSPECIFIED, p)).is_ok());
        if all_free {
            return start;
        }
    }
    panic!("no block of {len} free ports");
}

/// An upstream master that records every call and answers a success triple.
pub struct FakeMaster {
    pub server: RpcServer,
    calls: Arc<Mutex<Vec<MethodCall>>>,
}

impl FakeMaster {
    pub async fn start() -> Self {
        let calls: Arc<Mutex<Vec<MethodCall>>> = Arc::default();
        let log = calls.clone();
        let handler = move |req: RpcRequest| {
            log.lock().unwrap().push(req.call.clone());
            let value = match req.call.method_name.as_str() {
                "registerPublisher" | "registerSubscriber" => Value::Array(vec![]),
                "echo" => Value::Array(req.call.params.clone()),
                _ => Value::Int(1),
            };
            async move { RosResult::success("ok", value).into() }
        };
        let server = RpcServer::bind(
            (Ipv4Addr::LOCALHOST, 0).into(),
            Arc::new(handler),
            CodecLimits::default(),
        )
        .await
        .expect("fake master");
        Self { server, calls }
    }

    pub fn uri(&self) -> String {
        format!("http://{}/", self.server.local_addr())
    }

    pub fn calls(&self) -> Vec<MethodCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn last(&self) -> MethodCall {
        self.calls().pop().expect("no call reached the master")
    }
}

/// A node slave API answering `getPid` and TCPROS `requestTopic`.
pub struct FakeNode {
    pub server: RpcServer,
    pub tcpros_port: u16,
}

impl FakeNode {
    pub async fn start(tcpros_port: u16) -> Self {
        let handler = move |req: RpcRequest| async move {
            match req.call.method_name.as_str() {
                "getPid" => RosResult::success("pid", Value::Int(42)).into(),
                "requestTopic" => RosResult::success(
                    "ready",
                    Value::Array(vec![
                        "TCPROS".into(),
                        LOCALHOST.into(),
                        Value::Int(i32::from(tcpros_port)),
                    ]),
                )
                .into(),
                other => MethodResponse::fault(-1, format!("unsupported {other}")),
            }
        };
        let server = RpcServer::bind(
            (Ipv4Addr::LOCALHOST, 0).into(),
            Arc::new(handler),
            CodecLimits::default(),
        )
        .await
        .expect("fake node");
        Self {
            server,
            tcpros_port,
        }
    }

    pub fn uri(&self) -> String {
        format!("http://{}/", self.server.local_addr())
    }
}

/// Proxy config bound to loopback with a fresh main port and `range_len`
/// leasable ports right after it.
pub fn config(master_uri: &str, range_len: u16) -> ProxyConfig {
    let block = free_port_block(range_len + 1);
    let range = PortRange::new(block + 1, block + range_len).unwrap();
    let mut config = ProxyConfig::new(master_uri, LOCALHOST, range);
    config.bind_address = LOCALHOST.parse().unwrap();
    config.main_port = block;
    config.request_timeout = Duration::from_secs(2);
    config
}

pub fn main_uri(proxy: &Proxy) -> String {
    format!("http://{}/", proxy.local_addr())
}

pub fn strs(items: &[&str]) -> Vec<Value> {
    items.iter().map(|s| Value::from(*s)).collect()
}

pub async fn call(uri: &str, call: &MethodCall) -> MethodResponse {
    transport::call(uri, call, TIMEOUT).await.expect("call")
}

pub fn ros(resp: &MethodResponse) -> RosResult {
    match resp {
        MethodResponse::Success(v) => RosResult::from_value(v).expect("ROS result triple"),
        MethodResponse::Fault { code, message } => panic!("fault {code}: {message}"),
    }
}

pub async fn refuses(addr: SocketAddr) -> bool {
    matches!(
        tokio::net::TcpStream::connect(addr).await,
        Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused
    )
}
