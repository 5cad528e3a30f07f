//! Mini ROS nodes: a slave API, one TCPROS server for topics and services,
//! and subscriber logic that follows `requestTopic` answers.
//!
//! Node code is identical whichever master URI it is given; that is what
//! makes the direct and proxied runs comparable.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rosproxy::transport::{RpcRequest, RpcServer};
use rosproxy::xmlrpc::{CodecLimits, MethodCall, MethodResponse, RosResult, Value};
use rosproxy::Endpoint;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinSet;

use crate::dial::Side;
use crate::net::Actor;
use crate::tcpros::{self, TcpRosHeader, ECHO_MD5, ECHO_TYPE, STRING_MD5, STRING_TYPE};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("master call {method} failed: {reason}")]
    Master { method: String, reason: String },
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("service call failed: {0}")]
    Service(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where a node lives and which master it was told to use.
#[derive(Debug, Clone)]
pub struct NodeEnv {
    pub actor: Actor,
    pub bind_ip: IpAddr,
    pub master_uri: String,
}

struct Publication {
    payloads: Vec<Vec<u8>>,
}

struct Subscription {
    connected: BTreeSet<String>,
    tx: mpsc::UnboundedSender<Vec<u8>>,
}

struct Shared {
    caller_id: String,
    env: NodeEnv,
    slave_uri: String,
    tcpros_addr: SocketAddr,
    publications: Mutex<BTreeMap<String, Publication>>,
    subscriptions: Mutex<BTreeMap<String, Subscription>>,
    services: Mutex<BTreeSet<String>>,
    tasks: Mutex<JoinSet<()>>,
}

/// A running node.
pub struct MiniNode {
    shared: Arc<Shared>,
    slave: RpcServer,
}

/// Messages arriving on one subscribed topic, from every publisher.
pub struct Inbox {
    rx: mpsc::UnboundedReceiver<Vec<u8>>,
}

impl Inbox {
    /// Waits for `count` messages in arrival order.
    pub async fn take(
        &mut self,
        count: usize,
        deadline: Duration,
    ) -> Result<Vec<Vec<u8>>, NodeError> {
        let mut out = Vec::with_capacity(count);
        let collect = async {
            while out.len() < count {
                match self.rx.recv().await {
                    Some(msg) => out.push(msg),
                    None => break,
                }
            }
        };
        match tokio::time::timeout(deadline, collect).await {
            Ok(()) if out.len() == count => Ok(out),
            _ => Err(NodeError::Timeout(deadline)),
        }
    }
}

impl MiniNode {
    pub async fn start(caller_id: &str, env: NodeEnv) -> io::Result<Self> {
        let tcpros = TcpListener::bind((env.bind_ip, 0)).await?;
        let tcpros_addr = tcpros.local_addr()?;
        let slave_listener = TcpListener::bind((env.bind_ip, 0)).await?;
        let slave_addr = slave_listener.local_addr()?;
        if env.actor.side == Side::Internal {
            env.actor.dials.mark_internal(slave_addr);
            env.actor.dials.mark_internal(tcpros_addr);
        }
        let shared = Arc::new(Shared {
            caller_id: caller_id.to_owned(),
            slave_uri: Endpoint::new(env.bind_ip.to_string(), slave_addr.port()).http_uri(),
            env,
            tcpros_addr,
            publications: Mutex::new(BTreeMap::new()),
            subscriptions: Mutex::new(BTreeMap::new()),
            services: Mutex::new(BTreeSet::new()),
            tasks: Mutex::new(JoinSet::new()),
        });
        shared.spawn(tcpros_server(shared.clone(), tcpros));
        let handler_shared = shared.clone();
        let handler = move |req: RpcRequest| {
            let shared = handler_shared.clone();
            async move { shared.slave_call(req.call) }
        };
        let slave =
            RpcServer::from_listener(slave_listener, Arc::new(handler), CodecLimits::default())?;
        Ok(Self { shared, slave })
    }

    pub fn caller_id(&self) -> &str {
        &self.shared.caller_id
    }

    pub fn slave_uri(&self) -> &str {
        &self.shared.slave_uri
    }

    pub fn slave_addr(&self) -> SocketAddr {
        self.slave.local_addr()
    }

    pub fn tcpros_addr(&self) -> SocketAddr {
        self.shared.tcpros_addr
    }

    pub fn service_uri(&self) -> String {
        Endpoint::new(
            self.shared.env.bind_ip.to_string(),
            self.shared.tcpros_addr.port(),
        )
        .rosrpc_uri()
    }

    /// Registers as publisher of `topic`; every subscriber connection gets
    /// `payloads` in order.
    pub async fn advertise(
        &self,
        topic: &str,
        payloads: Vec<Vec<u8>>,
    ) -> Result<Vec<String>, NodeError> {
        self.offer_topic(topic, payloads);
        let value = self
            .shared
            .master(
                "registerPublisher",
                vec![topic.into(), STRING_TYPE.into(), self.slave_uri().into()],
            )
            .await?;
        Ok(strings(&value))
    }

    /// Serves `topic` on requestTopic and TCPROS without telling the master.
    pub fn offer_topic(&self, topic: &str, payloads: Vec<Vec<u8>>) {
        self.shared
            .publications
            .lock()
            .expect("node state poisoned")
            .insert(topic.to_owned(), Publication { payloads });
    }

    pub async fn unadvertise(&self, topic: &str) -> Result<(), NodeError> {
        self.shared
            .publications
            .lock()
            .expect("node state poisoned")
            .remove(topic);
        self.shared
            .master(
                "unregisterPublisher",
                vec![topic.into(), self.slave_uri().into()],
            )
            .await
            .map(drop)
    }

    /// Registers as subscriber and connects to every publisher the master
    /// names, now or later via `publisherUpdate`.
    pub async fn subscribe(&self, topic: &str) -> Result<Inbox, NodeError> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.shared
            .subscriptions
            .lock()
            .expect("node state poisoned")
            .insert(
                topic.to_owned(),
                Subscription {
                    connected: BTreeSet::new(),
                    tx,
                },
            );
        let value = self
            .shared
            .master(
                "registerSubscriber",
                vec![topic.into(), STRING_TYPE.into(), self.slave_uri().into()],
            )
            .await?;
        self.shared.connect_publishers(topic, strings(&value));
        Ok(Inbox { rx })
    }

    pub async fn unsubscribe(&self, topic: &str) -> Result<(), NodeError> {
        self.shared
            .subscriptions
            .lock()
            .expect("node state poisoned")
            .remove(topic);
        self.shared
            .master(
                "unregisterSubscriber",
                vec![topic.into(), self.slave_uri().into()],
            )
            .await
            .map(drop)
    }

    /// Offers an echo service on the node's TCPROS port.
    pub async fn advertise_service(&self, service: &str) -> Result<(), NodeError> {
        self.shared
            .services
            .lock()
            .expect("node state poisoned")
            .insert(service.to_owned());
        self.shared
            .master(
                "registerService",
                vec![
                    service.into(),
                    self.service_uri().into(),
                    self.slave_uri().into(),
                ],
            )
            .await
            .map(drop)
    }

    pub async fn unadvertise_service(&self, service: &str) -> Result<(), NodeError> {
        self.shared
            .services
            .lock()
            .expect("node state poisoned")
            .remove(service);
        self.shared
            .master(
                "unregisterService",
                vec![service.into(), self.service_uri().into()],
            )
            .await
            .map(drop)
    }

    /// Dies without unregistering: every listener and connection goes away.
    pub async fn kill(&self) {
        self.slave.close().await;
        let mut tasks =
            std::mem::take(&mut *self.shared.tasks.lock().expect("node state poisoned"));
        tasks.abort_all();
        while tasks.join_next().await.is_some() {}
    }
}

impl Drop for MiniNode {
    fn drop(&mut self) {
        if let Ok(mut tasks) = self.shared.tasks.lock() {
            tasks.abort_all();
        }
    }
}

fn strings(value: &Value) -> Vec<String> {
    value
        .as_array()
        .map(|items| {
            items
                .iter()
                .filter_map(|v| v.as_str().map(str::to_owned))
                .collect()
        })
        .unwrap_or_default()
}

impl Shared {
    fn spawn<F>(&self, task: F)
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let mut tasks = self.tasks.lock().expect("node state poisoned");
        // Reap finished tasks so long-lived nodes do not accumulate them.
        while tasks.try_join_next().is_some() {}
        tasks.spawn(task);
    }

    async fn master(&self, method: &str, mut rest: Vec<Value>) -> Result<Value, NodeError> {
        rest.insert(0, self.caller_id.as_str().into());
        let call = MethodCall::new(method, rest);
        let err = |reason: String| NodeError::Master {
            method: method.to_owned(),
            reason,
        };
        match self.env.actor.rpc(&self.env.master_uri, &call).await {
            Ok(MethodResponse::Success(v)) => match RosResult::from_value(&v) {
                Some(r) if r.is_success() => Ok(r.value),
                Some(r) => Err(err(format!("code {}: {}", r.code, r.status_message))),
                None => Err(err(format!("malformed result {v}"))),
            },
            Ok(MethodResponse::Fault { code, message }) => {
                Err(err(format!("fault {code}: {message}")))
            }
            Err(e) => Err(err(e.to_string())),
        }
    }

    fn slave_call(self: &Arc<Self>, call: MethodCall) -> MethodResponse {
        let arg = |i: usize| {
            call.params
                .get(i)
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_owned()
        };
        let result = match call.method_name.as_str() {
            "getPid" => RosResult::success("", Value::Int(std::process::id() as i32)),
            "getMasterUri" => RosResult::success("", Value::String(self.env.master_uri.clone())),
            "getBusInfo" | "getBusStats" | "getSubscriptions" | "getPublications" => {
                RosResult::success("", Value::Array(vec![]))
            }
            "shutdown" => RosResult::success("", Value::Int(0)),
            "requestTopic" => self.request_topic(&arg(1), call.params.get(2)),
            "publisherUpdate" => {
                let publishers = call.params.get(2).map(strings).unwrap_or_default();
                self.connect_publishers(&arg(1), publishers);
                RosResult::success("", Value::Int(0))
            }
            other => RosResult::error(format!("unsupported method {other}")),
        };
        result.into()
    }

    fn request_topic(&self, topic: &str, protocols: Option<&Value>) -> RosResult {
        if !self
            .publications
            .lock()
            .expect("node state poisoned")
            .contains_key(topic)
        {
            return RosResult::error(format!("not a publisher of [{topic}]"));
        }
        let offers_tcpros = protocols.and_then(Value::as_array).is_some_and(|ps| {
            ps.iter().any(|p| {
                p.as_array().and_then(|a| a.first()).and_then(Value::as_str) == Some("TCPROS")
            })
        });
        if !offers_tcpros {
            return RosResult::failure("no supported protocol", Value::Array(vec![]));
        }
        RosResult::success(
            "ready",
            Value::Array(vec![
                "TCPROS".into(),
                self.env.bind_ip.to_string().into(),
                Value::Int(i32::from(self.tcpros_addr.port())),
            ]),
        )
    }

    fn connect_publishers(self: &Arc<Self>, topic: &str, publishers: Vec<String>) {
        let mut subs = self.subscriptions.lock().expect("node state poisoned");
        let Some(sub) = subs.get_mut(topic) else {
            return;
        };
        for api in publishers {
            if !sub.connected.insert(api.clone()) {
                continue;
            }
            let shared = self.clone();
            let topic = topic.to_owned();
            let tx = sub.tx.clone();
            self.spawn(async move {
                if let Err(e) = shared.pull(&api, &topic, tx).await {
                    tracing::debug!(caller_id = %shared.caller_id, api, error = %e, "subscription link failed");
                }
            });
        }
    }

    /// requestTopic, then stream frames from the returned TCPROS endpoint.
    async fn pull(
        &self,
        api: &str,
        topic: &str,
        tx: mpsc::UnboundedSender<Vec<u8>>,
    ) -> Result<(), NodeError> {
        let call = MethodCall::new(
            "requestTopic",
            vec![
                self.caller_id.as_str().into(),
                topic.into(),
                Value::Array(vec![Value::Array(vec!["TCPROS".into()])]),
            ],
        );
        let reply = match self.env.actor.rpc(api, &call).await {
            Ok(MethodResponse::Success(v)) => v,
            Ok(MethodResponse::Fault { message, .. }) => return Err(NodeError::Service(message)),
            Err(e) => return Err(NodeError::Service(e.to_string())),
        };
        let params = RosResult::from_value(&reply)
            .filter(RosResult::is_success)
            .and_then(|r| rosproxy::ProtocolParams::from_value(&r.value))
            .ok_or_else(|| NodeError::Service(format!("unusable requestTopic answer {reply}")))?;

        let mut stream = self
            .env
            .actor
            .connect_tcpros(&params.host, params.port)
            .await?;
        TcpRosHeader::new()
            .with("callerid", &self.caller_id)
            .with("topic", topic)
            .with("type", STRING_TYPE)
            .with("md5sum", STRING_MD5)
            .with("tcp_nodelay", "1")
            .write_to(&mut stream)
            .await?;
        let header = TcpRosHeader::read_from(&mut stream).await?;
        if let Some(error) = header.get("error") {
            return Err(NodeError::Service(error.to_owned()));
        }
        loop {
            match tcpros::read_frame(&mut stream).await {
                Ok(frame) => {
                    if tx.send(frame).is_err() {
                        return Ok(());
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
    }
}

async fn tcpros_server(shared: Arc<Shared>, listener: TcpListener) {
    let mut connections = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                let _ = stream.set_nodelay(true);
                let shared = shared.clone();
                connections.spawn(async move {
                    if let Err(e) = serve_tcpros(&shared, stream).await {
                        tracing::debug!(caller_id = %shared.caller_id, error = %e, "tcpros connection ended");
                    }
                });
            }
            Some(_) = connections.join_next(), if !connections.is_empty() => {}
        }
    }
}

async fn reject(stream: &mut TcpStream, error: &str) -> io::Result<()> {
    TcpRosHeader::new()
        .with("error", error)
        .write_to(stream)
        .await?;
    stream.shutdown().await
}

async fn serve_tcpros(shared: &Shared, mut stream: TcpStream) -> io::Result<()> {
    let header = TcpRosHeader::read_from(&mut stream).await?;
    if let Some(service) = header.get("service") {
        if let Err(e) = tcpros::check_client_header(&header, ECHO_MD5) {
            return reject(&mut stream, &e).await;
        }
        if !shared
            .services
            .lock()
            .expect("node state poisoned")
            .contains(service)
        {
            return reject(&mut stream, &format!("no service [{service}]")).await;
        }
        TcpRosHeader::new()
            .with("callerid", &shared.caller_id)
            .with("md5sum", ECHO_MD5)
            .with("type", ECHO_TYPE)
            .write_to(&mut stream)
            .await?;
        loop {
            let request = match tcpros::read_frame(&mut stream).await {
                Ok(r) => r,
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
                Err(e) => return Err(e),
            };
            stream.write_u8(1).await?;
            tcpros::write_frame(&mut stream, &request).await?;
        }
    }

    if let Err(e) = tcpros::check_client_header(&header, STRING_MD5) {
        return reject(&mut stream, &e).await;
    }
    let topic = header.get("topic").unwrap_or_default();
    let payloads = shared
        .publications
        .lock()
        .expect("node state poisoned")
        .get(topic)
        .map(|p| p.payloads.clone());
    let Some(payloads) = payloads else {
        return reject(&mut stream, &format!("not a publisher of [{topic}]")).await;
    };
    TcpRosHeader::new()
        .with("callerid", &shared.caller_id)
        .with("md5sum", STRING_MD5)
        .with("type", STRING_TYPE)
        .with("topic", topic)
        .with("latching", "0")
        .write_to(&mut stream)
        .await?;
    for payload in &payloads {
        tcpros::write_frame(&mut stream, payload).await?;
    }
    // Hold the link open like a live publisher until the subscriber leaves.
    let mut sink = [0u8; 256];
    while stream.read(&mut sink).await? > 0 {}
    Ok(())
}

/// Calls the echo service `service` as an external or internal client.
pub async fn call_service(
    actor: &Actor,
    master_uri: &str,
    caller_id: &str,
    service: &str,
    request: &[u8],
) -> Result<(String, Vec<u8>), NodeError> {
    let lookup = MethodCall::new("lookupService", vec![caller_id.into(), service.into()]);
    let uri = match actor.rpc(master_uri, &lookup).await {
        Ok(MethodResponse::Success(v)) => RosResult::from_value(&v)
            .filter(RosResult::is_success)
            .and_then(|r| r.value.as_str().map(str::to_owned)),
        _ => None,
    }
    .ok_or_else(|| NodeError::Service(format!("lookupService {service} failed")))?;
    let target = Endpoint::from_uri(&uri, "rosrpc")
        .ok_or_else(|| NodeError::Service(format!("bad service uri {uri}")))?;

    let mut stream = actor.connect_tcpros(&target.host, target.port).await?;
    TcpRosHeader::new()
        .with("callerid", caller_id)
        .with("service", service)
        .with("md5sum", ECHO_MD5)
        .with("persistent", "0")
        .write_to(&mut stream)
        .await?;
    let header = TcpRosHeader::read_from(&mut stream).await?;
    if let Some(error) = header.get("error") {
        return Err(NodeError::Service(error.to_owned()));
    }
    tcpros::write_frame(&mut stream, request).await?;
    let ok = stream.read_u8().await?;
    let response = tcpros::read_frame(&mut stream).await?;
    if ok != 1 {
        return Err(NodeError::Service(
            String::from_utf8_lossy(&response).into_owned(),
        ));
    }
    Ok((uri, response))
}
