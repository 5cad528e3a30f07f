//! XML-RPC over HTTP/1.1: a listener whose lifetime (including in-flight
//! connections) is owned by a handle, and a client that opens one connection
//! per call.

use std::convert::Infallible;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use http::{header, Method, Request, Response, StatusCode, Uri};
use http_body_util::{BodyExt, Full, Limited};
use hyper::body::Incoming;
use hyper::service::service_fn;
use hyper_util::rt::TokioIo;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::{JoinHandle, JoinSet};

use crate::xmlrpc::{self, CodecError, CodecLimits, MethodCall, MethodResponse};

pub type BoxFuture<T> = Pin<Box<dyn Future<Output = T> + Send>>;

/// A decoded call together with where it arrived from.
#[derive(Debug, Clone)]
pub struct RpcRequest {
    /// Request path, e.g. `/` or `/node/%2Ftalker`.
    pub path: String,
    pub peer: SocketAddr,
    pub call: MethodCall,
}

pub trait RpcHandler: Send + Sync + 'static {
    fn handle(&self, request: RpcRequest) -> BoxFuture<MethodResponse>;
}

impl<F, Fut> RpcHandler for F
where
    F: Fn(RpcRequest) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = MethodResponse> + Send + 'static,
{
    fn handle(&self, request: RpcRequest) -> BoxFuture<MethodResponse> {
        Box::pin(self(request))
    }
}

/// A running XML-RPC listener.
///
/// Closing the server drops the listening socket and aborts every connection
/// task, so the port refuses new connections and in-flight exchanges are cut.
pub struct RpcServer {
    local_addr: SocketAddr,
    task: Mutex<Option<JoinHandle<()>>>,
}

impl RpcServer {
    pub async fn bind(
        addr: SocketAddr,
        handler: Arc<dyn RpcHandler>,
        limits: CodecLimits,
    ) -> io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        Self::from_listener(listener, handler, limits)
    }

    pub fn from_listener(
        listener: TcpListener,
        handler: Arc<dyn RpcHandler>,
        limits: CodecLimits,
    ) -> io::Result<Self> {
        let local_addr = listener.local_addr()?;
        let task = tokio::spawn(accept_loop(listener, handler, limits));
        Ok(Self {
            local_addr,
            task: Mutex::new(Some(task)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn is_open(&self) -> bool {
        self.task.lock().expect("server lock poisoned").is_some()
    }

    /// Stops the listener. Idempotent; returns once the socket is closed.
    pub async fn close(&self) {
        let task = self.task.lock().expect("server lock poisoned").take();
        if let Some(task) = task {
            task.abort();
            let _ = task.await;
        }
    }
}

impl Drop for RpcServer {
    fn drop(&mut self) {
        if let Some(task) = self.task.get_mut().ok().and_then(Option::take) {
            task.abort();
        }
    }
}

async fn accept_loop(listener: TcpListener, handler: Arc<dyn RpcHandler>, limits: CodecLimits) {
    let mut connections = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(x) => x,
                    Err(e) => {
                        tracing::warn!(error = %e, "accept failed");
                        continue;
                    }
                };
                let handler = handler.clone();
                connections.spawn(async move {
                    let service = service_fn(move |req| {
                        let handler = handler.clone();
                        async move { Ok::<_, Infallible>(serve_request(req, peer, handler, limits).await) }
                    });
                    if let Err(e) = hyper::server::conn::http1::Builder::new()
                        .serve_connection(TokioIo::new(stream), service)
                        .await
                    {
                        tracing::debug!(%peer, error = %e, "connection ended with error");
                    }
                });
            }
            Some(_) = connections.join_next() => {}
        }
    }
}

fn text_response(status: StatusCode, body: String) -> Response<Full<Bytes>> {
    Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, "text/plain")
        .body(Full::new(Bytes::from(body)))
        .expect("static response parts are valid")
}

async fn serve_request(
    req: Request<Incoming>,
    peer: SocketAddr,
    handler: Arc<dyn RpcHandler>,
    limits: CodecLimits,
) -> Response<Full<Bytes>> {
    if req.method() != Method::POST {
        return text_response(
            StatusCode::METHOD_NOT_ALLOWED,
            "XML-RPC requires POST\n".into(),
        );
    }
    let path = req.uri().path().to_owned();
    let body = match Limited::new(req.into_body(), limits.max_size)
        .collect()
        .await
    {
        Ok(collected) => collected.to_bytes(),
        Err(e) => {
            return text_response(StatusCode::PAYLOAD_TOO_LARGE, format!("{e}\n"));
        }
    };
    let call = match xmlrpc::parse_call_with(&body, &limits) {
        Ok(call) => call,
        Err(e) => {
            tracing::debug!(%peer, error = %e, "rejecting malformed request");
            return text_response(StatusCode::BAD_REQUEST, format!("{e}\n"));
        }
    };
    let response = handler.handle(RpcRequest { path, peer, call }).await;
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/xml")
        .body(Full::new(Bytes::from(xmlrpc::encode_response(&response))))
        .expect("static response parts are valid")
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid XML-RPC URI {0:?}")]
    InvalidUri(String),
    #[error("cannot connect to {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("request to {0} timed out")]
    Timeout(String),
    #[error("HTTP exchange failed: {0}")]
    Http(String),
    #[error("unexpected HTTP status {0}")]
    Status(u16),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl ClientError {
    pub fn is_connection_refused(&self) -> bool {
        matches!(self, ClientError::Connect { source, .. } if source.kind() == io::ErrorKind::ConnectionRefused)
    }
}

/// Splits an `http://host:port/path` URI into its socket target and path.
pub fn split_http_uri(uri: &str) -> Result<(String, u16, String), ClientError> {
    let parsed: Uri = uri
        .parse()
        .map_err(|_| ClientError::InvalidUri(uri.to_owned()))?;
    if parsed.scheme_str() != Some("http") {
        return Err(ClientError::InvalidUri(uri.to_owned()));
    }
    let host = parsed
        .host()
        .ok_or_else(|| ClientError::InvalidUri(uri.to_owned()))?
        .trim_start_matches('[')
        .trim_end_matches(']')
        .to_owned();
    let port = parsed.port_u16().unwrap_or(80);
    let path = parsed
        .path_and_query()
        .map(|p| p.as_str().to_owned())
        .filter(|p| !p.is_empty())
        .unwrap_or_else(|| "/".to_owned());
    Ok((host, port, path))
}

/// Performs one XML-RPC call over a fresh connection.
pub async fn call(
    uri: &str,
    call: &MethodCall,
    timeout: Duration,
) -> Result<MethodResponse, ClientError> {
    call_with(uri, call, timeout, &CodecLimits::default()).await
}

pub async fn call_with(
    uri: &str,
    call: &MethodCall,
    timeout: Duration,
    limits: &CodecLimits,
) -> Result<MethodResponse, ClientError> {
    match tokio::time::timeout(timeout, exchange(uri, call, limits)).await {
        Ok(result) => result,
        Err(_) => Err(ClientError::Timeout(uri.to_owned())),
    }
}

async fn exchange(
    uri: &str,
    call: &MethodCall,
    limits: &CodecLimits,
) -> Result<MethodResponse, ClientError> {
    let (host, port, path) = split_http_uri(uri)?;
    let stream = TcpStream::connect((host.as_str(), port))
        .await
        .map_err(|source| ClientError::Connect {
            addr: format!("{host}:{port}"),
            source,
        })?;
    let _ = stream.set_nodelay(true);
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
        .await
        .map_err(|e| ClientError::Http(e.to_string()))?;
    let driver = tokio::spawn(async move {
        let _ = conn.await;
    });

    let host_header = if host.contains(':') {
        format!("[{host}]:{port}")
    } else {
        format!("{host}:{port}")
    };
    let request = Request::builder()
        .method(Method::POST)
        .uri(path)
        .header(header::HOST, host_header)
        .header(header::CONTENT_TYPE, "text/xml")
        .header(header::USER_AGENT, "rosproxy")
        .body(Full::new(Bytes::from(xmlrpc::encode_call(call))))
        .map_err(|e| ClientError::Http(e.to_string()))?;

    let result = async {
        let response = sender
            .send_request(request)
            .await
            .map_err(|e| ClientError::Http(e.to_string()))?;
        if response.status() != StatusCode::OK {
            return Err(ClientError::Status(response.status().as_u16()));
        }
        let body = Limited::new(response.into_body(), limits.max_size)
            .collect()
            .await
            .map_err(|e| ClientError::Http(e.to_string()))?
            .to_bytes();
        Ok(xmlrpc::parse_response_with(&body, limits)?)
    }
    .await;
    driver.abort();
    result
}
