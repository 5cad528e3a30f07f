//! Per-node slave API gateway.
//!
//! Calls arriving on a node's gateway port are forwarded to the node's real
//! slave API. `requestTopic` answers naming a TCPROS endpoint are rewritten to
//! point at a relay on the advertised host; everything else passes through.

use std::sync::Arc;

use crate::config::ProxyConfig;
use crate::endpoint::Endpoint;
use crate::ports::PortLease;
use crate::registry::{NodeRecord, Registry};
use crate::transport;
use crate::xmlrpc::{MethodCall, MethodResponse, RosResult, Value};

/// Fault code for calls to a node the proxy no longer knows.
pub const FAULT_UNKNOWN_NODE: i32 = -32001;
/// Fault code for calls the node itself did not answer.
pub const FAULT_NODE_UNREACHABLE: i32 = -32300;

pub const TCPROS: &str = "TCPROS";

/// The `[protocol, host, port, ...]` array a publisher returns from
/// `requestTopic`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolParams {
    pub protocol_name: String,
    pub host: String,
    pub port: u16,
}

impl ProtocolParams {
    pub fn tcpros(host: impl Into<String>, port: u16) -> Self {
        Self {
            protocol_name: TCPROS.to_owned(),
            host: host.into(),
            port,
        }
    }

    /// Decodes a TCPROS-shaped triple. Other protocols (or malformed
    /// TCPROS tuples) yield `None`.
    pub fn from_value(value: &Value) -> Option<Self> {
        match value.as_array()? {
            [Value::String(name), Value::String(host), Value::Int(port), ..] if name == TCPROS => {
                Some(Self {
                    protocol_name: name.clone(),
                    host: host.clone(),
                    port: u16::try_from(*port).ok().filter(|p| *p != 0)?,
                })
            }
            _ => None,
        }
    }

    pub fn to_value(&self) -> Value {
        Value::Array(vec![
            self.protocol_name.as_str().into(),
            self.host.as_str().into(),
            Value::Int(i32::from(self.port)),
        ])
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::new(self.host.clone(), self.port)
    }
}

/// `http://<advertised_host>:<advertised port>/` for a gateway lease.
pub fn advertised_uri(config: &ProxyConfig, gateway_lease: &PortLease) -> String {
    Endpoint::new(
        config.advertised_host.clone(),
        config.advertised_port(gateway_lease.port),
    )
    .http_uri()
}

/// The advertised address of a relay lease.
pub fn advertised_endpoint(config: &ProxyConfig, relay_lease: &PortLease) -> Endpoint {
    Endpoint::new(
        config.advertised_host.clone(),
        config.advertised_port(relay_lease.port),
    )
}

pub async fn handle_slave_call(
    registry: &Arc<Registry>,
    caller_id: &str,
    call: MethodCall,
) -> MethodResponse {
    let Some(node) = registry.node(caller_id).await else {
        return MethodResponse::fault(FAULT_UNKNOWN_NODE, format!("unknown node {caller_id}"));
    };
    let timeout = registry.config().request_timeout;
    let response = match transport::call_with(
        &node.real_slave_uri,
        &call,
        timeout,
        &registry.config().limits,
    )
    .await
    {
        Ok(r) => r,
        Err(e) => {
            tracing::debug!(caller_id, method = %call.method_name, error = %e, "node unreachable");
            return MethodResponse::fault(
                FAULT_NODE_UNREACHABLE,
                format!("node {caller_id} unreachable: {e}"),
            );
        }
    };
    if call.method_name == "requestTopic" {
        rewrite_request_topic(registry, &node, response).await
    } else {
        response
    }
}

/// Replaces host and port of a successful TCPROS `requestTopic` answer with
/// the advertised relay endpoint, leaving every other element untouched.
async fn rewrite_request_topic(
    registry: &Arc<Registry>,
    node: &NodeRecord,
    response: MethodResponse,
) -> MethodResponse {
    let MethodResponse::Success(mut value) = response else {
        return response;
    };
    let params = match RosResult::from_value(&value) {
        Some(r) if r.is_success() => ProtocolParams::from_value(&r.value),
        _ => None,
    };
    let Some(params) = params else {
        return MethodResponse::Success(value);
    };

    let lease = match registry
        .ensure_relay(&node.caller_id, params.endpoint())
        .await
    {
        Ok(lease) => lease,
        Err(e) => {
            tracing::warn!(caller_id = %node.caller_id, error = %e, "cannot relay topic connection");
            return RosResult::error(format!("rosproxy cannot relay {}: {e}", params.endpoint()))
                .into();
        }
    };
    let advertised = advertised_endpoint(registry.config(), &lease);
    if let Some(protocol) = value
        .as_array_mut()
        .and_then(|triple| triple.get_mut(2))
        .and_then(Value::as_array_mut)
    {
        protocol[1] = Value::String(advertised.host);
        protocol[2] = Value::Int(i32::from(advertised.port));
    }
    MethodResponse::Success(value)
}
