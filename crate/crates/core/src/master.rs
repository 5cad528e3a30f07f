//! The master gateway: the address internal nodes use as their ROS master.
//!
//! Every call is forwarded to the real master. The five Master API methods
//! that report a node's slave API (`caller_api`) are rewritten on the way so
//! the master only ever learns advertised addresses; `registerService` also
//! has its TCPROS `service_api` replaced with a relay. Responses are returned
//! unmodified: publisher lists handed back to internal nodes name external or
//! already advertised endpoints, which internal nodes can dial directly.

use std::net::SocketAddr;
use std::sync::Arc;

use percent_encoding::percent_decode_str;
use thiserror::Error;

use crate::endpoint::Endpoint;
use crate::registry::{NodeRecord, RegistrationKind, Registry, RegistryError};
use crate::slave;
use crate::transport::{self, RpcHandler, RpcRequest};
use crate::xmlrpc::{MethodCall, MethodResponse, RosResult, Value};

/// Fault code returned when the upstream master cannot be reached.
pub const FAULT_UPSTREAM_UNREACHABLE: i32 = -32300;

/// Path prefix of the diagnostic per-node route on the main port.
pub const NODE_ROUTE_PREFIX: &str = "/node/";

/// Where a Master API method carries the addresses the proxy must rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewriteRule {
    pub method: &'static str,
    pub arity: usize,
    pub caller_api_param_index: Option<usize>,
    pub service_api_param_index: Option<usize>,
    pub kind: RegistrationKind,
    pub registers: bool,
}

pub const REWRITE_RULES: [RewriteRule; 5] = [
    // registerService(caller_id, service, service_api, caller_api)
    RewriteRule {
        method: "registerService",
        arity: 4,
        caller_api_param_index: Some(3),
        service_api_param_index: Some(2),
        kind: RegistrationKind::Service,
        registers: true,
    },
    // registerSubscriber(caller_id, topic, topic_type, caller_api)
    RewriteRule {
        method: "registerSubscriber",
        arity: 4,
        caller_api_param_index: Some(3),
        service_api_param_index: None,
        kind: RegistrationKind::Subscriber,
        registers: true,
    },
    // unregisterSubscriber(caller_id, topic, caller_api)
    RewriteRule {
        method: "unregisterSubscriber",
        arity: 3,
        caller_api_param_index: Some(2),
        service_api_param_index: None,
        kind: RegistrationKind::Subscriber,
        registers: false,
    },
    // registerPublisher(caller_id, topic, topic_type, caller_api)
    RewriteRule {
        method: "registerPublisher",
        arity: 4,
        caller_api_param_index: Some(3),
        service_api_param_index: None,
        kind: RegistrationKind::Publisher,
        registers: true,
    },
    // unregisterPublisher(caller_id, topic, caller_api)
    RewriteRule {
        method: "unregisterPublisher",
        arity: 3,
        caller_api_param_index: Some(2),
        service_api_param_index: None,
        kind: RegistrationKind::Publisher,
        registers: false,
    },
];

pub fn rule_for(method: &str) -> Option<&'static RewriteRule> {
    REWRITE_RULES.iter().find(|r| r.method == method)
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("bad signature for {method}: {reason}")]
    BadSignature { method: String, reason: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

fn bad_signature(call: &MethodCall, reason: impl Into<String>) -> GatewayError {
    GatewayError::BadSignature {
        method: call.method_name.clone(),
        reason: reason.into(),
    }
}

/// Checks parameter count and that every parameter is a string, as all
/// five intercepted methods take only strings.
pub fn check_signature(call: &MethodCall, rule: &RewriteRule) -> Result<(), GatewayError> {
    if call.params.len() != rule.arity {
        return Err(bad_signature(
            call,
            format!(
                "expected {} parameters, got {}",
                rule.arity,
                call.params.len()
            ),
        ));
    }
    if let Some((i, v)) = call
        .params
        .iter()
        .enumerate()
        .find(|(_, v)| v.as_str().is_none())
    {
        return Err(bad_signature(
            call,
            format!("parameter {i} must be a string, got {}", v.kind()),
        ));
    }
    Ok(())
}

/// Replaces the `caller_api` parameter with `advertised_uri`.
pub fn rewrite_caller_api(
    call: &MethodCall,
    advertised_uri: &str,
) -> Result<MethodCall, GatewayError> {
    let rule = rule_for(&call.method_name)
        .ok_or_else(|| bad_signature(call, "method is not intercepted"))?;
    check_signature(call, rule)?;
    let mut out = call.clone();
    if let Some(i) = rule.caller_api_param_index {
        out.params[i] = Value::String(advertised_uri.to_owned());
    }
    Ok(out)
}

pub struct MasterGateway {
    registry: Arc<Registry>,
}

impl MasterGateway {
    pub fn new(registry: Arc<Registry>) -> Self {
        Self { registry }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    /// Handles one Master API call from an internal node.
    pub async fn handle_master_call(&self, call: MethodCall, peer: SocketAddr) -> MethodResponse {
        let Some(rule) = rule_for(&call.method_name) else {
            if call.method_name == "unregisterService" {
                return self.handle_unregister_service(call).await;
            }
            return self.forward(&call).await;
        };
        tracing::debug!(%peer, method = rule.method, caller_id = call.caller_id(), "intercepted");
        match self.intercept(call, rule).await {
            Ok(response) => response,
            Err(e) => {
                tracing::warn!(%peer, error = %e, "registration rejected");
                RosResult::error(format!("rosproxy: {e}")).into()
            }
        }
    }

    async fn intercept(
        &self,
        call: MethodCall,
        rule: &RewriteRule,
    ) -> Result<MethodResponse, GatewayError> {
        check_signature(&call, rule)?;
        let caller_id = call.params[0].as_str().unwrap_or_default().to_owned();
        let name = call.params[1].as_str().unwrap_or_default().to_owned();
        let caller_api = rule
            .caller_api_param_index
            .and_then(|i| call.params[i].as_str())
            .unwrap_or_default()
            .to_owned();

        if rule.registers {
            let node = self.registry.ensure_node(&caller_id, &caller_api).await?;
            self.registry
                .add_registration(&caller_id, rule.kind, &name)
                .await?;
            let mut rewritten = rewrite_caller_api(&call, &node.advertised_uri)?;
            if rule.service_api_param_index.is_some() {
                rewritten = self.rewrite_service_api(&rewritten, &node).await?;
            }
            return Ok(self.forward(&rewritten).await);
        }

        let Some(node) = self.registry.node(&caller_id).await else {
            // Never registered through this proxy, so there is nothing to map.
            return Ok(self.forward(&call).await);
        };
        let rewritten = rewrite_caller_api(&call, &node.advertised_uri)?;
        let response = self.forward(&rewritten).await;
        if let Err(e) = self
            .registry
            .remove_registration(&caller_id, rule.kind, &name)
            .await
        {
            tracing::debug!(caller_id, error = %e, "node gone before unregistration completed");
        }
        Ok(response)
    }

    /// Points `service_api` at a relay to the node's service endpoint,
    /// reusing the relay if one already forwards there.
    pub async fn rewrite_service_api(
        &self,
        call: &MethodCall,
        node: &NodeRecord,
    ) -> Result<MethodCall, GatewayError> {
        if call.method_name != "registerService" {
            return Err(bad_signature(
                call,
                "service_api rewriting applies to registerService only",
            ));
        }
        let rule = rule_for(&call.method_name).expect("registerService has a rule");
        check_signature(call, rule)?;
        let index = rule
            .service_api_param_index
            .expect("registerService carries service_api");
        let service_api = call.params[index].as_str().unwrap_or_default();
        let target = Endpoint::from_uri(service_api, "rosrpc").ok_or_else(|| {
            bad_signature(
                call,
                format!("service_api {service_api:?} is not rosrpc://host:port"),
            )
        })?;
        let lease = self.registry.ensure_relay(&node.caller_id, target).await?;
        let mut out = call.clone();
        out.params[index] =
            Value::String(slave::advertised_endpoint(self.registry.config(), &lease).rosrpc_uri());
        Ok(out)
    }

    /// `unregisterService` carries the service_api the node knows, which the
    /// master only accepts in its advertised form.
    async fn handle_unregister_service(&self, call: MethodCall) -> MethodResponse {
        let (Some(caller_id), Some(service), Some(service_api)) = (
            call.params.first().and_then(Value::as_str),
            call.params.get(1).and_then(Value::as_str),
            call.params.get(2).and_then(Value::as_str),
        ) else {
            return self.forward(&call).await;
        };
        let relay = match Endpoint::from_uri(service_api, "rosrpc") {
            Some(target) => self.registry.relay_for(caller_id, &target).await,
            None => None,
        };
        let mut rewritten = call.clone();
        if let Some(lease) = relay {
            rewritten.params[2] = Value::String(
                slave::advertised_endpoint(self.registry.config(), &lease).rosrpc_uri(),
            );
        }
        let response = self.forward(&rewritten).await;
        let _ = self
            .registry
            .remove_registration(caller_id, RegistrationKind::Service, service)
            .await;
        response
    }

    async fn forward(&self, call: &MethodCall) -> MethodResponse {
        let config = self.registry.config();
        match transport::call_with(
            &config.upstream_master_uri,
            call,
            config.request_timeout,
            &config.limits,
        )
        .await
        {
            Ok(response) => response,
            Err(e) => {
                tracing::warn!(method = %call.method_name, error = %e, "upstream master unreachable");
                MethodResponse::fault(
                    FAULT_UPSTREAM_UNREACHABLE,
                    format!("upstream master unreachable: {e}"),
                )
            }
        }
    }
}

/// Request handler for the main port: the Master API on any path, plus the
/// `/node/<percent-encoded caller_id>` slave API alias.
pub struct MainPortHandler {
    gateway: Arc<MasterGateway>,
}

impl MainPortHandler {
    pub fn new(gateway: Arc<MasterGateway>) -> Self {
        Self { gateway }
    }
}

impl RpcHandler for MainPortHandler {
    fn handle(&self, request: RpcRequest) -> transport::BoxFuture<MethodResponse> {
        let gateway = self.gateway.clone();
        Box::pin(async move {
            if let Some(encoded) = request.path.strip_prefix(NODE_ROUTE_PREFIX) {
                let caller_id = percent_decode_str(encoded.trim_end_matches('/'))
                    .decode_utf8_lossy()
                    .into_owned();
                return slave::handle_slave_call(gateway.registry(), &caller_id, request.call)
                    .await;
            }
            gateway.handle_master_call(request.call, request.peer).await
        })
    }
}

/// `/node/<percent-encoded caller_id>` for a node.
pub fn node_route(caller_id: &str) -> String {
    use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
    format!(
        "{NODE_ROUTE_PREFIX}{}",
        utf8_percent_encode(caller_id, NON_ALPHANUMERIC)
    )
}
