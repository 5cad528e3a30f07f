//! A small ROS master: registration bookkeeping, lookups and
//! `publisherUpdate` callbacks. No parameter server.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use rosproxy::transport::{RpcRequest, RpcServer};
use rosproxy::xmlrpc::{CodecLimits, MethodCall, MethodResponse, RosResult, Value};

use crate::net::Actor;

pub const MASTER_CALLER_ID: &str = "/master";

/// `(caller_id, caller_api)`
pub type Registrant = (String, String);

/// `(topic, subscriber APIs to notify, current publisher APIs)`
pub type PublisherUpdate = (String, Vec<String>, Vec<String>);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServiceEntry {
    pub caller_id: String,
    pub caller_api: String,
    pub service_api: String,
}

/// Exactly what registration calls conveyed, nothing derived.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MiniMasterState {
    pub publishers: BTreeMap<String, BTreeSet<Registrant>>,
    pub subscribers: BTreeMap<String, BTreeSet<Registrant>>,
    pub services: BTreeMap<String, ServiceEntry>,
}

impl MiniMasterState {
    /// Every URI the master holds for `caller_id`.
    pub fn uris_of(&self, caller_id: &str) -> Vec<String> {
        let mut out = Vec::new();
        for set in self.publishers.values().chain(self.subscribers.values()) {
            out.extend(
                set.iter()
                    .filter(|(id, _)| id == caller_id)
                    .map(|(_, api)| api.clone()),
            );
        }
        for s in self.services.values().filter(|s| s.caller_id == caller_id) {
            out.push(s.caller_api.clone());
            out.push(s.service_api.clone());
        }
        out
    }

    pub fn caller_ids(&self) -> BTreeSet<String> {
        let mut ids: BTreeSet<String> = self
            .publishers
            .values()
            .chain(self.subscribers.values())
            .flatten()
            .map(|(id, _)| id.clone())
            .collect();
        ids.extend(self.services.values().map(|s| s.caller_id.clone()));
        ids
    }

    pub fn node_api(&self, caller_id: &str) -> Option<String> {
        self.publishers
            .values()
            .chain(self.subscribers.values())
            .flatten()
            .find(|(id, _)| id == caller_id)
            .map(|(_, api)| api.clone())
            .or_else(|| {
                self.services
                    .values()
                    .find(|s| s.caller_id == caller_id)
                    .map(|s| s.caller_api.clone())
            })
    }

    fn publisher_apis(&self, topic: &str) -> Vec<String> {
        self.publishers
            .get(topic)
            .map(|set| set.iter().map(|(_, api)| api.clone()).collect())
            .unwrap_or_default()
    }

    fn subscriber_apis(&self, topic: &str) -> Vec<String> {
        self.subscribers
            .get(topic)
            .map(|set| set.iter().map(|(_, api)| api.clone()).collect())
            .unwrap_or_default()
    }

    /// Applies one call. Returns the response and, for publisher changes,
    /// the subscribers to notify with the new publisher list.
    pub fn apply(&mut self, call: &MethodCall) -> (MethodResponse, Option<PublisherUpdate>) {
        let p: Vec<&str> = call
            .params
            .iter()
            .map(|v| v.as_str().unwrap_or(""))
            .collect();
        let arg = |i: usize| p.get(i).copied().unwrap_or("").to_owned();
        let strings = |v: Vec<String>| Value::Array(v.into_iter().map(Value::String).collect());
        let arity_ok = |n: usize| call.params.len() == n && p.iter().take(n).all(|s| !s.is_empty());

        let ok = |msg: &str, v: Value| -> MethodResponse { RosResult::success(msg, v).into() };
        match call.method_name.as_str() {
            "registerPublisher" if arity_ok(4) => {
                let topic = arg(1);
                self.publishers
                    .entry(topic.clone())
                    .or_default()
                    .insert((arg(0), arg(3)));
                let subs = self.subscriber_apis(&topic);
                let update = (topic.clone(), subs.clone(), self.publisher_apis(&topic));
                (ok("registered publisher", strings(subs)), Some(update))
            }
            "unregisterPublisher" if arity_ok(3) => {
                let topic = arg(1);
                let removed = remove(&mut self.publishers, &topic, &(arg(0), arg(2)));
                let update = removed.then(|| {
                    (
                        topic.clone(),
                        self.subscriber_apis(&topic),
                        self.publisher_apis(&topic),
                    )
                });
                (
                    ok("unregistered publisher", Value::Int(i32::from(removed))),
                    update,
                )
            }
            "registerSubscriber" if arity_ok(4) => {
                let topic = arg(1);
                self.subscribers
                    .entry(topic.clone())
                    .or_default()
                    .insert((arg(0), arg(3)));
                (ok("subscribed", strings(self.publisher_apis(&topic))), None)
            }
            "unregisterSubscriber" if arity_ok(3) => {
                let removed = remove(&mut self.subscribers, &arg(1), &(arg(0), arg(2)));
                (ok("unsubscribed", Value::Int(i32::from(removed))), None)
            }
            "registerService" if arity_ok(4) => {
                self.services.insert(
                    arg(1),
                    ServiceEntry {
                        caller_id: arg(0),
                        caller_api: arg(3),
                        service_api: arg(2),
                    },
                );
                (ok("registered service", Value::Int(1)), None)
            }
            "unregisterService" if arity_ok(3) => {
                let matches = self
                    .services
                    .get(&arg(1))
                    .is_some_and(|s| s.caller_id == arg(0) && s.service_api == arg(2));
                if matches {
                    self.services.remove(&arg(1));
                }
                (
                    ok("unregistered service", Value::Int(i32::from(matches))),
                    None,
                )
            }
            "lookupNode" if arity_ok(2) => match self.node_api(&arg(1)) {
                Some(api) => (ok("node api", Value::String(api)), None),
                None => (
                    RosResult::error(format!("unknown node [{}]", arg(1))).into(),
                    None,
                ),
            },
            "lookupService" if arity_ok(2) => match self.services.get(&arg(1)) {
                Some(s) => (
                    ok("service api", Value::String(s.service_api.clone())),
                    None,
                ),
                None => (
                    RosResult::error(format!("no provider for [{}]", arg(1))).into(),
                    None,
                ),
            },
            "getSystemState" if arity_ok(1) => (ok("system state", self.system_state()), None),
            "getPid" if arity_ok(1) => (ok("pid", Value::Int(std::process::id() as i32)), None),
            "getUri" if arity_ok(1) => (ok("uri", Value::String(String::new())), None),
            other => (
                RosResult::error(format!(
                    "unsupported call {other} with {} params",
                    call.params.len()
                ))
                .into(),
                None,
            ),
        }
    }

    /// `[publishers, subscribers, services]`, each `[[name, [caller_id...]]...]`.
    pub fn system_state(&self) -> Value {
        let group = |m: &BTreeMap<String, BTreeSet<Registrant>>| {
            Value::Array(
                m.iter()
                    .filter(|(_, set)| !set.is_empty())
                    .map(|(name, set)| {
                        let ids: BTreeSet<&str> = set.iter().map(|(id, _)| id.as_str()).collect();
                        Value::Array(vec![
                            name.as_str().into(),
                            Value::Array(ids.into_iter().map(Into::into).collect()),
                        ])
                    })
                    .collect(),
            )
        };
        let services = Value::Array(
            self.services
                .iter()
                .map(|(name, s)| {
                    Value::Array(vec![
                        name.as_str().into(),
                        Value::Array(vec![s.caller_id.as_str().into()]),
                    ])
                })
                .collect(),
        );
        Value::Array(vec![
            group(&self.publishers),
            group(&self.subscribers),
            services,
        ])
    }
}

fn remove(map: &mut BTreeMap<String, BTreeSet<Registrant>>, name: &str, who: &Registrant) -> bool {
    let Some(set) = map.get_mut(name) else {
        return false;
    };
    let removed = set.remove(who);
    if set.is_empty() {
        map.remove(name);
    }
    removed
}

struct Shared {
    state: Mutex<MiniMasterState>,
    calls: Mutex<Vec<MethodCall>>,
    actor: Actor,
}

/// A running mini master.
pub struct MiniMaster {
    shared: Arc<Shared>,
    server: RpcServer,
}

impl MiniMaster {
    /// `actor` is the identity used for `publisherUpdate` callbacks.
    pub async fn serve(addr: SocketAddr, actor: Actor) -> io::Result<Self> {
        let shared = Arc::new(Shared {
            state: Mutex::new(MiniMasterState::default()),
            calls: Mutex::new(Vec::new()),
            actor,
        });
        let handler_state = shared.clone();
        let handler = move |req: RpcRequest| {
            let shared = handler_state.clone();
            async move { shared.handle(req.call).await }
        };
        let server = RpcServer::bind(addr, Arc::new(handler), CodecLimits::default()).await?;
        Ok(Self { shared, server })
    }

    pub fn uri(&self) -> String {
        format!("http://{}/", self.server.local_addr())
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn snapshot(&self) -> MiniMasterState {
        self.shared
            .state
            .lock()
            .expect("master state poisoned")
            .clone()
    }

    /// Every call received, in arrival order.
    pub fn calls(&self) -> Vec<MethodCall> {
        self.shared
            .calls
            .lock()
            .expect("master log poisoned")
            .clone()
    }

    pub async fn close(&self) {
        self.server.close().await;
    }
}

impl Shared {
    async fn handle(self: Arc<Self>, call: MethodCall) -> MethodResponse {
        self.calls
            .lock()
            .expect("master log poisoned")
            .push(call.clone());
        let (response, update) = self
            .state
            .lock()
            .expect("master state poisoned")
            .apply(&call);
        if let Some((topic, subscribers, publishers)) = update {
            for api in subscribers {
                let actor = self.actor.clone();
                let update = MethodCall::new(
                    "publisherUpdate",
                    vec![
                        MASTER_CALLER_ID.into(),
                        topic.as_str().into(),
                        Value::Array(publishers.iter().map(|p| p.as_str().into()).collect()),
                    ],
                );
                tokio::spawn(async move {
                    if let Err(e) = actor.rpc(&api, &update).await {
                        tracing::debug!(api, error = %e, "publisherUpdate failed");
                    }
                });
            }
        }
        response
    }
}
