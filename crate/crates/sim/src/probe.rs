//! `rosnode cleanup`: ping every registered node and unregister the ones
//! whose slave API refuses connections.

use rosproxy::xmlrpc::{MethodCall, MethodResponse, RosResult, Value};

use crate::net::Actor;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CleanupReport {
    pub pinged: Vec<String>,
    pub removed: Vec<String>,
}

async fn master_value(actor: &Actor, master_uri: &str, call: MethodCall) -> Option<Value> {
    match actor.rpc(master_uri, &call).await {
        Ok(MethodResponse::Success(v)) => RosResult::from_value(&v)
            .filter(RosResult::is_success)
            .map(|r| r.value),
        _ => None,
    }
}

fn entries(group: &Value) -> Vec<(String, Vec<String>)> {
    group
        .as_array()
        .unwrap_or_default()
        .iter()
        .filter_map(|e| match e.as_array()? {
            [name, ids] => Some((
                name.as_str()?.to_owned(),
                ids.as_array()?
                    .iter()
                    .filter_map(|v| v.as_str().map(str::to_owned))
                    .collect(),
            )),
            _ => None,
        })
        .collect()
}

/// Removes every node whose slave API cannot be reached at all. A node that
/// answers, even with a fault, is left alone.
pub async fn cleanup(actor: &Actor, master_uri: &str) -> CleanupReport {
    let mut report = CleanupReport::default();
    let state = master_value(
        actor,
        master_uri,
        MethodCall::new("getSystemState", vec![actor.name.as_str().into()]),
    )
    .await;
    let Some(state) = state else {
        return report;
    };
    let groups: Vec<Vec<(String, Vec<String>)>> = state
        .as_array()
        .unwrap_or_default()
        .iter()
        .map(entries)
        .collect();
    let [pubs, subs, srvs] = groups.as_slice() else {
        return report;
    };

    let mut nodes: Vec<String> = pubs
        .iter()
        .chain(subs)
        .chain(srvs)
        .flat_map(|(_, ids)| ids.clone())
        .collect();
    nodes.sort();
    nodes.dedup();

    for node in nodes {
        let lookup = MethodCall::new(
            "lookupNode",
            vec![actor.name.as_str().into(), node.as_str().into()],
        );
        let Some(api) = master_value(actor, master_uri, lookup)
            .await
            .and_then(|v| v.as_str().map(str::to_owned))
        else {
            continue;
        };
        report.pinged.push(node.clone());
        let ping = MethodCall::new("getPid", vec![actor.name.as_str().into()]);
        match actor.rpc(&api, &ping).await {
            Err(e) if e.is_connection_refused() => {}
            _ => continue,
        }
        tracing::info!(node, api, "unregistering stale node");
        // Unregistration is issued under the dead node's own caller id.
        let as_node = |method: &str, name: &str, uri: &str| {
            MethodCall::new(method, vec![node.as_str().into(), name.into(), uri.into()])
        };
        for (topic, ids) in pubs {
            if ids.contains(&node) {
                master_value(
                    actor,
                    master_uri,
                    as_node("unregisterPublisher", topic, &api),
                )
                .await;
            }
        }
        for (topic, ids) in subs {
            if ids.contains(&node) {
                master_value(
                    actor,
                    master_uri,
                    as_node("unregisterSubscriber", topic, &api),
                )
                .await;
            }
        }
        for (service, ids) in srvs {
            if !ids.contains(&node) {
                continue;
            }
            let lookup = MethodCall::new(
                "lookupService",
                vec![actor.name.as_str().into(), service.as_str().into()],
            );
            if let Some(service_api) = master_value(actor, master_uri, lookup)
                .await
                .and_then(|v| v.as_str().map(str::to_owned))
            {
                master_value(
                    actor,
                    master_uri,
                    as_node("unregisterService", service, &service_api),
                )
                .await;
            }
        }
        report.removed.push(node);
    }
    report
}
