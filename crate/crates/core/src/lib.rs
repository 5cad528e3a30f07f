//! A transparent application-layer proxy for ROS 1.
//!
//! Nodes inside an isolated network segment (typically a container bridge
//! network) use the proxy as their ROS master. The proxy forwards their
//! Master API traffic to the real master while rewriting every endpoint they
//! report, so that peers outside the segment only ever see addresses on the
//! advertised host, drawn from one deterministic, forwardable port range:
//!
//! * [`master`] intercepts `register*`/`unregister*` calls and replaces
//!   `caller_api` (and `service_api`) with proxy endpoints;
//! * [`slave`] serves each node's slave API on its own leased port and
//!   rewrites TCPROS endpoints in `requestTopic` answers;
//! * [`relay`] forwards TCPROS connections byte for byte;
//! * [`registry`] tracks each node's resources and purges them when the node
//!   stops answering or loses all registrations;
//! * [`ports`] hands out ports lowest-first from the configured range.

pub mod config;
pub mod endpoint;
pub mod master;
pub mod ports;
pub mod proxy;
pub mod registry;
pub mod relay;
pub mod slave;
pub mod transport;
pub mod xmlrpc;

pub use config::{load_config, ProxyConfig};
pub use endpoint::Endpoint;
pub use master::MasterGateway;
pub use ports::{LeasePurpose, PortAllocator, PortError, PortLease, PortRange};
pub use proxy::{run, Proxy};
pub use registry::{
    NodeRecord, PingOutcome, PingPolicy, RegistrationKind, Registry, RegistryError,
};
pub use relay::{open_relay, RelayHandle};
pub use slave::ProtocolParams;
pub use xmlrpc::{MethodCall, MethodResponse, RosResult, Value};
