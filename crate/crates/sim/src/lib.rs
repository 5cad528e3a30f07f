//! An in-process ROS world for exercising the proxy end to end: a mini
//! master, talker/listener/service nodes speaking XML-RPC and TCPROS, a
//! record of every connection actors open, and scripted scenarios that run
//! with or without the proxy in between.

pub mod dial;
pub mod master;
pub mod net;
pub mod node;
pub mod probe;
pub mod scenario;
pub mod tcpros;

pub use dial::{Dial, DialLog, DialPurpose, Side};
pub use master::{MiniMaster, MiniMasterState};
pub use net::{Actor, Segments};
pub use node::{MiniNode, NodeEnv};
pub use scenario::{Mode, Scenario, ScenarioOptions, ScenarioReport};
