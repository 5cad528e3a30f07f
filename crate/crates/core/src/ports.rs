//! Deterministic leasing of ports from the forwarded range.
//!
//! Every port the proxy advertises (per-node slave API gateways and TCPROS
//! relays) comes from one configured range so that it can be published from a
//! container to the host ahead of time. Allocation is lowest-free-first, so a
//! replayed sequence of leases and releases always yields the same ports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use thiserror::Error;

use crate::endpoint::Endpoint;

/// Lowest port a range may start at.
pub const MIN_PORT: u16 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PortRange {
    low: u16,
    high: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RangeError {
    #[error("invalid port range {0:?}, expected LOW-HIGH")]
    Syntax(String),
    #[error("port range {low}-{high} has low > high")]
    Inverted { low: u16, high: u16 },
    #[error("port range {low}-{high} starts below {MIN_PORT}")]
    Privileged { low: u16, high: u16 },
}

impl PortRange {
    pub fn new(low: u16, high: u16) -> Result<Self, RangeError> {
        if low > high {
            return Err(RangeError::Inverted { low, high });
        }
        if low < MIN_PORT {
            return Err(RangeError::Privileged { low, high });
        }
        Ok(Self { low, high })
    }

    pub fn low(&self) -> u16 {
        self.low
    }

    pub fn high(&self) -> u16 {
        self.high
    }

    pub fn len(&self) -> usize {
        usize::from(self.high - self.low) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, port: u16) -> bool {
        (self.low..=self.high).contains(&port)
    }
}

impl fmt::Display for PortRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.low, self.high)
    }
}

impl FromStr for PortRange {
    type Err = RangeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let syntax = || RangeError::Syntax(s.to_owned());
        let (low, high) = s.trim().split_once('-').ok_or_else(syntax)?;
        let low = low.trim().parse().map_err(|_| syntax())?;
        let high = high.trim().parse().map_err(|_| syntax())?;
        PortRange::new(low, high)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LeasePurpose {
    SlaveApiGateway,
    TcprosRelay,
}

impl fmt::Display for LeasePurpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LeasePurpose::SlaveApiGateway => "slave_api_gateway",
            LeasePurpose::TcprosRelay => "tcpros_relay",
        })
    }
}

/// One port handed out by the allocator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PortLease {
    pub port: u16,
    pub purpose: LeasePurpose,
    /// The internal endpoint traffic arriving on `port` is meant for.
    pub target: Endpoint,
    /// Caller id of the node the lease belongs to.
    pub owner: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PortError {
    #[error("port range {range} exhausted: all {} ports are leased; widen the range", .range.len())]
    Exhausted { range: PortRange },
    #[error("port {port} released but not leased by this owner")]
    DoubleRelease { port: u16 },
}

#[derive(Debug)]
pub struct PortAllocator {
    range: PortRange,
    leases: Mutex<BTreeMap<u16, PortLease>>,
}

impl PortAllocator {
    pub fn new(range: PortRange) -> Self {
        Self {
            range,
            leases: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn range(&self) -> PortRange {
        self.range
    }

    /// Leases the lowest free port in the range.
    pub fn lease(
        &self,
        purpose: LeasePurpose,
        target: Endpoint,
        owner: impl Into<String>,
    ) -> Result<PortLease, PortError> {
        let mut leases = self.leases.lock().expect("allocator lock poisoned");
        let port = (self.range.low..=self.range.high)
            .find(|p| !leases.contains_key(p))
            .ok_or(PortError::Exhausted { range: self.range })?;
        let lease = PortLease {
            port,
            purpose,
            target,
            owner: owner.into(),
        };
        leases.insert(port, lease.clone());
        Ok(lease)
    }

    /// Returns a lease to the pool. Releasing a port that is free, or that
    /// has since been leased to someone else, is reported as `DoubleRelease`.
    pub fn release(&self, lease: &PortLease) -> Result<(), PortError> {
        let mut leases = self.leases.lock().expect("allocator lock poisoned");
        match leases.get(&lease.port) {
            Some(live) if live == lease => {
                leases.remove(&lease.port);
                Ok(())
            }
            _ => Err(PortError::DoubleRelease { port: lease.port }),
        }
    }

    /// Snapshot of live leases, sorted by port.
    pub fn live_leases(&self) -> Vec<PortLease> {
        self.leases
            .lock()
            .expect("allocator lock poisoned")
            .values()
            .cloned()
            .collect()
    }

    pub fn live_count(&self) -> usize {
        self.leases.lock().expect("allocator lock poisoned").len()
    }
}
