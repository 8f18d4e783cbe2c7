//! Block delivery over lossy datagram links using rateless erasure codes.
//!
//! A block is split into K source symbols and sent as a stream of encoded
//! symbols. The receiver recovers the block from any K symbols that are
//! linearly independent, so a lost packet is never retransmitted; the sender
//! instead plans enough symbols up front to absorb the expected loss and tops
//! up when receiver feedback shows a shortfall.

pub mod codec;
pub mod emu;
pub mod estimator;
pub mod gf256;
pub mod planner;
pub mod scenario;
pub mod receiver;
pub mod sender;
pub mod wire;
pub mod metrics;
pub mod sim;
pub mod trace;
pub mod udp;

/// A configuration value outside its valid range.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);
