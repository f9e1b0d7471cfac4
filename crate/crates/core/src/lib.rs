//! Simulating a trusted auctioneer with a protocol among rational providers.
//!
//! The crate is organised bottom-up:
//!
//! - [`fixed`], [`types`], [`encoding`], [`canonical`]: exact domain values,
//!   welfare and utility, bid bit streams and canonical bytes.
//! - [`simnet`]: a deterministic asynchronous network driven by fair schedules.
//! - [`blocks`]: bid agreement, input validation, common coin and data
//!   transfer as pluggable state machines.
//! - [`allocators`]: the double and standard auction algorithms, the task
//!   graph and the parallel allocator built from the blocks.
//! - [`gametheory`]: deviation strategies and empirical checks of correct
//!   simulation, coalition resilience and bidder truthfulness.

pub mod allocators;
pub mod blocks;
pub mod canonical;
pub mod encoding;
pub mod error;
pub mod fixed;
pub mod gametheory;
pub mod simnet;
pub mod types;

pub use error::{CoreError, Result};
pub use fixed::{fx, Fixed};
pub use types::{
    check_feasible, social_welfare, utility, Allocation, Bid, BidVector, Outcome, PaymentVector, ProviderBid, Role,
};
