//! Energy metering for compute experiments using network-attached smart
//! plugs.

pub mod cli;
pub mod clock;
pub mod collector;
pub mod analytics;
pub mod config;
pub mod drivers;
pub mod model;
pub mod notify;
pub mod par;
pub mod query;
pub mod reporting;
pub mod server;
pub mod storage;
