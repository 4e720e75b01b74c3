//! Federated Kalman filtering for RSSI-based device localization.
//!
//! A cloud node fuses the estimates of several fog-hosted local filters;
//! fogs smooth RSSI from edge devices, invert it to distance and trilaterate.
//! A hash-chained allow-list decides which devices take part.

pub mod channel;
pub mod config;
pub mod federation;
pub mod filter;
pub mod ledger;
pub mod localization;
pub mod metrics;
pub mod simnet;
pub mod wire;

pub use config::{ExperimentConfig, Mode, ModeSelection};
pub use filter::{KfModel, StateEstimate};
