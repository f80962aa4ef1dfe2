//! Vehicle mobility modeling on a tolled highway network.
//!
//! The only observations are toll transactions: the station and time at which a
//! vehicle entered the network and the station and time at which it left. From
//! those the crate estimates per-edge crowd speed distributions, recovers the
//! most likely route and speed profile of historical trips, trains online
//! Mondrian-forest predictors for destination, route and speed, and replays them
//! to predict where a vehicle is at any moment of its trip.
//!
//! [`sim`] provides a synthetic ground-truth world used for validation.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod crowd;
pub mod error;
pub mod forest;
pub mod graph;
pub mod ingest;
pub mod locator;
pub mod pipeline;
pub mod predictors;
pub mod recovery;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use graph::{EdgeIx, HighwayGraph, Route, StationIx};
pub use ingest::{Timestamp, TimeSlot, Transaction, Trip, VehicleType};
