//! Two-stage (day-ahead + real-time) electricity market with energy storage
//! bidding on Rainflow cycle depths.
//!
//! The crate is organised around a small nonsmooth convex solver
//! ([`engine`]) that minimises quadratic costs plus the piecewise-quadratic
//! cycle-depth degradation cost of storage. Market clearing, the social
//! planner and the rolling-horizon simulation are thin layers on top.

pub mod costs;
pub mod data;
pub mod dayahead;
pub mod engine;
pub mod error;
mod model;
pub mod params;
pub mod planner;
pub mod qp;
pub mod rainflow;
pub mod realtime;
pub mod simulation;

pub use error::{MarketError, Result};
pub use params::{GeneratorParams, MarketParams, StorageParams};

/// Default relative KKT tolerance for every clearing and planner solve.
pub const DEFAULT_TOL: f64 = 1e-8;
