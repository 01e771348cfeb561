//! Drivers behind the `cyclemarket` binary: single two-stage runs, parameter
//! sweeps over storage capital cost or capacity, and SVG charts.

pub mod plot;
pub mod run;
pub mod sweep;

use std::path::Path;

use anyhow::{Context, Result};
use cyclemarket::data::{bundled_fixture, load_demand_csv, DemandScenario, MarketConfig};

/// Loads the market config, or the single-generator case study with
/// E = 50 MWh and B = 150 $/kWh when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<MarketConfig> {
    match path {
        Some(p) => MarketConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(MarketConfig::case_study(50.0, 150.0)),
    }
}

/// Loads demand from CSV, or the bundled two-peak fixture.
pub fn load_demand(path: Option<&Path>) -> Result<DemandScenario> {
    match path {
        Some(p) => load_demand_csv(p).with_context(|| format!("loading demand {}", p.display())),
        None => Ok(bundled_fixture()),
    }
}

/// Formats a float for CSV output. `Display` for f64 is the shortest
/// round-trip representation, so output is stable across runs.
pub(crate) fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        v.to_string()
    }
}
