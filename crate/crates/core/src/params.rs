use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};

/// Empirical scaling between capital cost and degradation coefficient.
pub const DEFAULT_RHO: f64 = 5.24e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Quadratic cost coefficient, $/(MW)^2.
    pub c: f64,
    /// Linear cost coefficient, $/MW.
    pub a: f64,
    pub g_min: f64,
    pub g_max: f64,
}

impl GeneratorParams {
    pub fn new(c: f64, a: f64, g_min: f64, g_max: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(MarketError::InvalidInput(format!(
                "generator c must be positive, got {c}"
            )));
        }
        if !(g_min <= g_max) || !a.is_finite() {
            return Err(MarketError::InvalidInput(format!(
                "generator limits out of order: g_min={g_min}, g_max={g_max}"
            )));
        }
        Ok(Self { c, a, g_min, g_max })
    }

    /// Unbounded generator, handy for the simplified (balance-only) setting.
    pub fn unbounded(c: f64) -> Self {
        Self {
            c,
            a: 0.0,
            g_min: f64::NEG_INFINITY,
            g_max: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    /// Energy capacity, MWh.
    pub capacity_e: f64,
    /// Capital cost, $/kWh.
    pub capital_cost_b: f64,
    pub rho: f64,
    /// Degradation coefficient b = rho * B * E.
    pub b: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Initial state of charge as a fraction of capacity.
    pub x0: f64,
}

impl StorageParams {
    /// Builds a storage unit whose rate limits are +-E/duration.
    pub fn new(
        capacity_e: f64,
        capital_cost_b: f64,
        rho: f64,
        duration_hours: f64,
        x0: f64,
    ) -> Result<Self> {
        let mut errs = Vec::new();
        if !(capacity_e > 0.0) || !capacity_e.is_finite() {
            errs.push(format!("capacity_E must be positive, got {capacity_e}"));
        }
        if !(capital_cost_b > 0.0) || !capital_cost_b.is_finite() {
            errs.push(format!(
                "capital_cost_B must be positive, got {capital_cost_b}"
            ));
        }
        if !(rho > 0.0) || !rho.is_finite() {
            errs.push(format!("rho must be positive, got {rho}"));
        }
        if !(duration_hours > 0.0) || !duration_hours.is_finite() {
            errs.push(format!(
                "duration_hours must be positive, got {duration_hours}"
            ));
        }
        if !(0.0..=1.0).contains(&x0) {
            errs.push(format!("x0 must lie in [0, 1], got {x0}"));
        }
        if !errs.is_empty() {
            return Err(MarketError::Validation(errs));
        }
        let rate = capacity_e / duration_hours;
        Ok(Self {
            capacity_e,
            capital_cost_b,
            rho,
            b: rho * capital_cost_b * capacity_e,
            u_min: -rate,
            u_max: rate,
            x0,
        })
    }

    /// Storage defined directly by its degradation coefficient, with no rate limits.
    pub fn with_b(capacity_e: f64, b: f64) -> Self {
        Self {
            capacity_e,
            capital_cost_b: f64::NAN,
            rho: f64::NAN,
            b,
            u_min: f64::NEG_INFINITY,
            u_max: f64::INFINITY,
            x0: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarketParams {
    pub generators: Vec<GeneratorParams>,
    pub storages: Vec<StorageParams>,
}

impl MarketParams {
    pub fn new(generators: Vec<GeneratorParams>, storages: Vec<StorageParams>) -> Self {
        Self {
            generators,
            storages,
        }
    }

    pub fn sum_inv_c(&self) -> f64 {
        self.generators.iter().map(|g| 1.0 / g.c).sum()
    }
}
