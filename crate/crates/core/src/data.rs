//! Demand CSV ingestion, JSON market configuration and the bundled
//! synthetic demand fixture.
//!
//! CSV contract: header `timestamp,forecast_mw,actual_mw` (column order free,
//! extra columns ignored), one row per hour with strictly consecutive
//! timestamps. `actual_mw` may be blank, but only on a trailing block of
//! advisory rows.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};
use crate::params::{GeneratorParams, MarketParams, StorageParams, DEFAULT_RHO};
use crate::realtime::RealTimeMode;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const ACCEPTED_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
];

/// Hourly forecast over the day-ahead horizon plus the realized prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandScenario {
    pub timestamps: Vec<NaiveDateTime>,
    /// Day-ahead forecast `d^d`, MW.
    pub forecast: Vec<f64>,
    /// Realized demand `d` for the first `actual.len()` hours, MW.
    pub actual: Vec<f64>,
}

impl DemandScenario {
    pub fn horizon(&self) -> usize {
        self.forecast.len()
    }

    pub fn realized(&self) -> usize {
        self.actual.len()
    }

    /// `d^r = d - d^d` over the realized hours.
    pub fn residual(&self) -> Vec<f64> {
        self.actual
            .iter()
            .zip(&self.forecast)
            .map(|(a, f)| a - f)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.forecast.is_empty() {
            return Err(MarketError::InvalidInput(
                "scenario has no forecast rows".into(),
            ));
        }
        if self.timestamps.len() != self.forecast.len() {
            return Err(MarketError::InvalidInput(
                "one timestamp per forecast row is required".into(),
            ));
        }
        if self.actual.len() > self.forecast.len() {
            return Err(MarketError::InvalidInput(
                "more actual values than forecast rows".into(),
            ));
        }
        if self
            .forecast
            .iter()
            .chain(&self.actual)
            .any(|v| !v.is_finite())
        {
            return Err(MarketError::InvalidInput(
                "demand values must be finite".into(),
            ));
        }
        Ok(())
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    ACCEPTED_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn parse_value(s: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(MarketError::Parse {
            row,
            message: format!("{column} is not a finite number: {s:?}"),
        }),
    }
}

/// Parses the CSV contract from any reader. Row numbers in errors count data
/// rows from 1 (the header is row 0).
pub fn parse_demand_csv<R: Read>(reader: R) -> Result<DemandScenario> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| MarketError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = ["timestamp", "forecast_mw", "actual_mw"]
        .into_iter()
        .filter(|n| col(n).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(MarketError::Parse {
            row: 0,
            message: format!("missing column(s): {}", missing.join(", ")),
        });
    }
    let (ci, cf, ca) = (
        col("timestamp").unwrap(),
        col("forecast_mw").unwrap(),
        col("actual_mw").unwrap(),
    );

    let mut sc = DemandScenario {
        timestamps: Vec::new(),
        forecast: Vec::new(),
        actual: Vec::new(),
    };
    let mut actual_ended = false;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| MarketError::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let ts = parse_timestamp(field(ci)).ok_or_else(|| MarketError::Parse {
            row,
            message: format!("unrecognised timestamp {:?}", field(ci)),
        })?;
        if let Some(prev) = sc.timestamps.last() {
            let step = ts - *prev;
            if step <= Duration::zero() {
                return Err(MarketError::Parse {
                    row,
                    message: format!("timestamp {ts} is not after {prev}"),
                });
            }
            if step != Duration::hours(1) {
                return Err(MarketError::Parse {
                    row,
                    message: format!("gap between {prev} and {ts}; hourly rows expected"),
                });
            }
        }
        let f = parse_value(field(cf), row, "forecast_mw")?.ok_or_else(|| MarketError::Parse {
            row,
            message: "forecast_mw is blank".into(),
        })?;
        let a = parse_value(field(ca), row, "actual_mw")?;
        match a {
            Some(v) if actual_ended => {
                return Err(MarketError::Parse {
                    row,
                    message: format!("actual value {v} after a blank actual row"),
                })
            }
            Some(v) => sc.actual.push(v),
            None => actual_ended = true,
        }
        if f < 0.0 || a.is_some_and(|v| v < 0.0) {
            log::warn!("row {row}: negative demand accepted as net load");
        }
        sc.timestamps.push(ts);
        sc.forecast.push(f);
    }
    if sc.forecast.is_empty() {
        return Err(MarketError::Parse {
            row: 0,
            message: "no data rows".into(),
        });
    }
    Ok(sc)
}

pub fn load_demand_csv(path: impl AsRef<Path>) -> Result<DemandScenario> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| MarketError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_demand_csv(file)
}

/// Writes the scenario back in the CSV contract with ISO-8601 timestamps.
pub fn write_demand_csv<W: Write>(sc: &DemandScenario, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| MarketError::InvalidInput(format!("csv write failed: {e}"));
    w.write_record(["timestamp", "forecast_mw", "actual_mw"])
        .map_err(err)?;
    for (t, (ts, f)) in sc.timestamps.iter().zip(&sc.forecast).enumerate() {
        let a = sc.actual.get(t).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([ts.format(TIMESTAMP_FORMAT).to_string(), f.to_string(), a])
            .map_err(err)?;
    }
    w.flush().map_err(|source| MarketError::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}

/// Deterministic two-peak demand: `600 + 200 sin(2 pi (t - 4) / 12)` MW over
/// 48 hours, with the realized first day deviating by a fixed pattern of at
/// most 5%.
pub fn synthetic_fixture() -> DemandScenario {
    let start = NaiveDate::from_ymd_opt(2023, 8, 25)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let forecast: Vec<f64> = (0..48)
        .map(|t| 600.0 + 200.0 * (2.0 * std::f64::consts::PI * (t as f64 - 4.0) / 12.0).sin())
        .map(|v: f64| (v * 1000.0).round() / 1000.0)
        .collect();
    let actual = (0..24)
        .map(|t| forecast[t] * (1.0 + 0.05 * (1.3 * t as f64 + 0.5).sin()))
        .map(|v: f64| (v * 1000.0).round() / 1000.0)
        .collect();
    DemandScenario {
        timestamps: (0..48).map(|h| start + Duration::hours(h)).collect(),
        forecast,
        actual,
    }
}

/// The fixture as shipped in `data/two_peak.csv`.
pub const BUNDLED_FIXTURE_CSV: &str = include_str!("../data/two_peak.csv");

pub fn bundled_fixture() -> DemandScenario {
    parse_demand_csv(BUNDLED_FIXTURE_CSV.as_bytes()).expect("bundled fixture is well-formed")
}

fn default_a() -> f64 {
    0.0
}
fn default_g_min() -> f64 {
    0.0
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}
fn default_x0() -> f64 {
    0.5
}
fn default_duration() -> f64 {
    4.0
}
fn default_horizon() -> usize {
    48
}
fn default_binding() -> usize {
    24
}
fn default_tol() -> f64 {
    crate::DEFAULT_TOL
}
fn default_max_iter() -> usize {
    100
}
fn default_mode() -> RealTimeMode {
    RealTimeMode::Aware
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub c: f64,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_g_min")]
    pub g_min: f64,
    /// Defaults to the scenario peak (forecast or actual).
    #[serde(default)]
    pub g_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageConfig {
    #[serde(rename = "capacity_E")]
    pub capacity_e: f64,
    /// $/kWh.
    #[serde(rename = "capital_cost_B")]
    pub capital_cost_b: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default = "default_duration")]
    pub duration_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub generators: Vec<GeneratorConfig>,
    #[serde(default)]
    pub storages: Vec<StorageConfig>,
    /// Day-ahead horizon in hours.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Binding day-ahead hours, also the number of real-time steps.
    #[serde(default = "default_binding")]
    pub binding_hours: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_mode")]
    pub mode: RealTimeMode,
}

impl MarketConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| MarketError::Validation(vec![format!("config: {e}")]))?;
        let errs = cfg.problems();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(MarketError::Validation(errs))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MarketError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The single-generator, single-storage case-study market.
    pub fn case_study(capacity_e: f64, capital_cost_b: f64) -> Self {
        Self {
            generators: vec![GeneratorConfig {
                c: 20.0,
                a: 0.0,
                g_min: 0.0,
                g_max: None,
            }],
            storages: vec![StorageConfig {
                capacity_e,
                capital_cost_b,
                rho: DEFAULT_RHO,
                x0: 0.5,
                duration_hours: 4.0,
            }],
            horizon: 48,
            binding_hours: 24,
            tol: crate::DEFAULT_TOL,
            max_iter: 100,
            mode: RealTimeMode::Aware,
        }
    }

    /// Every problem with the configuration, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.generators.is_empty() {
            errs.push("at least one generator is required".to_string());
        }
        for (j, g) in self.generators.iter().enumerate() {
            if !(g.c > 0.0) || !g.c.is_finite() {
                errs.push(format!("generators[{j}].c must be positive, got {}", g.c));
            }
            if !g.a.is_finite() {
                errs.push(format!("generators[{j}].a must be finite"));
            }
            if let Some(hi) = g.g_max {
                if !(g.g_min <= hi) {
                    errs.push(format!(
                        "generators[{j}]: g_min {} exceeds g_max {hi}",
                        g.g_min
                    ));
                }
            }
        }
        for (s, st) in self.storages.iter().enumerate() {
            if let Err(MarketError::Validation(v)) = StorageParams::new(
                st.capacity_e,
                st.capital_cost_b,
                st.rho,
                st.duration_hours,
                st.x0,
            ) {
                errs.extend(v.into_iter().map(|m| format!("storages[{s}]: {m}")));
            }
        }
        if self.horizon == 0 {
            errs.push("horizon must be positive".into());
        }
        if self.binding_hours == 0 || self.binding_hours > self.horizon {
            errs.push(format!(
                "binding_hours must lie in 1..={}, got {}",
                self.horizon, self.binding_hours
            ));
        }
        if !(self.tol > 0.0) {
            errs.push(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            errs.push("max_iter must be positive".into());
        }
        errs
    }
}

/// Market parameters for a scenario: `b = rho B E`, rate limits
/// `+-E/duration`, and `g_max` defaulting to the scenario's peak demand.
pub fn build_params(config: &MarketConfig, scenario: &DemandScenario) -> Result<MarketParams> {
    let mut errs = config.problems();
    if scenario.horizon() < config.horizon {
        errs.push(format!(
            "demand covers {} hours, config horizon is {}",
            scenario.horizon(),
            config.horizon
        ));
    }
    if scenario.realized() < config.binding_hours {
        errs.push(format!(
            "demand has {} realized hours, {} binding hours requested",
            scenario.realized(),
            config.binding_hours
        ));
    }
    if !errs.is_empty() {
        return Err(MarketError::Validation(errs));
    }
    let peak = scenario
        .forecast
        .iter()
        .chain(&scenario.actual)
        .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let generators = config
        .generators
        .iter()
        .map(|g| GeneratorParams {
            c: g.c,
            a: g.a,
            g_min: g.g_min,
            g_max: g.g_max.unwrap_or(peak),
        })
        .collect();
    let storages = config
        .storages
        .iter()
        .map(|s| {
            StorageParams::new(
                s.capacity_e,
                s.capital_cost_b,
                s.rho,
                s.duration_hours,
                s.x0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MarketParams::new(generators, storages))
}
