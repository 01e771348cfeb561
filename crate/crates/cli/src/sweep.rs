use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cyclemarket::data::{DemandScenario, MarketConfig};
use cyclemarket::realtime::RealTimeMode;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::num;
use crate::plot::{line_chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Storage capital cost, $/kWh.
    B,
    /// Storage capacity, MWh.
    E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mechanism,
    PlannerNonperiodic,
    PlannerPeriodic,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::Mechanism,
        Strategy::PlannerNonperiodic,
        Strategy::PlannerPeriodic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mechanism => "mechanism",
            Strategy::PlannerNonperiodic => "planner_nonperiodic",
            Strategy::PlannerPeriodic => "planner_periodic",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixed {
    #[serde(rename = "E", default)]
    pub e: Option<f64>,
    #[serde(rename = "B", default)]
    pub b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    #[serde(default)]
    pub fixed: Fixed,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading sweep spec {}", path.display()))?;
        let spec: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing sweep spec {}", path.display()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            bail!("sweep values must not be empty");
        }
        if let Some(v) = self.values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            bail!("sweep values must be positive, got {v}");
        }
        if self.strategies.is_empty() {
            bail!("at least one strategy is required");
        }
        for v in [self.fixed.e, self.fixed.b].into_iter().flatten() {
            if !(v > 0.0) || !v.is_finite() {
                bail!("fixed parameters must be positive, got {v}");
            }
        }
        Ok(())
    }

    /// The config at one grid point: every storage unit gets the swept value
    /// on the axis and the fixed value (when given) on the other parameter.
    pub fn config_at(&self, base: &MarketConfig, value: f64) -> MarketConfig {
        let mut cfg = base.clone();
        for s in &mut cfg.storages {
            if let Some(e) = self.fixed.e {
                s.capacity_e = e;
            }
            if let Some(b) = self.fixed.b {
                s.capital_cost_b = b;
            }
            match self.axis {
                Axis::B => s.capital_cost_b = value,
                Axis::E => s.capacity_e = value,
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub strategy: Strategy,
    pub social_cost: f64,
    pub storage_profit: f64,
    pub status: String,
}

/// Runs every grid point (on `parallel` workers) and returns rows in grid
/// order, strategies in the order given by the spec.
pub fn run_grid(
    spec: &SweepSpec,
    base: &MarketConfig,
    scenario: &DemandScenario,
    mode: RealTimeMode,
    parallel: usize,
) -> Result<Vec<SweepRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()?;
    let per_point: Vec<Vec<SweepRow>> = pool.install(|| {
        spec.values
            .par_iter()
            .map(|&v| {
                let cfg = spec.config_at(base, v);
                match crate::run::execute(&cfg, scenario, mode) {
                    Ok(out) => spec
                        .strategies
                        .iter()
                        .map(|&st| {
                            let (cost, profit) = match st {
                                Strategy::Mechanism => (out.check.cost, out.check.profit),
                                Strategy::PlannerNonperiodic => {
                                    (out.check.cost_lower, out.check.profit_non_periodic)
                                }
                                Strategy::PlannerPeriodic => {
                                    (out.check.cost_upper, out.check.profit_periodic)
                                }
                            };
                            SweepRow {
                                axis_value: v,
                                strategy: st,
                                social_cost: cost,
                                storage_profit: profit,
                                status: "ok".into(),
                            }
                        })
                        .collect(),
                    Err(e) => {
                        let msg = format!("error: {e:#}");
                        spec.strategies
                            .iter()
                            .map(|&st| SweepRow {
                                axis_value: v,
                                strategy: st,
                                social_cost: f64::NAN,
                                storage_profit: f64::NAN,
                                status: msg.clone(),
                            })
                            .collect()
                    }
                }
            })
            .collect()
    });
    Ok(per_point.into_iter().flatten().collect())
}

/// The rows exactly as written to `sweep.csv`.
pub fn csv_records(rows: &[SweepRow]) -> Vec<[String; 5]> {
    rows.iter()
        .map(|r| {
            [
                num(r.axis_value),
                r.strategy.name().to_string(),
                num(r.social_cost),
                num(r.storage_profit),
                r.status.clone(),
            ]
        })
        .collect()
}

pub const CSV_HEADER: [&str; 5] = [
    "axis_value",
    "strategy",
    "social_cost",
    "storage_profit",
    "status",
];

/// Chart series rebuilt from the CSV text fields, so plots never show
/// anything the table does not.
fn series_from_records(records: &[[String; 5]], column: usize) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in records {
        let x: f64 = r[0].parse().unwrap_or(f64::NAN);
        let y: f64 = r[column].parse().unwrap_or(f64::NAN);
        match out.iter_mut().find(|s| s.name == r[1]) {
            Some(s) => s.points.push((x, y)),
            None => out.push(Series {
                name: r[1].clone(),
                points: vec![(x, y)],
            }),
        }
    }
    out
}

/// `sweep`: writes `sweep.csv`, `social_cost.svg` and `storage_profit.svg`.
/// Returns the rows; the caller decides the exit code from their status.
pub fn cmd_sweep(
    spec: &SweepSpec,
    base: &MarketConfig,
    scenario: &DemandScenario,
    mode: RealTimeMode,
    parallel: usize,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let rows = run_grid(spec, base, scenario, mode, parallel)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let records = csv_records(&rows);
    let path = out.join("sweep.csv");
    let mut w =
        csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(CSV_HEADER)?;
    for r in &records {
        w.write_record(r)?;
    }
    w.flush()?;

    let x_label = match spec.axis {
        Axis::B => "storage capital cost B ($/kWh)",
        Axis::E => "storage capacity E (MWh)",
    };
    for (column, file, title, y_label) in [
        (
            2,
            "social_cost.svg",
            "Two-stage social cost",
            "social cost ($)",
        ),
        (3, "storage_profit.svg", "Storage profit", "profit ($)"),
    ] {
        let svg = line_chart(
            title,
            x_label,
            y_label,
            &series_from_records(&records, column),
        );
        fs::write(out.join(file), svg).with_context(|| format!("writing {file}"))?;
    }
    Ok(rows)
}
