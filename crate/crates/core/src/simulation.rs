//! Two-stage case-study protocol: a day-ahead market over the full forecast
//! horizon (first day binding), then hourly rolling real-time windows that
//! commit only their first interval.

use nalgebra::DVector;
use serde::Serialize;

use crate::costs::{generator_cost, storage_cost};
use crate::dayahead::{
    clear_general, clear_uniform, equilibrium_bids_dayahead, DayAheadResult, GeneralOptions,
};
use crate::error::{MarketError, Result};
use crate::params::MarketParams;
use crate::planner::{participant_profit, solve_planner, PlannerResult};
use crate::rainflow::rainflow_map;
use crate::realtime::{
    best_response_unaware, clear_constrained_aware, equilibrium_aware_window, Commitments,
    RealTimeMode, RealTimeResult,
};

pub use crate::data::DemandScenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationConfig {
    pub mode: RealTimeMode,
    /// Binding day-ahead hours, also the number of real-time steps.
    pub binding_hours: usize,
    /// Real-time look-ahead window, including the binding hour.
    pub window_hours: usize,
    pub tol: f64,
    /// Iteration cap for unaware best response.
    pub max_iter: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            mode: RealTimeMode::Aware,
            binding_hours: 24,
            window_hours: 24,
            tol: crate::DEFAULT_TOL,
            max_iter: 100,
        }
    }
}

impl SimulationConfig {
    pub fn from_market(cfg: &crate::data::MarketConfig) -> Self {
        Self {
            mode: cfg.mode,
            binding_hours: cfg.binding_hours,
            tol: cfg.tol,
            max_iter: cfg.max_iter,
            ..Self::default()
        }
    }
}

/// Prefixes errors that carry a message with the real-time hour.
fn at_hour(h: usize, e: MarketError) -> MarketError {
    match e {
        MarketError::Infeasible(m) => MarketError::Infeasible(format!("real-time hour {h}: {m}")),
        MarketError::InvalidInput(m) => {
            MarketError::InvalidInput(format!("real-time hour {h}: {m}"))
        }
        MarketError::DegenerateDemand(m) => {
            MarketError::DegenerateDemand(format!("real-time hour {h}: {m}"))
        }
        other => other,
    }
}

fn within_limits(da: &DayAheadResult, params: &MarketParams) -> bool {
    let slack = |v: f64| 1e-9 * (1.0 + v.abs());
    let gen_ok = da.g.iter().zip(&params.generators).all(|(g, p)| {
        g.iter()
            .all(|&v| v >= p.g_min - slack(p.g_min) && v <= p.g_max + slack(p.g_max))
    });
    let st_ok = da.u.iter().zip(&params.storages).all(|(u, p)| {
        u.iter()
            .all(|&v| v >= p.u_min - slack(p.u_min) && v <= p.u_max + slack(p.u_max))
    });
    gen_ok && st_ok
}

/// Clears the day-ahead market on the whole forecast with equilibrium bids.
///
/// The uniform-price clearing is used when its dispatch respects every
/// limit; otherwise the general clearing (limits plus periodicity) runs.
pub fn run_day_ahead(
    scenario: &DemandScenario,
    params: &MarketParams,
    cfg: &SimulationConfig,
) -> Result<DayAheadResult> {
    scenario.validate()?;
    let bids = equilibrium_bids_dayahead(params);
    let d = &scenario.forecast;
    let same_capacity = params
        .storages
        .windows(2)
        .all(|w| w[0].capacity_e == w[1].capacity_e);
    if same_capacity {
        let da = clear_uniform(&bids, d, params, cfg.tol)?;
        if within_limits(&da, params) {
            return Ok(da);
        }
        log::info!("uniform day-ahead dispatch violates a limit; clearing the general problem");
    }
    clear_general(&bids, d, params, GeneralOptions::default(), cfg.tol)
}

/// Binding-interval outcomes of the rolling real-time market.
#[derive(Debug, Clone, Serialize)]
pub struct RealTimeRun {
    /// One result per binding hour, each of horizon 1.
    pub steps: Vec<RealTimeResult>,
    /// Realized SoC per storage, length `hours + 1`.
    pub soc: Vec<Vec<f64>>,
}

fn first_interval(r: &RealTimeResult, price_scale: f64) -> RealTimeResult {
    let first = |v: &Vec<f64>| vec![v.first().copied().unwrap_or(0.0)];
    RealTimeResult {
        mode: r.mode,
        g_r: r.g_r.iter().map(first).collect(),
        u_r: r.u_r.iter().map(first).collect(),
        lambda_r: first(&r.lambda_r),
        price_scale,
        iterations: r.iterations,
        converged: r.converged,
        map_stable: r.map_stable,
        warnings: r.warnings.clone(),
        trace: r.trace.clone(),
    }
}

/// Unaware hours without a usable equilibrium: generators absorb the
/// residual `r` at their cost slopes, `g^r_j = lambda / c_j`, and storage
/// stays at its day-ahead position. Flagged as not converged.
fn generator_fallback(params: &MarketParams, r: f64, reason: String) -> RealTimeResult {
    let lambda = r / params.sum_inv_c();
    RealTimeResult {
        mode: RealTimeMode::Unaware,
        g_r: params
            .generators
            .iter()
            .map(|g| vec![lambda / g.c])
            .collect(),
        u_r: vec![vec![0.0]; params.storages.len()],
        lambda_r: vec![lambda],
        price_scale: f64::NAN,
        iterations: 0,
        converged: false,
        map_stable: true,
        warnings: vec![reason],
        trace: Vec::new(),
    }
}

/// The first limit an unaware binding-hour outcome breaks, if any. The
/// balance-only equilibrium knows nothing about limits, so the simulation
/// checks them before committing.
fn unaware_violation(
    params: &MarketParams,
    da: &DayAheadResult,
    h: usize,
    step: &RealTimeResult,
    soc: &[Vec<f64>],
) -> Option<String> {
    let slack = |v: f64| 1e-7 * (1.0 + v.abs());
    for (j, p) in params.generators.iter().enumerate() {
        let g = da.g[j][h] + step.g_r[j][0];
        if g < p.g_min - slack(p.g_min) || g > p.g_max + slack(p.g_max) {
            return Some(format!(
                "puts generator {j} at {g:.3} MW outside [{}, {}]",
                p.g_min, p.g_max
            ));
        }
    }
    for (s, p) in params.storages.iter().enumerate() {
        let u = da.u[s][h] + step.u_r[s][0];
        if u < p.u_min - slack(p.u_min) || u > p.u_max + slack(p.u_max) {
            return Some(format!(
                "puts storage {s} at {u:.3} MW outside [{}, {}]",
                p.u_min, p.u_max
            ));
        }
        let x = soc[s].last().copied().unwrap_or(p.x0) - u / p.capacity_e;
        if !(-1e-7..=1.0 + 1e-7).contains(&x) {
            return Some(format!("takes storage {s} to state of charge {x:.4}"));
        }
    }
    None
}

/// Hourly rolling real-time clearing over the binding day.
///
/// Aware mode: each window holds the realized demand for its first hour and
/// the forecast afterwards; bids follow the aware equilibrium on that window
/// and the operator clears with limits and SoC bounds from the realized SoC.
/// Unaware mode: the balance-only best response on the residual of the
/// binding hour (zero elsewhere) against the full day-ahead schedule; hours
/// where it fails, or where its outcome breaks a limit, fall back to
/// generator-only balancing.
pub fn run_real_time(
    scenario: &DemandScenario,
    params: &MarketParams,
    da: &DayAheadResult,
    cfg: &SimulationConfig,
) -> Result<RealTimeRun> {
    scenario.validate()?;
    let hours = cfg.binding_hours;
    if scenario.realized() < hours || da.horizon() < hours {
        return Err(MarketError::InvalidInput(format!(
            "{hours} binding hours need as many realized and day-ahead intervals (have {} and {})",
            scenario.realized(),
            da.horizon()
        )));
    }
    if cfg.window_hours == 0 {
        return Err(MarketError::InvalidInput(
            "real-time window must be at least one hour".into(),
        ));
    }
    let mut soc: Vec<Vec<f64>> = params.storages.iter().map(|s| vec![s.x0]).collect();
    let mut steps = Vec::with_capacity(hours);
    let horizon = da.horizon().min(scenario.horizon());
    for h in 0..hours {
        let step = match cfg.mode {
            RealTimeMode::Aware => {
                let end = (h + cfg.window_hours).min(horizon);
                let mut demand = scenario.forecast[h..end].to_vec();
                demand[0] = scenario.actual[h];
                let commit = Commitments::window(da, h, end - h);
                let (bids, eq) = equilibrium_aware_window(params, &demand, &commit)
                    .map_err(|e| at_hour(h, e))?;
                let x0: Vec<f64> = soc
                    .iter()
                    .map(|s| s.last().copied().unwrap().clamp(0.0, 1.0))
                    .collect();
                let res = clear_constrained_aware(&bids, &demand, &commit, &x0, params, cfg.tol)
                    .map_err(|e| at_hour(h, e))?;
                first_interval(&res, eq.price_scale)
            }
            RealTimeMode::Unaware => {
                let r = scenario.actual[h] - scenario.forecast[h];
                if r == 0.0 {
                    RealTimeResult {
                        mode: RealTimeMode::Unaware,
                        g_r: vec![vec![0.0]; params.generators.len()],
                        u_r: vec![vec![0.0]; params.storages.len()],
                        lambda_r: vec![0.0],
                        price_scale: 0.0,
                        iterations: 0,
                        converged: true,
                        map_stable: true,
                        warnings: Vec::new(),
                        trace: Vec::new(),
                    }
                } else {
                    let mut d_r = vec![0.0; da.horizon()];
                    d_r[h] = r;
                    match best_response_unaware(params, &d_r, da, cfg.tol, cfg.max_iter) {
                        Ok((_, res)) => {
                            let cut = |v: &Vec<f64>| vec![v[h]];
                            let step = RealTimeResult {
                                g_r: res.g_r.iter().map(cut).collect(),
                                u_r: res.u_r.iter().map(cut).collect(),
                                lambda_r: vec![res.lambda_r[h]],
                                ..res
                            };
                            match unaware_violation(params, da, h, &step, &soc) {
                                None => step,
                                Some(why) => {
                                    log::warn!("hour {h}: unaware equilibrium {why}; generators cover the residual");
                                    generator_fallback(
                                        params,
                                        r,
                                        format!("unaware equilibrium {why}"),
                                    )
                                }
                            }
                        }
                        Err(
                            e @ (MarketError::Divergence { .. }
                            | MarketError::NonConvergence { .. }),
                        ) => {
                            log::warn!("hour {h}: {e}; generators cover the residual");
                            generator_fallback(params, r, e.to_string())
                        }
                        Err(e) => return Err(at_hour(h, e)),
                    }
                }
            }
        };
        for (s, p) in params.storages.iter().enumerate() {
            let x = soc[s].last().copied().unwrap() - (da.u[s][h] + step.u_r[s][0]) / p.capacity_e;
            if !(-1e-7..=1.0 + 1e-7).contains(&x) {
                log::warn!("hour {h}: storage {s} state of charge {x:.4} leaves [0, 1]");
            }
            soc[s].push(x);
        }
        steps.push(step);
    }
    Ok(RealTimeRun { steps, soc })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settlement {
    pub dayahead_generator_payments: Vec<f64>,
    pub dayahead_storage_payments: Vec<f64>,
    pub realtime_generator_payments: Vec<f64>,
    pub realtime_storage_payments: Vec<f64>,
    pub generator_payments: Vec<f64>,
    pub storage_payments: Vec<f64>,
    pub generator_costs: Vec<f64>,
    pub storage_costs: Vec<f64>,
    pub generator_profits: Vec<f64>,
    pub storage_profits: Vec<f64>,
    /// Load payments minus resource payments.
    pub merchandising_surplus: f64,
}

/// Total (day-ahead plus real-time) dispatch over the binding hours.
pub fn total_dispatch(da: &DayAheadResult, rt: &RealTimeRun) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let hours = rt.steps.len();
    let g = (0..da.g.len())
        .map(|j| {
            (0..hours)
                .map(|h| da.g[j][h] + rt.steps[h].g_r[j][0])
                .collect()
        })
        .collect();
    let u = (0..da.u.len())
        .map(|s| {
            (0..hours)
                .map(|h| da.u[s][h] + rt.steps[h].u_r[s][0])
                .collect()
        })
        .collect();
    (g, u)
}

/// Binding-hour settlement. Day-ahead: generators receive `lambda^d' g^d`,
/// storage receives its cycle payment `theta' N(u^d) u^d` restricted to the
/// binding hours. Real time: `lambda^r_h` times the binding adjustment.
/// Costs are charged on total dispatch.
pub fn settle(
    scenario: &DemandScenario,
    params: &MarketParams,
    da: &DayAheadResult,
    rt: &RealTimeRun,
) -> Result<Settlement> {
    let hours = rt.steps.len();
    let lam_r: Vec<f64> = rt.steps.iter().map(|s| s.lambda_r[0]).collect();
    let da_gen: Vec<f64> =
        da.g.iter()
            .map(|g| (0..hours).map(|t| da.lambda[t] * g[t]).sum())
            .collect();
    let mut da_st = Vec::new();
    for (s, (u, p)) in da.u.iter().zip(&params.storages).enumerate() {
        let map = rainflow_map(u, p.capacity_e, p.x0)?.map;
        let per_interval = map.transpose() * DVector::from_column_slice(&da.theta[s]);
        da_st.push((0..hours).map(|t| per_interval[t] * u[t]).sum::<f64>());
    }
    let rt_gen: Vec<f64> = (0..da.g.len())
        .map(|j| (0..hours).map(|h| lam_r[h] * rt.steps[h].g_r[j][0]).sum())
        .collect();
    let rt_st: Vec<f64> = (0..da.u.len())
        .map(|s| (0..hours).map(|h| lam_r[h] * rt.steps[h].u_r[s][0]).sum())
        .collect();
    let (g_tot, u_tot) = total_dispatch(da, rt);
    let generator_costs: Vec<f64> = g_tot
        .iter()
        .zip(&params.generators)
        .map(|(g, p)| generator_cost(g, p))
        .collect();
    let storage_costs: Vec<f64> = u_tot
        .iter()
        .zip(&params.storages)
        .map(|(u, p)| storage_cost(u, p))
        .collect();
    let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    let sub = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let generator_payments = add(&da_gen, &rt_gen);
    let storage_payments = add(&da_st, &rt_st);
    let load: f64 = (0..hours)
        .map(|t| {
            da.lambda[t] * scenario.forecast[t]
                + lam_r[t] * (scenario.actual[t] - scenario.forecast[t])
        })
        .sum();
    let paid: f64 = generator_payments.iter().chain(&storage_payments).sum();
    Ok(Settlement {
        generator_profits: sub(&generator_payments, &generator_costs),
        storage_profits: sub(&storage_payments, &storage_costs),
        dayahead_generator_payments: da_gen,
        dayahead_storage_payments: da_st,
        realtime_generator_payments: rt_gen,
        realtime_storage_payments: rt_st,
        generator_payments,
        storage_payments,
        generator_costs,
        storage_costs,
        merchandising_surplus: load - paid,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationRecord {
    pub mode: RealTimeMode,
    pub da_result: DayAheadResult,
    pub rt_steps: Vec<RealTimeResult>,
    pub soc: Vec<Vec<f64>>,
    pub total_g: Vec<Vec<f64>>,
    pub total_u: Vec<Vec<f64>>,
    pub settlement: Settlement,
    /// Generator plus degradation cost of total dispatch over binding hours.
    pub social_cost: f64,
}

pub fn simulate(
    scenario: &DemandScenario,
    params: &MarketParams,
    cfg: &SimulationConfig,
) -> Result<SimulationRecord> {
    let da = run_day_ahead(scenario, params, cfg)?;
    let rt = run_real_time(scenario, params, &da, cfg)?;
    let settlement = settle(scenario, params, &da, &rt)?;
    let (total_g, total_u) = total_dispatch(&da, &rt);
    let social_cost = settlement
        .generator_costs
        .iter()
        .chain(&settlement.storage_costs)
        .sum();
    Ok(SimulationRecord {
        mode: cfg.mode,
        da_result: da,
        rt_steps: rt.steps,
        soc: rt.soc,
        total_g,
        total_u,
        settlement,
        social_cost,
    })
}

/// Perfect-foresight planners on the realized binding-hour demand.
#[derive(Debug, Clone, Serialize)]
pub struct PlannerBounds {
    pub non_periodic: PlannerResult,
    pub periodic: PlannerResult,
}

pub fn planner_bounds(
    scenario: &DemandScenario,
    params: &MarketParams,
    cfg: &SimulationConfig,
) -> Result<PlannerBounds> {
    let d = scenario.actual.get(..cfg.binding_hours).ok_or_else(|| {
        MarketError::InvalidInput(format!(
            "scenario has fewer than {} realized hours",
            cfg.binding_hours
        ))
    })?;
    Ok(PlannerBounds {
        non_periodic: solve_planner(params, d, false, cfg.tol)?,
        periodic: solve_planner(params, d, true, cfg.tol)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichCheck {
    pub cost_lower: f64,
    pub cost: f64,
    pub cost_upper: f64,
    pub profit_non_periodic: f64,
    pub profit: f64,
    pub profit_periodic: f64,
    pub cost_holds: bool,
    pub profit_holds: bool,
}

/// Whether the mechanism's social cost lies between the non-periodic and
/// periodic planner costs, and its total storage profit between the two
/// planner storage profits (in either order). `rel_tol` is relative to the
/// planner cost.
pub fn sandwich(
    record: &SimulationRecord,
    bounds: &PlannerBounds,
    params: &MarketParams,
    rel_tol: f64,
) -> SandwichCheck {
    let lo = bounds.non_periodic.objective;
    let hi = bounds.periodic.objective;
    let slack = rel_tol * lo.abs().max(hi.abs()).max(1.0);
    let p_np: f64 = participant_profit(&bounds.non_periodic, params)
        .storages
        .iter()
        .sum();
    let p_p: f64 = participant_profit(&bounds.periodic, params)
        .storages
        .iter()
        .sum();
    let profit: f64 = record.settlement.storage_profits.iter().sum();
    let pslack = rel_tol * p_np.abs().max(p_p.abs()).max(1.0);
    SandwichCheck {
        cost_lower: lo,
        cost: record.social_cost,
        cost_upper: hi,
        profit_non_periodic: p_np,
        profit,
        profit_periodic: p_p,
        cost_holds: record.social_cost >= lo - slack && record.social_cost <= hi + slack,
        profit_holds: profit >= p_np.min(p_p) - pslack && profit <= p_np.max(p_p) + pslack,
    }
}
