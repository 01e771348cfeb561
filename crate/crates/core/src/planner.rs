//! Social-planner benchmark with perfect foresight, with or without the
//! periodicity constraint on storage.

use serde::Serialize;

use crate::costs::{generator_cost, storage_cost};
use crate::error::Result;
use crate::model::{DispatchModel, GenTerm, StoreCost, StoreTerm};
use crate::params::MarketParams;

#[derive(Debug, Clone, Serialize)]
pub struct PlannerResult {
    pub g: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// Balance dual, used as the settlement price.
    pub lambda: Vec<f64>,
    pub delta: Vec<f64>,
    pub objective: f64,
    pub periodic: bool,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipantProfits {
    pub generators: Vec<f64>,
    pub storages: Vec<f64>,
}

/// Minimises total generator and degradation cost subject to balance,
/// dispatch limits, SoC bounds and (optionally) periodicity.
pub fn solve_planner(
    params: &MarketParams,
    d: &[f64],
    periodic: bool,
    tol: f64,
) -> Result<PlannerResult> {
    if d.is_empty() || d.iter().any(|v| !v.is_finite()) {
        return Err(crate::MarketError::InvalidInput(
            "demand must be non-empty and finite".into(),
        ));
    }
    let t_len = d.len();
    let model = DispatchModel {
        demand: d.to_vec(),
        gens: params
            .generators
            .iter()
            .map(|g| GenTerm {
                quad: g.c,
                lin: vec![g.a; t_len],
                lower: vec![g.g_min; t_len],
                upper: vec![g.g_max; t_len],
                fixed_zero: false,
            })
            .collect(),
        stores: params
            .storages
            .iter()
            .map(|s| StoreTerm {
                cost: StoreCost::Degradation(s.b),
                capacity_e: s.capacity_e,
                lower: vec![s.u_min; t_len],
                upper: vec![s.u_max; t_len],
                periodic,
                soc_x0: Some(s.x0),
                fixed_zero: false,
            })
            .collect(),
    };
    let sol = model.solve(tol)?;
    let objective = sol
        .g
        .iter()
        .zip(&params.generators)
        .map(|(g, p)| generator_cost(g, p))
        .sum::<f64>()
        + sol
            .u
            .iter()
            .zip(&params.storages)
            .map(|(u, p)| storage_cost(u, p))
            .sum::<f64>();
    Ok(PlannerResult {
        g: sol.g,
        u: sol.u,
        lambda: sol.lambda,
        delta: sol.delta,
        objective,
        periodic,
        kkt_residual: sol.engine.residual,
        iterations: sol.engine.iterations,
    })
}

/// Profits settled at the balance dual: `<lambda, x> - C(x)`.
pub fn participant_profit(result: &PlannerResult, params: &MarketParams) -> ParticipantProfits {
    let pay = |x: &[f64]| -> f64 { x.iter().zip(&result.lambda).map(|(a, b)| a * b).sum() };
    ParticipantProfits {
        generators: result
            .g
            .iter()
            .zip(&params.generators)
            .map(|(g, p)| pay(g) - generator_cost(g, p))
            .collect(),
        storages: result
            .u
            .iter()
            .zip(&params.storages)
            .map(|(u, p)| pay(u) - storage_cost(u, p))
            .collect(),
    }
}
