//! Day-ahead clearing with supply-function bids `g = alpha * lambda` and
//! cycle-depth bids `nu = beta * theta`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::costs::{adjacent_piece_gradients, piece_gradient_along};
use crate::engine::{self, min_norm, Col, EngineOptions, NonsmoothProblem, StorageBlock};
use crate::error::{MarketError, Result};
use crate::model::{DispatchModel, GenTerm, StoreCost, StoreTerm};
use crate::params::MarketParams;
use crate::qp::QpProblem;
use crate::rainflow::rainflow_map;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DayAheadBids {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl DayAheadBids {
    fn validate(&self, params: &MarketParams) -> Result<()> {
        if self.alpha.len() != params.generators.len() || self.beta.len() != params.storages.len() {
            return Err(MarketError::InvalidInput(format!(
                "bid counts ({}, {}) do not match participants ({}, {})",
                self.alpha.len(),
                self.beta.len(),
                params.generators.len(),
                params.storages.len()
            )));
        }
        if self
            .alpha
            .iter()
            .chain(&self.beta)
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(MarketError::InvalidInput(
                "bid slopes must be finite and nonnegative".into(),
            ));
        }
        if self.alpha.iter().sum::<f64>() <= 0.0 {
            return Err(MarketError::InvalidInput(
                "at least one generator must bid a positive slope".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ClearingMode {
    /// Reduced aggregate problem with a proportional storage split.
    Uniform,
    /// Full problem with stage-wise limits and per-unit storage variables.
    General,
}

#[derive(Debug, Clone, Serialize)]
pub struct DayAheadResult {
    pub mode: ClearingMode,
    pub g: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// Convex weights over adjacent pieces at the storage dispatch (one
    /// entry when the cost is smooth there).
    pub gamma: Vec<Vec<f64>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub soc_enforced: bool,
    pub periodic: bool,
    pub iterations: usize,
}

impl DayAheadResult {
    pub fn horizon(&self) -> usize {
        self.lambda.len()
    }
}

/// First-order optimal price-taker bids: `alpha = 1/c`, `beta = 1/b`.
pub fn equilibrium_bids_dayahead(params: &MarketParams) -> DayAheadBids {
    DayAheadBids {
        alpha: params.generators.iter().map(|g| 1.0 / g.c).collect(),
        beta: params.storages.iter().map(|s| 1.0 / s.b).collect(),
    }
}

fn check_demand(d: &[f64]) -> Result<()> {
    if d.is_empty() {
        return Err(MarketError::InvalidInput("empty demand vector".into()));
    }
    if let Some(t) = d.iter().position(|v| !v.is_finite()) {
        return Err(MarketError::InvalidInput(format!(
            "non-finite demand at interval {t}"
        )));
    }
    Ok(())
}

fn clearing_objective(g: &[Vec<f64>], nu: &[Vec<f64>], bids: &DayAheadBids) -> f64 {
    let mut f = 0.0;
    for (gj, a) in g.iter().zip(&bids.alpha) {
        if *a > 0.0 {
            f += gj.iter().map(|v| v * v).sum::<f64>() / (2.0 * a);
        }
    }
    for (ns, b) in nu.iter().zip(&bids.beta) {
        if *b > 0.0 {
            f += ns.iter().map(|v| v * v).sum::<f64>() / (2.0 * b);
        }
    }
    f
}

/// Uniform-price clearing via the reduced aggregate problem
/// `min |u|^2/(2A) - <d,u>/A + |N(u)u|^2/(2B)` subject to `1'u = 0`, with
/// `A = sum alpha`, `B = sum beta`, and the split `u_s = (beta_s / B) u`.
///
/// Inequality limits are ignored (assumed non-binding). All storage units
/// must share one capacity so that they share one Rainflow map.
pub fn clear_uniform(
    bids: &DayAheadBids,
    d_da: &[f64],
    params: &MarketParams,
    tol: f64,
) -> Result<DayAheadResult> {
    bids.validate(params)?;
    check_demand(d_da)?;
    let t_len = d_da.len();
    let a_sum: f64 = bids.alpha.iter().sum();
    let b_sum: f64 = bids.beta.iter().sum();
    let ns = params.storages.len();
    let capacity = params.storages.first().map(|s| s.capacity_e);
    if let Some(e) = capacity {
        if params.storages.iter().any(|s| s.capacity_e != e) {
            return Err(MarketError::InvalidInput(
                "uniform clearing needs identical storage capacities (one shared Rainflow map)"
                    .into(),
            ));
        }
    }

    let (u, delta, iterations, gamma) = if ns == 0 || b_sum <= 0.0 {
        (vec![0.0; t_len], 0.0, 0, vec![1.0])
    } else {
        let mut qp = QpProblem::new(t_len);
        qp.p = DMatrix::identity(t_len, t_len) / a_sum;
        qp.q = DVector::from_iterator(t_len, d_da.iter().map(|v| -v / a_sum));
        qp.a_eq = DMatrix::from_element(1, t_len, 1.0);
        qp.b_eq = DVector::zeros(1);
        let prob = NonsmoothProblem {
            qp,
            blocks: vec![StorageBlock {
                offset: 0,
                len: t_len,
                capacity_e: capacity.unwrap_or(1.0),
                weight: 1.0 / b_sum,
            }],
        };
        let mean = d_da.iter().sum::<f64>() / t_len as f64;
        let init = DVector::from_iterator(t_len, d_da.iter().map(|v| v - mean));
        let sol = engine::solve(
            &prob,
            &init,
            &EngineOptions {
                tol,
                ..EngineOptions::default()
            },
        )?;
        // Stationarity reads (u - d)/A + s + y 1 = 0, so lambda = s + y 1.
        let dscale = d_da.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let u = crate::model::snap_noise(sol.x.iter().copied().collect(), dscale);
        (u, sol.y[0], sol.iterations, sol.blocks[0].gamma.clone())
    };

    let lambda: Vec<f64> = d_da.iter().zip(&u).map(|(d, v)| (d - v) / a_sum).collect();
    let g: Vec<Vec<f64>> = bids
        .alpha
        .iter()
        .map(|a| lambda.iter().map(|l| a * l).collect())
        .collect();
    let epsilon: Vec<f64> = bids
        .beta
        .iter()
        .map(|b| if b_sum > 0.0 { b / b_sum } else { 0.0 })
        .collect();
    let us: Vec<Vec<f64>> = epsilon
        .iter()
        .map(|e| u.iter().map(|v| e * v).collect())
        .collect();
    let (nu, theta) = if ns == 0 {
        (Vec::new(), Vec::new())
    } else {
        let e = capacity.unwrap_or(1.0);
        let agg = rainflow_map(&u, e, 0.5)?.depths;
        let shared: Vec<f64> = if b_sum > 0.0 {
            agg.iter().map(|v| v / b_sum).collect()
        } else {
            vec![0.0; agg.len()]
        };
        let nu = epsilon
            .iter()
            .map(|eps| agg.iter().map(|v| eps * v).collect())
            .collect();
        (nu, vec![shared; ns])
    };
    let mut result = DayAheadResult {
        mode: ClearingMode::Uniform,
        objective: clearing_objective(&g, &nu, bids),
        g,
        u: us,
        nu,
        lambda,
        theta,
        delta: vec![delta; ns],
        epsilon,
        gamma: vec![gamma; ns],
        kkt_residual: 0.0,
        soc_enforced: false,
        periodic: true,
        iterations,
    };
    result.kkt_residual = verify_kkt_dayahead(&result, bids, d_da, params).max;
    Ok(result)
}

#[derive(Debug, Clone, Copy)]
pub struct GeneralOptions {
    /// Enforce `0 <= SoC <= 1` (off by default, matching the listed constraints).
    pub soc_bounds: bool,
    pub periodic: bool,
}

impl Default for GeneralOptions {
    fn default() -> Self {
        Self {
            soc_bounds: false,
            periodic: true,
        }
    }
}

/// Clearing of the full day-ahead problem with stage-wise limits and
/// periodicity. Prices are the duals of the balance and periodicity rows.
pub fn clear_general(
    bids: &DayAheadBids,
    d_da: &[f64],
    params: &MarketParams,
    opts: GeneralOptions,
    tol: f64,
) -> Result<DayAheadResult> {
    bids.validate(params)?;
    check_demand(d_da)?;
    let t_len = d_da.len();
    let model = DispatchModel {
        demand: d_da.to_vec(),
        gens: params
            .generators
            .iter()
            .zip(&bids.alpha)
            .map(|(g, &a)| GenTerm {
                quad: if a > 0.0 { 1.0 / a } else { 1.0 },
                lin: vec![0.0; t_len],
                lower: vec![g.g_min; t_len],
                upper: vec![g.g_max; t_len],
                fixed_zero: a <= 0.0,
            })
            .collect(),
        stores: params
            .storages
            .iter()
            .zip(&bids.beta)
            .map(|(s, &b)| StoreTerm {
                cost: StoreCost::Degradation(if b > 0.0 { 1.0 / b } else { 1.0 }),
                capacity_e: s.capacity_e,
                lower: vec![s.u_min; t_len],
                upper: vec![s.u_max; t_len],
                periodic: opts.periodic,
                soc_x0: opts.soc_bounds.then_some(s.x0),
                fixed_zero: b <= 0.0,
            })
            .collect(),
    };
    let sol = model.solve(tol)?;
    let b_sum: f64 = bids.beta.iter().sum();
    let mut nu = Vec::new();
    let mut theta = Vec::new();
    for ((u, s), &b) in sol.u.iter().zip(&params.storages).zip(&bids.beta) {
        let depths = rainflow_map(u, s.capacity_e, s.x0)?.depths;
        theta.push(if b > 0.0 {
            depths.iter().map(|v| v / b).collect()
        } else {
            vec![0.0; depths.len()]
        });
        nu.push(depths);
    }
    let mut gamma = Vec::new();
    let mut bi = 0;
    for &b in &bids.beta {
        if b > 0.0 {
            gamma.push(sol.engine.blocks[bi].gamma.clone());
            bi += 1;
        } else {
            gamma.push(vec![1.0]);
        }
    }
    let mut result = DayAheadResult {
        mode: ClearingMode::General,
        objective: clearing_objective(&sol.g, &nu, bids),
        g: sol.g,
        u: sol.u,
        nu,
        lambda: sol.lambda,
        theta,
        delta: sol.delta,
        epsilon: bids
            .beta
            .iter()
            .map(|b| if b_sum > 0.0 { b / b_sum } else { 0.0 })
            .collect(),
        gamma,
        kkt_residual: 0.0,
        soc_enforced: opts.soc_bounds,
        periodic: opts.periodic,
        iterations: sol.engine.iterations,
    };
    result.kkt_residual = verify_kkt_dayahead(&result, bids, d_da, params).max;
    Ok(result)
}

const MAX_VERIFY_ROUNDS: usize = 200;

/// Violations of the day-ahead KKT system, each scaled to its natural unit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KktReport {
    pub balance: f64,
    pub depth_map: f64,
    pub depth_price: f64,
    pub generator_price: f64,
    pub stationarity: f64,
    pub periodicity: f64,
    pub max: f64,
}

fn active(v: f64, bound: f64) -> bool {
    bound.is_finite() && (v - bound).abs() <= 1e-9 * (1.0 + bound.abs())
}

/// Checks balance, `nu = N(u)u`, `nu = beta theta`, `g = alpha lambda`,
/// storage stationarity `lambda - delta 1 in sum_k gamma_k N_k'N_k u / beta`
/// (plus normal cones of active limits in general mode) and periodicity.
///
/// The adjacent pieces are found independently of the solver by probing.
pub fn verify_kkt_dayahead(
    result: &DayAheadResult,
    bids: &DayAheadBids,
    d_da: &[f64],
    params: &MarketParams,
) -> KktReport {
    let t_len = d_da.len();
    let dscale = d_da.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let pscale = result.lambda.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let limits = result.mode == ClearingMode::General;
    let mut rep = KktReport::default();

    for t in 0..t_len {
        let supply: f64 =
            result.g.iter().map(|g| g[t]).sum::<f64>() + result.u.iter().map(|u| u[t]).sum::<f64>();
        rep.balance = rep.balance.max((supply - d_da[t]).abs() / dscale);
    }

    for (j, (g, &a)) in result.g.iter().zip(&bids.alpha).enumerate() {
        if a <= 0.0 {
            rep.generator_price = rep
                .generator_price
                .max(g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / dscale);
            continue;
        }
        let p = &params.generators[j];
        for t in 0..t_len {
            let v = result.lambda[t] - g[t] / a;
            let viol = if limits && active(g[t], p.g_max) {
                (-v).max(0.0)
            } else if limits && active(g[t], p.g_min) {
                v.max(0.0)
            } else {
                v.abs()
            };
            rep.generator_price = rep.generator_price.max(viol / pscale);
        }
    }

    for (s, sp) in params.storages.iter().enumerate() {
        let u = &result.u[s];
        let b = bids.beta[s];
        let depths = match rainflow_map(u, sp.capacity_e, sp.x0) {
            Ok(r) => r.depths,
            Err(_) => {
                rep.depth_map = f64::INFINITY;
                continue;
            }
        };
        let nu = &result.nu[s];
        let nscale = depths.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if depths.len() != nu.len() {
            rep.depth_map = rep.depth_map.max(1.0);
        } else {
            for (x, y) in depths.iter().zip(nu) {
                rep.depth_map = rep.depth_map.max((x - y).abs() / nscale);
            }
        }
        if nu.len() == result.theta[s].len() {
            for (n, th) in nu.iter().zip(&result.theta[s]) {
                rep.depth_price = rep.depth_price.max((n - b * th).abs() / nscale);
            }
        } else {
            rep.depth_price = rep.depth_price.max(1.0);
        }
        let periodic_sum: f64 = u.iter().sum();
        if result.periodic {
            rep.periodicity = rep.periodicity.max(periodic_sum.abs() / dscale);
        }
        if b <= 0.0 {
            continue;
        }

        // Stationarity as a min-norm problem over the adjacent pieces and
        // the normal cone of the active limits.
        let target =
            DVector::from_iterator(t_len, result.lambda.iter().map(|l| l - result.delta[s]));
        let pieces = adjacent_piece_gradients(u, sp.capacity_e, 1.0 / b);
        let mut cols = Vec::new();
        let mut columns: Vec<DVector<f64>> = Vec::new();
        for p in &pieces {
            columns.push(DVector::from_column_slice(p));
            cols.push(Col::Simplex(0));
        }
        if limits {
            for t in 0..t_len {
                if active(u[t], sp.u_max) {
                    let mut e = DVector::zeros(t_len);
                    e[t] = 1.0;
                    columns.push(e);
                    cols.push(Col::Nonneg);
                } else if active(u[t], sp.u_min) {
                    let mut e = DVector::zeros(t_len);
                    e[t] = -1.0;
                    columns.push(e);
                    cols.push(Col::Nonneg);
                }
            }
        }
        if result.soc_enforced {
            let mut level = sp.x0;
            for t in 0..t_len {
                level -= u[t] / sp.capacity_e;
                for (bound, sign) in [(0.0, 1.0), (1.0, -1.0)] {
                    if (level - bound).abs() <= 1e-9 {
                        let mut a = DVector::zeros(t_len);
                        for k in 0..=t {
                            a[k] = sign / sp.capacity_e;
                        }
                        columns.push(a);
                        cols.push(Col::Nonneg);
                    }
                }
            }
        }
        // With many idle hours not every piece is enumerated up front; add
        // the piece attaining the directional derivative along the current
        // min-norm direction until it no longer improves the bound.
        let c0 = -&target;
        let mut stat = f64::INFINITY;
        for _ in 0..MAX_VERIFY_ROUNDS {
            let m = DMatrix::from_columns(&columns);
            let Ok(w) = min_norm(&c0, &m, &cols, 1) else {
                stat = f64::INFINITY;
                break;
            };
            let gvec = &c0 + &m * &w;
            stat = gvec.amax();
            if stat <= 1e-14 * pscale {
                break;
            }
            let level = (0..cols.len())
                .filter(|&i| cols[i] == Col::Simplex(0) && w[i] > 1e-12)
                .map(|i| m.column(i).dot(&gvec))
                .fold(f64::INFINITY, f64::min);
            let dir: Vec<f64> = gvec.iter().map(|v| -v).collect();
            let mut added = false;
            for hint in [1, -1] {
                let g =
                    DVector::from_vec(piece_gradient_along(u, &dir, sp.capacity_e, 1.0 / b, hint));
                if g.dot(&gvec) < level - 1e-12 * gvec.norm() * g.norm().max(1.0) {
                    columns.insert(0, g);
                    cols.insert(0, Col::Simplex(0));
                    added = true;
                }
            }
            if !added {
                break;
            }
        }
        rep.stationarity = rep.stationarity.max(stat / pscale);
    }

    rep.max = [
        rep.balance,
        rep.depth_map,
        rep.depth_price,
        rep.generator_price,
        rep.stationarity,
        rep.periodicity,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    rep
}
