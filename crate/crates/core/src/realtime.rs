//! Real-time market: day-ahead-unaware and day-ahead-aware bidding, plus the
//! constrained window clearing used by the rolling simulation.
//!
//! Unaware participants bid affine adjustments `g^r = alpha lambda`,
//! `u^r = beta lambda` and value them against their day-ahead position.
//! Aware participants bid totals, `g^d + g^r = alpha lambda`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dayahead::DayAheadResult;
use crate::error::{MarketError, Result};
use crate::model::{DispatchModel, GenTerm, StoreCost, StoreTerm};
use crate::params::MarketParams;
use crate::rainflow::rainflow_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RealTimeMode {
    Unaware,
    Aware,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealTimeBids {
    pub alpha_r: Vec<f64>,
    pub beta_r: Vec<f64>,
    pub mode: RealTimeMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct RealTimeResult {
    pub mode: RealTimeMode,
    /// Real-time adjustments (not totals).
    pub g_r: Vec<Vec<f64>>,
    pub u_r: Vec<Vec<f64>>,
    pub lambda_r: Vec<f64>,
    /// `omega` (unaware, `lambda = omega d^r`) or `phi` (aware, `lambda = phi d`).
    /// NaN for the constrained clearing, where prices are not proportional.
    pub price_scale: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Unaware mode: whether every storage keeps its day-ahead Rainflow map.
    pub map_stable: bool,
    pub warnings: Vec<String>,
    /// Price-scale iterates (best response only).
    pub trace: Vec<f64>,
}

/// Day-ahead positions aligned with a real-time window.
#[derive(Debug, Clone, PartialEq)]
pub struct Commitments {
    pub g: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl Commitments {
    pub fn from_dayahead(da: &DayAheadResult) -> Self {
        Self {
            g: da.g.clone(),
            u: da.u.clone(),
        }
    }

    /// Intervals `start..start+len` of the day-ahead schedule.
    pub fn window(da: &DayAheadResult, start: usize, len: usize) -> Self {
        let cut = |v: &Vec<f64>| v[start..start + len].to_vec();
        Self {
            g: da.g.iter().map(cut).collect(),
            u: da.u.iter().map(cut).collect(),
        }
    }

    fn check(&self, params: &MarketParams, t_len: usize) -> Result<()> {
        if self.g.len() != params.generators.len() || self.u.len() != params.storages.len() {
            return Err(MarketError::InvalidInput(
                "commitments do not match the participant list".into(),
            ));
        }
        if self.g.iter().chain(&self.u).any(|v| v.len() != t_len) {
            return Err(MarketError::InvalidInput(format!(
                "commitments are not aligned with the {t_len}-interval window"
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

fn check_vector(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(MarketError::InvalidInput(format!("empty {what} vector")));
    }
    if let Some(t) = v.iter().position(|x| !x.is_finite()) {
        return Err(MarketError::InvalidInput(format!(
            "non-finite {what} at interval {t}"
        )));
    }
    Ok(())
}

/// Per-storage data of the unaware mechanism at a fixed residual direction:
/// `M d^r` and `<theta, M d^r>` with `M = N(u^d)`.
struct UnawareStore {
    md: Vec<f64>,
    theta_md: f64,
    b: f64,
}

struct UnawareSetup {
    dr_norm2: f64,
    gen_proj: Vec<f64>,
    stores: Vec<Option<UnawareStore>>,
    warnings: Vec<String>,
}

fn unaware_setup(params: &MarketParams, d_r: &[f64], da: &DayAheadResult) -> Result<UnawareSetup> {
    check_vector(d_r, "residual demand")?;
    let t_len = d_r.len();
    if da.horizon() != t_len {
        return Err(MarketError::InvalidInput(format!(
            "residual demand has {t_len} intervals, day-ahead result has {}",
            da.horizon()
        )));
    }
    Commitments::from_dayahead(da).check(params, t_len)?;
    let dr_norm2 = norm2(d_r);
    if dr_norm2 == 0.0 {
        return Err(MarketError::DegenerateDemand(
            "residual demand is zero; the price scale is undefined".into(),
        ));
    }
    let gen_proj = da.g.iter().map(|g| dot(g, d_r) / dr_norm2).collect();
    let mut stores = Vec::new();
    let mut warnings = Vec::new();
    for (s, (u, p)) in da.u.iter().zip(&params.storages).enumerate() {
        let dec = rainflow_map(u, p.capacity_e, p.x0)?;
        let md: Vec<f64> = (&dec.map * DVector::from_column_slice(d_r))
            .iter()
            .copied()
            .collect();
        if norm2(&md) <= 1e-24 * dr_norm2 / (p.capacity_e * p.capacity_e) {
            // Any adjustment would land on intervals the day-ahead map does
            // not cover and change it, so the unit sits out.
            warnings.push(format!("storage {s}: residual demand is invisible to its day-ahead cycle map; beta set to 0"));
            stores.push(None);
            continue;
        }
        let theta = da
            .theta
            .get(s)
            .filter(|th| th.len() == md.len())
            .ok_or_else(|| {
                MarketError::InvalidInput(format!(
                    "storage {s}: day-ahead cycle prices do not match its cycle map"
                ))
            })?;
        stores.push(Some(UnawareStore {
            theta_md: dot(theta, &md),
            md,
            b: p.b,
        }));
    }
    Ok(UnawareSetup {
        dr_norm2,
        gen_proj,
        stores,
        warnings,
    })
}

impl UnawareSetup {
    /// Best-response bids to `lambda = omega d^r`.
    fn bids(&self, params: &MarketParams, omega: f64) -> (Vec<f64>, Vec<f64>) {
        let alpha = params
            .generators
            .iter()
            .zip(&self.gen_proj)
            .map(|(g, pr)| 1.0 / g.c - pr / omega)
            .collect();
        let beta = self
            .stores
            .iter()
            .map(|st| match st {
                None => 0.0,
                Some(st) => {
                    let m2 = norm2(&st.md);
                    (self.dr_norm2 - st.theta_md / omega) / (st.b * m2)
                }
            })
            .collect();
        (alpha, beta)
    }

    /// `S` and `X` of the fixed-point equation `S omega - X = 1`.
    fn slope_terms(&self, params: &MarketParams) -> (f64, f64) {
        let mut s = params.sum_inv_c();
        let mut x: f64 = self.gen_proj.iter().sum();
        for st in self.stores.iter().flatten() {
            let m2 = norm2(&st.md);
            s += self.dr_norm2 / (st.b * m2);
            x += st.theta_md / (st.b * m2);
        }
        (s, x)
    }
}

fn unaware_result(
    params: &MarketParams,
    d_r: &[f64],
    da: &DayAheadResult,
    setup: UnawareSetup,
    omega: f64,
    iterations: usize,
    trace: Vec<f64>,
) -> Result<(RealTimeBids, RealTimeResult)> {
    let (alpha, beta) = setup.bids(params, omega);
    let lambda: Vec<f64> = d_r.iter().map(|v| omega * v).collect();
    let g_r: Vec<Vec<f64>> = alpha
        .iter()
        .map(|a| lambda.iter().map(|l| a * l).collect())
        .collect();
    let u_r: Vec<Vec<f64>> = beta
        .iter()
        .map(|b| lambda.iter().map(|l| b * l).collect())
        .collect();
    let mut warnings = setup.warnings;
    let aggregate: f64 = alpha.iter().chain(&beta).sum();
    if !(aggregate > 0.0) {
        warnings.push(format!("aggregate real-time slope {aggregate:.6e} is not positive; prices move against the residual"));
    }
    let mut map_stable = true;
    for (s, ((ud, ur), p)) in da.u.iter().zip(&u_r).zip(&params.storages).enumerate() {
        let before = rainflow_map(ud, p.capacity_e, p.x0)?.map;
        let total: Vec<f64> = ud.iter().zip(ur).map(|(a, b)| a + b).collect();
        let after = rainflow_map(&total, p.capacity_e, p.x0)?.map;
        if before != after {
            map_stable = false;
            warnings.push(format!(
                "storage {s}: the real-time adjustment changes the day-ahead cycle map"
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((
        RealTimeBids {
            alpha_r: alpha,
            beta_r: beta,
            mode: RealTimeMode::Unaware,
        },
        RealTimeResult {
            mode: RealTimeMode::Unaware,
            g_r,
            u_r,
            lambda_r: lambda,
            price_scale: omega,
            iterations,
            converged: true,
            map_stable,
            warnings,
            trace,
        },
    ))
}

/// Closed-form unaware equilibrium `lambda^r = omega d^r`.
///
/// Summing the best-response bids and imposing balance gives
/// `omega = (1 + X) / S` with
/// `S = sum 1/c + sum |d^r|^2 / (b |M d^r|^2)` and
/// `X = sum <g^d, d^r>/|d^r|^2 + sum <theta, M d^r> / (b |M d^r|^2)`,
/// where `M` is each unit's day-ahead Rainflow map.
pub fn equilibrium_unaware(
    params: &MarketParams,
    d_r: &[f64],
    da: &DayAheadResult,
) -> Result<(RealTimeBids, RealTimeResult)> {
    let setup = unaware_setup(params, d_r, da)?;
    let (s, x) = setup.slope_terms(params);
    if !(s > 0.0) {
        return Err(MarketError::DegenerateDemand(
            "aggregate real-time slope is not positive".into(),
        ));
    }
    let omega = (1.0 + x) / s;
    if omega == 0.0 {
        return Err(MarketError::DegenerateDemand(
            "equilibrium price scale is zero".into(),
        ));
    }
    unaware_result(params, d_r, da, setup, omega, 0, vec![omega])
}

/// The published form `omega = <lambda^d, d^r>/|d^r|^2 + 1/S`.
///
/// It agrees with [`equilibrium_unaware`] whenever the periodicity price
/// term `delta <1, d^r>` vanishes (for instance without storage, or for a
/// zero-sum residual).
pub fn omega_published(params: &MarketParams, d_r: &[f64], da: &DayAheadResult) -> Result<f64> {
    let setup = unaware_setup(params, d_r, da)?;
    let (s, _) = setup.slope_terms(params);
    Ok(dot(&da.lambda, d_r) / setup.dr_norm2 + 1.0 / s)
}

/// Iterated best response between participants and the operator.
///
/// Each round participants best-respond to `lambda = omega d^r`, and the
/// operator moves `omega` to clear `sum(alpha + beta) lambda = d^r`. The
/// clearing residual `omega * sum(alpha + beta) - 1` is affine in `omega`,
/// so the operator uses a secant step on it (the first step is the plain
/// clearing price averaged with the previous iterate).
pub fn best_response_unaware(
    params: &MarketParams,
    d_r: &[f64],
    da: &DayAheadResult,
    tol: f64,
    max_iter: usize,
) -> Result<(RealTimeBids, RealTimeResult)> {
    best_response_unaware_from(params, d_r, da, tol, max_iter, None)
}

/// [`best_response_unaware`] with an explicit starting price scale.
pub fn best_response_unaware_from(
    params: &MarketParams,
    d_r: &[f64],
    da: &DayAheadResult,
    tol: f64,
    max_iter: usize,
    omega0: Option<f64>,
) -> Result<(RealTimeBids, RealTimeResult)> {
    let setup = unaware_setup(params, d_r, da)?;
    let slope = |omega: f64| -> f64 {
        let (a, b) = setup.bids(params, omega);
        a.iter().sum::<f64>() + b.iter().sum::<f64>()
    };
    let dr_inf = d_r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut omega = match omega0 {
        Some(w) if w.is_finite() && w != 0.0 => w,
        Some(w) => {
            return Err(MarketError::InvalidInput(format!(
                "initial price scale must be finite and non-zero, got {w}"
            )))
        }
        None => {
            let s0 = params.sum_inv_c();
            if s0 > 0.0 {
                1.0 / s0
            } else {
                1.0
            }
        }
    };
    let mut trace = vec![omega];
    let mut prev: Option<(f64, f64)> = None;
    for k in 1..=max_iter {
        let sigma = slope(omega);
        let r = omega * sigma - 1.0;
        let next = match prev {
            Some((w0, r0)) if r != r0 => {
                let s = (r - r0) / (omega - w0);
                if !(s > 0.0) {
                    return Err(MarketError::Divergence {
                        iteration: k,
                        slope: s,
                    });
                }
                omega - r / s
            }
            _ => {
                if !(sigma > 0.0) {
                    // Plain clearing is undefined here; nudge the price to get a secant.
                    omega * 1.5
                } else {
                    0.5 * omega + 0.5 / sigma
                }
            }
        };
        prev = Some((omega, r));
        let step = (next - omega).abs() * dr_inf;
        omega = next;
        trace.push(omega);
        if step <= tol * (omega.abs() * dr_inf).max(1.0) {
            return unaware_result(params, d_r, da, setup, omega, k, trace);
        }
    }
    Err(MarketError::NonConvergence {
        iterations: max_iter,
        trace,
    })
}

/// Balance and first-order-condition residuals of an unaware outcome,
/// relative to `|d^r|_inf` and `|lambda|^2`.
pub fn unaware_residuals(
    params: &MarketParams,
    d_r: &[f64],
    da: &DayAheadResult,
    res: &RealTimeResult,
) -> Result<(f64, f64)> {
    let dscale = d_r.iter().fold(1e-300_f64, |m, v| m.max(v.abs()));
    let mut bal = 0.0_f64;
    for t in 0..d_r.len() {
        let s: f64 = res.g_r.iter().chain(&res.u_r).map(|v| v[t]).sum();
        bal = bal.max((s - d_r[t]).abs() / dscale);
    }
    let lam = &res.lambda_r;
    let l2 = norm2(lam);
    let mut foc = 0.0_f64;
    for ((gd, gr), p) in da.g.iter().zip(&res.g_r).zip(&params.generators) {
        // d/dalpha of <lambda, alpha lambda> - (c/2)|g^d + alpha lambda|^2 + (c/2)|g^d|^2
        let tot: Vec<f64> = gd.iter().zip(gr).map(|(a, b)| a + b).collect();
        foc = foc.max((l2 - p.c * dot(&tot, lam)).abs() / l2);
    }
    for (s, ((ud, ur), p)) in da.u.iter().zip(&res.u_r).zip(&params.storages).enumerate() {
        let dec = rainflow_map(ud, p.capacity_e, p.x0)?;
        let ml: Vec<f64> = (&dec.map * DVector::from_column_slice(lam))
            .iter()
            .copied()
            .collect();
        if norm2(&ml) <= 1e-24 * l2 {
            continue;
        }
        let mu: Vec<f64> = (&dec.map * DVector::from_column_slice(ur))
            .iter()
            .copied()
            .collect();
        let theta = &da.theta[s];
        // d/dbeta of <lambda, beta lambda> - <theta, M beta lambda> - (b/2)|M beta lambda|^2
        let g = l2 - dot(theta, &ml) - p.b * dot(&mu, &ml);
        foc = foc.max(g.abs() / l2);
    }
    Ok((bal, foc))
}

/// Closed-form aware equilibrium `lambda^r = phi d` on total demand.
pub fn equilibrium_aware(
    params: &MarketParams,
    d_total: &[f64],
    da: &DayAheadResult,
) -> Result<(RealTimeBids, RealTimeResult)> {
    if da.horizon() != d_total.len() {
        return Err(MarketError::InvalidInput(format!(
            "demand has {} intervals, day-ahead result has {}",
            d_total.len(),
            da.horizon()
        )));
    }
    equilibrium_aware_window(params, d_total, &Commitments::from_dayahead(da))
}

/// [`equilibrium_aware`] against explicit commitments (one real-time window).
///
/// `phi^-1 = sum |d|^2 / (b |N(d) d|^2) + sum 1/c`, `alpha = 1/c`,
/// `beta = |lambda|^2 / (b |N(lambda) lambda|^2)`.
pub fn equilibrium_aware_window(
    params: &MarketParams,
    d_total: &[f64],
    commit: &Commitments,
) -> Result<(RealTimeBids, RealTimeResult)> {
    check_vector(d_total, "demand")?;
    let t_len = d_total.len();
    commit.check(params, t_len)?;
    let d2 = norm2(d_total);
    if d2 == 0.0 {
        return Err(MarketError::DegenerateDemand(
            "total demand is zero; the price scale is undefined".into(),
        ));
    }
    let mut inv_phi = params.sum_inv_c();
    for p in &params.storages {
        let nd = rainflow_map(d_total, p.capacity_e, p.x0)?.depths;
        inv_phi += d2 / (p.b * norm2(&nd));
    }
    if !(inv_phi > 0.0) {
        return Err(MarketError::DegenerateDemand(
            "no participant offers a positive slope".into(),
        ));
    }
    let phi = 1.0 / inv_phi;
    let lambda: Vec<f64> = d_total.iter().map(|v| phi * v).collect();
    let l2 = norm2(&lambda);
    let alpha: Vec<f64> = params.generators.iter().map(|g| 1.0 / g.c).collect();
    let mut beta = Vec::new();
    for p in &params.storages {
        let nl = rainflow_map(&lambda, p.capacity_e, p.x0)?.depths;
        beta.push(l2 / (p.b * norm2(&nl)));
    }
    let adjust = |slope: f64, committed: &Vec<f64>| -> Vec<f64> {
        lambda
            .iter()
            .zip(committed)
            .map(|(l, c)| slope * l - c)
            .collect()
    };
    let g_r = alpha
        .iter()
        .zip(&commit.g)
        .map(|(a, g)| adjust(*a, g))
        .collect();
    let u_r = beta
        .iter()
        .zip(&commit.u)
        .map(|(b, u)| adjust(*b, u))
        .collect();
    Ok((
        RealTimeBids {
            alpha_r: alpha,
            beta_r: beta,
            mode: RealTimeMode::Aware,
        },
        RealTimeResult {
            mode: RealTimeMode::Aware,
            g_r,
            u_r,
            lambda_r: lambda,
            price_scale: phi,
            iterations: 0,
            converged: true,
            map_stable: true,
            warnings: Vec::new(),
            trace: vec![phi],
        },
    ))
}

/// Clears one real-time window under aware bids with operating limits.
///
/// The operator minimises the bid-implied costs `|G|^2/(2 alpha)` and
/// `|U|^2/(2 beta)` of total dispatch (these reproduce the bids exactly when
/// no limit binds), subject to balance, total and stage-wise limits and the
/// SoC bounds starting from `soc0`. There is no periodicity constraint.
pub fn clear_constrained_aware(
    bids: &RealTimeBids,
    window_demand: &[f64],
    commit: &Commitments,
    soc0: &[f64],
    params: &MarketParams,
    tol: f64,
) -> Result<RealTimeResult> {
    check_vector(window_demand, "window demand")?;
    let t_len = window_demand.len();
    commit.check(params, t_len)?;
    if bids.alpha_r.len() != params.generators.len() || bids.beta_r.len() != params.storages.len() {
        return Err(MarketError::InvalidInput(
            "bid counts do not match participants".into(),
        ));
    }
    if soc0.len() != params.storages.len() {
        return Err(MarketError::InvalidInput(
            "one initial SoC per storage is required".into(),
        ));
    }
    if bids
        .alpha_r
        .iter()
        .chain(&bids.beta_r)
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return Err(MarketError::InvalidInput(
            "real-time bid slopes must be finite and nonnegative".into(),
        ));
    }
    let gens = params
        .generators
        .iter()
        .zip(&bids.alpha_r)
        .zip(&commit.g)
        .map(|((g, &a), gd)| {
            let span = g.g_max - g.g_min;
            GenTerm {
                quad: if a > 0.0 { 1.0 / a } else { 1.0 },
                lin: vec![0.0; t_len],
                lower: gd.iter().map(|v| g.g_min.max(v - span)).collect(),
                upper: gd.iter().map(|v| g.g_max.min(v + span)).collect(),
                fixed_zero: a <= 0.0,
            }
        })
        .collect();
    let stores = params
        .storages
        .iter()
        .zip(&bids.beta_r)
        .zip(&commit.u)
        .zip(soc0)
        .map(|(((s, &b), ud), &x0)| StoreTerm {
            cost: StoreCost::Quadratic(if b > 0.0 { 1.0 / b } else { 1.0 }),
            capacity_e: s.capacity_e,
            lower: ud.iter().map(|v| s.u_min.max(v + s.u_min)).collect(),
            upper: ud.iter().map(|v| s.u_max.min(v + s.u_max)).collect(),
            periodic: false,
            soc_x0: Some(x0),
            fixed_zero: b <= 0.0,
        })
        .collect();
    let model = DispatchModel {
        demand: window_demand.to_vec(),
        gens,
        stores,
    };
    let sol = model.solve(tol)?;
    let diff = |tot: &Vec<f64>, committed: &Vec<f64>| -> Vec<f64> {
        tot.iter().zip(committed).map(|(a, b)| a - b).collect()
    };
    Ok(RealTimeResult {
        mode: RealTimeMode::Aware,
        g_r: sol
            .g
            .iter()
            .zip(&commit.g)
            .map(|(a, b)| diff(a, b))
            .collect(),
        u_r: sol
            .u
            .iter()
            .zip(&commit.u)
            .map(|(a, b)| diff(a, b))
            .collect(),
        lambda_r: sol.lambda,
        price_scale: f64::NAN,
        iterations: sol.engine.iterations,
        converged: true,
        map_stable: true,
        warnings: Vec::new(),
        trace: Vec::new(),
    })
}

impl RealTimeResult {
    /// Number of intervals covered.
    pub fn horizon(&self) -> usize {
        self.lambda_r.len()
    }
}
