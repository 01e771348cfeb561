//! Shared builder for multi-interval dispatch problems: generators with
//! quadratic costs, storage units with degradation or quadratic costs,
//! a per-interval power balance and optional periodicity and SoC limits.

use nalgebra::{DMatrix, DVector};

use crate::engine::{self, EngineOptions, EngineSolution, NonsmoothProblem, StorageBlock};
use crate::error::{MarketError, Result};
use crate::qp::QpProblem;

#[derive(Debug, Clone)]
pub(crate) struct GenTerm {
    /// Coefficient of `0.5 * quad * g_t^2`.
    pub quad: f64,
    pub lin: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Variable pinned at zero (participant offers no supply).
    pub fixed_zero: bool,
}

#[derive(Debug, Clone)]
pub(crate) enum StoreCost {
    /// `(w/2)|N(u)u|^2`.
    Degradation(f64),
    /// `(k/2)|u|^2`.
    Quadratic(f64),
}

#[derive(Debug, Clone)]
pub(crate) struct StoreTerm {
    pub cost: StoreCost,
    pub capacity_e: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub periodic: bool,
    /// Initial SoC when the [0, 1] bounds are enforced.
    pub soc_x0: Option<f64>,
    pub fixed_zero: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct DispatchModel {
    pub demand: Vec<f64>,
    pub gens: Vec<GenTerm>,
    pub stores: Vec<StoreTerm>,
}

#[derive(Debug, Clone)]
pub(crate) struct DispatchSolution {
    pub g: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// Balance dual, $/MWh.
    pub lambda: Vec<f64>,
    /// Periodicity dual per storage (0 when not periodic).
    pub delta: Vec<f64>,
    pub engine: EngineSolution,
}

impl DispatchModel {
    fn t(&self) -> usize {
        self.demand.len()
    }

    fn check_feasible(&self) -> Result<()> {
        for t in 0..self.t() {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for g in &self.gens {
                if !g.fixed_zero {
                    hi += g.upper[t];
                    lo += g.lower[t];
                }
            }
            for s in &self.stores {
                if !s.fixed_zero {
                    hi += s.upper[t];
                    lo += s.lower[t];
                }
            }
            let d = self.demand[t];
            if d > hi || d < lo {
                return Err(MarketError::Infeasible(format!(
                    "demand {d:.3} MW at interval {t} outside the available range [{lo:.3}, {hi:.3}]"
                )));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> (NonsmoothProblem, usize, Vec<usize>) {
        let t_len = self.t();
        let ng = self.gens.len();
        let ns = self.stores.len();
        let n = (ng + ns) * t_len;
        let mut qp = QpProblem::new(n);
        let mut eq_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let mut ineq_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();

        for t in 0..t_len {
            let mut row = Vec::new();
            for j in 0..ng + ns {
                row.push((j * t_len + t, 1.0));
            }
            eq_rows.push((row, self.demand[t]));
        }
        let mut periodic_rows = vec![usize::MAX; ns];
        for (si, s) in self.stores.iter().enumerate() {
            if s.periodic && !s.fixed_zero {
                let off = (ng + si) * t_len;
                periodic_rows[si] = eq_rows.len();
                eq_rows.push(((0..t_len).map(|t| (off + t, 1.0)).collect(), 0.0));
            }
        }

        let mut bounds = |off: usize,
                          lower: &[f64],
                          upper: &[f64],
                          fixed: bool,
                          eq_rows: &mut Vec<(Vec<(usize, f64)>, f64)>| {
            for t in 0..t_len {
                if fixed {
                    eq_rows.push((vec![(off + t, 1.0)], 0.0));
                    continue;
                }
                if upper[t].is_finite() {
                    ineq_rows.push((vec![(off + t, 1.0)], upper[t]));
                }
                if lower[t].is_finite() {
                    ineq_rows.push((vec![(off + t, -1.0)], -lower[t]));
                }
            }
        };
        for (j, g) in self.gens.iter().enumerate() {
            let off = j * t_len;
            for t in 0..t_len {
                qp.p[(off + t, off + t)] = g.quad;
                qp.q[off + t] = g.lin[t];
            }
            bounds(off, &g.lower, &g.upper, g.fixed_zero, &mut eq_rows);
        }
        let mut blocks = Vec::new();
        for (si, s) in self.stores.iter().enumerate() {
            let off = (ng + si) * t_len;
            bounds(off, &s.lower, &s.upper, s.fixed_zero, &mut eq_rows);
            match s.cost {
                StoreCost::Degradation(w) if !s.fixed_zero => blocks.push(StorageBlock {
                    offset: off,
                    len: t_len,
                    capacity_e: s.capacity_e,
                    weight: w,
                }),
                StoreCost::Quadratic(k) => {
                    for t in 0..t_len {
                        qp.p[(off + t, off + t)] = k;
                    }
                }
                _ => {}
            }
        }
        // SoC bounds: 0 <= x0 - cumsum(u)/E <= 1.
        for (si, s) in self.stores.iter().enumerate() {
            let Some(x0) = s.soc_x0 else { continue };
            if s.fixed_zero {
                continue;
            }
            let off = (ng + si) * t_len;
            for t in 0..t_len {
                let row: Vec<(usize, f64)> =
                    (0..=t).map(|k| (off + k, 1.0 / s.capacity_e)).collect();
                ineq_rows.push((row.clone(), x0));
                ineq_rows.push((row.into_iter().map(|(i, v)| (i, -v)).collect(), 1.0 - x0));
            }
        }

        qp.a_eq = DMatrix::zeros(eq_rows.len(), n);
        qp.b_eq = DVector::zeros(eq_rows.len());
        for (r, (row, rhs)) in eq_rows.iter().enumerate() {
            for &(i, v) in row {
                qp.a_eq[(r, i)] = v;
            }
            qp.b_eq[r] = *rhs;
        }
        qp.g = DMatrix::zeros(ineq_rows.len(), n);
        qp.h = DVector::zeros(ineq_rows.len());
        for (r, (row, rhs)) in ineq_rows.iter().enumerate() {
            for &(i, v) in row {
                qp.g[(r, i)] = v;
            }
            qp.h[r] = *rhs;
        }
        (NonsmoothProblem { qp, blocks }, t_len, periodic_rows)
    }

    /// Starting point: demand shared by generators, storage shaped like the
    /// demand deviation from its mean (only its shape matters).
    fn initial_point(&self) -> DVector<f64> {
        let t_len = self.t();
        let ng = self.gens.len();
        let ns = self.stores.len();
        let mean = self.demand.iter().sum::<f64>() / t_len.max(1) as f64;
        let mut x = DVector::zeros((ng + ns) * t_len);
        let active_g = self.gens.iter().filter(|g| !g.fixed_zero).count().max(1) as f64;
        for (j, g) in self.gens.iter().enumerate() {
            if g.fixed_zero {
                continue;
            }
            for t in 0..t_len {
                x[j * t_len + t] = self.demand[t] / active_g;
            }
        }
        for (si, s) in self.stores.iter().enumerate() {
            if s.fixed_zero {
                continue;
            }
            for t in 0..t_len {
                x[(ng + si) * t_len + t] = 1e-3 * (self.demand[t] - mean);
            }
        }
        x
    }

    pub fn solve(&self, tol: f64) -> Result<DispatchSolution> {
        self.check_feasible()?;
        let (prob, t_len, periodic_rows) = self.build();
        let opts = EngineOptions {
            tol,
            ..EngineOptions::default()
        };
        let sol = engine::solve(&prob, &self.initial_point(), &opts)?;
        let ng = self.gens.len();
        let ns = self.stores.len();
        let slice =
            |k: usize| -> Vec<f64> { sol.x.rows(k * t_len, t_len).iter().copied().collect() };
        let g = (0..ng).map(slice).collect();
        let dscale = self.demand.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let u = (0..ns).map(|s| snap_noise(slice(ng + s), dscale)).collect();
        let lambda = (0..t_len).map(|t| -sol.y[t]).collect();
        let delta = periodic_rows
            .iter()
            .map(|&r| if r == usize::MAX { 0.0 } else { sol.y[r] })
            .collect();
        Ok(DispatchSolution {
            g,
            u,
            lambda,
            delta,
            engine: sol,
        })
    }
}

/// Zeroes storage dispatch below solver precision, so that an idle unit does
/// not pick up a spurious cycle map from round-off.
pub(crate) fn snap_noise(mut u: Vec<f64>, scale: f64) -> Vec<f64> {
    for v in &mut u {
        if v.abs() <= 1e-12 * scale {
            *v = 0.0;
        }
    }
    u
}
