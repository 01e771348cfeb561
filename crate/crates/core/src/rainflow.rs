//! Rainflow cycle counting on state-of-charge profiles.
//!
//! Sign convention: positive dispatch discharges the battery, so
//! `x_t = x_{t-1} - u_t / E`. Depths are magnitudes, so the convention does
//! not affect any cost or price.

use nalgebra::DMatrix;

use crate::error::{MarketError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SocProfile {
    /// Length T+1, `values[0]` is the initial state of charge.
    pub values: Vec<f64>,
}

impl SocProfile {
    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    pub fn within_bounds(&self, slack: f64) -> bool {
        self.values.iter().all(|&x| x >= -slack && x <= 1.0 + slack)
    }
}

/// Half-cycle depths together with the linear map that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RainflowDecomposition {
    pub depths: Vec<f64>,
    /// K x T, entries in {0, +1/E, -1/E}.
    pub map: DMatrix<f64>,
    /// For every interval t, the half-cycles (row, sign) that it contributes to.
    pub assignment: Vec<Vec<(usize, f64)>>,
}

impl RainflowDecomposition {
    pub fn num_half_cycles(&self) -> usize {
        self.depths.len()
    }
}

fn check_inputs(u: &[f64], capacity_e: f64, x0: f64) -> Result<()> {
    if !(capacity_e > 0.0) || !capacity_e.is_finite() {
        return Err(MarketError::InvalidInput(format!(
            "capacity must be positive, got {capacity_e}"
        )));
    }
    if !(0.0..=1.0).contains(&x0) {
        return Err(MarketError::InvalidInput(format!(
            "x0 must lie in [0, 1], got {x0}"
        )));
    }
    if let Some(t) = u.iter().position(|v| !v.is_finite()) {
        return Err(MarketError::InvalidInput(format!(
            "non-finite dispatch at interval {t}"
        )));
    }
    Ok(())
}

pub fn soc_from_dispatch(u: &[f64], capacity_e: f64, x0: f64) -> Result<SocProfile> {
    check_inputs(u, capacity_e, x0)?;
    let mut values = Vec::with_capacity(u.len() + 1);
    values.push(x0);
    let mut x = x0;
    for &ut in u {
        x -= ut / capacity_e;
        values.push(x);
    }
    Ok(SocProfile { values })
}

/// Strictly alternating local extrema of `x`, plateaus collapsed to their
/// first sample. Endpoints are always kept.
pub fn turning_points(x: &[f64]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (i, &v) in x.iter().enumerate() {
        match out.len() {
            0 => out.push((i, v)),
            _ if out[out.len() - 1].1 == v => {}
            1 => out.push((i, v)),
            n => {
                let (prev, last) = (out[n - 2].1, out[n - 1].1);
                if (last - prev) * (v - last) > 0.0 {
                    out[n - 1] = (i, v);
                } else {
                    out.push((i, v));
                }
            }
        }
    }
    out
}

/// A Rainflow piece: the map rows plus the linear inequalities `a . u >= 0`
/// that keep the counting decisions unchanged.
#[derive(Debug, Clone)]
pub(crate) struct Pattern {
    pub rows: Vec<Vec<f64>>,
    pub cons: Vec<Vec<f64>>,
    /// Sign pattern of the rows, used to tell pieces apart.
    pub key: Vec<i8>,
}

/// SoC direction of interval t: +1 charging, -1 discharging, 0 idle.
fn direction(ut: f64) -> i8 {
    if ut > 0.0 {
        -1
    } else if ut < 0.0 {
        1
    } else {
        0
    }
}

/// Pieces meeting at `u`: probes `u +- eta e_t` from the point with
/// negligible entries zeroed, under every direction assignment of the idle
/// hours when there are at most [`MAX_ENUMERATED_IDLE`] of them and under the
/// two uniform assignments otherwise. Duplicates (same sign key) are dropped.
pub(crate) fn adjacent_patterns(u: &[f64], capacity_e: f64) -> Vec<Pattern> {
    let t_len = u.len();
    let xscale = u.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let eta = 1e-7 * xscale;
    let base: Vec<f64> = u
        .iter()
        .map(|&v| if v.abs() <= 1e-12 * xscale { 0.0 } else { v })
        .collect();
    let idle: Vec<usize> = (0..t_len).filter(|&t| base[t] == 0.0).collect();
    let hints: Vec<Vec<i8>> = if idle.len() <= MAX_ENUMERATED_IDLE {
        (0..1usize << idle.len())
            .map(|mask| {
                let mut h = vec![1i8; t_len];
                for (k, &t) in idle.iter().enumerate() {
                    if mask >> k & 1 == 1 {
                        h[t] = -1;
                    }
                }
                h
            })
            .collect()
    } else {
        vec![vec![1i8; t_len], vec![-1i8; t_len]]
    };
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut probe = base.clone();
    let mut add = |point: &[f64], hint: &[i8]| {
        let pat = pattern(point, capacity_e, Some(hint));
        if seen.insert(pat.key.clone()) {
            out.push(pat);
        }
    };
    for hint in &hints {
        add(&base, hint);
        for t in 0..t_len {
            for sign in [1.0, -1.0] {
                probe[t] = base[t] + sign * eta;
                add(&probe, hint);
                probe[t] = base[t];
            }
        }
    }
    out
}

pub(crate) const MAX_ENUMERATED_IDLE: usize = 6;

/// Runs the four-point counting on `u`. Idle intervals are dropped unless a
/// direction `hint` is given for them; the engine uses hints so that idle
/// hours still belong to a well-defined piece.
pub(crate) fn pattern(u: &[f64], capacity_e: f64, hint: Option<&[i8]>) -> Pattern {
    let t_len = u.len();
    let inv_e = 1.0 / capacity_e;
    let mut cons = Vec::new();
    // runs of equal direction: (direction, intervals)
    let mut runs: Vec<(i8, Vec<usize>)> = Vec::new();
    for t in 0..t_len {
        let mut dir = direction(u[t]);
        if dir == 0 {
            dir = hint.map_or(0, |h| h[t]);
        }
        if dir == 0 {
            continue;
        }
        let mut a = vec![0.0; t_len];
        a[t] = -f64::from(dir);
        cons.push(a);
        match runs.last_mut() {
            Some((d, ts)) if *d == dir => ts.push(t),
            _ => runs.push((dir, vec![t])),
        }
    }

    // Depth of the reduced segment between turning points p < q, signed by
    // the direction of the first run so that it is nonnegative on the piece.
    let seg = |p: usize, q: usize| -> Vec<f64> {
        let s = f64::from(runs[p].0);
        let mut v = vec![0.0; t_len];
        for run in &runs[p..q] {
            for &t in &run.1 {
                v[t] = -s * inv_e;
            }
        }
        v
    };
    let dot = |a: &[f64]| -> f64 { a.iter().zip(u).map(|(x, y)| x * y).sum() };
    let sub = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };

    let mut rows = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for p in 0..=runs.len() {
        stack.push(p);
        while stack.len() >= 4 {
            let n = stack.len();
            let (a, b, c, d) = (stack[n - 4], stack[n - 3], stack[n - 2], stack[n - 1]);
            let inner = seg(b, c);
            let before = seg(a, b);
            let after = seg(c, d);
            let (vi, vb, va) = (dot(&inner), dot(&before), dot(&after));
            if vi <= vb && vi <= va {
                cons.push(sub(&before, &inner));
                cons.push(sub(&after, &inner));
                rows.push(inner.clone());
                rows.push(inner);
                stack.drain(n - 3..n - 1);
            } else {
                if vb - vi < va - vi {
                    cons.push(sub(&inner, &before));
                } else {
                    cons.push(sub(&inner, &after));
                }
                break;
            }
        }
    }
    for w in stack.windows(2) {
        rows.push(seg(w[0], w[1]));
    }

    let key = rows
        .iter()
        .flat_map(|r| {
            r.iter().map(|&v| {
                if v > 0.0 {
                    1
                } else if v < 0.0 {
                    -1
                } else {
                    0
                }
            })
        })
        .collect();
    Pattern { rows, cons, key }
}

impl Pattern {
    pub fn matrix(&self, t_len: usize) -> DMatrix<f64> {
        let k = self.rows.len();
        DMatrix::from_fn(k, t_len, |i, j| self.rows[i][j])
    }
}

/// Standard four-point Rainflow decomposition of the SoC profile generated by `u`.
///
/// Full cycles appear as two equal half-cycle rows; the residual contributes
/// one row per remaining range. The map depends only on the shape of `u`,
/// so `x0` matters only for validation.
pub fn rainflow_map(u: &[f64], capacity_e: f64, x0: f64) -> Result<RainflowDecomposition> {
    check_inputs(u, capacity_e, x0)?;
    let pat = pattern(u, capacity_e, None);
    let t_len = u.len();
    let map = pat.matrix(t_len);
    let depths: Vec<f64> = (&map * nalgebra::DVector::from_column_slice(u))
        .iter()
        .copied()
        .collect();
    let mut assignment = vec![Vec::new(); t_len];
    for (k, row) in pat.rows.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            if v != 0.0 {
                assignment[t].push((k, v.signum()));
            }
        }
    }
    Ok(RainflowDecomposition {
        depths,
        map,
        assignment,
    })
}

pub fn cycle_depths(u: &[f64], capacity_e: f64, x0: f64) -> Result<Vec<f64>> {
    Ok(rainflow_map(u, capacity_e, x0)?.depths)
}
