//! Dense convex QP backend: an interior-point solve (Clarabel) followed by
//! an active-set polish that recovers the exact KKT point.
//!
//! Problem form: minimise `0.5 x'Px + q'x` subject to `A x = b`, `G x <= h`.
//! Multipliers follow `Px + q + A'y + G'z = 0` with `z >= 0`.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{MarketError, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub objective: f64,
    /// True when the active-set polish converged to an exact KKT point.
    pub polished: bool,
}

impl QpProblem {
    pub fn new(n: usize) -> Self {
        Self {
            p: DMatrix::zeros(n, n),
            q: DVector::zeros(n),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            g: DMatrix::zeros(0, n),
            h: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }
}

fn csc_from_dense(m: &DMatrix<f64>, upper_only: bool) -> CscMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..cols {
        let last = if upper_only { (j + 1).min(rows) } else { rows };
        for i in 0..last {
            let v = m[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols().max(b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), n);
    if a.nrows() > 0 {
        out.rows_mut(0, a.nrows()).copy_from(a);
    }
    if b.nrows() > 0 {
        out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    }
    out
}

struct Ipm {
    x: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    status: SolverStatus,
}

fn interior_point(prob: &QpProblem, rows: &[usize]) -> Ipm {
    let n = prob.n();
    let me = prob.a_eq.nrows();
    let g_sel = DMatrix::from_fn(rows.len(), n, |i, j| prob.g[(rows[i], j)]);
    let h_sel: Vec<f64> = rows.iter().map(|&i| prob.h[i]).collect();
    let a = stack_rows(&prob.a_eq, &g_sel);
    let mut b: Vec<f64> = prob.b_eq.iter().copied().collect();
    b.extend(&h_sel);
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if me > 0 {
        cones.push(ZeroConeT(me));
    }
    if !rows.is_empty() {
        cones.push(NonnegativeConeT(rows.len()));
    }
    let p = csc_from_dense(&prob.p, true);
    let a = csc_from_dense(&a, false);
    let q: Vec<f64> = prob.q.iter().copied().collect();
    let settings = DefaultSettings {
        verbose: false,
        max_threads: 1,
        max_iter: 200,
        tol_gap_abs: 1e-12,
        tol_gap_rel: 1e-12,
        tol_feas: 1e-12,
        tol_ktratio: 1e-10,
        ..DefaultSettings::default()
    };
    match DefaultSolver::new(&p, &q, &a, &b, &cones, settings) {
        Ok(mut solver) => {
            solver.solve();
            let sol = &solver.solution;
            Ipm {
                x: sol.x.clone(),
                z: sol.z.clone(),
                s: sol.s.clone(),
                status: sol.status,
            }
        }
        Err(_) => Ipm {
            x: vec![0.0; n],
            z: vec![0.0; me + rows.len()],
            s: vec![0.0; me + rows.len()],
            status: SolverStatus::NumericalError,
        },
    }
}

/// Solves the equality-constrained QP `min 0.5x'Px + q'x, A x = b` through a
/// regularised KKT factorisation with iterative refinement.
pub(crate) fn solve_eqp(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = q.len();
    let m = a.nrows();
    let pscale = p.amax().max(a.amax()).max(1.0);
    let delta = 1e-11 * pscale;
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(p);
    if m > 0 {
        k.view_mut((n, 0), (m, n)).copy_from(a);
        k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    }
    let mut kreg = k.clone();
    for i in 0..n {
        kreg[(i, i)] += delta;
    }
    for i in n..n + m {
        kreg[(i, i)] -= delta;
    }
    let lu = kreg.lu();
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-q));
    rhs.rows_mut(n, m).copy_from(b);
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..20 {
        let r = &rhs - &k * &sol;
        if r.amax() <= 1e-15 * rhs.amax().max(1.0) {
            break;
        }
        let step = lu.solve(&r)?;
        sol += step;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

/// Active-set refinement starting from a guess of the active inequalities.
fn polish(
    prob: &QpProblem,
    rows: &[usize],
    mut active: Vec<usize>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = prob.n();
    let me = prob.a_eq.nrows();
    let max_iter = 3 * rows.len() + 10;
    for _ in 0..max_iter {
        active.sort_unstable();
        active.dedup();
        let mut a = DMatrix::zeros(me + active.len(), n);
        let mut b = DVector::zeros(me + active.len());
        if me > 0 {
            a.rows_mut(0, me).copy_from(&prob.a_eq);
            b.rows_mut(0, me).copy_from(&prob.b_eq);
        }
        for (k, &i) in active.iter().enumerate() {
            a.row_mut(me + k).copy_from(&prob.g.row(i));
            b[me + k] = prob.h[i];
        }
        let (x, mult) = solve_eqp(&prob.p, &prob.q, &a, &b)?;
        let mu = mult.rows(me, active.len());
        let mu_scale = mu.amax().max(1.0);
        let mut worst_neg: Option<(f64, usize)> = None;
        for (k, &m) in mu.iter().enumerate() {
            if m < -1e-10 * mu_scale && worst_neg.map_or(true, |(v, _)| m < v) {
                worst_neg = Some((m, k));
            }
        }
        let mut worst_viol: Option<(f64, usize)> = None;
        for &i in rows {
            if active.binary_search(&i).is_ok() {
                continue;
            }
            let row = prob.g.row(i);
            let lhs = row.dot(&x.transpose());
            let mag: f64 = row.iter().zip(x.iter()).map(|(g, v)| (g * v).abs()).sum();
            let viol = lhs - prob.h[i];
            if viol > 1e-10 * (1.0 + prob.h[i].abs() + mag)
                && worst_viol.map_or(true, |(v, _)| viol > v)
            {
                worst_viol = Some((viol, i));
            }
        }
        if worst_neg.is_none() && worst_viol.is_none() {
            let mut z = DVector::zeros(prob.g.nrows());
            for (k, &i) in active.iter().enumerate() {
                z[i] = mu[k].max(0.0);
            }
            let y = mult.rows(0, me).into_owned();
            return Some((x, y, z));
        }
        if let Some((_, k)) = worst_neg {
            active.remove(k);
        }
        if let Some((_, i)) = worst_viol {
            active.push(i);
        }
    }
    None
}

/// Scaled KKT residual of a candidate QP solution.
pub fn kkt_residual(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
    let grad = &prob.p * x + &prob.q;
    let stat = &grad + prob.a_eq.transpose() * y + prob.g.transpose() * z;
    let gscale = grad.amax().max(prob.q.amax()).max(1.0);
    let mut r = stat.amax() / gscale;
    let eq = &prob.a_eq * x - &prob.b_eq;
    let hscale = prob.b_eq.amax().max(x.amax()).max(1.0);
    r = r.max(eq.amax() / hscale);
    for i in 0..prob.g.nrows() {
        if !prob.h[i].is_finite() {
            continue;
        }
        let slack = prob.h[i] - prob.g.row(i).dot(&x.transpose());
        r = r.max((-slack).max(0.0) / hscale);
        r = r.max((-z[i]).max(0.0) / gscale);
        r = r.max((z[i] * slack).abs() / (gscale * hscale));
    }
    r
}

pub fn solve_qp(prob: &QpProblem) -> Result<QpSolution> {
    let me = prob.a_eq.nrows();
    let rows: Vec<usize> = (0..prob.g.nrows())
        .filter(|&i| prob.h[i].is_finite())
        .collect();
    let ipm = interior_point(prob, &rows);
    match ipm.status {
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(MarketError::Infeasible("constraint set is empty".into()));
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(MarketError::InvalidInput(
                "objective is unbounded below".into(),
            ));
        }
        _ => {}
    }
    let guess: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|&(k, _)| ipm.z[me + k] > ipm.s[me + k])
        .map(|(_, &i)| i)
        .collect();
    if let Some((x, y, z)) = polish(prob, &rows, guess) {
        let objective = prob.objective(&x);
        return Ok(QpSolution {
            x,
            y,
            z,
            objective,
            polished: true,
        });
    }
    let x = DVector::from_vec(ipm.x);
    let y = DVector::from_iterator(me, ipm.z[..me].iter().copied());
    let mut z = DVector::zeros(prob.g.nrows());
    for (k, &i) in rows.iter().enumerate() {
        z[i] = ipm.z[me + k];
    }
    let usable = matches!(
        ipm.status,
        SolverStatus::Solved | SolverStatus::AlmostSolved
    );
    let residual = kkt_residual(prob, &x, &y, &z);
    if !usable {
        return Err(MarketError::SolverFailure {
            message: format!("QP backend stopped with status {:?}", ipm.status),
            iterations: 0,
            residual,
            best: x.iter().copied().collect(),
        });
    }
    let objective = prob.objective(&x);
    Ok(QpSolution {
        x,
        y,
        z,
        objective,
        polished: false,
    })
}
