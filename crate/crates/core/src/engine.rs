//! Minimisation of a convex quadratic plus Rainflow degradation terms.
//!
//! Objective: `0.5 x'Px + q'x + sum_b (w_b / 2) |N(x_b) x_b|^2` over a
//! polyhedron, where each block `x_b` is the dispatch of one storage unit.
//! The degradation term is convex and piecewise quadratic: on each region
//! where the Rainflow decisions stay fixed it equals a quadratic form.
//!
//! The solver hops between regions. Each step solves the QP restricted to
//! the current region, then checks global optimality by looking for the
//! minimum-norm element of the subdifferential (gradients of every piece
//! meeting at the point, plus the normal cone of the active constraints).
//! If that element is nonzero its negative is a descent direction, and the
//! piece entered along it becomes the next region. Objective values strictly
//! decrease, and there are finitely many regions.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{MarketError, Result};
use crate::qp::{solve_qp, QpProblem};
use crate::rainflow::{pattern, Pattern};

#[derive(Debug, Clone)]
pub struct StorageBlock {
    pub offset: usize,
    pub len: usize,
    pub capacity_e: f64,
    /// Cost weight `w` in `(w/2)|N u|^2`.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct NonsmoothProblem {
    pub qp: QpProblem,
    pub blocks: Vec<StorageBlock>,
}

#[derive(Debug, Clone, Copy)]
pub struct EngineOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            tol: crate::DEFAULT_TOL,
            max_iter: 200,
        }
    }
}

/// Subdifferential data of one storage block at the solution.
#[derive(Debug, Clone)]
pub struct BlockSubgradient {
    /// Convex weights over the adjacent smooth pieces.
    pub gamma: Vec<f64>,
    /// Map rows of each piece (K_k x len).
    pub maps: Vec<DMatrix<f64>>,
    /// The combined subgradient `sum_k gamma_k w N_k'N_k u`.
    pub gradient: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct EngineSolution {
    pub x: DVector<f64>,
    /// Equality multipliers, sign convention `grad + A'y + G'z = 0`.
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub blocks: Vec<BlockSubgradient>,
    pub objective: f64,
    /// Infinity norm of the min-norm stationarity vector, relative to the
    /// gradient scale.
    pub residual: f64,
    pub iterations: usize,
}

impl NonsmoothProblem {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let mut f = self.qp.objective(x);
        for b in &self.blocks {
            let u: Vec<f64> = x.rows(b.offset, b.len).iter().copied().collect();
            f += b.weight * crate::costs::depth_energy(&u, b.capacity_e);
        }
        f
    }

    fn block_slice(&self, b: &StorageBlock, x: &DVector<f64>) -> Vec<f64> {
        x.rows(b.offset, b.len).iter().copied().collect()
    }
}

fn rows_matrix(p: &Pattern, len: usize) -> DMatrix<f64> {
    p.matrix(len)
}

fn piece_gradient(map: &DMatrix<f64>, u: &DVector<f64>, w: f64) -> DVector<f64> {
    if map.nrows() == 0 {
        return DVector::zeros(u.len());
    }
    map.transpose() * (map * u) * w
}

/// Ordered set of the pieces seen at the current point, per block.
struct PieceSet {
    keys: HashMap<Vec<i8>, usize>,
    maps: Vec<DMatrix<f64>>,
}

impl PieceSet {
    fn new() -> Self {
        Self {
            keys: HashMap::new(),
            maps: Vec::new(),
        }
    }

    fn insert(&mut self, p: &Pattern, len: usize) -> bool {
        if self.keys.contains_key(&p.key) {
            return false;
        }
        self.keys.insert(p.key.clone(), self.maps.len());
        self.maps.push(rows_matrix(p, len));
        true
    }

    fn contains(&self, p: &Pattern) -> bool {
        self.keys.contains_key(&p.key)
    }
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) enum Col {
    Simplex(usize),
    Free,
    Nonneg,
}

/// Minimum-norm point of `c0 + M w` with simplex groups, free and
/// nonnegative columns. Uses the QP backend to find the support, then a
/// least-squares solve on that support so that the squared conditioning of
/// the normal equations does not limit accuracy.
pub(crate) fn min_norm(
    c0: &DVector<f64>,
    m: &DMatrix<f64>,
    cols: &[Col],
    groups: usize,
) -> Result<DVector<f64>> {
    let k = cols.len();
    let mut prob = QpProblem::new(k);
    let mtm = m.transpose() * m;
    let reg = 1e-14 * mtm.amax().max(1.0);
    prob.p = mtm + DMatrix::identity(k, k) * reg;
    prob.q = m.transpose() * c0;
    prob.a_eq = DMatrix::zeros(groups, k);
    prob.b_eq = DVector::from_element(groups, 1.0);
    let nonneg: Vec<usize> = (0..k).filter(|&i| cols[i] != Col::Free).collect();
    prob.g = DMatrix::zeros(nonneg.len(), k);
    prob.h = DVector::zeros(nonneg.len());
    for (r, &i) in nonneg.iter().enumerate() {
        prob.g[(r, i)] = -1.0;
        if let Col::Simplex(b) = cols[i] {
            prob.a_eq[(b, i)] = 1.0;
        }
    }
    let w0 = solve_qp(&prob)?.x;
    let mut w = refine_support(c0, m, cols, groups, w0);
    // Free columns carry no sign, so the residual can be made exactly
    // orthogonal to them; otherwise `-r` leaks out of the feasible set.
    let free: Vec<usize> = (0..k).filter(|&i| cols[i] == Col::Free).collect();
    if !free.is_empty() {
        let fm = DMatrix::from_columns(
            &free
                .iter()
                .map(|&i| m.column(i).into_owned())
                .collect::<Vec<_>>(),
        );
        let r = c0 + m * &w;
        if let Some(delta) = least_squares(fm, &(-r)) {
            for (j, &i) in free.iter().enumerate() {
                w[i] += delta[j];
            }
        }
    }
    Ok(w)
}

/// Active-set polish of the backend's weights: least squares on the current
/// support, step back to feasibility when a weight turns negative, and add
/// the column that most violates optimality until none does. The backend's
/// weights can be slightly infeasible, so they are only a starting guess.
fn refine_support(
    c0: &DVector<f64>,
    m: &DMatrix<f64>,
    cols: &[Col],
    groups: usize,
    w0: DVector<f64>,
) -> DVector<f64> {
    let k = cols.len();
    // Feasible start: clip and renormalise the simplex groups.
    let mut w = w0.clone();
    for b in 0..groups {
        let idx: Vec<usize> = (0..k).filter(|&i| cols[i] == Col::Simplex(b)).collect();
        for &i in &idx {
            w[i] = w[i].max(0.0);
        }
        let s: f64 = idx.iter().map(|&i| w[i]).sum();
        for &i in &idx {
            w[i] = if s > 0.0 {
                w[i] / s
            } else {
                1.0 / idx.len() as f64
            };
        }
    }
    for i in 0..k {
        if cols[i] == Col::Nonneg {
            w[i] = w[i].max(0.0);
        }
    }
    let thr = 1e-12 * w.amax().max(1.0);
    let mut support: Vec<usize> = (0..k)
        .filter(|&i| cols[i] == Col::Free || w[i] > thr)
        .collect();
    let colmax = m
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
        .max(1e-300);

    // Columns that left again at zero step right after entering; retrying them cycles.
    let mut excluded = vec![false; k];
    let mut entered: Option<usize> = None;
    for _ in 0..4 * k + 10 {
        let Some(z) = support_least_squares(c0, m, cols, groups, &support) else {
            break;
        };
        let blocking: Vec<usize> = support
            .iter()
            .copied()
            .filter(|&i| cols[i] != Col::Free && z[i] < 0.0)
            .collect();
        if blocking.is_empty() {
            w = z;
            let r = c0 + m * &w;
            let rm = m.transpose() * &r;
            // Optimality: simplex columns off the support must not beat the
            // group's level, cone columns must not point downhill.
            let mut level = vec![f64::INFINITY; groups];
            for &i in &support {
                if let Col::Simplex(b) = cols[i] {
                    level[b] = level[b].min(rm[i]);
                }
            }
            let tol = 1e-11 * r.norm().max(1e-300) * colmax;
            let entering = (0..k)
                .filter(|&i| !excluded[i] && !support.contains(&i))
                .filter_map(|i| {
                    let v = match cols[i] {
                        Col::Simplex(b) => level[b] - rm[i],
                        Col::Nonneg => -rm[i],
                        Col::Free => return None,
                    };
                    (v > tol).then_some((i, v))
                })
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match entering {
                Some((i, _)) => {
                    support.push(i);
                    entered = Some(i);
                }
                None => break,
            }
        } else {
            let alpha = blocking
                .iter()
                .map(|&i| w[i] / (w[i] - z[i]))
                .fold(1.0, f64::min);
            if let Some(i) = entered.take() {
                if alpha <= 1e-12 && blocking.contains(&i) {
                    excluded[i] = true;
                }
            }
            w = &w + (&z - &w) * alpha;
            support.retain(|&i| cols[i] == Col::Free || w[i] > 1e-15);
            for i in 0..k {
                if !support.contains(&i) {
                    w[i] = 0.0;
                }
            }
        }
    }
    w
}

/// Least-squares solution of `a x = b` by column-pivoted QR, with columns
/// past the numerical rank set to zero and one step of refinement.
/// (nalgebra's SVD can return a factorisation that does not reproduce
/// badly scaled matrices, which silently spoils the solution.)
fn least_squares(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.ncols();
    let qr = a.clone().col_piv_qr();
    let (q, r) = (qr.q(), qr.r());
    let k = r.nrows().min(n);
    let r00 = if k > 0 { r[(0, 0)].abs() } else { 0.0 };
    let rank = (0..k)
        .take_while(|&i| r[(i, i)].abs() > 1e-13 * r00)
        .count();
    let solve = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
        let qtb = q.transpose() * rhs;
        let y = r
            .view((0, 0), (rank, rank))
            .solve_upper_triangular(&qtb.rows(0, rank))?;
        let mut x = DVector::zeros(n);
        x.rows_mut(0, rank).copy_from(&y);
        qr.p().inv_permute_rows(&mut x);
        Some(x)
    };
    let mut x = solve(b)?;
    x += solve(&(b - &a * &x))?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Least squares for `c0 + M w` restricted to `support`, simplex groups
/// summing to one. `None` if a group has no column in the support.
fn support_least_squares(
    c0: &DVector<f64>,
    m: &DMatrix<f64>,
    cols: &[Col],
    groups: usize,
    support: &[usize],
) -> Option<DVector<f64>> {
    let k = cols.len();
    let mut pivot = vec![usize::MAX; groups];
    for &i in support {
        if let Col::Simplex(b) = cols[i] {
            if pivot[b] == usize::MAX {
                pivot[b] = i;
            }
        }
    }
    if pivot.iter().any(|&p| p == usize::MAX) {
        return None;
    }
    let others: Vec<usize> = support
        .iter()
        .copied()
        .filter(|i| !pivot.contains(i))
        .collect();
    let mut rhs = -c0.clone();
    for &p in &pivot {
        rhs -= m.column(p);
    }
    let mut bmat = DMatrix::zeros(m.nrows(), others.len());
    for (j, &i) in others.iter().enumerate() {
        let mut col = m.column(i).into_owned();
        if let Col::Simplex(b) = cols[i] {
            col -= m.column(pivot[b]);
        }
        bmat.set_column(j, &col);
    }
    let v = if others.is_empty() {
        DVector::zeros(0)
    } else {
        least_squares(bmat, &rhs)?
    };
    let mut w = DVector::zeros(k);
    for (j, &i) in others.iter().enumerate() {
        w[i] = v[j];
    }
    for (b, &p) in pivot.iter().enumerate() {
        let s: f64 = others
            .iter()
            .enumerate()
            .filter(|&(_, &i)| cols[i] == Col::Simplex(b))
            .map(|(j, _)| v[j])
            .sum();
        w[p] = 1.0 - s;
    }
    Some(w)
}

/// Pieces added to the stationarity check at one point before giving up.
const MAX_PIECE_ROUNDS: usize = 400;

pub fn solve(
    prob: &NonsmoothProblem,
    x_init: &DVector<f64>,
    opts: &EngineOptions,
) -> Result<EngineSolution> {
    let n = prob.qp.n();
    let nb = prob.blocks.len();
    let me = prob.qp.a_eq.nrows();
    let mg = prob.qp.g.nrows();

    let mut hints: Vec<Vec<i8>> = prob.blocks.iter().map(|b| vec![1i8; b.len]).collect();
    let mut patterns: Vec<Pattern> = prob
        .blocks
        .iter()
        .zip(&hints)
        .map(|(b, h)| pattern(&prob.block_slice(b, x_init), b.capacity_e, Some(h)))
        .collect();

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut last_residual = f64::INFINITY;
    for it in 0..opts.max_iter {
        // Region QP.
        let mut region = prob.qp.clone();
        let ncons: usize = patterns.iter().map(|p| p.cons.len()).sum();
        let mut g = DMatrix::zeros(mg + ncons, n);
        let mut h = DVector::zeros(mg + ncons);
        if mg > 0 {
            g.rows_mut(0, mg).copy_from(&prob.qp.g);
            h.rows_mut(0, mg).copy_from(&prob.qp.h);
        }
        let mut r = mg;
        for (b, pat) in prob.blocks.iter().zip(&patterns) {
            let map = rows_matrix(pat, b.len);
            let ntn = map.transpose() * &map * b.weight;
            let mut view = region.p.view_mut((b.offset, b.offset), (b.len, b.len));
            view += ntn;
            for c in &pat.cons {
                for (j, &v) in c.iter().enumerate() {
                    g[(r, b.offset + j)] = -v;
                }
                r += 1;
            }
        }
        region.g = g;
        region.h = h;
        let sol = solve_qp(&region)?;
        let x = sol.x;
        let f = prob.objective(&x);
        if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
            best = Some((f, x.clone()));
        }

        let xscale = x.amax().max(1.0);
        let eta = 1e-7 * xscale;
        let smooth_grad = &prob.qp.p * &x + &prob.qp.q;
        let gscale = smooth_grad
            .amax()
            .max(prob.qp.q.amax())
            .max((&prob.qp.p * &x).amax())
            .max(1.0);

        // Pieces meeting at x: the current one plus those across active faces.
        let mut pieces: Vec<PieceSet> = (0..nb).map(|_| PieceSet::new()).collect();
        for (bi, b) in prob.blocks.iter().enumerate() {
            let u = prob.block_slice(b, &x);
            let here = pattern(&u, b.capacity_e, Some(&hints[bi]));
            pieces[bi].insert(&here, b.len);
            pieces[bi].insert(&patterns[bi], b.len);
            for c in &patterns[bi].cons {
                let cn: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cx: f64 = c.iter().zip(&u).map(|(a, v)| a * v).sum();
                if cx.abs() > 1e-9 * xscale * cn {
                    continue;
                }
                for s in [1.0, -1.0] {
                    let probe: Vec<f64> =
                        u.iter().zip(c).map(|(v, a)| v + s * eta * a / cn).collect();
                    pieces[bi].insert(&pattern(&probe, b.capacity_e, Some(&hints[bi])), b.len);
                }
            }
        }
        let active: Vec<usize> = (0..mg)
            .filter(|&i| {
                let hi = prob.qp.h[i];
                if !hi.is_finite() {
                    return false;
                }
                let row = prob.qp.g.row(i);
                let mag: f64 = row.iter().zip(x.iter()).map(|(a, v)| (a * v).abs()).sum();
                hi - row.dot(&x.transpose()) <= 1e-9 * (1.0 + hi.abs() + mag)
            })
            .collect();

        let mut moved = false;
        for _rep in 0..MAX_PIECE_ROUNDS {
            // Columns: per-block piece gradients, equality rows, active rows.
            let mut cols = Vec::new();
            let mut columns: Vec<DVector<f64>> = Vec::new();
            for (bi, b) in prob.blocks.iter().enumerate() {
                let u = x.rows(b.offset, b.len).into_owned();
                for map in &pieces[bi].maps {
                    let mut col = DVector::zeros(n);
                    col.rows_mut(b.offset, b.len)
                        .copy_from(&piece_gradient(map, &u, b.weight));
                    columns.push(col);
                    cols.push(Col::Simplex(bi));
                }
            }
            for i in 0..me {
                columns.push(prob.qp.a_eq.row(i).transpose());
                cols.push(Col::Free);
            }
            for &i in &active {
                columns.push(prob.qp.g.row(i).transpose());
                cols.push(Col::Nonneg);
            }
            let m = DMatrix::from_columns(&columns);
            let w = if cols.is_empty() {
                DVector::zeros(0)
            } else {
                min_norm(&smooth_grad, &m, &cols, nb)?
            };
            let gvec = if cols.is_empty() {
                smooth_grad.clone()
            } else {
                &smooth_grad + &m * &w
            };
            let res = gvec.amax() / gscale;
            last_residual = res;
            if res <= opts.tol {
                return Ok(assemble(
                    prob,
                    x,
                    &w,
                    &cols,
                    &pieces,
                    &active,
                    res,
                    it + 1,
                    f,
                ));
            }
            let dir = -&gvec / gvec.norm();
            let probe_x = &x + &dir * eta;
            let mut new_patterns = Vec::with_capacity(nb);
            let mut all_known = true;
            for (bi, b) in prob.blocks.iter().enumerate() {
                let u = prob.block_slice(b, &probe_x);
                let pat = pattern(&u, b.capacity_e, Some(&hints[bi]));
                if !pieces[bi].contains(&pat) {
                    all_known = false;
                    pieces[bi].insert(&pat, b.len);
                }
                new_patterns.push(pat);
            }
            // A new piece that still descends along `dir` is as good as a known one.
            let descends = !all_known && {
                let mut slope = smooth_grad.dot(&dir);
                for (b, pat) in prob.blocks.iter().zip(&new_patterns) {
                    let u = x.rows(b.offset, b.len).into_owned();
                    slope += piece_gradient(&rows_matrix(pat, b.len), &u, b.weight)
                        .dot(&dir.rows(b.offset, b.len));
                }
                slope < -0.5 * gvec.norm()
            };
            if all_known || descends || nb == 0 {
                for (bi, b) in prob.blocks.iter().enumerate() {
                    let u = prob.block_slice(b, &probe_x);
                    for (t, h) in hints[bi].iter_mut().enumerate() {
                        *h = if u[t] > 0.0 { -1 } else { 1 };
                    }
                }
                patterns = new_patterns;
                moved = true;
                break;
            }
        }
        if !moved {
            break;
        }
    }
    let (_, bx) = best.unwrap_or((f64::NAN, x_init.clone()));
    Err(MarketError::SolverFailure {
        message: "nonsmooth solver did not reach the stationarity tolerance".into(),
        iterations: opts.max_iter,
        residual: last_residual,
        best: bx.iter().copied().collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    prob: &NonsmoothProblem,
    x: DVector<f64>,
    w: &DVector<f64>,
    cols: &[Col],
    pieces: &[PieceSet],
    active: &[usize],
    residual: f64,
    iterations: usize,
    objective: f64,
) -> EngineSolution {
    let me = prob.qp.a_eq.nrows();
    let mut blocks = Vec::with_capacity(prob.blocks.len());
    let mut idx = 0;
    for (bi, b) in prob.blocks.iter().enumerate() {
        let u = x.rows(b.offset, b.len).into_owned();
        let mut gamma = Vec::new();
        let mut maps = Vec::new();
        let mut gradient = DVector::zeros(b.len);
        for map in &pieces[bi].maps {
            debug_assert!(cols[idx] == Col::Simplex(bi));
            let gk = w[idx].max(0.0);
            idx += 1;
            if gk <= 1e-12 {
                continue;
            }
            gradient += piece_gradient(map, &u, b.weight) * gk;
            gamma.push(gk);
            maps.push(map.clone());
        }
        let s: f64 = gamma.iter().sum();
        if s > 0.0 {
            for g in &mut gamma {
                *g /= s;
            }
            gradient /= s;
        }
        blocks.push(BlockSubgradient {
            gamma,
            maps,
            gradient,
        });
    }
    let y = DVector::from_iterator(me, (0..me).map(|i| w[idx + i]));
    idx += me;
    let mut z = DVector::zeros(prob.qp.g.nrows());
    for (k, &i) in active.iter().enumerate() {
        z[i] = w[idx + k].max(0.0);
    }
    EngineSolution {
        x,
        y,
        z,
        blocks,
        objective,
        residual,
        iterations,
    }
}
