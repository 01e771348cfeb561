use crate::params::{GeneratorParams, StorageParams};
use crate::rainflow::{self, pattern};

/// A subgradient of the storage cost assembled from the smooth pieces that
/// meet at the evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgradientInfo {
    pub gradient: Vec<f64>,
    /// Convex weights over `piece_gradients`.
    pub gamma: Vec<f64>,
    pub piece_gradients: Vec<Vec<f64>>,
}

impl SubgradientInfo {
    pub fn is_smooth(&self) -> bool {
        self.gamma.len() == 1
    }
}

pub fn generator_cost(g: &[f64], p: &GeneratorParams) -> f64 {
    g.iter().map(|&v| 0.5 * p.c * v * v + p.a * v).sum()
}

pub fn generator_gradient(g: &[f64], p: &GeneratorParams) -> Vec<f64> {
    g.iter().map(|&v| p.c * v + p.a).collect()
}

/// Half the squared norm of the cycle depths of `u`, unscaled by `b`.
pub(crate) fn depth_energy(u: &[f64], capacity_e: f64) -> f64 {
    let pat = pattern(u, capacity_e, None);
    pat.rows
        .iter()
        .map(|r| {
            let v: f64 = r.iter().zip(u).map(|(a, b)| a * b).sum();
            0.5 * v * v
        })
        .sum()
}

/// Cycle-depth degradation cost `(b/2) * |nu|^2`.
pub fn storage_cost(u: &[f64], p: &StorageParams) -> f64 {
    p.b * depth_energy(u, p.capacity_e)
}

fn piece_gradient(rows: &[Vec<f64>], u: &[f64], scale: f64) -> Vec<f64> {
    let mut g = vec![0.0; u.len()];
    for r in rows {
        let nu: f64 = r.iter().zip(u).map(|(a, b)| a * b).sum();
        for (gi, ri) in g.iter_mut().zip(r) {
            *gi += scale * ri * nu;
        }
    }
    g
}

/// Gradient of the storage cost, or a subgradient at kinks.
///
/// Pieces adjacent to `u` are found by probing `u +- eta * e_t` with idle
/// intervals assigned to either direction. Pieces with equal gradients are
/// merged; if more than one remains the point is a kink and the returned
/// subgradient is their uniform combination.
pub fn storage_cost_subgradient(u: &[f64], p: &StorageParams) -> SubgradientInfo {
    let pieces = adjacent_piece_gradients(u, p.capacity_e, p.b);
    let k = pieces.len();
    let gamma = vec![1.0 / k as f64; k];
    let mut gradient = vec![0.0; u.len()];
    for piece in &pieces {
        for (g, v) in gradient.iter_mut().zip(piece) {
            *g += v / k as f64;
        }
    }
    SubgradientInfo {
        gradient,
        gamma,
        piece_gradients: pieces,
    }
}

/// Distinct gradients of `(scale/2)|N u|^2` over the pieces meeting at `u`.
///
/// Hours with negligible dispatch count as idle. When there are few of them,
/// every charge/discharge assignment is tried; otherwise only the two uniform
/// ones.
pub(crate) fn adjacent_piece_gradients(u: &[f64], capacity_e: f64, scale: f64) -> Vec<Vec<f64>> {
    let mut pieces: Vec<Vec<f64>> = Vec::new();
    for pat in rainflow::adjacent_patterns(u, capacity_e) {
        let g = piece_gradient(&pat.rows, u, scale);
        let gscale = g.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if !pieces.iter().any(|q| {
            q.iter()
                .zip(&g)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * gscale)
        }) {
            pieces.push(g);
        }
    }
    pieces
}

/// Gradient of the piece entered from `u` along `dir`, i.e. the piece that
/// attains the directional derivative in that direction. Idle hours that
/// `dir` leaves untouched are given `hint`.
pub(crate) fn piece_gradient_along(
    u: &[f64],
    dir: &[f64],
    capacity_e: f64,
    scale: f64,
    hint: i8,
) -> Vec<f64> {
    let xscale = u.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let dscale = dir.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let eta = 1e-7 * xscale / dscale;
    let probe: Vec<f64> = u
        .iter()
        .zip(dir)
        .map(|(&v, &d)| if v.abs() <= 1e-12 * xscale { 0.0 } else { v } + eta * d)
        .collect();
    let pat = pattern(&probe, capacity_e, Some(&vec![hint; u.len()]));
    piece_gradient(&pat.rows, u, scale)
}

/// Cycle depths under the storage unit's own capacity.
pub fn storage_depths(u: &[f64], p: &StorageParams) -> Vec<f64> {
    rainflow::pattern(u, p.capacity_e, None)
        .rows
        .iter()
        .map(|r| r.iter().zip(u).map(|(a, b)| a * b).sum())
        .collect()
}
