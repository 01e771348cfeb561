use cyclemarket::costs::{generator_cost, storage_cost};
use cyclemarket::dayahead::{clear_uniform, equilibrium_bids_dayahead, DayAheadResult};
use cyclemarket::rainflow::rainflow_map;
use cyclemarket::realtime::{
    best_response_unaware, best_response_unaware_from, clear_constrained_aware, equilibrium_aware,
    equilibrium_aware_window, equilibrium_unaware, omega_published, unaware_residuals, Commitments,
    RealTimeBids, RealTimeMode,
};
use cyclemarket::{GeneratorParams, MarketError, MarketParams, StorageParams, DEFAULT_TOL};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn two_peak(t: usize) -> Vec<f64> {
    (0..t)
        .map(|i| 600.0 + 200.0 * (2.0 * std::f64::consts::PI * (i as f64 - 4.0) / 12.0).sin())
        .collect()
}

fn market(cs: &[f64], stores: Vec<StorageParams>) -> MarketParams {
    MarketParams::new(
        cs.iter().map(|&c| GeneratorParams::unbounded(c)).collect(),
        stores,
    )
}

fn dayahead(p: &MarketParams, d: &[f64]) -> DayAheadResult {
    clear_uniform(&equilibrium_bids_dayahead(p), d, p, DEFAULT_TOL).unwrap()
}

fn residual(rng: &mut ChaCha8Rng, t: usize, amp: f64) -> Vec<f64> {
    (0..t).map(|_| rng.gen_range(-amp..amp)).collect()
}

/// Balance of `sum_j slope_j * lambda` against `target`, relative.
fn imbalance(slopes: &[f64], lambda: &[f64], target: &[f64]) -> f64 {
    let s: f64 = slopes.iter().sum();
    let scale = target.iter().fold(1e-300_f64, |m, v| m.max(v.abs()));
    lambda
        .iter()
        .zip(target)
        .fold(0.0, |m, (l, d)| f64::max(m, (s * l - d).abs() / scale))
}

// ---- unaware ----

#[test]
fn generator_only_price_scale() {
    let p = market(&[20.0], vec![]);
    let d = two_peak(24);
    let da = dayahead(&p, &d);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dr = residual(&mut rng, 24, 30.0);
    let (bids, res) = equilibrium_unaware(&p, &dr, &da).unwrap();
    let expected = dot(&da.lambda, &dr) / dot(&dr, &dr) + 20.0;
    assert!((res.price_scale - expected).abs() / expected.abs() < 1e-12);
    assert!((omega_published(&p, &dr, &da).unwrap() - expected).abs() / expected.abs() < 1e-12);
    assert_eq!(bids.mode, RealTimeMode::Unaware);
    assert!(imbalance(&bids.alpha_r, &res.lambda_r, &dr) < 1e-12);
}

/// Profit-maximising slopes against `lambda`, derived directly from each
/// participant's perceived profit with the day-ahead map held fixed.
fn oracle_slopes(p: &MarketParams, da: &DayAheadResult, lambda: &[f64]) -> Vec<f64> {
    let l2 = dot(lambda, lambda);
    let mut out: Vec<f64> = p
        .generators
        .iter()
        .zip(&da.g)
        .map(|(g, gd)| (l2 - g.c * dot(gd, lambda)) / (g.c * l2))
        .collect();
    for (s, ud) in p.storages.iter().zip(&da.u) {
        let m = rainflow_map(ud, s.capacity_e, s.x0).unwrap().map;
        let mu: Vec<f64> = (&m * DVector::from_column_slice(ud))
            .iter()
            .copied()
            .collect();
        let ml: Vec<f64> = (&m * DVector::from_column_slice(lambda))
            .iter()
            .copied()
            .collect();
        out.push((l2 - s.b * dot(&mu, &ml)) / (s.b * dot(&ml, &ml)));
    }
    out
}

fn random_instance(rng: &mut ChaCha8Rng) -> (MarketParams, DayAheadResult, Vec<f64>) {
    let ng = rng.gen_range(1..=3);
    let cs: Vec<f64> = (0..ng).map(|_| rng.gen_range(5.0..40.0)).collect();
    let e = rng.gen_range(20.0..200.0);
    let stores = (0..rng.gen_range(1..=2))
        .map(|_| StorageParams::with_b(e, rng.gen_range(0.5..10.0)))
        .collect();
    let p = market(&cs, stores);
    let d: Vec<f64> = two_peak(24)
        .iter()
        .map(|v| v + rng.gen_range(-20.0..20.0))
        .collect();
    let da = dayahead(&p, &d);
    let dr = residual(rng, 24, 15.0);
    (p, da, dr)
}

#[test]
fn closed_form_is_a_fixed_point_of_best_responses() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for _ in 0..20 {
        let (p, da, dr) = random_instance(&mut rng);
        let (bids, res) = equilibrium_unaware(&p, &dr, &da).unwrap();
        let oracle = oracle_slopes(&p, &da, &res.lambda_r);
        let ours: Vec<f64> = bids.alpha_r.iter().chain(&bids.beta_r).copied().collect();
        for (a, b) in ours.iter().zip(&oracle) {
            assert!(
                (a - b).abs() <= 1e-9 * b.abs().max(1e-6),
                "{ours:?} vs {oracle:?}"
            );
        }
        assert!(imbalance(&oracle, &res.lambda_r, &dr) < 1e-9);
        let (bal, foc) = unaware_residuals(&p, &dr, &da, &res).unwrap();
        assert!(bal < 1e-9 && foc < 1e-8, "{bal} {foc}");
        checked += 1;
    }
    assert_eq!(checked, 20);
}

#[test]
fn best_response_reaches_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for _ in 0..20 {
        let (p, da, dr) = random_instance(&mut rng);
        let (_, exact) = equilibrium_unaware(&p, &dr, &da).unwrap();
        let (_, it) = best_response_unaware(&p, &dr, &da, 1e-10, 100).unwrap();
        if exact.price_scale < 0.0 {
            // Still the unique equilibrium, but the aggregate slope is negative.
            assert!(it.warnings.iter().any(|w| w.contains("not positive")));
        }
        assert!((it.price_scale - exact.price_scale).abs() <= 1e-8 * exact.price_scale.abs());
        assert!(it.converged);
        assert_eq!(it.trace.len(), it.iterations + 1);
        checked += 1;
    }
    assert_eq!(checked, 20);
}

#[test]
fn single_generator_converges_in_three_rounds() {
    let p = market(&[20.0], vec![]);
    let da = dayahead(&p, &two_peak(24));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dr = residual(&mut rng, 24, 30.0);
    let (_, res) = best_response_unaware(&p, &dr, &da, 1e-10, 100).unwrap();
    assert!(res.iterations <= 3, "{} iterations", res.iterations);
}

#[test]
fn best_response_is_independent_of_the_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (p, da, dr) = random_instance(&mut rng);
    let (_, exact) = equilibrium_unaware(&p, &dr, &da).unwrap();
    for w0 in [0.5, 5.0, 20.0, 100.0, 1000.0] {
        let (_, r) = best_response_unaware_from(
            &p,
            &dr,
            &da,
            1e-10,
            100,
            Some(w0 * exact.price_scale.signum()),
        )
        .unwrap();
        assert!(
            (r.price_scale - exact.price_scale).abs() <= 1e-8 * exact.price_scale.abs(),
            "start {w0}"
        );
    }
    assert!(best_response_unaware_from(&p, &dr, &da, 1e-10, 100, Some(0.0)).is_err());
}

#[test]
fn best_response_reports_nonconvergence_with_its_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (p, da, dr) = random_instance(&mut rng);
    match best_response_unaware(&p, &dr, &da, 1e-14, 1) {
        Err(MarketError::NonConvergence { iterations, trace }) => {
            assert_eq!(iterations, 1);
            assert_eq!(trace.len(), 2);
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn zero_residual_is_degenerate() {
    let p = market(&[20.0], vec![StorageParams::with_b(50.0, 3.93)]);
    let da = dayahead(&p, &two_peak(24));
    for r in [
        equilibrium_unaware(&p, &[0.0; 24], &da).map(|_| ()),
        best_response_unaware(&p, &[0.0; 24], &da, 1e-10, 50).map(|_| ()),
    ] {
        assert!(matches!(r, Err(MarketError::DegenerateDemand(_))), "{r:?}");
    }
    assert!(equilibrium_unaware(&p, &[1.0; 23], &da).is_err());
}

#[test]
fn residual_outside_the_cycle_map_keeps_storage_out() {
    // No day-ahead storage activity means an empty map: the unit cannot see
    // the residual and bids zero.
    let p = market(&[20.0], vec![StorageParams::with_b(50.0, 3.93)]);
    let da = dayahead(&p, &[500.0; 6]);
    let (bids, res) = equilibrium_unaware(&p, &[1.0, -2.0, 0.5, 0.0, 1.0, 3.0], &da).unwrap();
    assert_eq!(bids.beta_r, vec![0.0]);
    assert!(!res.warnings.is_empty());
    assert!(
        (res.price_scale - omega_published(&p, &[1.0, -2.0, 0.5, 0.0, 1.0, 3.0], &da).unwrap())
            .abs()
            < 1e-9
    );
}

// ---- aware ----

#[test]
fn aware_generator_only_example() {
    let p = market(&[20.0], vec![]);
    let d = two_peak(24);
    let da = dayahead(&p, &d);
    let (bids, res) = equilibrium_aware(&p, &d, &da).unwrap();
    assert_eq!(bids.alpha_r, vec![0.05]);
    assert!((res.price_scale - 20.0).abs() < 1e-12);
    assert!(res.g_r[0].iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn aware_slopes_maximise_profit_on_a_grid() {
    let p = market(&[4.0, 9.0], vec![StorageParams::with_b(30.0, 2.0)]);
    let d = [10.0, 14.0, 8.0, 11.0];
    let da = dayahead(&p, &d);
    let (bids, res) = equilibrium_aware(&p, &d, &da).unwrap();
    let lam = &res.lambda_r;
    let scaled = |k: f64| -> Vec<f64> { lam.iter().map(|l| k * l).collect() };
    let argmax = |f: &dyn Fn(f64) -> f64, hi: f64| -> f64 {
        let n = 200_000;
        (0..=n)
            .map(|i| hi * i as f64 / n as f64)
            .fold((f64::NEG_INFINITY, 0.0), |best, k| {
                let v = f(k);
                if v > best.0 {
                    (v, k)
                } else {
                    best
                }
            })
            .1
    };
    for (g, a) in p.generators.iter().zip(&bids.alpha_r) {
        let best = argmax(
            &|k| dot(lam, &scaled(k)) - generator_cost(&scaled(k), g),
            4.0 * a,
        );
        assert!((best - a).abs() <= 1e-4 * a, "{best} vs {a}");
    }
    let s = &p.storages[0];
    let b = bids.beta_r[0];
    let best = argmax(
        &|k| dot(lam, &scaled(k)) - storage_cost(&scaled(k), s),
        4.0 * b,
    );
    assert!((best - b).abs() <= 1e-4 * b, "{best} vs {b}");
    let all: Vec<f64> = bids.alpha_r.iter().chain(&bids.beta_r).copied().collect();
    assert!(imbalance(&all, lam, &d) < 1e-12);
}

#[test]
fn aware_outcome_clears_and_is_collinear() {
    let p = market(
        &[20.0, 35.0],
        vec![
            StorageParams::with_b(50.0, 3.93),
            StorageParams::with_b(50.0, 1.0),
        ],
    );
    let d = two_peak(24);
    let da = dayahead(&p, &d);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let actual: Vec<f64> = d.iter().map(|v| v + rng.gen_range(-30.0..30.0)).collect();
    let (bids, res) = equilibrium_aware(&p, &actual, &da).unwrap();
    for t in 0..24 {
        let supply: f64 = (0..2).map(|j| da.g[j][t] + res.g_r[j][t]).sum::<f64>()
            + (0..2).map(|s| da.u[s][t] + res.u_r[s][t]).sum::<f64>();
        assert!((supply - actual[t]).abs() < 1e-9 * actual[t]);
        assert!((res.lambda_r[t] - res.price_scale * actual[t]).abs() < 1e-9 * res.lambda_r[t]);
        for s in 0..2 {
            let total = da.u[s][t] + res.u_r[s][t];
            assert!((total - bids.beta_r[s] * res.lambda_r[t]).abs() < 1e-9 * (1.0 + total.abs()));
        }
    }
}

#[test]
fn aware_with_no_forecast_error_still_reschedules_storage() {
    // Aware bids are slopes on total dispatch, so storage follows lambda ~ d
    // even when the forecast was exact.
    let p = market(&[20.0], vec![StorageParams::with_b(50.0, 3.93)]);
    let d = two_peak(24);
    let da = dayahead(&p, &d);
    let (_, res) = equilibrium_aware(&p, &d, &da).unwrap();
    assert!(res.u_r[0].iter().any(|v| v.abs() > 1.0));
    let net: f64 = (0..24)
        .map(|t| res.g_r[0][t] + res.u_r[0][t])
        .map(f64::abs)
        .fold(0.0, f64::max);
    assert!(net < 1e-9);
}

// ---- constrained aware ----

#[test]
fn constrained_clearing_matches_closed_form_when_limits_are_slack() {
    let p = market(&[1.0, 2.0], vec![StorageParams::with_b(100.0, 5000.0)]);
    let d = [10.0, 14.0, 8.0, 11.0, 13.0];
    let da = dayahead(&p, &[9.0, 15.0, 8.5, 10.0, 12.0]);
    let commit = Commitments::from_dayahead(&da);
    let (bids, exact) = equilibrium_aware_window(&p, &d, &commit).unwrap();
    let res = clear_constrained_aware(&bids, &d, &commit, &[0.5], &p, DEFAULT_TOL).unwrap();
    for t in 0..5 {
        assert!((res.lambda_r[t] - exact.lambda_r[t]).abs() < 1e-6 * exact.lambda_r[t]);
        assert!((res.u_r[0][t] - exact.u_r[0][t]).abs() < 1e-6);
        assert!((res.g_r[1][t] - exact.g_r[1][t]).abs() < 1e-6);
    }
}

#[test]
fn constrained_clearing_clips_at_the_rate_limit() {
    let s = StorageParams::new(50.0, 150.0, 5.24e-4, 4.0, 0.5).unwrap();
    let p = MarketParams::new(
        vec![GeneratorParams::new(20.0, 0.0, 0.0, 2000.0).unwrap()],
        vec![s],
    );
    let d = two_peak(6);
    let commit = Commitments {
        g: vec![d.clone()],
        u: vec![vec![0.0; 6]],
    };
    let bids = RealTimeBids {
        alpha_r: vec![0.05],
        beta_r: vec![10.0],
        mode: RealTimeMode::Aware,
    };
    let res = clear_constrained_aware(&bids, &d, &commit, &[1.0], &p, DEFAULT_TOL).unwrap();
    assert!(res.u_r[0].iter().all(|v| v.abs() <= 12.5 + 1e-7));
    assert!(res.u_r[0].iter().any(|v| (v.abs() - 12.5).abs() < 1e-6));
    for t in 0..6 {
        assert!((res.g_r[0][t] + res.u_r[0][t]).abs() < 1e-6);
    }
}

#[test]
fn constrained_clearing_keeps_soc_in_range() {
    let s = StorageParams::new(50.0, 150.0, 5.24e-4, 4.0, 0.5).unwrap();
    let p = MarketParams::new(
        vec![GeneratorParams::new(20.0, 0.0, 0.0, 2000.0).unwrap()],
        vec![s],
    );
    let d = two_peak(12);
    let commit = Commitments {
        g: vec![d.clone()],
        u: vec![vec![0.0; 12]],
    };
    let bids = RealTimeBids {
        alpha_r: vec![0.05],
        beta_r: vec![10.0],
        mode: RealTimeMode::Aware,
    };
    let res = clear_constrained_aware(&bids, &d, &commit, &[0.2], &p, DEFAULT_TOL).unwrap();
    let mut x = 0.2;
    for v in &res.u_r[0] {
        x -= v / 50.0;
        assert!((-1e-7..=1.0 + 1e-7).contains(&x), "{x}");
    }
    assert!(clear_constrained_aware(&bids, &d, &commit, &[], &p, DEFAULT_TOL).is_err());
}
