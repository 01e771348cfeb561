use cyclemarket::costs::{
    generator_cost, generator_gradient, storage_cost, storage_cost_subgradient, storage_depths,
};
use cyclemarket::rainflow::cycle_depths;
use cyclemarket::{GeneratorParams, StorageParams};
use proptest::prelude::*;

fn gen(c: f64, a: f64) -> GeneratorParams {
    GeneratorParams::new(c, a, f64::NEG_INFINITY, f64::INFINITY).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn generator_cost_example() {
    // 0.5*4*(4+1+9) + (2-1+3) = 28 + 4
    let p = gen(4.0, 1.0);
    assert_eq!(generator_cost(&[2.0, -1.0, 3.0], &p), 32.0);
    assert_eq!(
        generator_gradient(&[2.0, -1.0, 3.0], &p),
        vec![9.0, -3.0, 13.0]
    );
}

#[test]
fn storage_cost_is_half_b_sum_of_squared_depths() {
    let p = StorageParams::with_b(1.0, 3.0);
    let u = [-1.0, 0.5, -1.5];
    // depths {0.5, 0.5, 2}: 1.5 * (0.25 + 0.25 + 4)
    assert!((storage_cost(&u, &p) - 6.75).abs() < 1e-12);
    let d = cycle_depths(&u, 1.0, 0.5).unwrap();
    let mut a = storage_depths(&u, &p);
    let mut b = d.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn storage_cost_of_idle_unit_is_zero() {
    let p = StorageParams::with_b(10.0, 2.0);
    assert_eq!(storage_cost(&[0.0; 8], &p), 0.0);
    let sg = storage_cost_subgradient(&[0.0; 8], &p);
    assert!(sg.gradient.iter().all(|v| *v == 0.0));
}

#[test]
fn plateau_at_an_extremum_is_a_kink() {
    // SoC 0 -> 1 -> 1 -> 0: the idle middle hour joins the charging run or
    // the discharging run depending on the sign of a perturbation.
    let p = StorageParams::with_b(1.0, 1.0);
    let sg = storage_cost_subgradient(&[-1.0, 0.0, 1.0], &p);
    assert!(sg.gamma.len() >= 2, "{sg:?}");
    assert!((sg.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(!sg.is_smooth());
    let mut pieces = sg.piece_gradients.clone();
    pieces.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(pieces, vec![vec![-1.0, -1.0, 1.0], vec![-1.0, 1.0, 1.0]]);
}

#[test]
fn tied_ranges_are_not_a_kink() {
    // SoC 0 -> 1 -> 0 -> 1: the two groupings of a tie give the same gradient.
    let p = StorageParams::with_b(1.0, 1.0);
    assert!(storage_cost_subgradient(&[-1.0, 1.0, -1.0], &p).is_smooth());
}

fn central_diff(f: impl Fn(&[f64]) -> f64, u: &[f64], h: f64) -> Vec<f64> {
    let mut x = u.to_vec();
    (0..u.len())
        .map(|t| {
            x[t] = u[t] + h;
            let fp = f(&x);
            x[t] = u[t] - h;
            let fm = f(&x);
            x[t] = u[t];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences_at_smooth_points() {
    let p = StorageParams::with_b(20.0, 0.7);
    let u = [-3.0, 5.0, -1.2, 4.1, -6.0, 0.7, 2.2, -2.5];
    let sg = storage_cost_subgradient(&u, &p);
    assert!(sg.is_smooth());
    let fd = central_diff(|x| storage_cost(x, &p), &u, 1e-6);
    for (a, b) in sg.gradient.iter().zip(&fd) {
        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

fn profile() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, 2..=24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn storage_cost_is_convex(u in profile(), seed in prop::collection::vec(-10.0..10.0f64, 24), lam in 0.0..1.0f64) {
        let p = StorageParams::with_b(15.0, 1.3);
        let v = &seed[..u.len()];
        let mid: Vec<f64> = u.iter().zip(v).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let lhs = storage_cost(&mid, &p);
        let rhs = lam * storage_cost(&u, &p) + (1.0 - lam) * storage_cost(v, &p);
        prop_assert!(lhs <= rhs + 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn subgradient_inequality(u in profile(), seed in prop::collection::vec(-10.0..10.0f64, 24)) {
        let p = StorageParams::with_b(15.0, 1.3);
        let v = &seed[..u.len()];
        let sg = storage_cost_subgradient(&u, &p);
        let diff: Vec<f64> = v.iter().zip(&u).map(|(a, b)| a - b).collect();
        let lower = storage_cost(&u, &p) + dot(&sg.gradient, &diff);
        let fv = storage_cost(v, &p);
        prop_assert!(fv >= lower - 1e-9 * (1.0 + fv.abs()), "{} < {}", fv, lower);
    }

    #[test]
    fn storage_cost_is_homogeneous_of_degree_two(u in profile(), k in 0.01..50.0f64) {
        let p = StorageParams::with_b(15.0, 1.3);
        let scaled: Vec<f64> = u.iter().map(|v| k * v).collect();
        let a = storage_cost(&scaled, &p);
        let b = k * k * storage_cost(&u, &p);
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
    }

    #[test]
    fn euler_identity_holds(u in profile()) {
        // A degree-2 homogeneous piecewise quadratic satisfies <g, u> = 2 f(u)
        // for every piece gradient at u.
        let p = StorageParams::with_b(15.0, 1.3);
        let f = storage_cost(&u, &p);
        let sg = storage_cost_subgradient(&u, &p);
        for g in &sg.piece_gradients {
            prop_assert!((dot(g, &u) - 2.0 * f).abs() <= 1e-9 * (1.0 + f.abs()));
        }
    }

    #[test]
    fn generator_cost_matches_its_gradient(g in prop::collection::vec(-100.0..100.0f64, 1..10), c in 0.01..50.0f64, a in -10.0..10.0f64) {
        let p = gen(c, a);
        let grad = generator_gradient(&g, &p);
        let fd = central_diff(|x| generator_cost(x, &p), &g, 1e-4);
        for (x, y) in grad.iter().zip(&fd) {
            prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
        }
    }
}
