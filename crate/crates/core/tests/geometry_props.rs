use parahom::geometry::{cone_contains, parabolic_distance, parabolic_norm, Cone, ParabolicPoint};
use proptest::prelude::*;

const CASES: u32 = 100_000;

fn coord() -> impl Strategy<Value = f64> {
    prop_oneof![-1e3..1e3f64, -1.0..1.0f64, -1e-3..1e-3f64]
}

fn point(d: usize) -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(coord(), d), coord())
}

/// Root of `t²/ρ⁴ + |X|²/ρ² = 1` by bisection on `ρ²`.
fn bisection_norm(x: &[f64], t: f64) -> f64 {
    let s: f64 = x.iter().map(|v| v * v).sum();
    let f = |q: f64| t * t / (q * q) + s / q - 1.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn norm_scales_parabolically((x, t) in point(2), gamma in 1e-3..10.0f64) {
        let rho = parabolic_norm(&x, t);
        let scaled: Vec<f64> = x.iter().map(|v| gamma * v).collect();
        let lhs = parabolic_norm(&scaled, gamma * gamma * t);
        prop_assert!((lhs - gamma * rho).abs() <= 1e-12 * gamma * rho, "{lhs} vs {}", gamma * rho);
    }

    #[test]
    fn norm_solves_its_defining_equation((x, t) in point(2)) {
        prop_assume!(x.iter().any(|&v| v != 0.0) || t != 0.0);
        let rho = parabolic_norm(&x, t);
        let s: f64 = x.iter().map(|v| v * v).sum();
        let residual = t * t / rho.powi(4) + s / (rho * rho) - 1.0;
        prop_assert!(residual.abs() <= 1e-12, "residual {residual}");
        let b = bisection_norm(&x, t);
        prop_assert!((rho - b).abs() <= 1e-10 * b, "{rho} vs bisection {b}");
    }

    #[test]
    fn distance_is_a_quasi_metric_with_constant_two(p in point(2), q in point(2), r in point(2)) {
        let (p, q, r) = (ParabolicPoint::new(p.0, p.1), ParabolicPoint::new(q.0, q.1), ParabolicPoint::new(r.0, r.1));
        let pr = parabolic_distance(&p, &r).unwrap();
        let pq = parabolic_distance(&p, &q).unwrap();
        let qr = parabolic_distance(&q, &r).unwrap();
        prop_assert!(pr <= 2.0 * (pq + qr) * (1.0 + 1e-12));
        prop_assert_eq!(pq, parabolic_distance(&q, &p).unwrap());
    }

    #[test]
    fn cones_grow_with_the_opening(
        vertex in prop::collection::vec(-2.0..2.0f64, 1),
        t0 in -2.0..2.0f64,
        x in prop::collection::vec(-4.0..4.0f64, 1),
        t in -4.0..4.0f64,
        lambda in 0.0..4.0f64,
        eta1 in 0.01..5.0f64,
        extra in 0.0..5.0f64,
    ) {
        let narrow = Cone::new(vertex.clone(), t0, eta1).unwrap();
        let wide = Cone::new(vertex, t0, eta1 + extra).unwrap();
        if cone_contains(&narrow, &x, t, lambda) {
            prop_assert!(cone_contains(&wide, &x, t, lambda));
        }
    }
}

#[test]
fn distance_rejects_mixed_dimensions() {
    let p = ParabolicPoint::new(vec![0.0, 0.0], 0.0);
    let q = ParabolicPoint::new(vec![0.0], 0.0);
    assert!(parabolic_distance(&p, &q).is_err());
}
