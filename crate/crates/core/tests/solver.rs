use nalgebra::DMatrix;
use parahom::coeffs::{scale_field, CoeffSpec, CoefficientField, Periodicity};
use parahom::geometry::{DomainSpec, GraphDomain, LipschitzCylinder};
use parahom::pde::{
    rescale_solution, solve_dirichlet, BoundaryData, DirichletSolver, InitialData, ScalarField, SolveOptions, SpaceTimeGrid, TimeScheme,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_box(t_final: f64) -> DomainSpec {
    DomainSpec::Cylinder(LipschitzCylinder::unit_box(2, 1.0, t_final))
}

fn grid_for(dom: &DomainSpec, cells: usize, t1: f64, steps: usize) -> SpaceTimeGrid {
    SpaceTimeGrid::for_domain(dom.graph(), &[cells, cells], 0.0, t1, steps).unwrap()
}

fn tight() -> SolveOptions {
    SolveOptions { tolerance: 1e-14, ..Default::default() }
}

/// `t · (c + Σ a_k sin²(ω_k x_k + φ_k))`, nonnegative and zero at `t = 0`.
fn random_nonnegative_data(rng: &mut ChaCha8Rng) -> BoundaryData {
    let c: f64 = rng.random_range(0.0..1.0);
    let terms: Vec<(f64, f64, f64)> =
        (0..2).map(|_| (rng.random_range(0.0..2.0), rng.random_range(0.5..6.0), rng.random_range(0.0..3.0))).collect();
    BoundaryData::new("random", move |x, t| {
        t * (c + terms.iter().zip(x).map(|(&(a, w, p), &xk)| a * (w * xk + p).sin().powi(2)).sum::<f64>())
    })
}

#[test]
fn discrete_maximum_principle_on_random_nonnegative_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let presets = ["identity", "laminate", "trig", "checkerboard"];
    let mut worst_low: f64 = 0.0;
    let mut worst_high: f64 = 0.0;
    for trial in 0..50 {
        let a = CoeffSpec::preset(presets[trial % presets.len()]).unwrap().build(2).unwrap();
        let a = scale_field(&a, rng.random_range(0.1..1.0)).unwrap();
        let dom = unit_box(0.25);
        let cells = rng.random_range(6..20);
        let steps = rng.random_range(4..24);
        let grid = grid_for(&dom, cells, 0.25, steps);
        let f = random_nonnegative_data(&mut rng);
        let u = solve_dirichlet(&a, &dom, &f, &grid, tight()).unwrap();
        let data_max = u.boundary.iter().cloned().fold(0.0, f64::max);
        let lo = u.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = u.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        worst_low = worst_low.min(lo);
        worst_high = worst_high.max(hi - data_max);
    }
    assert!(worst_low >= -1e-12, "minimum {worst_low:e}");
    assert!(worst_high <= 1e-12, "overshoot {worst_high:e}");
}

#[test]
fn solution_map_is_linear() {
    let a = CoeffSpec::Trig.build(2).unwrap();
    let dom = unit_box(0.25);
    let grid = grid_for(&dom, 16, 0.25, 16);
    let f = BoundaryData::new("f", |x, t| t * (1.0 + x[0] * x[1]));
    let g = BoundaryData::new("g", |x, t| t * t * (x[0] - 2.0 * x[1]).cos());
    let (alpha, beta) = (1.7, -0.4);
    let solver = DirichletSolver::new(&a, &dom, &grid, SolveOptions::default()).unwrap();
    let uf = solver.solve(&f, &InitialData::Zero).unwrap();
    let ug = solver.solve(&g, &InitialData::Zero).unwrap();
    let ufg = solver.solve(&BoundaryData::combine(alpha, &f, beta, &g), &InitialData::Zero).unwrap();
    let scale = ufg.max_abs();
    for ((h, p), q) in ufg.values.iter().zip(&uf.values).zip(&ug.values) {
        assert!((h - alpha * p - beta * q).abs() <= 1e-8 * scale);
    }
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let a = CoeffSpec::preset("checkerboard").unwrap().build(2).unwrap();
    let dom = unit_box(0.25);
    let grid = grid_for(&dom, 24, 0.25, 12);
    let f = BoundaryData::new("f", |x, t| t * (3.0 * x[0]).sin().abs());
    let u = solve_dirichlet(&a, &dom, &f, &grid, SolveOptions::default()).unwrap();
    let v = solve_dirichlet(&a, &dom, &f, &grid, SolveOptions::default()).unwrap();
    assert_eq!(u, v);
}

/// Max difference at fixed interior points at the final time.
fn probe_gap(u: &ScalarField, v: &ScalarField) -> f64 {
    let pts = [[0.3, 0.4], [0.5, 0.5], [0.7, 0.2], [0.25, 0.75], [0.6, 0.65]];
    let (tu, tv) = (u.grid.t1(), v.grid.t1());
    pts.iter().map(|p| (u.interpolate(p, tu) - v.interpolate(p, tv)).abs()).fold(0.0, f64::max)
}

fn smooth_problem(cells: usize, steps: usize, scheme: TimeScheme) -> ScalarField {
    let a = CoefficientField::new(2, 2.0, Periodicity::None, "smooth", |x| {
        let w = 1.5 + 0.5 * (2.0 * x[0]).sin() * (3.0 * x[1]).cos();
        DMatrix::from_row_slice(2, 2, &[w, 0.2, 0.2, 1.0 + 0.25 * x[0]])
    })
    .unwrap();
    let dom = unit_box(0.25);
    let grid = grid_for(&dom, cells, 0.25, steps);
    let f = BoundaryData::new("smooth", |x, t| (8.0 * t).sin() * (1.0 + x[0] + 0.5 * x[1] * x[1]));
    solve_dirichlet(&a, &dom, &f, &grid, SolveOptions { scheme, tolerance: 1e-13, ..Default::default() }).unwrap()
}

#[test]
fn self_convergence_under_refinement() {
    // implicit Euler with dt ∝ h² and Crank–Nicolson with dt ∝ h are both second order in h
    for (scheme, steps) in [(TimeScheme::ImplicitEuler, [4, 16, 64, 256]), (TimeScheme::CrankNicolson, [8, 16, 32, 64])] {
        let u: Vec<ScalarField> = [8, 16, 32, 64].iter().zip(steps).map(|(&c, s)| smooth_problem(c, s, scheme)).collect();
        let gaps: Vec<f64> = u.windows(2).map(|w| probe_gap(&w[0], &w[1])).collect();
        for g in gaps.windows(2) {
            let factor = g[0] / g[1];
            assert!(factor >= 1.7, "{scheme:?}: gaps {gaps:?}");
        }
    }
}

#[test]
fn rescaling_maps_oscillating_solutions_to_the_unit_scale() {
    let eps = 0.25;
    let t_final = 0.25;
    let a = CoeffSpec::laminate().build(2).unwrap();
    let dom = unit_box(t_final);
    let grid = grid_for(&dom, 32, t_final, 16);
    let f = BoundaryData::new("f", |x, t| (20.0 * t).sin().powi(2) * (1.0 + x[0] + 2.0 * x[1]));
    let u = solve_dirichlet(&scale_field(&a, eps).unwrap(), &dom, &f, &grid, tight()).unwrap();

    let big = DomainSpec::Cylinder(
        LipschitzCylinder::new(
            GraphDomain::new(parahom::geometry::Phi::zero(), 0.0, vec![[0.0, 4.0], [0.0, 4.0]]).unwrap(),
            t_final / (eps * eps),
        )
        .unwrap(),
    );
    let big_grid = grid_for(&big, 32, t_final / (eps * eps), 16);
    let f_big = BoundaryData::new("f rescaled", move |y, s| {
        let x: Vec<f64> = y.iter().map(|v| eps * v).collect();
        (20.0 * eps * eps * s).sin().powi(2) * (1.0 + x[0] + 2.0 * x[1])
    });
    let v = solve_dirichlet(&a, &big, &f_big, &big_grid, tight()).unwrap();
    let w = rescale_solution(&u, eps, &big_grid).unwrap();
    let scale = v.max_abs();
    let gap = v.values.iter().zip(&w.values).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(gap <= 1e-9 * scale, "gap {gap:e}");
    assert!(rescale_solution(&u, 2.0 * eps, &big_grid).is_err());
}

#[test]
fn incompatible_initial_data_is_refused() {
    let a = CoefficientField::identity(2);
    let dom = unit_box(0.25);
    let grid = grid_for(&dom, 8, 0.25, 4);
    let f = BoundaryData::new("one", |_, _| 1.0);
    assert!(solve_dirichlet(&a, &dom, &f, &grid, SolveOptions::default()).is_err());
}

#[test]
fn field_files_round_trip() {
    let a = CoefficientField::identity(2);
    let dom = unit_box(0.25);
    let grid = grid_for(&dom, 8, 0.25, 4);
    let f = BoundaryData::new("f", |x, t| t * x[0]);
    let u = solve_dirichlet(&a, &dom, &f, &grid, SolveOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.bin");
    u.write_binary(&path, &serde_json::json!({"label": "test"})).unwrap();
    let back = ScalarField::read_binary(&path).unwrap();
    assert_eq!(back.values, u.values);
    assert_eq!(back.grid, u.grid);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("u.bin.json")).unwrap()).unwrap();
    assert_eq!(side["meta"]["label"], "test");
}
