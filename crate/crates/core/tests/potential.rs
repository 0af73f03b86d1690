use parahom::coeffs::{CoeffSpec, CoefficientField};
use parahom::fv::Grid;
use parahom::geometry::{CubeKind, DomainSpec, GraphDomain, ParabolicCube};
use parahom::harness::{reference_half_space, reference_resolution, run_check, Check, Subject};
use parahom::oracle;
use parahom::pde::{caccioppoli_ratio, moser_ratio, ScalarField, SpaceTimeGrid};
use parahom::potential::{
    caloric_measure, doubling_ratio, greens_function, kernel_estimate, local_solvability_ratio, measure_positivity, reverse_holder_ratio,
    Pole,
};

fn identity_setup() -> (CoefficientField, DomainSpec, parahom::potential::Resolution) {
    let dom = reference_half_space();
    let res = reference_resolution(&dom).unwrap();
    (CoefficientField::identity(2), dom, res)
}

#[test]
fn green_function_matches_the_images_formula() {
    let (a, dom, res) = identity_setup();
    let pole = Pole::new(vec![0.03125, 0.78125], 0.0);
    let g = greens_function(&a, &dom, &pole, 0.75, &res).unwrap();
    // parabolic distance at least eight cells from the pole, well inside the box
    for (x, t) in [([0.53125, 0.78125], 0.5), ([-0.34375, 0.40625], 0.25), ([0.03125, 1.28125], 0.75), ([0.5, 0.5], 0.6)] {
        let exact = oracle::half_space_green(&x, t, &pole.point, pole.t);
        let num = g.eval(&x, t);
        assert!((num / exact - 1.0).abs() < 0.02, "at {x:?}, {t}: {num} vs {exact}");
    }
}

#[test]
fn caloric_measure_and_kernel_match_closed_forms() {
    let (a, dom, res) = identity_setup();
    for (pole, cube) in [
        (Pole::new(vec![0.0, 1.0], 1.0), ParabolicCube::boundary(vec![0.0], 0.5, 0.25).unwrap()),
        (Pole::new(vec![0.5, 0.75], 1.5), ParabolicCube::boundary(vec![0.25], 1.0, 0.125).unwrap()),
    ] {
        let (s0, s1) = cube.t_range();
        let exact = oracle::half_space_measure(&pole.point, pole.t, &[cube.center[0] - cube.r], &[cube.center[0] + cube.r], (s0, s1));
        let m = caloric_measure(&a, &dom, &pole, &cube, &res).unwrap();
        assert!((m.value / exact - 1.0).abs() < 0.05, "{} vs {exact}", m.value);
        assert!(m.smoothing_error < 0.05 * m.value);
        let k = kernel_estimate(&a, &dom, &pole, &cube, 1, &res).unwrap();
        let total: f64 = k.cells.iter().map(|c| c.omega).sum();
        assert!((total / m.value - 1.0).abs() < 1e-9, "partition is additive");
        for c in &k.cells {
            let q = ParabolicCube { center: c.center.clone(), t: c.t, r: cube.r / 2.0, kind: CubeKind::Boundary };
            let (s0, s1) = q.t_range();
            let w = oracle::half_space_measure(&pole.point, pole.t, &[q.center[0] - q.r], &[q.center[0] + q.r], (s0, s1));
            assert!((c.density * c.measure / w - 1.0).abs() < 0.05);
        }
    }
}

#[test]
fn reverse_holder_ratio_grows_with_the_exponent() {
    let (_, dom, res) = identity_setup();
    let pole = Pole::new(vec![0.0, 1.0], 1.0);
    let cube = ParabolicCube::boundary(vec![0.0], 0.5, 0.25).unwrap();
    for name in ["identity", "trig"] {
        let a = CoeffSpec::preset(name).unwrap().build(2).unwrap();
        let k = kernel_estimate(&a, &dom, &pole, &cube, 2, &res).unwrap();
        let ratios: Vec<f64> = [1.5, 2.0, 3.0].iter().map(|&q| reverse_holder_ratio(&k, q).unwrap().ratio).collect();
        assert!(ratios[0] >= 1.0 - 1e-12, "{name}: {ratios:?}");
        assert!(ratios.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{name}: {ratios:?}");
        assert!((reverse_holder_ratio(&k, 1.0).unwrap().ratio - 1.0).abs() < 1e-12);
        assert!(reverse_holder_ratio(&k, 0.5).is_err());
    }
}

#[test]
fn doubling_and_positivity_for_periodic_presets() {
    let (_, dom, res) = identity_setup();
    let pole = Pole::new(vec![0.0, 1.0], 1.0);
    let cube = ParabolicCube::boundary(vec![0.0], 0.5, 0.25).unwrap();
    for name in ["laminate", "checkerboard"] {
        let a = CoeffSpec::preset(name).unwrap().build(2).unwrap();
        let d = doubling_ratio(&a, &dom, &pole, &cube, &res).unwrap();
        assert!(d.ratio > 1.0 && d.ratio < 50.0, "{name}: {}", d.ratio);
        let pts = [Pole::new(vec![0.0, 0.25], 0.6), Pole::new(vec![0.2, 0.5], 0.8)];
        assert!(measure_positivity(&a, &dom, &cube, &pts, &res).unwrap() > 0.0);
    }
}

#[test]
fn identity_checks_pass_against_their_oracles() {
    let a = CoefficientField::identity(2);
    let subject = Subject::new("identity", &a, true);
    for check in [Check::Harnack, Check::Comparison, Check::GreenSym] {
        let rows = run_check(check, &subject, None, Default::default()).unwrap();
        for r in rows {
            assert!(r.pass, "{r:?}");
            if let Some(reference) = r.reference {
                assert!((r.value / reference - 1.0).abs() <= 0.05, "{r:?}");
            }
        }
    }
}

fn sampled(
    lower: [f64; 2],
    upper: [f64; 2],
    cells: [usize; 2],
    t: (f64, f64),
    steps: usize,
    f: impl Fn(&[f64], f64) -> f64 + Copy,
) -> ScalarField {
    let grid = SpaceTimeGrid::new(Grid::new(lower.to_vec(), upper.to_vec(), cells.to_vec()).unwrap(), t.0, t.1, steps).unwrap();
    ScalarField::sample(&grid, f, f)
}

#[test]
fn energy_ratios_of_the_linear_solution() {
    // u = λ vanishes on the bottom; the box integrals are elementary
    let r = 0.25;
    let u = sampled([-0.75, 0.0], [0.75, 0.75], [24, 12], (0.0, 0.5), 32, |x, _| x[1]);
    let c = caccioppoli_ratio(&u, r).unwrap();
    assert!((c.ratio - 1.0 / 9.0).abs() < 1e-12, "{}", c.ratio);

    let u = sampled([-1.0, 0.0], [1.0, 1.0], [32, 16], (-0.5, 0.5), 64, |x, _| x[1]);
    let q = ParabolicCube::boundary(vec![0.0], 0.0, r).unwrap();
    let e = local_solvability_ratio(&u, &q).unwrap();
    assert!((e.ratio - 3.0 / 64.0).abs() < 1e-3, "{}", e.ratio);

    let shifted = u.map(|v| v + 1.0);
    assert!(caccioppoli_ratio(&shifted, r).is_err(), "data on the bottom must be refused");
}

#[test]
fn moser_ratio_of_constants_is_one() {
    let u = sampled([-1.0, -1.0], [1.0, 1.0], [16, 16], (-1.0, 1.0), 16, |_, _| -3.0);
    let q = ParabolicCube::new(vec![0.0, 0.0], 0.0, 0.25, CubeKind::Interior).unwrap();
    let m = moser_ratio(&u, &q).unwrap();
    assert!((m.ratio - 1.0).abs() < 1e-12);
    let off = ParabolicCube::new(vec![0.9, 0.0], 0.0, 0.25, CubeKind::Interior).unwrap();
    assert!(moser_ratio(&u, &off).is_err());
}

#[test]
fn sloped_bottom_measure_is_a_proper_fraction() {
    let phi = parahom::geometry::Phi::closed_form("0.1*x1").unwrap();
    let dom = DomainSpec::HalfSpace(GraphDomain::new(phi, 0.1, vec![[-3.0, 3.0], [0.0, 3.0]]).unwrap());
    let res = reference_resolution(&dom).unwrap();
    let a = CoefficientField::identity(2);
    let cube = ParabolicCube::boundary(vec![0.0], 0.5, 0.25).unwrap();
    let m = caloric_measure(&a, &dom, &Pole::new(vec![0.0, 1.0], 1.0), &cube, &res).unwrap();
    assert!(m.value > 0.0 && m.value < 1.0);
}
