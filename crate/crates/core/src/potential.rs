//! Caloric measure, kernel and Green's function estimates on flattened graph
//! domains, and the quantitative boundary estimates built from them
//! (doubling, reverse Hölder, local solvability, Harnack, comparison,
//! Green–measure equivalence).
//!
//! Boundary cubes live on the bottom face `λ = φ(x)`; points are given in
//! physical coordinates `(x, λ)` and fields in flattened coordinates.

use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::fv::Grid;
use crate::geometry::{boundary_measure, CubeKind, DomainSpec, GraphDomain, ParabolicCube};
use crate::pde::{
    integrate_square, level_weight, nt_trace_ratio, overlap, region_weights, DirichletSolver, EnergyRatio, InitialData, ScalarField,
    SolveOptions, SpaceTimeGrid,
};

/// Minimum distance from a pole to the box faces, in cells.
pub const POLE_MARGIN_CELLS: f64 = 4.0;

/// Spatial grid, time step and solver settings shared by the estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub space: Grid,
    pub dt: f64,
    pub options: SolveOptions,
}

impl Resolution {
    /// Cells of side about `h` covering the flattened box of `dom`.
    pub fn uniform(dom: &GraphDomain, h: f64, dt: f64) -> Result<Self> {
        if !(h > 0.0 && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("need h, dt > 0, got {h}, {dt}")));
        }
        let cells = dom.bounds.iter().map(|b| (((b[1] - b[0]) / h).round() as usize).max(1)).collect();
        let space = Grid::new(dom.bounds.iter().map(|b| b[0]).collect(), dom.bounds.iter().map(|b| b[1]).collect(), cells)?;
        Ok(Self { space, dt, options: SolveOptions::default() })
    }

    /// Time grid ending exactly at `t_end` and starting at or before `t_start`.
    pub fn time_grid(&self, t_start: f64, t_end: f64) -> Result<SpaceTimeGrid> {
        let steps = (((t_end - t_start) / self.dt) - 1e-9).ceil().max(1.0) as usize;
        SpaceTimeGrid::new(self.space.clone(), t_end - steps as f64 * self.dt, t_end, steps)
    }

    /// Time grid starting exactly at `t_start` and ending at or after `t_end`.
    pub fn forward_grid(&self, t_start: f64, t_end: f64) -> Result<SpaceTimeGrid> {
        let steps = (((t_end - t_start) / self.dt) - 1e-9).ceil().max(1.0) as usize;
        SpaceTimeGrid::new(self.space.clone(), t_start, t_start + steps as f64 * self.dt, steps)
    }
}

/// A point `(X, t)` in physical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pole {
    pub point: Vec<f64>,
    pub t: f64,
}

impl Pole {
    pub fn new(point: Vec<f64>, t: f64) -> Self {
        Self { point, t }
    }
}

fn flatten_point(dom: &GraphDomain, x: &[f64]) -> Vec<f64> {
    let n = dom.n();
    let mut y = x.to_vec();
    y[n] -= dom.phi.eval(&x[..n]);
    y
}

fn check_interior(space: &Grid, y: &[f64]) -> Result<()> {
    for k in 0..space.dim() {
        let gap = (y[k] - space.lower[k]).min(space.upper(k) - y[k]);
        if gap < POLE_MARGIN_CELLS * space.spacing[k] - 1e-12 {
            return Err(Error::OutsideDomain(format!(
                "point {y:?} is {:.3} cells from the boundary along axis {k}, need {POLE_MARGIN_CELLS}",
                gap / space.spacing[k]
            )));
        }
    }
    Ok(())
}

fn check_boundary_cube(dom: &GraphDomain, cube: &ParabolicCube) -> Result<()> {
    if cube.kind != CubeKind::Boundary || cube.center.len() != dom.n() {
        return Err(Error::InvalidArgument(format!("expected a boundary cube with {} spatial coordinates", dom.n())));
    }
    Ok(())
}

/// Bottom faces as `(face index, x)`.
fn bottom_faces(solver: &DirichletSolver) -> Vec<(usize, Vec<f64>)> {
    let n = solver.grid.space.dim() - 1;
    solver.disc.faces.iter().enumerate().filter(|(_, f)| f.axis == n && f.side == 0).map(|(j, f)| (j, f.center[..n].to_vec())).collect()
}

/// Mollified indicator of `cube` at a bottom face for the data level `k`,
/// which acts on `(t_{k−1}, t_k]`. `width` scales the ramp relative to one
/// cell and one time step.
fn indicator(grid: &SpaceTimeGrid, x: &[f64], k: usize, cube: &ParabolicCube, width: f64) -> f64 {
    let sp = &grid.space;
    let mut w = 1.0;
    for (i, &xi) in x.iter().enumerate() {
        let h = width * sp.spacing[i];
        w *= overlap(xi, h, cube.center[i] - cube.r, cube.center[i] + cube.r) / h;
        if w == 0.0 {
            return 0.0;
        }
    }
    let (a, b) = cube.t_range();
    let tau = width * grid.dt;
    w * overlap(grid.time(k) - 0.5 * grid.dt, tau, a, b) / tau
}

/// Sensitivities of `u(pole)` to the bottom data at every level.
#[derive(Debug, Clone)]
pub struct Atoms {
    pub pole: Pole,
    pub grid: SpaceTimeGrid,
    faces: Vec<(usize, Vec<f64>)>,
    /// `[level][face]`, level 0 unused.
    values: Vec<Vec<f64>>,
}

impl Atoms {
    pub fn compute(a: &CoefficientField, dom: &DomainSpec, pole: &Pole, t_start: f64, res: &Resolution) -> Result<Self> {
        let g = dom.graph();
        let y = flatten_point(g, &pole.point);
        check_interior(&res.space, &y)?;
        let grid = res.time_grid(t_start, pole.t)?;
        let solver = DirichletSolver::new(a, dom, &grid, res.options)?;
        let weights = res.space.interpolation_weights(&y);
        let values = solver.adjoint_atoms(&[(grid.steps, weights)])?;
        Ok(Self { pole: pole.clone(), faces: bottom_faces(&solver), grid, values })
    }

    /// `ω(cube)` for the indicator mollified over `width` cells.
    pub fn measure(&self, cube: &ParabolicCube, width: f64) -> f64 {
        let mut total = 0.0;
        for k in 1..self.values.len() {
            let row = &self.values[k];
            for (j, x) in &self.faces {
                let w = indicator(&self.grid, x, k, cube, width);
                if w != 0.0 {
                    total += row[*j] * w;
                }
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub pole: Pole,
    pub cube: ParabolicCube,
    pub value: f64,
    /// Change when the mollification width is halved.
    pub smoothing_error: f64,
    /// Change when the box margins are doubled, if computed.
    pub truncation_error: Option<f64>,
}

impl MeasureEstimate {
    pub fn error(&self) -> f64 {
        self.smoothing_error.max(self.truncation_error.unwrap_or(0.0))
    }
}

fn estimate_from(atoms: &Atoms, cube: &ParabolicCube) -> MeasureEstimate {
    let value = atoms.measure(cube, 1.0);
    let half = atoms.measure(cube, 0.5);
    MeasureEstimate { pole: atoms.pole.clone(), cube: cube.clone(), value, smoothing_error: (value - half).abs(), truncation_error: None }
}

/// `ω^{(Z,τ)}(Q_r)` for a boundary cube on the bottom face.
pub fn caloric_measure(
    a: &CoefficientField,
    dom: &DomainSpec,
    pole: &Pole,
    cube: &ParabolicCube,
    res: &Resolution,
) -> Result<MeasureEstimate> {
    check_boundary_cube(dom.graph(), cube)?;
    let atoms = Atoms::compute(a, dom, pole, cube.t_range().0 - res.dt, res)?;
    Ok(estimate_from(&atoms, cube))
}

/// Same as [`caloric_measure`], also solving on a box whose lateral and top
/// margins are doubled to bound the truncation error.
pub fn caloric_measure_checked(
    a: &CoefficientField,
    dom: &DomainSpec,
    pole: &Pole,
    cube: &ParabolicCube,
    res: &Resolution,
) -> Result<MeasureEstimate> {
    let mut est = caloric_measure(a, dom, pole, cube, res)?;
    let (wide, wide_res) = widened(dom, res)?;
    let far = caloric_measure(a, &wide, pole, cube, &wide_res)?;
    est.truncation_error = Some((far.value - est.value).abs());
    Ok(est)
}

fn widened(dom: &DomainSpec, res: &Resolution) -> Result<(DomainSpec, Resolution)> {
    let mut g = dom.graph().clone();
    let n = g.n();
    let mut cells = res.space.cells.clone();
    for k in 0..n {
        let [lo, hi] = g.bounds[k];
        let half = 0.5 * (hi - lo);
        g.bounds[k] = [lo - half, hi + half];
        cells[k] *= 2;
    }
    g.bounds[n][1] *= 2.0;
    cells[n] *= 2;
    let space = Grid::new(g.bounds.iter().map(|b| b[0]).collect(), g.bounds.iter().map(|b| b[1]).collect(), cells)?;
    let wide = match dom {
        DomainSpec::HalfSpace(_) => DomainSpec::HalfSpace(g),
        DomainSpec::Cylinder(c) => {
            let mut c = c.clone();
            c.base = g;
            DomainSpec::Cylinder(c)
        }
    };
    Ok((wide, Resolution { space, dt: res.dt, options: res.options }))
}

/// Forward solve with the mollified indicator of `cube` as data; the field
/// equals `ω^{(X,t)}(cube)` at every grid point.
pub fn caloric_measure_field(
    a: &CoefficientField,
    dom: &DomainSpec,
    cube: &ParabolicCube,
    t_end: f64,
    res: &Resolution,
) -> Result<ScalarField> {
    check_boundary_cube(dom.graph(), cube)?;
    let start = cube.t_range().0 - res.dt;
    let grid = res.forward_grid(start, t_end.max(start + res.dt))?;
    let solver = DirichletSolver::new(a, dom, &grid, res.options)?;
    let faces = bottom_faces(&solver);
    let nb = solver.disc.faces.len();
    solver.solve_with(
        |k| {
            let mut g = vec![0.0; nb];
            if k > 0 {
                for (j, x) in &faces {
                    g[*j] = indicator(&grid, x, k, cube, 1.0);
                }
            }
            g
        },
        &InitialData::Zero,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCell {
    pub center: Vec<f64>,
    pub t: f64,
    /// Surface measure `|Q_i|`.
    pub measure: f64,
    pub omega: f64,
    pub density: f64,
    /// `|K_fine − K_coarse|` against the parent cell.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub pole: Pole,
    pub cube: ParabolicCube,
    pub depth: u32,
    /// Partition of `Q_r` into `Q_{r/m}`, `m = 2^depth`.
    pub cells: Vec<KernelCell>,
    /// `ω(Q_r)` computed directly.
    pub total: f64,
}

impl KernelEstimate {
    pub fn mass(&self) -> f64 {
        self.cells.iter().map(|c| c.density * c.measure).sum()
    }

    /// `|(x, 0) − Z|² ≤ |t − τ|` and `τ − t ≥ 4r²` at the cube center.
    pub fn admissible(&self) -> bool {
        let n = self.cube.center.len();
        let z = &self.pole.point;
        let d2: f64 = (0..n).map(|k| (self.cube.center[k] - z[k]).powi(2)).sum::<f64>() + z[n] * z[n];
        let gap = self.pole.t - self.cube.t;
        d2 <= gap.abs() && gap >= 4.0 * self.cube.r * self.cube.r
    }
}

/// Children of `cube` at partition depth `depth`: `m^n` spatial by `m²`
/// temporal sub-cubes of radius `r/m`.
pub fn partition(cube: &ParabolicCube, depth: u32) -> Vec<ParabolicCube> {
    let m = 1usize << depth;
    let n = cube.center.len();
    let rs = cube.r / m as f64;
    let mt = m * m;
    let mut out = Vec::with_capacity(m.pow(n as u32) * mt);
    let spatial = m.pow(n as u32);
    for it in 0..mt {
        let t = cube.t - cube.r * cube.r + (2 * it + 1) as f64 * rs * rs;
        for lin in 0..spatial {
            let mut rem = lin;
            let center: Vec<f64> = (0..n)
                .map(|k| {
                    let i = rem % m;
                    rem /= m;
                    cube.center[k] - cube.r + (2 * i + 1) as f64 * rs
                })
                .collect();
            out.push(ParabolicCube { center, t, r: rs, kind: CubeKind::Boundary });
        }
    }
    out
}

fn parent_index(child: &ParabolicCube, coarse: &[ParabolicCube]) -> usize {
    coarse.iter().position(|p| p.contains(&child.center, child.t, None)).unwrap_or(0)
}

/// Per-cell densities `ω(Q_i)/|Q_i|` at depths `depth − 1` and `depth`.
pub fn kernel_estimate(
    a: &CoefficientField,
    dom: &DomainSpec,
    pole: &Pole,
    cube: &ParabolicCube,
    depth: u32,
    res: &Resolution,
) -> Result<KernelEstimate> {
    let g = dom.graph();
    check_boundary_cube(g, cube)?;
    if depth == 0 {
        return Err(Error::InvalidArgument("partition depth must be at least 1".into()));
    }
    let atoms = Atoms::compute(a, dom, pole, cube.t_range().0 - res.dt, res)?;
    let surface = |q: &ParabolicCube| -> Result<f64> {
        if g.phi.is_zero() {
            Ok(q.measure())
        } else {
            Ok(boundary_measure(g, q, 16)?.value)
        }
    };
    let coarse = partition(cube, depth - 1);
    let coarse_density = coarse.iter().map(|q| Ok(atoms.measure(q, 1.0) / surface(q)?)).collect::<Result<Vec<f64>>>()?;
    let cells = partition(cube, depth)
        .into_iter()
        .map(|q| {
            let measure = surface(&q)?;
            let omega = atoms.measure(&q, 1.0);
            let density = omega / measure;
            let gap = (density - coarse_density[parent_index(&q, &coarse)]).abs();
            Ok(KernelCell { center: q.center, t: q.t, measure, omega, density, gap })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelEstimate { pole: pole.clone(), cube: cube.clone(), depth, cells, total: atoms.measure(cube, 1.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhRatio {
    pub exponent: f64,
    pub ratio: f64,
    /// False when the pole violates the admissibility window; the value is
    /// still computed.
    pub admissible: bool,
}

/// `(⨍ K^q)^{1/q} / ⨍ K` over the partition cells.
pub fn reverse_holder_ratio(k: &KernelEstimate, q: f64) -> Result<RhRatio> {
    if !(q >= 1.0) {
        return Err(Error::InvalidArgument(format!("exponent must be at least 1, got {q}")));
    }
    let total: f64 = k.cells.iter().map(|c| c.measure).sum();
    let mean: f64 = k.cells.iter().map(|c| c.measure * c.density.abs()).sum::<f64>() / total;
    let power: f64 = k.cells.iter().map(|c| c.measure * c.density.abs().powf(q)).sum::<f64>() / total;
    if mean == 0.0 {
        return Err(Error::BelowNoiseFloor { value: 0.0, floor: f64::MIN_POSITIVE });
    }
    Ok(RhRatio { exponent: q, ratio: power.powf(1.0 / q) / mean, admissible: k.admissible() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingRatio {
    pub small: MeasureEstimate,
    pub large: MeasureEstimate,
    pub ratio: f64,
}

/// `ω(Q_{2r}) / ω(Q_r)` from one adjoint solve.
pub fn doubling_ratio(
    a: &CoefficientField,
    dom: &DomainSpec,
    pole: &Pole,
    cube: &ParabolicCube,
    res: &Resolution,
) -> Result<DoublingRatio> {
    check_boundary_cube(dom.graph(), cube)?;
    let big = cube.dilate(2.0);
    let atoms = Atoms::compute(a, dom, pole, big.t_range().0 - res.dt, res)?;
    let small = estimate_from(&atoms, cube);
    let large = estimate_from(&atoms, &big);
    let floor = 10.0 * small.error();
    if !(small.value > floor) || small.value <= 0.0 {
        return Err(Error::BelowNoiseFloor { value: small.value, floor });
    }
    Ok(DoublingRatio { ratio: large.value / small.value, small, large })
}

/// `G(·, ·; Z, τ)` from a discrete impulse at `t = τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenField {
    pub pole: Pole,
    pub field: ScalarField,
    /// Regularization width: one cell, or two when the impulse is spread.
    pub width: Vec<f64>,
    pub spread: bool,
    phi_shift: Vec<f64>,
}

impl GreenField {
    /// `G(X, t)` at a physical point; zero before the pole time.
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        if t < self.pole.t {
            return 0.0;
        }
        let n = x.len() - 1;
        let mut y = x.to_vec();
        // flattened coordinate, using the stored graph samples for φ
        y[n] -= self.phi_at(&x[..n]);
        self.field.interpolate(&y, t)
    }

    fn phi_at(&self, x: &[f64]) -> f64 {
        if self.phi_shift.is_empty() {
            return 0.0;
        }
        let sp = &self.field.grid.space;
        let n = x.len();
        let sub = Grid { lower: sp.lower[..n].to_vec(), spacing: sp.spacing[..n].to_vec(), cells: sp.cells[..n].to_vec() };
        sub.interpolate(&self.phi_shift, x)
    }
}

pub fn greens_function(a: &CoefficientField, dom: &DomainSpec, pole: &Pole, duration: f64, res: &Resolution) -> Result<GreenField> {
    greens_function_with(a, dom, pole, duration, res, false)
}

/// Green's function with the impulse in one cell or spread over `2^d` cells.
pub fn greens_function_with(
    a: &CoefficientField,
    dom: &DomainSpec,
    pole: &Pole,
    duration: f64,
    res: &Resolution,
    spread: bool,
) -> Result<GreenField> {
    let g = dom.graph();
    let y = flatten_point(g, &pole.point);
    check_interior(&res.space, &y)?;
    let grid = res.forward_grid(pole.t, pole.t + duration)?;
    let solver = DirichletSolver::new(a, dom, &grid, res.options)?;
    let nb = solver.disc.faces.len();
    let field = solver.solve_with(|_| vec![0.0; nb], &InitialData::Delta { point: y, spread })?;
    let sp = &res.space;
    let n = g.n();
    let phi_shift = if g.phi.is_zero() {
        Vec::new()
    } else {
        let sub = Grid { lower: sp.lower[..n].to_vec(), spacing: sp.spacing[..n].to_vec(), cells: sp.cells[..n].to_vec() };
        (0..sub.len()).map(|i| g.phi.eval(&sub.center(i))).collect()
    };
    let factor = if spread { 2.0 } else { 1.0 };
    Ok(GreenField { pole: pole.clone(), field, width: sp.spacing.iter().map(|h| factor * h).collect(), spread, phi_shift })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryCheck {
    pub forward: f64,
    pub reverse: f64,
    pub deviation: f64,
}

/// `|G(X,t;Z,τ) − G(Z,t+s;X,τ+s)| / max` for the shift `s`.
pub fn green_symmetry_check(
    a: &CoefficientField,
    dom: &DomainSpec,
    source: &Pole,
    target: &Pole,
    shift: f64,
    res: &Resolution,
) -> Result<SymmetryCheck> {
    let span = target.t - source.t;
    if !(span > 0.0) {
        return Err(Error::InvalidArgument("the evaluation time must follow the pole time".into()));
    }
    let g1 = greens_function(a, dom, source, span, res)?;
    let g2 = greens_function(a, dom, &Pole::new(target.point.clone(), source.t + shift), span, res)?;
    let forward = g1.eval(&target.point, target.t);
    let reverse = g2.eval(&source.point, target.t + shift);
    let scale = forward.abs().max(reverse.abs());
    let deviation = if scale > 0.0 { (forward - reverse).abs() / scale } else { 0.0 };
    Ok(SymmetryCheck { forward, reverse, deviation })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarnackReport {
    pub sup: f64,
    pub reference: f64,
    pub ratio: f64,
    /// Smallest `C` with `u(Y,s) ≤ u(X,t)·exp(C(|X−Y|²/(t−s) + (t−s)/R + 1))`
    /// over sampled pairs in `T_{2r}`.
    pub interior_exponent: f64,
}

fn box_center(t4r: &ParabolicCube) -> Result<f64> {
    if t4r.kind != CubeKind::Box {
        return Err(Error::InvalidArgument("expected a box T_4r".into()));
    }
    Ok(t4r.r / 4.0)
}

fn in_box(cube: &ParabolicCube, p: &[f64], t: f64) -> bool {
    let n = cube.center.len();
    cube.contains(&p[..n], t, Some(p[n]))
}

/// Value at `(x₀, t, λ)` by interpolation, or an error if the point is not
/// covered by the field.
fn point_value(u: &ScalarField, x0: &[f64], lambda: f64, t: f64) -> Result<f64> {
    let sp = &u.grid.space;
    let mut p = x0.to_vec();
    p.push(lambda);
    let inside = (0..sp.dim()).all(|k| p[k] >= sp.lower[k] && p[k] <= sp.upper(k));
    if !inside || t < u.grid.t0 - 1e-12 || t > u.grid.t1() + 1e-12 {
        return Err(Error::OutsideDomain(format!("({p:?}, {t}) is outside the field")));
    }
    Ok(u.interpolate(&p, t))
}

/// Grid samples `(level, cell)` inside a box cube.
fn samples_in(u: &ScalarField, cube: &ParabolicCube) -> Vec<(usize, usize)> {
    let sp = &u.grid.space;
    let centers: Vec<Vec<f64>> = (0..sp.len()).map(|i| sp.center(i)).collect();
    let mut out = Vec::new();
    for k in 0..u.levels() {
        let t = u.grid.time(k);
        if (t - cube.t).abs() >= cube.r * cube.r {
            continue;
        }
        for (i, c) in centers.iter().enumerate() {
            if in_box(cube, c, t) {
                out.push((k, i));
            }
        }
    }
    out
}

/// `sup_{T_r} u / u(x₀, t₀+2r², r)` for `u ≥ 0` in `T_{4r}`.
pub fn harnack_ratio(u: &ScalarField, t4r: &ParabolicCube) -> Result<HarnackReport> {
    let r = box_center(t4r)?;
    let outer = samples_in(u, t4r);
    if let Some(&(k, i)) = outer.iter().find(|&&(k, i)| u.get(k, i) < -1e-12) {
        return Err(Error::Hypothesis(format!("u = {:e} < 0 in T_4r", u.get(k, i))));
    }
    let inner = t4r.dilate(0.25);
    let sup = samples_in(u, &inner).iter().fold(0.0f64, |m, &(k, i)| m.max(u.get(k, i)));
    let reference = point_value(u, &t4r.center, r, t4r.t + 2.0 * r * r)?;
    if !(reference > 0.0) {
        return Err(Error::BelowNoiseFloor { value: reference, floor: 0.0 });
    }
    Ok(HarnackReport { sup, reference, ratio: sup / reference, interior_exponent: interior_exponent(u, t4r)? })
}

fn interior_exponent(u: &ScalarField, t4r: &ParabolicCube) -> Result<f64> {
    let sp = &u.grid.space;
    let n = t4r.center.len();
    let r = t4r.r / 4.0;
    let mut pts = samples_in(u, &t4r.dilate(0.5));
    // thin to at most ~400 samples with a fixed stride
    let stride = (pts.len() / 400).max(1);
    pts = pts.into_iter().step_by(stride).collect();
    let t_start = (t4r.t - t4r.r * t4r.r).max(u.grid.t0);
    let dist = |c: &[f64]| -> f64 {
        let mut d = c[n].min(t4r.r - c[n]);
        for k in 0..n {
            d = d.min(t4r.r - (c[k] - t4r.center[k]).abs());
        }
        d.max(0.0)
    };
    let mut best: f64 = 0.0;
    for &(ks, iy) in &pts {
        let (s, y) = (u.grid.time(ks), sp.center(iy));
        let uy = u.get(ks, iy);
        if uy <= 0.0 {
            continue;
        }
        for &(kt, ix) in &pts {
            if kt <= ks {
                continue;
            }
            let ux = u.get(kt, ix);
            if ux <= 0.0 {
                continue;
            }
            let (t, x) = (u.grid.time(kt), sp.center(ix));
            let big_r = dist(&x).powi(2).min(dist(&y).powi(2)).min(s - t_start).min(1.0).max(r * r * 1e-6);
            let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            let q = d2 / (t - s) + (t - s) / big_r + 1.0;
            best = best.max((uy / ux).ln() / q);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub sup_quotient: f64,
    pub u_reference: f64,
    pub v_reference: f64,
    pub ratio: f64,
}

/// `sup_{T_r}(u/v) · v(x₀,t₀−2r²,r) / u(x₀,t₀+2r²,r)`.
pub fn comparison_ratio(u: &ScalarField, v: &ScalarField, t4r: &ParabolicCube) -> Result<ComparisonReport> {
    let r = box_center(t4r)?;
    if u.grid != v.grid {
        return Err(Error::InvalidArgument("u and v must share a grid".into()));
    }
    let n = t4r.center.len();
    for (name, w) in [("u", u), ("v", v)] {
        if let Some(&(k, i)) = samples_in(w, t4r).iter().find(|&&(k, i)| w.get(k, i) < -1e-12) {
            return Err(Error::Hypothesis(format!("{name} = {:e} < 0 in T_4r", w.get(k, i))));
        }
        let q2 = ParabolicCube { center: t4r.center.clone(), t: t4r.t, r: 2.0 * r, kind: CubeKind::Boundary };
        let faces = w.grid.space.boundary_faces();
        for k in 0..w.levels() {
            let t = w.grid.time(k);
            for (j, f) in faces.iter().enumerate() {
                if f.axis == n && f.side == 0 && q2.contains(&f.center[..n], t, None) && w.boundary_level(k)[j].abs() > 1e-10 {
                    return Err(Error::Hypothesis(format!("{name} does not vanish on Q_2r")));
                }
            }
        }
    }
    let inner = samples_in(u, &t4r.dilate(0.25));
    let floor = 1e-10 * v.max_abs();
    let v_min = inner.iter().fold(f64::INFINITY, |m, &(k, i)| m.min(v.get(k, i)));
    if !(v_min > 10.0 * floor) {
        return Err(Error::BelowNoiseFloor { value: v_min, floor: 10.0 * floor });
    }
    let sup_quotient = inner.iter().fold(0.0f64, |m, &(k, i)| m.max(u.get(k, i) / v.get(k, i)));
    let u_reference = point_value(u, &t4r.center, r, t4r.t + 2.0 * r * r)?;
    let v_reference = point_value(v, &t4r.center, r, t4r.t - 2.0 * r * r)?;
    if !(u_reference > 0.0) {
        return Err(Error::BelowNoiseFloor { value: u_reference, floor: 0.0 });
    }
    Ok(ComparisonReport { sup_quotient, u_reference, v_reference, ratio: sup_quotient * v_reference / u_reference })
}

/// `r³ ∫_{Q_r} (limsup u/λ)² / ∫_{T_{2r}} u²`, with the trace from the
/// first layer plus second-layer Richardson correction.
pub fn local_solvability_ratio(u: &ScalarField, q: &ParabolicCube) -> Result<EnergyRatio> {
    let trace = nt_trace_ratio(u, q)?;
    let sp = &u.grid.space;
    let n = sp.dim() - 1;
    let r = q.r;
    let (a, b) = q.t_range();
    let mut top = 0.0;
    for c in &trace.cells {
        let mut w = level_weight(&u.grid, c.level, a, b);
        for k in 0..n {
            w *= overlap(c.x[k], sp.spacing[k], q.center[k] - r, q.center[k] + r);
        }
        top += w * c.richardson * c.richardson;
    }
    let mut lower: Vec<f64> = q.center.iter().map(|c| c - 2.0 * r).collect();
    let mut upper: Vec<f64> = q.center.iter().map(|c| c + 2.0 * r).collect();
    lower.push(0.0);
    upper.push(2.0 * r);
    let (cells, levels) = region_weights(&u.grid, &lower, &upper, (q.t - 4.0 * r * r, q.t + 4.0 * r * r));
    let mass = integrate_square(u, &cells, &levels);
    let numerator = r.powi(3) * top;
    if mass == 0.0 {
        return Ok(EnergyRatio { numerator, denominator: 0.0, ratio: 0.0, degenerate: true });
    }
    Ok(EnergyRatio { numerator, denominator: mass, ratio: numerator / mass, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenMeasureRatios {
    pub omega: f64,
    pub green_after: f64,
    pub green_before: f64,
    /// `ω / (ρ^{n+1} G(·; x₀, t₀+ρ², ρ))`, bounded below.
    pub lower: f64,
    /// `ω / (ρ^{n+1} G(·; x₀, t₀−ρ², ρ))`, bounded above.
    pub upper: f64,
    /// Whether `|(x₀,0) − (x,λ)|² ≤ A|t − t₀|` holds.
    pub admissible: bool,
}

/// Both sides of the Green–measure sandwich for `Δ(x₀, t₀, ρ/2)` seen from
/// `(X, t)`.
#[allow(clippy::too_many_arguments)]
pub fn green_measure_equivalence(
    a: &CoefficientField,
    dom: &DomainSpec,
    x0: &[f64],
    t0: f64,
    rho: f64,
    at: &Pole,
    region_a: f64,
    res: &Resolution,
) -> Result<GreenMeasureRatios> {
    let n = dom.graph().n();
    if at.t - t0 < 4.0 * rho * rho - 1e-12 {
        return Err(Error::Hypothesis(format!("need t − t₀ ≥ 4ρ², got {}", at.t - t0)));
    }
    let cube = ParabolicCube::boundary(x0.to_vec(), t0, 0.5 * rho)?;
    let omega = caloric_measure(a, dom, at, &cube, res)?.value;
    let mut p = x0.to_vec();
    p.push(rho + dom.graph().phi.eval(x0));
    let after = greens_function(a, dom, &Pole::new(p.clone(), t0 + rho * rho), at.t - t0 - rho * rho, res)?;
    let before = greens_function(a, dom, &Pole::new(p, t0 - rho * rho), at.t - t0 + rho * rho, res)?;
    let green_after = after.eval(&at.point, at.t);
    let green_before = before.eval(&at.point, at.t);
    let scale = rho.powi(n as i32 + 1);
    let d2: f64 = (0..n).map(|k| (at.point[k] - x0[k]).powi(2)).sum::<f64>() + at.point[n].powi(2);
    for (v, floor) in [(green_after, 0.0), (green_before, 0.0)] {
        if !(v > floor) {
            return Err(Error::BelowNoiseFloor { value: v, floor });
        }
    }
    Ok(GreenMeasureRatios {
        omega,
        green_after,
        green_before,
        lower: omega / (scale * green_after),
        upper: omega / (scale * green_before),
        admissible: d2 <= region_a * (at.t - t0).abs(),
    })
}

/// `min ω(X, t; Q_r)` over the given physical points, from one forward solve.
pub fn measure_positivity(a: &CoefficientField, dom: &DomainSpec, cube: &ParabolicCube, points: &[Pole], res: &Resolution) -> Result<f64> {
    let t_end = points.iter().fold(cube.t_range().1, |m, p| m.max(p.t));
    let field = caloric_measure_field(a, dom, cube, t_end, res)?;
    let g = dom.graph();
    Ok(points.iter().map(|p| field.interpolate(&flatten_point(g, &p.point), p.t)).fold(f64::INFINITY, f64::min))
}

/// `min r^{n+1} G(X, t; x₀, t₀, r)` over the given physical points.
pub fn green_positivity(
    a: &CoefficientField,
    dom: &DomainSpec,
    x0: &[f64],
    t0: f64,
    r: f64,
    points: &[Pole],
    res: &Resolution,
) -> Result<f64> {
    let g = dom.graph();
    let n = g.n();
    let mut p = x0.to_vec();
    p.push(r + g.phi.eval(x0));
    let t_end = points.iter().fold(t0 + res.dt, |m, q| m.max(q.t));
    let green = greens_function(a, dom, &Pole::new(p, t0), t_end - t0, res)?;
    Ok(points.iter().map(|q| r.powi(n as i32 + 1) * green.eval(&q.point, q.t)).fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn setup(h: f64, dt: f64) -> (CoefficientField, DomainSpec, Resolution) {
        let g = GraphDomain::half_space(1, 3.0, 3.0);
        let res = Resolution::uniform(&g, h, dt).unwrap();
        (CoefficientField::identity(2), DomainSpec::HalfSpace(g), res)
    }

    #[test]
    fn partition_tiles_the_cube() {
        let q = ParabolicCube::boundary(vec![0.2], 1.0, 0.5).unwrap();
        let parts = partition(&q, 2);
        assert_eq!(parts.len(), 4 * 16);
        let total: f64 = parts.iter().map(|p| p.measure()).sum();
        assert!((total - q.measure()).abs() < 1e-14);
    }

    #[test]
    fn measure_is_additive_and_causal() {
        let (a, dom, res) = setup(1.0 / 8.0, 1.0 / 64.0);
        let pole = Pole::new(vec![0.0, 0.75], 1.0);
        let cube = ParabolicCube::boundary(vec![0.0], 0.5, 0.5).unwrap();
        let k = kernel_estimate(&a, &dom, &pole, &cube, 1, &res).unwrap();
        assert!((k.mass() - k.total).abs() < 1e-10);
        assert!(k.cells.iter().all(|c| c.density >= 0.0));
        let late = ParabolicCube::boundary(vec![0.0], 1.6, 0.5).unwrap();
        assert_eq!(caloric_measure(&a, &dom, &pole, &late, &res).unwrap().value, 0.0);
    }

    #[test]
    fn coarse_measure_is_near_the_images_formula() {
        let (a, dom, res) = setup(1.0 / 8.0, 1.0 / 128.0);
        let pole = Pole::new(vec![0.0, 0.75], 1.0);
        let cube = ParabolicCube::boundary(vec![0.0], 0.5, 0.5).unwrap();
        let est = caloric_measure(&a, &dom, &pole, &cube, &res).unwrap();
        let exact = oracle::half_space_measure(&pole.point, 1.0, &[-0.5], &[0.5], (0.25, 0.75));
        assert!((est.value / exact - 1.0).abs() < 0.05, "{} {exact}", est.value);
    }

    #[test]
    fn green_is_symmetric_at_cell_centers() {
        let (a, dom, res) = setup(1.0 / 8.0, 1.0 / 64.0);
        let c = crate::coeffs::laminate(2, 1.0, 4.0, 0.5, 0).unwrap();
        let s = green_symmetry_check(&c, &dom, &Pole::new(vec![0.0625, 1.0625], 0.0), &Pole::new(vec![0.4375, 0.8125], 0.5), 0.25, &res)
            .unwrap();
        assert!(s.deviation < 1e-8, "{s:?}");
        let _ = a;
    }
}

/// Grid density of the scale-family experiments below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFamily {
    /// Cells per unit of `r`.
    pub cells_per_r: usize,
    /// Time steps per unit of `r²`.
    pub steps_per_r2: usize,
}

impl Default for ScaleFamily {
    fn default() -> Self {
        Self { cells_per_r: 16, steps_per_r2: 16 }
    }
}

fn flat_box(n: usize, half_width: f64, height: f64, t_final: f64) -> Result<DomainSpec> {
    let g = GraphDomain::half_space(n, half_width, height);
    Ok(DomainSpec::Cylinder(crate::geometry::LipschitzCylinder::new(g, t_final)?))
}

/// Local solvability ratio at scale `r` for the solution in `T_{4r}(0, 0)`
/// with zero data except a smooth bump on the top face.
pub fn local_solvability_experiment(a: &CoefficientField, r: f64, family: ScaleFamily) -> Result<EnergyRatio> {
    let d = a.dim();
    let n = d - 1;
    let height = 4.0 * r;
    let dom = flat_box(n, 4.0 * r, height, 32.0 * r * r)?;
    let cells: Vec<usize> = (0..d).map(|k| if k < n { 8 * family.cells_per_r } else { 4 * family.cells_per_r }).collect();
    let grid = SpaceTimeGrid::for_domain(dom.graph(), &cells, -16.0 * r * r, 16.0 * r * r, 32 * family.steps_per_r2)?;
    let solver = DirichletSolver::new(a, &dom, &grid, SolveOptions::default())?;
    let top = height - 1e-9 * r;
    let data = crate::pde::BoundaryData::new("top bump", move |x: &[f64], t: f64| {
        if x[n] < top {
            return 0.0;
        }
        let space: f64 = x[..n].iter().map(|&xi| (std::f64::consts::PI * xi / (8.0 * r)).cos().powi(2)).product();
        let s = (std::f64::consts::PI * (t + 16.0 * r * r) / (64.0 * r * r)).sin();
        space * s * s
    });
    let u = solver.solve(&data, &InitialData::Zero)?;
    let q = ParabolicCube::boundary(vec![0.0; n], 0.0, r)?;
    local_solvability_ratio(&u, &q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QDecay {
    /// Scale in length units.
    pub r: f64,
    pub sup: f64,
    /// `(R^{−(n+3)} ∫_{Ω₃×(0,8R²)} G²)^{1/2}`.
    pub mean_square_root: f64,
    /// `R · sup / mean_square_root`.
    pub ratio: f64,
}

/// `R·sup|QG|/(mean square)^{1/2}` for the Green's function `G` of the box
/// `{|x_i| < 3R, 0 < λ < 6R}` with pole `(0, 5R)` at `t = 0`, the sup taken
/// over `Ω₂ × (0, 4R²)` with `λ ≥ R`. `R` is given in cells of side
/// `period / cells_per_period`.
pub fn q_difference_decay(a: &CoefficientField, r_cells: usize, cells_per_period: usize, steps: usize) -> Result<QDecay> {
    let period = match a.period() {
        crate::coeffs::Periodicity::Axis { period } | crate::coeffs::Periodicity::Lattice { period } => period,
        crate::coeffs::Periodicity::None => 1.0,
    };
    let d = a.dim();
    let n = d - 1;
    let h = period / cells_per_period as f64;
    let r = r_cells as f64 * h;
    let dom = flat_box(n, 3.0 * r, 6.0 * r, 8.0 * r * r)?;
    let cells: Vec<usize> = (0..d).map(|_| 6 * r_cells).collect();
    let space = Grid::new(dom.graph().bounds.iter().map(|b| b[0]).collect(), dom.graph().bounds.iter().map(|b| b[1]).collect(), cells)?;
    let res = Resolution { space, dt: 8.0 * r * r / steps as f64, options: SolveOptions::default() };
    let mut pole = vec![0.5 * h; n];
    pole.push(5.0 * r + 0.5 * h);
    let green = greens_function(a, &dom, &Pole::new(pole, 0.0), 8.0 * r * r, &res)?;
    let u = &green.field;
    let qu = crate::pde::q_difference(u, period)?;
    let sp = &u.grid.space;
    let mut sup: f64 = 0.0;
    for k in 0..u.levels() {
        if u.grid.time(k) > 4.0 * r * r + 1e-9 {
            break;
        }
        for i in 0..sp.len() {
            let c = sp.center(i);
            if c[n] >= r && c[n] < 2.0 * r && c[..n].iter().all(|x| x.abs() < 2.0 * r) {
                let v = qu.get(k, i);
                if v.is_finite() {
                    sup = sup.max(v.abs());
                }
            }
        }
    }
    let mut lower = vec![-2.0 * r; n];
    let mut upper = vec![2.0 * r; n];
    lower.push(0.0);
    upper.push(3.0 * r);
    let (cells, levels) = region_weights(&u.grid, &lower, &upper, (0.0, 8.0 * r * r));
    let mass = integrate_square(u, &cells, &levels);
    let msr = (mass / r.powi(n as i32 + 3)).sqrt();
    if !(msr > 0.0) {
        return Err(Error::BelowNoiseFloor { value: msr, floor: 0.0 });
    }
    Ok(QDecay { r, sup, mean_square_root: msr, ratio: r * sup / msr })
}
