//! Time stepping for `∂_t u − div(A∇u) = 0` with lateral Dirichlet data on
//! flattened graph domains, plus the field-level operations that only look
//! at a computed solution (rescaling, traces, local energy ratios).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fv::{assemble, BoundaryMode, Discretization, Grid};
use crate::geometry::{flatten_pullback, CubeKind, DomainSpec, GraphDomain, ParabolicCube};
use crate::linalg::{conjugate_gradient, CgOptions, CsrMatrix};

/// Spatial grid on the flattened box plus uniform time levels
/// `t_k = t0 + k·dt`, `k = 0..=steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub space: Grid,
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl SpaceTimeGrid {
    pub fn new(space: Grid, t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(t1 > t0) {
            return Err(Error::InvalidArgument(format!("need t1 > t0 and steps >= 1, got ({t0}, {t1}), {steps}")));
        }
        Ok(Self { space, t0, dt: (t1 - t0) / steps as f64, steps })
    }

    /// Grid covering the flattened box of `dom` with the given cell counts.
    pub fn for_domain(dom: &GraphDomain, cells: &[usize], t0: f64, t1: f64, steps: usize) -> Result<Self> {
        let space = Grid::new(dom.bounds.iter().map(|b| b[0]).collect(), dom.bounds.iter().map(|b| b[1]).collect(), cells.to_vec())?;
        Self::new(space, t0, t1, steps)
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.steps as f64 * self.dt
    }

    pub fn time(&self, level: usize) -> f64 {
        self.t0 + level as f64 * self.dt
    }
}

type DataFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// Lateral data `f(X, t)`, evaluated at physical boundary points.
#[derive(Clone)]
pub struct BoundaryData {
    f: DataFn,
    pub label: String,
    /// Continuous with compact support.
    pub classical: bool,
    /// Integrability exponent used when reporting norms.
    pub p: f64,
}

impl std::fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BoundaryData").field("label", &self.label).field("p", &self.p).finish()
    }
}

impl BoundaryData {
    pub fn new(label: impl Into<String>, f: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), label: label.into(), classical: true, p: 2.0 }
    }

    pub fn from_expr(expr: Expr) -> Self {
        let label = expr.source().to_string();
        Self::new(label, move |x, t| expr.eval(x, t))
    }

    pub fn zero() -> Self {
        Self::new("0", |_, _| 0.0)
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        (self.f)(x, t)
    }

    /// `α f + β g`.
    pub fn combine(alpha: f64, f: &Self, beta: f64, g: &Self) -> Self {
        let (f1, g1) = (f.f.clone(), g.f.clone());
        Self::new(format!("{alpha}*({})+{beta}*({})", f.label, g.label), move |x, t| alpha * f1(x, t) + beta * g1(x, t))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::combine(c, self, 0.0, &Self::zero())
    }
}

/// Boundary data as read from config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub expr: Expr,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_p() -> f64 {
    2.0
}

impl DataSpec {
    pub fn build(&self) -> BoundaryData {
        let mut b = BoundaryData::from_expr(self.expr.clone());
        b.p = self.p;
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    Zero,
    Values(Vec<f64>),
    /// Unit mass at a point: the whole mass in the containing cell, or spread
    /// over the surrounding `2^d` cells by multilinear weights.
    Delta {
        point: Vec<f64>,
        spread: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    ImplicitEuler,
    /// Second order in time; no discrete maximum principle.
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub scheme: TimeScheme,
    /// Relative residual per time step.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { scheme: TimeScheme::ImplicitEuler, tolerance: 1e-10, max_iterations: 20_000 }
    }
}

/// Discrete solution at every time level, with the boundary data used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub grid: SpaceTimeGrid,
    /// `(steps + 1) × cells`, level-major.
    pub values: Vec<f64>,
    /// `(steps + 1) × faces` in [`Grid::boundary_faces`] order.
    pub boundary: Vec<f64>,
}

impl ScalarField {
    pub fn levels(&self) -> usize {
        self.grid.steps + 1
    }

    pub fn cells(&self) -> usize {
        self.grid.space.len()
    }

    pub fn faces(&self) -> usize {
        self.boundary.len() / self.levels()
    }

    pub fn level(&self, k: usize) -> &[f64] {
        let n = self.cells();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn boundary_level(&self, k: usize) -> &[f64] {
        let nb = self.faces();
        &self.boundary[k * nb..(k + 1) * nb]
    }

    pub fn get(&self, k: usize, cell: usize) -> f64 {
        self.values[k * self.cells() + cell]
    }

    /// Samples `u(X, t)` at cell centers and `g(X, t)` at face centers.
    pub fn sample(grid: &SpaceTimeGrid, u: impl Fn(&[f64], f64) -> f64, g: impl Fn(&[f64], f64) -> f64) -> Self {
        let faces = grid.space.boundary_faces();
        let centers: Vec<Vec<f64>> = (0..grid.space.len()).map(|i| grid.space.center(i)).collect();
        let mut values = Vec::with_capacity((grid.steps + 1) * centers.len());
        let mut boundary = Vec::with_capacity((grid.steps + 1) * faces.len());
        for k in 0..=grid.steps {
            let t = grid.time(k);
            values.extend(centers.iter().map(|c| u(c, t)));
            boundary.extend(faces.iter().map(|f| g(&f.center, t)));
        }
        Self { grid: grid.clone(), values, boundary }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            boundary: self.boundary.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `u(X, t)` by multilinear interpolation in space and linear in time.
    pub fn interpolate(&self, x: &[f64], t: f64) -> f64 {
        let s = ((t - self.grid.t0) / self.grid.dt).clamp(0.0, self.grid.steps as f64);
        let k = (s.floor() as usize).min(self.grid.steps.saturating_sub(1));
        let f = if self.grid.steps == 0 { 0.0 } else { s - k as f64 };
        let w = self.grid.space.interpolation_weights(x);
        let at = |lvl: usize| w.iter().map(|&(i, wi)| wi * self.get(lvl, i)).sum::<f64>();
        if f == 0.0 {
            at(k)
        } else {
            (1.0 - f) * at(k) + f * at(k + 1)
        }
    }

    /// Writes the little-endian binary format and a JSON sidecar
    /// (`<path>.json`) with the grid and `meta`.
    pub fn write_binary(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(64 + 8 * self.values.len());
        buf.extend_from_slice(FIELD_MAGIC);
        let g = &self.grid;
        buf.extend_from_slice(&(g.space.dim() as u32).to_le_bytes());
        for &c in &g.space.cells {
            buf.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for v in g.space.lower.iter().chain(&g.space.spacing) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.levels() as u64).to_le_bytes());
        buf.extend_from_slice(&g.t0.to_le_bytes());
        buf.extend_from_slice(&g.t1().to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        let sidecar = serde_json::json!({
            "format": "parahom-field-v1",
            "grid": g,
            "levels": self.levels(),
            "trace_convention": "first interior layer with second-layer Richardson correction",
            "meta": meta,
        });
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        std::fs::write(side, serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    /// Reads the payload written by [`ScalarField::write_binary`]; boundary
    /// values are not stored and come back as zeros.
    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut rd = Cursor { bytes: &bytes, pos: 0 };
        if rd.take(8)? != FIELD_MAGIC {
            return Err(Error::Parse("not a field file".into()));
        }
        let d = u32::from_le_bytes(rd.take(4)?.try_into().unwrap()) as usize;
        let cells = (0..d).map(|_| rd.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let lower = rd.f64s(d)?;
        let spacing = rd.f64s(d)?;
        let levels = rd.u64()? as usize;
        let t = rd.f64s(2)?;
        let n: usize = cells.iter().product();
        let values = rd.f64s(levels * n)?;
        let upper: Vec<f64> = (0..d).map(|k| lower[k] + cells[k] as f64 * spacing[k]).collect();
        let mut space = Grid::new(lower, upper, cells)?;
        space.spacing = spacing;
        let grid = SpaceTimeGrid::new(space, t[0], t[1], levels - 1)?;
        let nb = grid.space.boundary_faces().len();
        Ok(Self { grid, values, boundary: vec![0.0; levels * nb] })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Parse("truncated field file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))).collect()
    }
}

const FIELD_MAGIC: &[u8; 8] = b"PHFIELD1";

/// Which boundary faces carry the user data; the others are held at zero.
fn active_faces(dom: &DomainSpec, disc: &Discretization) -> Vec<bool> {
    let n = dom.graph().n();
    disc.faces
        .iter()
        .map(|f| match dom {
            DomainSpec::HalfSpace(_) => f.axis == n && f.side == 0,
            DomainSpec::Cylinder(_) => true,
        })
        .collect()
}

/// Assembled implicit time stepper on a flattened domain.
#[derive(Debug, Clone)]
pub struct DirichletSolver {
    pub disc: Discretization,
    pub grid: SpaceTimeGrid,
    pub domain: DomainSpec,
    pub options: SolveOptions,
    /// Physical coordinates of the face centers.
    pub face_points: Vec<Vec<f64>>,
    pub active: Vec<bool>,
    mass: f64,
    system: CsrMatrix,
}

impl DirichletSolver {
    pub fn new(a: &CoefficientField, domain: &DomainSpec, grid: &SpaceTimeGrid, options: SolveOptions) -> Result<Self> {
        domain.validate()?;
        let dom = domain.graph();
        let sp = &grid.space;
        if sp.dim() != dom.dim() {
            return Err(Error::DimensionMismatch { expected: dom.dim(), got: sp.dim() });
        }
        for k in 0..sp.dim() {
            let (lo, hi) = (sp.lower[k], sp.upper(k));
            if (lo - dom.bounds[k][0]).abs() > 1e-12 * (1.0 + lo.abs()) || (hi - dom.bounds[k][1]).abs() > 1e-9 * (1.0 + hi.abs()) {
                return Err(Error::InvalidArgument(format!("grid box axis {k} is [{lo}, {hi}], domain has {:?}", dom.bounds[k])));
            }
        }
        let flat = flatten_pullback(dom, a)?;
        let disc = assemble(&flat, sp, BoundaryMode::Dirichlet)?;
        let n = dom.n();
        let face_points = disc
            .faces
            .iter()
            .map(|f| {
                let mut x = f.center.clone();
                x[n] += dom.phi.eval(&x[..n]);
                x
            })
            .collect();
        let active = active_faces(domain, &disc);
        let mass = sp.cell_volume() / grid.dt;
        let theta = match options.scheme {
            TimeScheme::ImplicitEuler => 1.0,
            TimeScheme::CrankNicolson => 0.5,
        };
        let system = disc.stiffness.scaled_plus_diagonal(theta, &vec![mass; sp.len()]);
        Ok(Self { disc, grid: grid.clone(), domain: domain.clone(), options, face_points, active, mass, system })
    }

    fn cg(&self) -> CgOptions {
        CgOptions { tolerance: self.options.tolerance, max_iterations: self.options.max_iterations, mean_zero: false }
    }

    /// Face values of `f` at time `t` (zero on inactive faces).
    pub fn face_values(&self, f: &BoundaryData, t: f64) -> Vec<f64> {
        self.face_points.iter().zip(&self.active).map(|(x, &on)| if on { f.eval(x, t) } else { 0.0 }).collect()
    }

    pub fn initial_values(&self, init: &InitialData) -> Result<Vec<f64>> {
        let sp = &self.grid.space;
        match init {
            InitialData::Zero => Ok(vec![0.0; sp.len()]),
            InitialData::Values(v) => {
                if v.len() != sp.len() {
                    return Err(Error::DimensionMismatch { expected: sp.len(), got: v.len() });
                }
                Ok(v.clone())
            }
            InitialData::Delta { point, spread } => {
                let inside = (0..sp.dim()).all(|k| point[k] > sp.lower[k] && point[k] < sp.upper(k));
                if !inside {
                    return Err(Error::OutsideDomain(format!("pole {point:?} is not interior")));
                }
                let mut u = vec![0.0; sp.len()];
                let vol = sp.cell_volume();
                if *spread {
                    for (i, w) in sp.interpolation_weights(point) {
                        u[i] += w / vol;
                    }
                } else {
                    let m: Vec<usize> =
                        (0..sp.dim()).map(|k| (((point[k] - sp.lower[k]) / sp.spacing[k]).floor() as usize).min(sp.cells[k] - 1)).collect();
                    u[sp.index(&m)] = 1.0 / vol;
                }
                Ok(u)
            }
        }
    }

    /// Runs the time stepper; `data(k)` returns the face values at level `k`.
    pub fn solve_with(&self, data: impl Fn(usize) -> Vec<f64>, init: &InitialData) -> Result<ScalarField> {
        let n = self.grid.space.len();
        let mut u = self.initial_values(init)?;
        let mut values = Vec::with_capacity((self.grid.steps + 1) * n);
        let mut g_prev = data(0);
        let mut boundary = Vec::with_capacity((self.grid.steps + 1) * g_prev.len());
        values.extend_from_slice(&u);
        boundary.extend_from_slice(&g_prev);
        let cg = self.cg();
        let mut rhs = vec![0.0; n];
        let mut ku = vec![0.0; n];
        for k in 1..=self.grid.steps {
            let g = data(k);
            match self.options.scheme {
                TimeScheme::ImplicitEuler => {
                    let bg = self.disc.boundary.mul_vec(&g);
                    for i in 0..n {
                        rhs[i] = self.mass * u[i] + bg[i];
                    }
                }
                TimeScheme::CrankNicolson => {
                    let gm: Vec<f64> = g.iter().zip(&g_prev).map(|(a, b)| 0.5 * (a + b)).collect();
                    let bg = self.disc.boundary.mul_vec(&gm);
                    self.disc.stiffness.mul_vec_into(&u, &mut ku);
                    for i in 0..n {
                        rhs[i] = self.mass * u[i] - 0.5 * ku[i] + bg[i];
                    }
                }
            }
            conjugate_gradient(&self.system, &rhs, &mut u, &cg)?;
            values.extend_from_slice(&u);
            boundary.extend_from_slice(&g);
            g_prev = g;
        }
        Ok(ScalarField { grid: self.grid.clone(), values, boundary })
    }

    /// Solves with lateral data `f`. With zero initial data, `f` must vanish at
    /// the initial time.
    pub fn solve(&self, f: &BoundaryData, init: &InitialData) -> Result<ScalarField> {
        if matches!(init, InitialData::Zero) {
            let g0 = self.face_values(f, self.grid.t0);
            let worst = g0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if worst > 1e-12 {
                return Err(Error::IncompatibleData(format!(
                    "data is {worst:e} at the initial time t = {} but the initial state is zero",
                    self.grid.t0
                )));
            }
        }
        self.solve_with(|k| self.face_values(f, self.grid.time(k)), init)
    }

    /// Sensitivities of `Σ_k c_kᵀ u^k` to the face values: entry `[k][j]` is
    /// `∂/∂g_j^k` for `k = 1..=K` (index 0 is unused and zero). Implicit Euler only.
    pub fn adjoint_atoms(&self, sources: &[(usize, Vec<(usize, f64)>)]) -> Result<Vec<Vec<f64>>> {
        if self.options.scheme != TimeScheme::ImplicitEuler {
            return Err(Error::InvalidArgument("adjoint atoms are defined for implicit Euler only".into()));
        }
        let n = self.grid.space.len();
        let nb = self.disc.faces.len();
        let top = sources.iter().map(|s| s.0).max().unwrap_or(0);
        if top > self.grid.steps {
            return Err(Error::InvalidArgument(format!("source level {top} beyond {}", self.grid.steps)));
        }
        let mut atoms = vec![vec![0.0; nb]; top + 1];
        let mut w = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let cg = self.cg();
        for k in (1..=top).rev() {
            for i in 0..n {
                rhs[i] = self.mass * w[i];
            }
            for (lvl, c) in sources {
                if *lvl == k {
                    for &(i, v) in c {
                        rhs[i] += v;
                    }
                }
            }
            conjugate_gradient(&self.system, &rhs, &mut w, &cg)?;
            atoms[k] = self.disc.boundary.mul_transpose_vec(&w);
        }
        Ok(atoms)
    }
}

/// Convenience wrapper: assemble and solve once.
pub fn solve_dirichlet(
    a: &CoefficientField,
    dom: &DomainSpec,
    f: &BoundaryData,
    grid: &SpaceTimeGrid,
    options: SolveOptions,
) -> Result<ScalarField> {
    DirichletSolver::new(a, dom, grid, options)?.solve(f, &InitialData::Zero)
}

/// `v(y, s) = u(εy, ε²s)` sampled on `target`.
pub fn rescale_solution(u: &ScalarField, eps: f64, target: &SpaceTimeGrid) -> Result<ScalarField> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {eps}")));
    }
    let src = &u.grid.space;
    let tg = &target.space;
    if tg.dim() != src.dim() {
        return Err(Error::DimensionMismatch { expected: src.dim(), got: tg.dim() });
    }
    let slack = 1e-9;
    for k in 0..tg.dim() {
        let (lo, hi) = (eps * tg.lower[k], eps * tg.upper(k));
        if lo < src.lower[k] - slack * (1.0 + lo.abs()) || hi > src.upper(k) + slack * (1.0 + hi.abs()) {
            return Err(Error::OutsideDomain(format!("rescaled axis {k} [{lo}, {hi}] exceeds the source grid")));
        }
    }
    let (s0, s1) = (eps * eps * target.t0, eps * eps * target.t1());
    if s0 < u.grid.t0 - slack * (1.0 + s0.abs()) || s1 > u.grid.t1() + slack * (1.0 + s1.abs()) {
        return Err(Error::OutsideDomain(format!("rescaled time range [{s0}, {s1}] exceeds the source grid")));
    }
    let src_faces = src.boundary_faces();
    Ok(ScalarField::sample(
        target,
        |y, s| {
            let x: Vec<f64> = y.iter().map(|v| eps * v).collect();
            u.interpolate(&x, eps * eps * s)
        },
        |y, s| {
            // nearest source face value
            let x: Vec<f64> = y.iter().map(|v| eps * v).collect();
            let lvl = (((eps * eps * s - u.grid.t0) / u.grid.dt).round().max(0.0) as usize).min(u.grid.steps);
            let j = src_faces
                .iter()
                .enumerate()
                .min_by(|a, b| dist2(&a.1.center, &x).partial_cmp(&dist2(&b.1.center, &x)).unwrap())
                .map_or(0, |(j, _)| j);
            u.boundary_level(lvl).get(j).copied().unwrap_or(0.0)
        },
    ))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Length of `[c − w/2, c + w/2] ∩ (a, b)`.
pub fn overlap(c: f64, w: f64, a: f64, b: f64) -> f64 {
    ((c + 0.5 * w).min(b) - (c - 0.5 * w).max(a)).max(0.0)
}

/// Time weight of level `k` inside `(a, b)`: levels represent
/// `[t_k − dt/2, t_k + dt/2]`, clipped to the grid's time range.
pub fn level_weight(grid: &SpaceTimeGrid, k: usize, a: f64, b: f64) -> f64 {
    overlap(grid.time(k), grid.dt, a.max(grid.t0), b.min(grid.t1()))
}

/// Per-boundary-cell approximation of `limsup_{λ→0} u/λ` on a flat bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCell {
    pub x: Vec<f64>,
    pub t: f64,
    pub level: usize,
    pub face: usize,
    /// `u(λ₁)/λ₁` at the first layer `λ₁ = h/2`.
    pub first_layer: f64,
    /// `(3q₁ − q₂)/2` with `q₂` the ratio on the second layer `λ₂ = 3h/2`.
    pub richardson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRatio {
    pub cells: Vec<TraceCell>,
    /// Largest `|u|` on the bottom inside `Q_{4r}`.
    pub boundary_max: f64,
}

/// `u/λ` on the first two layers above the bottom faces whose quadrature
/// cells meet `Q_r`; requires `u = 0` on `Q_{4r}` (to 1e-10).
pub fn nt_trace_ratio(u: &ScalarField, q: &ParabolicCube) -> Result<TraceRatio> {
    let sp = &u.grid.space;
    let d = sp.dim();
    let n = d - 1;
    if q.kind != CubeKind::Boundary || q.center.len() != n {
        return Err(Error::InvalidArgument("trace ratio needs a boundary cube".into()));
    }
    if sp.cells[n] < 2 {
        return Err(Error::InsufficientResolution { required: 2, got: sp.cells[n] });
    }
    let faces = sp.boundary_faces();
    let big = q.dilate(4.0);
    let mut boundary_max: f64 = 0.0;
    let mut cells = Vec::new();
    let h = sp.spacing[n];
    let (l1, l2) = (0.5 * h, 1.5 * h);
    for k in 0..u.levels() {
        let t = u.grid.time(k);
        let g = u.boundary_level(k);
        for (j, f) in faces.iter().enumerate() {
            if f.axis != n || f.side != 0 {
                continue;
            }
            let x = &f.center[..n];
            if big.contains(x, t, None) {
                boundary_max = boundary_max.max(g[j].abs());
            }
            let (a, b) = q.t_range();
            let inside = level_weight(&u.grid, k, a, b) > 0.0
                && (0..n).all(|i| overlap(x[i], sp.spacing[i], q.center[i] - q.r, q.center[i] + q.r) > 0.0);
            if !inside {
                continue;
            }
            let mut m = sp.multi_index(f.cell);
            let q1 = u.get(k, f.cell) / l1;
            m[n] = 1;
            let q2 = u.get(k, sp.index(&m)) / l2;
            cells.push(TraceCell { x: x.to_vec(), t, level: k, face: j, first_layer: q1, richardson: 0.5 * (3.0 * q1 - q2) });
        }
    }
    if boundary_max > 1e-10 {
        return Err(Error::Hypothesis(format!("u is {boundary_max:e} on the bottom of Q_4r, expected 0")));
    }
    Ok(TraceRatio { cells, boundary_max })
}

/// `(index, weight)` pairs over cells or time levels.
pub type Weights = Vec<(usize, f64)>;

/// Weighted cell/level iterator over a space-time region, with overlap
/// weights so that integrals are exact for piecewise constants.
pub fn region_weights(grid: &SpaceTimeGrid, lower: &[f64], upper: &[f64], t_range: (f64, f64)) -> (Weights, Weights) {
    let sp = &grid.space;
    let d = sp.dim();
    let mut cells = Vec::new();
    for lin in 0..sp.len() {
        let c = sp.center(lin);
        let mut w = 1.0;
        for k in 0..d {
            w *= overlap(c[k], sp.spacing[k], lower[k], upper[k]);
            if w == 0.0 {
                break;
            }
        }
        if w > 0.0 {
            cells.push((lin, w));
        }
    }
    let levels = (0..=grid.steps).map(|k| (k, level_weight(grid, k, t_range.0, t_range.1))).filter(|&(_, w)| w > 0.0).collect();
    (cells, levels)
}

/// `∫ u²` over a region with the midpoint rule plus the `h²/12 |∂u|²` cell
/// correction (exact for functions affine in each cell's neighborhood).
pub fn integrate_square(u: &ScalarField, cells: &[(usize, f64)], levels: &[(usize, f64)]) -> f64 {
    let sp = &u.grid.space;
    let d = sp.dim();
    let mut total = 0.0;
    for &(k, wt) in levels {
        let lvl = u.level(k);
        let mut acc = 0.0;
        for &(i, wx) in cells {
            let v = lvl[i];
            let mut corr = 0.0;
            let m = sp.multi_index(i);
            for axis in 0..d {
                let h = sp.spacing[axis];
                let mut lo = m.clone();
                let mut hi = m.clone();
                let mut span = 0.0;
                if m[axis] > 0 {
                    lo[axis] -= 1;
                    span += h;
                }
                if m[axis] + 1 < sp.cells[axis] {
                    hi[axis] += 1;
                    span += h;
                }
                if span > 0.0 {
                    let g = (lvl[sp.index(&hi)] - lvl[sp.index(&lo)]) / span;
                    corr += h * h / 12.0 * g * g;
                }
            }
            acc += wx * (v * v + corr);
        }
        total += wt * acc;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoserRatio {
    pub sup: f64,
    pub mean_square_root: f64,
    pub ratio: f64,
}

/// `sup_{Q̃_r} |u| / (⨍_{Q̃_2r} u²)^{1/2}`.
pub fn moser_ratio(u: &ScalarField, q: &ParabolicCube) -> Result<MoserRatio> {
    let sp = &u.grid.space;
    let d = sp.dim();
    if q.kind != CubeKind::Interior || q.center.len() != d {
        return Err(Error::InvalidArgument("Moser ratio needs an interior cube".into()));
    }
    let big = q.dilate(2.0);
    let (t0, t1) = big.t_range();
    for k in 0..d {
        let (lo, hi) = big.x_range(k);
        if lo < sp.lower[k] || hi > sp.upper(k) {
            return Err(Error::OutsideDomain(format!("doubled cube leaves the grid along axis {k}")));
        }
    }
    if t0 < u.grid.t0 - 1e-12 || t1 > u.grid.t1() + 1e-12 {
        return Err(Error::OutsideDomain("doubled cube leaves the time range".into()));
    }
    let lower: Vec<f64> = (0..d).map(|k| big.x_range(k).0).collect();
    let upper: Vec<f64> = (0..d).map(|k| big.x_range(k).1).collect();
    let (cells, levels) = region_weights(&u.grid, &lower, &upper, (t0, t1));
    let mut mass = 0.0;
    let mut weight = 0.0;
    for &(k, wt) in &levels {
        for &(i, wx) in &cells {
            mass += wt * wx * u.get(k, i).powi(2);
            weight += wt * wx;
        }
    }
    let mut sup: f64 = 0.0;
    for k in 0..u.levels() {
        let t = u.grid.time(k);
        if (t - q.t).abs() >= q.r * q.r {
            continue;
        }
        for i in 0..sp.len() {
            if q.contains(&sp.center(i), t, None) {
                sup = sup.max(u.get(k, i).abs());
            }
        }
    }
    let msr = (mass / weight).sqrt();
    let ratio = if msr > 0.0 { sup / msr } else { 0.0 };
    Ok(MoserRatio { sup, mean_square_root: msr, ratio })
}

/// Result of a local energy comparison; `degenerate` marks `0/0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatio {
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
    pub degenerate: bool,
}

/// Boxes `Ω_γ = {|x_i| < 2R, 0 < λ < γR}` centered at `x = 0` over a flat bottom.
fn omega(n: usize, r: f64, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![-2.0 * r; n];
    let mut hi = vec![2.0 * r; n];
    lo.push(0.0);
    hi.push(gamma * r);
    (lo, hi)
}

/// `R² ∫_{Ω₂×(0,4R²)} |∇u|² / ∫_{Ω₃×(0,8R²)} u²`, times measured from the
/// grid's initial time. The data must vanish on the bottom.
pub fn caccioppoli_ratio(u: &ScalarField, r: f64) -> Result<EnergyRatio> {
    let sp = &u.grid.space;
    let d = sp.dim();
    let n = d - 1;
    let faces = sp.boundary_faces();
    let bottom_max = (0..u.levels())
        .flat_map(|k| faces.iter().enumerate().filter(|(_, f)| f.axis == n && f.side == 0).map(move |(j, _)| (k, j)))
        .fold(0.0f64, |m, (k, j)| m.max(u.boundary_level(k)[j].abs()));
    if bottom_max > 1e-10 {
        return Err(Error::Hypothesis(format!("u is {bottom_max:e} on the bottom, expected 0")));
    }
    let t0 = u.grid.t0;
    let (lo2, hi2) = omega(n, r, 2.0);
    let (lo3, hi3) = omega(n, r, 3.0);
    let (c2, l2) = region_weights(&u.grid, &lo2, &hi2, (t0, t0 + 4.0 * r * r));
    let (c3, l3) = region_weights(&u.grid, &lo3, &hi3, (t0, t0 + 8.0 * r * r));
    let mut energy = 0.0;
    for &(k, wt) in &l2 {
        for &(i, wx) in &c2 {
            energy += wt * wx * gradient_sq(u, k, i);
        }
    }
    let mass = integrate_square(u, &c3, &l3);
    if mass == 0.0 {
        return Ok(EnergyRatio { numerator: 0.0, denominator: 0.0, ratio: 0.0, degenerate: true });
    }
    Ok(EnergyRatio { numerator: r * r * energy, denominator: mass, ratio: r * r * energy / mass, degenerate: false })
}

/// `|∇u|²` at a cell by central differences (one-sided at the box edge,
/// using the face value there).
fn gradient_sq(u: &ScalarField, k: usize, i: usize) -> f64 {
    let sp = &u.grid.space;
    let m = sp.multi_index(i);
    let mut s = 0.0;
    for axis in 0..sp.dim() {
        let h = sp.spacing[axis];
        let mut lo = m.clone();
        let mut hi = m.clone();
        let g = if m[axis] > 0 && m[axis] + 1 < sp.cells[axis] {
            lo[axis] -= 1;
            hi[axis] += 1;
            (u.get(k, sp.index(&hi)) - u.get(k, sp.index(&lo))) / (2.0 * h)
        } else if m[axis] + 1 < sp.cells[axis] {
            hi[axis] += 1;
            (u.get(k, sp.index(&hi)) - u.get(k, i)) / h
        } else if m[axis] > 0 {
            lo[axis] -= 1;
            (u.get(k, i) - u.get(k, sp.index(&lo))) / h
        } else {
            0.0
        };
        s += g * g;
    }
    s
}

/// `Qu(x, t, λ) = u(x, t, λ + p) − u(x, t, λ)`; defined on the cells with
/// `λ + p` still in the grid (others are NaN). `p` must be a whole number of
/// cells.
pub fn q_difference(u: &ScalarField, period: f64) -> Result<ScalarField> {
    let sp = &u.grid.space;
    let n = sp.dim() - 1;
    let shift = period / sp.spacing[n];
    let s = shift.round();
    if (shift - s).abs() > 1e-9 || s < 1.0 {
        return Err(Error::InvalidArgument(format!("period {period} is not a positive multiple of the λ spacing")));
    }
    let s = s as usize;
    let mut values = vec![f64::NAN; u.values.len()];
    for k in 0..u.levels() {
        let base = k * sp.len();
        for i in 0..sp.len() {
            let mut m = sp.multi_index(i);
            if m[n] + s < sp.cells[n] {
                m[n] += s;
                values[base + i] = u.values[base + sp.index(&m)] - u.values[base + i];
            }
        }
    }
    Ok(ScalarField { grid: u.grid.clone(), values, boundary: vec![0.0; u.boundary.len()] })
}
