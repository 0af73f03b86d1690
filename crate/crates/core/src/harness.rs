//! Experiment configs, the homogenization study, the diagnostic sweep and
//! deterministic report output (JSON, CSV, gnuplot columns).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::effective_matrix;
use crate::coeffs::{scale_field, CoeffSpec, CoefficientField, Periodicity};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geometry::{CubeKind, DomainSpec, GraphDomain, LipschitzCylinder, ParabolicCube, Phi};
use crate::maximal::{lp_boundary_norm, nontangential_max, BoundaryField};
use crate::oracle;
use crate::pde::{BoundaryData, DataSpec, DirichletSolver, InitialData, ScalarField, SolveOptions, SpaceTimeGrid};
use crate::potential::{
    caloric_measure, caloric_measure_field, comparison_ratio, doubling_ratio, green_measure_equivalence, green_symmetry_check,
    greens_function, harnack_ratio, kernel_estimate, local_solvability_experiment, reverse_holder_ratio, Pole, Resolution, ScaleFamily,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Grid spacing of the potential-theory checks, in units of the pole height.
pub const DEFAULT_H: f64 = 1.0 / 16.0;

/// `dt = h²/4` at [`DEFAULT_H`].
pub const DEFAULT_DT: f64 = DEFAULT_H * DEFAULT_H / 4.0;

/// Which parts of a run are executed and asserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    #[serde(default = "yes")]
    pub nontangential: bool,
    #[serde(default = "yes")]
    pub oracle_rows: bool,
    #[serde(default = "yes")]
    pub cylinder_rows: bool,
    #[serde(default = "default_presets")]
    pub presets: Vec<String>,
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub family: ScaleFamily,
}

fn yes() -> bool {
    true
}

fn default_presets() -> Vec<String> {
    ["identity", "laminate", "trig", "checkerboard"].iter().map(|s| s.to_string()).collect()
}

fn default_radii() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            nontangential: true,
            oracle_rows: true,
            cylinder_rows: true,
            presets: default_presets(),
            radii: default_radii(),
            family: ScaleFamily::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "CoeffSpec::laminate")]
    pub coeff: CoeffSpec,
    #[serde(default = "default_domain")]
    pub domain: DomainSpec,
    #[serde(default = "default_data")]
    pub data: DataSpec,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_p_list")]
    pub p: Vec<f64>,
    /// Cells per spatial axis.
    #[serde(default = "default_cells")]
    pub cells: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Torus resolution of the cell problem.
    #[serde(default = "default_cell_resolution")]
    pub cell_resolution: usize,
    /// Cone opening; defaults to the domain's.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Include wall-clock times (breaks byte-identical reports).
    #[serde(default)]
    pub record_runtime: bool,
}

pub const DEFAULT_T_FINAL: f64 = 0.25;

fn default_domain() -> DomainSpec {
    DomainSpec::Cylinder(LipschitzCylinder::unit_box(2, 1.0, DEFAULT_T_FINAL))
}

fn default_data() -> DataSpec {
    DataSpec { expr: Expr::parse("sin(pi*t/0.5)^2*(1 + x1 + 2*lambda)").expect("valid expression"), p: 2.0 }
}

fn default_eps() -> Vec<f64> {
    vec![0.5, 0.25, 0.125, 0.0625]
}

fn default_p_list() -> Vec<f64> {
    vec![2.0]
}

fn default_cells() -> usize {
    128
}

fn default_steps() -> usize {
    128
}

fn default_cell_resolution() -> usize {
    128
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            coeff: CoeffSpec::laminate(),
            domain: default_domain(),
            data: default_data(),
            eps: default_eps(),
            p: default_p_list(),
            cells: default_cells(),
            steps: default_steps(),
            cell_resolution: default_cell_resolution(),
            eta: None,
            diagnostics: Diagnostics::default(),
            output_dir: None,
            seed: 0,
            record_runtime: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        self.domain.graph().dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if let Some(e) = self.eps.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::InvalidArgument(format!("ε must lie in (0, 1], got {e}")));
        }
        if let Some(p) = self.p.iter().find(|&&p| !(p > 1.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!("p must lie in (1, ∞), got {p}")));
        }
        if self.cells < 4 || self.steps == 0 {
            return Err(Error::InvalidArgument("need at least 4 cells per axis and one time step".into()));
        }
        let a = self.coeff.build(self.dim())?;
        let period = match a.period() {
            Periodicity::Axis { period } | Periodicity::Lattice { period } => period,
            Periodicity::None => return Ok(()),
        };
        let g = self.domain.graph();
        let h = g.bounds.iter().map(|b| (b[1] - b[0]) / self.cells as f64).fold(0.0, f64::max);
        if let Some(&eps) = self.eps.iter().min_by(|a, b| a.total_cmp(b)) {
            let per_period = eps * period / h;
            if per_period < 8.0 - 1e-9 {
                let width = g.bounds.iter().map(|b| b[1] - b[0]).fold(0.0, f64::max);
                let required = (8.0 * width / (eps * period)).ceil() as usize;
                return Err(Error::InsufficientResolution { required, got: self.cells });
            }
        }
        Ok(())
    }

    fn time_range(&self) -> (f64, f64) {
        match &self.domain {
            DomainSpec::Cylinder(c) => (0.0, c.t_final),
            DomainSpec::HalfSpace(_) => (0.0, DEFAULT_T_FINAL),
        }
    }

    fn grid(&self) -> Result<SpaceTimeGrid> {
        let (t0, t1) = self.time_range();
        SpaceTimeGrid::for_domain(self.domain.graph(), &vec![self.cells; self.dim()], t0, t1, self.steps)
    }
}

/// The interior compact set on which `u_ε` and `ū` are compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactSet {
    /// Distance kept from the lateral boundary.
    pub margin: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub cells: usize,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizationRow {
    pub eps: f64,
    /// `sup_K |u_ε − ū|`.
    pub distance: f64,
    pub distance_over_eps: f64,
    /// `‖N(u_ε)‖_p / ‖f‖_p` for each configured `p`.
    pub nt_ratios: Vec<f64>,
    pub nt_flagged: usize,
    pub runtime_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub version: String,
    pub config: ExperimentConfig,
    #[serde(rename = "Abar")]
    pub abar: Vec<Vec<f64>>,
    pub compact: CompactSet,
    pub f_norms: Vec<f64>,
    pub rows: Vec<HomogenizationRow>,
    /// Distance strictly decreasing over the last three ε values.
    pub monotone: bool,
    /// Largest over smallest `‖N(u_ε)‖/‖f‖` (first `p`).
    pub nt_spread: Option<f64>,
    pub nt_band: bool,
    pub pass: bool,
}

/// Cells and levels of the default compact set: distance at least a quarter
/// of the box diameter from the lateral boundary and `t ≥ T/4`.
fn compact_set(grid: &SpaceTimeGrid) -> (Vec<usize>, Vec<usize>, CompactSet) {
    let sp = &grid.space;
    let diam = (0..sp.dim()).map(|k| (sp.upper(k) - sp.lower[k]).powi(2)).sum::<f64>().sqrt();
    let margin = 0.25 * diam;
    let cells: Vec<usize> = (0..sp.len())
        .filter(|&i| {
            let c = sp.center(i);
            (0..sp.dim()).all(|k| c[k] - sp.lower[k] >= margin && sp.upper(k) - c[k] >= margin)
        })
        .collect();
    let t_min = grid.t0 + 0.25 * (grid.t1() - grid.t0);
    let levels: Vec<usize> = (0..=grid.steps).filter(|&k| grid.time(k) >= t_min - 1e-12).collect();
    let set = CompactSet { margin, t_min, t_max: grid.t1(), cells: cells.len(), levels: levels.len() };
    (cells, levels, set)
}

/// Solves with `A(X/ε)` for each ε and with `Ā`, and compares on the compact set.
pub fn homogenization_experiment(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    if !matches!(cfg.domain, DomainSpec::Cylinder(_)) {
        return Err(Error::InvalidArgument("the homogenization experiment runs on a cylinder".into()));
    }
    let d = cfg.dim();
    let a = cfg.coeff.build(d)?;
    let eff = effective_matrix(&a, cfg.cell_resolution)?;
    let abar_field = eff.to_field()?;
    let grid = cfg.grid()?;
    let data = cfg.data.build();
    let eta = cfg.eta.unwrap_or_else(|| cfg.domain.graph().default_eta());
    let mut eps = cfg.eps.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    let limit = DirichletSolver::new(&abar_field, &cfg.domain, &grid, SolveOptions::default())?.solve(&data, &InitialData::Zero)?;
    let f_trace = BoundaryField::trace(&limit, &cfg.domain);
    let f_norms = cfg.p.iter().map(|&p| lp_boundary_norm(&f_trace, p)).collect::<Result<Vec<_>>>()?;
    let (cells, levels, compact) = compact_set(&grid);
    let rows = eps
        .par_iter()
        .map(|&e| -> Result<HomogenizationRow> {
            let start = Instant::now();
            let ae = scale_field(&a, e)?;
            let u = DirichletSolver::new(&ae, &cfg.domain, &grid, SolveOptions::default())?.solve(&data, &InitialData::Zero)?;
            let mut distance: f64 = 0.0;
            for &k in &levels {
                for &i in &cells {
                    distance = distance.max((u.get(k, i) - limit.get(k, i)).abs());
                }
            }
            let (nt_ratios, nt_flagged) = if cfg.diagnostics.nontangential {
                let nt = nontangential_max(&u, eta, &cfg.domain)?;
                let ratios =
                    cfg.p.iter().zip(&f_norms).map(|(&p, &fnorm)| Ok(lp_boundary_norm(&nt, p)? / fnorm)).collect::<Result<Vec<_>>>()?;
                (ratios, nt.flags.iter().filter(|&&f| f).count())
            } else {
                (Vec::new(), 0)
            };
            let runtime_seconds = cfg.record_runtime.then(|| start.elapsed().as_secs_f64());
            Ok(HomogenizationRow { eps: e, distance, distance_over_eps: distance / e, nt_ratios, nt_flagged, runtime_seconds })
        })
        .collect::<Result<Vec<_>>>()?;
    let tail = &rows[rows.len().saturating_sub(3)..];
    let monotone = tail.windows(2).all(|w| w[1].distance < w[0].distance);
    let firsts: Vec<f64> = rows.iter().filter_map(|r| r.nt_ratios.first().copied()).collect();
    let nt_spread = (!firsts.is_empty()).then(|| {
        let hi = firsts.iter().cloned().fold(f64::MIN, f64::max);
        let lo = firsts.iter().cloned().fold(f64::MAX, f64::min);
        hi / lo
    });
    let nt_band = nt_spread.is_none_or(|s| s <= 1.25);
    let abar = (0..d).map(|i| (0..d).map(|j| eff.abar[(i, j)]).collect()).collect();
    Ok(ConvergenceReport {
        version: VERSION.to_string(),
        config: cfg.clone(),
        abar,
        compact,
        f_norms,
        rows,
        monotone,
        nt_spread,
        nt_band,
        pass: monotone && nt_band,
    })
}

/// JSON has no NaN or infinity: such floats are written as the strings
/// `"NaN"`, `"inf"` and `"-inf"`.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(serde::de::Error::custom(format!("expected a number, got {t:?}"))),
            },
        }
    }
}

/// One line of the diagnostic sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub check: String,
    pub preset: String,
    pub domain: String,
    /// NaN for rows that summarize several scales.
    #[serde(with = "nonfinite")]
    pub r: f64,
    #[serde(with = "nonfinite")]
    pub value: f64,
    /// Closed-form value for `A = I`, when one exists.
    pub reference: Option<f64>,
    #[serde(with = "nonfinite")]
    pub error_bar: f64,
    pub pass: bool,
    /// Run outside the admissibility window of the underlying estimate.
    pub watermark: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
    pub pass: bool,
}

fn row(check: &str, preset: &str, domain: &str, r: f64, value: f64) -> SweepRow {
    SweepRow {
        check: check.into(),
        preset: preset.into(),
        domain: domain.into(),
        r,
        value,
        reference: None,
        error_bar: 0.0,
        pass: value.is_finite(),
        watermark: false,
    }
}

fn with_reference(mut r: SweepRow, reference: f64, tolerance: f64) -> SweepRow {
    r.reference = Some(reference);
    r.error_bar = (r.value - reference).abs() / reference.abs();
    r.pass = r.error_bar <= tolerance;
    r
}

fn failed(check: &str, preset: &str, domain: &str, r: f64, err: &Error) -> SweepRow {
    let mut out = row(check, preset, domain, r, f64::NAN);
    out.check = format!("{check}: {err}");
    out.pass = false;
    out
}

/// Half-space box `x ∈ (−3, 3)`, `λ ∈ (0, 3)` used by the potential checks.
pub fn reference_half_space() -> DomainSpec {
    DomainSpec::HalfSpace(GraphDomain::half_space(1, 3.0, 3.0))
}

pub fn reference_resolution(dom: &DomainSpec) -> Result<Resolution> {
    Resolution::uniform(dom.graph(), DEFAULT_H, DEFAULT_DT)
}

fn uniformity(rows: &[SweepRow], check: &str, preset: &str, domain: &str, factor: f64) -> SweepRow {
    let vals: Vec<f64> = rows.iter().filter(|r| r.check == check && r.preset == preset).map(|r| r.value).collect();
    let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
    let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
    let spread = if vals.is_empty() || lo <= 0.0 { f64::INFINITY } else { hi / lo };
    let mut out = row(&format!("{check}-uniformity"), preset, domain, f64::NAN, spread);
    out.pass = spread <= factor;
    out
}

/// A single potential-theory diagnostic, as selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Doubling,
    Rh,
    Localsolv,
    Harnack,
    Comparison,
    GreenSym,
    GreenMeasure,
}

impl Check {
    pub const ALL: [Check; 7] =
        [Check::Doubling, Check::Rh, Check::Localsolv, Check::Harnack, Check::Comparison, Check::GreenSym, Check::GreenMeasure];

    pub fn name(self) -> &'static str {
        match self {
            Check::Doubling => "doubling",
            Check::Rh => "rh",
            Check::Localsolv => "localsolv",
            Check::Harnack => "harnack",
            Check::Comparison => "comparison",
            Check::GreenSym => "green-sym",
            Check::GreenMeasure => "green-measure",
        }
    }

    /// Scale used when none is given.
    pub fn default_r(self) -> f64 {
        match self {
            Check::Localsolv => 1.0,
            Check::Harnack => 0.25,
            Check::Comparison => 0.125,
            Check::GreenMeasure => 0.5,
            _ => 0.25,
        }
    }
}

impl std::str::FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown check {s:?}")))
    }
}

/// Coefficients under test, with the closed forms attached when `A = I`.
pub struct Subject<'a> {
    pub label: &'a str,
    pub a: &'a CoefficientField,
    pub identity: bool,
}

impl<'a> Subject<'a> {
    /// `identity` attaches the heat-kernel closed forms; set it only for `A = I`.
    pub fn new(label: &'a str, a: &'a CoefficientField, identity: bool) -> Self {
        Self { label, a, identity }
    }
}

/// Runs one diagnostic at scale `r` (the check's default when `None`).
/// Harnack and comparison use fixed boxes and ignore `r`.
pub fn run_check(check: Check, subject: &Subject, r: Option<f64>, family: ScaleFamily) -> Result<Vec<SweepRow>> {
    let r = r.unwrap_or(check.default_r());
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {r}")));
    }
    match check {
        Check::Doubling => doubling_rows(subject, r),
        Check::Rh => rh_rows(subject, r),
        Check::Localsolv => {
            let e = local_solvability_experiment(subject.a, r, family)?;
            let mut out = row("localsolv", subject.label, "half-space", r, e.ratio);
            out.pass = e.ratio.is_finite() && !e.degenerate;
            Ok(vec![out])
        }
        Check::Harnack => Ok(vec![harnack_row(subject)?]),
        Check::Comparison => Ok(vec![comparison_row(subject)?]),
        Check::GreenSym => green_rows(subject),
        Check::GreenMeasure => green_measure_rows(subject, r),
    }
}

fn reference_pole() -> Pole {
    Pole::new(vec![0.0, 1.0], 1.0)
}

fn exact_measure(pole: &Pole, q: &ParabolicCube) -> f64 {
    let (s0, s1) = q.t_range();
    oracle::half_space_measure(&pole.point, pole.t, &[q.center[0] - q.r], &[q.center[0] + q.r], (s0, s1))
}

fn doubling_rows(subject: &Subject, r: f64) -> Result<Vec<SweepRow>> {
    let dom = reference_half_space();
    let res = reference_resolution(&dom)?;
    let pole = reference_pole();
    let cube = ParabolicCube::boundary(vec![0.0], 0.5, r)?;
    let d = doubling_ratio(subject.a, &dom, &pole, &cube, &res)?;
    let mut out = row("doubling", subject.label, "half-space", r, d.ratio);
    if subject.identity {
        out = with_reference(out, exact_measure(&pole, &cube.dilate(2.0)) / exact_measure(&pole, &cube), 0.05);
    } else {
        out.error_bar = d.small.smoothing_error / d.small.value;
        out.pass = d.ratio >= 1.0;
    }
    Ok(vec![out])
}

fn rh_rows(subject: &Subject, r: f64) -> Result<Vec<SweepRow>> {
    let dom = reference_half_space();
    let res = reference_resolution(&dom)?;
    let pole = reference_pole();
    let cube = ParabolicCube::boundary(vec![0.0], 0.5, r)?;
    let k = kernel_estimate(subject.a, &dom, &pole, &cube, 2, &res)?;
    let rh = reverse_holder_ratio(&k, 2.0)?;
    let mut out = row("rh", subject.label, "half-space", r, rh.ratio);
    out.error_bar = k.cells.iter().map(|c| c.gap / c.density.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
    out.pass = rh.ratio >= 1.0;
    out.watermark = !rh.admissible;
    let mut rows = vec![out];
    if subject.identity {
        let m = caloric_measure(subject.a, &dom, &pole, &cube, &res)?;
        rows.push(with_reference(row("caloric-measure", subject.label, "half-space", r, m.value), exact_measure(&pole, &cube), 0.02));
        let side = cube.r / 4.0;
        let worst = k
            .cells
            .iter()
            .map(|c| {
                let q = ParabolicCube { center: c.center.clone(), t: c.t, r: side, kind: CubeKind::Boundary };
                (c.density / (exact_measure(&pole, &q) / c.measure) - 1.0).abs()
            })
            .fold(0.0, f64::max);
        let mut kr = row("kernel", subject.label, "half-space", r, worst);
        kr.error_bar = worst;
        kr.pass = worst <= 0.03;
        rows.push(kr);
    }
    Ok(rows)
}

fn green_rows(subject: &Subject) -> Result<Vec<SweepRow>> {
    let dom = reference_half_space();
    let res = reference_resolution(&dom)?;
    let (source, target) = (Pole::new(vec![0.03125, 1.03125], 0.0), Pole::new(vec![0.40625, 0.78125], 0.5));
    let s = green_symmetry_check(subject.a, &dom, &source, &target, 0.25, &res)?;
    let mut sr = row("green-sym", subject.label, "half-space", f64::NAN, s.deviation);
    sr.error_bar = s.deviation;
    sr.pass = s.deviation <= 0.02;
    let mut rows = vec![sr];
    if subject.identity {
        let exact = oracle::half_space_green(&target.point, target.t, &source.point, source.t);
        rows.push(with_reference(row("green", subject.label, "half-space", f64::NAN, s.forward), exact, 0.02));
    }
    Ok(rows)
}

fn green_measure_rows(subject: &Subject, rho: f64) -> Result<Vec<SweepRow>> {
    let dom = reference_half_space();
    let res = reference_resolution(&dom)?;
    let at = Pole::new(vec![0.0, rho], 4.0 * rho * rho);
    let g = green_measure_equivalence(subject.a, &dom, &[0.0], 0.0, rho, &at, 1.0, &res)?;
    let mut rows = Vec::new();
    for (name, v) in [("green-measure-lower", g.lower), ("green-measure-upper", g.upper)] {
        let mut gr = row(name, subject.label, "half-space", rho, v);
        gr.pass = (0.1..=10.0).contains(&v);
        gr.watermark = !g.admissible;
        rows.push(gr);
    }
    Ok(rows)
}

/// Box `T_1(0, 0)` with the data and initial values of a Gaussian centered
/// below the boundary, which is the solution itself when `A = I`.
fn harnack_row(subject: &Subject) -> Result<SweepRow> {
    let base = GraphDomain::half_space(1, 1.0, 1.0);
    let dom = DomainSpec::Cylinder(LipschitzCylinder::new(base.clone(), 2.0)?);
    let grid = SpaceTimeGrid::for_domain(&base, &[32, 16], -1.0, 1.0, 512)?;
    let gauss = |x: &[f64], t: f64| oracle::heat_kernel(&[x[0], x[1] + 0.5], t + 1.5);
    let solver = DirichletSolver::new(subject.a, &dom, &grid, SolveOptions::default())?;
    let init: Vec<f64> = (0..grid.space.len()).map(|i| gauss(&grid.space.center(i), -1.0)).collect();
    let u = solver.solve_with(|k| solver.face_points.iter().map(|x| gauss(x, grid.time(k))).collect(), &InitialData::Values(init))?;
    let t4r = ParabolicCube::new(vec![0.0], 0.0, 1.0, CubeKind::Box)?;
    let h = harnack_ratio(&u, &t4r)?;
    let out = row("harnack", subject.label, "box", 0.25, h.ratio);
    if subject.identity {
        let exact = ScalarField::sample(&grid, gauss, gauss);
        return Ok(with_reference(out, harnack_ratio(&exact, &t4r)?.ratio, 0.02));
    }
    Ok(out)
}

/// Caloric measures of two cubes outside `Q_{2r}`, compared in `T_r`.
fn comparison_row(subject: &Subject) -> Result<SweepRow> {
    let dom = reference_half_space();
    let res = reference_resolution(&dom)?;
    let qa = ParabolicCube::boundary(vec![1.0], -0.75, 0.25)?;
    let qb = ParabolicCube::boundary(vec![-1.0], -0.75, 0.25)?;
    let u = caloric_measure_field(subject.a, &dom, &qa, 0.5, &res)?;
    let v = caloric_measure_field(subject.a, &dom, &qb, 0.5, &res)?;
    let t4r = ParabolicCube::new(vec![0.0], 0.0, 0.5, CubeKind::Box)?;
    let num = comparison_ratio(&u, &v, &t4r)?;
    let out = row("comparison", subject.label, "half-space", 0.125, num.ratio);
    if !subject.identity {
        return Ok(out);
    }
    let exact = |q: &ParabolicCube| {
        let q = q.clone();
        move |x: &[f64], t: f64| exact_measure(&Pole::new(x.to_vec(), t), &q)
    };
    let zero = |_: &[f64], _: f64| 0.0;
    // the ratio reads T_2r and the two reference points; skip the quadrature elsewhere
    let reach = t4r.dilate(0.5);
    let (h, dt) = (res.space.spacing[0], res.dt);
    let near = |x: &[f64], t: f64| {
        (x[0] - reach.center[0]).abs() < reach.r + h && x[1] < reach.r + h && (t - reach.t).abs() < reach.r * reach.r + dt
    };
    let (fa, fb) = (exact(&qa), exact(&qb));
    let ue = ScalarField::sample(&u.grid, |x, t| if near(x, t) { fa(x, t) } else { 0.0 }, zero);
    let ve = ScalarField::sample(&v.grid, |x, t| if near(x, t) { fb(x, t) } else { 0.0 }, zero);
    Ok(with_reference(out, comparison_ratio(&ue, &ve, &t4r)?.ratio, 0.05))
}

fn preset_rows(name: &str, diag: &Diagnostics) -> Vec<SweepRow> {
    let a = match CoeffSpec::preset(name).and_then(|s| s.build(2)) {
        Ok(a) => a,
        Err(e) => return vec![failed("preset", name, "-", f64::NAN, &e)],
    };
    let subject = Subject::new(name, &a, CoeffSpec::preset(name).is_ok_and(|s| s.is_identity()));
    let attempt = |check: Check, r: f64| {
        run_check(check, &subject, Some(r), diag.family).unwrap_or_else(|e| vec![failed(check.name(), name, "half-space", r, &e)])
    };
    let mut rows: Vec<SweepRow> = diag.radii.par_iter().flat_map(|&r| attempt(Check::Localsolv, r)).collect();
    rows.push(uniformity(&rows, "localsolv", name, "half-space", 2.0));
    let more: Vec<SweepRow> = [(Check::Doubling, 0.5), (Check::Doubling, 0.25), (Check::Doubling, 0.125), (Check::Rh, 0.25)]
        .par_iter()
        .flat_map(|&(c, r)| attempt(c, r))
        .collect();
    rows.extend(more);
    rows
}

/// Every check for `A = I` against its closed form.
fn oracle_rows(diag: &Diagnostics) -> Vec<SweepRow> {
    let a = CoefficientField::identity(2);
    let subject = Subject::new("identity", &a, true);
    let checks = [Check::Rh, Check::Doubling, Check::GreenSym, Check::GreenMeasure, Check::Harnack, Check::Comparison];
    checks
        .par_iter()
        .flat_map(|&c| {
            run_check(c, &subject, None, diag.family).unwrap_or_else(|e| vec![failed(c.name(), "identity", "half-space", f64::NAN, &e)])
        })
        .map(|mut r| {
            r.check = format!("oracle:{}", r.check);
            r
        })
        .collect()
}

/// Sheared cylinder: chart check and a doubling ratio on its graph bottom.
fn cylinder_rows() -> Result<Vec<SweepRow>> {
    let phi = Phi::closed_form("0.25*sin(pi*x1/2)")?;
    let base = GraphDomain::new(phi, 0.4, vec![[-3.0, 3.0], [0.0, 3.0]])?;
    let cyl = LipschitzCylinder::new(base, 2.0)?;
    let chart = cyl.chart_check(1.5, 0.25, 16)?;
    let mut rows = Vec::new();
    let mut c = row("chart", "-", "cylinder", 0.25, chart.worst_slope);
    c.pass = chart.pass;
    rows.push(c);
    let dom = DomainSpec::Cylinder(cyl);
    let res = reference_resolution(&dom)?;
    let a = crate::coeffs::trig(2);
    let pole = Pole::new(vec![0.0, 1.0], 1.0);
    let cube = ParabolicCube::boundary(vec![0.0], 0.5, 0.25)?;
    let d = doubling_ratio(&a, &dom, &pole, &cube, &res)?;
    let mut r = row("doubling", "trig", "cylinder", 0.25, d.ratio);
    r.error_bar = d.small.smoothing_error / d.small.value;
    r.pass = d.ratio >= 1.0;
    rows.push(r);
    let g = greens_function(&a, &dom, &pole, 0.5, &res)?;
    let mut gr = row("green-boundary", "trig", "cylinder", f64::NAN, g.field.boundary.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    gr.pass = gr.value <= 1e-12;
    rows.push(gr);
    Ok(rows)
}

/// Runs the diagnostic battery over the configured presets and radii.
pub fn solvability_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let diag = &cfg.diagnostics;
    let mut rows: Vec<SweepRow> = Vec::new();
    if diag.oracle_rows {
        rows.extend(oracle_rows(diag));
    }
    let per_preset: Vec<Vec<SweepRow>> = diag.presets.par_iter().map(|p| preset_rows(p, diag)).collect();
    rows.extend(per_preset.into_iter().flatten());
    if diag.cylinder_rows {
        rows.extend(cylinder_rows().unwrap_or_else(|e| vec![failed("cylinder", "-", "cylinder", f64::NAN, &e)]));
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(SweepReport { version: VERSION.to_string(), config: cfg.clone(), rows, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Tabular view of a report for CSV and gnuplot output.
pub trait Tabular {
    fn header(&self) -> Vec<String>;
    fn table(&self) -> Vec<Vec<String>>;
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl Tabular for ConvergenceReport {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["eps", "distance", "distance_over_eps"].iter().map(|s| s.to_string()).collect();
        h.extend(self.config.p.iter().map(|p| format!("nt_ratio_p{p}")));
        h.push("runtime_seconds".into());
        h
    }

    fn table(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![num(r.eps), num(r.distance), num(r.distance_over_eps)];
                for i in 0..self.config.p.len() {
                    row.push(opt(r.nt_ratios.get(i).copied()));
                }
                row.push(opt(r.runtime_seconds));
                row
            })
            .collect()
    }
}

impl Tabular for SweepReport {
    fn header(&self) -> Vec<String> {
        ["check", "preset", "domain", "r", "value", "reference", "error_bar", "pass", "watermark"].iter().map(|s| s.to_string()).collect()
    }

    fn table(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    csv_field(&r.check),
                    r.preset.clone(),
                    r.domain.clone(),
                    num(r.r),
                    num(r.value),
                    opt(r.reference),
                    num(r.error_bar),
                    r.pass.to_string(),
                    r.watermark.to_string(),
                ]
            })
            .collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv<R: Tabular>(report: &R) -> String {
    let mut out = report.header().join(",") + "\n";
    for r in report.table() {
        out += &(r.join(",") + "\n");
    }
    out
}

/// Whitespace-separated columns with a `#` header; text cells are quoted.
pub fn to_dat<R: Tabular>(report: &R) -> String {
    let mut out = format!("# {}\n", report.header().join(" "));
    for r in report.table() {
        let cells: Vec<String> = r
            .into_iter()
            .map(|c| {
                if c.is_empty() {
                    "NaN".into()
                } else if c.parse::<f64>().is_ok() {
                    c
                } else {
                    format!("\"{}\"", c.replace('"', "'"))
                }
            })
            .collect();
        out += &(cells.join(" ") + "\n");
    }
    out
}

pub fn to_json<R: Serialize>(report: &R) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Writes `<stem>.json` or `<stem>.csv` (plus `<stem>.dat`) into `dir`.
pub fn emit_report<R: Serialize + Tabular>(report: &R, format: Format, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        Format::Json => {
            let p = dir.join(format!("{stem}.json"));
            std::fs::write(&p, to_json(report)?)?;
            written.push(p);
        }
        Format::Csv => {
            let p = dir.join(format!("{stem}.csv"));
            std::fs::write(&p, to_csv(report))?;
            written.push(p);
        }
    }
    let dat = dir.join(format!("{stem}.dat"));
    std::fs::write(&dat, to_dat(report))?;
    written.push(dat);
    Ok(written)
}

/// Solves `cfg` once with `A(X/ε)` (no ε when `None`) and returns the field.
pub fn solve_config(cfg: &ExperimentConfig, eps: Option<f64>) -> Result<ScalarField> {
    cfg.domain.validate()?;
    let a = cfg.coeff.build(cfg.dim())?;
    let a = match eps {
        Some(e) => scale_field(&a, e)?,
        None => a,
    };
    let grid = cfg.grid()?;
    let data: BoundaryData = cfg.data.build();
    DirichletSolver::new(&a, &cfg.domain, &grid, SolveOptions::default())?.solve(&data, &InitialData::Zero)
}
