//! Coefficient fields `A(X)` and checks of their structural hypotheses:
//! uniform ellipticity, periodicity (in the last variable or on the full
//! integer lattice), and Dini-type moduli of continuity.
//!
//! The last spatial coordinate is the distinguished direction `λ`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

pub type Evaluator = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Declared translation invariance of a coefficient field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Periodicity {
    None,
    /// `A(x, λ + p) = A(x, λ)`.
    Axis {
        period: f64,
    },
    /// `A(X + p·Z) = A(X)` for every integer vector `Z`.
    Lattice {
        period: f64,
    },
}

impl Periodicity {
    /// Generators of the period lattice in dimension `d`.
    pub fn generators(&self, d: usize) -> Vec<Vec<f64>> {
        match *self {
            Self::None => Vec::new(),
            Self::Axis { period } => {
                let mut z = vec![0.0; d];
                z[d - 1] = period;
                vec![z]
            }
            Self::Lattice { period } => (0..d)
                .map(|i| {
                    let mut z = vec![0.0; d];
                    z[i] = period;
                    z
                })
                .collect(),
        }
    }

    fn scaled(self, eps: f64) -> Self {
        match self {
            Self::None => Self::None,
            Self::Axis { period } => Self::Axis { period: period * eps },
            Self::Lattice { period } => Self::Lattice { period: period * eps },
        }
    }

    /// Sampling box used by the randomized checks: one period cell along
    /// periodic directions and `[-1, 1]` along the others.
    fn sample_box(&self, d: usize) -> Vec<(f64, f64)> {
        match *self {
            Self::None => vec![(-1.0, 1.0); d],
            Self::Axis { period } => {
                let mut b = vec![(-1.0, 1.0); d];
                b[d - 1] = (0.0, period);
                b
            }
            Self::Lattice { period } => vec![(0.0, period); d],
        }
    }
}

/// Symmetric matrix-valued map `X ↦ A(X)` on `ℝ^d`.
#[derive(Clone)]
pub struct CoefficientField {
    dim: usize,
    ellipticity: f64,
    period: Periodicity,
    label: String,
    diagonal: bool,
    eval: Evaluator,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("ellipticity", &self.ellipticity)
            .field("period", &self.period)
            .finish()
    }
}

impl CoefficientField {
    pub fn new<F>(dim: usize, ellipticity: f64, period: Periodicity, label: impl Into<String>, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("spatial dimension must be at least 2, got {dim}")));
        }
        if !(ellipticity >= 1.0) {
            return Err(Error::InvalidArgument(format!("ellipticity constant must be >= 1, got {ellipticity}")));
        }
        Ok(Self { dim, ellipticity, period, label: label.into(), diagonal: false, eval: Arc::new(f) })
    }

    /// Marks the field as diagonal at every point, which lets the
    /// discretization skip the mixed-derivative stencil.
    pub fn with_diagonal(mut self, diagonal: bool) -> Self {
        self.diagonal = diagonal;
        self
    }

    /// Constant matrix `A(X) = m`.
    pub fn constant(m: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        let dim = m.nrows();
        if m.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: m.ncols() });
        }
        let (lo, hi) = sym_eigen_range(&m);
        if lo <= 0.0 {
            return Err(Error::InvalidArgument(format!("constant matrix is not positive definite (min eig {lo})")));
        }
        let diagonal = (0..dim).all(|i| (0..dim).all(|j| i == j || m[(i, j)] == 0.0));
        let lam = hi.max(1.0 / lo).max(1.0);
        Ok(Self::new(dim, lam, Periodicity::Lattice { period: 1.0 }, label, move |_| m.clone())?.with_diagonal(diagonal))
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant(DMatrix::identity(dim, dim), "identity").expect("identity is elliptic")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    pub fn period(&self) -> Periodicity {
        self.period
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (self.eval)(x)
    }

    pub fn relabel(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Overrides the declared period metadata.
    pub fn with_period(mut self, period: Periodicity) -> Self {
        self.period = period;
        self
    }

    pub fn with_ellipticity(mut self, ellipticity: f64) -> Self {
        self.ellipticity = ellipticity;
        self
    }

    /// `X ↦ A(X + z)`.
    pub fn shifted(&self, z: &[f64]) -> Self {
        let inner = self.eval.clone();
        let z = z.to_vec();
        let mut out = self.clone();
        out.eval = Arc::new(move |x: &[f64]| {
            let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
            inner(&y)
        });
        out.label = format!("{}+shift", self.label);
        out
    }

    /// Wraps the evaluator; `f` receives the point and the inner value.
    pub fn map_eval<F>(&self, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64], &dyn Fn(&[f64]) -> DMatrix<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        let inner = self.eval.clone();
        let mut out = self.clone();
        out.eval = Arc::new(move |x: &[f64]| f(x, &*inner));
        out.label = label.into();
        out
    }
}

/// `A_ε(X) = A(X/ε)` with the period lattice scaled by `ε`.
pub fn scale_field(a: &CoefficientField, eps: f64) -> Result<CoefficientField> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {eps}")));
    }
    if eps == 1.0 {
        return Ok(a.clone());
    }
    let inv = 1.0 / eps;
    let mut out = a.map_eval(format!("{}@eps={eps}", a.label), move |x, inner| {
        let y: Vec<f64> = x.iter().map(|v| v * inv).collect();
        inner(&y)
    });
    out.period = a.period.scaled(eps);
    Ok(out)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 2 {
        let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        return (mid - rad, mid + rad);
    }
    let eig = m.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Spectral norm of a symmetric matrix.
pub fn sym_operator_norm(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = sym_eigen_range(m);
    lo.abs().max(hi.abs())
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn sample_point(rng: &mut ChaCha8Rng, bx: &[(f64, f64)]) -> Vec<f64> {
    bx.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub min_eig: f64,
    pub max_eig: f64,
    pub pass: bool,
}

/// Samples eigenvalues of `A` at `sample_count` random points and checks
/// them against `[Λ⁻¹, Λ]`.
pub fn check_ellipticity(a: &CoefficientField, sample_count: usize, seed: u64) -> Result<EllipticityReport> {
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bx = a.period.sample_box(a.dim);
    let mut min_eig = f64::INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    for _ in 0..sample_count {
        let x = sample_point(&mut rng, &bx);
        let m = a.eval(&x);
        let scale = m.amax().max(1.0);
        let dev = asymmetry(&m);
        if dev > 1e-12 * scale {
            return Err(Error::Asymmetric { point: x, deviation: dev });
        }
        let (lo, hi) = sym_eigen_range(&m);
        min_eig = min_eig.min(lo);
        max_eig = max_eig.max(hi);
    }
    let lam = a.ellipticity;
    let slack = 1e-10;
    let pass = min_eig >= 1.0 / lam - slack && max_eig <= lam + slack;
    Ok(EllipticityReport { min_eig, max_eig, pass })
}

/// Largest Frobenius deviation `|A(X + Z) − A(X)|` over random samples and
/// the declared lattice generators `Z`.
pub fn check_periodicity(a: &CoefficientField, sample_count: usize, seed: u64) -> Result<f64> {
    let gens = a.period.generators(a.dim);
    if gens.is_empty() {
        return Err(Error::InvalidArgument(format!("field {:?} declares no period", a.label)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bx = a.period.sample_box(a.dim);
    let mut worst: f64 = 0.0;
    for _ in 0..sample_count.max(1) {
        let x = sample_point(&mut rng, &bx);
        let base = a.eval(&x);
        for z in &gens {
            let y: Vec<f64> = x.iter().zip(z).map(|(p, q)| p + q).collect();
            worst = worst.max((a.eval(&y) - &base).norm());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiniKind {
    /// Oscillation in the last variable at fixed `x`.
    Axis,
    /// Oscillation over all pairs `|X − Y| ≤ ρ`.
    AllVariables,
}

/// Sampled modulus of continuity `ρ ↦ θ(ρ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiniModulus {
    pub kind: DiniKind,
    /// `(ρ, θ(ρ))`, ascending in `ρ`, nondecreasing in `θ`.
    pub samples: Vec<(f64, f64)>,
    /// Half the gap between the two largest pair differences at each `ρ`.
    pub half_width: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiniIntegral {
    /// Trapezoid value of `∫_{ρ_min}^1 θ(ρ)²/ρ dρ`.
    pub value: f64,
    /// `θ(ρ_min)² · |log ρ_min|`; stays bounded iff the integral converges.
    pub tail_indicator: f64,
}

/// Geometric grid `2^{-20} … 1` with ratio `2^{1/4}`.
pub fn default_rho_grid() -> Vec<f64> {
    (0..=80).map(|k| 2f64.powf(-20.0 + 0.25 * k as f64)).collect()
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

fn halton(index: u64, dim: usize) -> Vec<f64> {
    (0..dim).map(|k| radical_inverse(index, PRIMES[k])).collect()
}

/// Estimates `θ(ρ) = sup |A(X) − A(Y)|` (spectral norm) over admissible pairs
/// at each `ρ` of `rho_grid` (must lie in `(0, 1]`).
///
/// Pairs come from a Halton sequence plus a zoom into the worst pairs of the
/// previous (coarser) scale, which keeps jumps visible at tiny `ρ`.
pub fn dini_modulus(a: &CoefficientField, kind: DiniKind, rho_grid: &[f64], pairs_per_rho: usize) -> Result<DiniModulus> {
    if rho_grid.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::InvalidArgument("rho grid must lie in (0, 1]".into()));
    }
    let d = a.dim;
    let bx = a.period.sample_box(d);
    let mut rhos = rho_grid.to_vec();
    rhos.sort_by(|p, q| q.partial_cmp(p).unwrap());
    rhos.dedup();

    let offset_dims = match kind {
        DiniKind::Axis => 1,
        DiniKind::AllVariables => d,
    };
    let hdim = (d + offset_dims).min(PRIMES.len());
    let pair_value = |x: &[f64], delta: &[f64]| -> f64 {
        let y: Vec<f64> = x.iter().zip(delta).map(|(p, q)| p + q).collect();
        sym_operator_norm(&(a.eval(&y) - a.eval(x)))
    };
    let offset = |h: &[f64], rho: f64| -> Vec<f64> {
        match kind {
            DiniKind::Axis => {
                let mut v = vec![0.0; d];
                v[d - 1] = rho * (2.0 * h[d] - 1.0);
                v
            }
            DiniKind::AllVariables => {
                let raw: Vec<f64> = (0..d).map(|k| 2.0 * h.get(d + k).copied().unwrap_or(0.5) - 1.0).collect();
                let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                raw.iter().map(|v| rho * v / n).collect()
            }
        }
    };

    // (difference, base point, offset) of the current worst pairs
    let mut leaders: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut raw = Vec::with_capacity(rhos.len());
    for &rho in &rhos {
        let mut cands: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(pairs_per_rho + 16 * leaders.len());
        for i in 0..pairs_per_rho as u64 {
            let h = halton(i + 17, hdim);
            let x: Vec<f64> = bx.iter().zip(&h).map(|(&(lo, hi), u)| lo + (hi - lo) * u).collect();
            let delta = offset(&h, rho);
            let v = pair_value(&x, &delta);
            cands.push((v, x, delta));
        }
        for (_, x, prev_delta) in &leaders {
            let prev_len = prev_delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if prev_len == 0.0 {
                continue;
            }
            let delta: Vec<f64> = prev_delta.iter().map(|v| v * rho / prev_len).collect();
            for k in 0..16 {
                let s = k as f64 / 15.0;
                let start: Vec<f64> = x.iter().zip(prev_delta.iter().zip(&delta)).map(|(p, (dp, dn))| p + s * (dp - dn)).collect();
                let v = pair_value(&start, &delta);
                cands.push((v, start, delta.clone()));
            }
        }
        cands.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap_or(std::cmp::Ordering::Equal));
        let top = cands.first().map_or(0.0, |c| c.0);
        let second = cands.get(1).map_or(top, |c| c.0);
        raw.push((rho, top, 0.5 * (top - second)));
        cands.truncate(8);
        leaders = cands;
    }
    raw.reverse();
    let mut samples = Vec::with_capacity(raw.len());
    let mut half_width = Vec::with_capacity(raw.len());
    let mut running: f64 = 0.0;
    for (rho, v, hw) in raw {
        running = running.max(v);
        samples.push((rho, running));
        half_width.push(hw);
    }
    Ok(DiniModulus { kind, samples, half_width })
}

impl DiniModulus {
    /// Trapezoid rule for `∫ θ²/ρ dρ` over the samples with `ρ ≥ rho_min`.
    pub fn integral(&self, rho_min: f64) -> Result<DiniIntegral> {
        let pts: Vec<(f64, f64)> = self.samples.iter().copied().filter(|&(r, _)| r >= rho_min * (1.0 - 1e-12)).collect();
        if pts.is_empty() || pts[0].0 > rho_min * (1.0 + 1e-9) {
            return Err(Error::InvalidArgument(format!("samples do not cover rho_min = {rho_min}")));
        }
        let value = pts
            .windows(2)
            .map(|w| {
                let (r0, t0) = w[0];
                let (r1, t1) = w[1];
                0.5 * (r1 - r0) * (t0 * t0 / r0 + t1 * t1 / r1)
            })
            .sum();
        let t_min = pts[0].1;
        Ok(DiniIntegral { value, tail_indicator: t_min * t_min * rho_min.ln().abs() })
    }
}

/// `∫ θ²/ρ` from an explicit modulus, for checking the quadrature.
pub fn dini_integral(modulus: &DiniModulus, rho_min: f64) -> Result<DiniIntegral> {
    modulus.integral(rho_min)
}

/// Named coefficient presets and user expressions, as read from config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoeffSpec {
    /// `A = value · I`.
    Constant { value: f64 },
    /// Constant symmetric matrix.
    Matrix { rows: Vec<Vec<f64>> },
    /// `A = a(y_axis) I` with `a = low` on `frac(y) < fraction`, `high` otherwise.
    Laminate {
        #[serde(default = "default_low")]
        low: f64,
        #[serde(default = "default_high")]
        high: f64,
        #[serde(default = "default_fraction")]
        fraction: f64,
        #[serde(default)]
        axis: usize,
    },
    /// Smooth diagonal field, periodic on the unit lattice, eigenvalues in [1, 3].
    Trig,
    /// Two-phase checkerboard `low`/`high` with `tanh` smoothing width.
    Checkerboard {
        #[serde(default = "default_low")]
        low: f64,
        #[serde(default = "default_high")]
        high: f64,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
    /// Entry-wise expressions; only the upper triangle is read.
    Expr {
        entries: Vec<Vec<Expr>>,
        ellipticity: f64,
        #[serde(default = "default_periodicity")]
        period: Periodicity,
    },
}

fn default_low() -> f64 {
    1.0
}
fn default_high() -> f64 {
    4.0
}
fn default_fraction() -> f64 {
    0.5
}
fn default_smoothing() -> f64 {
    0.05
}
fn default_periodicity() -> Periodicity {
    Periodicity::None
}

impl CoeffSpec {
    pub fn laminate() -> Self {
        Self::Laminate { low: 1.0, high: 4.0, fraction: 0.5, axis: 0 }
    }

    /// Looks up a preset by its short name.
    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Constant { value } if *value == 1.0)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "identity" | "constant" => Self::Constant { value: 1.0 },
            "laminate" => Self::laminate(),
            "trig" => Self::Trig,
            "checkerboard" => Self::Checkerboard { low: 1.0, high: 4.0, smoothing: 0.05 },
            other => return Err(Error::InvalidArgument(format!("unknown coefficient preset {other:?}"))),
        })
    }

    pub fn build(&self, dim: usize) -> Result<CoefficientField> {
        match self {
            Self::Constant { value } => CoefficientField::constant(DMatrix::identity(dim, dim) * *value, format!("constant({value})")),
            Self::Matrix { rows } => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::DimensionMismatch { expected: dim, got: rows.len() });
                }
                let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
                if asymmetry(&m) > 0.0 {
                    return Err(Error::Asymmetric { point: vec![], deviation: asymmetry(&m) });
                }
                CoefficientField::constant(m, "matrix")
            }
            &Self::Laminate { low, high, fraction, axis } => laminate(dim, low, high, fraction, axis),
            Self::Trig => Ok(trig(dim)),
            &Self::Checkerboard { low, high, smoothing } => checkerboard(dim, low, high, smoothing),
            Self::Expr { entries, ellipticity, period } => expression_field(dim, entries, *ellipticity, *period),
        }
    }
}

pub fn laminate(dim: usize, low: f64, high: f64, fraction: f64, axis: usize) -> Result<CoefficientField> {
    if !(low > 0.0 && high > 0.0) || !(0.0..=1.0).contains(&fraction) || axis >= dim {
        return Err(Error::InvalidArgument("laminate needs positive phases, fraction in [0,1], valid axis".into()));
    }
    let lam = low.max(high).max(1.0 / low.min(high)).max(1.0);
    Ok(CoefficientField::new(dim, lam, Periodicity::Lattice { period: 1.0 }, format!("laminate({low},{high};{fraction})"), move |x| {
        let y = x[axis] - x[axis].floor();
        let a = if y < fraction { low } else { high };
        DMatrix::identity(x.len(), x.len()) * a
    })?
    .with_diagonal(true))
}

/// `A_kk(X) = 2 + sin(2π(λ + k/4)) (1 + ½ Π_{j<d-1} cos 2πX_j) / 1.5`.
pub fn trig(dim: usize) -> CoefficientField {
    CoefficientField::new(dim, 3.0, Periodicity::Lattice { period: 1.0 }, "trig", move |x| {
        let d = x.len();
        let lam = x[d - 1];
        let envelope = 1.0 + 0.5 * x[..d - 1].iter().map(|v| (2.0 * PI * v).cos()).product::<f64>();
        DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 + (2.0 * PI * (lam + 0.25 * i as f64)).sin() * envelope / 1.5 } else { 0.0 })
    })
    .expect("valid preset")
    .with_diagonal(true)
}

/// `a(X) = exp(μ + κ Π_j tanh(sin(2πX_j)/δ))`, `μ = ln √(low·high)`, `κ = ln √(high/low)`.
pub fn checkerboard(dim: usize, low: f64, high: f64, smoothing: f64) -> Result<CoefficientField> {
    if !(low > 0.0 && high > 0.0 && smoothing > 0.0) {
        return Err(Error::InvalidArgument("checkerboard needs positive phases and smoothing".into()));
    }
    let mu = 0.5 * (low * high).ln();
    let kappa = 0.5 * (high / low).ln();
    let lam = low.max(high).max(1.0 / low.min(high)).max(1.0);
    Ok(CoefficientField::new(
        dim,
        lam,
        Periodicity::Lattice { period: 1.0 },
        format!("checkerboard({low},{high};{smoothing})"),
        move |x| {
            let s: f64 = x.iter().map(|v| ((2.0 * PI * v).sin() / smoothing).tanh()).product();
            DMatrix::identity(x.len(), x.len()) * (mu + kappa * s).exp()
        },
    )?
    .with_diagonal(true))
}

fn expression_field(dim: usize, entries: &[Vec<Expr>], ellipticity: f64, period: Periodicity) -> Result<CoefficientField> {
    if entries.len() != dim || entries.iter().any(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: entries.len() });
    }
    let exprs: Vec<Vec<Expr>> = entries.to_vec();
    let diagonal = (0..dim).all(|i| {
        (0..dim).all(|j| {
            i == j || {
                let s = exprs[i.min(j)][i.max(j)].source().trim().to_string();
                s == "0" || s == "0.0"
            }
        })
    });
    Ok(CoefficientField::new(dim, ellipticity, period, "expr", move |x| {
        DMatrix::from_fn(x.len(), x.len(), |i, j| exprs[i.min(j)][i.max(j)].eval(x, 0.0))
    })?
    .with_diagonal(diagonal))
}

/// Arithmetic cell average `⟨A⟩` and harmonic average `⟨A⁻¹⟩⁻¹` by the
/// midpoint rule on an `n^d` grid over the unit cell.
pub fn cell_means(a: &CoefficientField, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = a.dim;
    let total = n.pow(d as u32);
    let mut arith = DMatrix::zeros(d, d);
    let mut harm = DMatrix::zeros(d, d);
    let mut x = vec![0.0; d];
    for idx in 0..total {
        let mut rem = idx;
        for xk in x.iter_mut() {
            *xk = ((rem % n) as f64 + 0.5) / n as f64;
            rem /= n;
        }
        let m = a.eval(&x);
        harm += m.clone().try_inverse().expect("elliptic matrix is invertible");
        arith += m;
    }
    arith /= total as f64;
    harm /= total as f64;
    (arith, harm.try_inverse().expect("mean of SPD inverses is SPD"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_field(dim: usize, lam: f64, period: Periodicity, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> CoefficientField {
        CoefficientField::new(dim, lam, period, "test", move |x| DMatrix::identity(x.len(), x.len()) * f(x)).unwrap()
    }

    #[test]
    fn ellipticity_of_simple_fields() {
        let r = check_ellipticity(&CoefficientField::identity(2), 10, 1).unwrap();
        assert_eq!((r.min_eig, r.max_eig, r.pass), (1.0, 1.0, true));

        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 3.0]));
        let a = CoefficientField::constant(m, "diag").unwrap();
        assert_eq!(a.ellipticity(), 3.0);
        let r = check_ellipticity(&a, 10, 1).unwrap();
        assert!((r.min_eig - 0.5).abs() < 1e-15 && (r.max_eig - 3.0).abs() < 1e-15 && r.pass);
        let r = check_ellipticity(&a.with_ellipticity(2.0), 10, 1).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn asymmetric_sample_is_a_hard_error() {
        let a = CoefficientField::new(2, 2.0, Periodicity::None, "bad", |_| DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0])).unwrap();
        assert!(matches!(check_ellipticity(&a, 3, 0), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn presets_are_elliptic() {
        for name in ["identity", "laminate", "trig", "checkerboard"] {
            for dim in [2, 3] {
                let a = CoeffSpec::preset(name).unwrap().build(dim).unwrap();
                let r = check_ellipticity(&a, 2000, 7).unwrap();
                assert!(r.pass, "{name} d={dim}: {r:?}");
                assert!(check_periodicity(&a, 500, 3).unwrap() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn periodicity_detects_wrong_period() {
        let good = scalar_field(2, 3.0, Periodicity::Axis { period: 1.0 }, |x| 2.0 + (2.0 * PI * x[1]).sin());
        assert!(check_periodicity(&good, 1000, 0).unwrap() <= 1e-12);
        let bad = scalar_field(2, 3.0, Periodicity::Axis { period: 1.0 }, |x| 2.0 + (3.0 * x[1]).sin());
        assert!(check_periodicity(&bad, 1000, 0).unwrap() > 0.01);
        let none = scalar_field(2, 3.0, Periodicity::None, |_| 1.0);
        assert!(check_periodicity(&none, 10, 0).is_err());
    }

    #[test]
    fn dini_modulus_of_constant_is_zero() {
        let m = dini_modulus(&CoefficientField::identity(2), DiniKind::Axis, &default_rho_grid(), 200).unwrap();
        assert!(m.samples.iter().all(|&(_, t)| t == 0.0));
        let i = m.integral(2f64.powi(-20)).unwrap();
        assert_eq!(i.value, 0.0);
    }

    #[test]
    fn dini_modulus_of_sine_obeys_mean_value_bounds() {
        let a = scalar_field(2, 3.0, Periodicity::Axis { period: 1.0 }, |x| 2.0 + (2.0 * PI * x[1]).sin());
        let m = dini_modulus(&a, DiniKind::Axis, &default_rho_grid(), 2000).unwrap();
        for w in m.samples.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
        for &(rho, theta) in &m.samples {
            assert!(theta <= (2.0f64).min(2.0 * PI * rho) + 1e-12, "rho={rho} theta={theta}");
            if rho <= 0.1 {
                assert!(theta >= 1.9 * rho, "rho={rho} theta={theta}");
            }
        }
    }

    #[test]
    fn dini_modulus_sees_jumps_at_every_scale() {
        let a = scalar_field(2, 3.0, Periodicity::Axis { period: 1.0 }, |x| if x[1] - x[1].floor() < 0.5 { 1.0 } else { 3.0 });
        let m = dini_modulus(&a, DiniKind::Axis, &default_rho_grid(), 500).unwrap();
        assert!(m.samples.iter().all(|&(_, t)| t >= 2.0), "{:?}", &m.samples[..4]);
        // divergence shows in the tail indicator
        let fine = m.integral(2f64.powi(-20)).unwrap();
        let coarse = m.integral(2f64.powi(-10)).unwrap();
        assert!(fine.value > 1.9 * coarse.value);
    }

    #[test]
    fn dini_integral_quadrature() {
        let grid = default_rho_grid();
        let linear =
            DiniModulus { kind: DiniKind::Axis, samples: grid.iter().map(|&r| (r, r)).collect(), half_width: vec![0.0; grid.len()] };
        for k in [20, 10, 4] {
            let rmin = 2f64.powi(-k);
            let v = linear.integral(rmin).unwrap().value;
            assert!((v - 0.5 * (1.0 - rmin * rmin)).abs() < 1e-6, "k={k} v={v}");
        }
        let c = 0.7;
        let flat = DiniModulus { kind: DiniKind::Axis, samples: grid.iter().map(|&r| (r, c)).collect(), half_width: vec![0.0; grid.len()] };
        for k in [5, 10, 20] {
            let rmin = 2f64.powi(-k);
            let v = flat.integral(rmin).unwrap().value;
            let exact = c * c * (1.0 / rmin).ln();
            assert!((v / exact - 1.0).abs() < 0.01, "k={k} {v} vs {exact}");
        }
        assert!(flat.integral(1e-9).is_err());
    }

    #[test]
    fn lipschitz_fields_have_bounded_dini_integral() {
        // |∂λ a| ≤ L = 0.5 ⇒ θ(ρ) ≤ Lρ ⇒ ∫ θ²/ρ ≤ L²/2
        let a = scalar_field(2, 2.0, Periodicity::Axis { period: 2.0 * PI }, |x| 1.5 + 0.5 * x[1].sin());
        let m = dini_modulus(&a, DiniKind::Axis, &default_rho_grid(), 500).unwrap();
        for k in [4, 12, 20] {
            let v = m.integral(2f64.powi(-k)).unwrap().value;
            assert!(v <= 0.125 + 1e-3, "{v}");
        }
    }

    #[test]
    fn scaling_composes_and_inverts() {
        let a = trig(2);
        let one = scale_field(&a, 1.0).unwrap();
        let ab = scale_field(&scale_field(&a, 0.5).unwrap(), 0.25).unwrap();
        let direct = scale_field(&a, 0.125).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x = vec![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
            assert_eq!(one.eval(&x), a.eval(&x));
            assert!((ab.eval(&x) - direct.eval(&x)).amax() <= 1e-14);
            let scaled = scale_field(&a, 0.25).unwrap();
            let y: Vec<f64> = x.iter().map(|v| 0.25 * v).collect();
            assert_eq!(scaled.eval(&y), a.eval(&x));
        }
        let quarter = scale_field(&a, 0.25).unwrap();
        assert_eq!(quarter.period(), Periodicity::Lattice { period: 0.25 });
        assert!(check_periodicity(&quarter, 500, 1).unwrap() < 1e-12);
        assert!(scale_field(&a, 0.0).is_err());
        assert!(scale_field(&a, -1.0).is_err());
    }

    #[test]
    fn cell_means_of_laminate() {
        let a = laminate(2, 1.0, 4.0, 0.5, 0).unwrap();
        let (arith, harm) = cell_means(&a, 16);
        assert!((arith[(0, 0)] - 2.5).abs() < 1e-14);
        assert!((harm[(0, 0)] - 1.6).abs() < 1e-14);
    }

    #[test]
    fn expression_spec_round_trip() {
        let json =
            r#"{"kind":"expr","entries":[["2 + sin(2*pi*lambda)","0"],["0","2"]],"ellipticity":3,"period":{"kind":"axis","period":1}}"#;
        let spec: CoeffSpec = serde_json::from_str(json).unwrap();
        let a = spec.build(2).unwrap();
        assert!(a.is_diagonal());
        assert!((a.eval(&[0.3, 0.25])[(0, 0)] - 3.0).abs() < 1e-15);
        assert!(check_periodicity(&a, 100, 0).unwrap() < 1e-12);
        let back: CoeffSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
