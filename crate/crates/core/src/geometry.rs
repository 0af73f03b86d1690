//! Parabolic norms and distances, cubes and cones, Lipschitz graph domains
//! and the flattening map `(x, λ) ↦ (x, λ − φ(x))`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coeffs::{CoefficientField, Periodicity};
use crate::error::{Error, Result};
use crate::expr::Expr;

/// Constant in `d(p, r) ≤ C (d(p, q) + d(q, r))`.
pub const QUASI_METRIC_CONSTANT: f64 = 2.0;

/// Unique `ρ ≥ 0` with `t²/ρ⁴ + |X|²/ρ² = 1`.
pub fn parabolic_norm(x: &[f64], t: f64) -> f64 {
    let s: f64 = x.iter().map(|v| v * v).sum();
    // hypot avoids overflow of |X|⁴ and keeps the t = 0 case exact
    (0.5 * (s + s.hypot(2.0 * t))).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParabolicPoint {
    pub x: Vec<f64>,
    pub t: f64,
}

impl ParabolicPoint {
    pub fn new(x: Vec<f64>, t: f64) -> Self {
        Self { x, t }
    }
}

pub fn parabolic_distance(p: &ParabolicPoint, q: &ParabolicPoint) -> Result<f64> {
    if p.x.len() != q.x.len() {
        return Err(Error::DimensionMismatch { expected: p.x.len(), got: q.x.len() });
    }
    let diff: Vec<f64> = p.x.iter().zip(&q.x).map(|(a, b)| a - b).collect();
    Ok(parabolic_norm(&diff, p.t - q.t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CubeKind {
    /// `Q_r(x, t) ⊂ ℝ^n × ℝ` on the boundary.
    Boundary,
    /// `Q̃_r(X, t) ⊂ ℝ^d × ℝ`.
    Interior,
    /// `T_r(x, t) = Q_r(x, t) × (0, r)` above a flat boundary.
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParabolicCube {
    pub center: Vec<f64>,
    pub t: f64,
    pub r: f64,
    pub kind: CubeKind,
}

impl ParabolicCube {
    pub fn new(center: Vec<f64>, t: f64, r: f64, kind: CubeKind) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidArgument(format!("cube side must be positive, got {r}")));
        }
        Ok(Self { center, t, r, kind })
    }

    pub fn boundary(center: Vec<f64>, t: f64, r: f64) -> Result<Self> {
        Self::new(center, t, r, CubeKind::Boundary)
    }

    /// Lebesgue measure in its own ambient space.
    pub fn measure(&self) -> f64 {
        let k = self.center.len() as i32;
        let base = (2.0 * self.r).powi(k) * 2.0 * self.r * self.r;
        match self.kind {
            CubeKind::Boundary | CubeKind::Interior => base,
            CubeKind::Box => base * self.r,
        }
    }

    /// Same center, side multiplied by `k`.
    pub fn dilate(&self, k: f64) -> Self {
        Self { r: self.r * k, ..self.clone() }
    }

    pub fn t_range(&self) -> (f64, f64) {
        (self.t - self.r * self.r, self.t + self.r * self.r)
    }

    pub fn x_range(&self, axis: usize) -> (f64, f64) {
        (self.center[axis] - self.r, self.center[axis] + self.r)
    }

    /// Membership of `(x, t)`, or `(x, t, λ)` for boxes.
    pub fn contains(&self, x: &[f64], t: f64, lambda: Option<f64>) -> bool {
        let spatial = x.iter().zip(&self.center).all(|(a, c)| (a - c).abs() < self.r);
        let temporal = (t - self.t).abs() < self.r * self.r;
        let vertical = match (self.kind, lambda) {
            (CubeKind::Box, Some(l)) => l > 0.0 && l < self.r,
            (CubeKind::Box, None) => false,
            _ => true,
        };
        spatial && temporal && vertical
    }
}

/// `Γ^η(x₀, t₀) = {(x, t, λ) : ‖(x − x₀, t − t₀)‖ < ηλ}` over a flat boundary,
/// optionally truncated to heights `λ < ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub vertex: Vec<f64>,
    pub t: f64,
    pub eta: f64,
    pub truncation: Option<f64>,
}

impl Cone {
    pub fn new(vertex: Vec<f64>, t: f64, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::InvalidArgument(format!("cone opening must be positive, got {eta}")));
        }
        Ok(Self { vertex, t, eta, truncation: None })
    }

    pub fn truncated(mut self, rho: f64) -> Self {
        self.truncation = Some(rho);
        self
    }

    /// `λ` is the height above the vertex.
    pub fn contains(&self, x: &[f64], t: f64, lambda: f64) -> bool {
        if lambda <= 0.0 || self.truncation.is_some_and(|r| lambda >= r) {
            return false;
        }
        let diff: Vec<f64> = x.iter().zip(&self.vertex).map(|(a, b)| a - b).collect();
        parabolic_norm(&diff, t - self.t) < self.eta * lambda
    }
}

pub fn cone_contains(c: &Cone, x: &[f64], t: f64, lambda: f64) -> bool {
    c.contains(x, t, lambda)
}

/// Graph function `φ: ℝ^n → ℝ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phi {
    ClosedForm {
        expr: Expr,
    },
    /// Node values on a tensor grid, axis 0 fastest; multilinear in between and
    /// constant beyond the last node.
    Table {
        lower: Vec<f64>,
        spacing: Vec<f64>,
        shape: Vec<usize>,
        values: Vec<f64>,
    },
}

const GRADIENT_STEP: f64 = 1e-6;

impl Phi {
    pub fn zero() -> Self {
        Self::ClosedForm { expr: Expr::parse("0").expect("literal") }
    }

    pub fn closed_form(src: &str) -> Result<Self> {
        Ok(Self::ClosedForm { expr: Expr::parse(src)? })
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::ClosedForm { expr } => matches!(expr.source().trim(), "0" | "0.0"),
            Self::Table { values, .. } => values.iter().all(|&v| v == 0.0),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::ClosedForm { expr } => {
                // φ depends on x only; a reference to λ would address x_n+1
                if expr.min_dim() > n {
                    return Err(Error::InvalidArgument(format!("graph function {:?} uses coordinates beyond x{n}", expr.source())));
                }
            }
            Self::Table { lower, spacing, shape, values } => {
                if lower.len() != n || spacing.len() != n || shape.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: shape.len() });
                }
                if shape.iter().any(|&s| s < 2) || spacing.iter().any(|&h| !(h > 0.0)) {
                    return Err(Error::InvalidArgument("table needs >= 2 nodes and positive spacing per axis".into()));
                }
                if values.len() != shape.iter().product::<usize>() {
                    return Err(Error::InvalidArgument("table value count does not match its shape".into()));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Self::ClosedForm { expr } => expr.eval(x, 0.0),
            Self::Table { .. } => self.interpolate(x, |idx| self.node_value(idx)),
        }
    }

    /// `∇φ(x)`: central differences for closed forms; for tables, node
    /// gradients by central differences (one-sided at the edges) interpolated
    /// multilinearly.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::ClosedForm { expr } => {
                let mut y = x.to_vec();
                (0..x.len())
                    .map(|k| {
                        let h = GRADIENT_STEP * x[k].abs().max(1.0);
                        y[k] = x[k] + h;
                        let up = expr.eval(&y, 0.0);
                        y[k] = x[k] - h;
                        let down = expr.eval(&y, 0.0);
                        y[k] = x[k];
                        (up - down) / (2.0 * h)
                    })
                    .collect()
            }
            Self::Table { .. } => (0..x.len()).map(|k| self.interpolate(x, |idx| self.node_derivative(idx, k))).collect(),
        }
    }

    fn table(&self) -> (&[f64], &[f64], &[usize], &[f64]) {
        match self {
            Self::Table { lower, spacing, shape, values } => (lower, spacing, shape, values),
            Self::ClosedForm { .. } => unreachable!("table accessor on closed form"),
        }
    }

    fn node_value(&self, idx: &[usize]) -> f64 {
        let (_, _, shape, values) = self.table();
        let mut lin = 0;
        for k in (0..idx.len()).rev() {
            lin = lin * shape[k] + idx[k];
        }
        values[lin]
    }

    fn node_derivative(&self, idx: &[usize], axis: usize) -> f64 {
        let (_, spacing, shape, _) = self.table();
        let mut lo = idx.to_vec();
        let mut hi = idx.to_vec();
        if idx[axis] > 0 {
            lo[axis] -= 1;
        }
        if idx[axis] + 1 < shape[axis] {
            hi[axis] += 1;
        }
        let span = (hi[axis] - lo[axis]) as f64 * spacing[axis];
        (self.node_value(&hi) - self.node_value(&lo)) / span
    }

    fn interpolate(&self, x: &[f64], node: impl Fn(&[usize]) -> f64) -> f64 {
        let (lower, spacing, shape, _) = self.table();
        let n = x.len();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for k in 0..n {
            let s = ((x[k] - lower[k]) / spacing[k]).clamp(0.0, (shape[k] - 1) as f64);
            let i = (s.floor() as usize).min(shape[k] - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        let mut acc = 0.0;
        let mut idx = vec![0usize; n];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for k in 0..n {
                let bit = (corner >> k) & 1;
                idx[k] = base[k] + bit;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                acc += w * node(&idx);
            }
        }
        acc
    }
}

fn default_samples() -> usize {
    64
}

/// `D = {λ > φ(x)}` truncated to the box `x ∈ Π[a_k, b_k]`,
/// `0 < λ − φ(x) < H`.
///
/// `bounds` holds the `n` horizontal ranges followed by `[0, H]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDomain {
    pub phi: Phi,
    pub m: f64,
    #[serde(rename = "box")]
    pub bounds: Vec<[f64; 2]>,
    /// Samples per axis for the Lipschitz check of closed-form graphs.
    #[serde(default = "default_samples", skip_serializing)]
    pub lipschitz_samples: usize,
}

impl GraphDomain {
    pub fn new(phi: Phi, m: f64, bounds: Vec<[f64; 2]>) -> Result<Self> {
        let dom = Self { phi, m, bounds, lipschitz_samples: default_samples() };
        dom.validate()?;
        Ok(dom)
    }

    /// Flat boundary `λ = 0` over `[-half_width, half_width]^n`, height `h`.
    pub fn half_space(n: usize, half_width: f64, height: f64) -> Self {
        let mut bounds = vec![[-half_width, half_width]; n];
        bounds.push([0.0, height]);
        Self::new(Phi::zero(), 0.0, bounds).expect("flat domain is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let dom: Self = serde_json::from_str(s)?;
        dom.validate()?;
        Ok(dom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.len() < 2 {
            return Err(Error::InvalidArgument("box needs at least one horizontal range and a height".into()));
        }
        if self.bounds.iter().any(|b| !(b[1] > b[0])) {
            return Err(Error::InvalidArgument(format!("degenerate box {:?}", self.bounds)));
        }
        if self.bounds[self.n()][0] != 0.0 {
            return Err(Error::InvalidArgument("height range must start at 0 (flattened coordinates)".into()));
        }
        if !(self.m >= 0.0) {
            return Err(Error::InvalidArgument(format!("Lipschitz constant must be >= 0, got {}", self.m)));
        }
        self.phi.validate(self.n())?;
        self.check_lipschitz()
    }

    pub fn n(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn height(&self) -> f64 {
        self.bounds[self.n()][1]
    }

    /// Default cone opening `2m` (or 1 for a flat boundary).
    pub fn default_eta(&self) -> f64 {
        if self.m > 0.0 {
            2.0 * self.m
        } else {
            1.0
        }
    }

    /// Checks `|φ(x) − φ(y)| ≤ m|x − y|` over all vertex pairs of every cell
    /// of the sampling grid (the table nodes, or a uniform grid on the box).
    pub fn check_lipschitz(&self) -> Result<()> {
        let n = self.n();
        let (lower, spacing, shape): (Vec<f64>, Vec<f64>, Vec<usize>) = match &self.phi {
            Phi::Table { lower, spacing, shape, .. } => (lower.clone(), spacing.clone(), shape.clone()),
            Phi::ClosedForm { .. } => {
                let s = self.lipschitz_samples.max(2);
                (
                    self.bounds[..n].iter().map(|b| b[0]).collect(),
                    self.bounds[..n].iter().map(|b| (b[1] - b[0]) / (s - 1) as f64).collect(),
                    vec![s; n],
                )
            }
        };
        let cells: usize = shape.iter().map(|s| s - 1).product();
        let corners = 1usize << n;
        let mut pts = vec![vec![0.0; n]; corners];
        let mut vals = vec![0.0; corners];
        for c in 0..cells {
            let mut rem = c;
            let mut base = vec![0usize; n];
            for k in 0..n {
                base[k] = rem % (shape[k] - 1);
                rem /= shape[k] - 1;
            }
            for corner in 0..corners {
                for k in 0..n {
                    pts[corner][k] = lower[k] + (base[k] + ((corner >> k) & 1)) as f64 * spacing[k];
                }
                vals[corner] = self.phi.eval(&pts[corner]);
            }
            for i in 0..corners {
                for j in (i + 1)..corners {
                    let dist = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let slope = (vals[i] - vals[j]).abs() / dist;
                    if slope > self.m * (1.0 + 1e-9) + 1e-12 {
                        return Err(Error::NotLipschitz { x: pts[i].clone(), y: pts[j].clone(), slope, m: self.m });
                    }
                }
            }
        }
        Ok(())
    }

    /// Declared ellipticity constant of a pulled-back field: `Λ` times the
    /// largest eigenvalue of `J Jᵀ` for `|∇φ| ≤ m`.
    pub fn flattened_ellipticity(&self, lambda: f64) -> f64 {
        let m = self.m;
        lambda * (1.0 + 0.5 * m * m + m * (1.0 + 0.25 * m * m).sqrt())
    }

    /// Height of `(x, λ)` above the vertex level `φ(x₀)`, given flattened `λ'`.
    pub fn height_above(&self, x0: &[f64], x: &[f64], flat_lambda: f64) -> f64 {
        flat_lambda + self.phi.eval(x) - self.phi.eval(x0)
    }
}

/// Pulls `A` back to the flattened domain:
/// `Ã(x, λ') = J A(x, λ' + φ(x)) Jᵀ` with `J = [[I, 0], [−∇φᵀ, 1]]`.
pub fn flatten_pullback(dom: &GraphDomain, a: &CoefficientField) -> Result<CoefficientField> {
    if a.dim() != dom.dim() {
        return Err(Error::DimensionMismatch { expected: dom.dim(), got: a.dim() });
    }
    dom.check_lipschitz()?;
    if dom.phi.is_zero() {
        return Ok(a.clone());
    }
    let phi = dom.phi.clone();
    let n = dom.n();
    let period = match a.period() {
        Periodicity::None => Periodicity::None,
        Periodicity::Axis { period } | Periodicity::Lattice { period } => Periodicity::Axis { period },
    };
    let lam = dom.flattened_ellipticity(a.ellipticity());
    let label = format!("{}∘flatten[{}]", a.label(), phi_label(&dom.phi));
    let out = a.map_eval(label, move |x, inner| {
        let d = x.len();
        let mut y = x.to_vec();
        y[n] = x[n] + phi.eval(&x[..n]);
        let g = phi.gradient(&x[..n]);
        let mut j = DMatrix::identity(d, d);
        for k in 0..n {
            j[(n, k)] = -g[k];
        }
        let m = &j * inner(&y) * j.transpose();
        // symmetrize away rounding
        (&m + m.transpose()) * 0.5
    });
    Ok(out.with_period(period).with_ellipticity(lam).with_diagonal(false))
}

fn phi_label(phi: &Phi) -> String {
    match phi {
        Phi::ClosedForm { expr } => expr.source().to_string(),
        Phi::Table { shape, .. } => format!("table{shape:?}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMeasure {
    pub value: f64,
    pub empty: bool,
}

/// `σ(Q_r ∩ ∂D)`: midpoint quadrature of `√(1 + |∇φ|²)` over the horizontal
/// part of the cube clipped to the box, times the time length `2r²`.
pub fn boundary_measure(dom: &GraphDomain, region: &ParabolicCube, cells_per_side: usize) -> Result<BoundaryMeasure> {
    let n = dom.n();
    if region.kind != CubeKind::Boundary || region.center.len() != n {
        return Err(Error::InvalidArgument("boundary measure needs a boundary cube in ℝ^n × ℝ".into()));
    }
    let ranges: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let (lo, hi) = region.x_range(k);
            (lo.max(dom.bounds[k][0]), hi.min(dom.bounds[k][1]))
        })
        .collect();
    if ranges.iter().any(|(lo, hi)| hi <= lo) {
        return Ok(BoundaryMeasure { value: 0.0, empty: true });
    }
    let s = cells_per_side.max(1);
    let widths: Vec<f64> = ranges.iter().map(|(lo, hi)| (hi - lo) / s as f64).collect();
    let cell_area: f64 = widths.iter().product();
    let mut x = vec![0.0; n];
    let mut total = 0.0;
    for c in 0..s.pow(n as u32) {
        let mut rem = c;
        for k in 0..n {
            x[k] = ranges[k].0 + ((rem % s) as f64 + 0.5) * widths[k];
            rem /= s;
        }
        let g2: f64 = dom.phi.gradient(&x).iter().map(|v| v * v).sum();
        total += (1.0 + g2).sqrt();
    }
    Ok(BoundaryMeasure { value: total * cell_area * 2.0 * region.r * region.r, empty: false })
}

/// Bounded cylinder `Ω × (0, T)` with
/// `Ω = {x ∈ Π(a_k, b_k), φ(x) < λ < φ(x) + H}`: a box sheared by a
/// Lipschitz graph. Data live on the whole lateral boundary `∂Ω × (0, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCylinder {
    #[serde(flatten)]
    pub base: GraphDomain,
    pub t_final: f64,
}

impl LipschitzCylinder {
    pub fn new(base: GraphDomain, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(Error::InvalidArgument(format!("final time must be positive, got {t_final}")));
        }
        Ok(Self { base, t_final })
    }

    /// `(0, side)^d × (0, T)` with flat bottom.
    pub fn unit_box(d: usize, side: f64, t_final: f64) -> Self {
        let bounds = vec![[0.0, side]; d];
        let mut base = GraphDomain::new(Phi::zero(), 0.0, bounds).expect("box is valid");
        base.bounds[d - 1] = [0.0, side];
        Self { base, t_final }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.base.validate()?;
        Self::new(c.base, c.t_final)
    }

    /// Membership of a physical point `X` in `Ω`.
    pub fn contains(&self, x: &[f64]) -> bool {
        let n = self.base.n();
        if (0..n).any(|k| !(x[k] > self.base.bounds[k][0] && x[k] < self.base.bounds[k][1])) {
            return false;
        }
        let f = self.base.phi.eval(&x[..n]);
        x[n] > f && x[n] < f + self.base.height()
    }

    /// Checks the `(m, r₀)` chart property at sampled boundary points: in some
    /// direction `ν` from a fixed finite set, `Ω` near `X₀` is the region
    /// above a graph with slope at most `m_chart` over a disc of radius `r₀`.
    pub fn chart_check(&self, m_chart: f64, r0: f64, points_per_face: usize) -> Result<ChartReport> {
        let d = self.base.dim();
        if d != 2 && d != 3 {
            return Err(Error::InvalidArgument(format!("chart check supports d = 2, 3 (got {d})")));
        }
        let dirs = chart_directions(d);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for x0 in self.boundary_samples(points_per_face) {
            let best = dirs.iter().filter_map(|nu| self.chart_slope(&x0, nu, m_chart, r0)).fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
            checked += 1;
        }
        Ok(ChartReport { points_checked: checked, worst_slope: worst, pass: worst <= m_chart })
    }

    fn boundary_samples(&self, per_face: usize) -> Vec<Vec<f64>> {
        let n = self.base.n();
        let d = n + 1;
        let h = self.base.height();
        let k = per_face.max(2);
        let mut out = Vec::new();
        let lerp = |b: [f64; 2], s: f64| b[0] + s * (b[1] - b[0]);
        // grid of parameters in the flattened box, one face at a time
        for face in 0..(2 * d) {
            let axis = face / 2;
            let side = (face % 2) as f64;
            let free: Vec<usize> = (0..d).filter(|&a| a != axis).collect();
            for idx in 0..k.pow(free.len() as u32) {
                let mut p = vec![0.0; d];
                let mut rem = idx;
                for &a in &free {
                    let s = (rem % k) as f64 / (k - 1) as f64;
                    rem /= k;
                    p[a] = if a == n { s * h } else { lerp(self.base.bounds[a], s) };
                }
                p[axis] = if axis == n { side * h } else { lerp(self.base.bounds[axis], side) };
                p[n] += self.base.phi.eval(&p[..n]);
                out.push(p);
            }
        }
        out
    }

    /// Largest observed slope of the boundary over the chart disc in direction
    /// `nu`, or `None` if `Ω` is not of the form `{h > ψ(s)}` there.
    fn chart_slope(&self, x0: &[f64], nu: &[f64], m_chart: f64, r0: f64) -> Option<f64> {
        let d = x0.len();
        let basis = orthonormal_complement(nu);
        let ns = 12usize;
        let nh = 96usize;
        let hmax = m_chart.max(1e-3) * r0;
        let mut psi: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut offsets = vec![0.0; d - 1];
        for idx in 0..(ns + 1).pow((d - 1) as u32) {
            let mut rem = idx;
            for o in offsets.iter_mut() {
                *o = r0 * (0.98 * (2.0 * (rem % (ns + 1)) as f64 / ns as f64 - 1.0));
                rem /= ns + 1;
            }
            if offsets.iter().map(|v| v * v).sum::<f64>().sqrt() >= r0 {
                continue;
            }
            let mut transition = None;
            let mut prev_inside = None;
            for j in 0..=nh {
                let hh = -hmax + 2.0 * hmax * j as f64 / nh as f64;
                let mut y = x0.to_vec();
                for (b, o) in basis.iter().zip(&offsets) {
                    for k in 0..d {
                        y[k] += o * b[k];
                    }
                }
                for k in 0..d {
                    y[k] += hh * nu[k];
                }
                let inside = self.contains(&y);
                match prev_inside {
                    Some(false) if inside => {
                        if transition.is_some() {
                            return None;
                        }
                        transition = Some(hh);
                    }
                    Some(true) if !inside => return None,
                    None if inside => transition = Some(-hmax),
                    _ => {}
                }
                prev_inside = Some(inside);
            }
            psi.push((offsets.clone(), transition?));
        }
        let dh = 2.0 * hmax / nh as f64;
        let mut slope: f64 = 0.0;
        for i in 0..psi.len() {
            for j in (i + 1)..psi.len() {
                let dist = psi[i].0.iter().zip(&psi[j].0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                // resolution slack of one vertical sample
                let gap = ((psi[i].1 - psi[j].1).abs() - dh).max(0.0);
                slope = slope.max(gap / dist);
            }
        }
        Some(slope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartReport {
    pub points_checked: usize,
    pub worst_slope: f64,
    pub pass: bool,
}

fn chart_directions(d: usize) -> Vec<Vec<f64>> {
    if d == 2 {
        return (0..64)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 32.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
    }
    let mut out = Vec::new();
    for code in 0..3usize.pow(d as u32) {
        let mut v = vec![0.0; d];
        let mut rem = code;
        for vk in v.iter_mut() {
            *vk = (rem % 3) as f64 - 1.0;
            rem /= 3;
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            out.push(v.iter().map(|a| a / n).collect());
        }
    }
    out
}

fn orthonormal_complement(nu: &[f64]) -> Vec<Vec<f64>> {
    let d = nu.len();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for k in 0..d {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        for b in std::iter::once(nu).chain(basis.iter().map(|b| b.as_slice())) {
            let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for i in 0..d {
                v[i] -= p * b[i];
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.iter().map(|a| a / n).collect());
        }
        if basis.len() == d - 1 {
            break;
        }
    }
    basis
}

/// Computational domain description as read from config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    HalfSpace(GraphDomain),
    Cylinder(LipschitzCylinder),
}

impl DomainSpec {
    pub fn graph(&self) -> &GraphDomain {
        match self {
            Self::HalfSpace(g) => g,
            Self::Cylinder(c) => &c.base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::HalfSpace(g) => g.validate(),
            Self::Cylinder(c) => {
                c.base.validate()?;
                LipschitzCylinder::new(c.base.clone(), c.t_final).map(|_| ())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{check_ellipticity, sym_eigen_range, trig};

    fn bisection_norm(x: &[f64], t: f64) -> f64 {
        let s: f64 = x.iter().map(|v| v * v).sum();
        let f = |r: f64| t * t / r.powi(4) + s / (r * r) - 1.0;
        let (mut lo, mut hi) = (1e-300f64, 1.0f64);
        while f(hi) > 0.0 {
            hi *= 2.0;
        }
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn norm_examples() {
        assert_eq!(parabolic_norm(&[3.0, 4.0], 0.0), 5.0);
        assert_eq!(parabolic_norm(&[0.0, 0.0], 4.0), 2.0);
        assert!((parabolic_norm(&[1.0, 0.0], 2f64.sqrt()) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(parabolic_norm(&[0.0], 0.0), 0.0);
        for (x, t) in [(vec![0.3, -1.2], 0.7), (vec![5.0, 0.0, 1.0], -3.0), (vec![1e-4], 1e-9)] {
            let a = parabolic_norm(&x, t);
            let b = bisection_norm(&x, t);
            assert!((a - b).abs() <= 1e-12 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn distance_examples() {
        let o = ParabolicPoint::new(vec![0.0, 0.0], 0.0);
        assert_eq!(parabolic_distance(&o, &o).unwrap(), 0.0);
        assert_eq!(parabolic_distance(&o, &ParabolicPoint::new(vec![3.0, 4.0], 0.0)).unwrap(), 5.0);
        assert_eq!(parabolic_distance(&o, &ParabolicPoint::new(vec![0.0, 0.0], 4.0)).unwrap(), 2.0);
        assert!(parabolic_distance(&o, &ParabolicPoint::new(vec![0.0], 0.0)).is_err());
    }

    #[test]
    fn cone_examples() {
        let c1 = Cone::new(vec![0.0, 0.0], 0.0, 1.0).unwrap();
        assert!(c1.contains(&[0.0, 0.0], 0.0, 1.0));
        assert!(!c1.contains(&[2.0, 0.0], 0.0, 1.0));
        let c3 = Cone::new(vec![0.0, 0.0], 0.0, 3.0).unwrap();
        assert!(c3.contains(&[1.0, 0.0], 1.0, 1.0));
        assert!(!c3.clone().truncated(0.5).contains(&[0.0, 0.0], 0.0, 1.0));
        assert!(Cone::new(vec![0.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn cube_measures() {
        let q = ParabolicCube::boundary(vec![0.0], 0.0, 0.5).unwrap();
        assert_eq!(q.measure(), 1.0 * 0.5);
        let b = ParabolicCube::new(vec![0.0], 0.0, 0.5, CubeKind::Box).unwrap();
        assert_eq!(b.measure(), 0.25);
        assert!(b.contains(&[0.1], 0.2, Some(0.3)));
        assert!(!b.contains(&[0.1], 0.2, Some(0.6)));
        assert!(ParabolicCube::boundary(vec![0.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn flatten_identity_for_flat_graph() {
        let dom = GraphDomain::half_space(1, 4.0, 4.0);
        let a = trig(2);
        let b = flatten_pullback(&dom, &a).unwrap();
        for x in [[0.1, 0.2], [-3.0, 1.7], [2.5, 0.01]] {
            assert_eq!(a.eval(&x), b.eval(&x));
        }
    }

    #[test]
    fn flatten_linear_graph() {
        let dom = GraphDomain::new(Phi::closed_form("x/2").unwrap(), 0.5, vec![[-2.0, 2.0], [0.0, 1.0]]).unwrap();
        let at = flatten_pullback(&dom, &CoefficientField::identity(2)).unwrap();
        let m = at.eval(&[0.3, 0.4]);
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.25]);
        assert!((m - expect).amax() < 1e-9);
        assert!(check_ellipticity(&at, 200, 1).unwrap().pass);
    }

    #[test]
    fn flatten_ellipticity_bound_on_random_graphs() {
        for (src, m) in [("0.8*sin(x)", 0.8), ("abs(x) - 0.3*x", 1.3), ("2*tanh(x)", 2.0)] {
            let dom = GraphDomain::new(Phi::closed_form(src).unwrap(), m, vec![[-3.0, 3.0], [0.0, 1.0]]).unwrap();
            let at = flatten_pullback(&dom, &trig(2)).unwrap();
            let bound = (1.0 / 3.0) / (1.0 + m * m + m * (2.0 + m * m).sqrt());
            for k in 0..200 {
                let x = [-3.0 + 6.0 * k as f64 / 199.0, 0.37 * k as f64];
                let (lo, hi) = sym_eigen_range(&at.eval(&x));
                assert!(lo >= bound, "{src}: {lo} < {bound}");
                assert!(hi <= at.ellipticity() + 1e-9 && 1.0 / lo <= at.ellipticity() + 1e-9);
                assert!(at.ellipticity() <= 3.0 * (1.0 + m).powi(2));
            }
        }
    }

    #[test]
    fn lipschitz_violation_is_reported() {
        let err = GraphDomain::new(Phi::closed_form("2*x").unwrap(), 1.0, vec![[-1.0, 1.0], [0.0, 1.0]]);
        assert!(matches!(err, Err(Error::NotLipschitz { .. })));
        let table = Phi::Table { lower: vec![0.0], spacing: vec![0.5], shape: vec![3], values: vec![0.0, 0.5, 0.0] };
        assert!(GraphDomain::new(table.clone(), 1.0, vec![[0.0, 1.0], [0.0, 1.0]]).is_ok());
        assert!(GraphDomain::new(table, 0.9, vec![[0.0, 1.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn table_interpolation_and_gradient() {
        let table = Phi::Table { lower: vec![0.0], spacing: vec![1.0], shape: vec![3], values: vec![0.0, 1.0, 4.0] };
        assert_eq!(table.eval(&[0.5]), 0.5);
        assert_eq!(table.eval(&[5.0]), 4.0);
        // node gradients: one-sided 1, central 2, one-sided 3
        assert_eq!(table.gradient(&[0.0]), vec![1.0]);
        assert_eq!(table.gradient(&[1.0]), vec![2.0]);
        assert_eq!(table.gradient(&[1.5]), vec![2.5]);
        assert_eq!(table.gradient(&[2.0]), vec![3.0]);
        let t2 = Phi::Table { lower: vec![0.0, 0.0], spacing: vec![1.0, 1.0], shape: vec![2, 2], values: vec![0.0, 1.0, 2.0, 3.0] };
        assert!((t2.eval(&[0.5, 0.5]) - 1.5).abs() < 1e-15);
        assert_eq!(t2.gradient(&[0.25, 0.75]), vec![1.0, 2.0]);
    }

    #[test]
    fn boundary_measure_examples() {
        let flat = GraphDomain::half_space(1, 4.0, 1.0);
        let q = ParabolicCube::boundary(vec![0.0], 0.0, 0.5).unwrap();
        let v = boundary_measure(&flat, &q, 16).unwrap();
        assert!((v.value - 1.0 * 0.5).abs() < 1e-15 && !v.empty);
        let slope = GraphDomain::new(Phi::closed_form("x").unwrap(), 1.0, vec![[-4.0, 4.0], [0.0, 1.0]]).unwrap();
        let v = boundary_measure(&slope, &q, 16).unwrap();
        assert!((v.value - 2f64.sqrt() * 0.5).abs() < 1e-9);
        let far = ParabolicCube::boundary(vec![10.0], 0.0, 0.5).unwrap();
        assert!(boundary_measure(&flat, &far, 4).unwrap().empty);

        // midpoint rule converges at second order for smooth φ
        let wavy = GraphDomain::new(Phi::closed_form("0.5*sin(2*x)").unwrap(), 1.0, vec![[-4.0, 4.0], [0.0, 1.0]]).unwrap();
        let q = ParabolicCube::boundary(vec![0.3], 0.0, 1.0).unwrap();
        let m = |k| boundary_measure(&wavy, &q, k).unwrap().value;
        let (a, b, c) = (m(8), m(16), m(32));
        let ratio = (a - b) / (b - c);
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn cylinder_membership_and_charts() {
        let cyl = LipschitzCylinder::unit_box(2, 1.0, 1.0);
        assert!(cyl.contains(&[0.5, 0.5]));
        assert!(!cyl.contains(&[0.5, 1.5]));
        let rep = cyl.chart_check(1.0, 0.1, 5).unwrap();
        assert!(rep.pass, "{rep:?}");

        let json = r#"{"phi":{"kind":"closed_form","expr":"0.25*sin(2*pi*x)"},"m":1.6,"box":[[0,1],[0,1]],"t_final":0.5}"#;
        let sheared = LipschitzCylinder::from_json(json).unwrap();
        assert!(sheared.contains(&[0.25, 0.3]));
        assert!(!sheared.contains(&[0.25, 0.2]));
        let rep = sheared.chart_check(6.0, 0.05, 6).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(sheared.chart_check(0.2, 0.05, 6).unwrap().worst_slope > 0.2);
    }

    #[test]
    fn domain_spec_json() {
        let json = r#"{"kind":"half_space","phi":{"kind":"table","lower":[-1],"spacing":[1],"shape":[3],"values":[0,0.5,0]},"m":0.5,"box":[[-1,1],[0,2]]}"#;
        let spec: DomainSpec = serde_json::from_str(json).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.graph().height(), 2.0);
        let bad = r#"{"kind":"half_space","phi":{"kind":"closed_form","expr":"3*x"},"m":1,"box":[[-1,1],[0,2]]}"#;
        let spec: DomainSpec = serde_json::from_str(bad).unwrap();
        assert!(spec.validate().is_err());
    }
}
