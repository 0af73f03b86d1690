//! Non-tangential and vertical maximal functions of discrete solutions, and
//! weighted `L^p` norms on the lateral boundary.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::geometry::{parabolic_norm, DomainSpec};
use crate::pde::{level_weight, BoundaryData, DirichletSolver, InitialData, ScalarField, SpaceTimeGrid};

/// A boundary sample: face `face` of the grid at level `level`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub face: usize,
    /// Physical face center.
    pub x: Vec<f64>,
    pub t: f64,
    pub level: usize,
}

/// Values on lateral-boundary cells with their `dσ dt` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryField {
    pub points: Vec<BoundaryPoint>,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    /// Set where the cone held no grid point and the first-layer value was used.
    pub flags: Vec<bool>,
}

impl BoundaryField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// The data stored with `u` on the boundary samples of `dom`.
    pub fn trace(u: &ScalarField, dom: &DomainSpec) -> Self {
        let pts = boundary_points(u, dom);
        let values = pts.iter().map(|(p, _)| u.boundary_level(p.level)[p.face]).collect();
        let n = pts.len();
        let (points, weights) = pts.into_iter().unzip();
        Self { points, values, weights, flags: vec![false; n] }
    }

    /// CSV rows `x..., t, value, flag`.
    pub fn to_csv(&self) -> String {
        let d = self.points.first().map_or(0, |p| p.x.len());
        let mut out: Vec<String> = (0..d).map(|k| format!("x{}", k + 1)).collect();
        out.extend(["t".to_string(), "N_value".to_string(), "flag".to_string()]);
        let mut s = out.join(",") + "\n";
        for ((p, v), f) in self.points.iter().zip(&self.values).zip(&self.flags) {
            for x in &p.x {
                s.push_str(&format!("{x},"));
            }
            s.push_str(&format!("{},{v},{}\n", p.t, u8::from(*f)));
        }
        s
    }
}

/// Active boundary samples with weights: faces carrying data for `dom`
/// (the bottom for half-spaces, every face for cylinders), at every level.
fn boundary_points(u: &ScalarField, dom: &DomainSpec) -> Vec<(BoundaryPoint, f64)> {
    let g = dom.graph();
    let n = g.n();
    let grid = &u.grid;
    let faces = grid.space.boundary_faces();
    let mut out = Vec::new();
    for k in 0..u.levels() {
        let wt = level_weight(grid, k, grid.t0, grid.t1());
        for (j, f) in faces.iter().enumerate() {
            let active = match dom {
                DomainSpec::HalfSpace(_) => f.axis == n && f.side == 0,
                DomainSpec::Cylinder(_) => true,
            };
            if !active {
                continue;
            }
            let mut x = f.center.clone();
            x[n] += g.phi.eval(&x[..n]);
            let stretch = if f.axis == n {
                let grad = g.phi.gradient(&f.center[..n]);
                (1.0 + grad.iter().map(|v| v * v).sum::<f64>()).sqrt()
            } else {
                1.0
            };
            out.push((BoundaryPoint { face: j, x, t: grid.time(k), level: k }, f.area * stretch * wt));
        }
    }
    out
}

/// Geometry of one interior sample relative to a face.
struct Sample {
    value: f64,
    level: usize,
    flat: Vec<f64>,
    phys_lambda: f64,
}

/// Height of `s` above the face and its tangential offset from the vertex.
fn cone_coords(s: &Sample, axis: usize, side: u8, plane: f64, vertex: &[f64], n: usize) -> (f64, Vec<f64>) {
    let d = vertex.len();
    let mut tangent = Vec::with_capacity(d - 1);
    let height;
    if axis == n {
        // bottom (graph) or top face: vertical distance in physical height
        height = if side == 0 { s.phys_lambda - vertex[n] } else { vertex[n] - s.phys_lambda };
        tangent.extend((0..n).map(|k| s.flat[k] - vertex[k]));
    } else {
        height = if side == 0 { s.flat[axis] - plane } else { plane - s.flat[axis] };
        for k in 0..d {
            if k == axis {
                continue;
            }
            let c = if k == n { s.phys_lambda } else { s.flat[k] };
            tangent.push(c - vertex[k]);
        }
    }
    (height, tangent)
}

/// `N^η(u)` at every active boundary sample: the sup of `|u|` over grid
/// points with `‖(X_tan − P_tan, t − t₀)‖ < η·height`, height measured from
/// the face. Cylinder cones are truncated at half the smallest box width.
pub fn nontangential_max(u: &ScalarField, eta: f64, dom: &DomainSpec) -> Result<BoundaryField> {
    let g = dom.graph();
    if !(eta > g.m) {
        return Err(Error::InvalidArgument(format!("cone opening {eta} must exceed the Lipschitz constant {}", g.m)));
    }
    let truncation = match dom {
        DomainSpec::HalfSpace(_) => f64::INFINITY,
        DomainSpec::Cylinder(_) => 0.5 * g.bounds.iter().map(|b| b[1] - b[0]).fold(f64::INFINITY, f64::min),
    };
    nontangential_max_truncated(u, eta, dom, truncation)
}

/// [`nontangential_max`] with cones cut at the given height.
pub fn nontangential_max_truncated(u: &ScalarField, eta: f64, dom: &DomainSpec, truncation: f64) -> Result<BoundaryField> {
    if u.grid.space.dim() == 2 && dom.graph().phi.is_zero() {
        return Ok(flat_cone_max(u, eta, dom, truncation));
    }
    nontangential_max_scan(u, eta, dom, truncation)
}

/// Sliding maximum of `v` over `[i − half, i + half]`, clipped to the ends.
fn sliding_max(v: &[f64], half: usize, out: &mut [f64]) {
    let n = v.len();
    let mut window: VecDeque<usize> = VecDeque::new();
    let mut next = 0;
    for i in 0..n {
        let hi = (i + half).min(n - 1);
        while next <= hi {
            while window.back().is_some_and(|&b| v[b] <= v[next]) {
                window.pop_back();
            }
            window.push_back(next);
            next += 1;
        }
        while window.front().is_some_and(|&f| f + half < i) {
            window.pop_front();
        }
        out[i] = v[window[0]];
    }
}

/// Cone maxima for flat faces of a two-dimensional grid. On each row parallel
/// to a face the cone section is the parabolic ball `‖(k·Δ, δ·Δt)‖ < η·h`,
/// covered by the rectangles `|k| ≤ K, |δ| ≤ D(K)`; each rectangle max is a
/// widening in space followed by a sliding window in time.
fn flat_cone_max(u: &ScalarField, eta: f64, dom: &DomainSpec, truncation: f64) -> BoundaryField {
    let sp = &u.grid.space;
    let dt = u.grid.dt;
    let levels = u.levels();
    let faces = sp.boundary_faces();
    let pts = boundary_points(u, dom);
    let mut values = vec![0.0; pts.len()];
    let mut flags = vec![false; pts.len()];
    let mut sides: Vec<(usize, u8)> = pts.iter().map(|(p, _)| (faces[p.face].axis, faces[p.face].side)).collect();
    sides.sort_unstable();
    sides.dedup();
    for (axis, side) in sides {
        let tan = 1 - axis;
        let (rows, nt) = (sp.cells[axis], sp.cells[tan]);
        let plane = if side == 0 { sp.lower[axis] } else { sp.upper(axis) };
        let dx = sp.spacing[tan];
        let mut acc = vec![0.0f64; levels * nt];
        let mut any_row = false;
        let mut m = vec![0.0; levels * nt];
        let mut widened = vec![0.0; levels * nt];
        let mut column = vec![0.0; levels];
        let mut column_out = vec![0.0; levels];
        for j in 0..rows {
            let row = if side == 0 { j } else { rows - 1 - j };
            let h = (sp.center_coord(axis, row) - plane).abs();
            if h >= truncation {
                break;
            }
            any_row = true;
            let radius = eta * h;
            let mut idx = vec![0; 2];
            idx[axis] = row;
            for l in 0..levels {
                for i in 0..nt {
                    idx[tan] = i;
                    m[l * nt + i] = u.get(l, sp.index(&idx)).abs();
                }
            }
            let mut d = levels - 1;
            for k in 0..=nt {
                let kx = k as f64 * dx;
                if kx >= radius {
                    break;
                }
                while d > 0 && parabolic_norm(&[kx], d as f64 * dt) >= radius {
                    d -= 1;
                }
                for i in 0..nt {
                    for l in 0..levels {
                        column[l] = m[l * nt + i];
                    }
                    sliding_max(&column, d, &mut column_out);
                    for l in 0..levels {
                        let a = &mut acc[l * nt + i];
                        *a = a.max(column_out[l]);
                    }
                }
                for l in 0..levels {
                    let r = &m[l * nt..(l + 1) * nt];
                    for i in 0..nt {
                        let lo = r[i.saturating_sub(1)];
                        let hi = r[(i + 1).min(nt - 1)];
                        widened[l * nt + i] = lo.max(r[i]).max(hi);
                    }
                }
                std::mem::swap(&mut m, &mut widened);
            }
        }
        for (q, (p, _)) in pts.iter().enumerate() {
            let f = &faces[p.face];
            if (f.axis, f.side) != (axis, side) {
                continue;
            }
            if any_row {
                let i = sp.multi_index(f.cell)[tan];
                values[q] = acc[p.level * nt + i];
            } else {
                values[q] = u.get(p.level, f.cell).abs();
                flags[q] = true;
            }
        }
    }
    let (points, weights) = pts.into_iter().unzip();
    BoundaryField { points, values, weights, flags }
}

/// Direct evaluation of the cone maxima by scanning samples in decreasing
/// order of `|u|`; handles graph boundaries and any dimension.
pub fn nontangential_max_scan(u: &ScalarField, eta: f64, dom: &DomainSpec, truncation: f64) -> Result<BoundaryField> {
    let g = dom.graph();
    let n = g.n();
    let sp = &u.grid.space;
    let phi_at: Vec<f64> = (0..sp.len()).map(|i| g.phi.eval(&sp.center(i)[..n])).collect();
    let mut samples: Vec<Sample> = Vec::with_capacity(u.values.len());
    for k in 0..u.levels() {
        for i in 0..sp.len() {
            let flat = sp.center(i);
            let phys_lambda = flat[n] + phi_at[i];
            samples.push(Sample { value: u.get(k, i).abs(), level: k, flat, phys_lambda });
        }
    }
    // largest first; ties by position for a deterministic order
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].value.total_cmp(&samples[a].value).then(a.cmp(&b)));
    let faces = sp.boundary_faces();
    let pts = boundary_points(u, dom);
    let results: Vec<(f64, bool)> = pts
        .par_iter()
        .map(|(p, _)| {
            let f = &faces[p.face];
            let plane = if f.side == 0 { sp.lower[f.axis] } else { sp.upper(f.axis) };
            let inside = |s: &Sample| {
                let (h, tan) = cone_coords(s, f.axis, f.side, plane, &p.x, n);
                h > 0.0 && h < truncation && parabolic_norm(&tan, u.grid.time(s.level) - p.t) < eta * h
            };
            let above = &samples[p.level * sp.len() + f.cell];
            let nonempty = inside(above);
            for &idx in &order {
                let s = &samples[idx];
                if s.value == 0.0 && nonempty {
                    return (0.0, false);
                }
                if inside(s) {
                    return (s.value, false);
                }
            }
            (above.value, true)
        })
        .collect();
    let (values, flags) = results.into_iter().unzip();
    let (points, weights) = pts.into_iter().unzip();
    Ok(BoundaryField { points, values, weights, flags })
}

/// `M_r(u)(x, t) = sup_{0<λ<r} |u|` over the bottom columns.
pub fn truncated_vertical_max(u: &ScalarField, r: f64, dom: &DomainSpec) -> Result<BoundaryField> {
    let sp = &u.grid.space;
    let n = sp.dim() - 1;
    if !(r > 0.0) || r > sp.upper(n) - sp.lower[n] + 1e-12 {
        return Err(Error::InvalidArgument(format!("height {r} is outside the grid")));
    }
    let half = DomainSpec::HalfSpace(dom.graph().clone());
    let pts = boundary_points(u, &half);
    let faces = sp.boundary_faces();
    let mut values = Vec::with_capacity(pts.len());
    for (p, _) in &pts {
        let mut m = sp.multi_index(faces[p.face].cell);
        let mut best: f64 = 0.0;
        for row in 0..sp.cells[n] {
            if sp.center_coord(n, row) >= r {
                break;
            }
            m[n] = row;
            best = best.max(u.get(p.level, sp.index(&m)).abs());
        }
        values.push(best);
    }
    let count = pts.len();
    let (points, weights) = pts.into_iter().unzip();
    Ok(BoundaryField { points, values, weights, flags: vec![false; count] })
}

/// `(Σ w |g|^p)^{1/p}` for `p ∈ (1, ∞)`.
pub fn lp_boundary_norm(g: &BoundaryField, p: f64) -> Result<f64> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("exponent must lie in (1, ∞), got {p}")));
    }
    let s: f64 = g.values.iter().zip(&g.weights).map(|(v, w)| w * v.abs().powf(p)).sum();
    Ok(s.powf(1.0 / p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvabilityRow {
    pub label: String,
    pub n_norm: f64,
    pub f_norm: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvabilityTable {
    pub p: f64,
    pub eta: f64,
    pub rows: Vec<SolvabilityRow>,
    /// Largest ratio over the family.
    pub constant: f64,
}

/// `‖N(u_f)‖_p / ‖f‖_p` for each datum, solving with zero initial data.
pub fn solvability_constant(
    a: &CoefficientField,
    dom: &DomainSpec,
    family: &[BoundaryData],
    p: f64,
    eta: f64,
    grid: &SpaceTimeGrid,
) -> Result<SolvabilityTable> {
    let solver = DirichletSolver::new(a, dom, grid, Default::default())?;
    let rows = family
        .par_iter()
        .map(|f| {
            let u = solver.solve(f, &InitialData::Zero)?;
            let n_norm = lp_boundary_norm(&nontangential_max(&u, eta, dom)?, p)?;
            let f_norm = lp_boundary_norm(&BoundaryField::trace(&u, dom), p)?;
            if f_norm == 0.0 {
                return Err(Error::InvalidArgument(format!("datum {} vanishes on the grid", f.label)));
            }
            Ok(SolvabilityRow { label: f.label.clone(), n_norm, f_norm, ratio: n_norm / f_norm })
        })
        .collect::<Result<Vec<_>>>()?;
    let constant = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(SolvabilityTable { p, eta, rows, constant })
}
