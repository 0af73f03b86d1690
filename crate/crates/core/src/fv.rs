//! Cell-centered finite volumes on tensor grids.
//!
//! The discrete operator is assembled from a quadratic energy
//! `E(u) ≈ ∫ (∇u + α)ᵀ A (∇u + α)` written as a sum of terms `w · L_s · L_t`
//! with `L_s, L_t` linear forms in the cell unknowns, the Dirichlet face
//! values and the constant gradient `α`. Diagonal entries of `A` enter through
//! two-point face fluxes with harmonic averaging; mixed entries through
//! vertex-centered gradients, with boundary vertices closed by reflecting
//! through the Dirichlet face values (exact for affine functions).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

/// Uniform tensor grid of cells on `Π [lower_k, lower_k + cells_k · h_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub spacing: Vec<f64>,
    pub cells: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if upper.len() != d || cells.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: cells.len().min(upper.len()) });
        }
        if cells.contains(&0) || lower.iter().zip(&upper).any(|(a, b)| !(b > a)) {
            return Err(Error::InvalidArgument(format!("degenerate grid {lower:?}..{upper:?} with {cells:?} cells")));
        }
        let spacing = (0..d).map(|k| (upper[k] - lower[k]) / cells[k] as f64).collect();
        Ok(Self { lower, spacing, cells })
    }

    pub fn unit_torus(d: usize, n: usize) -> Self {
        Self::new(vec![0.0; d], vec![1.0; d], vec![n; d]).expect("valid torus")
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.lower[axis] + self.cells[axis] as f64 * self.spacing[axis]
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Area of a face orthogonal to `axis`.
    pub fn face_area(&self, axis: usize) -> f64 {
        (0..self.dim()).filter(|&k| k != axis).map(|k| self.spacing[k]).product()
    }

    /// Linear index, axis 0 fastest.
    pub fn index(&self, multi: &[usize]) -> usize {
        let mut lin = 0;
        for k in (0..multi.len()).rev() {
            lin = lin * self.cells[k] + multi[k];
        }
        lin
    }

    pub fn multi_index(&self, mut lin: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for (k, o) in out.iter_mut().enumerate() {
            *o = lin % self.cells[k];
            lin /= self.cells[k];
        }
        out
    }

    pub fn center_coord(&self, axis: usize, i: usize) -> f64 {
        self.lower[axis] + (i as f64 + 0.5) * self.spacing[axis]
    }

    pub fn center(&self, lin: usize) -> Vec<f64> {
        let m = self.multi_index(lin);
        (0..self.dim()).map(|k| self.center_coord(k, m[k])).collect()
    }

    /// Multilinear interpolation weights over cell centers; points outside the
    /// hull of centers are clamped to it.
    pub fn interpolation_weights(&self, p: &[f64]) -> Vec<(usize, f64)> {
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            if self.cells[k] == 1 {
                continue;
            }
            let s = ((p[k] - self.lower[k]) / self.spacing[k] - 0.5).clamp(0.0, (self.cells[k] - 1) as f64);
            let i = (s.floor() as usize).min(self.cells[k] - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        let mut out = Vec::with_capacity(1 << d);
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for k in 0..d {
                let bit = (corner >> k) & 1;
                if bit == 1 && self.cells[k] == 1 {
                    w = 0.0;
                }
                idx[k] = base[k] + bit;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                out.push((self.index(&idx), w));
            }
        }
        out
    }

    pub fn interpolate(&self, values: &[f64], p: &[f64]) -> f64 {
        self.interpolation_weights(p).iter().map(|&(i, w)| w * values[i]).sum()
    }

    /// Boundary faces in a fixed order: axis, then side (lower, upper), then
    /// cell index.
    pub fn boundary_faces(&self) -> Vec<BoundaryFace> {
        let d = self.dim();
        let mut out = Vec::new();
        for axis in 0..d {
            for side in 0..2u8 {
                for lin in 0..self.len() {
                    let m = self.multi_index(lin);
                    let at_edge = if side == 0 { m[axis] == 0 } else { m[axis] + 1 == self.cells[axis] };
                    if !at_edge {
                        continue;
                    }
                    let mut center = self.center(lin);
                    center[axis] = if side == 0 { self.lower[axis] } else { self.upper(axis) };
                    out.push(BoundaryFace { axis, side, cell: lin, center, area: self.face_area(axis) });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFace {
    pub axis: usize,
    /// 0 for the lower face of the box, 1 for the upper one.
    pub side: u8,
    pub cell: usize,
    pub center: Vec<f64>,
    pub area: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    Dirichlet,
    Periodic,
}

/// `K u = B g + F α` plus the constant-gradient Gram matrix `G`, such that the
/// discrete energy of `(u, g, α)` equals the quadratic form of
/// `[[K, −B, −F], [−Bᵀ, ·, ·], [−Fᵀ, ·, G]]`.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub grid: Grid,
    pub mode: BoundaryMode,
    pub stiffness: CsrMatrix,
    pub boundary: CsrMatrix,
    pub affine: CsrMatrix,
    pub affine_gram: DMatrix<f64>,
    pub faces: Vec<BoundaryFace>,
    /// `A` at cell centers, row-major `d × d` per cell.
    pub coefficients: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Node {
    Cell(usize),
    Face(usize),
    Affine(usize),
}

struct Accumulator {
    uu: Vec<(usize, usize, f64)>,
    ub: Vec<(usize, usize, f64)>,
    ua: Vec<(usize, usize, f64)>,
    aa: DMatrix<f64>,
}

impl Accumulator {
    fn entry(&mut self, p: Node, q: Node, v: f64) {
        match (p, q) {
            (Node::Cell(i), Node::Cell(j)) => self.uu.push((i, j, v)),
            (Node::Cell(i), Node::Face(j)) => self.ub.push((i, j, -v)),
            (Node::Cell(i), Node::Affine(j)) => self.ua.push((i, j, -v)),
            (Node::Affine(i), Node::Affine(j)) => self.aa[(i, j)] += v,
            _ => {}
        }
    }

    /// Adds `w · L_s · L_t` (symmetrized).
    fn term(&mut self, w: f64, s: &[(Node, f64)], t: &[(Node, f64)]) {
        for &(p, cp) in s {
            for &(q, cq) in t {
                let v = 0.5 * w * cp * cq;
                self.entry(p, q, v);
                self.entry(q, p, v);
            }
        }
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assembles the finite-volume operator of `−div(A∇·)` (times cell volume).
pub fn assemble(a: &CoefficientField, grid: &Grid, mode: BoundaryMode) -> Result<Discretization> {
    let d = grid.dim();
    if a.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: a.dim() });
    }
    if mode == BoundaryMode::Periodic && grid.cells.iter().any(|&c| c < 2) {
        return Err(Error::InvalidArgument("periodic grids need at least 2 cells per axis".into()));
    }
    let n = grid.len();
    let mut coefficients = vec![0.0; n * d * d];
    for lin in 0..n {
        let m = a.eval(&grid.center(lin));
        for i in 0..d {
            for j in 0..d {
                coefficients[lin * d * d + i * d + j] = m[(i, j)];
            }
        }
    }
    let coef = |cell: usize, i: usize, j: usize| coefficients[cell * d * d + i * d + j];
    let periodic = mode == BoundaryMode::Periodic;
    let faces = if periodic { Vec::new() } else { grid.boundary_faces() };
    let mut acc = Accumulator { uu: Vec::new(), ub: Vec::new(), ua: Vec::new(), aa: DMatrix::zeros(d, d) };

    // two-point fluxes across interior (or wrapped) faces
    for axis in 0..d {
        let h = grid.spacing[axis];
        let area = grid.face_area(axis);
        for lin in 0..n {
            let mut m = grid.multi_index(lin);
            if m[axis] + 1 == grid.cells[axis] {
                if !periodic {
                    continue;
                }
                m[axis] = 0;
            } else {
                m[axis] += 1;
            }
            let east = grid.index(&m);
            let af = harmonic(coef(lin, axis, axis), coef(east, axis, axis));
            let mut form = vec![(Node::Cell(east), 1.0), (Node::Cell(lin), -1.0)];
            if periodic {
                form.push((Node::Affine(axis), h));
            }
            acc.term(af * area / h, &form, &form);
        }
    }

    for (j, f) in faces.iter().enumerate() {
        let w = 2.0 * coef(f.cell, f.axis, f.axis) * f.area / grid.spacing[f.axis];
        let form = [(Node::Cell(f.cell), 1.0), (Node::Face(j), -1.0)];
        acc.term(w, &form, &form);
    }

    // mixed derivatives from vertex gradients; at vertices on a Dirichlet
    // face the missing cell is the reflection `2g − u` through the face
    // value, vertices on box edges are left out
    if !a.is_diagonal() && d >= 2 {
        let vol = grid.cell_volume();
        let corners = 1usize << d;
        let face_of: std::collections::HashMap<(usize, usize, u8), usize> =
            faces.iter().enumerate().map(|(j, f)| ((f.cell, f.axis, f.side), j)).collect();
        let span: Vec<usize> = (0..d).map(|k| if periodic { grid.cells[k] } else { grid.cells[k] + 1 }).collect();
        let total: usize = span.iter().product();
        let mut idx = vec![0usize; d];
        // per corner: (cell, Some((face, inside-cell)) if reflected)
        let mut stencil: Vec<(usize, Option<usize>)> = vec![(0, None); corners];
        for v in 0..total {
            let mut rem = v;
            let mut vert = vec![0usize; d];
            for k in 0..d {
                vert[k] = rem % span[k];
                rem /= span[k];
            }
            let outside_axis: Vec<usize> =
                if periodic { Vec::new() } else { (0..d).filter(|&k| vert[k] == 0 || vert[k] == grid.cells[k]).collect() };
            if outside_axis.len() > 1 {
                continue;
            }
            // the dual cell of a vertex on the boundary is cut in half
            let dual_volume = if outside_axis.is_empty() { vol } else { 0.5 * vol };
            // cells around vertex `vert` are vert - 1 + bits
            for (c, slot) in stencil.iter_mut().enumerate() {
                let mut reflected = None;
                for k in 0..d {
                    let bit = (c >> k) & 1;
                    if periodic {
                        idx[k] = (vert[k] + grid.cells[k] + bit - 1) % grid.cells[k];
                    } else if vert[k] + bit == 0 {
                        idx[k] = 0;
                        reflected = Some((k, 0u8));
                    } else if vert[k] + bit - 1 == grid.cells[k] {
                        idx[k] = grid.cells[k] - 1;
                        reflected = Some((k, 1u8));
                    } else {
                        idx[k] = vert[k] + bit - 1;
                    }
                }
                let cell = grid.index(&idx);
                *slot = (cell, reflected.map(|(k, side)| face_of[&(cell, k, side)]));
            }
            let grad_form = |i: usize| -> Vec<(Node, f64)> {
                let scale = 1.0 / ((corners / 2) as f64 * grid.spacing[i]);
                let mut f = Vec::with_capacity(corners + 2);
                for (c, &(cell, face)) in stencil.iter().enumerate() {
                    let s = if (c >> i) & 1 == 1 { scale } else { -scale };
                    match face {
                        None => f.push((Node::Cell(cell), s)),
                        Some(j) => {
                            f.push((Node::Face(j), 2.0 * s));
                            f.push((Node::Cell(cell), -s));
                        }
                    }
                }
                if periodic {
                    f.push((Node::Affine(i), 1.0));
                }
                f
            };
            for i in 0..d {
                for j in (i + 1)..d {
                    let c = stencil.iter().map(|&(cell, _)| coef(cell, i, j)).sum::<f64>() / corners as f64;
                    if c == 0.0 {
                        continue;
                    }
                    acc.term(2.0 * c * dual_volume, &grad_form(i), &grad_form(j));
                }
            }
        }
    }

    let nb = faces.len();
    Ok(Discretization {
        grid: grid.clone(),
        mode,
        stiffness: CsrMatrix::from_triplets(n, n, &acc.uu),
        boundary: CsrMatrix::from_triplets(n, nb, &acc.ub),
        affine: CsrMatrix::from_triplets(n, d, &acc.ua),
        affine_gram: acc.aa,
        faces,
        coefficients,
    })
}

impl Discretization {
    pub fn coefficient(&self, cell: usize, i: usize, j: usize) -> f64 {
        let d = self.grid.dim();
        self.coefficients[cell * d * d + i * d + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{laminate, trig};
    use crate::linalg::{conjugate_gradient, CgOptions};

    #[test]
    fn grid_indexing_round_trip() {
        let g = Grid::new(vec![0.0, -1.0, 2.0], vec![1.0, 1.0, 3.0], vec![3, 4, 5]).unwrap();
        for lin in 0..g.len() {
            assert_eq!(g.index(&g.multi_index(lin)), lin);
        }
        assert_eq!(g.center(0), vec![1.0 / 6.0, -0.75, 2.1]);
        let faces = g.boundary_faces();
        assert_eq!(faces.len(), 2 * (4 * 5 + 3 * 5 + 3 * 4));
        let total: f64 = faces.iter().map(|f| f.area).sum();
        assert!((total - 2.0 * (2.0 + 1.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_exact_for_affine_functions() {
        let g = Grid::new(vec![0.0, 0.0], vec![2.0, 1.0], vec![8, 5]).unwrap();
        let vals: Vec<f64> = (0..g.len())
            .map(|i| {
                let c = g.center(i);
                1.0 + 2.0 * c[0] - 3.0 * c[1]
            })
            .collect();
        for p in [[0.5, 0.5], [1.33, 0.21], [1.8, 0.85]] {
            assert!((g.interpolate(&vals, &p) - (1.0 + 2.0 * p[0] - 3.0 * p[1])).abs() < 1e-12);
        }
        let w: f64 = g.interpolation_weights(&[0.77, 0.4]).iter().map(|x| x.1).sum();
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dirichlet_operator_is_symmetric_m_matrix() {
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![6, 7]).unwrap();
        let disc = assemble(&laminate(2, 1.0, 4.0, 0.5, 0).unwrap(), &g, BoundaryMode::Dirichlet).unwrap();
        assert!(disc.stiffness.asymmetry() < 1e-14);
        for i in 0..g.len() {
            let row_sum: f64 = disc.stiffness.row(i).map(|(_, v)| v).sum();
            let b_sum: f64 = disc.boundary.row(i).map(|(_, v)| v).sum();
            assert!((row_sum - b_sum).abs() < 1e-12);
            for (j, v) in disc.stiffness.row(i) {
                assert!(j == i || v <= 0.0);
            }
            assert!(disc.boundary.row(i).all(|(_, v)| v >= 0.0));
        }
    }

    #[test]
    fn linear_functions_are_reproduced() {
        // u = c + p·X solves div(A∇u) = 0 for constant A with mixed entries
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
        let a = CoefficientField::constant(m, "aniso").unwrap();
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![12, 10]).unwrap();
        let disc = assemble(&a, &g, BoundaryMode::Dirichlet).unwrap();
        let f = |x: &[f64]| 0.3 + 1.5 * x[0] - 0.8 * x[1];
        let gvals: Vec<f64> = disc.faces.iter().map(|fc| f(&fc.center)).collect();
        let rhs = disc.boundary.mul_vec(&gvals);
        let mut u = vec![0.0; g.len()];
        conjugate_gradient(&disc.stiffness, &rhs, &mut u, &CgOptions { tolerance: 1e-13, ..Default::default() }).unwrap();
        for lin in 0..g.len() {
            assert!((u[lin] - f(&g.center(lin))).abs() < 1e-9);
        }
    }

    #[test]
    fn periodic_affine_consistency() {
        // constant u with gradient α: energy = vol · αᵀAα
        let g = Grid::unit_torus(2, 8);
        let disc = assemble(&trig(2), &g, BoundaryMode::Periodic).unwrap();
        let ones = vec![1.0; g.len()];
        assert!(disc.stiffness.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));
        let fsum = disc.affine.mul_transpose_vec(&ones);
        assert!(fsum.iter().all(|v| v.abs() < 1e-12));
        assert!((disc.affine_gram[(0, 1)]).abs() < 1e-14);
        assert!(disc.affine_gram[(0, 0)] > 1.0 && disc.affine_gram[(0, 0)] < 3.0);
    }
}
