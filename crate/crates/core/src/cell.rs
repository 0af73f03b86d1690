//! Periodic cell problems and the homogenized matrix `Ā`.
//!
//! For a direction `α` the corrector `χ_α = w_α − α·y` solves
//! `−div(A(∇χ_α + α)) = 0` on the unit torus with zero mean, and
//! `Ā_ij = ∫ e_iᵀ A (∇χ_j + e_j)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{check_periodicity, sym_eigen_range, CoefficientField, Periodicity};
use crate::error::{Error, Result};
use crate::fv::{assemble, BoundaryMode, Discretization, Grid};
use crate::linalg::{conjugate_gradient, norm2, CgOptions};

pub const DEFAULT_RESOLUTION_2D: usize = 128;
pub const DEFAULT_RESOLUTION_3D: usize = 48;

/// Discrete corrector `χ_α` at the cell centers of the `N^d` torus grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectorField {
    pub alpha: Vec<f64>,
    pub resolution: usize,
    pub values: Vec<f64>,
    /// Relative residual of the discrete cell equation.
    pub residual: f64,
    pub iterations: usize,
}

impl CorrectorField {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveMatrix {
    #[serde(rename = "Abar", with = "matrix_rows")]
    pub abar: DMatrix<f64>,
    pub resolution: usize,
    /// Relative residual of each column's corrector solve.
    pub residuals: Vec<f64>,
    pub symmetry_defect: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

/// Serializes matrices as nested row arrays.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

fn check_cell_hypotheses(a: &CoefficientField, n: usize) -> Result<()> {
    if n < 8 {
        return Err(Error::InsufficientResolution { required: 8, got: n });
    }
    match a.period() {
        Periodicity::Lattice { period } if (period - 1.0).abs() < 1e-12 => {}
        other => {
            return Err(Error::Hypothesis(format!(
                "cell problem needs a field periodic on the unit lattice, {:?} declares {other:?}",
                a.label()
            )))
        }
    }
    let dev = check_periodicity(a, 64, 0x5eed)?;
    if dev > 1e-8 {
        return Err(Error::Hypothesis(format!("periodicity deviation {dev:e} exceeds 1e-8")));
    }
    Ok(())
}

fn cg_options(n: usize) -> CgOptions {
    CgOptions { tolerance: 1e-10, max_iterations: 50 * n, mean_zero: true }
}

fn corrector_on(disc: &Discretization, alpha: &[f64], n: usize) -> Result<CorrectorField> {
    let rhs = disc.affine.mul_vec(alpha);
    let mut x = vec![0.0; disc.grid.len()];
    let rep = conjugate_gradient(&disc.stiffness, &rhs, &mut x, &cg_options(n))?;
    let mut r = disc.stiffness.mul_vec(&x);
    for (ri, bi) in r.iter_mut().zip(&rhs) {
        *ri = bi - *ri;
    }
    let bnorm = norm2(&rhs);
    let residual = if bnorm > 0.0 { norm2(&r) / bnorm } else { norm2(&r) };
    Ok(CorrectorField { alpha: alpha.to_vec(), resolution: n, values: x, residual, iterations: rep.iterations })
}

/// Solves the cell problem for direction `alpha` on an `N^d` torus grid.
pub fn solve_corrector(a: &CoefficientField, alpha: &[f64], n: usize) -> Result<CorrectorField> {
    if alpha.len() != a.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: alpha.len() });
    }
    check_cell_hypotheses(a, n)?;
    let disc = assemble(a, &Grid::unit_torus(a.dim(), n), BoundaryMode::Periodic)?;
    corrector_on(&disc, alpha, n)
}

/// Assembles `Ā` column by column from the `d` corrector solves.
pub fn effective_matrix(a: &CoefficientField, n: usize) -> Result<EffectiveMatrix> {
    check_cell_hypotheses(a, n)?;
    let d = a.dim();
    let disc = assemble(a, &Grid::unit_torus(d, n), BoundaryMode::Periodic)?;
    let correctors: Vec<CorrectorField> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            corrector_on(&disc, &e, n)
        })
        .collect::<Result<_>>()?;
    Ok(matrix_from_correctors(&disc, &correctors, n))
}

/// `Ā_ij = G_ij − (Fᵀ χ_j)_i`, i.e. the discrete flux of `∇χ_j + e_j`
/// tested against `e_i` (the torus has unit volume).
pub fn matrix_from_correctors(disc: &Discretization, correctors: &[CorrectorField], n: usize) -> EffectiveMatrix {
    let d = correctors.len();
    let mut abar = disc.affine_gram.clone();
    for (j, c) in correctors.iter().enumerate() {
        let ft = disc.affine.mul_transpose_vec(&c.values);
        for i in 0..d {
            abar[(i, j)] -= ft[i];
        }
    }
    let symmetry_defect = (&abar - abar.transpose()).amax();
    let sym = (&abar + abar.transpose()) * 0.5;
    let (min_eig, max_eig) = sym_eigen_range(&sym);
    EffectiveMatrix { abar, resolution: n, residuals: correctors.iter().map(|c| c.residual).collect(), symmetry_defect, min_eig, max_eig }
}

impl EffectiveMatrix {
    /// Symmetric part, used as the limit coefficient.
    pub fn symmetric(&self) -> DMatrix<f64> {
        (&self.abar + self.abar.transpose()) * 0.5
    }

    pub fn to_field(&self) -> Result<CoefficientField> {
        CoefficientField::constant(self.symmetric(), format!("Abar(N={})", self.resolution))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub resolution: usize,
    /// `αᵀ Ā(N) α`.
    pub value: f64,
    /// `|value(N) − value(previous N)|`.
    pub difference: Option<f64>,
    /// `log(e_prev / e) / log(N / N_prev)` from successive differences.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub alpha: Vec<f64>,
    pub rows: Vec<ConvergenceRow>,
    /// All values agree to 1e-12: the scheme is exact for this field.
    pub exact: bool,
    /// Rate of the finest pair of differences.
    pub observed_order: Option<f64>,
}

/// Self-convergence study of `αᵀĀα` over increasing resolutions.
pub fn grid_convergence(a: &CoefficientField, alpha: &[f64], n_list: &[usize]) -> Result<ConvergenceTable> {
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("resolutions must be increasing".into()));
    }
    if alpha.len() != a.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: alpha.len() });
    }
    let values: Vec<f64> = n_list
        .par_iter()
        .map(|&n| {
            let m = effective_matrix(a, n)?;
            let v = nalgebra::DVector::from_column_slice(alpha);
            Ok((v.transpose() * m.symmetric() * &v)[(0, 0)])
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(n_list.len());
    for (k, (&n, &value)) in n_list.iter().zip(&values).enumerate() {
        let difference = (k > 0).then(|| (value - values[k - 1]).abs());
        let rate = match (k >= 2, difference) {
            (true, Some(e)) => {
                let e_prev = (values[k - 1] - values[k - 2]).abs();
                (e > 1e-12 && e_prev > 1e-12).then(|| (e_prev / e).ln() / (n as f64 / n_list[k - 1] as f64).ln())
            }
            _ => None,
        };
        rows.push(ConvergenceRow { resolution: n, value, difference, rate });
    }
    let exact = rows.iter().all(|r| r.difference.is_none_or(|e| e <= 1e-12));
    let observed_order = rows.last().and_then(|r| r.rate);
    Ok(ConvergenceTable { alpha: alpha.to_vec(), rows, exact, observed_order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{laminate, trig};

    #[test]
    fn constant_field_has_no_corrector() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a = CoefficientField::constant(m.clone(), "c").unwrap();
        let c = solve_corrector(&a, &[1.0, -2.0], 16).unwrap();
        assert!(c.max_abs() < 1e-12);
        let e = effective_matrix(&a, 16).unwrap();
        assert!((&e.abar - m).amax() < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = laminate(2, 1.0, 4.0, 0.5, 0).unwrap();
        assert!(matches!(effective_matrix(&a, 4), Err(Error::InsufficientResolution { .. })));
        let aperiodic = a.clone().with_period(Periodicity::None);
        assert!(matches!(effective_matrix(&aperiodic, 16), Err(Error::Hypothesis(_))));
        assert!(solve_corrector(&a, &[1.0], 16).is_err());
    }

    #[test]
    fn laminate_corrector_matches_ode() {
        let a = laminate(2, 1.0, 4.0, 0.5, 0).unwrap();
        let n = 32;
        let c = solve_corrector(&a, &[1.0, 0.0], n).unwrap();
        assert!(c.mean().abs() <= 1e-10 * c.max_abs().max(1.0));
        // ∂₁w = ⟨a⁻¹⟩⁻¹ / a(y₁) across every face along axis 0
        let h = 1.0 / n as f64;
        let harm = 1.6;
        let grid = Grid::unit_torus(2, n);
        for lin in 0..grid.len() {
            let m = grid.multi_index(lin);
            let mut e = m.clone();
            e[0] = (m[0] + 1) % n;
            let east = grid.index(&e);
            let af = {
                let (p, q) = (a.eval(&grid.center(lin))[(0, 0)], a.eval(&grid.center(east))[(0, 0)]);
                2.0 * p * q / (p + q)
            };
            let dw = (c.values[east] - c.values[lin]) / h + 1.0;
            assert!((dw - harm / af).abs() < 1e-7, "{m:?} {dw}");
        }
        let t = solve_corrector(&a, &[0.0, 1.0], n).unwrap();
        assert!(t.max_abs() < 1e-12 && t.residual <= 1e-10);
    }

    #[test]
    fn laminate_effective_matrix() {
        let e = effective_matrix(&laminate(2, 1.0, 4.0, 0.5, 0).unwrap(), 32).unwrap();
        assert!((e.abar[(0, 0)] - 1.6).abs() < 1e-8);
        assert!((e.abar[(1, 1)] - 2.5).abs() < 1e-12);
        assert!(e.abar[(0, 1)].abs() < 1e-12 && e.symmetry_defect < 1e-8);
    }

    #[test]
    fn energy_identity_by_face_quadrature() {
        let a = trig(2);
        let n = 24;
        let c = solve_corrector(&a, &[0.6, 0.8], n).unwrap();
        let e = effective_matrix(&a, n).unwrap();
        let grid = Grid::unit_torus(2, n);
        let h = 1.0 / n as f64;
        let mut energy = 0.0;
        for lin in 0..grid.len() {
            let p = grid.center(lin);
            for axis in 0..2 {
                let mut m = grid.multi_index(lin);
                m[axis] = (m[axis] + 1) % n;
                let east = grid.index(&m);
                let (ap, ae) = (a.eval(&p)[(axis, axis)], a.eval(&grid.center(east))[(axis, axis)]);
                let af = 2.0 * ap * ae / (ap + ae);
                let g = (c.values[east] - c.values[lin]) / h + c.alpha[axis];
                energy += af * g * g * h * h;
            }
        }
        let quad = [0.6, 0.8];
        let form: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| quad[i] * e.abar[(i, j)] * quad[j]).sum();
        assert!((energy - form).abs() <= 1e-8 * form, "{energy} vs {form}");
    }

    #[test]
    fn convergence_table_for_constant_is_exact() {
        let t = grid_convergence(&CoefficientField::identity(2), &[1.0, 0.0], &[8, 16, 32]).unwrap();
        assert!(t.exact && t.observed_order.is_none());
        assert!(grid_convergence(&CoefficientField::identity(2), &[1.0, 0.0], &[16, 8]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let e = effective_matrix(&trig(2), 8).unwrap();
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"Abar\":[["));
        let back: EffectiveMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }
}
