//! Sparse matrices and a Jacobi-preconditioned conjugate gradient solver.
//!
//! The discrete operators produced by [`crate::fv`] are symmetric positive
//! (semi-)definite, so CG is the only iterative method needed. For periodic
//! cell problems the operator has the constants in its kernel; the solver
//! then works on the mean-zero subspace by projecting the residual and the
//! search directions.

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let k = next[r];
            cols[k] = c;
            vals[k] = v;
            next[r] += 1;
        }

        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|&(c, _)| c);
            let mut iter = scratch.iter().copied();
            if let Some((mut c0, mut v0)) = iter.next() {
                for (c, v) in iter {
                    if c == c0 {
                        v0 += v;
                    } else {
                        col_idx.push(c0);
                        values.push(v0);
                        c0 = c;
                        v0 = v;
                    }
                }
                col_idx.push(c0);
                values.push(v0);
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over the stored entries of row `r` as `(col, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `y = Aᵀ x`.
    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.values[k] * xr;
            }
        }
        y
    }

    /// Returns `alpha * self + diag(shift)`, keeping the sparsity pattern.
    pub fn scaled_plus_diagonal(&self, alpha: f64, shift: &[f64]) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz() + self.nrows);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                triplets.push((r, c, alpha * v));
            }
            triplets.push((r, r, shift[r]));
        }
        Self::from_triplets(self.nrows, self.ncols, &triplets)
    }

    /// Largest `|A_ij - A_ji|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Stopping rule and subspace options for [`conjugate_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Relative residual target `‖b − Ax‖ ≤ tol · ‖b‖`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Solve on the mean-zero subspace (operators with constant kernel).
    pub mean_zero: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 10_000, mean_zero: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `A x = b` in place, starting from the incoming `x`.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], x: &mut [f64], opts: &CgOptions) -> Result<CgReport> {
    let n = a.nrows();
    let inv_diag: Vec<f64> = a.diagonal().into_iter().map(|d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();

    let mut rhs = b.to_vec();
    if opts.mean_zero {
        remove_mean(&mut rhs);
        remove_mean(x);
    }
    let bnorm = norm2(&rhs);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport { iterations: 0, relative_residual: 0.0 });
    }

    let mut ap = vec![0.0; n];
    a.mul_vec_into(x, &mut ap);
    let mut r: Vec<f64> = rhs.iter().zip(&ap).map(|(b, ax)| b - ax).collect();
    if opts.mean_zero {
        remove_mean(&mut r);
    }
    let mut rel = norm2(&r) / bnorm;
    if rel <= opts.tolerance {
        return Ok(CgReport { iterations: 0, relative_residual: rel });
    }

    let precondition = |r: &[f64]| -> Vec<f64> {
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
        if opts.mean_zero {
            remove_mean(&mut z);
        }
        z
    };
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);

    for it in 1..=opts.max_iterations {
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Singular(format!("non-positive curvature pᵀAp = {pap:e} at CG iteration {it}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if opts.mean_zero {
            remove_mean(&mut r);
        }
        rel = norm2(&r) / bnorm;
        if rel <= opts.tolerance {
            if opts.mean_zero {
                remove_mean(x);
            }
            return Ok(CgReport { iterations: it, relative_residual: rel });
        }
        z = precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iterations, residual: rel })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn triplets_are_summed_and_sorted() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 0.5), (1, 1, -1.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 2), 1.5);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.row(0).map(|(c, _)| c).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(m.mul_transpose_vec(&[1.0, 2.0]), vec![2.0, -2.0, 1.5]);
    }

    #[test]
    fn cg_solves_dirichlet_laplacian() {
        let n = 50;
        let a = laplacian_1d(n);
        let exact: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.mul_vec(&exact);
        let mut x = vec![0.0; n];
        let rep = conjugate_gradient(&a, &b, &mut x, &CgOptions { tolerance: 1e-13, ..Default::default() }).unwrap();
        assert!(rep.iterations <= n + 5);
        for (u, v) in x.iter().zip(&exact) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn cg_mean_zero_on_periodic_laplacian() {
        let n = 32;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            t.push((i, (i + 1) % n, -1.0));
            t.push((i, (i + n - 1) % n, -1.0));
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let exact: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
        let b = a.mul_vec(&exact);
        let mut x = vec![1.0; n];
        let opts = CgOptions { tolerance: 1e-12, mean_zero: true, ..Default::default() };
        conjugate_gradient(&a, &b, &mut x, &opts).unwrap();
        assert!(x.iter().sum::<f64>().abs() < 1e-10);
        for (u, v) in x.iter().zip(&exact) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn cg_reports_iteration_cap() {
        let a = laplacian_1d(200);
        let b = vec![1.0; 200];
        let mut x = vec![0.0; 200];
        let err = conjugate_gradient(&a, &b, &mut x, &CgOptions { max_iterations: 3, ..Default::default() });
        assert!(matches!(err, Err(Error::NoConvergence { iterations: 3, .. })));
    }
}
