//! Closed forms for `A = I`: the Gaussian heat kernel, the Dirichlet
//! half-space Green's function by reflection, and its caloric measure.
//!
//! Coordinates are `X = (x, λ)` with the boundary at `λ = 0`.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;

/// `(4πt)^{-d/2} exp(−|X|²/4t)` for `t > 0`, zero otherwise.
pub fn heat_kernel(x: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (4.0 * PI * t).powf(-(x.len() as f64) / 2.0) * (-r2 / (4.0 * t)).exp()
}

/// Green's function of the half-space `{λ > 0}` with pole `(Z, τ)`.
pub fn half_space_green(x: &[f64], t: f64, z: &[f64], tau: f64) -> f64 {
    let d = x.len();
    let direct: Vec<f64> = (0..d).map(|k| x[k] - z[k]).collect();
    let mut image = direct.clone();
    image[d - 1] = x[d - 1] + z[d - 1];
    heat_kernel(&direct, t - tau) - heat_kernel(&image, t - tau)
}

/// Density of the caloric measure at `(Z, τ)` against `dy ds` at the
/// boundary point `(y, s)`: `ζ/(τ−s) · Γ((z − y, ζ), τ − s)`.
pub fn half_space_kernel(z: &[f64], tau: f64, y: &[f64], s: f64) -> f64 {
    let u = tau - s;
    if u <= 0.0 {
        return 0.0;
    }
    let n = y.len();
    let zeta = z[n];
    let mut diff: Vec<f64> = (0..n).map(|k| z[k] - y[k]).collect();
    diff.push(zeta);
    zeta / u * heat_kernel(&diff, u)
}

/// `∫ Γ₁(z − y, u) dy` over `(a, b)` for the one-dimensional kernel.
fn gaussian_mass(z: f64, a: f64, b: f64, u: f64) -> f64 {
    let s = (4.0 * u).sqrt();
    0.5 * (libm::erf((b - z) / s) - libm::erf((a - z) / s))
}

/// Caloric measure at `(Z, τ)` of the boundary box
/// `Π(lower_k, upper_k) × (s0, s1)`.
pub fn half_space_measure(z: &[f64], tau: f64, lower: &[f64], upper: &[f64], s_range: (f64, f64)) -> f64 {
    let n = lower.len();
    let zeta = z[n];
    // u = τ − s ranges over (τ − s1, τ − s0) ∩ (0, ∞)
    let u0 = (tau - s_range.1).max(0.0);
    let u1 = tau - s_range.0;
    if u1 <= u0 {
        return 0.0;
    }
    let density = |u: f64| {
        if u <= 0.0 {
            return 0.0;
        }
        let spatial: f64 = (0..n).map(|k| gaussian_mass(z[k], lower[k], upper[k], u)).product();
        zeta / u * (4.0 * PI * u).powf(-0.5) * (-zeta * zeta / (4.0 * u)).exp() * spatial
    };
    // the density is below e^{-100} relative to its peak for u < ζ²/400
    let lo = u0.max(zeta * zeta / 400.0);
    if u1 <= lo {
        return 0.0;
    }
    integrate_graded(density, lo, u1, 256)
}

/// Like [`integrate`] but with geometrically graded panels when `b/a` is
/// large, for integrands concentrated near a positive left endpoint.
pub fn integrate_graded(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    if a <= 0.0 || b / a < 4.0 {
        return integrate(f, a, b, panels);
    }
    let rule = GaussLegendre::new(NonZeroUsize::new(16).unwrap());
    let ratio = (b / a).powf(1.0 / panels as f64);
    (0..panels)
        .map(|i| {
            let lo = a * ratio.powi(i as i32);
            let hi = if i + 1 == panels { b } else { lo * ratio };
            rule.integrate(lo, hi, &f)
        })
        .sum()
}

/// Composite 16-point Gauss–Legendre on `panels` equal panels.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let rule = GaussLegendre::new(NonZeroUsize::new(16).unwrap());
    let w = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + i as f64 * w;
            rule.integrate(lo, lo + w, &f)
        })
        .sum()
}
