//! Shared quadrature machinery: Gauss-Legendre rules, graded meshes for
//! algebraic endpoint singularities, and adaptive Simpson integration.

use crate::error::{Error, Result};

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrate `f` over [a, b] with Gauss-Legendre of order `n`.
pub fn gauss_legendre_integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let c = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * f(mid + c * x);
    }
    acc * c
}

/// Mesh on [a, b] whose points cluster as the `power`-th power toward `a`
/// (and toward `b` when `both_ends`). Returns n+1 edges.
pub fn graded_mesh(a: f64, b: f64, n: usize, power: f64, both_ends: bool) -> Vec<f64> {
    let mut edges = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let u = i as f64 / n as f64;
        let g = if both_ends {
            // symmetric grading: smooth map with power-law clustering at 0 and 1
            let s = u.powf(power);
            let t = (1.0 - u).powf(power);
            s / (s + t)
        } else {
            u.powf(power)
        };
        edges.push(a + (b - a) * g);
    }
    edges
}

/// Adaptive Simpson on [a, b]; the integrand must be finite on the open
/// interval (endpoints are never evaluated exactly if `a` or `b` is shifted
/// by the caller). Returns the value and the achieved error estimate.
pub fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Result<(f64, f64)> {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
        err_acc: &mut f64,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            *err_acc += delta.abs() / 15.0;
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1, err_acc)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1, err_acc)
    }

    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    if !fa.is_finite() || !fm.is_finite() || !fb.is_finite() {
        return Err(Error::NonFinite("integrand in adaptive_simpson".into()));
    }
    let whole = simpson(fa, fm, fb, b - a);
    let mut err = 0.0;
    let v = recurse(f, a, b, fa, fm, fb, whole, tol, max_depth, &mut err);
    Ok((v, err))
}

/// Integrate `f` over [a, b] where `f ~ (x-a)^{-alpha_a}` near `a` and
/// `f ~ (b-x)^{-alpha_b}` near `b`, both exponents in [0, 1). Power
/// substitutions flatten the endpoint singularities, then adaptive Simpson
/// handles the smooth remainder.
///
/// The integrand receives `(x, x - a, b - x)`; the endpoint distances are
/// computed in the substituted variable, so they stay exact down to the
/// singularity where `b - x` formed from `x` alone would cancel to zero.
pub fn integrate_endpoint_singular(
    f: &dyn Fn(f64, f64, f64) -> f64,
    a: f64,
    b: f64,
    alpha_a: f64,
    alpha_b: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    if alpha_a >= 1.0 || alpha_b >= 1.0 {
        return Err(Error::Divergent(format!(
            "endpoint exponent >= 1 (left {alpha_a}, right {alpha_b})"
        )));
    }
    let mid = 0.5 * (a + b);
    // Left: x = a + (mid-a) u^p, p chosen so the transformed integrand is bounded.
    // In a rounding neighborhood of the endpoint the substituted abscissa
    // collapses onto the endpoint itself and `f` may evaluate non-finite;
    // the transformed integrand vanishes there, so those samples are
    // clamped to zero.
    let guard = |v: f64| if v.is_finite() { v } else { 0.0 };
    // Exponent 3/(1-alpha) makes the transformed integrand vanish like u^2
    // at the endpoint, so the adaptive rule converges at its regular order
    // instead of fighting a residual fractional power.
    let pl = 3.0 / (1.0 - alpha_a);
    let left = |u: f64| {
        let da = (mid - a) * u.powf(pl);
        let x = a + da;
        guard(f(x, da, b - x) * (mid - a) * pl * u.powf(pl - 1.0))
    };
    let pr = 3.0 / (1.0 - alpha_b);
    let right = |u: f64| {
        let db = (b - mid) * u.powf(pr);
        let x = b - db;
        guard(f(x, x - a, db) * (b - mid) * pr * u.powf(pr - 1.0))
    };
    let eps = 1e-14;
    let (vl, el) = adaptive_simpson(&left, eps, 1.0, tol / 2.0, 24)?;
    let (vr, er) = adaptive_simpson(&right, eps, 1.0, tol / 2.0, 24)?;
    Ok((vl + vr, el + er))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_exact_for_polynomials() {
        // order-n rule integrates degree 2n-1 exactly
        let exact = 2.0 / 6.0 + 2.0 / 4.0 * 0.0; // int_{-1}^{1} x^4/... keep simple below
        let _ = exact;
        let v = gauss_legendre_integrate(|x| x.powi(6) + x.powi(3), -1.0, 1.0, 4);
        assert_relative_eq!(v, 2.0 / 7.0, epsilon = 1e-13);
        let v = gauss_legendre_integrate(|x| x.exp(), 0.0, 1.0, 12);
        assert_relative_eq!(v, std::f64::consts::E - 1.0, epsilon = 1e-13);
    }

    #[test]
    fn adaptive_simpson_smooth() {
        let (v, _) = adaptive_simpson(&|x: f64| (3.0 * x).sin(), 0.0, 2.0, 1e-12, 40).unwrap();
        assert_relative_eq!(v, (1.0 - (6.0_f64).cos()) / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn endpoint_singular_beta_integrand() {
        // int_0^1 x^{-1/2} (1-x)^{-1/3} dx = B(1/2, 2/3)
        let f = |_x: f64, da: f64, db: f64| da.powf(-0.5) * db.powf(-1.0 / 3.0);
        let (v, _) = integrate_endpoint_singular(&f, 0.0, 1.0, 0.5, 1.0 / 3.0, 1e-11).unwrap();
        let exact = statrs::function::beta::beta(0.5, 2.0 / 3.0);
        assert_relative_eq!(v, exact, epsilon = 1e-8);
    }

    #[test]
    fn endpoint_singular_rejects_nonintegrable() {
        let f = |_x: f64, da: f64, _db: f64| da.powf(-1.2);
        assert!(integrate_endpoint_singular(&f, 0.0, 1.0, 1.2, 0.0, 1e-8).is_err());
    }

    #[test]
    fn graded_mesh_monotone_and_clustered() {
        let m = graded_mesh(0.0, 1.0, 64, 4.0, false);
        assert_eq!(m.len(), 65);
        assert!(m.windows(2).all(|w| w[1] > w[0]));
        assert!(m[1] < 1e-6); // 4th-power clustering at the left end
        let m2 = graded_mesh(0.0, 1.0, 64, 4.0, true);
        assert!(m2[1] < 1e-6 && 1.0 - m2[63] < 1e-6);
    }
}
