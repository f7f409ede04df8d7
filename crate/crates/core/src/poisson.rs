//! Macroscopic density, self-consistent force field, Lp norms, and the
//! field self-convolution bound.
//!
//! The field solves `E = omega * K_d ∗ rho` with the free-space kernels
//! `K_3(x) = x/(4 pi |x|^3)`, `K_2(x) = x/(2 pi |x|^2)`,
//! `K_1(x) = sign(x)/2`. Free-space (not periodic) boundary conditions:
//! d = 1 uses exact prefix sums, d = 2 a zero-padded FFT convolution with
//! the sampled kernel, and d = 3 a spherically truncated Green's function
//! applied in Fourier space on a 3x-padded grid, which is spectrally
//! accurate for smooth compactly supported densities.

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, FieldGrid, PhaseDensity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

/// Velocity marginal rho(x) = int f dv. Cell sums (midpoint rule) so the
/// marginal's total mass equals the phase-space mass to roundoff.
pub fn velocity_marginal(f: &PhaseDensity) -> DensityGrid {
    let d = f.grid.dim;
    let nx: usize = f.grid.x[..d].iter().map(|a| a.n).product();
    let nv: usize = f.grid.v[..d].iter().map(|a| a.n).product();
    let dv: f64 = f.grid.v[..d].iter().map(|a| a.h()).product();
    let mut values = vec![0.0; nx];
    for (i, value) in values.iter_mut().enumerate() {
        let block = &f.values[i * nv..(i + 1) * nv];
        *value = block.iter().sum::<f64>() * dv;
    }
    DensityGrid { dim: d, axes: f.grid.x, values }
}

/// Fraction of the total mass sitting in the outermost cell layer; a proxy
/// for the free-space truncation error when the support approaches the
/// boundary.
pub fn boundary_mass_fraction(rho: &DensityGrid) -> f64 {
    let d = rho.dim;
    let total: f64 = rho.values.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut boundary = 0.0;
    for (flat, v) in rho.values.iter().enumerate() {
        let mut rem = flat;
        let mut idx = [0usize; 3];
        for i in (0..d).rev() {
            idx[i] = rem % rho.axes[i].n;
            rem /= rho.axes[i].n;
        }
        if (0..d).any(|i| idx[i] == 0 || idx[i] == rho.axes[i].n - 1) {
            boundary += v.abs();
        }
    }
    boundary / total
}

/// Solve for the self-consistent field from the density;
/// `omega = +1` Coulombic, `-1` gravitational.
pub fn solve_field(rho: &DensityGrid, omega: i32) -> Result<FieldGrid> {
    if omega != 1 && omega != -1 {
        return Err(Error::InvalidParameter(format!("omega must be +1 or -1, got {omega}")));
    }
    match rho.dim {
        1 => Ok(solve_field_1d(rho, omega)),
        2 => Ok(solve_field_2d(rho, omega)),
        3 => Ok(solve_field_3d(rho, omega)),
        d => Err(Error::InvalidParameter(format!("unsupported dimension {d}"))),
    }
}

/// d = 1: E(x) = (omega/2) int sign(x - y) rho(y) dy. With cell-centered
/// values the self-cell contributes exactly zero (the center bisects the
/// cell), so prefix sums give the exact field of the piecewise-constant
/// density at every center.
fn solve_field_1d(rho: &DensityGrid, omega: i32) -> FieldGrid {
    let n = rho.axes[0].n;
    let h = rho.axes[0].h();
    let total: f64 = rho.values.iter().sum();
    let mut values = vec![0.0; n];
    let mut left = 0.0;
    for i in 0..n {
        let right = total - left - rho.values[i];
        values[i] = 0.5 * omega as f64 * (left - right) * h;
        left += rho.values[i];
    }
    FieldGrid { dim: 1, axes: rho.axes, values, omega }
}

/// In-place complex FFT along every axis of a row-major nd array.
fn fft_nd(data: &mut [Complex<f64>], dims: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    let total: usize = dims.iter().product();
    for (axis, &n) in dims.iter().enumerate() {
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let inner: usize = dims[axis + 1..].iter().product();
        let outer = total / (n * inner);
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for j in 0..n {
                    line[j] = data[base + j * inner];
                }
                fft.process(&mut line);
                for j in 0..n {
                    data[base + j * inner] = line[j];
                }
            }
        }
    }
    if inverse {
        let scale = 1.0 / total as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// d = 2: zero-padded circular convolution with the sampled kernel
/// `omega * z / (2 pi |z|^2)`; the singular cell is zero by oddness.
fn solve_field_2d(rho: &DensityGrid, omega: i32) -> FieldGrid {
    let (n0, n1) = (rho.axes[0].n, rho.axes[1].n);
    let (h0, h1) = (rho.axes[0].h(), rho.axes[1].h());
    let (m0, m1) = (2 * n0, 2 * n1);
    let dims = [m0, m1];
    let mut rho_hat = vec![Complex::new(0.0, 0.0); m0 * m1];
    for i in 0..n0 {
        for j in 0..n1 {
            rho_hat[i * m1 + j] = Complex::new(rho.values[i * n1 + j], 0.0);
        }
    }
    fft_nd(&mut rho_hat, &dims, false);
    let cell = h0 * h1;
    let mut values = vec![0.0; 2 * n0 * n1];
    for c in 0..2 {
        let mut ker = vec![Complex::new(0.0, 0.0); m0 * m1];
        for i in 0..m0 {
            // wrap-around offset ordering
            let oi = if i < m0 / 2 { i as i64 } else { i as i64 - m0 as i64 };
            for j in 0..m1 {
                let oj = if j < m1 / 2 { j as i64 } else { j as i64 - m1 as i64 };
                let z = [oi as f64 * h0, oj as f64 * h1];
                let r2 = z[0] * z[0] + z[1] * z[1];
                if r2 > 0.0 {
                    ker[i * m1 + j] = Complex::new(
                        omega as f64 * z[c] / (2.0 * std::f64::consts::PI * r2) * cell,
                        0.0,
                    );
                }
            }
        }
        fft_nd(&mut ker, &dims, false);
        for (k, r) in ker.iter_mut().zip(&rho_hat) {
            *k *= r;
        }
        fft_nd(&mut ker, &dims, true);
        for i in 0..n0 {
            for j in 0..n1 {
                values[c * n0 * n1 + i * n1 + j] = ker[i * m1 + j].re;
            }
        }
    }
    FieldGrid { dim: 2, axes: rho.axes, values, omega }
}

/// d = 3: spherically truncated Green's function in Fourier space.
///
/// The free-space potential kernel `1/(4 pi r)` truncated at radius L has
/// the smooth transform `(1 - cos(L k))/k^2`; with L at least the diameter
/// of the computational box and 3x zero padding, the circular convolution
/// reproduces the free-space field with spectral accuracy. The field
/// follows from `E_c = -i k_c V` in Fourier space.
fn solve_field_3d(rho: &DensityGrid, omega: i32) -> FieldGrid {
    let n: [usize; 3] = [rho.axes[0].n, rho.axes[1].n, rho.axes[2].n];
    let h: [f64; 3] = [rho.axes[0].h(), rho.axes[1].h(), rho.axes[2].h()];
    let m: [usize; 3] = [3 * n[0], 3 * n[1], 3 * n[2]];
    let dims = [m[0], m[1], m[2]];
    // truncation radius: the box diameter (sqrt(3) * max side)
    let diam = (0..3)
        .map(|i| rho.axes[i].max - rho.axes[i].min)
        .fold(0.0f64, f64::max)
        * 3.0f64.sqrt();
    // No cell-volume factors: pairing the raw DFT of the samples with the
    // continuous kernel transform makes the inverse DFT a trapezoid
    // discretization of the Fourier inversion integral.
    let mut rho_hat = vec![Complex::new(0.0, 0.0); m[0] * m[1] * m[2]];
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                rho_hat[(i * m[1] + j) * m[2] + k] =
                    Complex::new(rho.values[(i * n[1] + j) * n[2] + k], 0.0);
            }
        }
    }
    fft_nd(&mut rho_hat, &dims, false);
    // potential spectrum
    let freq = |i: usize, axis: usize| -> f64 {
        let mi = m[axis];
        let f = if i < mi / 2 { i as i64 } else { i as i64 - mi as i64 };
        2.0 * std::f64::consts::PI * f as f64 / (mi as f64 * h[axis])
    };
    let ncells = n[0] * n[1] * n[2];
    let mut values = vec![0.0; 3 * ncells];
    let mut v_hat = vec![Complex::new(0.0, 0.0); rho_hat.len()];
    for i in 0..m[0] {
        let k0 = freq(i, 0);
        for j in 0..m[1] {
            let k1 = freq(j, 1);
            for k in 0..m[2] {
                let k2 = freq(k, 2);
                let k2norm = k0 * k0 + k1 * k1 + k2 * k2;
                let kmag = k2norm.sqrt();
                let green = if kmag * diam < 1e-6 {
                    // series of (1 - cos(Lk))/k^2 at k -> 0
                    0.5 * diam * diam
                } else {
                    (1.0 - (diam * kmag).cos()) / k2norm
                };
                let idx = (i * m[1] + j) * m[2] + k;
                v_hat[idx] = rho_hat[idx] * (omega as f64 * green);
            }
        }
    }
    for c in 0..3 {
        let mut e_hat: Vec<Complex<f64>> = v_hat.clone();
        for i in 0..m[0] {
            for j in 0..m[1] {
                for k in 0..m[2] {
                    let kc = match c {
                        0 => freq(i, 0),
                        1 => freq(j, 1),
                        _ => freq(k, 2),
                    };
                    let idx = (i * m[1] + j) * m[2] + k;
                    // E = -grad V  =>  E_c = -i k_c V in Fourier space
                    e_hat[idx] *= Complex::new(0.0, -kc);
                }
            }
        }
        fft_nd(&mut e_hat, &dims, true);
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    values[c * ncells + (i * n[1] + j) * n[2] + k] =
                        e_hat[(i * m[1] + j) * m[2] + k].re;
                }
            }
        }
    }
    FieldGrid { dim: 3, axes: rho.axes, values, omega }
}

/// Max over interior cells (2-cell margin) of
/// `|div E - omega rho|`, divergence by centered differences.
pub fn gauss_law_residual(e: &FieldGrid, rho: &DensityGrid) -> Result<f64> {
    if e.dim != rho.dim || e.axes[..e.dim] != rho.axes[..rho.dim] {
        return Err(Error::GridMismatch("field and density grids differ".into()));
    }
    let d = e.dim;
    let n: Vec<usize> = (0..d).map(|i| e.axes[i].n).collect();
    let ncells = e.ncells();
    let mut worst: f64 = 0.0;
    let mut idx = vec![0usize; d];
    for flat in 0..ncells {
        let mut rem = flat;
        for i in (0..d).rev() {
            idx[i] = rem % n[i];
            rem /= n[i];
        }
        if (0..d).any(|i| idx[i] < 2 || idx[i] + 2 >= n[i]) {
            continue;
        }
        let mut div = 0.0;
        for c in 0..d {
            let stride: usize = n[c + 1..].iter().product();
            let comp = e.component(c);
            div += (comp[flat + stride] - comp[flat - stride]) / (2.0 * e.axes[c].h());
        }
        worst = worst.max((div - e.omega as f64 * rho.values[flat]).abs());
    }
    Ok(worst)
}

/// Discrete Lr norm with cell-volume weighting; `r = inf` is the max of
/// absolute values.
pub fn lp_norm(values: &[f64], cell_volume: f64, r: f64) -> Result<f64> {
    if !(r >= 1.0) {
        return Err(Error::InvalidParameter(format!("Lp exponent must be >= 1, got {r}")));
    }
    if r.is_infinite() {
        return Ok(values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let sum: f64 = values.iter().map(|v| v.abs().powf(r)).sum();
    Ok((sum * cell_volume).powf(1.0 / r))
}

/// Pointwise magnitude |E| of a field grid.
pub fn field_magnitude(e: &FieldGrid) -> Vec<f64> {
    let n = e.ncells();
    let mut mag = vec![0.0; n];
    for c in 0..e.dim {
        let comp = e.component(c);
        for (m, v) in mag.iter_mut().zip(comp) {
            *m += v * v;
        }
    }
    for m in mag.iter_mut() {
        *m = m.sqrt();
    }
    mag
}

/// Result of [`field_selfconvolution_bound`]: the directly summed sup of
/// `|int E(y) . (y - x)/|x - y|^3 dy|` and its Hoelder-split certificate.
#[derive(Debug, Clone, Copy)]
pub struct SelfConvolutionBound {
    pub direct_sup: f64,
    pub certificate: f64,
    pub r: f64,
    pub p: f64,
}

/// Sup over grid points of the field self-convolution, with the two-norm
/// Hoelder certificate `||E||_r ||z^{-2} 1_{|z|>=1}||_{r'} +
/// ||E||_p ||z^{-2} 1_{|z|<=1}||_{p'}`; requires `1 < r < 3 < p`.
pub fn field_selfconvolution_bound(e: &FieldGrid, r: f64, p: f64) -> Result<SelfConvolutionBound> {
    if e.dim != 3 {
        return Err(Error::InvalidParameter(
            "field self-convolution bound is specific to d = 3".into(),
        ));
    }
    if !(1.0 < r && r < 3.0 && p > 3.0) {
        return Err(Error::InvalidParameter(format!(
            "exponents must satisfy 1 < r < 3 < p, got r = {r}, p = {p}"
        )));
    }
    let n: [usize; 3] = [e.axes[0].n, e.axes[1].n, e.axes[2].n];
    let h: [f64; 3] = [e.axes[0].h(), e.axes[1].h(), e.axes[2].h()];
    let cell = h[0] * h[1] * h[2];
    let ncells = e.ncells();
    let comps: [&[f64]; 3] = [e.component(0), e.component(1), e.component(2)];
    let coords = |flat: usize| -> [i64; 3] {
        let k = flat % n[2];
        let j = (flat / n[2]) % n[1];
        let i = flat / (n[1] * n[2]);
        [i as i64, j as i64, k as i64]
    };
    let mut direct_sup: f64 = 0.0;
    for xf in 0..ncells {
        let xi = coords(xf);
        let mut acc = 0.0;
        for yf in 0..ncells {
            if yf == xf {
                continue; // singular cell: cell average of the odd kernel is zero
            }
            let yi = coords(yf);
            let z = [
                (yi[0] - xi[0]) as f64 * h[0],
                (yi[1] - xi[1]) as f64 * h[1],
                (yi[2] - xi[2]) as f64 * h[2],
            ];
            let rr = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
            let dot = comps[0][yf] * z[0] + comps[1][yf] * z[1] + comps[2][yf] * z[2];
            acc += dot / (rr * rr * rr);
        }
        direct_sup = direct_sup.max((acc * cell).abs());
    }
    // closed-form norms of |z|^{-2} on the two regions
    let rp = r / (r - 1.0);
    let pp = p / (p - 1.0);
    let four_pi = 4.0 * std::f64::consts::PI;
    let far = (four_pi / (2.0 * rp - 3.0)).powf(1.0 / rp);
    let near = (four_pi / (3.0 - 2.0 * pp)).powf(1.0 / pp);
    let mag = field_magnitude(e);
    let certificate = lp_norm(&mag, cell, r)? * far + lp_norm(&mag, cell, p)? * near;
    Ok(SelfConvolutionBound { direct_sup, certificate, r, p })
}

/// Power-law fit of a norm time series.
#[derive(Debug, Clone, Copy)]
pub struct DecayFit {
    /// fitted decay exponent: norm ~ C t^{-alpha}
    pub alpha: f64,
    pub constant: f64,
    /// bootstrap percentile confidence interval on alpha (2.5% / 97.5%)
    pub ci: (f64, f64),
    pub samples_used: usize,
}

/// Least-squares fit of `log norm` against `log t` on the window, with a
/// bootstrap confidence interval over sample resampling.
pub fn decay_fit(series: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .cloned()
        .collect();
    if pts.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "decay fit needs >= 5 samples in the window, got {}",
            pts.len()
        )));
    }
    if pts.iter().any(|(t, v)| *t <= 0.0 || *v <= 0.0) {
        return Err(Error::InvalidParameter(
            "decay fit requires positive times and norms".into(),
        ));
    }
    let logs: Vec<(f64, f64)> = pts.iter().map(|(t, v)| (t.ln(), v.ln())).collect();
    let fit = |data: &[(f64, f64)]| -> (f64, f64) {
        let n = data.len() as f64;
        let sx: f64 = data.iter().map(|p| p.0).sum();
        let sy: f64 = data.iter().map(|p| p.1).sum();
        let sxx: f64 = data.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = data.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        (slope, intercept)
    };
    let (slope, intercept) = fit(&logs);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_deca_f1ed);
    let nboot = 400;
    let mut alphas: Vec<f64> = (0..nboot)
        .map(|_| {
            let sample: Vec<(f64, f64)> =
                (0..logs.len()).map(|_| logs[rng.gen_range(0..logs.len())]).collect();
            -fit(&sample).0
        })
        .collect();
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = alphas[(nboot as f64 * 0.025) as usize];
    let hi = alphas[(nboot as f64 * 0.975) as usize];
    Ok(DecayFit {
        alpha: -slope,
        constant: intercept.exp(),
        ci: (lo, hi),
        samples_used: pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis1, PhaseGrid};
    use approx::assert_relative_eq;

    #[test]
    fn marginal_of_separable_density() {
        let ax = Axis1::new(-4.0, 4.0, 32).unwrap();
        let av = Axis1::new(-6.0, 6.0, 48).unwrap();
        let grid = PhaseGrid::isotropic(1, ax, av).unwrap();
        let hv = av.h();
        // g(v): discrete unit mass by construction
        let norm: f64 = av.centers().iter().map(|v| (-0.5 * v * v).exp()).sum::<f64>() * hv;
        let f = PhaseDensity::from_fn(grid, 0.0, |x, v| {
            (1.0 + x[0] * x[0]).recip() * (-0.5 * v[0] * v[0]).exp() / norm
        });
        let rho = velocity_marginal(&f);
        for (i, &x) in ax.centers().iter().enumerate() {
            assert_relative_eq!(rho.values[i], (1.0 + x * x).recip(), max_relative = 1e-12);
        }
        assert_relative_eq!(rho.total_mass(), f.mass(), max_relative = 1e-13);
    }

    #[test]
    fn marginal_of_zero_is_zero() {
        let ax = Axis1::new(-1.0, 1.0, 8).unwrap();
        let grid = PhaseGrid::isotropic(2, ax, ax).unwrap();
        let f = PhaseDensity::zeros(grid, 0.0);
        assert!(velocity_marginal(&f).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slab_field_closed_form_1d() {
        // rho = 1/2 on [-1, 1]: E = x/2 inside, sign(x)/2 outside
        let ax = Axis1::new(-2.0, 2.0, 80).unwrap();
        let values: Vec<f64> =
            ax.centers().iter().map(|&x| if x.abs() < 1.0 { 0.5 } else { 0.0 }).collect();
        let rho = DensityGrid::new(1, [ax; 3], values).unwrap();
        let e = solve_field(&rho, 1).unwrap();
        for (i, &x) in ax.centers().iter().enumerate() {
            let exact = if x.abs() < 1.0 { x / 2.0 } else { 0.5 * x.signum() };
            assert!((e.values[i] - exact).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn even_density_gives_odd_field() {
        let ax = Axis1::new(-3.0, 3.0, 60).unwrap();
        let values: Vec<f64> = ax.centers().iter().map(|&x| (-x * x).exp()).collect();
        let rho = DensityGrid::new(1, [ax; 3], values).unwrap();
        let e = solve_field(&rho, -1).unwrap();
        let n = ax.n;
        for i in 0..n {
            assert_relative_eq!(e.values[i], -e.values[n - 1 - i], epsilon = 1e-12);
        }
    }

    /// Radial field of an isotropic unit-mass Gaussian from the enclosed
    /// mass: M(r) = erf(r/sqrt(2) s) - sqrt(2/pi) (r/s) exp(-r^2/2 s^2).
    fn gaussian_radial_field(r: f64, s: f64) -> f64 {
        let m = statrs::function::erf::erf(r / (s * 2.0f64.sqrt()))
            - (2.0 / std::f64::consts::PI).sqrt() * (r / s) * (-0.5 * r * r / (s * s)).exp();
        m / (4.0 * std::f64::consts::PI * r * r)
    }

    #[test]
    fn gaussian_field_3d_matches_enclosed_mass() {
        let n = 32;
        let ax = Axis1::new(-6.0, 6.0, n).unwrap();
        let norm = (2.0 * std::f64::consts::PI).powf(1.5);
        let mut values = vec![0.0; n * n * n];
        let c = ax.centers();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let r2 = c[i] * c[i] + c[j] * c[j] + c[k] * c[k];
                    values[(i * n + j) * n + k] = (-0.5 * r2).exp() / norm;
                }
            }
        }
        let rho = DensityGrid::new(3, [ax; 3], values).unwrap();
        let e = solve_field(&rho, 1).unwrap();
        // compare the full vector field at a few interior grid points
        for (i, j, k) in [(18, 16, 16), (20, 17, 15), (16, 21, 18)] {
            let x = [c[i], c[j], c[k]];
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let er = gaussian_radial_field(r, 1.0);
            let flat = (i * n + j) * n + k;
            for comp in 0..3 {
                let exact = er * x[comp] / r;
                assert!(
                    (e.component(comp)[flat] - exact).abs() < 1e-4 * er.max(1e-3),
                    "component {comp} at r = {r}: {} vs {exact}",
                    e.component(comp)[flat]
                );
            }
        }
    }

    #[test]
    fn gauss_law_second_order() {
        let run = |n: usize| -> f64 {
            let ax = Axis1::new(-6.0, 6.0, n).unwrap();
            let norm = (2.0 * std::f64::consts::PI).powf(1.5);
            let c = ax.centers();
            let mut values = vec![0.0; n * n * n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let r2 = c[i] * c[i] + c[j] * c[j] + c[k] * c[k];
                        values[(i * n + j) * n + k] = (-0.5 * r2).exp() / norm;
                    }
                }
            }
            let rho = DensityGrid::new(3, [ax; 3], values).unwrap();
            let e = solve_field(&rho, 1).unwrap();
            gauss_law_residual(&e, &rho).unwrap()
        };
        let r1 = run(24);
        let r2 = run(48);
        assert!(r2 < r1 / 3.0, "residuals {r1} {r2}");
    }

    #[test]
    fn lp_norm_unit_indicator() {
        // indicator of a set of cells with total volume 1
        let values = vec![1.0; 10];
        for r in [1.0, 2.0, 5.0, f64::INFINITY] {
            assert_relative_eq!(lp_norm(&values, 0.1, r).unwrap(), 1.0, epsilon = 1e-13);
        }
        assert!(lp_norm(&values, 0.1, 0.5).is_err());
    }

    #[test]
    fn lp_norm_gaussian_closed_form() {
        let ax = Axis1::new(-10.0, 10.0, 400).unwrap();
        let values: Vec<f64> = ax.centers().iter().map(|&x| (-0.5 * x * x).exp()).collect();
        for r in [1.0, 2.0, 3.0] {
            let exact = (2.0 * std::f64::consts::PI / r).sqrt().powf(1.0 / r);
            assert_relative_eq!(lp_norm(&values, ax.h(), r).unwrap(), exact, max_relative = 1e-8);
        }
    }

    #[test]
    fn lp_norm_log_convex() {
        let ax = Axis1::new(-5.0, 5.0, 100).unwrap();
        let values: Vec<f64> =
            ax.centers().iter().map(|&x| (1.0 + x.abs()).recip()).collect();
        let l1 = lp_norm(&values, ax.h(), 1.0).unwrap();
        let l2 = lp_norm(&values, ax.h(), 2.0).unwrap();
        let li = lp_norm(&values, ax.h(), f64::INFINITY).unwrap();
        assert!(l2 * l2 <= l1 * li * (1.0 + 1e-12));
    }

    #[test]
    fn selfconvolution_zero_field() {
        let ax = Axis1::new(-1.0, 1.0, 8).unwrap();
        let e = FieldGrid { dim: 3, axes: [ax; 3], values: vec![0.0; 3 * 512], omega: 1 };
        let b = field_selfconvolution_bound(&e, 2.0, 3.5).unwrap();
        assert_eq!(b.direct_sup, 0.0);
        assert_eq!(b.certificate, 0.0);
    }

    #[test]
    fn selfconvolution_certificate_dominates() {
        // compact radial bump field
        let n = 12;
        let ax = Axis1::new(-2.0, 2.0, n).unwrap();
        let c = ax.centers();
        let mut values = vec![0.0; 3 * n * n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let r2 = c[i] * c[i] + c[j] * c[j] + c[k] * c[k];
                    let amp = (1.0 - r2).max(0.0);
                    let flat = (i * n + j) * n + k;
                    let x = [c[i], c[j], c[k]];
                    for comp in 0..3 {
                        values[comp * n * n * n + flat] = amp * x[comp];
                    }
                }
            }
        }
        let e = FieldGrid { dim: 3, axes: [ax; 3], values, omega: 1 };
        let b = field_selfconvolution_bound(&e, 2.0, 3.5).unwrap();
        assert!(b.direct_sup > 0.0);
        assert!(b.direct_sup <= b.certificate, "{} > {}", b.direct_sup, b.certificate);
        // exponent windows enforced
        assert!(field_selfconvolution_bound(&e, 3.5, 3.5).is_err());
        let ax1 = Axis1::new(-1.0, 1.0, 4).unwrap();
        let e1 = FieldGrid { dim: 1, axes: [ax1; 3], values: vec![0.0; 4], omega: 1 };
        assert!(field_selfconvolution_bound(&e1, 2.0, 3.5).is_err());
    }

    #[test]
    fn decay_fit_recovers_synthetic_exponent() {
        let series: Vec<(f64, f64)> = (1..=40)
            .map(|i| {
                let t = 0.05 * i as f64;
                // mild deterministic wiggle so the bootstrap CI is nondegenerate
                (t, t.powf(-0.5) * (1.0 + 0.01 * (7.0 * t).sin()))
            })
            .collect();
        let fit = decay_fit(&series, (0.0, 10.0)).unwrap();
        assert!((fit.alpha - 0.5).abs() < 0.02, "alpha {}", fit.alpha);
        assert!(fit.ci.0 <= fit.alpha && fit.alpha <= fit.ci.1);
    }

    #[test]
    fn decay_fit_constant_series() {
        let series: Vec<(f64, f64)> = (1..=10).map(|i| (i as f64 * 0.1, 3.0)).collect();
        let fit = decay_fit(&series, (0.0, 2.0)).unwrap();
        assert!(fit.alpha.abs() < 1e-12);
        assert_relative_eq!(fit.constant, 3.0, max_relative = 1e-12);
    }

    #[test]
    fn decay_fit_rejects_short_or_invalid() {
        let short: Vec<(f64, f64)> = (1..=4).map(|i| (i as f64, 1.0)).collect();
        assert!(decay_fit(&short, (0.0, 10.0)).is_err());
        let bad: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 1.0)).collect();
        assert!(decay_fit(&bad, (0.0, 10.0)).is_err()); // t = 0 sample
    }

    #[test]
    fn boundary_mass_detection() {
        let ax = Axis1::new(-1.0, 1.0, 10).unwrap();
        let mut interior = vec![0.0; 10];
        interior[5] = 1.0;
        let rho = DensityGrid::new(1, [ax; 3], interior).unwrap();
        assert_eq!(boundary_mass_fraction(&rho), 0.0);
        let mut edge = vec![0.0; 10];
        edge[0] = 1.0;
        let rho = DensityGrid::new(1, [ax; 3], edge).unwrap();
        assert_eq!(boundary_mass_fraction(&rho), 1.0);
    }
}
