//! Self-consistent Vlasov-Poisson-Fokker-Planck solver.
//!
//! Two realizations of the dynamics share one configuration type: a
//! deterministic phase-grid scheme (exact free-kernel convolution composed
//! with semi-Lagrangian field kicks, Strang or Lie ordering) and a
//! stochastic particle oracle (cloud-in-cell deposition plus
//! Euler-Maruyama Langevin updates with counter-based per-particle RNG
//! streams). The module also houses the weak-form residual, velocity
//! moments, the moment-inequality and velocity-regularity checks, and the
//! paired-run uniqueness experiment.

use crate::diag::{DiagRow, Diagnostics};
use crate::error::{Error, Result};
use crate::grid::{Axis1, DensityGrid, FieldGrid, PhaseDensity, PhaseGrid};
use crate::kernel::{CoordCovariance, KernelSpec};
use crate::poisson::{field_magnitude, lp_norm, solve_field, velocity_marginal};
use crate::quad::{gauss_legendre, integrate_endpoint_singular};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// half field-kick, exact kernel convolution, half field-kick
    StrangKernelSplit,
    /// full field-kick then kernel convolution
    LieSplit,
    /// stochastic particle ensemble (Euler-Maruyama)
    ParticleEM,
}

/// Shared configuration of the grid and particle solvers.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub spec: KernelSpec,
    /// +1 Coulombic, -1 gravitational
    pub omega: i32,
    pub grid: PhaseGrid,
    pub dt: f64,
    pub scheme: Scheme,
    pub horizon: f64,
    /// snapshot every this many steps (0 = first and last only)
    pub snapshot_every: usize,
    /// multiplies the self-consistent field; 0 disables it (free dynamics)
    pub field_scale: f64,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt) {
            return Err(Error::InvalidParameter(format!(
                "horizon {} shorter than one step {}",
                self.horizon, self.dt
            )));
        }
        if self.omega != 1 && self.omega != -1 {
            return Err(Error::InvalidParameter(format!("omega must be +-1, got {}", self.omega)));
        }
        if !(self.field_scale >= 0.0) || !self.field_scale.is_finite() {
            return Err(Error::InvalidParameter("field_scale must be finite and >= 0".into()));
        }
        if self.grid.dim != self.spec.params.dim {
            return Err(Error::GridMismatch(format!(
                "grid dim {} != model dim {}",
                self.grid.dim, self.spec.params.dim
            )));
        }
        if self.scheme != Scheme::ParticleEM && self.grid.dim > 2 {
            return Err(Error::InvalidParameter(
                "deterministic grid runs support dim <= 2; use the particle scheme for d = 3"
                    .into(),
            ));
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }
}

// ---------------------------------------------------------------------------
// kernel convolution step
// ---------------------------------------------------------------------------

/// Precomputed free-kernel step over one `dt`, per phase coordinate.
///
/// The per-coordinate transition law `x = x1 + cxv v1 + eta_x`,
/// `v = cvv v1 + eta_v` is factored exactly (by conditioning, not
/// operator splitting) into five stages: a conservative velocity stretch
/// `v -> cvv v`, an x-shear by the decorrelated part of the velocity, a
/// velocity blur of width `sqrt(Svv)`, a second x-shear by the regression
/// coefficient times the post-blur velocity, and a final x-blur of the
/// conditional width `sqrt(det/Svv)`. All five stages act on the
/// cumulative mass function, interpolated by quintic Lagrange polynomials
/// on the edge grid: shears and stretches evaluate it at transported
/// edges, blurs average it against the Gaussian (the cumulative of a
/// blurred density is the blurred cumulative). Mass is conserved by
/// telescoping, sub-cell shifts are never rounded away, second moments
/// carry no grid bias, and the blur reduces exactly to the identity as
/// the width vanishes. Mass leaving the domain at any stage is returned
/// as escaped mass, and `mass + escaped` is conserved to rounding.
#[derive(Debug, Clone)]
pub struct KernelStepOp {
    grid: PhaseGrid,
    pub dt: f64,
    coords: Vec<CoordStep>,
    /// quadrature of the standard normal weight: `(u_k, w_k)`,
    /// `sum w_k = 1`
    gauss_quad: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct CoordStep {
    cvv: f64,
    /// x-shear per unit pre-blur velocity: `cxv/cvv - Sxv/Svv`
    shear1: f64,
    /// x-shear per unit post-blur velocity: `Sxv/Svv`
    shear2: f64,
    /// velocity blur width `sqrt(Svv)`
    wv: f64,
    /// conditional position blur width `sqrt(det/Svv)`
    wx: f64,
}

/// Nodes and weights for `int g(u) phi(u) du` over the standard normal
/// weight `phi`, by composite Gauss-Legendre on [-8, 8]; weights are
/// normalized to sum exactly to one so a constant integrand is exact.
fn standard_normal_quad() -> Vec<(f64, f64)> {
    let (xs, ws) = gauss_legendre(8);
    let panels = 32;
    let width = 16.0 / panels as f64;
    let mut nodes = Vec::with_capacity(panels * xs.len());
    for p in 0..panels {
        let mid = -8.0 + (p as f64 + 0.5) * width;
        for (x, w) in xs.iter().zip(&ws) {
            let u = mid + 0.5 * width * x;
            let phi = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
            nodes.push((u, w * 0.5 * width * phi));
        }
    }
    let total: f64 = nodes.iter().map(|&(_, w)| w).sum();
    nodes.iter_mut().for_each(|n| n.1 /= total);
    nodes
}

/// Quintic-interpolated cumulative mass function of a line of cell
/// masses-per-length, clamped to 0 below the axis and to the total above.
struct CumLine<'a> {
    axis: &'a Axis1,
    cum: Vec<f64>,
}

impl<'a> CumLine<'a> {
    fn new(vals: &[f64], axis: &'a Axis1) -> Self {
        let n = axis.n;
        debug_assert!(n >= 7, "cumulative interpolation needs at least 7 cells");
        let h = axis.h();
        let mut cum = vec![0.0; n + 1];
        for i in 0..n {
            cum[i + 1] = cum[i] + vals[i] * h;
        }
        Self { axis, cum }
    }

    fn total(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn eval(&self, y: f64) -> f64 {
        let (n, h) = (self.axis.n, self.axis.h());
        if y <= self.axis.min {
            return 0.0;
        }
        if y >= self.axis.max {
            return self.total();
        }
        let q = (y - self.axis.min) / h;
        let j = (q.floor() as isize).clamp(0, n as isize - 1) as usize;
        let lo = (j as isize - 3).clamp(0, n as isize - 7) as usize;
        let t = q - lo as f64;
        let mut out = 0.0;
        for m in 0..8 {
            let mut lw = 1.0;
            for k in 0..8 {
                if k != m {
                    lw *= (t - k as f64) / (m as f64 - k as f64);
                }
            }
            out += lw * self.cum[lo + m];
        }
        out
    }
}

/// Conservative semi-Lagrangian remap of a 1-d line of cell-averaged
/// values: the new mass of cell j is `F(pre(e_{j+1})) - F(pre(e_j))`,
/// with `pre` the (monotone increasing) preimage map of the transport and
/// `F` the quintic cumulative. Returns the remapped values and the mass
/// carried outside the axis (in value-times-h units).
fn remap_line(vals: &[f64], axis: &Axis1, pre: impl Fn(f64) -> f64) -> (Vec<f64>, f64) {
    let f = CumLine::new(vals, axis);
    let (n, h) = (axis.n, axis.h());
    let mut out = vec![0.0; n];
    let mut inside = 0.0;
    let mut prev = f.eval(pre(axis.edge(0)));
    for (j, o) in out.iter_mut().enumerate() {
        let next = f.eval(pre(axis.edge(j + 1)));
        *o = (next - prev) / h;
        inside += next - prev;
        prev = next;
    }
    (out, f.total() - inside)
}

/// Gaussian blur of width `w` of a 1-d line of cell-averaged values via
/// the cumulative: `F_blurred(e) = int F(e - w u) phi(u) du`. Returns the
/// blurred values and the escaped mass (in value-times-h units).
fn blur_line(vals: &[f64], axis: &Axis1, w: f64, quad: &[(f64, f64)]) -> (Vec<f64>, f64) {
    let f = CumLine::new(vals, axis);
    let (n, h) = (axis.n, axis.h());
    let fb = |e: f64| -> f64 { quad.iter().map(|&(u, wt)| wt * f.eval(e - w * u)).sum() };
    let mut out = vec![0.0; n];
    let mut inside = 0.0;
    let mut prev = fb(axis.edge(0));
    for (j, o) in out.iter_mut().enumerate() {
        let next = fb(axis.edge(j + 1));
        *o = (next - prev) / h;
        inside += next - prev;
        prev = next;
    }
    (out, f.total() - inside)
}

impl KernelStepOp {
    pub fn new(spec: &KernelSpec, grid: PhaseGrid, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        let cov = CoordCovariance::new(spec.gamma(), spec.params.sigma, dt);
        let a = cov.sxv / cov.svv;
        // isotropic: every phase coordinate carries the same covariance
        let coords = vec![
            CoordStep {
                cvv: cov.cvv,
                shear1: cov.cxv / cov.cvv - a,
                shear2: a,
                wv: cov.svv.sqrt(),
                wx: (cov.det / cov.svv).sqrt(),
            };
            grid.dim
        ];
        Ok(Self { grid, dt, coords, gauss_quad: standard_normal_quad() })
    }

    /// Apply the kernel step; returns the new density and the escaped
    /// mass. `mass_before = mass_after + escaped` holds to rounding.
    pub fn apply(&self, f: &PhaseDensity) -> Result<(PhaseDensity, f64)> {
        if f.grid != self.grid {
            return Err(Error::GridMismatch("kernel step grid differs from density".into()));
        }
        let grid = self.grid;
        let cellvol = grid.cell_volume();
        let (sx, sv) = phase_strides(&grid);
        let mut values = f.values.clone();
        let mut escaped = 0.0;
        for c in 0..grid.dim {
            let cs = &self.coords[c];
            let (x_axis, v_axis) = (grid.x[c], grid.v[c]);
            let (nx, nv) = (x_axis.n, v_axis.n);
            let (volx, volv) = (cellvol / x_axis.h(), cellvol / v_axis.h());
            let offsets = plane_offsets(&grid, c);
            let results: Vec<(usize, Vec<f64>, f64)> = offsets
                .par_iter()
                .map(|&off| {
                    // gather the (x_c, v_c) block, row-major ix * nv + iv
                    let mut block = vec![0.0; nx * nv];
                    for (p, bv) in block.iter_mut().enumerate() {
                        *bv = values[off + (p / nv) * sx[c] + (p % nv) * sv[c]];
                    }
                    let mut esc_mass = 0.0;
                    // stage 1: velocity stretch v -> cvv v
                    for ix in 0..nx {
                        let col: Vec<f64> =
                            (0..nv).map(|iv| block[ix * nv + iv]).collect();
                        let (new, e) = remap_line(&col, &v_axis, |y| y / cs.cvv);
                        esc_mass += e * volv;
                        for (iv, val) in new.into_iter().enumerate() {
                            block[ix * nv + iv] = val;
                        }
                    }
                    // stage 2: x-shear by the decorrelated velocity part
                    for iv in 0..nv {
                        let shift = cs.shear1 * v_axis.center(iv);
                        let row: Vec<f64> =
                            (0..nx).map(|ix| block[ix * nv + iv]).collect();
                        let (new, e) = remap_line(&row, &x_axis, |y| y - shift);
                        esc_mass += e * volx;
                        for (ix, val) in new.into_iter().enumerate() {
                            block[ix * nv + iv] = val;
                        }
                    }
                    // stage 3: velocity blur of width sqrt(Svv)
                    for ix in 0..nx {
                        let col: Vec<f64> =
                            (0..nv).map(|iv| block[ix * nv + iv]).collect();
                        let (new, e) = blur_line(&col, &v_axis, cs.wv, &self.gauss_quad);
                        esc_mass += e * volv;
                        for (iv, val) in new.into_iter().enumerate() {
                            block[ix * nv + iv] = val;
                        }
                    }
                    // stage 4: x-shear by the regression part of the
                    // post-blur velocity
                    for iv in 0..nv {
                        let shift = cs.shear2 * v_axis.center(iv);
                        let row: Vec<f64> =
                            (0..nx).map(|ix| block[ix * nv + iv]).collect();
                        let (new, e) = remap_line(&row, &x_axis, |y| y - shift);
                        esc_mass += e * volx;
                        for (ix, val) in new.into_iter().enumerate() {
                            block[ix * nv + iv] = val;
                        }
                    }
                    // stage 5: conditional x-blur of width sqrt(det/Svv)
                    for iv in 0..nv {
                        let row: Vec<f64> =
                            (0..nx).map(|ix| block[ix * nv + iv]).collect();
                        let (new, e) = blur_line(&row, &x_axis, cs.wx, &self.gauss_quad);
                        esc_mass += e * volx;
                        for (ix, val) in new.into_iter().enumerate() {
                            block[ix * nv + iv] = val;
                        }
                    }
                    (off, block, esc_mass)
                })
                .collect();
            for (off, block, e) in results {
                for (p, val) in block.into_iter().enumerate() {
                    values[off + (p / nv) * sx[c] + (p % nv) * sv[c]] = val;
                }
                escaped += e;
            }
        }
        Ok((PhaseDensity { grid, values, time: f.time + self.dt }, escaped))
    }
}

/// Strides of every axis in the flat phase layout (x axes then v axes,
/// last v axis fastest).
fn phase_strides(grid: &PhaseGrid) -> ([usize; 3], [usize; 3]) {
    let d = grid.dim;
    let mut sx = [0usize; 3];
    let mut sv = [0usize; 3];
    let mut stride = 1;
    for i in (0..d).rev() {
        sv[i] = stride;
        stride *= grid.v[i].n;
    }
    for i in (0..d).rev() {
        sx[i] = stride;
        stride *= grid.x[i].n;
    }
    (sx, sv)
}

/// Base offsets of every `(x_c, v_c)` plane in the flat layout.
fn plane_offsets(grid: &PhaseGrid, c: usize) -> Vec<usize> {
    let (sx, sv) = phase_strides(grid);
    let mut offsets = vec![0usize];
    for i in 0..grid.dim {
        if i == c {
            continue;
        }
        for (axis_n, stride) in [(grid.x[i].n, sx[i]), (grid.v[i].n, sv[i])] {
            let mut next = Vec::with_capacity(offsets.len() * axis_n);
            for &o in &offsets {
                for k in 0..axis_n {
                    next.push(o + k * stride);
                }
            }
            offsets = next;
        }
    }
    offsets
}

// ---------------------------------------------------------------------------
// field kick
// ---------------------------------------------------------------------------

/// Semi-Lagrangian velocity shift by `E(x) * dt_kick`, one coordinate at
/// a time, as a conservative remap of the quintic cumulative along the
/// shifted axis (the same transport machinery as the kernel step, so the
/// kick contributes no first-order grid floor to the splitting error).
/// Mass pushed through the v-walls is returned as escaped mass;
/// interpolation undershoot is left in the data (reported through
/// `PhaseDensity::min_value`).
pub(crate) fn field_kick(
    f: &PhaseDensity,
    e: &FieldGrid,
    dt_kick: f64,
) -> Result<(PhaseDensity, f64)> {
    let grid = f.grid;
    let d = grid.dim;
    let ncells_x: usize = grid.x[..d].iter().map(|a| a.n).product();
    if e.ncells() != ncells_x || e.dim != d {
        return Err(Error::GridMismatch("field grid does not match phase grid".into()));
    }
    for c in 0..d {
        let emax = e.component(c).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if emax * dt_kick.abs() > grid.v[c].h() {
            return Err(Error::CflViolation(format!(
                "max|E_{c}| dt = {:.3e} exceeds dv = {:.3e}",
                emax * dt_kick.abs(),
                grid.v[c].h()
            )));
        }
    }
    let (sx, sv) = phase_strides(&grid);
    let mut values = f.values.clone();
    let mut escaped = 0.0;
    for c in 0..d {
        let axis = grid.v[c];
        let n = axis.n;
        let volv = grid.cell_volume() / axis.h();
        let e_c = e.component(c);
        let offsets = plane_offsets(&grid, c);
        // planes here run over (x_c, v_c); the field index needs the full
        // x multi-index, so iterate x_c inside
        let new_planes: Vec<(usize, Vec<f64>, f64)> = offsets
            .par_iter()
            .map(|&off| {
                let mut out = vec![0.0; grid.x[c].n * n];
                let mut esc_mass = 0.0;
                for jx in 0..grid.x[c].n {
                    // recover the spatial flat index of this column
                    let mut x_flat = 0;
                    for i in 0..d {
                        let xi = if i == c { jx } else { (off / sx[i]) % grid.x[i].n };
                        x_flat = x_flat * grid.x[i].n + xi;
                    }
                    let shift = e_c[x_flat] * dt_kick;
                    let col_off = off + jx * sx[c];
                    let col: Vec<f64> =
                        (0..n).map(|jv| values[col_off + jv * sv[c]]).collect();
                    let (new, esc) = remap_line(&col, &axis, |y| y - shift);
                    esc_mass += esc * volv;
                    for (jv, val) in new.into_iter().enumerate() {
                        out[jx * n + jv] = val;
                    }
                }
                (off, out, esc_mass)
            })
            .collect();
        for (off, plane, esc) in new_planes {
            for jx in 0..grid.x[c].n {
                for jv in 0..n {
                    values[off + jx * sx[c] + jv * sv[c]] = plane[jx * n + jv];
                }
            }
            escaped += esc;
        }
    }
    Ok((PhaseDensity { grid, values, time: f.time }, escaped))
}

/// One split step: Strang (half kick, kernel, half kick) or Lie (kick
/// then kernel). Returns the advanced density and the escaped mass, which
/// combines the kernel step's out-of-domain mass with the velocity flux
/// the kick pushes through the v-walls, so `mass + escaped` is conserved
/// to rounding.
pub fn step_split(
    op: &KernelStepOp,
    f: &PhaseDensity,
    e: &FieldGrid,
    scheme: Scheme,
) -> Result<(PhaseDensity, f64)> {
    match scheme {
        Scheme::StrangKernelSplit => {
            let (half, esc_a) = field_kick(f, e, 0.5 * op.dt)?;
            let (conv, esc_kernel) = op.apply(&half)?;
            let (out, esc_b) = field_kick(&conv, e, 0.5 * op.dt)?;
            Ok((out, esc_a + esc_kernel + esc_b))
        }
        Scheme::LieSplit => {
            let (kicked, esc_kick) = field_kick(f, e, op.dt)?;
            let (out, esc_kernel) = op.apply(&kicked)?;
            Ok((out, esc_kick + esc_kernel))
        }
        Scheme::ParticleEM => Err(Error::InvalidParameter(
            "particle scheme has no grid step; use particle_run".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// grid run
// ---------------------------------------------------------------------------

/// Result of a solver run: snapshots, per-step diagnostics, and the error
/// that aborted the run early, if any (diagnostics up to the abort are
/// always retained).
#[derive(Debug)]
pub struct RunOutput {
    pub snapshots: Vec<PhaseDensity>,
    pub diagnostics: Diagnostics,
    pub aborted: Option<String>,
}

fn l2_sq(values: &[f64], cellvol: f64) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>() * cellvol
}

/// `L^2` norm of the velocity gradient of `f` by centered differences
/// (one-sided zero beyond the v-walls).
pub fn velocity_gradient_l2(f: &PhaseDensity) -> f64 {
    let grid = f.grid;
    let (sx, sv) = phase_strides(&grid);
    let mut acc = 0.0;
    for c in 0..grid.dim {
        let n = grid.v[c].n;
        let h = grid.v[c].h();
        for &off in &plane_offsets(&grid, c) {
            for jx in 0..grid.x[c].n {
                let col = off + jx * sx[c];
                for jv in 0..n {
                    let up = if jv + 1 < n { f.values[col + (jv + 1) * sv[c]] } else { 0.0 };
                    let dn = if jv > 0 { f.values[col + (jv - 1) * sv[c]] } else { 0.0 };
                    let g = (up - dn) / (2.0 * h);
                    acc += g * g;
                }
            }
        }
    }
    (acc * grid.cell_volume()).sqrt()
}

fn grid_diag_row(
    f: &PhaseDensity,
    rho: &DensityGrid,
    e: &FieldGrid,
    params_beta: f64,
    params_sigma: f64,
    dim: usize,
    escaped: f64,
    prev: Option<(f64, f64, f64, f64)>, // (t, ||f||^2, ||dv f||^2, -)
) -> Result<(DiagRow, (f64, f64, f64, f64))> {
    let cellvol = f.grid.cell_volume();
    let m2 = moment(f, 2.0, MomentWeight::PlainPow)?.value;
    let m4 = moment(f, 4.0, MomentWeight::PlainPow)?.value;
    let rho_l53 = lp_norm(&rho.values, rho.cell_volume(), 5.0 / 3.0)?;
    let emag = field_magnitude(e);
    let e_linf = emag.iter().cloned().fold(0.0f64, f64::max);
    let e_l2 = lp_norm(&emag, rho.cell_volume(), 2.0)?;
    let dvf = velocity_gradient_l2(f);
    let fsq = l2_sq(&f.values, cellvol);
    let energy_residual = match prev {
        None => 0.0,
        Some((tp, fsq_p, dvf_sq_p, _)) => {
            let dt = f.time - tp;
            let mid_fsq = 0.5 * (fsq + fsq_p);
            let mid_dvf = 0.5 * (dvf * dvf + dvf_sq_p);
            (0.5 * fsq - 0.5 * fsq_p) / dt
                - (dim as f64 * params_beta / 2.0) * mid_fsq
                + params_sigma * mid_dvf
        }
    };
    let row = DiagRow {
        t: f.time,
        mass: f.mass(),
        m2,
        m4,
        rho_l53,
        e_linf,
        e_l2,
        dv_f_l2: dvf,
        energy_residual,
        escaped_mass: escaped,
    };
    Ok((row, (f.time, fsq, dvf * dvf, 0.0)))
}

fn scaled_field(rho: &DensityGrid, omega: i32, scale: f64) -> Result<FieldGrid> {
    let mut e = solve_field(rho, omega)?;
    if scale != 1.0 {
        for v in &mut e.values {
            *v *= scale;
        }
    }
    Ok(e)
}

/// Self-consistent deterministic run: velocity marginal, Poisson field,
/// split step, per-step diagnostics. A step failure stops the loop and is
/// reported in `aborted` with all diagnostics up to that point retained.
pub fn run(config: &SolverConfig, f0: &PhaseDensity) -> Result<RunOutput> {
    config.validate()?;
    if f0.grid != config.grid {
        return Err(Error::GridMismatch("f0 grid differs from config grid".into()));
    }
    if f0.min_value() < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "f0 has negative values (min {})",
            f0.min_value()
        )));
    }
    if !f0.mass().is_finite() {
        return Err(Error::NonFinite("f0 mass".into()));
    }
    let op = KernelStepOp::new(&config.spec, config.grid, config.dt)?;
    let n_steps = config.n_steps();
    let beta = config.spec.params.beta;
    let sigma = config.spec.params.sigma;
    let dim = config.grid.dim;

    let mut f = f0.clone();
    let mut snapshots = vec![f.clone()];
    let mut diagnostics = Diagnostics::new();
    let mut escaped = 0.0;
    let mut aborted = None;
    let mut prev_state = None;
    for step in 0..=n_steps {
        let rho = velocity_marginal(&f);
        let e = match scaled_field(&rho, config.omega, config.field_scale) {
            Ok(e) => e,
            Err(err) => {
                aborted = Some(format!("field solve at step {step}: {err}"));
                break;
            }
        };
        let (row, state) =
            grid_diag_row(&f, &rho, &e, beta, sigma, dim, escaped, prev_state)?;
        diagnostics.push(row)?;
        prev_state = Some(state);
        if step == n_steps {
            break;
        }
        // For Strang, refresh the field before the closing half-kick: the
        // kick leaves rho untouched, so the field recomputed after the
        // kernel stage is exactly the end-of-step field, and using it
        // keeps the scheme second order in the self-consistent coupling.
        let advance = |f: &PhaseDensity| -> Result<(PhaseDensity, f64)> {
            match config.scheme {
                Scheme::StrangKernelSplit => {
                    let (half, esc_a) = field_kick(f, &e, 0.5 * op.dt)?;
                    let (conv, esc_k) = op.apply(&half)?;
                    let rho_end = velocity_marginal(&conv);
                    let e_end = scaled_field(&rho_end, config.omega, config.field_scale)?;
                    let (out, esc_b) = field_kick(&conv, &e_end, 0.5 * op.dt)?;
                    Ok((out, esc_a + esc_k + esc_b))
                }
                _ => step_split(&op, f, &e, config.scheme),
            }
        };
        match advance(&f) {
            Ok((next, esc)) => {
                escaped += esc;
                f = next;
            }
            Err(err) => {
                aborted = Some(format!("step {step}: {err}"));
                break;
            }
        }
        let at_snapshot = config.snapshot_every > 0 && (step + 1) % config.snapshot_every == 0;
        if at_snapshot || step + 1 == n_steps {
            snapshots.push(f.clone());
        }
    }
    Ok(RunOutput { snapshots, diagnostics, aborted })
}

// ---------------------------------------------------------------------------
// particle oracle
// ---------------------------------------------------------------------------

/// Monte Carlo representation of `f`: weighted particles with
/// deterministic per-particle RNG streams.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub time: f64,
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub active: Vec<bool>,
    pub escaped_mass: f64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Total carried weight including escaped particles; conserved exactly.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn active_mass(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(w, _)| w)
            .sum()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based stream: the RNG for (seed, step, particle) never depends
/// on scheduling, so parallel runs are bit-reproducible.
fn stream_rng(seed: u64, step: u64, particle: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(splitmix64(seed) ^ step) ^ particle))
}

/// Cloud-in-cell deposition of active particles onto the spatial grid.
/// A particle whose CIC support leaves the grid is marked escaped (its
/// weight moves to the escaped-mass account and it stops evolving).
fn cic_deposit(ens: &mut ParticleEnsemble, axes: &[Axis1; 3]) -> DensityGrid {
    let d = ens.dim;
    let ncells: usize = axes[..d].iter().map(|a| a.n).product();
    let cellvol: f64 = axes[..d].iter().map(|a| a.h()).product();
    let mut values = vec![0.0; ncells];
    for p in 0..ens.len() {
        if !ens.active[p] {
            continue;
        }
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut inside = true;
        for i in 0..d {
            let q = axes[i].frac_index(ens.positions[p][i]);
            if q < 0.0 || q > (axes[i].n - 1) as f64 {
                inside = false;
                break;
            }
            idx[i] = (q.floor() as usize).min(axes[i].n - 2);
            frac[i] = q - idx[i] as f64;
        }
        if !inside {
            ens.active[p] = false;
            ens.escaped_mass += ens.weights[p];
            continue;
        }
        // distribute over the 2^d corner cells
        for corner in 0..(1usize << d) {
            let mut w = ens.weights[p] / cellvol;
            let mut flat = 0;
            for i in 0..d {
                let hi = (corner >> i) & 1;
                w *= if hi == 1 { frac[i] } else { 1.0 - frac[i] };
                flat = flat * axes[i].n + idx[i] + hi;
            }
            values[flat] += w;
        }
    }
    DensityGrid { dim: d, axes: *axes, values }
}

/// Interpolate the field at a position with the same CIC kernel used for
/// deposition (no self-force).
fn cic_field(e: &FieldGrid, axes: &[Axis1; 3], d: usize, pos: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut idx = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for i in 0..d {
        let q = axes[i].frac_index(pos[i]).clamp(0.0, (axes[i].n - 1) as f64);
        idx[i] = (q.floor() as usize).min(axes[i].n - 2);
        frac[i] = q - idx[i] as f64;
    }
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0;
        for i in 0..d {
            let hi = (corner >> i) & 1;
            w *= if hi == 1 { frac[i] } else { 1.0 - frac[i] };
            flat = flat * axes[i].n + idx[i] + hi;
        }
        for c in 0..d {
            out[c] += w * e.component(c)[flat];
        }
    }
    out
}

fn particle_diag_row(
    ens: &ParticleEnsemble,
    rho: &DensityGrid,
    e: &FieldGrid,
) -> Result<DiagRow> {
    let d = ens.dim;
    let (mut mass, mut m2, mut m4) = (0.0, 0.0, 0.0);
    for p in 0..ens.len() {
        if !ens.active[p] {
            continue;
        }
        let w = ens.weights[p];
        let v2: f64 = ens.velocities[p][..d].iter().map(|v| v * v).sum();
        mass += w;
        m2 += w * (1.0 + v2);
        m4 += w * (1.0 + v2 * v2);
    }
    let emag = field_magnitude(e);
    Ok(DiagRow {
        t: ens.time,
        mass,
        m2,
        m4,
        rho_l53: lp_norm(&rho.values, rho.cell_volume(), 5.0 / 3.0)?,
        e_linf: emag.iter().cloned().fold(0.0f64, f64::max),
        e_l2: lp_norm(&emag, rho.cell_volume(), 2.0)?,
        dv_f_l2: 0.0,
        energy_residual: 0.0,
        escaped_mass: ens.escaped_mass,
    })
}

/// Result of a particle run.
#[derive(Debug)]
pub struct ParticleRunOutput {
    pub snapshots: Vec<ParticleEnsemble>,
    pub diagnostics: Diagnostics,
    pub aborted: Option<String>,
}

/// Stochastic oracle: CIC deposit, Poisson field, Euler-Maruyama kick and
/// diffusion, with per-(seed, step, particle) RNG streams. `sampler`
/// draws initial `(x, v)` pairs; every particle carries
/// `total_mass / n_particles`.
pub fn particle_run(
    config: &SolverConfig,
    n_particles: usize,
    total_mass: f64,
    seed: u64,
    sampler: &(dyn Fn(&mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) + Sync),
) -> Result<ParticleRunOutput> {
    config.validate()?;
    if n_particles == 0 {
        return Err(Error::InvalidParameter("need at least one particle".into()));
    }
    let d = config.grid.dim;
    let axes = config.grid.x;
    let dt = config.dt;
    let beta = config.spec.params.beta;
    let sig_noise = (2.0 * config.spec.params.sigma * dt).sqrt();

    let init: Vec<([f64; 3], [f64; 3])> = (0..n_particles)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(seed, 0, p as u64);
            sampler(&mut rng)
        })
        .collect();
    let mut ens = ParticleEnsemble {
        dim: d,
        time: 0.0,
        positions: init.iter().map(|(x, _)| *x).collect(),
        velocities: init.iter().map(|(_, v)| *v).collect(),
        weights: vec![total_mass / n_particles as f64; n_particles],
        active: vec![true; n_particles],
        escaped_mass: 0.0,
    };

    let n_steps = config.n_steps();
    let mut diagnostics = Diagnostics::new();
    let mut snapshots = Vec::new();
    let mut aborted = None;
    for step in 0..=n_steps {
        let rho = cic_deposit(&mut ens, &axes);
        let e = match scaled_field(&rho, config.omega, config.field_scale) {
            Ok(e) => e,
            Err(err) => {
                aborted = Some(format!("field solve at step {step}: {err}"));
                break;
            }
        };
        diagnostics.push(particle_diag_row(&ens, &rho, &e)?)?;
        if step == 0 || step == n_steps {
            snapshots.push(ens.clone());
        } else if config.snapshot_every > 0 && step % config.snapshot_every == 0 {
            snapshots.push(ens.clone());
        }
        if step == n_steps {
            break;
        }
        let updates: Vec<([f64; 3], [f64; 3])> = (0..n_particles)
            .into_par_iter()
            .map(|p| {
                if !ens.active[p] {
                    return (ens.positions[p], ens.velocities[p]);
                }
                let mut rng = stream_rng(seed, step as u64 + 1, p as u64);
                let ef = cic_field(&e, &axes, d, &ens.positions[p]);
                let mut x = ens.positions[p];
                let mut v = ens.velocities[p];
                for i in 0..d {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    let v_old = v[i];
                    v[i] += (ef[i] - beta * v_old) * dt + sig_noise * xi;
                    x[i] += v_old * dt;
                }
                (x, v)
            })
            .collect();
        for (p, (x, v)) in updates.into_iter().enumerate() {
            ens.positions[p] = x;
            ens.velocities[p] = v;
        }
        ens.time += dt;
    }
    Ok(ParticleRunOutput { snapshots, diagnostics, aborted })
}

// ---------------------------------------------------------------------------
// weak-form residual
// ---------------------------------------------------------------------------

/// Separable smooth test function `phi(t, x, v) = w(t) h(x) r(v)` with
/// `w(T) = 0` exactly: `w(t) = 1 - t/T` and Gaussian spatial/velocity
/// profiles. All derivatives are analytic.
#[derive(Debug, Clone)]
pub struct TestFunction {
    pub horizon: f64,
    pub x_center: [f64; 3],
    pub v_center: [f64; 3],
    pub x_width: f64,
    pub v_width: f64,
}

impl TestFunction {
    fn spatial(&self, d: usize, x: &[f64]) -> f64 {
        let q: f64 = (0..d).map(|i| (x[i] - self.x_center[i]).powi(2)).sum();
        (-0.5 * q / (self.x_width * self.x_width)).exp()
    }

    fn velocity(&self, d: usize, v: &[f64]) -> f64 {
        let q: f64 = (0..d).map(|i| (v[i] - self.v_center[i]).powi(2)).sum();
        (-0.5 * q / (self.v_width * self.v_width)).exp()
    }

    pub fn value(&self, d: usize, t: f64, x: &[f64], v: &[f64]) -> f64 {
        (1.0 - t / self.horizon) * self.spatial(d, x) * self.velocity(d, v)
    }

    pub fn dt(&self, d: usize, _t: f64, x: &[f64], v: &[f64]) -> f64 {
        -self.spatial(d, x) * self.velocity(d, v) / self.horizon
    }

    pub fn grad_x(&self, d: usize, t: f64, x: &[f64], v: &[f64], i: usize) -> f64 {
        -self.value(d, t, x, v) * (x[i] - self.x_center[i]) / (self.x_width * self.x_width)
    }

    pub fn grad_v(&self, d: usize, t: f64, x: &[f64], v: &[f64], i: usize) -> f64 {
        -self.value(d, t, x, v) * (v[i] - self.v_center[i]) / (self.v_width * self.v_width)
    }

    pub fn lap_v(&self, d: usize, t: f64, x: &[f64], v: &[f64]) -> f64 {
        let b2 = self.v_width * self.v_width;
        let q: f64 = (0..d).map(|i| (v[i] - self.v_center[i]).powi(2)).sum();
        self.value(d, t, x, v) * (q / (b2 * b2) - d as f64 / b2)
    }
}

/// Space-time quadrature of the weak form: trapezoid in time over the
/// snapshots of `int f (dphi/dt + v.grad_x phi + E.grad_v phi
/// - beta v.grad_v phi + sigma lap_v phi)`, plus the initial term
/// `int f0 phi(0)`. Zero for an exact weak solution up to quadrature
/// error.
pub fn weak_residual(
    spec: &KernelSpec,
    trajectory: &[PhaseDensity],
    fields: &[FieldGrid],
    phi: &TestFunction,
) -> Result<f64> {
    if trajectory.len() != fields.len() || trajectory.len() < 2 {
        return Err(Error::InsufficientData(
            "need >= 2 snapshots with matching field history".into(),
        ));
    }
    let d = trajectory[0].grid.dim;
    let beta = spec.params.beta;
    let sigma = spec.params.sigma;
    let pair_integral = |f: &PhaseDensity, e: &FieldGrid| -> f64 {
        let grid = f.grid;
        let cellvol = grid.cell_volume();
        let t = f.time;
        let mut acc = 0.0;
        let mut ix = [0usize; 3];
        let mut iv = [0usize; 3];
        let mut xc = [0.0; 3];
        let mut vc = [0.0; 3];
        for (flat, &fval) in f.values.iter().enumerate() {
            if fval == 0.0 {
                continue;
            }
            let mut rem = flat;
            for i in (0..d).rev() {
                iv[i] = rem % grid.v[i].n;
                rem /= grid.v[i].n;
            }
            for i in (0..d).rev() {
                ix[i] = rem % grid.x[i].n;
                rem /= grid.x[i].n;
            }
            let mut x_flat = 0;
            for i in 0..d {
                xc[i] = grid.x[i].center(ix[i]);
                vc[i] = grid.v[i].center(iv[i]);
                x_flat = x_flat * grid.x[i].n + ix[i];
            }
            let mut op = phi.dt(d, t, &xc[..d], &vc[..d])
                + sigma * phi.lap_v(d, t, &xc[..d], &vc[..d]);
            for i in 0..d {
                let gv = phi.grad_v(d, t, &xc[..d], &vc[..d], i);
                op += vc[i] * phi.grad_x(d, t, &xc[..d], &vc[..d], i)
                    + (e.component(i)[x_flat] - beta * vc[i]) * gv;
            }
            acc += fval * op;
        }
        acc * cellvol
    };

    let mut time_integral = 0.0;
    for j in 0..trajectory.len() - 1 {
        let dt = trajectory[j + 1].time - trajectory[j].time;
        let a = pair_integral(&trajectory[j], &fields[j]);
        let b = pair_integral(&trajectory[j + 1], &fields[j + 1]);
        time_integral += 0.5 * dt * (a + b);
    }

    // initial term
    let f0 = &trajectory[0];
    let grid = f0.grid;
    let mut init = 0.0;
    let mut ix = [0usize; 3];
    let mut iv = [0usize; 3];
    let mut xc = [0.0; 3];
    let mut vc = [0.0; 3];
    for (flat, &fval) in f0.values.iter().enumerate() {
        let mut rem = flat;
        for i in (0..d).rev() {
            iv[i] = rem % grid.v[i].n;
            rem /= grid.v[i].n;
        }
        for i in (0..d).rev() {
            ix[i] = rem % grid.x[i].n;
            rem /= grid.x[i].n;
        }
        for i in 0..d {
            xc[i] = grid.x[i].center(ix[i]);
            vc[i] = grid.v[i].center(iv[i]);
        }
        init += fval * phi.value(d, f0.time, &xc[..d], &vc[..d]);
    }
    init *= grid.cell_volume();

    Ok(time_integral + init)
}

// ---------------------------------------------------------------------------
// moments
// ---------------------------------------------------------------------------

/// Velocity weight of [`moment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentWeight {
    /// `1 + |v|^k`
    PlainPow,
    /// `(1 + |v|^2)^{k/2}` (Japanese bracket)
    Bracket,
}

/// Moment value with the fraction of the integrand carried by boundary
/// velocity cells (a tail-truncation warning indicator; the v-domain is
/// adequate when this is below ~1e-8).
#[derive(Debug, Clone, Copy)]
pub struct MomentValue {
    pub value: f64,
    pub tail_fraction: f64,
}

/// `int f w_k(v) dx dv` with the configured velocity weight.
pub fn moment(f: &PhaseDensity, k: f64, weight: MomentWeight) -> Result<MomentValue> {
    if k < 0.0 {
        return Err(Error::InvalidParameter(format!("moment order must be >= 0, got {k}")));
    }
    let grid = f.grid;
    let d = grid.dim;
    let mut total = 0.0;
    let mut tail = 0.0;
    let mut iv = [0usize; 3];
    let mut vc = [0.0; 3];
    for (flat, &fval) in f.values.iter().enumerate() {
        let mut rem = flat;
        let mut boundary = false;
        for i in (0..d).rev() {
            iv[i] = rem % grid.v[i].n;
            rem /= grid.v[i].n;
            if iv[i] == 0 || iv[i] == grid.v[i].n - 1 {
                boundary = true;
            }
        }
        for i in 0..d {
            vc[i] = grid.v[i].center(iv[i]);
        }
        let v2: f64 = vc[..d].iter().map(|v| v * v).sum();
        let w = match weight {
            MomentWeight::PlainPow => 1.0 + v2.powf(k / 2.0),
            MomentWeight::Bracket => (1.0 + v2).powf(k / 2.0),
        };
        let term = fval * w;
        total += term;
        if boundary {
            tail += term.abs();
        }
    }
    let cellvol = grid.cell_volume();
    let value = total * cellvol;
    let tail_fraction = if value.abs() > 0.0 { tail * cellvol / value.abs() } else { 0.0 };
    Ok(MomentValue { value, tail_fraction })
}

/// Slack series of the moment differential inequality
/// `d/dt Mk <= C (E_norm Mk^{(k+2)/(k+3)} + Mk + Mk2)` with a single
/// fitted constant (the smallest `C` making every interior step satisfy
/// the bound; slack is then `C * RHS - LHS >= 0` by construction, and the
/// reported `C` is the quantitative content).
#[derive(Debug, Clone)]
pub struct MomentInequalityReport {
    pub times: Vec<f64>,
    pub slack: Vec<f64>,
    pub fitted_c: f64,
}

pub fn moment_inequality_check(
    times: &[f64],
    e_norm: &[f64],
    mk: &[f64],
    mk_minus2: &[f64],
    k: f64,
) -> Result<MomentInequalityReport> {
    let n = times.len();
    if n < 3 || e_norm.len() != n || mk.len() != n || mk_minus2.len() != n {
        return Err(Error::InsufficientData(
            "need >= 3 aligned samples of times, field norm and moments".into(),
        ));
    }
    let expo = (k + 2.0) / (k + 3.0);
    let mut lhs = Vec::with_capacity(n - 2);
    let mut rhs0 = Vec::with_capacity(n - 2);
    for j in 1..n - 1 {
        lhs.push((mk[j + 1] - mk[j - 1]) / (times[j + 1] - times[j - 1]));
        rhs0.push(e_norm[j] * mk[j].powf(expo) + mk[j] + mk_minus2[j]);
    }
    let mut c: f64 = 0.0;
    for (l, r) in lhs.iter().zip(&rhs0) {
        if *r > 0.0 {
            c = c.max(l / r);
        }
    }
    let slack: Vec<f64> = lhs.iter().zip(&rhs0).map(|(l, r)| c * r - l).collect();
    Ok(MomentInequalityReport { times: times[1..n - 1].to_vec(), slack, fitted_c: c })
}

// ---------------------------------------------------------------------------
// uniqueness experiment
// ---------------------------------------------------------------------------

/// Per-step difference norms of a paired run and the fitted constant of
/// the doubly singular integral inequality
/// `||E_w(s)|| <= C int_0^s ||E_w(t)|| t^{-9/20} (s-t)^{-7/10} dt`.
#[derive(Debug, Clone)]
pub struct UniquenessReport {
    pub times: Vec<f64>,
    pub w_l2: Vec<f64>,
    pub ew_l2: Vec<f64>,
    pub fitted_c: f64,
}

/// Restrict a density to a coarser grid whose cell counts divide the fine
/// ones (block averaging in both x and v).
fn restrict_density(fine: &PhaseDensity, coarse_grid: &PhaseGrid) -> Result<PhaseDensity> {
    let d = fine.grid.dim;
    if coarse_grid.dim != d {
        return Err(Error::GridMismatch("restriction dimension mismatch".into()));
    }
    let mut ratios_x = [1usize; 3];
    let mut ratios_v = [1usize; 3];
    for i in 0..d {
        for (fa, ca, r) in [
            (fine.grid.x[i], coarse_grid.x[i], &mut ratios_x[i]),
            (fine.grid.v[i], coarse_grid.v[i], &mut ratios_v[i]),
        ] {
            if (fa.min - ca.min).abs() > 1e-12 || (fa.max - ca.max).abs() > 1e-12 {
                return Err(Error::GridMismatch("restriction requires matching bounds".into()));
            }
            if fa.n % ca.n != 0 {
                return Err(Error::GridMismatch(
                    "restriction requires integer resolution ratios".into(),
                ));
            }
            *r = fa.n / ca.n;
        }
    }
    let mut out = PhaseDensity::zeros(*coarse_grid, fine.time);
    let mut ix = [0usize; 3];
    let mut iv = [0usize; 3];
    for (flat, &val) in fine.values.iter().enumerate() {
        let mut rem = flat;
        for i in (0..d).rev() {
            iv[i] = (rem % fine.grid.v[i].n) / ratios_v[i];
            rem /= fine.grid.v[i].n;
        }
        for i in (0..d).rev() {
            ix[i] = (rem % fine.grid.x[i].n) / ratios_x[i];
            rem /= fine.grid.x[i].n;
        }
        let cflat = out.grid.flat_index(&ix[..d], &iv[..d]);
        out.values[cflat] += val;
    }
    let block: usize = (0..d).map(|i| ratios_x[i] * ratios_v[i]).product();
    for v in &mut out.values {
        *v /= block as f64;
    }
    Ok(out)
}

fn restrict_field_values(fine: &[f64], fine_n: usize, coarse_n: usize) -> Vec<f64> {
    // 1-d block average (the uniqueness experiment runs at d = 1)
    let r = fine_n / coarse_n;
    (0..coarse_n)
        .map(|i| fine[i * r..(i + 1) * r].iter().sum::<f64>() / r as f64)
        .collect()
}

/// Evolve both configurations from the same initial profile, difference
/// them per step, and fit the integral-inequality constant from the
/// measured `||E_w||_2` series. Configurations must share horizon and dt;
/// grids may differ by integer resolution ratios (d = 1).
pub fn uniqueness_experiment(
    config_a: &SolverConfig,
    config_b: &SolverConfig,
    f0: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Result<UniquenessReport> {
    if (config_a.horizon - config_b.horizon).abs() > 1e-14
        || (config_a.dt - config_b.dt).abs() > 1e-14
    {
        return Err(Error::InvalidParameter(
            "paired configs must share horizon and dt".into(),
        ));
    }
    if config_a.grid.dim != 1 || config_b.grid.dim != 1 {
        return Err(Error::InvalidParameter("uniqueness experiment runs at d = 1".into()));
    }
    let mut ca = config_a.clone();
    let mut cb = config_b.clone();
    ca.snapshot_every = 1;
    cb.snapshot_every = 1;
    let fa = PhaseDensity::from_fn(ca.grid, 0.0, f0);
    let fb = PhaseDensity::from_fn(cb.grid, 0.0, f0);
    let out_a = run(&ca, &fa)?;
    let out_b = run(&cb, &fb)?;
    if let Some(msg) = out_a.aborted.or(out_b.aborted) {
        return Err(Error::InvalidParameter(format!("paired run aborted: {msg}")));
    }
    let n = out_a.snapshots.len().min(out_b.snapshots.len());
    // coarse common grid
    let coarse_is_a = ca.grid.x[0].n <= cb.grid.x[0].n;
    let cgrid = if coarse_is_a { ca.grid } else { cb.grid };
    let mut times = Vec::with_capacity(n);
    let mut w_l2 = Vec::with_capacity(n);
    let mut ew_l2 = Vec::with_capacity(n);
    for j in 0..n {
        let (sa, sb) = (&out_a.snapshots[j], &out_b.snapshots[j]);
        let ra = restrict_density(sa, &cgrid)?;
        let rb = restrict_density(sb, &cgrid)?;
        let cellvol = cgrid.cell_volume();
        let w: f64 = ra
            .values
            .iter()
            .zip(&rb.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            * cellvol;
        // field difference on the coarse spatial grid
        let rho_a = velocity_marginal(sa);
        let rho_b = velocity_marginal(sb);
        let ea = scaled_field(&rho_a, ca.omega, ca.field_scale)?;
        let eb = scaled_field(&rho_b, cb.omega, cb.field_scale)?;
        let eva = restrict_field_values(ea.component(0), sa.grid.x[0].n, cgrid.x[0].n);
        let evb = restrict_field_values(eb.component(0), sb.grid.x[0].n, cgrid.x[0].n);
        let hx = cgrid.x[0].h();
        let ew: f64 =
            eva.iter().zip(&evb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * hx;
        times.push(sa.time);
        w_l2.push(w.sqrt());
        ew_l2.push(ew.sqrt());
    }

    // fitted constant of the singular integral inequality
    let (p, q) = (9.0 / 20.0, 7.0 / 10.0);
    let interp = |s: f64| -> f64 {
        if s <= times[0] {
            return ew_l2[0];
        }
        let j = times.partition_point(|&t| t < s).min(times.len() - 1).max(1);
        let (t0, t1) = (times[j - 1], times[j]);
        ew_l2[j - 1] + (ew_l2[j] - ew_l2[j - 1]) * (s - t0) / (t1 - t0)
    };
    let mut fitted_c: f64 = 0.0;
    for j in 1..times.len() {
        let s = times[j];
        if ew_l2[j] <= 0.0 {
            continue;
        }
        let f = |t: f64, da: f64, db: f64| interp(t) * da.powf(-p) * db.powf(-q);
        let (integral, _) = integrate_endpoint_singular(&f, 0.0, s, p, q, 1e-9)?;
        if integral > 0.0 {
            fitted_c = fitted_c.max(ew_l2[j] / integral);
        }
    }
    Ok(UniquenessReport { times, w_l2, ew_l2, fitted_c })
}

// ---------------------------------------------------------------------------
// velocity regularity
// ---------------------------------------------------------------------------

/// `L^{p'}`-in-time integrability check of `||dv f(t)||_2` with the
/// conjugate exponent `p' = p/(p-1)`; requires `p > 10/3` so that the
/// singular envelope `t^{-7/10}` stays `L^{p'}`-integrable.
#[derive(Debug, Clone)]
pub struct VelocityRegularityReport {
    pub p_prime: f64,
    pub integral: f64,
    /// fitted blow-up exponent alpha of `||dv f(t)||_2 ~ t^{-alpha}` over
    /// the early-time window
    pub fitted_exponent: f64,
    /// `alpha * p' < 1`, the integrability condition
    pub integrable: bool,
}

pub fn velocity_regularity_check(
    series: &[(f64, f64)],
    p: f64,
) -> Result<VelocityRegularityReport> {
    if p <= 10.0 / 3.0 {
        return Err(Error::InvalidParameter(format!(
            "need p > 10/3 for the conjugate-exponent envelope, got {p}"
        )));
    }
    if series.len() < 4 || series.iter().any(|&(t, v)| t <= 0.0 || !v.is_finite()) {
        return Err(Error::InsufficientData(
            "need >= 4 samples at positive times with finite values".into(),
        ));
    }
    let p_prime = p / (p - 1.0);
    // trapezoid of ||dv f||^{p'}
    let mut integral = 0.0;
    for w in series.windows(2) {
        let (t0, v0) = w[0];
        let (t1, v1) = w[1];
        integral += 0.5 * (t1 - t0) * (v0.powf(p_prime) + v1.powf(p_prime));
    }
    // early-time log-log fit over the first third of the samples
    let m = (series.len() / 3).max(3).min(series.len());
    let pts: Vec<(f64, f64)> = series[..m]
        .iter()
        .filter(|&&(_, v)| v > 0.0)
        .map(|&(t, v)| (t.ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData("too few positive early-time samples".into()));
    }
    let n = pts.len() as f64;
    let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let fitted_exponent = -slope;
    Ok(VelocityRegularityReport {
        p_prime,
        integral,
        fitted_exponent,
        integrable: fitted_exponent * p_prime < 1.0,
    })
}
