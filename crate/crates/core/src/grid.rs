//! Uniform rectangular grids for phase-space densities, spatial densities
//! and force fields. All values live at cell centers; multi-dimensional
//! arrays are flattened row-major, position axes before velocity axes.

use crate::error::{Error, Result};

/// A uniform 1-d axis of `n` cell centers spanning `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis1 {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis1 {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        if !(max > min) || n < 2 {
            return Err(Error::InvalidParameter(format!(
                "axis needs max > min and n >= 2, got [{min}, {max}] x {n}"
            )));
        }
        Ok(Self { min, max, n })
    }

    /// Cell width; centers sit at `min + (i + 1/2) h`.
    pub fn h(&self) -> f64 {
        (self.max - self.min) / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.h()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }

    /// Lower edge of cell `i`.
    pub fn edge(&self, i: usize) -> f64 {
        self.min + i as f64 * self.h()
    }

    /// Fractional cell-center coordinate of `x` (0 at the first center).
    pub fn frac_index(&self, x: f64) -> f64 {
        (x - self.min) / self.h() - 0.5
    }
}

/// Rectangular phase grid: `dim` position axes and `dim` velocity axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseGrid {
    pub dim: usize,
    pub x: [Axis1; 3],
    pub v: [Axis1; 3],
}

impl PhaseGrid {
    /// Isotropic grid: the same axis on every position coordinate and the
    /// same axis on every velocity coordinate.
    pub fn isotropic(dim: usize, x_axis: Axis1, v_axis: Axis1) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!("dim must be 1..=3, got {dim}")));
        }
        Ok(Self { dim, x: [x_axis; 3], v: [v_axis; 3] })
    }

    pub fn cell_volume(&self) -> f64 {
        let mut vol = 1.0;
        for i in 0..self.dim {
            vol *= self.x[i].h() * self.v[i].h();
        }
        vol
    }

    pub fn len(&self) -> usize {
        let mut n = 1;
        for i in 0..self.dim {
            n *= self.x[i].n * self.v[i].n;
        }
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index of the multi-index (x indices, then v indices),
    /// row-major with the last velocity axis fastest.
    pub fn flat_index(&self, ix: &[usize], iv: &[usize]) -> usize {
        let mut idx = 0;
        for i in 0..self.dim {
            idx = idx * self.x[i].n + ix[i];
        }
        for i in 0..self.dim {
            idx = idx * self.v[i].n + iv[i];
        }
        idx
    }
}

/// A phase-space density f(x, v) >= 0 sampled at cell centers.
#[derive(Debug, Clone)]
pub struct PhaseDensity {
    pub grid: PhaseGrid,
    pub values: Vec<f64>,
    pub time: f64,
}

impl PhaseDensity {
    pub fn zeros(grid: PhaseGrid, time: f64) -> Self {
        Self { values: vec![0.0; grid.len()], grid, time }
    }

    /// Build from a callback receiving position and velocity coordinate
    /// slices of length `dim`.
    pub fn from_fn(grid: PhaseGrid, time: f64, f: impl Fn(&[f64], &[f64]) -> f64) -> Self {
        let d = grid.dim;
        let mut values = vec![0.0; grid.len()];
        let mut ix = [0usize; 3];
        let mut iv = [0usize; 3];
        let mut xc = [0.0; 3];
        let mut vc = [0.0; 3];
        for (flat, value) in values.iter_mut().enumerate() {
            // decode flat index (last velocity axis fastest)
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
            *value = f(&xc[..d], &vc[..d]);
        }
        Self { grid, values, time }
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Most negative value (0 if none); interpolation undershoot is
    /// reported, never silently clipped.
    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::min)
    }

    pub fn check_compatible(&self, other: &PhaseDensity) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("phase grids differ".into()));
        }
        Ok(())
    }
}

/// Macroscopic density rho(x) on a uniform spatial grid.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub dim: usize,
    pub axes: [Axis1; 3],
    /// row-major over the `dim` axes
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(dim: usize, axes: [Axis1; 3], values: Vec<f64>) -> Result<Self> {
        let n: usize = axes[..dim].iter().map(|a| a.n).product();
        if values.len() != n {
            return Err(Error::GridMismatch(format!(
                "density values length {} != grid size {n}",
                values.len()
            )));
        }
        Ok(Self { dim, axes, values })
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes[..self.dim].iter().map(|a| a.h()).product()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn flat_index(&self, ix: &[usize]) -> usize {
        let mut idx = 0;
        for i in 0..self.dim {
            idx = idx * self.axes[i].n + ix[i];
        }
        idx
    }
}

/// Force field E(x) on the same spatial layout as [`DensityGrid`];
/// component `c` of cell `i` lives at `values[c * ncells + i]`.
#[derive(Debug, Clone)]
pub struct FieldGrid {
    pub dim: usize,
    pub axes: [Axis1; 3],
    pub values: Vec<f64>,
    /// +1 Coulombic (repulsive), -1 gravitational (attractive)
    pub omega: i32,
}

impl FieldGrid {
    pub fn ncells(&self) -> usize {
        self.axes[..self.dim].iter().map(|a| a.n).product()
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.ncells();
        &self.values[c * n..(c + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_centers_and_edges() {
        let a = Axis1::new(-1.0, 1.0, 4).unwrap();
        assert_eq!(a.h(), 0.5);
        assert_eq!(a.center(0), -0.75);
        assert_eq!(a.edge(4), 1.0);
        assert_eq!(a.frac_index(-0.75), 0.0);
    }

    #[test]
    fn axis_rejects_degenerate() {
        assert!(Axis1::new(1.0, 1.0, 4).is_err());
        assert!(Axis1::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn phase_density_from_fn_and_mass() {
        let ax = Axis1::new(-8.0, 8.0, 64).unwrap();
        let grid = PhaseGrid::isotropic(1, ax, ax).unwrap();
        // unit-mass Gaussian in both variables
        let f = PhaseDensity::from_fn(grid, 0.0, |x, v| {
            let q = x[0] * x[0] + v[0] * v[0];
            (-0.5 * q).exp() / (2.0 * std::f64::consts::PI)
        });
        assert!((f.mass() - 1.0).abs() < 1e-10);
        assert_eq!(f.min_value(), 0.0);
    }

    #[test]
    fn flat_index_round_trip_d2() {
        let ax = Axis1::new(-1.0, 1.0, 3).unwrap();
        let av = Axis1::new(-2.0, 2.0, 4).unwrap();
        let grid = PhaseGrid::isotropic(2, ax, av).unwrap();
        assert_eq!(grid.len(), 3 * 3 * 4 * 4);
        // spot-check ordering: last v axis fastest
        assert_eq!(grid.flat_index(&[0, 0], &[0, 1]), 1);
        assert_eq!(grid.flat_index(&[0, 0], &[1, 0]), 4);
        assert_eq!(grid.flat_index(&[0, 1], &[0, 0]), 16);
        assert_eq!(grid.flat_index(&[1, 0], &[0, 0]), 48);
    }

    #[test]
    fn density_grid_mass() {
        let ax = Axis1::new(0.0, 1.0, 10).unwrap();
        let rho = DensityGrid::new(1, [ax; 3], vec![2.0; 10]).unwrap();
        assert!((rho.total_mass() - 2.0).abs() < 1e-14);
        assert!(DensityGrid::new(1, [ax; 3], vec![0.0; 9]).is_err());
    }
}
