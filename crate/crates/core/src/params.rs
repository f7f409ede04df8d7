use crate::error::{Error, Result};

/// Physical configuration shared by every kernel and solver: friction rate
/// `beta` (1/time), velocity diffusion `sigma` (velocity^2/time), spatial
/// dimension and final time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub beta: f64,
    pub sigma: f64,
    pub dim: usize,
    pub horizon: f64,
}

impl ModelParams {
    pub fn new(beta: f64, sigma: f64, dim: usize, horizon: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be strictly positive (the degenerate transport case is excluded), got {sigma}"
            )));
        }
        if !(beta >= 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be >= 0, got {beta}")));
        }
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!("dim must be 1, 2 or 3, got {dim}")));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be > 0, got {horizon}")));
        }
        Ok(Self { beta, sigma, dim, horizon })
    }
}

/// A point (x, v) in phase space. Components beyond `dim` are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub x: [f64; 3],
    pub v: [f64; 3],
}

impl PhasePoint {
    pub fn new(x: [f64; 3], v: [f64; 3]) -> Self {
        Self { x, v }
    }

    pub fn d1(x: f64, v: f64) -> Self {
        Self { x: [x, 0.0, 0.0], v: [v, 0.0, 0.0] }
    }

    pub fn is_finite(&self, dim: usize) -> bool {
        self.x[..dim].iter().chain(&self.v[..dim]).all(|c| c.is_finite())
    }

    /// Componentwise halving, the argument pattern of the dominating-kernel
    /// bounds.
    pub fn half(&self) -> Self {
        Self {
            x: [self.x[0] / 2.0, self.x[1] / 2.0, self.x[2] / 2.0],
            v: [self.v[0] / 2.0, self.v[1] / 2.0, self.v[2] / 2.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_sigma() {
        assert!(ModelParams::new(1.0, 0.0, 3, 1.0).is_err());
        assert!(ModelParams::new(1.0, -1.0, 3, 1.0).is_err());
    }

    #[test]
    fn rejects_bad_dim_and_beta() {
        assert!(ModelParams::new(-0.1, 1.0, 3, 1.0).is_err());
        assert!(ModelParams::new(0.0, 1.0, 0, 1.0).is_err());
        assert!(ModelParams::new(0.0, 1.0, 4, 1.0).is_err());
        assert!(ModelParams::new(0.0, 1.0, 1, 1.0).is_ok());
    }
}
