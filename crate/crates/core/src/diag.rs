//! Per-step solver diagnostics and their CSV schema.
//!
//! Columns: `t` simulation time; `mass` total phase-space mass; `M2`, `M4`
//! velocity moments `int f (1 + |v|^k)`; `rho_L53` the `L^{5/3}` norm of
//! the macroscopic density; `E_Linf`, `E_L2` force-field norms; `dv_f_L2`
//! the `L^2` norm of the velocity gradient of `f` (zero for particle runs,
//! where no grid gradient exists); `energy_residual` the defect of the
//! `L^2` energy balance over the previous step (zero on the first row);
//! `escaped_mass` cumulative mass lost through the domain walls.

use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Write};

pub const CSV_HEADER: &str =
    "t,mass,M2,M4,rho_L53,E_Linf,E_L2,dv_f_L2,energy_residual,escaped_mass";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagRow {
    pub t: f64,
    pub mass: f64,
    pub m2: f64,
    pub m4: f64,
    pub rho_l53: f64,
    pub e_linf: f64,
    pub e_l2: f64,
    pub dv_f_l2: f64,
    pub energy_residual: f64,
    pub escaped_mass: f64,
}

impl DiagRow {
    fn fields(&self) -> [f64; 10] {
        [
            self.t,
            self.mass,
            self.m2,
            self.m4,
            self.rho_l53,
            self.e_linf,
            self.e_l2,
            self.dv_f_l2,
            self.energy_residual,
            self.escaped_mass,
        ]
    }
}

/// Time-monotone, all-finite record of per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub rows: Vec<DiagRow>,
}

impl Diagnostics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a row; rejects non-finite entries and non-increasing times.
    pub fn push(&mut self, row: DiagRow) -> Result<()> {
        if row.fields().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("diagnostics row at t = {}", row.t)));
        }
        if let Some(last) = self.rows.last() {
            if row.t <= last.t {
                return Err(Error::InvalidParameter(format!(
                    "diagnostics times must increase: {} after {}",
                    row.t, last.t
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{CSV_HEADER}")?;
        for row in &self.rows {
            let fields = row.fields();
            let line: Vec<String> = fields.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::TableFormat("empty diagnostics CSV".into()))??;
        if header.trim() != CSV_HEADER {
            return Err(Error::TableFormat(format!("unexpected CSV header: {header}")));
        }
        let mut out = Self::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::TableFormat(format!("bad CSV number: {e}")))?;
            if vals.len() != 10 {
                return Err(Error::TableFormat(format!(
                    "expected 10 columns, got {}",
                    vals.len()
                )));
            }
            out.push(DiagRow {
                t: vals[0],
                mass: vals[1],
                m2: vals[2],
                m4: vals[3],
                rho_l53: vals[4],
                e_linf: vals[5],
                e_l2: vals[6],
                dv_f_l2: vals[7],
                energy_residual: vals[8],
                escaped_mass: vals[9],
            })?;
        }
        Ok(out)
    }

    /// Extract one column as a `(t, value)` series.
    pub fn series(&self, f: impl Fn(&DiagRow) -> f64) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.t, f(r))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64) -> DiagRow {
        DiagRow {
            t,
            mass: 1.0,
            m2: 2.0,
            m4: 3.5,
            rho_l53: 0.7,
            e_linf: 0.1,
            e_l2: 0.05,
            dv_f_l2: 0.4,
            energy_residual: 1e-6,
            escaped_mass: 0.0,
        }
    }

    #[test]
    fn push_enforces_invariants() {
        let mut d = Diagnostics::new();
        d.push(row(0.0)).unwrap();
        assert!(d.push(row(0.0)).is_err());
        let mut bad = row(1.0);
        bad.m2 = f64::NAN;
        assert!(d.push(bad).is_err());
        d.push(row(0.1)).unwrap();
    }

    #[test]
    fn csv_round_trip() {
        let mut d = Diagnostics::new();
        d.push(row(0.0)).unwrap();
        d.push(row(0.125)).unwrap();
        let dir = std::env::temp_dir().join("vpfp-diag-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("diag.csv");
        d.write_csv(&path).unwrap();
        let back = Diagnostics::read_csv(&path).unwrap();
        assert_eq!(back, d);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn read_rejects_wrong_header() {
        let dir = std::env::temp_dir().join("vpfp-diag-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(Diagnostics::read_csv(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
