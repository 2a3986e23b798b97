//! Legacy ASCII VTK structured-points writer for nodal and cell fields.
//!
//! One dataset per file; any number of named scalar arrays as POINT_DATA
//! and optionally CELL_DATA. Values are written with Rust's shortest
//! round-trip float formatting, which is deterministic across runs. A
//! non-finite value anywhere is an error, never serialized.

use crate::error::{Error, Result};
use std::fmt::Write as _;

/// Structured-points dataset: `dims[a]` points per axis with uniform
/// spacing, plus named point and cell scalar arrays.
#[derive(Debug, Clone)]
pub struct StructuredPoints {
    pub title: String,
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    point_fields: Vec<(String, Vec<f64>)>,
    cell_fields: Vec<(String, Vec<f64>)>,
}

impl StructuredPoints {
    pub fn new(title: &str, dims: [usize; 3], origin: [f64; 3], spacing: [f64; 3]) -> Self {
        Self {
            title: title.to_string(),
            dims,
            origin,
            spacing,
            point_fields: Vec::new(),
            cell_fields: Vec::new(),
        }
    }

    pub fn point_count(&self) -> usize {
        self.dims.iter().map(|d| (*d).max(1)).product()
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().map(|d| (*d).max(2) - 1).product()
    }

    /// Adds a nodal scalar array (x fastest, then y, then z).
    pub fn add_point_field(&mut self, name: &str, values: Vec<f64>) -> Result<&mut Self> {
        if values.len() != self.point_count() {
            return Err(Error::GridMismatch(format!(
                "point field `{name}` has {} values, dataset has {} points",
                values.len(),
                self.point_count()
            )));
        }
        check_finite(name, &values)?;
        self.point_fields.push((name.to_string(), values));
        Ok(self)
    }

    pub fn add_cell_field(&mut self, name: &str, values: Vec<f64>) -> Result<&mut Self> {
        if values.len() != self.cell_count() {
            return Err(Error::GridMismatch(format!(
                "cell field `{name}` has {} values, dataset has {} cells",
                values.len(),
                self.cell_count()
            )));
        }
        check_finite(name, &values)?;
        self.cell_fields.push((name.to_string(), values));
        Ok(self)
    }

    /// Renders the legacy ASCII file contents.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# vtk DataFile Version 3.0\n");
        let _ = writeln!(out, "{}", self.title);
        out.push_str("ASCII\nDATASET STRUCTURED_POINTS\n");
        let _ = writeln!(
            out,
            "DIMENSIONS {} {} {}",
            self.dims[0].max(1),
            self.dims[1].max(1),
            self.dims[2].max(1)
        );
        let _ = writeln!(
            out,
            "ORIGIN {} {} {}",
            self.origin[0], self.origin[1], self.origin[2]
        );
        let _ = writeln!(
            out,
            "SPACING {} {} {}",
            spacing_or_one(self.spacing[0]),
            spacing_or_one(self.spacing[1]),
            spacing_or_one(self.spacing[2])
        );
        if !self.point_fields.is_empty() {
            let _ = writeln!(out, "POINT_DATA {}", self.point_count());
            for (name, values) in &self.point_fields {
                let _ = writeln!(out, "SCALARS {name} double 1");
                out.push_str("LOOKUP_TABLE default\n");
                for v in values {
                    let _ = writeln!(out, "{v}");
                }
            }
        }
        if !self.cell_fields.is_empty() {
            let _ = writeln!(out, "CELL_DATA {}", self.cell_count());
            for (name, values) in &self.cell_fields {
                let _ = writeln!(out, "SCALARS {name} double 1");
                out.push_str("LOOKUP_TABLE default\n");
                for v in values {
                    let _ = writeln!(out, "{v}");
                }
            }
        }
        out
    }
}

fn spacing_or_one(s: f64) -> f64 {
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "field `{name}` contains a non-finite value {v} at index {i}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_expected_header_and_values() {
        let mut ds = StructuredPoints::new("fields", [3, 2, 1], [0.0; 3], [0.5, 0.5, 0.0]);
        ds.add_point_field("C_O", vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.25]).unwrap();
        let text = ds.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# vtk DataFile Version 3.0");
        assert_eq!(lines[3], "DATASET STRUCTURED_POINTS");
        assert_eq!(lines[4], "DIMENSIONS 3 2 1");
        assert_eq!(lines[6], "SPACING 0.5 0.5 1");
        assert_eq!(lines[7], "POINT_DATA 6");
        assert_eq!(lines[8], "SCALARS C_O double 1");
        assert!(text.ends_with("6.25\n"));
    }

    #[test]
    fn rejects_non_finite_and_wrong_sizes() {
        let mut ds = StructuredPoints::new("t", [2, 2, 1], [0.0; 3], [1.0, 1.0, 0.0]);
        assert!(ds.add_point_field("bad", vec![1.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(ds.add_point_field("short", vec![1.0]).is_err());
        assert!(ds.add_cell_field("cells", vec![1.0]).is_ok());
        assert!(ds.add_cell_field("cells2", vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let build = || {
            let mut ds = StructuredPoints::new("d", [4, 4, 1], [0.0; 3], [0.25, 0.25, 0.0]);
            let vals: Vec<f64> = (0..16).map(|i| (i as f64 * 0.731).sin()).collect();
            ds.add_point_field("f", vals).unwrap();
            ds.render()
        };
        assert_eq!(build(), build());
    }
}
