//! Uniform node-centered grid on an axis-aligned box.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned box with `cells[a]` intervals (so `cells[a] + 1` nodes)
/// along each axis. Supports 1 to 3 dimensions; the macro solvers treat
/// axis 0 as the through-plane direction carrying the Dirichlet faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroGrid {
    extent: Vec<f64>,
    cells: Vec<usize>,
}

impl MacroGrid {
    pub fn new(extent: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let dim = extent.len();
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidParameter(format!(
                "grid dimension must be 1..=3, got {dim}"
            )));
        }
        if cells.len() != dim {
            return Err(Error::InvalidParameter(format!(
                "grid needs {dim} cell counts, got {}",
                cells.len()
            )));
        }
        if extent.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidParameter("grid extents must be positive".into()));
        }
        if cells.iter().any(|c| *c < 1) {
            return Err(Error::InvalidParameter("grid needs at least one cell per axis".into()));
        }
        Ok(Self { extent, cells })
    }

    pub fn dim(&self) -> usize {
        self.extent.len()
    }

    pub fn extent(&self) -> &[f64] {
        &self.extent
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn nodes_per_axis(&self, a: usize) -> usize {
        self.cells[a] + 1
    }

    pub fn spacing(&self, a: usize) -> f64 {
        self.extent[a] / self.cells[a] as f64
    }

    pub fn node_count(&self) -> usize {
        (0..self.dim()).map(|a| self.nodes_per_axis(a)).product()
    }

    pub fn node_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        let mut stride = 1;
        for a in 0..self.dim() {
            lin += idx[a] * stride;
            stride *= self.nodes_per_axis(a);
        }
        lin
    }

    pub fn node_coords(&self, mut lin: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for a in 0..self.dim() {
            let n = self.nodes_per_axis(a);
            idx[a] = lin % n;
            lin /= n;
        }
        idx
    }

    pub fn node_position(&self, lin: usize) -> [f64; 3] {
        let idx = self.node_coords(lin);
        let mut x = [0.0; 3];
        for a in 0..self.dim() {
            x[a] = idx[a] as f64 * self.spacing(a);
        }
        x
    }

    pub fn is_on_face(&self, lin: usize, axis: usize, max_side: bool) -> bool {
        let idx = self.node_coords(lin);
        if max_side {
            idx[axis] == self.cells[axis]
        } else {
            idx[axis] == 0
        }
    }

    /// Control-volume measure of a node: product of spacings, halved along
    /// every axis on which the node sits on the boundary.
    pub fn control_volume(&self, lin: usize) -> f64 {
        let idx = self.node_coords(lin);
        let mut v = 1.0;
        for a in 0..self.dim() {
            let w = if idx[a] == 0 || idx[a] == self.cells[a] {
                0.5
            } else {
                1.0
            };
            v *= w * self.spacing(a);
        }
        v
    }

    /// Area of the face between a node and its +axis neighbor: transverse
    /// spacings, halved on transverse boundaries.
    pub fn face_area(&self, lin: usize, axis: usize) -> f64 {
        let idx = self.node_coords(lin);
        let mut area = 1.0;
        for a in 0..self.dim() {
            if a == axis {
                continue;
            }
            let w = if idx[a] == 0 || idx[a] == self.cells[a] {
                0.5
            } else {
                1.0
            };
            area *= w * self.spacing(a);
        }
        area
    }

    /// Trapezoidal quadrature weight of a node (same as the control volume).
    pub fn quadrature_weight(&self, lin: usize) -> f64 {
        self.control_volume(lin)
    }

    /// L2 norm of a nodal field by trapezoidal quadrature.
    pub fn l2_norm(&self, field: &[f64]) -> f64 {
        field
            .iter()
            .enumerate()
            .map(|(i, v)| self.quadrature_weight(i) * v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// L2 distance of two nodal fields.
    pub fn l2_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b.iter())
            .enumerate()
            .map(|(i, (x, y))| self.quadrature_weight(i) * (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}
