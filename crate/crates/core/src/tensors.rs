//! Effective coefficient assembly from cell-problem solutions.
//!
//! Tensor entries are volume averages of corrected unit gradients,
//! T_ik = (1/|Y|) int_domain w(y) (delta_ik - d N^k / d y_i) dy,
//! evaluated by one-point (element midpoint) quadrature, which is exact for
//! the Q1 gradients involved. Oxygen/proton/mobility integrate over the
//! pore phase with unit weight; the permittivity integrates over the whole
//! cell weighted by eps(y).

use crate::cell::UnitCell;
use crate::correctors::{element_nodes, CorrectorField, CorrectorSet};
use crate::error::{Error, Result};
use crate::fem;
use crate::grid::MacroGrid;
use serde::{Deserialize, Serialize};

/// Small dense dim x dim matrix (dim <= 3), row major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct SquareMatrix {
    dim: usize,
    data: [f64; 9],
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=3).contains(&dim));
        Self { dim, data: [0.0; 9] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diagonal(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len());
        for (i, v) in entries.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut m = Self::identity(dim);
        for i in 0..dim {
            m.set(i, i, s);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * 3 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, k: usize, v: f64) {
        self.data[i * 3 + k] = v;
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.dim {
            for k in 0..self.dim {
                m = m.max(self.get(i, k).abs());
            }
        }
        m
    }

    /// Largest |T_ik - T_ki|.
    pub fn asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.dim {
            for k in (i + 1)..self.dim {
                m = m.max((self.get(i, k) - self.get(k, i)).abs());
            }
        }
        m
    }

    /// Largest off-diagonal magnitude.
    pub fn max_off_diagonal(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.dim {
            for k in 0..self.dim {
                if i != k {
                    m = m.max(self.get(i, k).abs());
                }
            }
        }
        m
    }

    /// Eigenvalues of the symmetrized matrix, ascending. Closed forms for
    /// dim <= 3 (trigonometric method in 3D).
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        let s = |i: usize, k: usize| 0.5 * (self.get(i, k) + self.get(k, i));
        match self.dim {
            1 => vec![self.get(0, 0)],
            2 => {
                let a = s(0, 0);
                let d = s(1, 1);
                let b = s(0, 1);
                let mean = 0.5 * (a + d);
                let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
                vec![mean - r, mean + r]
            }
            3 => {
                let a11 = s(0, 0);
                let a22 = s(1, 1);
                let a33 = s(2, 2);
                let a12 = s(0, 1);
                let a13 = s(0, 2);
                let a23 = s(1, 2);
                let p1 = a12 * a12 + a13 * a13 + a23 * a23;
                if p1 == 0.0 {
                    let mut d = vec![a11, a22, a33];
                    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    return d;
                }
                let q = (a11 + a22 + a33) / 3.0;
                let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
                let p = (p2 / 6.0).sqrt();
                let b11 = (a11 - q) / p;
                let b22 = (a22 - q) / p;
                let b33 = (a33 - q) / p;
                let b12 = a12 / p;
                let b13 = a13 / p;
                let b23 = a23 / p;
                let det_b = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13)
                    + b13 * (b12 * b23 - b22 * b13);
                let r = (det_b / 2.0).clamp(-1.0, 1.0);
                let phi = r.acos() / 3.0;
                let e1 = q + 2.0 * p * phi.cos();
                let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
                let e2 = 3.0 * q - e1 - e3;
                let mut d = vec![e1, e2, e3];
                d.sort_by(|x, y| x.partial_cmp(y).unwrap());
                d
            }
            _ => unreachable!(),
        }
    }
}

impl From<SquareMatrix> for Vec<Vec<f64>> {
    fn from(m: SquareMatrix) -> Self {
        (0..m.dim)
            .map(|i| (0..m.dim).map(|k| m.get(i, k)).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SquareMatrix {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        let dim = rows.len();
        if !(1..=3).contains(&dim) {
            return Err(format!("matrix must be 1x1 to 3x3, got {dim} rows"));
        }
        let mut m = SquareMatrix::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(format!("row {i} has {} entries, expected {dim}", row.len()));
            }
            for (k, v) in row.iter().enumerate() {
                m.set(i, k, *v);
            }
        }
        Ok(m)
    }
}

/// Effective coefficient set of one cell. The serialized field names are
/// the wire format of `tensors.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveCoefficients {
    #[serde(rename = "D_O")]
    pub diffusion_oxygen: SquareMatrix,
    #[serde(rename = "D_plus")]
    pub diffusion_proton: SquareMatrix,
    #[serde(rename = "M_plus")]
    pub mobility_proton: SquareMatrix,
    #[serde(rename = "eps")]
    pub permittivity: SquareMatrix,
    #[serde(rename = "p")]
    pub porosity: f64,
    #[serde(rename = "Lambda")]
    pub interface_measure: f64,
    #[serde(rename = "beta_O")]
    pub reaction_oxygen: f64,
    #[serde(rename = "beta_plus")]
    pub reaction_proton: f64,
}

impl EffectiveCoefficients {
    pub fn dim(&self) -> usize {
        self.diffusion_oxygen.dim()
    }

    /// All-pore homogeneous reference: identity transport tensors,
    /// lambda_sq-scaled permittivity, no interface.
    pub fn homogeneous(dim: usize, lambda_sq: f64) -> Self {
        Self {
            diffusion_oxygen: SquareMatrix::identity(dim),
            diffusion_proton: SquareMatrix::identity(dim),
            mobility_proton: SquareMatrix::identity(dim),
            permittivity: SquareMatrix::scaled_identity(dim, lambda_sq),
            porosity: 1.0,
            interface_measure: 0.0,
            reaction_oxygen: 0.0,
            reaction_proton: 0.0,
        }
    }
}

/// Midpoint-quadrature tensor of one corrector family.
fn corrector_tensor(
    cell: &UnitCell,
    fields: &[CorrectorField],
    weight: impl Fn(usize) -> f64,
) -> SquareMatrix {
    let dim = cell.dim();
    let h = cell.spacing();
    let vol = h.powi(dim as i32);
    let mut t = SquareMatrix::zeros(dim);
    for elem in 0..cell.voxel_count() {
        let w = weight(elem);
        if w == 0.0 {
            continue;
        }
        let nodes = element_nodes(cell, elem);
        for (k, field) in fields.iter().enumerate() {
            for i in 0..dim {
                let mut grad_i = 0.0;
                for (c, &nd) in nodes.iter().enumerate() {
                    grad_i += field.values[nd] * fem::center_gradient(dim, h, c, i);
                }
                let delta = if i == k { 1.0 } else { 0.0 };
                t.set(i, k, t.get(i, k) + w * vol * (delta - grad_i));
            }
        }
    }
    t
}

/// Assembles the full coefficient set from solved correctors.
/// `beta_oxygen`/`beta_proton` are the unscaled reaction parameters; the
/// stored couplings are Lambda times those.
pub fn assemble_tensors(
    cell: &UnitCell,
    set: &CorrectorSet,
    beta_oxygen: f64,
    beta_proton: f64,
) -> Result<EffectiveCoefficients> {
    if !set.matches_cell(cell) {
        return Err(Error::GridMismatch(format!(
            "correctors solved on a {}^{} grid, cell is {}^{}",
            set.resolution(),
            set.dim(),
            cell.resolution(),
            cell.dim()
        )));
    }
    let dim = cell.dim();
    if set.oxygen.len() != dim || set.proton.len() != dim || set.potential.len() != dim {
        return Err(Error::InvalidParameter(format!(
            "corrector set must hold {dim} fields per species"
        )));
    }
    let pore = |e: usize| if cell.is_pore(e) { 1.0 } else { 0.0 };
    let interface_measure = cell.interface_measure();
    Ok(EffectiveCoefficients {
        diffusion_oxygen: corrector_tensor(cell, &set.oxygen, pore),
        diffusion_proton: corrector_tensor(cell, &set.proton, pore),
        mobility_proton: corrector_tensor(cell, &set.potential, pore),
        permittivity: corrector_tensor(cell, &set.potential, |e| cell.eps(e)),
        porosity: cell.porosity(),
        interface_measure,
        reaction_oxygen: interface_measure * beta_oxygen,
        reaction_proton: interface_measure * beta_proton,
    })
}

/// Upscales a surface charge density into the background charge on the
/// macro grid: rho(x) = sum over interface faces of sigma(x, y_mid) * area.
/// `sigma` takes (macro point x, cell point y). For a cell without an
/// interface the result is identically zero.
pub fn homogenize_surface_charge(
    sigma: &dyn Fn(&[f64], &[f64]) -> f64,
    cell: &UnitCell,
    grid: &MacroGrid,
) -> Vec<f64> {
    let h = cell.spacing();
    let area = h.powi(cell.dim() as i32 - 1);
    let faces = cell.interface_faces();
    let mids: Vec<[f64; 3]> = faces
        .iter()
        .map(|&(voxel, axis, plus)| {
            let idx = cell.voxel_coords(voxel);
            let mut y = [0.0; 3];
            for a in 0..cell.dim() {
                y[a] = if a == axis {
                    (idx[a] + usize::from(plus)) as f64 * h
                } else {
                    (idx[a] as f64 + 0.5) * h
                };
            }
            y
        })
        .collect();

    let mut rho = vec![0.0; grid.node_count()];
    for node in 0..grid.node_count() {
        let x = grid.node_position(node);
        let mut acc = 0.0;
        for y in &mids {
            acc += sigma(&x[..grid.dim()], &y[..cell.dim()]) * area;
        }
        rho[node] = acc;
    }
    rho
}
