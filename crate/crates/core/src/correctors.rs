//! Periodic corrector problems on the reference cell.
//!
//! Three families are solved per direction k with Q1 elements on the voxel
//! grid and periodic degree-of-freedom identification:
//!
//! * oxygen:    -div( grad(N - y_k) ) = 0 on the pore phase, zero normal
//!   flux of (N - y_k) on the interface;
//! * potential: -div( eps(y) grad(N - y_k) ) = 0 on the whole cell;
//! * proton:    -lap(N - y_k) = -lap(N_phi - y_k) on the pore phase with
//!   flux matching (grad N . n = grad N_phi . n) on the interface, which in
//!   weak form makes N the pore-restricted A-projection of N_phi.
//!
//! The affine part y_k enters only through its gradient e_k, so the
//! periodic saw-tooth of y_k itself never materializes. Constant null
//! spaces are handled by zero-mean projection inside the CG iteration.

use crate::cell::UnitCell;
use crate::error::{Error, Result};
use crate::fem;
use crate::linalg::{pcg, CsrMatrix};
use rayon::prelude::*;

/// Relative residual required of every cell linear solve.
pub const TOL_LIN: f64 = 1e-10;
/// Iteration cap as a multiple of the number of unknowns.
pub const MAX_ITER_FACTOR: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Species {
    Oxygen,
    Proton,
    Potential,
}

/// One periodic, zero-mean corrector on the cell grid.
///
/// `values` holds one entry per periodic node (n^dim of them); nodes outside
/// the corrector's domain carry no degree of freedom and are set to the
/// domain mean (zero after centering). `support` marks true unknowns.
#[derive(Debug, Clone)]
pub struct CorrectorField {
    pub species: Species,
    pub axis: usize,
    dim: usize,
    n: usize,
    pub values: Vec<f64>,
    pub support: Vec<bool>,
    /// Relative residual reported by the linear solver.
    pub residual: f64,
}

impl CorrectorField {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn matches_cell(&self, cell: &UnitCell) -> bool {
        self.dim == cell.dim() && self.n == cell.resolution()
    }

    /// Mean over the corrector's own domain (pore phase for oxygen/proton,
    /// full cell for the potential), by element-midpoint quadrature.
    pub fn domain_mean(&self, cell: &UnitCell) -> f64 {
        let full_domain = self.species == Species::Potential;
        let mut acc = 0.0;
        let mut vol = 0.0;
        for elem in 0..cell.voxel_count() {
            if !full_domain && !cell.is_pore(elem) {
                continue;
            }
            let corners = element_nodes(cell, elem);
            let avg = corners.iter().map(|&nd| self.values[nd]).sum::<f64>()
                / corners.len() as f64;
            acc += avg;
            vol += 1.0;
        }
        if vol == 0.0 {
            0.0
        } else {
            acc / vol
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Periodic node indices of the corners of voxel `elem`, ordered by the
/// corner bit pattern used in [`fem`].
pub fn element_nodes(cell: &UnitCell, elem: usize) -> Vec<usize> {
    let dim = cell.dim();
    let n = cell.resolution();
    let idx = cell.voxel_coords(elem);
    (0..fem::corners(dim))
        .map(|c| {
            let mut node = [0usize; 3];
            for a in 0..dim {
                node[a] = (idx[a] + fem::corner_offset(c, a)) % n;
            }
            cell.voxel_index(&node[..dim])
        })
        .collect()
}

/// Assembled periodic system restricted to the nodes touched by elements
/// passing a coefficient filter.
struct CellSystem {
    matrix: CsrMatrix,
    /// Slot index per periodic node, usize::MAX when the node has no DOF.
    slot: Vec<usize>,
    active: Vec<usize>,
}

const NO_SLOT: usize = usize::MAX;

fn assemble(cell: &UnitCell, coefficient: impl Fn(usize) -> f64) -> CellSystem {
    let n_nodes = cell.voxel_count();
    let dim = cell.dim();
    let k_ref = fem::stiffness(dim, cell.spacing());

    let mut slot = vec![NO_SLOT; n_nodes];
    let mut active = Vec::new();
    for elem in 0..cell.voxel_count() {
        if coefficient(elem) == 0.0 {
            continue;
        }
        for nd in element_nodes(cell, elem) {
            if slot[nd] == NO_SLOT {
                slot[nd] = active.len();
                active.push(nd);
            }
        }
    }

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); active.len()];
    for elem in 0..cell.voxel_count() {
        let coef = coefficient(elem);
        if coef == 0.0 {
            continue;
        }
        let nodes = element_nodes(cell, elem);
        for (i, &ni) in nodes.iter().enumerate() {
            let si = slot[ni];
            for (j, &nj) in nodes.iter().enumerate() {
                rows[si].push((slot[nj], coef * k_ref[i][j]));
            }
        }
    }
    CellSystem {
        matrix: CsrMatrix::from_rows(rows),
        slot,
        active,
    }
}

/// Unit-gradient load: for every active node v, sum over filtered elements
/// of coef * int d(phi_v)/d(y_axis).
fn gradient_load(
    cell: &UnitCell,
    system: &CellSystem,
    axis: usize,
    coefficient: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let load_ref = fem::grad_load(cell.dim(), cell.spacing(), axis);
    let mut b = vec![0.0; system.active.len()];
    for elem in 0..cell.voxel_count() {
        let coef = coefficient(elem);
        if coef == 0.0 {
            continue;
        }
        for (i, nd) in element_nodes(cell, elem).into_iter().enumerate() {
            b[system.slot[nd]] += coef * load_ref[i];
        }
    }
    b
}

fn solve_system(
    cell: &UnitCell,
    system: &CellSystem,
    b: &[f64],
    species: Species,
    axis: usize,
    context: &str,
) -> Result<CorrectorField> {
    let max_iter = MAX_ITER_FACTOR * system.active.len().max(1);
    let (x, _) = pcg(&system.matrix, b, None, TOL_LIN, max_iter, true, context)?;
    let residual = if b.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        system.matrix.residual_norm(&x, b) / b.iter().map(|v| v * v).sum::<f64>().sqrt()
    };

    let mut values = vec![0.0; cell.voxel_count()];
    let mut support = vec![false; cell.voxel_count()];
    for (s, &nd) in system.active.iter().enumerate() {
        values[nd] = x[s];
        support[nd] = true;
    }
    let mut field = CorrectorField {
        species,
        axis,
        dim: cell.dim(),
        n: cell.resolution(),
        values,
        support,
        residual,
    };
    let mean = field.domain_mean(cell);
    for (v, s) in field.values.iter_mut().zip(field.support.iter()) {
        if *s {
            *v -= mean;
        }
    }
    Ok(field)
}

fn check_axis(cell: &UnitCell, axis: usize) -> Result<()> {
    if axis >= cell.dim() {
        return Err(Error::InvalidParameter(format!(
            "direction axis {axis} out of range for dim {}",
            cell.dim()
        )));
    }
    Ok(())
}

/// Oxygen corrector: pure periodic Neumann problem on the pore phase.
pub fn solve_oxygen(cell: &UnitCell, axis: usize) -> Result<CorrectorField> {
    check_axis(cell, axis)?;
    let coef = |e: usize| if cell.is_pore(e) { 1.0 } else { 0.0 };
    let system = assemble(cell, coef);
    let b = gradient_load(cell, &system, axis, coef);
    solve_system(cell, &system, &b, Species::Oxygen, axis, "oxygen corrector")
}

/// Potential corrector: eps-weighted problem over the whole cell. Elements
/// with eps = 0 contribute nothing; nodes supported only by such elements
/// are removed and set to the domain mean.
pub fn solve_potential(cell: &UnitCell, axis: usize) -> Result<CorrectorField> {
    check_axis(cell, axis)?;
    if cell.lambda_sq == 0.0 && cell.gamma == 0.0 {
        return Err(Error::InvalidParameter(
            "potential corrector needs a non-zero permittivity somewhere".into(),
        ));
    }
    let coef = |e: usize| cell.eps(e);
    let system = assemble(cell, coef);
    let b = gradient_load(cell, &system, axis, coef);
    solve_system(cell, &system, &b, Species::Potential, axis, "potential corrector")
}

/// Proton corrector: driven by the matching-direction potential corrector.
/// The weak form reduces to A_pore N = A_pore N_phi, i.e. the pore-space
/// projection of the potential corrector.
pub fn solve_proton(cell: &UnitCell, axis: usize, n_phi: &CorrectorField) -> Result<CorrectorField> {
    check_axis(cell, axis)?;
    if n_phi.species != Species::Potential {
        return Err(Error::InvalidParameter(
            "proton corrector requires a potential corrector as input".into(),
        ));
    }
    if n_phi.axis != axis {
        return Err(Error::DirectionMismatch {
            expected: axis,
            got: n_phi.axis,
        });
    }
    if !n_phi.matches_cell(cell) {
        return Err(Error::GridMismatch(format!(
            "potential corrector solved on a {}^{} grid, cell is {}^{}",
            n_phi.resolution(),
            n_phi.dim(),
            cell.resolution(),
            cell.dim()
        )));
    }
    let coef = |e: usize| if cell.is_pore(e) { 1.0 } else { 0.0 };
    let system = assemble(cell, coef);
    let phi_restricted: Vec<f64> = system.active.iter().map(|&nd| n_phi.values[nd]).collect();
    let mut b = vec![0.0; system.active.len()];
    system.matrix.mul_vec(&phi_restricted, &mut b);
    solve_system(cell, &system, &b, Species::Proton, axis, "proton corrector")
}

/// All 3 * dim correctors of a cell, solved independently in parallel.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    dim: usize,
    n: usize,
    pub oxygen: Vec<CorrectorField>,
    pub proton: Vec<CorrectorField>,
    pub potential: Vec<CorrectorField>,
}

impl CorrectorSet {
    pub fn solve(cell: &UnitCell) -> Result<Self> {
        let dim = cell.dim();
        let oxygen: Result<Vec<_>> = (0..dim).into_par_iter().map(|a| solve_oxygen(cell, a)).collect();
        let potential: Result<Vec<_>> =
            (0..dim).into_par_iter().map(|a| solve_potential(cell, a)).collect();
        let potential = potential?;
        let proton: Result<Vec<_>> = (0..dim)
            .into_par_iter()
            .map(|a| solve_proton(cell, a, &potential[a]))
            .collect();
        Ok(Self {
            dim,
            n: cell.resolution(),
            oxygen: oxygen?,
            proton: proton?,
            potential,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn matches_cell(&self, cell: &UnitCell) -> bool {
        self.dim == cell.dim() && self.n == cell.resolution()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CorrectorField> {
        self.oxygen.iter().chain(self.proton.iter()).chain(self.potential.iter())
    }
}
