//! Upscaled steady catalyst-layer system on a rectangular macro domain.
//!
//! Three coupled fields on a node-centered finite-volume grid:
//!
//! * oxygen:    -div( D_O grad C_O )                    = R_O + f_O
//! * protons:   -div( D_+ grad C_+ + C_+ M_+ grad Phi ) = R_+ + f_+
//! * potential: -div( eps grad Phi )                    = p C_+ + rho_s + f_Phi
//!
//! with R = beta_bar [C_+]^n+ [C_O]^nO exp(-alpha_c (Phi - Phi_0)).
//! Dirichlet data: C_O and Phi on the axis-0 max face (oxygen entrance),
//! C_+ and Phi on the axis-0 min face (proton entrance); no-flux walls
//! elsewhere. Dirichlet takes precedence at shared edges.
//!
//! Diagonal tensors use exponential-fitted (Scharfetter-Gummel) face
//! fluxes, which preserve positivity; full tensors fall back to centered
//! cross-term differencing under the damped outer iteration. Directions
//! with a vanishing diagonal entry carry no flux at all: those coordinates
//! act as parameters instead of producing a singular system.

use crate::error::{Error, Result};
use crate::grid::MacroGrid;
use crate::linalg::{bicgstab, pcg, CsrMatrix};
use crate::picard::{self, PicardControls};
use crate::tensors::{EffectiveCoefficients, SquareMatrix};
use serde::{Deserialize, Serialize};
use std::cell::Cell;

/// Reaction branch selector for [`butler_volmer_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReactionSpecies {
    Oxygen,
    Proton,
}

/// Dirichlet data on the two entrance faces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryData {
    /// C_O on the oxygen entrance (axis-0 max face).
    pub c_oxygen_right: f64,
    /// C_+ on the proton entrance (axis-0 min face).
    pub c_proton_left: f64,
    /// Phi on the oxygen entrance.
    pub phi_right: f64,
    /// Phi on the proton entrance.
    pub phi_left: f64,
}

/// Upscaled problem: domain, coefficients, kinetics and boundary data.
#[derive(Debug, Clone)]
pub struct MacroProblem {
    pub grid: MacroGrid,
    pub coeffs: EffectiveCoefficients,
    /// Cathodic transfer coefficient.
    pub alpha_c: f64,
    /// Proton reaction order.
    pub n_proton: f64,
    /// Oxygen reaction order.
    pub n_oxygen: f64,
    /// Equilibrium potential Phi_0.
    pub phi_eq: f64,
    pub bc: BoundaryData,
    /// Nodal background charge.
    pub rho_s: Vec<f64>,
    /// Optional nodal forcing per equation (oxygen, proton, potential),
    /// used by manufactured-solution tests.
    pub forcing: Option<[Vec<f64>; 3]>,
}

impl MacroProblem {
    pub fn new(
        grid: MacroGrid,
        coeffs: EffectiveCoefficients,
        alpha_c: f64,
        n_proton: f64,
        n_oxygen: f64,
        phi_eq: f64,
        bc: BoundaryData,
        rho_s: Vec<f64>,
    ) -> Result<Self> {
        if coeffs.dim() != grid.dim() {
            return Err(Error::GridMismatch(format!(
                "coefficients are {}-dimensional, grid is {}-dimensional",
                coeffs.dim(),
                grid.dim()
            )));
        }
        if !(alpha_c > 0.0 && alpha_c < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "cathodic transfer coefficient must lie in (0, 1), got {alpha_c}"
            )));
        }
        if !(n_proton >= 0.0) || !(n_oxygen >= 0.0) {
            return Err(Error::InvalidParameter("reaction orders must be non-negative".into()));
        }
        if !(bc.c_oxygen_right >= 0.0) || !(bc.c_proton_left >= 0.0) {
            return Err(Error::InvalidParameter(
                "Dirichlet concentrations must be non-negative".into(),
            ));
        }
        if rho_s.len() != grid.node_count() {
            return Err(Error::GridMismatch(format!(
                "rho_s has {} entries, grid has {} nodes",
                rho_s.len(),
                grid.node_count()
            )));
        }
        Ok(Self {
            grid,
            coeffs,
            alpha_c,
            n_proton,
            n_oxygen,
            phi_eq,
            bc,
            rho_s,
            forcing: None,
        })
    }

    /// Evaluates forcing closures on the grid nodes and attaches them.
    pub fn with_forcing(
        mut self,
        oxygen: impl Fn(&[f64]) -> f64,
        proton: impl Fn(&[f64]) -> f64,
        potential: impl Fn(&[f64]) -> f64,
    ) -> Self {
        let dim = self.grid.dim();
        let eval = |f: &dyn Fn(&[f64]) -> f64| {
            (0..self.grid.node_count())
                .map(|q| {
                    let x = self.grid.node_position(q);
                    f(&x[..dim])
                })
                .collect::<Vec<f64>>()
        };
        self.forcing = Some([eval(&oxygen), eval(&proton), eval(&potential)]);
        self
    }

    fn dirichlet(&self, eq: EquationKind, node: usize) -> Option<f64> {
        match eq {
            EquationKind::Oxygen => self
                .grid
                .is_on_face(node, 0, true)
                .then_some(self.bc.c_oxygen_right),
            EquationKind::Proton => self
                .grid
                .is_on_face(node, 0, false)
                .then_some(self.bc.c_proton_left),
            EquationKind::Potential => {
                if self.grid.is_on_face(node, 0, false) {
                    Some(self.bc.phi_left)
                } else if self.grid.is_on_face(node, 0, true) {
                    Some(self.bc.phi_right)
                } else {
                    None
                }
            }
        }
    }

    fn forcing_at(&self, eq: EquationKind, node: usize) -> f64 {
        match &self.forcing {
            Some(f) => f[eq as usize][node],
            None => 0.0,
        }
    }

    /// Fixed residual scale built from the problem data.
    fn residual_scale(&self) -> f64 {
        let rho_max = self.rho_s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let forcing_max = self
            .forcing
            .as_ref()
            .map(|f| {
                f.iter()
                    .flat_map(|v| v.iter())
                    .fold(0.0f64, |m, v| m.max(v.abs()))
            })
            .unwrap_or(0.0);
        1.0 + self.coeffs.reaction_oxygen
            + self.coeffs.reaction_proton
            + rho_max
            + self.coeffs.porosity * self.bc.c_proton_left.max(self.bc.c_oxygen_right)
            + forcing_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EquationKind {
    Oxygen = 0,
    Proton = 1,
    Potential = 2,
}

/// Iteration diagnostics of one nonlinear solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub converged: bool,
    pub outer_iterations: usize,
    pub residual_history: Vec<f64>,
    pub final_damping: f64,
    /// The damping controller could not decrease the residual any further.
    pub stalled: bool,
    /// Number of exponential-argument clamp events during reaction
    /// evaluations.
    pub clamp_events: u64,
    /// Smallest reaction value ever evaluated (must stay >= 0).
    pub min_reaction: f64,
    /// Largest over-potential Phi - Phi_0 of the final state; positive
    /// values are reported, not rejected.
    pub max_overpotential: f64,
}

/// Converged (or last) macro fields with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub c_oxygen: Vec<f64>,
    pub c_proton: Vec<f64>,
    pub phi: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

impl MacroState {
    pub fn min_concentration(&self) -> f64 {
        self.c_oxygen
            .iter()
            .chain(self.c_proton.iter())
            .fold(f64::INFINITY, |m, v| m.min(*v))
    }
}

const EXP_CLAMP: f64 = 700.0;

/// Cathodic Butler-Volmer rate scaled by the species coupling:
/// beta_bar [C_+]^n+ [C_O]^nO exp(-alpha_c (Phi - Phi_0)).
/// Negative concentrations are clipped to zero; the exponential argument is
/// clamped to +-700.
pub fn butler_volmer_rate(
    c_proton: f64,
    c_oxygen: f64,
    phi: f64,
    prob: &MacroProblem,
    species: ReactionSpecies,
) -> f64 {
    let beta = match species {
        ReactionSpecies::Oxygen => prob.coeffs.reaction_oxygen,
        ReactionSpecies::Proton => prob.coeffs.reaction_proton,
    };
    rate_clamped(
        beta,
        c_proton,
        c_oxygen,
        phi,
        prob.alpha_c,
        prob.n_proton,
        prob.n_oxygen,
        prob.phi_eq,
    )
    .0
}

#[allow(clippy::too_many_arguments)]
fn rate_clamped(
    beta: f64,
    c_proton: f64,
    c_oxygen: f64,
    phi: f64,
    alpha_c: f64,
    n_proton: f64,
    n_oxygen: f64,
    phi_eq: f64,
) -> (f64, bool) {
    let arg = -alpha_c * (phi - phi_eq);
    let clamped = arg.clamp(-EXP_CLAMP, EXP_CLAMP);
    let rate = beta
        * c_proton.max(0.0).powf(n_proton)
        * c_oxygen.max(0.0).powf(n_oxygen)
        * clamped.exp();
    (rate, clamped != arg)
}

/// Bernoulli function B(t) = t / (e^t - 1) of the exponential-fitted flux.
fn bernoulli(t: f64) -> f64 {
    if t.abs() < 1e-8 {
        1.0 - 0.5 * t + t * t / 12.0
    } else {
        let e = t.exp();
        if e.is_infinite() {
            0.0
        } else {
            t / (e - 1.0)
        }
    }
}

/// Per-axis transport activity. A direction with a vanishing diagonal
/// entry (and vanishing mobility, if any) is dropped from the stencil.
fn active_axes(
    diffusion: &SquareMatrix,
    mobility: Option<&SquareMatrix>,
) -> Result<Vec<bool>> {
    let dim = diffusion.dim();
    let mut dmax = diffusion.max_abs();
    if let Some(m) = mobility {
        dmax = dmax.max(m.max_abs());
    }
    let tol = 1e-12 * dmax.max(1e-300);
    let mut active = vec![false; dim];
    for a in 0..dim {
        let d_aa = diffusion.get(a, a).abs();
        let m_aa = mobility.map(|m| m.get(a, a).abs()).unwrap_or(0.0);
        if d_aa > tol {
            active[a] = true;
        } else {
            if m_aa > tol {
                return Err(Error::InvalidParameter(format!(
                    "axis {a}: vanishing diffusion with non-vanishing mobility is unsupported"
                )));
            }
            // Positive semidefiniteness forces the whole row/column to
            // vanish with the diagonal.
            for b in 0..dim {
                if diffusion.get(a, b).abs() > tol || diffusion.get(b, a).abs() > tol {
                    return Err(Error::InvalidParameter(format!(
                        "axis {a}: zero diagonal with non-zero off-diagonal entries"
                    )));
                }
            }
        }
    }
    if !active.iter().any(|a| *a) {
        return Err(Error::InvalidParameter(
            "transport tensor vanishes in every direction".into(),
        ));
    }
    Ok(active)
}

/// Central (one-sided at walls) difference stencil for d/dx_axis at a node.
fn derivative_stencil(grid: &MacroGrid, node: usize, axis: usize) -> [(usize, f64); 2] {
    let idx = grid.node_coords(node);
    let h = grid.spacing(axis);
    let cells = grid.cells()[axis];
    let shift = |delta: isize| {
        let mut j = idx;
        j[axis] = (idx[axis] as isize + delta) as usize;
        grid.node_index(&j[..grid.dim()])
    };
    if idx[axis] == 0 {
        [(shift(1), 1.0 / h), (node, -1.0 / h)]
    } else if idx[axis] == cells {
        [(node, 1.0 / h), (shift(-1), -1.0 / h)]
    } else {
        [(shift(1), 0.5 / h), (shift(-1), -0.5 / h)]
    }
}

/// Evaluates a derivative stencil on a nodal field.
fn derivative_value(grid: &MacroGrid, field: &[f64], node: usize, axis: usize) -> f64 {
    derivative_stencil(grid, node, axis)
        .iter()
        .map(|(q, c)| field[*q] * c)
        .sum()
}

pub(crate) struct TransportOperator<'a> {
    grid: &'a MacroGrid,
    diffusion: &'a SquareMatrix,
    /// Mobility tensor and the frozen potential driving the drift.
    drift: Option<(&'a SquareMatrix, &'a [f64])>,
    /// Nodal scalar multiplying the whole flux (thin-double-layer charge).
    multiplier: Option<&'a [f64]>,
    active: Vec<bool>,
    diagonal_only: bool,
}

/// Crate-internal constructors and drivers, shared with the limit solvers.
pub(crate) fn transport_operator<'a>(
    grid: &'a MacroGrid,
    diffusion: &'a SquareMatrix,
    drift: Option<(&'a SquareMatrix, &'a [f64])>,
    multiplier: Option<&'a [f64]>,
) -> Result<TransportOperator<'a>> {
    TransportOperator::new(grid, diffusion, drift, multiplier)
}

pub(crate) fn assemble_operator(
    op: &TransportOperator,
    dirichlet: &dyn Fn(usize) -> Option<f64>,
    source: &dyn Fn(usize) -> f64,
) -> (CsrMatrix, Vec<f64>) {
    op.assemble(dirichlet, source)
}

pub(crate) fn solve_operator(
    op: &TransportOperator,
    matrix: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    controls: &PicardControls,
    context: &str,
) -> Result<Vec<f64>> {
    solve_equation(op, matrix, b, x0, controls, context)
}

pub(crate) fn operator_residual(
    grid: &MacroGrid,
    matrix: &CsrMatrix,
    b: &[f64],
    u: &[f64],
    dirichlet: &dyn Fn(usize) -> Option<f64>,
) -> f64 {
    equation_residual(grid, matrix, b, u, dirichlet)
}

impl<'a> TransportOperator<'a> {
    fn new(
        grid: &'a MacroGrid,
        diffusion: &'a SquareMatrix,
        drift: Option<(&'a SquareMatrix, &'a [f64])>,
        multiplier: Option<&'a [f64]>,
    ) -> Result<Self> {
        let active = active_axes(diffusion, drift.map(|d| d.0))?;
        let mut off = diffusion.max_off_diagonal();
        if let Some((m, _)) = drift {
            off = off.max(m.max_off_diagonal());
        }
        let scale = diffusion.max_abs().max(1e-300);
        Ok(Self {
            grid,
            diffusion,
            drift,
            multiplier,
            active,
            diagonal_only: off <= 1e-12 * scale,
        })
    }

    fn is_symmetric(&self) -> bool {
        self.diagonal_only && self.drift.is_none()
    }

    /// Assembles the flux part of `-div(flux) = source` into matrix rows,
    /// with Dirichlet rows replaced by the identity and Dirichlet neighbor
    /// couplings moved to the right-hand side.
    fn assemble(
        &self,
        dirichlet: &dyn Fn(usize) -> Option<f64>,
        source: &dyn Fn(usize) -> f64,
    ) -> (CsrMatrix, Vec<f64>) {
        self.assemble_with_screening(dirichlet, source, None)
    }

    /// Like [`assemble`], with an optional non-negative nodal coefficient
    /// adding sigma(q) * V(q) to free diagonals. Used by the linearized
    /// potential update; the caller compensates the right-hand side so the
    /// fixed point is unchanged.
    fn assemble_with_screening(
        &self,
        dirichlet: &dyn Fn(usize) -> Option<f64>,
        source: &dyn Fn(usize) -> f64,
        screening: Option<&[f64]>,
    ) -> (CsrMatrix, Vec<f64>) {
        let grid = self.grid;
        let n = grid.node_count();
        let dim = grid.dim();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut b = vec![0.0; n];
        let dir: Vec<Option<f64>> = (0..n).map(dirichlet).collect();

        let mut push = |rows: &mut Vec<Vec<(usize, f64)>>,
                        b: &mut Vec<f64>,
                        row: usize,
                        col: usize,
                        val: f64| {
            if let Some(v) = dir[col] {
                b[row] -= val * v;
            } else {
                rows[row].push((col, val));
            }
        };

        for q in 0..n {
            if let Some(v) = dir[q] {
                rows[q].push((q, 1.0));
                b[q] = v;
                continue;
            }
            b[q] += source(q) * grid.control_volume(q);
            if let Some(s) = screening {
                rows[q].push((q, s[q] * grid.control_volume(q)));
            }
            let idx = grid.node_coords(q);
            for a in 0..dim {
                if !self.active[a] {
                    continue;
                }
                let h = grid.spacing(a);
                let area = grid.face_area(q, a);
                // +a face, then -a face; missing faces are no-flux walls.
                for plus_side in [true, false] {
                    let exists = if plus_side {
                        idx[a] < grid.cells()[a]
                    } else {
                        idx[a] > 0
                    };
                    if !exists {
                        continue;
                    }
                    let mut widx = idx;
                    widx[a] = if plus_side { idx[a] + 1 } else { idx[a] - 1 };
                    let w = grid.node_index(&widx[..dim]);
                    let mult = self
                        .multiplier
                        .map(|m| 0.5 * (m[q] + m[w]))
                        .unwrap_or(1.0);
                    let d_aa = self.diffusion.get(a, a);
                    let coef = mult * d_aa / h * area;
                    let t = match self.drift {
                        Some((mob, phi)) if d_aa != 0.0 => {
                            let dphi = if plus_side {
                                phi[w] - phi[q]
                            } else {
                                phi[q] - phi[w]
                            };
                            mob.get(a, a) / d_aa * dphi
                        }
                        _ => 0.0,
                    };
                    if plus_side {
                        // -G * area with G = coef/area (B(-t) C_w - B(t) C_q)
                        push(&mut rows, &mut b, q, q, coef * bernoulli(t));
                        push(&mut rows, &mut b, q, w, -coef * bernoulli(-t));
                    } else {
                        // +G * area with G = coef/area (B(-t) C_q - B(t) C_w)
                        push(&mut rows, &mut b, q, q, coef * bernoulli(-t));
                        push(&mut rows, &mut b, q, w, -coef * bernoulli(t));
                    }
                    if !self.diagonal_only {
                        self.assemble_cross_terms(
                            &mut rows, &mut b, &mut push, q, w, a, plus_side, area, mult,
                        );
                    }
                }
            }
        }
        (CsrMatrix::from_rows(rows), b)
    }

    /// Centered cross-term fluxes D_ab dC/dx_b (+ M_ab C dPhi/dx_b) on the
    /// a-directed face between q and w.
    #[allow(clippy::too_many_arguments)]
    fn assemble_cross_terms(
        &self,
        rows: &mut Vec<Vec<(usize, f64)>>,
        b: &mut Vec<f64>,
        push: &mut impl FnMut(&mut Vec<Vec<(usize, f64)>>, &mut Vec<f64>, usize, usize, f64),
        q: usize,
        w: usize,
        a: usize,
        plus_side: bool,
        area: f64,
        mult: f64,
    ) -> () {
        let grid = self.grid;
        let dim = grid.dim();
        // Sign of the equation contribution: -G*area on the +a face,
        // +G*area on the -a face, with G measured in the +a direction.
        // On the -a face the +a-directed flux is the same expression, so
        // only the outer sign flips.
        let outer = if plus_side { -1.0 } else { 1.0 };
        for bx in 0..dim {
            if bx == a || !self.active[bx] {
                continue;
            }
            let d_ab = self.diffusion.get(a, bx);
            if d_ab != 0.0 {
                for &nd in &[q, w] {
                    for (col, c) in derivative_stencil(grid, nd, bx) {
                        push(rows, b, q, col, outer * area * mult * d_ab * 0.5 * c);
                    }
                }
            }
            if let Some((mob, phi)) = self.drift {
                let m_ab = mob.get(a, bx);
                if m_ab != 0.0 {
                    let gphi = 0.5
                        * (derivative_value(grid, phi, q, bx)
                            + derivative_value(grid, phi, w, bx));
                    push(rows, b, q, q, outer * area * mult * m_ab * gphi * 0.5);
                    push(rows, b, q, w, outer * area * mult * m_ab * gphi * 0.5);
                }
            }
        }
    }
}

/// Solves the assembled system, warm-started from the current field.
fn solve_equation(
    op: &TransportOperator,
    matrix: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    controls: &PicardControls,
    context: &str,
) -> Result<Vec<f64>> {
    let max_iter = controls.max_lin_factor.max(1) * matrix.nrows().max(1) + 100;
    if op.is_symmetric() {
        pcg(matrix, b, Some(x0), controls.tol_lin, max_iter, false, context).map(|(x, _)| x)
    } else {
        bicgstab(matrix, b, Some(x0), controls.tol_lin, max_iter, context).map(|(x, _)| x)
    }
}

/// RMS of (A u - b) / control_volume over non-Dirichlet rows.
fn equation_residual(
    grid: &MacroGrid,
    matrix: &CsrMatrix,
    b: &[f64],
    u: &[f64],
    dirichlet: &dyn Fn(usize) -> Option<f64>,
) -> f64 {
    let n = grid.node_count();
    let mut au = vec![0.0; n];
    matrix.mul_vec(u, &mut au);
    let mut acc = 0.0;
    let mut count = 0usize;
    for q in 0..n {
        if dirichlet(q).is_some() {
            continue;
        }
        let r = (au[q] - b[q]) / grid.control_volume(q);
        acc += r * r;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        (acc / count as f64).sqrt()
    }
}

/// Tracks reaction evaluations across closures.
struct ReactionMonitor {
    clamp_events: Cell<u64>,
    min_rate: Cell<f64>,
}

impl ReactionMonitor {
    fn new() -> Self {
        Self {
            clamp_events: Cell::new(0),
            min_rate: Cell::new(f64::INFINITY),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn rate(&self, prob: &MacroProblem, species: ReactionSpecies, cp: f64, co: f64, phi: f64) -> f64 {
        let beta = match species {
            ReactionSpecies::Oxygen => prob.coeffs.reaction_oxygen,
            ReactionSpecies::Proton => prob.coeffs.reaction_proton,
        };
        let (r, clamped) = rate_clamped(
            beta,
            cp,
            co,
            phi,
            prob.alpha_c,
            prob.n_proton,
            prob.n_oxygen,
            prob.phi_eq,
        );
        if clamped {
            self.clamp_events.set(self.clamp_events.get() + 1);
        }
        if r < self.min_rate.get() {
            self.min_rate.set(r);
        }
        r
    }
}

/// Initial guess: concentrations constant at their Dirichlet values, the
/// potential linear between the two entrance values along axis 0.
fn initial_fields(prob: &MacroProblem) -> Vec<Vec<f64>> {
    let grid = &prob.grid;
    let n = grid.node_count();
    let c_o = vec![prob.bc.c_oxygen_right; n];
    let c_p = vec![prob.bc.c_proton_left; n];
    let len = grid.extent()[0];
    let phi = (0..n)
        .map(|q| {
            let x = grid.node_position(q)[0];
            prob.bc.phi_left + (prob.bc.phi_right - prob.bc.phi_left) * x / len
        })
        .collect();
    vec![c_o, c_p, phi]
}

fn enforce_dirichlet(prob: &MacroProblem, fields: &mut [Vec<f64>]) {
    for q in 0..prob.grid.node_count() {
        for (f, eq) in [
            (0usize, EquationKind::Oxygen),
            (1, EquationKind::Proton),
            (2, EquationKind::Potential),
        ] {
            if let Some(v) = prob.dirichlet(eq, q) {
                fields[f][q] = v;
            }
        }
    }
}

struct MacroResidual<'a> {
    prob: &'a MacroProblem,
    monitor: &'a ReactionMonitor,
    scale: f64,
}

impl<'a> MacroResidual<'a> {
    fn combined(&self, fields: &[Vec<f64>]) -> f64 {
        let prob = self.prob;
        let grid = &prob.grid;
        let (c_o, c_p, phi) = (&fields[0], &fields[1], &fields[2]);

        let r_o = {
            let op = TransportOperator::new(grid, &prob.coeffs.diffusion_oxygen, None, None)
                .expect("validated");
            let dir = |q: usize| prob.dirichlet(EquationKind::Oxygen, q);
            let src = |q: usize| {
                self.monitor
                    .rate(prob, ReactionSpecies::Oxygen, c_p[q], c_o[q], phi[q])
                    + prob.forcing_at(EquationKind::Oxygen, q)
            };
            let (m, b) = op.assemble(&dir, &src);
            equation_residual(grid, &m, &b, c_o, &dir)
        };
        let r_p = {
            let op = TransportOperator::new(
                grid,
                &prob.coeffs.diffusion_proton,
                Some((&prob.coeffs.mobility_proton, phi)),
                None,
            )
            .expect("validated");
            let dir = |q: usize| prob.dirichlet(EquationKind::Proton, q);
            let src = |q: usize| {
                self.monitor
                    .rate(prob, ReactionSpecies::Proton, c_p[q], c_o[q], phi[q])
                    + prob.forcing_at(EquationKind::Proton, q)
            };
            let (m, b) = op.assemble(&dir, &src);
            equation_residual(grid, &m, &b, c_p, &dir)
        };
        let r_phi = {
            let op = TransportOperator::new(grid, &prob.coeffs.permittivity, None, None)
                .expect("validated");
            let dir = |q: usize| prob.dirichlet(EquationKind::Potential, q);
            let src = |q: usize| {
                prob.coeffs.porosity * c_p[q]
                    + prob.rho_s[q]
                    + prob.forcing_at(EquationKind::Potential, q)
            };
            let (m, b) = op.assemble(&dir, &src);
            equation_residual(grid, &m, &b, phi, &dir)
        };
        (r_o * r_o + r_p * r_p + r_phi * r_phi).sqrt() / self.scale
    }
}

fn blend(old: &[f64], new: &[f64], omega: f64) -> Vec<f64> {
    old.iter()
        .zip(new.iter())
        .map(|(o, n)| (1.0 - omega) * o + omega * n)
        .collect()
}

/// One damped Gummel sweep: a screened Poisson update for the potential,
/// blended by `omega`; then protons re-solved at the blended potential with
/// the reaction frozen at the previous state; then oxygen likewise. The
/// concentration updates are blended by the same factor, so the trial tends
/// to the current state as omega goes to zero.
fn gummel_sweep(
    prob: &MacroProblem,
    controls: &PicardControls,
    monitor: &ReactionMonitor,
    fields: &[Vec<f64>],
    omega: f64,
) -> Result<Vec<Vec<f64>>> {
    let grid = &prob.grid;
    let (c_o, c_p, phi) = (&fields[0], &fields[1], &fields[2]);

    // Potential, with the proton source linearized around the current state
    // (C_+ ~ C_+^old exp(-(Phi - Phi^old))), which screens the update on
    // small permittivities. The fixed point is the plain Poisson equation.
    let phi_trial = {
        let op = TransportOperator::new(grid, &prob.coeffs.permittivity, None, None)?;
        let dir = |q: usize| prob.dirichlet(EquationKind::Potential, q);
        let screening: Vec<f64> = c_p
            .iter()
            .map(|c| prob.coeffs.porosity * c.max(0.0))
            .collect();
        let src = |q: usize| {
            prob.coeffs.porosity * c_p[q]
                + prob.rho_s[q]
                + prob.forcing_at(EquationKind::Potential, q)
                + screening[q] * phi[q]
        };
        let (m, b) = op.assemble_with_screening(&dir, &src, Some(&screening));
        let phi_new = solve_equation(&op, &m, &b, phi, controls, "macro potential")?;
        blend(phi, &phi_new, omega)
    };

    // Protons, drift frozen at the damped potential.
    let c_p_trial = {
        let op = TransportOperator::new(
            grid,
            &prob.coeffs.diffusion_proton,
            Some((&prob.coeffs.mobility_proton, &phi_trial)),
            None,
        )?;
        let dir = |q: usize| prob.dirichlet(EquationKind::Proton, q);
        let src = |q: usize| {
            monitor.rate(prob, ReactionSpecies::Proton, c_p[q], c_o[q], phi_trial[q])
                + prob.forcing_at(EquationKind::Proton, q)
        };
        let (m, b) = op.assemble(&dir, &src);
        let c_p_new = solve_equation(&op, &m, &b, c_p, controls, "macro protons")?;
        blend(c_p, &c_p_new, omega)
    };

    // Oxygen.
    let c_o_trial = {
        let op = TransportOperator::new(grid, &prob.coeffs.diffusion_oxygen, None, None)?;
        let dir = |q: usize| prob.dirichlet(EquationKind::Oxygen, q);
        let src = |q: usize| {
            monitor.rate(prob, ReactionSpecies::Oxygen, c_p_trial[q], c_o[q], phi_trial[q])
                + prob.forcing_at(EquationKind::Oxygen, q)
        };
        let (m, b) = op.assemble(&dir, &src);
        let c_o_new = solve_equation(&op, &m, &b, c_o, controls, "macro oxygen")?;
        blend(c_o, &c_o_new, omega)
    };

    Ok(vec![c_o_trial, c_p_trial, phi_trial])
}

/// Solves the upscaled system from the default initial guess.
pub fn solve_macro(prob: &MacroProblem, controls: &PicardControls) -> Result<MacroState> {
    solve_impl(prob, controls, None)
}

/// Solves the upscaled system warm-started from an existing state.
pub fn solve_macro_from(
    prob: &MacroProblem,
    controls: &PicardControls,
    initial: &MacroState,
) -> Result<MacroState> {
    solve_impl(prob, controls, Some(initial))
}

fn solve_impl(
    prob: &MacroProblem,
    controls: &PicardControls,
    initial: Option<&MacroState>,
) -> Result<MacroState> {
    // Validate the tensors up front so blocked directions fail loudly here.
    TransportOperator::new(&prob.grid, &prob.coeffs.diffusion_oxygen, None, None)?;
    TransportOperator::new(&prob.grid, &prob.coeffs.permittivity, None, None)?;
    {
        let zero = vec![0.0; prob.grid.node_count()];
        TransportOperator::new(
            &prob.grid,
            &prob.coeffs.diffusion_proton,
            Some((&prob.coeffs.mobility_proton, &zero)),
            None,
        )?;
    }

    let mut fields = match initial {
        Some(s) => vec![s.c_oxygen.clone(), s.c_proton.clone(), s.phi.clone()],
        None => initial_fields(prob),
    };
    enforce_dirichlet(prob, &mut fields);

    let monitor = ReactionMonitor::new();
    let residual = MacroResidual {
        prob,
        monitor: &monitor,
        scale: prob.residual_scale(),
    };
    let outcome = picard::run(
        controls,
        &mut fields,
        |f| residual.combined(f),
        |f, omega| gummel_sweep(prob, controls, &monitor, f, omega),
    )?;

    let phi = fields.remove(2);
    let c_proton = fields.remove(1);
    let c_oxygen = fields.remove(0);
    let max_overpotential = phi
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(v - prob.phi_eq));
    let min_reaction = if monitor.min_rate.get().is_finite() {
        monitor.min_rate.get()
    } else {
        0.0
    };
    Ok(MacroState {
        c_oxygen,
        c_proton,
        phi,
        diagnostics: SolveDiagnostics {
            converged: outcome.converged,
            outer_iterations: outcome.iterations,
            residual_history: outcome.residual_history,
            final_damping: outcome.final_damping,
            stalled: outcome.stalled,
            clamp_events: monitor.clamp_events.get(),
            min_reaction,
            max_overpotential,
        },
    })
}

/// Discrete divergence-theorem check for the oxygen equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxBalance {
    /// Total discrete oxygen flux through the faces adjacent to Dirichlet
    /// nodes, measured outward from the free region.
    pub boundary_outflux: f64,
    /// Integrated reaction (plus forcing) over the free control volumes.
    pub reaction_integral: f64,
    pub relative_mismatch: f64,
}

/// On a converged state the outward boundary flux of D_O grad C_O balances
/// the integrated oxygen source exactly, up to the solver tolerance.
pub fn oxygen_flux_balance(prob: &MacroProblem, state: &MacroState) -> Result<FluxBalance> {
    let grid = &prob.grid;
    let op = TransportOperator::new(grid, &prob.coeffs.diffusion_oxygen, None, None)?;
    if !op.diagonal_only {
        return Err(Error::InvalidParameter(
            "flux balance is reported for diagonal oxygen tensors".into(),
        ));
    }
    let dim = grid.dim();
    let mut outflux = 0.0;
    for q in 0..grid.node_count() {
        if prob.dirichlet(EquationKind::Oxygen, q).is_some() {
            continue;
        }
        let idx = grid.node_coords(q);
        for a in 0..dim {
            if !op.active[a] {
                continue;
            }
            for plus_side in [true, false] {
                let exists = if plus_side {
                    idx[a] < grid.cells()[a]
                } else {
                    idx[a] > 0
                };
                if !exists {
                    continue;
                }
                let mut widx = idx;
                widx[a] = if plus_side { idx[a] + 1 } else { idx[a] - 1 };
                let w = grid.node_index(&widx[..dim]);
                if prob.dirichlet(EquationKind::Oxygen, w).is_none() {
                    continue;
                }
                // Flux leaving the free region through this face.
                let coef =
                    prob.coeffs.diffusion_oxygen.get(a, a) / grid.spacing(a) * grid.face_area(q, a);
                let g = coef * (state.c_oxygen[w] - state.c_oxygen[q]);
                outflux += if plus_side { g } else { -g };
            }
        }
    }
    let mut reaction = 0.0;
    for q in 0..grid.node_count() {
        if prob.dirichlet(EquationKind::Oxygen, q).is_some() {
            continue;
        }
        let r = butler_volmer_rate(
            state.c_proton[q],
            state.c_oxygen[q],
            state.phi[q],
            prob,
            ReactionSpecies::Oxygen,
        ) + prob.forcing_at(EquationKind::Oxygen, q);
        reaction += r * grid.control_volume(q);
    }
    let denom = outflux.abs().max(reaction.abs());
    let floor = 1e-9 * prob.residual_scale();
    let relative_mismatch = (outflux + reaction).abs() / denom.max(floor);
    Ok(FluxBalance {
        boundary_outflux: outflux,
        reaction_integral: reaction,
        relative_mismatch,
    })
}

/// Dimensionless bulk free energy of a state:
/// integral of sum_k C_k (log C_k - 1) + C_+ Phi - lambda_sq |grad Phi|^2
/// by trapezoidal quadrature, with C log C -> 0 at C = 0. Setting
/// `flip_gradient_sign` turns the printed minus into the electrostatic
/// plus convention.
pub fn free_energy(
    state: &MacroState,
    grid: &MacroGrid,
    lambda_sq: f64,
    flip_gradient_sign: bool,
) -> f64 {
    let entropy = |c: f64| if c > 0.0 { c * (c.ln() - 1.0) } else { 0.0 };
    let sign = if flip_gradient_sign { 1.0 } else { -1.0 };
    let mut h = 0.0;
    for q in 0..grid.node_count() {
        let mut grad_sq = 0.0;
        for a in 0..grid.dim() {
            let g = derivative_value(grid, &state.phi, q, a);
            grad_sq += g * g;
        }
        let integrand = entropy(state.c_oxygen[q])
            + entropy(state.c_proton[q])
            + state.c_proton[q] * state.phi[q]
            + sign * lambda_sq * grad_sq;
        h += integrand * grid.quadrature_weight(q);
    }
    h
}

/// Local-equilibrium diagnostic: per block of `block` nodes per axis, the
/// max-min spread of log C_+ + Phi. Nodes with C_+ <= 0 are skipped and
/// counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEquilibriumReport {
    pub block_counts: Vec<usize>,
    pub spreads: Vec<f64>,
    pub max_spread: f64,
    pub skipped_nodes: usize,
}

pub fn check_local_equilibrium(
    state: &MacroState,
    grid: &MacroGrid,
    block: usize,
) -> LocalEquilibriumReport {
    let block = block.max(1);
    let dim = grid.dim();
    let counts: Vec<usize> = (0..dim)
        .map(|a| grid.nodes_per_axis(a).div_ceil(block))
        .collect();
    let n_blocks: usize = counts.iter().product();
    let mut lo = vec![f64::INFINITY; n_blocks];
    let mut hi = vec![f64::NEG_INFINITY; n_blocks];
    let mut skipped = 0usize;
    for q in 0..grid.node_count() {
        let cp = state.c_proton[q];
        if cp <= 0.0 {
            skipped += 1;
            continue;
        }
        let mu = cp.ln() + state.phi[q];
        let idx = grid.node_coords(q);
        let mut blk = 0;
        let mut stride = 1;
        for a in 0..dim {
            blk += (idx[a] / block) * stride;
            stride *= counts[a];
        }
        lo[blk] = lo[blk].min(mu);
        hi[blk] = hi[blk].max(mu);
    }
    let spreads: Vec<f64> = lo
        .iter()
        .zip(hi.iter())
        .map(|(l, h)| if h >= l { h - l } else { 0.0 })
        .collect();
    let max_spread = spreads.iter().fold(0.0f64, |m, v| m.max(*v));
    LocalEquilibriumReport {
        block_counts: counts,
        spreads,
        max_spread,
        skipped_nodes: skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_problem(cells: usize, beta: f64) -> MacroProblem {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![cells, cells]).unwrap();
        let mut coeffs = EffectiveCoefficients::homogeneous(2, 1.0);
        coeffs.reaction_oxygen = beta;
        coeffs.reaction_proton = beta;
        let n = grid.node_count();
        MacroProblem::new(
            grid,
            coeffs,
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 1.0,
                c_proton_left: 1.0,
                phi_right: 0.0,
                phi_left: 0.0,
            },
            vec![0.0; n],
        )
        .unwrap()
    }

    #[test]
    fn butler_volmer_examples() {
        let prob = unit_problem(4, 1.0);
        // Unit concentrations at zero over-potential give beta_bar.
        assert_relative_eq!(
            butler_volmer_rate(1.0, 1.0, 0.0, &prob, ReactionSpecies::Oxygen),
            1.0,
            epsilon = 1e-14
        );
        // Zero oxygen kills the rate for n_O > 0.
        assert_eq!(
            butler_volmer_rate(1.0, 0.0, 0.3, &prob, ReactionSpecies::Proton),
            0.0
        );
        // Direct evaluation: 1 * 0.5 * 0.25 * exp(-0.5 * (-2)) = 0.125 e.
        assert_relative_eq!(
            butler_volmer_rate(0.5, 0.25, -2.0, &prob, ReactionSpecies::Oxygen),
            0.125 * std::f64::consts::E,
            max_relative = 1e-14
        );
        // Negative concentrations are clipped.
        assert_eq!(
            butler_volmer_rate(-1.0, 1.0, 0.0, &prob, ReactionSpecies::Oxygen),
            0.0
        );
    }

    #[test]
    fn exponential_clamping_is_counted() {
        let prob = unit_problem(2, 1.0);
        let r = butler_volmer_rate(1.0, 1.0, -3000.0, &prob, ReactionSpecies::Oxygen);
        assert!(r.is_finite() && r > 0.0);
        let (_, clamped) = rate_clamped(1.0, 1.0, 1.0, -3000.0, 0.5, 1.0, 1.0, 0.0);
        assert!(clamped);
    }

    #[test]
    fn bernoulli_limits() {
        assert_relative_eq!(bernoulli(0.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(bernoulli(1e-10), 1.0, epsilon = 1e-9);
        // B(t) + B(-t) relation: B(-t) = B(t) + t.
        for t in [0.3, 2.0, 30.0] {
            assert_relative_eq!(bernoulli(-t), bernoulli(t) + t, max_relative = 1e-12);
        }
        assert_eq!(bernoulli(800.0), 0.0);
        assert_relative_eq!(bernoulli(-800.0), 800.0, max_relative = 1e-12);
    }

    #[test]
    fn trivial_constant_solution() {
        // beta = 0, rho = 0, C_+^D = 0, equal potentials: constants solve
        // the decoupled system exactly.
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![8, 8]).unwrap();
        let n = grid.node_count();
        let prob = MacroProblem::new(
            grid,
            EffectiveCoefficients::homogeneous(2, 1.0),
            0.5,
            1.0,
            1.0,
            0.25,
            BoundaryData {
                c_oxygen_right: 0.7,
                c_proton_left: 0.0,
                phi_right: 0.25,
                phi_left: 0.25,
            },
            vec![0.0; n],
        )
        .unwrap();
        let state = solve_macro(&prob, &PicardControls::default()).unwrap();
        assert!(state.diagnostics.converged);
        for q in 0..n {
            assert_relative_eq!(state.c_oxygen[q], 0.7, epsilon = 1e-9);
            assert!(state.c_proton[q].abs() <= 1e-9);
            assert_relative_eq!(state.phi[q], 0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn coupled_solve_converges_and_balances_flux() {
        let prob = unit_problem(12, 0.8);
        let controls = PicardControls::default();
        let state = solve_macro(&prob, &controls).unwrap();
        assert!(state.diagnostics.converged);
        assert!(state.min_concentration() >= -1e-12);
        assert!(state.diagnostics.min_reaction >= 0.0);
        let balance = oxygen_flux_balance(&prob, &state).unwrap();
        assert!(
            balance.relative_mismatch <= 1e-6,
            "mismatch {:.3e}",
            balance.relative_mismatch
        );
        // Residual history decreases monotonically after the start.
        let h = &state.diagnostics.residual_history;
        for w in h.windows(2).skip(1) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn warm_restart_takes_at_most_one_iteration() {
        let prob = unit_problem(10, 0.5);
        let controls = PicardControls::default();
        let state = solve_macro(&prob, &controls).unwrap();
        assert!(state.diagnostics.converged);
        let again = solve_macro_from(&prob, &controls, &state).unwrap();
        assert!(again.diagnostics.converged);
        assert!(again.diagnostics.outer_iterations <= 1);
    }

    #[test]
    fn potential_translation_invariance() {
        let mut prob = unit_problem(10, 0.7);
        prob.bc.phi_left = 0.2;
        prob.bc.phi_right = -0.1;
        let controls = PicardControls::default();
        let base = solve_macro(&prob, &controls).unwrap();

        let shift = 5.0;
        let mut shifted = prob.clone();
        shifted.bc.phi_left += shift;
        shifted.bc.phi_right += shift;
        shifted.phi_eq += shift;
        let moved = solve_macro(&shifted, &controls).unwrap();

        for q in 0..prob.grid.node_count() {
            assert_relative_eq!(moved.phi[q], base.phi[q] + shift, epsilon = 1e-6);
            assert_relative_eq!(moved.c_oxygen[q], base.c_oxygen[q], epsilon = 1e-6);
            assert_relative_eq!(moved.c_proton[q], base.c_proton[q], epsilon = 1e-6);
        }
    }

    #[test]
    fn blocked_direction_acts_as_parameter() {
        // Straight-channel tensors: diag(p, 0). The solve must not fail on
        // the singular direction and must stay constant along it.
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![10, 6]).unwrap();
        let n = grid.node_count();
        let coeffs = EffectiveCoefficients {
            diffusion_oxygen: SquareMatrix::diagonal(&[0.6, 0.0]),
            diffusion_proton: SquareMatrix::diagonal(&[0.6, 0.0]),
            mobility_proton: SquareMatrix::diagonal(&[0.6, 0.0]),
            permittivity: SquareMatrix::diagonal(&[0.006, 0.0]),
            porosity: 0.6,
            interface_measure: 2.0,
            reaction_oxygen: 0.2,
            reaction_proton: 0.4,
        };
        let prob = MacroProblem::new(
            grid.clone(),
            coeffs,
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 1.0,
                c_proton_left: 0.5,
                phi_right: -0.1,
                phi_left: 0.1,
            },
            vec![-0.3; n],
        )
        .unwrap();
        let state = solve_macro(&prob, &PicardControls::default()).unwrap();
        assert!(state.diagnostics.converged);
        // Constant along axis 1.
        for i in 0..grid.nodes_per_axis(0) {
            let base = state.c_oxygen[grid.node_index(&[i, 0])];
            for j in 1..grid.nodes_per_axis(1) {
                assert_relative_eq!(
                    state.c_oxygen[grid.node_index(&[i, j])],
                    base,
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn vanishing_diffusion_with_mobility_is_rejected() {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![4, 4]).unwrap();
        let n = grid.node_count();
        let coeffs = EffectiveCoefficients {
            diffusion_oxygen: SquareMatrix::identity(2),
            diffusion_proton: SquareMatrix::diagonal(&[1.0, 0.0]),
            mobility_proton: SquareMatrix::identity(2),
            permittivity: SquareMatrix::identity(2),
            porosity: 1.0,
            interface_measure: 0.0,
            reaction_oxygen: 0.0,
            reaction_proton: 0.0,
        };
        let prob = MacroProblem::new(
            grid,
            coeffs,
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 1.0,
                c_proton_left: 1.0,
                phi_right: 0.0,
                phi_left: 0.0,
            },
            vec![0.0; n],
        )
        .unwrap();
        assert!(solve_macro(&prob, &PicardControls::default()).is_err());
    }

    #[test]
    fn free_energy_examples() {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![6, 6]).unwrap();
        let n = grid.node_count();
        let diag = SolveDiagnostics {
            converged: true,
            outer_iterations: 0,
            residual_history: vec![],
            final_damping: 1.0,
            stalled: false,
            clamp_events: 0,
            min_reaction: 0.0,
            max_overpotential: 0.0,
        };
        let ones = MacroState {
            c_oxygen: vec![1.0; n],
            c_proton: vec![1.0; n],
            phi: vec![0.0; n],
            diagnostics: diag.clone(),
        };
        assert_relative_eq!(free_energy(&ones, &grid, 1.0, false), -2.0, epsilon = 1e-12);

        let zeros = MacroState {
            c_oxygen: vec![0.0; n],
            c_proton: vec![0.0; n],
            phi: vec![0.0; n],
            diagnostics: diag.clone(),
        };
        assert_eq!(free_energy(&zeros, &grid, 1.0, false), 0.0);

        let e_state = MacroState {
            c_oxygen: vec![1.0; n],
            c_proton: vec![std::f64::consts::E; n],
            phi: vec![0.0; n],
            diagnostics: diag,
        };
        assert_relative_eq!(free_energy(&e_state, &grid, 1.0, false), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn local_equilibrium_examples() {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![8, 8]).unwrap();
        let n = grid.node_count();
        let diag = SolveDiagnostics {
            converged: true,
            outer_iterations: 0,
            residual_history: vec![],
            final_damping: 1.0,
            stalled: false,
            clamp_events: 0,
            min_reaction: 0.0,
            max_overpotential: 0.0,
        };
        // Constant fields: zero spread.
        let constant = MacroState {
            c_oxygen: vec![1.0; n],
            c_proton: vec![2.0; n],
            phi: vec![0.3; n],
            diagnostics: diag.clone(),
        };
        let rep = check_local_equilibrium(&constant, &grid, 3);
        assert_eq!(rep.max_spread, 0.0);
        assert_eq!(rep.skipped_nodes, 0);

        // Exact Boltzmann relation: log C_+ + Phi = 0 everywhere.
        let phi: Vec<f64> = (0..n).map(|q| grid.node_position(q)[0] - 0.4).collect();
        let boltzmann = MacroState {
            c_oxygen: vec![1.0; n],
            c_proton: phi.iter().map(|p| (-p).exp()).collect(),
            phi: phi.clone(),
            diagnostics: diag.clone(),
        };
        let rep = check_local_equilibrium(&boltzmann, &grid, 4);
        assert!(rep.max_spread <= 1e-12);

        // Linear potential with constant protons: spread equals the
        // potential range inside each block.
        let linear = MacroState {
            c_oxygen: vec![1.0; n],
            c_proton: vec![1.0; n],
            phi,
            diagnostics: diag,
        };
        let rep = check_local_equilibrium(&linear, &grid, 4);
        // 4 nodes per block, spacing 1/8: range = 3/8 of the axis spread.
        assert_relative_eq!(rep.max_spread, 3.0 / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_proton_nodes_are_skipped() {
        let grid = MacroGrid::new(vec![1.0], vec![4]).unwrap();
        let n = grid.node_count();
        let diag = SolveDiagnostics {
            converged: true,
            outer_iterations: 0,
            residual_history: vec![],
            final_damping: 1.0,
            stalled: false,
            clamp_events: 0,
            min_reaction: 0.0,
            max_overpotential: 0.0,
        };
        let mut c_p = vec![1.0; n];
        c_p[2] = 0.0;
        let state = MacroState {
            c_oxygen: vec![1.0; n],
            c_proton: c_p,
            phi: vec![0.0; n],
            diagnostics: diag,
        };
        let rep = check_local_equilibrium(&state, &grid, 2);
        assert_eq!(rep.skipped_nodes, 1);
    }
}

