//! Thin-double-layer limit and straight-channel closed forms.
//!
//! The thin-double-layer system replaces the Poisson equation by the
//! algebraic closure C_+ = -rho_s / p (insulating matrix, vanishing Debye
//! length) and turns the proton equation into an elliptic equation for the
//! potential:
//!
//!   -div( (-rho_s/p) D_+ grad Phi ) = R_+  - div( D_+ grad(rho_s/p) ),
//!   -div( D_O grad C_O )            = R_O,
//!
//! with R evaluated at C_+ = -rho_s/p. The sign of the left-hand side
//! follows from substituting the closure into the upscaled proton equation,
//! which is what makes the full solver converge to this system as the
//! permittivities vanish.
//!
//! The straight-channel geometry (a periodic array of open layers) has
//! closed-form tensors: transport diag(p, 0, p) and permittivity
//! lambda_sq * diag(p, 0, p), the zero entry blocking the direction normal
//! to the channel walls. On such tensors the blocked coordinate acts as a
//! parameter and the macro system reduces by one dimension.

use crate::error::{Error, Result};
use crate::grid::MacroGrid;
use crate::macroscale::{
    solve_macro, BoundaryData, MacroProblem, MacroState, ReactionSpecies, SolveDiagnostics,
};
use crate::picard::{self, PicardControls};
use crate::tensors::{EffectiveCoefficients, SquareMatrix};

/// Closed-form effective coefficients of the straight-channel cell with an
/// insulating matrix: diag(p, 0) in 2D, diag(p, 0, p) in 3D, permittivity
/// scaled by lambda_sq. The two channel walls give interface measure 2.
/// Reaction couplings are left at zero for the caller to set.
pub fn straight_channel_tensors(
    porosity: f64,
    lambda_sq: f64,
    dim: usize,
) -> Result<EffectiveCoefficients> {
    if !(porosity > 0.0 && porosity <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "porosity must lie in (0, 1], got {porosity}"
        )));
    }
    if !(lambda_sq > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda_sq must be positive, got {lambda_sq}"
        )));
    }
    let entries: Vec<f64> = match dim {
        2 => vec![porosity, 0.0],
        3 => vec![porosity, 0.0, porosity],
        _ => {
            return Err(Error::InvalidParameter(format!(
                "straight-channel tensors are 2- or 3-dimensional, got {dim}"
            )))
        }
    };
    let eps: Vec<f64> = entries.iter().map(|e| lambda_sq * e).collect();
    let transport = SquareMatrix::diagonal(&entries);
    Ok(EffectiveCoefficients {
        diffusion_oxygen: transport.clone(),
        diffusion_proton: transport.clone(),
        mobility_proton: transport,
        permittivity: SquareMatrix::diagonal(&eps),
        porosity,
        interface_measure: 2.0,
        reaction_oxygen: 0.0,
        reaction_proton: 0.0,
    })
}

/// Thin-double-layer problem: macro domain and kinetics of the full model
/// with an insulating-matrix coefficient set and a non-positive background
/// charge. The proton Dirichlet datum is not used; protons are slaved to
/// the charge.
#[derive(Debug, Clone)]
pub struct TdlProblem {
    pub grid: MacroGrid,
    pub coeffs: EffectiveCoefficients,
    pub alpha_c: f64,
    pub n_proton: f64,
    pub n_oxygen: f64,
    pub phi_eq: f64,
    pub bc: BoundaryData,
    pub rho_s: Vec<f64>,
}

impl TdlProblem {
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
        if !(coeffs.porosity > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "porosity must be positive, got {}",
                coeffs.porosity
            )));
        }
        if let Some(bad) = rho_s.iter().find(|r| **r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "background charge must be non-positive for a non-negative \
                 proton concentration, found {bad}"
            )));
        }
        // Reuse the full-problem validation for grid/kinetics consistency.
        let probe = MacroProblem::new(
            grid.clone(),
            coeffs.clone(),
            alpha_c,
            n_proton,
            n_oxygen,
            phi_eq,
            bc,
            rho_s.clone(),
        )?;
        drop(probe);
        Ok(Self {
            grid,
            coeffs,
            alpha_c,
            n_proton,
            n_oxygen,
            phi_eq,
            bc,
            rho_s,
        })
    }

    fn as_macro_problem(&self) -> MacroProblem {
        MacroProblem::new(
            self.grid.clone(),
            self.coeffs.clone(),
            self.alpha_c,
            self.n_proton,
            self.n_oxygen,
            self.phi_eq,
            self.bc,
            self.rho_s.clone(),
        )
        .expect("validated at construction")
    }
}

/// Solves the reduced two-field thin-double-layer system. The returned
/// state carries C_+ = -rho_s / p exactly.
pub fn thin_double_layer_solve(
    prob: &TdlProblem,
    controls: &PicardControls,
) -> Result<MacroState> {
    let grid = &prob.grid;
    let n = grid.node_count();
    let macro_prob = prob.as_macro_problem();
    let porosity = prob.coeffs.porosity;

    // Algebraic proton closure and the charge-gradient source of the
    // potential equation, -div(D_+ grad(rho_s/p)), discretized with the
    // same face fluxes as the transport operators. Constant charge makes
    // it vanish identically.
    let charge: Vec<f64> = prob.rho_s.iter().map(|r| -r / porosity).collect();
    let rho_over_p: Vec<f64> = prob.rho_s.iter().map(|r| r / porosity).collect();
    let div_source = macroscale_divergence(grid, &prob.coeffs.diffusion_proton, &rho_over_p)?;

    // Nodes with no charge in their neighborhood carry no potential
    // equation; they hold the boundary-interpolated fill value.
    let charge_tol = 1e-14 * charge.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let fill = initial_potential(grid, &prob.bc);
    let charged: Vec<bool> = (0..n)
        .map(|q| node_sees_charge(grid, &charge, q, charge_tol))
        .collect();

    let phi_dirichlet = {
        let fill = fill.clone();
        let charged = charged.clone();
        let bc = prob.bc;
        move |g: &MacroGrid, q: usize| -> Option<f64> {
            if g.is_on_face(q, 0, false) {
                Some(bc.phi_left)
            } else if g.is_on_face(q, 0, true) {
                Some(bc.phi_right)
            } else if !charged[q] {
                Some(fill[q])
            } else {
                None
            }
        }
    };
    let oxy_dirichlet = |g: &MacroGrid, q: usize| -> Option<f64> {
        g.is_on_face(q, 0, true).then_some(prob.bc.c_oxygen_right)
    };

    let rate = |species: ReactionSpecies, cp: f64, co: f64, phi: f64| {
        crate::macroscale::butler_volmer_rate(cp, co, phi, &macro_prob, species)
    };

    let scale = {
        let div_max = div_source.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        1.0 + prob.coeffs.reaction_oxygen + prob.coeffs.reaction_proton + div_max
    };

    let mut fields = vec![
        vec![prob.bc.c_oxygen_right; n],
        fill.clone(),
    ];

    let residual = |f: &[Vec<f64>]| -> f64 {
        let (c_o, phi) = (&f[0], &f[1]);
        let r_phi = equation_residual_tdl(
            grid,
            &prob.coeffs.diffusion_proton,
            Some(&charge),
            &|q| phi_dirichlet(grid, q),
            &|q| rate(ReactionSpecies::Proton, charge[q], c_o[q], phi[q]) + div_source[q],
            phi,
        );
        let r_o = equation_residual_tdl(
            grid,
            &prob.coeffs.diffusion_oxygen,
            None,
            &|q| oxy_dirichlet(grid, q),
            &|q| rate(ReactionSpecies::Oxygen, charge[q], c_o[q], phi[q]),
            c_o,
        );
        (r_o * r_o + r_phi * r_phi).sqrt() / scale
    };

    let sweep = |f: &[Vec<f64>], omega: f64| -> Result<Vec<Vec<f64>>> {
        let (c_o, phi) = (&f[0], &f[1]);
        let phi_trial = {
            let op = crate::macroscale::transport_operator(
                grid,
                &prob.coeffs.diffusion_proton,
                None,
                Some(&charge),
            )?;
            let dir = |q: usize| phi_dirichlet(grid, q);
            let src = |q: usize| {
                rate(ReactionSpecies::Proton, charge[q], c_o[q], phi[q]) + div_source[q]
            };
            let (m, b) = crate::macroscale::assemble_operator(&op, &dir, &src);
            let solved =
                crate::macroscale::solve_operator(&op, &m, &b, phi, controls, "tdl potential")?;
            blend(phi, &solved, omega)
        };
        let c_o_trial = {
            let op = crate::macroscale::transport_operator(
                grid,
                &prob.coeffs.diffusion_oxygen,
                None,
                None,
            )?;
            let dir = |q: usize| oxy_dirichlet(grid, q);
            let src =
                |q: usize| rate(ReactionSpecies::Oxygen, charge[q], c_o[q], phi_trial[q]);
            let (m, b) = crate::macroscale::assemble_operator(&op, &dir, &src);
            let solved =
                crate::macroscale::solve_operator(&op, &m, &b, c_o, controls, "tdl oxygen")?;
            blend(c_o, &solved, omega)
        };
        Ok(vec![c_o_trial, phi_trial])
    };

    let outcome = picard::run(controls, &mut fields, residual, sweep)?;
    let phi = fields.remove(1);
    let c_oxygen = fields.remove(0);
    let max_overpotential = phi
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(v - prob.phi_eq));
    Ok(MacroState {
        c_oxygen,
        c_proton: charge,
        phi,
        diagnostics: SolveDiagnostics {
            converged: outcome.converged,
            outer_iterations: outcome.iterations,
            residual_history: outcome.residual_history,
            final_damping: outcome.final_damping,
            stalled: outcome.stalled,
            clamp_events: 0,
            min_reaction: 0.0,
            max_overpotential,
        },
    })
}

fn blend(old: &[f64], new: &[f64], omega: f64) -> Vec<f64> {
    old.iter()
        .zip(new.iter())
        .map(|(o, n)| (1.0 - omega) * o + omega * n)
        .collect()
}

fn initial_potential(grid: &MacroGrid, bc: &BoundaryData) -> Vec<f64> {
    let len = grid.extent()[0];
    (0..grid.node_count())
        .map(|q| {
            let x = grid.node_position(q)[0];
            bc.phi_left + (bc.phi_right - bc.phi_left) * x / len
        })
        .collect()
}

fn node_sees_charge(grid: &MacroGrid, charge: &[f64], q: usize, tol: f64) -> bool {
    if charge[q].abs() > tol {
        return true;
    }
    let idx = grid.node_coords(q);
    for a in 0..grid.dim() {
        for delta in [-1isize, 1] {
            let j = idx[a] as isize + delta;
            if j < 0 || j > grid.cells()[a] as isize {
                continue;
            }
            let mut widx = idx;
            widx[a] = j as usize;
            if charge[grid.node_index(&widx[..grid.dim()])].abs() > tol {
                return true;
            }
        }
    }
    false
}

/// Discrete -div(D grad field) as a nodal source density, using the
/// pure-Neumann version of the transport stencil.
fn macroscale_divergence(
    grid: &MacroGrid,
    diffusion: &SquareMatrix,
    field: &[f64],
) -> Result<Vec<f64>> {
    let op = crate::macroscale::transport_operator(grid, diffusion, None, None)?;
    let no_dirichlet = |_: usize| -> Option<f64> { None };
    let zero = |_: usize| 0.0;
    let (m, _) = crate::macroscale::assemble_operator(&op, &no_dirichlet, &zero);
    let mut out = vec![0.0; grid.node_count()];
    m.mul_vec(field, &mut out);
    for (q, v) in out.iter_mut().enumerate() {
        *v /= grid.control_volume(q);
    }
    Ok(out)
}

fn equation_residual_tdl(
    grid: &MacroGrid,
    diffusion: &SquareMatrix,
    multiplier: Option<&[f64]>,
    dirichlet: &dyn Fn(usize) -> Option<f64>,
    source: &dyn Fn(usize) -> f64,
    u: &[f64],
) -> f64 {
    let op = crate::macroscale::transport_operator(grid, diffusion, None, multiplier)
        .expect("validated");
    let (m, b) = crate::macroscale::assemble_operator(&op, dirichlet, source);
    crate::macroscale::operator_residual(grid, &m, &b, u, dirichlet)
}

/// Solves a straight-channel macro problem by dimension reduction: the
/// blocked coordinate (axis 1) is dropped, the reduced system solved with
/// the general solver, and the solution broadcast back. Boundary data,
/// charge and forcing must not depend on the blocked coordinate.
pub fn straight_channel_macro(
    prob: &MacroProblem,
    controls: &PicardControls,
) -> Result<MacroState> {
    let grid = &prob.grid;
    let dim = grid.dim();
    if dim < 2 {
        return Err(Error::InvalidParameter(
            "straight-channel reduction needs a 2- or 3-dimensional problem".into(),
        ));
    }
    let blocked = 1usize;
    for (name, t) in [
        ("oxygen diffusion", &prob.coeffs.diffusion_oxygen),
        ("proton diffusion", &prob.coeffs.diffusion_proton),
        ("proton mobility", &prob.coeffs.mobility_proton),
        ("permittivity", &prob.coeffs.permittivity),
    ] {
        let tol = 1e-10 * t.max_abs().max(1e-300);
        if t.max_off_diagonal() > tol || t.get(blocked, blocked).abs() > tol {
            return Err(Error::InvalidParameter(format!(
                "{name} tensor does not match the straight-channel pattern \
                 (diagonal with a blocked axis 1)"
            )));
        }
    }

    // Reject data varying along the blocked coordinate.
    let varies = |field: &[f64]| -> bool {
        let n1 = grid.nodes_per_axis(blocked);
        (0..grid.node_count()).any(|q| {
            let mut idx = grid.node_coords(q);
            if idx[blocked] == 0 {
                return false;
            }
            let v = field[q];
            idx[blocked] = 0;
            let base = field[grid.node_index(&idx[..dim])];
            let _ = n1;
            (v - base).abs() > 1e-12 * (1.0 + base.abs())
        })
    };
    if varies(&prob.rho_s) {
        return Err(Error::InvalidParameter(
            "background charge varies along the blocked coordinate".into(),
        ));
    }
    if let Some(f) = &prob.forcing {
        for field in f {
            if varies(field) {
                return Err(Error::InvalidParameter(
                    "forcing varies along the blocked coordinate".into(),
                ));
            }
        }
    }

    // Reduced grid and coefficients: drop axis 1.
    let kept: Vec<usize> = (0..dim).filter(|a| *a != blocked).collect();
    let red_extent: Vec<f64> = kept.iter().map(|a| grid.extent()[*a]).collect();
    let red_cells: Vec<usize> = kept.iter().map(|a| grid.cells()[*a]).collect();
    let red_grid = MacroGrid::new(red_extent, red_cells)?;

    let reduce_matrix = |t: &SquareMatrix| -> SquareMatrix {
        let mut m = SquareMatrix::zeros(kept.len());
        for (i, ai) in kept.iter().enumerate() {
            for (k, ak) in kept.iter().enumerate() {
                m.set(i, k, t.get(*ai, *ak));
            }
        }
        m
    };
    let red_coeffs = EffectiveCoefficients {
        diffusion_oxygen: reduce_matrix(&prob.coeffs.diffusion_oxygen),
        diffusion_proton: reduce_matrix(&prob.coeffs.diffusion_proton),
        mobility_proton: reduce_matrix(&prob.coeffs.mobility_proton),
        permittivity: reduce_matrix(&prob.coeffs.permittivity),
        ..prob.coeffs.clone()
    };

    let slice_field = |field: &[f64]| -> Vec<f64> {
        (0..red_grid.node_count())
            .map(|rq| {
                let ridx = red_grid.node_coords(rq);
                let mut idx = [0usize; 3];
                for (i, a) in kept.iter().enumerate() {
                    idx[*a] = ridx[i];
                }
                idx[blocked] = 0;
                field[grid.node_index(&idx[..dim])]
            })
            .collect()
    };

    let mut red_prob = MacroProblem::new(
        red_grid.clone(),
        red_coeffs,
        prob.alpha_c,
        prob.n_proton,
        prob.n_oxygen,
        prob.phi_eq,
        prob.bc,
        slice_field(&prob.rho_s),
    )?;
    if let Some(f) = &prob.forcing {
        red_prob.forcing = Some([
            slice_field(&f[0]),
            slice_field(&f[1]),
            slice_field(&f[2]),
        ]);
    }

    let red_state = solve_macro(&red_prob, controls)?;

    // Broadcast along the blocked coordinate.
    let lift = |red: &[f64]| -> Vec<f64> {
        (0..grid.node_count())
            .map(|q| {
                let idx = grid.node_coords(q);
                let ridx: Vec<usize> = kept.iter().map(|a| idx[*a]).collect();
                red[red_grid.node_index(&ridx)]
            })
            .collect()
    };
    Ok(MacroState {
        c_oxygen: lift(&red_state.c_oxygen),
        c_proton: lift(&red_state.c_proton),
        phi: lift(&red_state.phi),
        diagnostics: red_state.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macroscale::solve_macro_from;
    use approx::assert_relative_eq;

    fn tdl_problem(
        cells: usize,
        rho: f64,
        beta_o: f64,
        beta_p: f64,
    ) -> TdlProblem {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![cells, cells]).unwrap();
        let n = grid.node_count();
        let mut coeffs = straight_channel_tensors(0.6, 1e-4, 2).unwrap();
        coeffs.reaction_oxygen = beta_o;
        coeffs.reaction_proton = beta_p;
        TdlProblem::new(
            grid,
            coeffs,
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 1.0,
                c_proton_left: 0.0,
                phi_right: 0.0,
                phi_left: 0.0,
            },
            vec![rho; n],
        )
        .unwrap()
    }

    #[test]
    fn closed_form_tensors() {
        let c = straight_channel_tensors(0.6, 0.01, 3).unwrap();
        let expect = [0.6, 0.0, 0.6];
        for i in 0..3 {
            for k in 0..3 {
                let e = if i == k { expect[i] } else { 0.0 };
                assert_eq!(c.diffusion_oxygen.get(i, k), e);
                assert_eq!(c.mobility_proton.get(i, k), e);
                assert_eq!(c.permittivity.get(i, k), 0.01 * e);
            }
        }
        let c2 = straight_channel_tensors(1.0, 0.5, 2).unwrap();
        assert_eq!(c2.diffusion_oxygen.get(0, 0), 1.0);
        assert_eq!(c2.diffusion_oxygen.get(1, 1), 0.0);
        assert!(straight_channel_tensors(0.0, 1.0, 2).is_err());
        assert!(straight_channel_tensors(0.5, 1.0, 4).is_err());
    }

    #[test]
    fn positive_charge_rejected() {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![4, 4]).unwrap();
        let n = grid.node_count();
        let coeffs = straight_channel_tensors(0.5, 1e-4, 2).unwrap();
        let mut rho = vec![-0.1; n];
        rho[3] = 0.2;
        assert!(TdlProblem::new(
            grid,
            coeffs,
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 1.0,
                c_proton_left: 0.0,
                phi_right: 0.0,
                phi_left: 0.0,
            },
            rho,
        )
        .is_err());
    }

    #[test]
    fn zero_charge_decouples() {
        let prob = tdl_problem(8, 0.0, 0.5, 0.5);
        let state = thin_double_layer_solve(&prob, &PicardControls::default()).unwrap();
        assert!(state.diagnostics.converged);
        for q in 0..prob.grid.node_count() {
            assert_eq!(state.c_proton[q], 0.0);
            // Reaction vanishes with the charge: oxygen is a pure Laplace
            // solve, constant under no-flux left / Dirichlet right.
            assert_relative_eq!(state.c_oxygen[q], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_charge_gives_exact_proton_closure() {
        let s0 = 0.12;
        let prob = tdl_problem(10, -s0, 0.4, 0.8);
        let state = thin_double_layer_solve(&prob, &PicardControls::default()).unwrap();
        assert!(state.diagnostics.converged);
        for q in 0..prob.grid.node_count() {
            assert_eq!(state.c_proton[q], s0 / 0.6);
        }
        // Nontrivial reaction bends the oxygen profile downward from the
        // Dirichlet value... the printed source sign raises it instead;
        // either way it must differ from the boundary value in the interior.
        let interior = prob.grid.node_index(&[1, 5]);
        assert!((state.c_oxygen[interior] - 1.0).abs() > 1e-4);
    }

    #[test]
    fn charge_gradient_source_vanishes_for_constant_charge() {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![6, 6]).unwrap();
        let coeffs = straight_channel_tensors(0.5, 1e-4, 2).unwrap();
        let field = vec![-0.3; grid.node_count()];
        let div = macroscale_divergence(&grid, &coeffs.diffusion_proton, &field).unwrap();
        assert!(div.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn p_cancellation_in_potential_equation() {
        // With the reaction held at zero, scaling p (with rho_s/p fixed)
        // scales the discrete potential-equation residual exactly linearly:
        // the transport and charge-gradient parts both carry one factor p.
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![6, 6]).unwrap();
        let n = grid.node_count();
        let a = 0.25; // -rho_s / p, held fixed
        let phi: Vec<f64> = (0..n)
            .map(|q| {
                let x = grid.node_position(q);
                (2.3 * x[0]).sin() + 0.3 * x[1]
            })
            .collect();
        let mut residuals = Vec::new();
        for p in [0.3, 0.6] {
            let coeffs = straight_channel_tensors(p, 1e-4, 2).unwrap();
            let rho_over_p = vec![-a; n];
            let charge = vec![a; n];
            let div = macroscale_divergence(&grid, &coeffs.diffusion_proton, &rho_over_p).unwrap();
            let op = crate::macroscale::transport_operator(
                &grid,
                &coeffs.diffusion_proton,
                None,
                Some(&charge),
            )
            .unwrap();
            let dir = |q: usize| -> Option<f64> {
                (grid.is_on_face(q, 0, false) || grid.is_on_face(q, 0, true)).then_some(0.0)
            };
            let src = |q: usize| div[q];
            let (m, b) = crate::macroscale::assemble_operator(&op, &dir, &src);
            let mut au = vec![0.0; n];
            m.mul_vec(&phi, &mut au);
            let res: Vec<f64> = (0..n)
                .filter(|q| dir(*q).is_none())
                .map(|q| au[q] - b[q])
                .collect();
            residuals.push(res);
        }
        for (r1, r2) in residuals[0].iter().zip(residuals[1].iter()) {
            assert_relative_eq!(2.0 * r1, *r2, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn reduced_solver_matches_general_solver() {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![12, 5]).unwrap();
        let n = grid.node_count();
        let mut coeffs = straight_channel_tensors(0.6, 0.5, 2).unwrap();
        coeffs.reaction_oxygen = 0.2;
        coeffs.reaction_proton = 0.3;
        let prob = MacroProblem::new(
            grid.clone(),
            coeffs,
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 1.0,
                c_proton_left: 0.4,
                phi_right: -0.05,
                phi_left: 0.05,
            },
            vec![-0.24; n],
        )
        .unwrap();
        let controls = PicardControls::default();
        let general = solve_macro(&prob, &controls).unwrap();
        assert!(general.diagnostics.converged);
        let reduced = straight_channel_macro(&prob, &controls).unwrap();
        assert!(reduced.diagnostics.converged);
        for q in 0..n {
            assert_relative_eq!(general.c_oxygen[q], reduced.c_oxygen[q], epsilon = 1e-7);
            assert_relative_eq!(general.c_proton[q], reduced.c_proton[q], epsilon = 1e-7);
            assert_relative_eq!(general.phi[q], reduced.phi[q], epsilon = 1e-7);
        }
        // Warm-starting the general solver from the reduced solution
        // converges immediately: they satisfy the same discrete system.
        let warm = solve_macro_from(&prob, &controls, &reduced).unwrap();
        assert!(warm.diagnostics.outer_iterations <= 1);
    }

    #[test]
    fn linear_dirichlet_profile_is_exact_without_reaction() {
        // beta = 0, rho = 0: oxygen constant; potential linear between its
        // Dirichlet values; both exactly representable.
        let grid = MacroGrid::new(vec![2.0, 1.0], vec![10, 4]).unwrap();
        let n = grid.node_count();
        let coeffs = straight_channel_tensors(0.7, 0.3, 2).unwrap();
        let prob = MacroProblem::new(
            grid.clone(),
            coeffs,
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 0.8,
                c_proton_left: 0.0,
                phi_right: 0.3,
                phi_left: -0.1,
            },
            vec![0.0; n],
        )
        .unwrap();
        let state = straight_channel_macro(&prob, &PicardControls::default()).unwrap();
        assert!(state.diagnostics.converged);
        for q in 0..n {
            let x = grid.node_position(q)[0];
            assert_relative_eq!(state.c_oxygen[q], 0.8, epsilon = 1e-9);
            assert_relative_eq!(state.phi[q], -0.1 + 0.4 * x / 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn blocked_coordinate_dependence_rejected() {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![6, 6]).unwrap();
        let n = grid.node_count();
        let coeffs = straight_channel_tensors(0.6, 0.5, 2).unwrap();
        let rho: Vec<f64> = (0..n)
            .map(|q| -0.1 - 0.05 * grid.node_position(q)[1])
            .collect();
        let prob = MacroProblem::new(
            grid,
            coeffs,
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 1.0,
                c_proton_left: 0.0,
                phi_right: 0.0,
                phi_left: 0.0,
            },
            rho,
        )
        .unwrap();
        assert!(straight_channel_macro(&prob, &PicardControls::default()).is_err());
    }

    #[test]
    fn non_channel_tensors_rejected() {
        let grid = MacroGrid::new(vec![1.0, 1.0], vec![4, 4]).unwrap();
        let n = grid.node_count();
        let prob = MacroProblem::new(
            grid,
            EffectiveCoefficients::homogeneous(2, 1.0),
            0.5,
            1.0,
            1.0,
            0.0,
            BoundaryData {
                c_oxygen_right: 1.0,
                c_proton_left: 0.0,
                phi_right: 0.0,
                phi_left: 0.0,
            },
            vec![0.0; n],
        )
        .unwrap();
        assert!(straight_channel_macro(&prob, &PicardControls::default()).is_err());
    }
}
