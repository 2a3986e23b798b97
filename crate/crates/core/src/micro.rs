//! Resolved microscopic solver at finite heterogeneity r (2D).
//!
//! The unit cell is tiled r^-1 times per unit length across the macro
//! domain and the coupled system is solved on the fine grid with Q1
//! elements:
//!
//! * oxygen and protons live on the pore phase with interface reaction
//!   terms scaled by r (the scaling that keeps the upscaled limit finite);
//! * the potential lives on the whole domain with the permittivity
//!   eps(x/r) and an r-scaled surface-charge jump on the interface;
//! * the proton drift-diffusion step uses the Slotboom substitution
//!   u = C_+ exp(Phi), which keeps the linear systems symmetric.
//!
//! Entrance boundary conditions match the macro model: C_O and Phi on the
//! right face, C_+ and Phi on the left face, no-flux walls elsewhere.
//! Concentrations are extended by zero in the solid phase.

use crate::cell::UnitCell;
use crate::error::{Error, Result};
use crate::fem;
use crate::grid::MacroGrid;
use crate::linalg::{pcg, CsrMatrix};
use crate::macroscale::{BoundaryData, MacroState, SolveDiagnostics};
use crate::picard::{self, PicardControls};
use serde::{Deserialize, Serialize};

/// Minimum micro grid cells per period.
pub const MIN_CELLS_PER_PERIOD: usize = 8;

const EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy)]
struct InterfaceFace {
    node_a: usize,
    node_b: usize,
    /// Surface charge density at the face midpoint.
    sigma: f64,
    length: f64,
}

/// Micro problem: tiled cell geometry, kinetics and boundary data.
#[derive(Debug, Clone)]
pub struct MicroProblem {
    pub cell: UnitCell,
    /// Heterogeneity ratio; 1/r periods tile each unit of length.
    pub r: f64,
    pub grid: MacroGrid,
    /// Unscaled reaction parameters; the solver applies the r factor.
    pub beta_oxygen: f64,
    pub beta_proton: f64,
    pub alpha_c: f64,
    pub n_proton: f64,
    pub n_oxygen: f64,
    pub phi_eq: f64,
    pub bc: BoundaryData,
    is_pore_elem: Vec<bool>,
    eps_elem: Vec<f64>,
    faces: Vec<InterfaceFace>,
    pore_node: Vec<bool>,
}

impl MicroProblem {
    /// Builds the tiled problem. `extent` is the macro box (each side must
    /// be an integer multiple of `r`), `subdivision` scales the cell
    /// resolution so each period carries `subdivision * cell_n` grid cells.
    /// `sigma_s` is the surface charge density as a function of the macro
    /// position, evaluated at interface face midpoints.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cell: UnitCell,
        r: f64,
        extent: Vec<f64>,
        subdivision: usize,
        beta_oxygen: f64,
        beta_proton: f64,
        alpha_c: f64,
        n_proton: f64,
        n_oxygen: f64,
        phi_eq: f64,
        bc: BoundaryData,
        sigma_s: Option<&dyn Fn(&[f64]) -> f64>,
    ) -> Result<Self> {
        if cell.dim() != 2 {
            return Err(Error::InvalidParameter(
                "the resolved micro solver is two-dimensional".into(),
            ));
        }
        if !(cell.gamma > 0.0) {
            return Err(Error::InvalidParameter(
                "the micro Poisson equation needs a positive solid permittivity".into(),
            ));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "heterogeneity ratio must lie in (0, 1], got {r}"
            )));
        }
        if extent.len() != 2 {
            return Err(Error::InvalidParameter("micro extent must be two-dimensional".into()));
        }
        let mut periods = [0usize; 2];
        for a in 0..2 {
            let m = extent[a] / r;
            if (m - m.round()).abs() > 1e-9 || m.round() < 1.0 {
                return Err(Error::InvalidGeometry(format!(
                    "extent {} along axis {a} is not an integer multiple of r = {r}",
                    extent[a]
                )));
            }
            periods[a] = m.round() as usize;
        }
        if subdivision == 0 {
            return Err(Error::InvalidParameter("subdivision must be positive".into()));
        }
        let n_sub = subdivision * cell.resolution();
        if n_sub < MIN_CELLS_PER_PERIOD {
            return Err(Error::InvalidParameter(format!(
                "under-resolved tiling: {n_sub} grid cells per period, need at least {MIN_CELLS_PER_PERIOD}"
            )));
        }
        let cells = vec![periods[0] * n_sub, periods[1] * n_sub];
        let grid = MacroGrid::new(extent, cells)?;
        if (grid.spacing(0) - grid.spacing(1)).abs() > 1e-12 * grid.spacing(0) {
            return Err(Error::InvalidGeometry("micro elements must be square".into()));
        }

        // Phase and permittivity per micro element via the periodic map
        // y = x / r.
        let n_elems = grid.cells()[0] * grid.cells()[1];
        let elem_coords = |e: usize| -> [usize; 2] {
            [e % grid.cells()[0], e / grid.cells()[0]]
        };
        let voxel_of = |e: usize| -> usize {
            let [i, j] = elem_coords(e);
            let vi = (i % n_sub) / subdivision;
            let vj = (j % n_sub) / subdivision;
            cell.voxel_index(&[vi, vj])
        };
        let mut is_pore_elem = vec![false; n_elems];
        let mut eps_elem = vec![0.0; n_elems];
        for e in 0..n_elems {
            let v = voxel_of(e);
            is_pore_elem[e] = cell.is_pore(v);
            eps_elem[e] = cell.eps(v);
        }

        // Interface faces between pore and solid elements (interior only).
        let h = grid.spacing(0);
        let mut faces = Vec::new();
        let elem_index = |i: usize, j: usize| i + grid.cells()[0] * j;
        for j in 0..grid.cells()[1] {
            for i in 0..grid.cells()[0] {
                let e = elem_index(i, j);
                // +x neighbor: shared edge at x = (i+1) h.
                if i + 1 < grid.cells()[0] {
                    let w = elem_index(i + 1, j);
                    if is_pore_elem[e] != is_pore_elem[w] {
                        let node_a = grid.node_index(&[i + 1, j]);
                        let node_b = grid.node_index(&[i + 1, j + 1]);
                        let mid = [(i + 1) as f64 * h, (j as f64 + 0.5) * h];
                        let sigma = sigma_s.map(|f| f(&mid)).unwrap_or(0.0);
                        faces.push(InterfaceFace { node_a, node_b, sigma, length: h });
                    }
                }
                // +y neighbor: shared edge at y = (j+1) h.
                if j + 1 < grid.cells()[1] {
                    let w = elem_index(i, j + 1);
                    if is_pore_elem[e] != is_pore_elem[w] {
                        let node_a = grid.node_index(&[i, j + 1]);
                        let node_b = grid.node_index(&[i + 1, j + 1]);
                        let mid = [(i as f64 + 0.5) * h, (j + 1) as f64 * h];
                        let sigma = sigma_s.map(|f| f(&mid)).unwrap_or(0.0);
                        faces.push(InterfaceFace { node_a, node_b, sigma, length: h });
                    }
                }
            }
        }

        let mut pore_node = vec![false; grid.node_count()];
        for e in 0..n_elems {
            if !is_pore_elem[e] {
                continue;
            }
            for nd in element_nodes(&grid, e) {
                pore_node[nd] = true;
            }
        }

        let prob = Self {
            cell,
            r,
            grid,
            beta_oxygen,
            beta_proton,
            alpha_c,
            n_proton,
            n_oxygen,
            phi_eq,
            bc,
            is_pore_elem,
            eps_elem,
            faces,
            pore_node,
        };
        Ok(prob)
    }

    pub fn is_pore_node(&self, node: usize) -> bool {
        self.pore_node[node]
    }

    pub fn is_pore_element(&self, elem: usize) -> bool {
        self.is_pore_elem[elem]
    }

    fn kinetic_factor(&self, c_p: f64, c_o: f64, phi: f64) -> f64 {
        let arg = (-self.alpha_c * (phi - self.phi_eq)).clamp(-EXP_CLAMP, EXP_CLAMP);
        c_p.max(0.0).powf(self.n_proton) * c_o.max(0.0).powf(self.n_oxygen) * arg.exp()
    }
}

/// Micro solution fields on the fine grid. Concentrations are zero on
/// solid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroState {
    pub c_oxygen: Vec<f64>,
    pub c_proton: Vec<f64>,
    pub phi: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

fn element_nodes(grid: &MacroGrid, elem: usize) -> [usize; 4] {
    let nx = grid.cells()[0];
    let i = elem % nx;
    let j = elem / nx;
    let mut out = [0usize; 4];
    for c in 0..4 {
        let di = fem::corner_offset(c, 0);
        let dj = fem::corner_offset(c, 1);
        out[c] = grid.node_index(&[i + di, j + dj]);
    }
    out
}

/// Lumped nodal volumes of the elements passing `filter`.
fn lumped_volume(grid: &MacroGrid, filter: impl Fn(usize) -> bool) -> Vec<f64> {
    let h = grid.spacing(0);
    let w = h * h / 4.0;
    let n_elems = grid.cells()[0] * grid.cells()[1];
    let mut vol = vec![0.0; grid.node_count()];
    for e in 0..n_elems {
        if !filter(e) {
            continue;
        }
        for nd in element_nodes(grid, e) {
            vol[nd] += w;
        }
    }
    vol
}

struct MicroSystem {
    matrix: CsrMatrix,
    free: Vec<bool>,
    volume: Vec<f64>,
}

/// Q1 assembly over elements with a per-element coefficient; rows of nodes
/// without support and Dirichlet rows become identity rows.
fn assemble_micro(
    grid: &MacroGrid,
    coefficient: &dyn Fn(usize) -> f64,
    dirichlet: &dyn Fn(usize) -> Option<f64>,
    load: &[f64],
) -> (MicroSystem, Vec<f64>) {
    let n = grid.node_count();
    let h = grid.spacing(0);
    let k_ref = fem::stiffness(2, h);
    let n_elems = grid.cells()[0] * grid.cells()[1];

    let mut supported = vec![false; n];
    for e in 0..n_elems {
        if coefficient(e) == 0.0 {
            continue;
        }
        for nd in element_nodes(grid, e) {
            supported[nd] = true;
        }
    }
    let dir: Vec<Option<f64>> = (0..n).map(dirichlet).collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut b = vec![0.0; n];
    for q in 0..n {
        if let Some(v) = dir[q] {
            rows[q].push((q, 1.0));
            b[q] = v;
        } else if !supported[q] {
            rows[q].push((q, 1.0));
            b[q] = 0.0;
        } else {
            b[q] = load[q];
        }
    }
    for e in 0..n_elems {
        let coef = coefficient(e);
        if coef == 0.0 {
            continue;
        }
        let nodes = element_nodes(grid, e);
        for (i, &ni) in nodes.iter().enumerate() {
            if dir[ni].is_some() || !supported[ni] {
                continue;
            }
            for (j, &nj) in nodes.iter().enumerate() {
                let v = coef * k_ref[i][j];
                if let Some(dval) = dir[nj] {
                    b[ni] -= v * dval;
                } else {
                    rows[ni].push((nj, v));
                }
            }
        }
    }
    let free: Vec<bool> = (0..n).map(|q| dir[q].is_none() && supported[q]).collect();
    let volume = lumped_volume(grid, |e| coefficient(e) != 0.0);
    (
        MicroSystem {
            matrix: CsrMatrix::from_rows(rows),
            free,
            volume,
        },
        b,
    )
}

fn system_residual(sys: &MicroSystem, b: &[f64], u: &[f64]) -> f64 {
    let n = u.len();
    let mut au = vec![0.0; n];
    sys.matrix.mul_vec(u, &mut au);
    let mut acc = 0.0;
    let mut count = 0usize;
    for q in 0..n {
        if !sys.free[q] {
            continue;
        }
        let v = sys.volume[q].max(1e-300);
        let r = (au[q] - b[q]) / v;
        acc += r * r;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        (acc / count as f64).sqrt()
    }
}

fn solve_system(
    sys: &MicroSystem,
    b: &[f64],
    x0: &[f64],
    controls: &PicardControls,
    context: &str,
) -> Result<Vec<f64>> {
    let max_iter = controls.max_lin_factor.max(1) * sys.matrix.nrows().max(1) + 100;
    pcg(&sys.matrix, b, Some(x0), controls.tol_lin, max_iter, false, context).map(|(x, _)| x)
}

struct MicroAssembler<'a> {
    prob: &'a MicroProblem,
}

impl<'a> MicroAssembler<'a> {
    /// Interface reaction load for one species: r * beta * kinetic factor
    /// integrated over the interface with the trapezoid rule.
    fn reaction_load(&self, beta: f64, c_p: &[f64], c_o: &[f64], phi: &[f64]) -> Vec<f64> {
        let prob = self.prob;
        let mut load = vec![0.0; prob.grid.node_count()];
        if beta == 0.0 {
            return load;
        }
        for f in &prob.faces {
            let cp = 0.5 * (c_p[f.node_a] + c_p[f.node_b]);
            let co = 0.5 * (c_o[f.node_a] + c_o[f.node_b]);
            let ph = 0.5 * (phi[f.node_a] + phi[f.node_b]);
            let rate = prob.r * beta * prob.kinetic_factor(cp, co, ph);
            let w = 0.5 * f.length * rate;
            load[f.node_a] += w;
            load[f.node_b] += w;
        }
        load
    }

    /// Surface-charge load of the Poisson equation: r * sigma over the
    /// interface.
    fn charge_load(&self) -> Vec<f64> {
        let prob = self.prob;
        let mut load = vec![0.0; prob.grid.node_count()];
        for f in &prob.faces {
            let w = 0.5 * f.length * prob.r * f.sigma;
            load[f.node_a] += w;
            load[f.node_b] += w;
        }
        load
    }

    /// Lumped pore-phase mass of a nodal field (zero off the pore), with
    /// an optional per-node scaling.
    fn pore_mass(&self, field: &[f64], scale: Option<&[f64]>) -> Vec<f64> {
        let prob = self.prob;
        let vol = lumped_volume(&prob.grid, |e| prob.is_pore_elem[e]);
        (0..prob.grid.node_count())
            .map(|q| {
                let s = scale.map(|s| s[q]).unwrap_or(1.0);
                vol[q] * field[q] * s
            })
            .collect()
    }

    fn oxygen_dirichlet(&self, q: usize) -> Option<f64> {
        let prob = self.prob;
        (prob.grid.is_on_face(q, 0, true) && prob.pore_node[q]).then_some(prob.bc.c_oxygen_right)
    }

    fn proton_dirichlet(&self, q: usize) -> Option<f64> {
        let prob = self.prob;
        (prob.grid.is_on_face(q, 0, false) && prob.pore_node[q]).then_some(prob.bc.c_proton_left)
    }

    fn potential_dirichlet(&self, q: usize) -> Option<f64> {
        let prob = self.prob;
        if prob.grid.is_on_face(q, 0, false) {
            Some(prob.bc.phi_left)
        } else if prob.grid.is_on_face(q, 0, true) {
            Some(prob.bc.phi_right)
        } else {
            None
        }
    }

    fn poisson_system(
        &self,
        c_p: &[f64],
        screening: Option<&[f64]>,
        phi_old: Option<&[f64]>,
    ) -> (MicroSystem, Vec<f64>) {
        let prob = self.prob;
        let mut load = self.pore_mass(c_p, None);
        for (l, c) in load.iter_mut().zip(self.charge_load()) {
            *l += c;
        }
        if let (Some(s), Some(p)) = (screening, phi_old) {
            let extra = self.pore_mass(p, Some(s));
            for (l, e) in load.iter_mut().zip(extra) {
                *l += e;
            }
        }
        let coef = |e: usize| prob.eps_elem[e];
        let dir = |q: usize| self.potential_dirichlet(q);
        let (mut sys, b) = assemble_micro(&prob.grid, &coef, &dir, &load);
        if let Some(s) = screening {
            // Linearized proton response: add the lumped pore mass of the
            // screening coefficient to the free diagonals.
            let vol = lumped_volume(&prob.grid, |e| prob.is_pore_elem[e]);
            for q in 0..prob.grid.node_count() {
                if sys.free[q] && s[q] != 0.0 && vol[q] != 0.0 {
                    sys.matrix.add_to_diagonal(q, vol[q] * s[q]);
                }
            }
        }
        (sys, b)
    }

    fn oxygen_system(&self, c_p: &[f64], c_o: &[f64], phi: &[f64]) -> (MicroSystem, Vec<f64>) {
        let prob = self.prob;
        let load = self.reaction_load(prob.beta_oxygen, c_p, c_o, phi);
        let coef = |e: usize| if prob.is_pore_elem[e] { 1.0 } else { 0.0 };
        let dir = |q: usize| self.oxygen_dirichlet(q);
        assemble_micro(&prob.grid, &coef, &dir, &load)
    }

    /// Slotboom proton system: coefficient exp(-Phi) per element, unknown
    /// u = C_+ exp(Phi).
    fn proton_system(
        &self,
        phi: &[f64],
        c_p_old: &[f64],
        c_o_old: &[f64],
    ) -> (MicroSystem, Vec<f64>) {
        let prob = self.prob;
        let load = self.reaction_load(prob.beta_proton, c_p_old, c_o_old, phi);
        let coef = |e: usize| {
            if !prob.is_pore_elem[e] {
                return 0.0;
            }
            let nodes = element_nodes(&prob.grid, e);
            let avg = nodes.iter().map(|nd| phi[*nd]).sum::<f64>() / 4.0;
            (-avg.clamp(-EXP_CLAMP, EXP_CLAMP)).exp()
        };
        let dir = |q: usize| {
            self.proton_dirichlet(q)
                .map(|c| c * phi[q].clamp(-EXP_CLAMP, EXP_CLAMP).exp())
        };
        assemble_micro(&prob.grid, &coef, &dir, &load)
    }

    fn slotboom_to_concentration(&self, u: &[f64], phi: &[f64]) -> Vec<f64> {
        let prob = self.prob;
        (0..prob.grid.node_count())
            .map(|q| {
                if prob.pore_node[q] {
                    u[q] * (-phi[q].clamp(-EXP_CLAMP, EXP_CLAMP)).exp()
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn concentration_to_slotboom(&self, c: &[f64], phi: &[f64]) -> Vec<f64> {
        let prob = self.prob;
        (0..prob.grid.node_count())
            .map(|q| c[q] * phi[q].clamp(-EXP_CLAMP, EXP_CLAMP).exp())
            .collect()
    }
}

/// Solves the resolved micro problem with the damped Gummel iteration.
pub fn solve_micro(prob: &MicroProblem, controls: &PicardControls) -> Result<MicroState> {
    let grid = &prob.grid;
    let n = grid.node_count();
    let asm = MicroAssembler { prob };

    // Initial fields mirror the macro initial guess, restricted to the pore.
    let mut c_o: Vec<f64> = (0..n)
        .map(|q| if prob.pore_node[q] { prob.bc.c_oxygen_right } else { 0.0 })
        .collect();
    let mut c_p: Vec<f64> = (0..n)
        .map(|q| if prob.pore_node[q] { prob.bc.c_proton_left } else { 0.0 })
        .collect();
    let len = grid.extent()[0];
    let mut phi: Vec<f64> = (0..n)
        .map(|q| {
            let x = grid.node_position(q)[0];
            prob.bc.phi_left + (prob.bc.phi_right - prob.bc.phi_left) * x / len
        })
        .collect();
    enforce_micro_dirichlet(prob, &asm, &mut c_o, &mut c_p, &mut phi);

    let scale = 1.0
        + prob.r * (prob.beta_oxygen + prob.beta_proton)
        + prob
            .faces
            .iter()
            .fold(0.0f64, |m, f| m.max((prob.r * f.sigma).abs()))
        + prob.bc.c_proton_left.max(prob.bc.c_oxygen_right);

    let residual = |f: &[Vec<f64>]| -> f64 {
        let (c_o, c_p, phi) = (&f[0], &f[1], &f[2]);
        let (sys_phi, b_phi) = asm.poisson_system(c_p, None, None);
        let r_phi = system_residual(&sys_phi, &b_phi, phi);
        let (sys_o, b_o) = asm.oxygen_system(c_p, c_o, phi);
        let r_o = system_residual(&sys_o, &b_o, c_o);
        let (sys_p, b_p) = asm.proton_system(phi, c_p, c_o);
        let u = asm.concentration_to_slotboom(c_p, phi);
        let r_p = system_residual(&sys_p, &b_p, &u);
        (r_o * r_o + r_p * r_p + r_phi * r_phi).sqrt() / scale
    };

    let sweep = |f: &[Vec<f64>], omega: f64| -> Result<Vec<Vec<f64>>> {
        let (c_o, c_p, phi) = (&f[0], &f[1], &f[2]);
        let phi_trial = {
            let screening: Vec<f64> = c_p.iter().map(|c| c.max(0.0)).collect();
            let (sys, b) = asm.poisson_system(c_p, Some(&screening), Some(phi));
            let solved = solve_system(&sys, &b, phi, controls, "micro potential")?;
            blend(phi, &solved, omega)
        };
        let c_p_trial = {
            let (sys, b) = asm.proton_system(&phi_trial, c_p, c_o);
            let u0 = asm.concentration_to_slotboom(c_p, &phi_trial);
            let u = solve_system(&sys, &b, &u0, controls, "micro protons")?;
            let c_new = asm.slotboom_to_concentration(&u, &phi_trial);
            blend(c_p, &c_new, omega)
        };
        let c_o_trial = {
            let (sys, b) = asm.oxygen_system(&c_p_trial, c_o, &phi_trial);
            let solved = solve_system(&sys, &b, c_o, controls, "micro oxygen")?;
            blend(c_o, &solved, omega)
        };
        Ok(vec![c_o_trial, c_p_trial, phi_trial])
    };

    let mut fields = vec![c_o, c_p, phi];
    let outcome = picard::run(controls, &mut fields, residual, sweep)?;

    let phi = fields.remove(2);
    let mut c_proton = fields.remove(1);
    let mut c_oxygen = fields.remove(0);
    // Extended by zero in the solid phase.
    for q in 0..n {
        if !prob.pore_node[q] {
            c_proton[q] = 0.0;
            c_oxygen[q] = 0.0;
        }
    }
    let max_overpotential = phi
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(v - prob.phi_eq));
    Ok(MicroState {
        c_oxygen,
        c_proton,
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

fn enforce_micro_dirichlet(
    prob: &MicroProblem,
    asm: &MicroAssembler,
    c_o: &mut [f64],
    c_p: &mut [f64],
    phi: &mut [f64],
) {
    for q in 0..prob.grid.node_count() {
        if let Some(v) = asm.oxygen_dirichlet(q) {
            c_o[q] = v;
        }
        if let Some(v) = asm.proton_dirichlet(q) {
            c_p[q] = v;
        }
        if let Some(v) = asm.potential_dirichlet(q) {
            phi[q] = v;
        }
    }
}

fn blend(old: &[f64], new: &[f64], omega: f64) -> Vec<f64> {
    old.iter()
        .zip(new.iter())
        .map(|(o, n)| (1.0 - omega) * o + omega * n)
        .collect()
}

/// L2 / H1 distances between a micro solution and a macro state, by
/// element-midpoint quadrature on the micro grid. Concentrations compare on
/// the pore phase only; the potential over the whole domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub c_oxygen_l2_pore: f64,
    pub c_proton_l2_pore: f64,
    pub phi_l2: f64,
    pub phi_h1: f64,
}

/// Requires the micro grid to refine the macro grid (same extent, cell
/// counts that are integer multiples).
pub fn micro_macro_error(
    micro: &MicroState,
    prob: &MicroProblem,
    macro_state: &MacroState,
    macro_grid: &MacroGrid,
) -> Result<ErrorNorms> {
    let fine = &prob.grid;
    if macro_grid.dim() != 2 {
        return Err(Error::GridMismatch("macro grid must be two-dimensional".into()));
    }
    for a in 0..2 {
        if (fine.extent()[a] - macro_grid.extent()[a]).abs() > 1e-12 {
            return Err(Error::GridMismatch("micro and macro extents differ".into()));
        }
        if fine.cells()[a] % macro_grid.cells()[a] != 0 {
            return Err(Error::GridMismatch(format!(
                "micro grid ({} cells) does not refine the macro grid ({} cells) along axis {a}",
                fine.cells()[a],
                macro_grid.cells()[a]
            )));
        }
    }

    let h = fine.spacing(0);
    let area = h * h;
    let mut e_co = 0.0;
    let mut e_cp = 0.0;
    let mut e_phi = 0.0;
    let mut e_phi_h1 = 0.0;
    let n_elems = fine.cells()[0] * fine.cells()[1];
    for e in 0..n_elems {
        let nodes = element_nodes(fine, e);
        let nx = fine.cells()[0];
        let i = e % nx;
        let j = e / nx;
        let center = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h];

        let avg = |f: &[f64]| nodes.iter().map(|nd| f[*nd]).sum::<f64>() / 4.0;
        let phi_diff = avg(&micro.phi) - bilinear(macro_grid, &macro_state.phi, &center);
        e_phi += area * phi_diff * phi_diff;

        let (gx_m, gy_m) = element_gradient(fine, &micro.phi, &nodes, h);
        let (gx_mac, gy_mac) = bilinear_gradient(macro_grid, &macro_state.phi, &center);
        e_phi_h1 += area * ((gx_m - gx_mac).powi(2) + (gy_m - gy_mac).powi(2));

        if prob.is_pore_elem[e] {
            let d_co = avg(&micro.c_oxygen) - bilinear(macro_grid, &macro_state.c_oxygen, &center);
            let d_cp = avg(&micro.c_proton) - bilinear(macro_grid, &macro_state.c_proton, &center);
            e_co += area * d_co * d_co;
            e_cp += area * d_cp * d_cp;
        }
    }
    Ok(ErrorNorms {
        c_oxygen_l2_pore: e_co.sqrt(),
        c_proton_l2_pore: e_cp.sqrt(),
        phi_l2: e_phi.sqrt(),
        phi_h1: e_phi_h1.sqrt(),
    })
}

fn element_gradient(grid: &MacroGrid, f: &[f64], nodes: &[usize; 4], h: f64) -> (f64, f64) {
    let _ = grid;
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (c, nd) in nodes.iter().enumerate() {
        gx += f[*nd] * fem::center_gradient(2, h, c, 0);
        gy += f[*nd] * fem::center_gradient(2, h, c, 1);
    }
    (gx, gy)
}

fn locate(grid: &MacroGrid, x: &[f64; 2]) -> ([usize; 2], [f64; 2]) {
    let mut cell = [0usize; 2];
    let mut local = [0.0; 2];
    for a in 0..2 {
        let h = grid.spacing(a);
        let mut i = (x[a] / h).floor() as isize;
        i = i.clamp(0, grid.cells()[a] as isize - 1);
        cell[a] = i as usize;
        local[a] = (x[a] - cell[a] as f64 * h) / h;
    }
    (cell, local)
}

fn bilinear(grid: &MacroGrid, f: &[f64], x: &[f64; 2]) -> f64 {
    let (cell, t) = locate(grid, x);
    let v = |di: usize, dj: usize| f[grid.node_index(&[cell[0] + di, cell[1] + dj])];
    let a = v(0, 0) * (1.0 - t[0]) + v(1, 0) * t[0];
    let b = v(0, 1) * (1.0 - t[0]) + v(1, 1) * t[0];
    a * (1.0 - t[1]) + b * t[1]
}

fn bilinear_gradient(grid: &MacroGrid, f: &[f64], x: &[f64; 2]) -> (f64, f64) {
    let (cell, t) = locate(grid, x);
    let hx = grid.spacing(0);
    let hy = grid.spacing(1);
    let v = |di: usize, dj: usize| f[grid.node_index(&[cell[0] + di, cell[1] + dj])];
    let gx = ((v(1, 0) - v(0, 0)) * (1.0 - t[1]) + (v(1, 1) - v(0, 1)) * t[1]) / hx;
    let gy = ((v(0, 1) - v(0, 0)) * (1.0 - t[0]) + (v(1, 1) - v(1, 0)) * t[0]) / hy;
    (gx, gy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::GeometrySpec;
    use crate::macroscale::{solve_macro, MacroProblem};
    use crate::tensors::EffectiveCoefficients;
    use approx::assert_relative_eq;

    fn all_pore_cell() -> UnitCell {
        UnitCell::from_spec(
            &GeometrySpec::Inclusion {
                dim: 2,
                n: 2,
                sides: vec![0.0, 0.0],
            },
            1.0,
            1.0,
        )
        .unwrap()
    }

    fn layered_cell(gamma: f64) -> UnitCell {
        UnitCell::from_spec(
            &GeometrySpec::Channel {
                dim: 2,
                n: 2,
                pore_fraction: 0.5,
                normal_axis: 1,
            },
            1.0,
            gamma,
        )
        .unwrap()
    }

    fn bc(c_o: f64, c_p: f64, phi_l: f64, phi_r: f64) -> BoundaryData {
        BoundaryData {
            c_oxygen_right: c_o,
            c_proton_left: c_p,
            phi_right: phi_r,
            phi_left: phi_l,
        }
    }

    #[test]
    fn construction_validations() {
        let cell = layered_cell(0.5);
        // Extent not a multiple of r.
        assert!(MicroProblem::new(
            cell.clone(), 0.3, vec![1.0, 1.0], 4, 0.0, 0.0, 0.5, 1.0, 1.0, 0.0,
            bc(1.0, 0.0, 0.0, 0.0), None,
        )
        .is_err());
        // Under-resolved tiling: 2 * 2 = 4 < 8 cells per period.
        assert!(MicroProblem::new(
            cell.clone(), 0.5, vec![1.0, 1.0], 2, 0.0, 0.0, 0.5, 1.0, 1.0, 0.0,
            bc(1.0, 0.0, 0.0, 0.0), None,
        )
        .is_err());
        // gamma = 0 is rejected for the micro Poisson equation.
        let insulating = layered_cell(0.0);
        assert!(MicroProblem::new(
            insulating, 0.5, vec![1.0, 1.0], 4, 0.0, 0.0, 0.5, 1.0, 1.0, 0.0,
            bc(1.0, 0.0, 0.0, 0.0), None,
        )
        .is_err());
        // Valid.
        assert!(MicroProblem::new(
            cell, 0.5, vec![1.0, 1.0], 4, 0.0, 0.0, 0.5, 1.0, 1.0, 0.0,
            bc(1.0, 0.0, 0.0, 0.0), None,
        )
        .is_ok());
    }

    #[test]
    fn all_pore_micro_matches_macro_exactly() {
        // No heterogeneity: for C_+^D = 0 the three fields are constant,
        // zero and linear-to-quadratic, all exactly representable by both
        // discretizations, so micro and macro agree to solver tolerance at
        // any r.
        let cell = all_pore_cell();
        let controls = PicardControls::default();
        for r in [1.0, 0.5] {
            let prob = MicroProblem::new(
                cell.clone(), r, vec![1.0, 1.0], 5, 0.7, 0.7, 0.5, 1.0, 1.0, 0.1,
                bc(0.8, 0.0, 0.3, -0.2), None,
            )
            .unwrap();
            let micro = solve_micro(&prob, &controls).unwrap();
            assert!(micro.diagnostics.converged);

            let macro_grid = prob.grid.clone();
            let n = macro_grid.node_count();
            let macro_prob = MacroProblem::new(
                macro_grid.clone(),
                EffectiveCoefficients::homogeneous(2, 1.0),
                0.5, 1.0, 1.0, 0.1,
                bc(0.8, 0.0, 0.3, -0.2),
                vec![0.0; n],
            )
            .unwrap();
            let mac = solve_macro(&macro_prob, &controls).unwrap();
            assert!(mac.diagnostics.converged);

            let err = micro_macro_error(&micro, &prob, &mac, &macro_grid).unwrap();
            assert!(err.c_oxygen_l2_pore <= 1e-8, "C_O err {:.3e}", err.c_oxygen_l2_pore);
            assert!(err.c_proton_l2_pore <= 1e-8, "C_+ err {:.3e}", err.c_proton_l2_pore);
            assert!(err.phi_l2 <= 1e-8, "Phi err {:.3e}", err.phi_l2);
        }
    }

    #[test]
    fn layered_oxygen_is_constant_without_reaction() {
        // beta = 0, sigma = 0: the oxygen problem has no source, no-flux
        // left and Dirichlet right, so it is constant inside each channel.
        let cell = layered_cell(0.5);
        let prob = MicroProblem::new(
            cell, 0.25, vec![1.0, 1.0], 5, 0.0, 0.0, 0.5, 1.0, 1.0, 0.0,
            bc(0.9, 0.4, 0.2, -0.1), None,
        )
        .unwrap();
        let state = solve_micro(&prob, &PicardControls::default()).unwrap();
        assert!(state.diagnostics.converged);
        for q in 0..prob.grid.node_count() {
            if prob.is_pore_node(q) {
                assert_relative_eq!(state.c_oxygen[q], 0.9, epsilon = 1e-8);
            } else {
                assert_eq!(state.c_oxygen[q], 0.0);
            }
        }
        // Protons follow a Boltzmann profile in the potential: nontrivial
        // but non-negative.
        assert!(state.c_proton.iter().all(|c| *c >= -1e-12));
    }

    #[test]
    fn error_norms_examples() {
        let cell = layered_cell(0.5);
        let prob = MicroProblem::new(
            cell, 0.5, vec![1.0, 1.0], 4, 0.0, 0.0, 0.5, 1.0, 1.0, 0.0,
            bc(1.0, 0.0, 0.0, 0.0), None,
        )
        .unwrap();
        let n = prob.grid.node_count();
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
        let micro = MicroState {
            c_oxygen: vec![1.0; n],
            c_proton: vec![0.5; n],
            phi: vec![0.2; n],
            diagnostics: diag.clone(),
        };
        let macro_grid = MacroGrid::new(vec![1.0, 1.0], vec![4, 4]).unwrap();
        let nm = macro_grid.node_count();
        let same = MacroState {
            c_oxygen: vec![1.0; nm],
            c_proton: vec![0.5; nm],
            phi: vec![0.2; nm],
            diagnostics: diag.clone(),
        };
        let e = micro_macro_error(&micro, &prob, &same, &macro_grid).unwrap();
        assert!(e.c_oxygen_l2_pore < 1e-14);
        assert!(e.c_proton_l2_pore < 1e-14);
        assert!(e.phi_l2 < 1e-14);
        assert!(e.phi_h1 < 1e-12);

        // Constant perturbation delta on C_O: error = delta sqrt(p |Omega|).
        let delta = 0.3;
        let shifted = MacroState {
            c_oxygen: vec![1.0 - delta; nm],
            c_proton: vec![0.5; nm],
            phi: vec![0.2; nm],
            diagnostics: diag,
        };
        let e = micro_macro_error(&micro, &prob, &shifted, &macro_grid).unwrap();
        assert_relative_eq!(
            e.c_oxygen_l2_pore,
            delta * (0.5f64).sqrt(),
            max_relative = 1e-12
        );

        // Incompatible grids rejected.
        let bad_grid = MacroGrid::new(vec![1.0, 1.0], vec![3, 3]).unwrap();
        let bad = MacroState {
            c_oxygen: vec![1.0; bad_grid.node_count()],
            c_proton: vec![0.5; bad_grid.node_count()],
            phi: vec![0.2; bad_grid.node_count()],
            diagnostics: micro.diagnostics.clone(),
        };
        assert!(micro_macro_error(&micro, &prob, &bad, &bad_grid).is_err());
    }

    #[test]
    fn surface_charge_drives_micro_potential_toward_macro_limit() {
        // Constant sigma on the layered geometry: as r shrinks the micro
        // potential approaches the homogenized solution with
        // rho_s = sigma * Lambda. Checks the r-scaling of the interface
        // charge term.
        let controls = PicardControls::default();
        let sigma = -0.05;
        let mut errors = Vec::new();
        for r in [0.5, 0.25] {
            let cell = layered_cell(0.5);
            let prob = MicroProblem::new(
                cell.clone(), r, vec![1.0, 1.0], 5, 0.0, 0.0, 0.5, 1.0, 1.0, 0.0,
                bc(1.0, 0.2, 0.1, -0.1), Some(&|_x: &[f64]| sigma),
            )
            .unwrap();
            let micro = solve_micro(&prob, &controls).unwrap();
            assert!(micro.diagnostics.converged);

            let set = crate::correctors::CorrectorSet::solve(&cell).unwrap();
            let coeffs = crate::tensors::assemble_tensors(&cell, &set, 0.0, 0.0).unwrap();
            let macro_grid = prob.grid.clone();
            let n = macro_grid.node_count();
            let rho = sigma * cell.interface_measure();
            let macro_prob = MacroProblem::new(
                macro_grid.clone(), coeffs, 0.5, 1.0, 1.0, 0.0,
                bc(1.0, 0.2, 0.1, -0.1),
                vec![rho; n],
            )
            .unwrap();
            let mac = solve_macro(&macro_prob, &controls).unwrap();
            let e = micro_macro_error(&micro, &prob, &mac, &macro_grid).unwrap();
            errors.push(e.phi_l2);
        }
        assert!(
            errors[1] < errors[0],
            "phi errors did not decrease: {errors:?}"
        );
    }
}
