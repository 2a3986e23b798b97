//! Pipeline stages and artifact writers.
//!
//! Each stage reads the validated configuration, computes (or loads) what
//! it needs and writes deterministic artifacts into the output directory:
//!
//! * `cell`             -> correctors.vtk
//! * `tensors`          -> tensors.json
//! * `macro`            -> macro.csv, macro.vtk, macro_iterations.log
//! * `tdl`              -> tdl.csv, tdl.vtk, tdl_iterations.log
//! * `channel-validate` -> channel_report.json
//! * `micro-study`      -> convergence.csv

use crate::config::{FieldFormat, GeometryKind, RunConfig, SigmaConfig};
use crate::error::{CliError, CliResult};
use homogcl_core::{
    assemble_tensors, homogenize_surface_charge, micro_macro_error, solve_macro, solve_micro,
    straight_channel_tensors, thin_double_layer_solve, vtk::StructuredPoints, BoundaryData,
    CorrectorSet, EffectiveCoefficients, MacroGrid, MacroProblem, MacroState, MicroProblem,
    SquareMatrix, TdlProblem, UnitCell,
};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Cell,
    Tensors,
    Macro,
    Tdl,
    ChannelValidate,
    MicroStudy,
}

pub struct Pipeline<'a> {
    pub cfg: &'a RunConfig,
    pub config_dir: PathBuf,
    pub out_dir: PathBuf,
    /// With auto-compute disabled, downstream stages require upstream
    /// artifacts on disk instead of recomputing them.
    pub auto_compute: bool,
}

impl<'a> Pipeline<'a> {
    pub fn run(&self, stage: Stage) -> CliResult<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        match stage {
            Stage::Cell => self.run_cell(),
            Stage::Tensors => self.run_tensors().map(|_| ()),
            Stage::Macro => self.run_macro(),
            Stage::Tdl => self.run_tdl(),
            Stage::ChannelValidate => self.run_channel_validate(),
            Stage::MicroStudy => self.run_micro_study(),
        }
    }

    fn build_cell(&self) -> CliResult<UnitCell> {
        self.cfg.build_cell(&self.config_dir)
    }

    fn run_cell(&self) -> CliResult<()> {
        let cell = self.build_cell()?;
        let set = CorrectorSet::solve(&cell)?;
        println!(
            "cell: dim {} resolution {} porosity {} interface measure {}",
            cell.dim(),
            cell.resolution(),
            cell.porosity(),
            cell.interface_measure()
        );
        let path = self.out_dir.join("correctors.vtk");
        write_correctors_vtk(&path, &cell, &set)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn compute_tensors(&self) -> CliResult<(UnitCell, EffectiveCoefficients)> {
        let cell = self.build_cell()?;
        let d = self.cfg.dimensionless_for(cell.interface_measure())?;
        let set = CorrectorSet::solve(&cell)?;
        let mut coeffs = assemble_tensors(&cell, &set, 0.0, 0.0)?;
        coeffs.reaction_oxygen = d.beta_oxygen_bar;
        coeffs.reaction_proton = d.beta_proton_bar;
        Ok((cell, coeffs))
    }

    fn run_tensors(&self) -> CliResult<EffectiveCoefficients> {
        let (_, coeffs) = self.compute_tensors()?;
        let path = self.out_dir.join("tensors.json");
        write_json(&path, &coeffs)?;
        println!("wrote {}", path.display());
        Ok(coeffs)
    }

    fn load_or_compute_tensors(&self) -> CliResult<EffectiveCoefficients> {
        if self.auto_compute {
            return self.compute_tensors().map(|(_, c)| c);
        }
        let path = self.out_dir.join("tensors.json");
        if !path.exists() {
            return Err(CliError::Config(format!(
                "stage dependency missing: `{}` not found and auto-compute is disabled",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!(
            "cannot parse `{}`: {e}",
            path.display()
        )))
    }

    fn macro_grid(&self) -> CliResult<MacroGrid> {
        let m = &self.cfg.macro_domain;
        MacroGrid::new(m.extent.clone(), m.cells.clone()).map_err(|e| CliError::Config(e.to_string()))
    }

    fn boundary_data(&self) -> BoundaryData {
        let m = &self.cfg.macro_domain;
        BoundaryData {
            c_oxygen_right: m.c_oxygen_right,
            c_proton_left: m.c_proton_left,
            phi_right: m.phi_right,
            phi_left: m.phi_left,
        }
    }

    /// Background charge on the macro grid. With auto-compute the surface
    /// integral runs over the cell's interface; otherwise the x-only charge
    /// density factorizes into sigma(x) times the interface measure.
    fn background_charge(
        &self,
        grid: &MacroGrid,
        interface_measure: f64,
        cell: Option<&UnitCell>,
    ) -> Vec<f64> {
        let sigma = self.cfg.sigma_s.clone().unwrap_or_default();
        if sigma.is_zero() {
            return vec![0.0; grid.node_count()];
        }
        if interface_measure == 0.0 {
            eprintln!(
                "warning: sigma_s is nonzero but the cell has no pore/solid interface; \
                 background charge is identically zero"
            );
            return vec![0.0; grid.node_count()];
        }
        match cell {
            Some(c) => {
                let f = |x: &[f64], _y: &[f64]| sigma.evaluate(x);
                homogenize_surface_charge(&f, c, grid)
            }
            None => (0..grid.node_count())
                .map(|q| {
                    let x = grid.node_position(q);
                    sigma.evaluate(&x[..grid.dim()]) * interface_measure
                })
                .collect(),
        }
    }

    fn macro_problem(&self) -> CliResult<(MacroProblem, Option<UnitCell>)> {
        let grid = self.macro_grid()?;
        let (coeffs, cell) = if self.auto_compute {
            let (cell, coeffs) = self.compute_tensors()?;
            (coeffs, Some(cell))
        } else {
            (self.load_or_compute_tensors()?, None)
        };
        if coeffs.dim() != grid.dim() {
            return Err(CliError::Config(format!(
                "cell is {}-dimensional but the macro domain has {} axes",
                coeffs.dim(),
                grid.dim()
            )));
        }
        let rho_s = self.background_charge(&grid, coeffs.interface_measure, cell.as_ref());
        let m = &self.cfg.macro_domain;
        let prob = MacroProblem::new(
            grid,
            coeffs,
            m.alpha_c,
            m.n_proton,
            m.n_oxygen,
            m.phi_eq,
            self.boundary_data(),
            rho_s,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        Ok((prob, cell))
    }

    fn run_macro(&self) -> CliResult<()> {
        let (prob, _) = self.macro_problem()?;
        let controls = self.cfg.solver.controls();
        let state = solve_macro(&prob, &controls)?;
        self.write_state_artifacts("macro", &prob.grid, &state)?;
        let energy =
            homogcl_core::free_energy(&state, &prob.grid, prob.coeffs.permittivity.max_abs(), false);
        let equilibrium = homogcl_core::check_local_equilibrium(&state, &prob.grid, 4);
        let log = self.out_dir.join("macro_iterations.log");
        write_iteration_log(&log, &state, &[
            format!("free_energy {energy}"),
            format!("local_equilibrium_max_spread {}", equilibrium.max_spread),
            format!("local_equilibrium_skipped_nodes {}", equilibrium.skipped_nodes),
        ])?;
        println!("wrote {}", log.display());
        if !state.diagnostics.converged {
            return Err(CliError::Divergence(format!(
                "macro solve did not converge: residual {:.3e} after {} outer iterations",
                state.diagnostics.residual_history.last().copied().unwrap_or(f64::NAN),
                state.diagnostics.outer_iterations
            )));
        }
        Ok(())
    }

    fn run_tdl(&self) -> CliResult<()> {
        let grid = self.macro_grid()?;
        let (coeffs, cell) = if self.auto_compute {
            let (cell, coeffs) = self.compute_tensors()?;
            (coeffs, Some(cell))
        } else {
            (self.load_or_compute_tensors()?, None)
        };
        let rho_s = self.background_charge(&grid, coeffs.interface_measure, cell.as_ref());
        let m = &self.cfg.macro_domain;
        let prob = TdlProblem::new(
            grid,
            coeffs,
            m.alpha_c,
            m.n_proton,
            m.n_oxygen,
            m.phi_eq,
            self.boundary_data(),
            rho_s,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let controls = self.cfg.solver.controls();
        let state = thin_double_layer_solve(&prob, &controls)?;
        self.write_state_artifacts("tdl", &prob.grid, &state)?;
        let log = self.out_dir.join("tdl_iterations.log");
        write_iteration_log(&log, &state, &[])?;
        println!("wrote {}", log.display());
        if !state.diagnostics.converged {
            return Err(CliError::Divergence(format!(
                "thin-double-layer solve did not converge after {} outer iterations",
                state.diagnostics.outer_iterations
            )));
        }
        Ok(())
    }

    fn run_channel_validate(&self) -> CliResult<()> {
        if self.cfg.geometry.kind != GeometryKind::Channel {
            return Err(CliError::Config(
                "channel-validate needs `kind = \"channel\"` geometry".into(),
            ));
        }
        let (cell, computed) = self.compute_tensors()?;
        let closed = straight_channel_tensors(cell.porosity(), cell.lambda_sq, cell.dim())
            .map_err(|e| CliError::Config(e.to_string()))?;

        let dev = |a: &SquareMatrix, b: &SquareMatrix| -> f64 {
            let mut m = 0.0f64;
            for i in 0..a.dim() {
                for k in 0..a.dim() {
                    m = m.max((a.get(i, k) - b.get(i, k)).abs());
                }
            }
            m
        };
        let deviations = ChannelDeviations {
            diffusion_oxygen: dev(&computed.diffusion_oxygen, &closed.diffusion_oxygen),
            diffusion_proton: dev(&computed.diffusion_proton, &closed.diffusion_proton),
            mobility_proton: dev(&computed.mobility_proton, &closed.mobility_proton),
            permittivity: dev(&computed.permittivity, &closed.permittivity),
        };
        let max_deviation = deviations
            .diffusion_oxygen
            .max(deviations.diffusion_proton)
            .max(deviations.mobility_proton)
            .max(deviations.permittivity);
        let report = ChannelReport {
            porosity: cell.porosity(),
            lambda_sq: cell.lambda_sq,
            gamma: cell.gamma,
            cell_resolution: cell.resolution(),
            computed,
            closed_form: closed,
            per_tensor_deviation: deviations,
            max_deviation,
        };
        let path = self.out_dir.join("channel_report.json");
        write_json(&path, &report)?;
        println!(
            "wrote {} (max entry deviation {:.3e})",
            path.display(),
            max_deviation
        );
        Ok(())
    }

    fn run_micro_study(&self) -> CliResult<()> {
        let cell = self.build_cell()?;
        if cell.dim() != 2 {
            return Err(CliError::Config("micro-study is two-dimensional".into()));
        }
        let d = self.cfg.dimensionless_for(cell.interface_measure())?;
        let m = &self.cfg.macro_domain;
        if m.extent.len() != 2 {
            return Err(CliError::Config("micro-study needs a 2D macro domain".into()));
        }
        // The micro solver takes unscaled reaction parameters; the
        // configured couplings are interface-scaled.
        let lambda_measure = cell.interface_measure();
        let (beta_o, beta_p) = if lambda_measure > 0.0 {
            (
                d.beta_oxygen_bar / lambda_measure,
                d.beta_proton_bar / lambda_measure,
            )
        } else {
            (0.0, 0.0)
        };
        let sigma = self.cfg.sigma_s.clone().unwrap_or_default();
        let controls = self.cfg.solver.controls();

        let set = CorrectorSet::solve(&cell)?;
        let mut coeffs = assemble_tensors(&cell, &set, 0.0, 0.0)?;
        coeffs.reaction_oxygen = d.beta_oxygen_bar;
        coeffs.reaction_proton = d.beta_proton_bar;

        let mut r_values = self.cfg.micro.r_values.clone();
        r_values.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let rows: CliResult<Vec<ConvergenceRow>> = r_values
            .par_iter()
            .map(|&r| -> CliResult<ConvergenceRow> {
                let sigma_fn = |x: &[f64]| sigma.evaluate(x);
                let prob = MicroProblem::new(
                    cell.clone(),
                    r,
                    m.extent.clone(),
                    self.cfg.micro.subdivision,
                    beta_o,
                    beta_p,
                    m.alpha_c,
                    m.n_proton,
                    m.n_oxygen,
                    m.phi_eq,
                    self.boundary_data(),
                    Some(&sigma_fn),
                )
                .map_err(|e| CliError::Config(e.to_string()))?;
                let micro = solve_micro(&prob, &controls)?;
                if !micro.diagnostics.converged {
                    return Err(CliError::Divergence(format!(
                        "micro solve at r = {r} did not converge"
                    )));
                }
                // Homogenized reference on the same grid.
                let macro_grid = prob.grid.clone();
                let rho_s = self.background_charge(&macro_grid, lambda_measure, Some(&cell));
                let macro_prob = MacroProblem::new(
                    macro_grid.clone(),
                    coeffs.clone(),
                    m.alpha_c,
                    m.n_proton,
                    m.n_oxygen,
                    m.phi_eq,
                    self.boundary_data(),
                    rho_s,
                )
                .map_err(|e| CliError::Config(e.to_string()))?;
                let mac = solve_macro(&macro_prob, &controls)?;
                if !mac.diagnostics.converged {
                    return Err(CliError::Divergence(format!(
                        "homogenized reference at r = {r} did not converge"
                    )));
                }
                let err = micro_macro_error(&micro, &prob, &mac, &macro_grid)?;
                Ok(ConvergenceRow {
                    r,
                    error_c_oxygen: err.c_oxygen_l2_pore,
                    error_c_proton: err.c_proton_l2_pore,
                    error_phi_l2: err.phi_l2,
                    error_phi_h1: err.phi_h1,
                })
            })
            .collect();
        let rows = rows?;

        let mut csv = String::from("r,error_CO,error_Cplus,error_Phi_L2,error_Phi_H1\n");
        for row in &rows {
            for v in [
                row.r,
                row.error_c_oxygen,
                row.error_c_proton,
                row.error_phi_l2,
                row.error_phi_h1,
            ] {
                if !v.is_finite() {
                    return Err(CliError::Io(format!("non-finite value {v} in convergence table")));
                }
            }
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                row.r, row.error_c_oxygen, row.error_c_proton, row.error_phi_l2, row.error_phi_h1
            );
        }
        let path = self.out_dir.join("convergence.csv");
        std::fs::write(&path, csv)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write_state_artifacts(
        &self,
        prefix: &str,
        grid: &MacroGrid,
        state: &MacroState,
    ) -> CliResult<()> {
        for format in &self.cfg.output.formats {
            match format {
                FieldFormat::Csv => {
                    let path = self.out_dir.join(format!("{prefix}.csv"));
                    write_state_csv(&path, grid, state)?;
                    println!("wrote {}", path.display());
                }
                FieldFormat::Vtk => {
                    let path = self.out_dir.join(format!("{prefix}.vtk"));
                    write_state_vtk(&path, grid, state)?;
                    println!("wrote {}", path.display());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct ChannelDeviations {
    diffusion_oxygen: f64,
    diffusion_proton: f64,
    mobility_proton: f64,
    permittivity: f64,
}

#[derive(Debug, Serialize)]
struct ChannelReport {
    porosity: f64,
    lambda_sq: f64,
    gamma: f64,
    cell_resolution: usize,
    computed: EffectiveCoefficients,
    closed_form: EffectiveCoefficients,
    per_tensor_deviation: ChannelDeviations,
    max_deviation: f64,
}

struct ConvergenceRow {
    r: f64,
    error_c_oxygen: f64,
    error_c_proton: f64,
    error_phi_l2: f64,
    error_phi_h1: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    if text.contains("null") || text.contains("NaN") || text.contains("inf") {
        return Err(CliError::Io(format!(
            "refusing to write non-finite values to {}",
            path.display()
        )));
    }
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_state_csv(path: &Path, grid: &MacroGrid, state: &MacroState) -> CliResult<()> {
    let dim = grid.dim();
    let mut out = String::new();
    let coords = ["x", "y", "z"];
    let _ = writeln!(out, "{},C_O,C_plus,Phi", coords[..dim].join(","));
    for q in 0..grid.node_count() {
        let x = grid.node_position(q);
        for v in [state.c_oxygen[q], state.c_proton[q], state.phi[q]] {
            if !v.is_finite() {
                return Err(CliError::Io(format!(
                    "non-finite field value {v} at node {q}"
                )));
            }
        }
        let pos: Vec<String> = (0..dim).map(|a| x[a].to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            pos.join(","),
            state.c_oxygen[q],
            state.c_proton[q],
            state.phi[q]
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_state_vtk(path: &Path, grid: &MacroGrid, state: &MacroState) -> CliResult<()> {
    let dim = grid.dim();
    let mut dims = [1usize; 3];
    let mut spacing = [0.0f64; 3];
    for a in 0..dim {
        dims[a] = grid.nodes_per_axis(a);
        spacing[a] = grid.spacing(a);
    }
    let mut ds = StructuredPoints::new("homogcl macro fields", dims, [0.0; 3], spacing);
    ds.add_point_field("C_O", state.c_oxygen.clone())
        .and_then(|ds| ds.add_point_field("C_plus", state.c_proton.clone()))
        .and_then(|ds| ds.add_point_field("Phi", state.phi.clone()))
        .map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, ds.render())?;
    Ok(())
}

fn write_iteration_log(path: &Path, state: &MacroState, extra: &[String]) -> CliResult<()> {
    let d = &state.diagnostics;
    let mut out = String::new();
    let _ = writeln!(out, "converged {}", d.converged);
    let _ = writeln!(out, "outer_iterations {}", d.outer_iterations);
    let _ = writeln!(out, "final_damping {}", d.final_damping);
    let _ = writeln!(out, "stalled {}", d.stalled);
    let _ = writeln!(out, "clamp_events {}", d.clamp_events);
    let _ = writeln!(out, "min_reaction {}", d.min_reaction);
    let _ = writeln!(out, "max_overpotential {}", d.max_overpotential);
    for line in extra {
        let _ = writeln!(out, "{line}");
    }
    for (i, r) in d.residual_history.iter().enumerate() {
        let _ = writeln!(out, "residual {i} {r}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the corrector fields (wrapped periodically to the closing nodes)
/// and the phase indicator.
fn write_correctors_vtk(path: &Path, cell: &UnitCell, set: &CorrectorSet) -> CliResult<()> {
    let dim = cell.dim();
    let n = cell.resolution();
    let mut dims = [1usize; 3];
    let mut spacing = [0.0f64; 3];
    for a in 0..dim {
        dims[a] = n + 1;
        spacing[a] = cell.spacing();
    }
    let mut ds = StructuredPoints::new("homogcl cell correctors", dims, [0.0; 3], spacing);

    let wrap_nodal = |values: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(dims.iter().product());
        let nz = if dim == 3 { n + 1 } else { 1 };
        for k in 0..nz {
            for j in 0..(n + 1) {
                for i in 0..(n + 1) {
                    let idx = [i % n, j % n, k % n];
                    out.push(values[cell.voxel_index(&idx[..dim])]);
                }
            }
        }
        out
    };
    let axes = ["x", "y", "z"];
    for (name, fields) in [
        ("N_O", &set.oxygen),
        ("N_plus", &set.proton),
        ("N_phi", &set.potential),
    ] {
        for f in fields.iter() {
            ds.add_point_field(&format!("{name}_{}", axes[f.axis]), wrap_nodal(&f.values))
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    let phase: Vec<f64> = (0..cell.voxel_count())
        .map(|v| if cell.is_pore(v) { 0.0 } else { 1.0 })
        .collect();
    ds.add_cell_field("phase", phase)
        .map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, ds.render())?;
    Ok(())
}
