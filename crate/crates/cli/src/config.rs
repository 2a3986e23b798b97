//! Run configuration: TOML ingestion, defaults and validation.
//!
//! Unknown keys are rejected with the offending key named; parse errors
//! carry line/column context. Exactly one of the `[physical]` and
//! `[dimensionless]` parameter blocks may be present; with neither, the
//! dimensionless defaults below apply. `parse` composed with `serialize`
//! is the identity on resolved configurations.

use crate::error::{CliError, CliResult};
use homogcl_core::{GeometrySpec, Nondimensionalization, UnitCell};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Channel,
    Inclusion,
    Bitmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub kind: GeometryKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_cell_resolution")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pore_fraction: Option<f64>,
    #[serde(default = "default_normal_axis")]
    pub normal_axis: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sides: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

fn default_dim() -> usize {
    2
}
fn default_cell_resolution() -> usize {
    32
}
fn default_normal_axis() -> usize {
    1
}

/// Direct dimensionless parameters. The reaction couplings are the final
/// (interface-scaled) values entering the upscaled equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionlessConfig {
    #[serde(default = "one")]
    pub lambda_sq: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub beta_oxygen_bar: f64,
    #[serde(default)]
    pub beta_proton_bar: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for DimensionlessConfig {
    fn default() -> Self {
        Self {
            lambda_sq: 1.0,
            gamma: 1.0,
            beta_oxygen_bar: 0.0,
            beta_proton_bar: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    #[serde(default = "default_extent")]
    pub extent: Vec<f64>,
    #[serde(default = "default_cells")]
    pub cells: Vec<usize>,
    #[serde(default = "one")]
    pub c_oxygen_right: f64,
    #[serde(default)]
    pub c_proton_left: f64,
    #[serde(default)]
    pub phi_right: f64,
    #[serde(default)]
    pub phi_left: f64,
    #[serde(default)]
    pub phi_eq: f64,
    #[serde(default = "default_alpha_c")]
    pub alpha_c: f64,
    #[serde(default = "one")]
    pub n_proton: f64,
    #[serde(default = "one")]
    pub n_oxygen: f64,
}

fn default_extent() -> Vec<f64> {
    vec![1.0, 1.0]
}
fn default_cells() -> Vec<usize> {
    vec![32, 32]
}
fn default_alpha_c() -> f64 {
    0.5
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            extent: default_extent(),
            cells: default_cells(),
            c_oxygen_right: 1.0,
            c_proton_left: 0.0,
            phi_right: 0.0,
            phi_left: 0.0,
            phi_eq: 0.0,
            alpha_c: default_alpha_c(),
            n_proton: 1.0,
            n_oxygen: 1.0,
        }
    }
}

/// Surface charge density as a constant plus a polynomial in the macro
/// coordinates: sum of coef * prod_a x_a^powers[a].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaConfig {
    #[serde(default)]
    pub constant: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<SigmaTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaTerm {
    pub coef: f64,
    pub powers: Vec<u32>,
}

impl SigmaConfig {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for t in &self.terms {
            let mut term = t.coef;
            for (a, p) in t.powers.iter().enumerate() {
                if a < x.len() {
                    term *= x[a].powi(*p as i32);
                }
            }
            v += term;
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.iter().all(|t| t.coef == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol_lin")]
    pub tol_lin: f64,
    #[serde(default = "default_tol_nl")]
    pub tol_nl: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "one")]
    pub damping: f64,
}

fn default_tol_lin() -> f64 {
    1e-10
}
fn default_tol_nl() -> f64 {
    1e-8
}
fn default_max_outer() -> usize {
    200
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_lin: default_tol_lin(),
            tol_nl: default_tol_nl(),
            max_outer: default_max_outer(),
            damping: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn controls(&self) -> homogcl_core::PicardControls {
        homogcl_core::PicardControls {
            tol_nl: self.tol_nl,
            max_outer: self.max_outer,
            damping: self.damping,
            tol_lin: self.tol_lin,
            max_lin_factor: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroStudyConfig {
    #[serde(default = "default_r_values")]
    pub r_values: Vec<f64>,
    /// Micro grid cells per period = subdivision * cell resolution.
    #[serde(default = "default_subdivision")]
    pub subdivision: usize,
}

fn default_r_values() -> Vec<f64> {
    vec![0.25, 0.125, 0.0625]
}
fn default_subdivision() -> usize {
    1
}

impl Default for MicroStudyConfig {
    fn default() -> Self {
        Self {
            r_values: default_r_values(),
            subdivision: default_subdivision(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldFormat {
    Csv,
    Vtk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<FieldFormat>,
}

fn default_out_dir() -> String {
    "out".to_string()
}
fn default_formats() -> Vec<FieldFormat> {
    vec![FieldFormat::Csv, FieldFormat::Vtk]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            formats: default_formats(),
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimensionless: Option<DimensionlessConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physical: Option<Nondimensionalization>,
    #[serde(rename = "macro", default)]
    pub macro_domain: MacroConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_s: Option<SigmaConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub micro: MicroStudyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses and validates a TOML string; `base_dir` anchors relative
    /// file references.
    pub fn from_toml(text: &str, base_dir: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve_and_validate(base_dir)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))
    }

    fn resolve_and_validate(&mut self, base_dir: &Path) -> CliResult<()> {
        if self.dimensionless.is_some() && self.physical.is_some() {
            return Err(CliError::Config(
                "both [dimensionless] and [physical] parameter blocks are present; \
                 exactly one may be given"
                    .into(),
            ));
        }
        if self.dimensionless.is_none() && self.physical.is_none() {
            self.dimensionless = Some(DimensionlessConfig::default());
        }

        let g = &self.geometry;
        match g.kind {
            GeometryKind::Channel => {
                if g.pore_fraction.is_none() {
                    return Err(CliError::Config(
                        "geometry kind `channel` needs `pore_fraction`".into(),
                    ));
                }
            }
            GeometryKind::Inclusion => {
                if g.sides.is_none() {
                    return Err(CliError::Config("geometry kind `inclusion` needs `sides`".into()));
                }
            }
            GeometryKind::Bitmap => {
                let Some(p) = &g.path else {
                    return Err(CliError::Config("geometry kind `bitmap` needs `path`".into()));
                };
                let full = resolve_path(base_dir, p);
                if !full.exists() {
                    return Err(CliError::Config(format!(
                        "bitmap file `{}` does not exist",
                        full.display()
                    )));
                }
            }
        }

        let m = &self.macro_domain;
        if m.extent.len() != m.cells.len() {
            return Err(CliError::Config(format!(
                "[macro] extent has {} entries but cells has {}",
                m.extent.len(),
                m.cells.len()
            )));
        }
        if m.extent.is_empty() || m.extent.len() > 3 {
            return Err(CliError::Config(
                "[macro] extent must list 1 to 3 axis lengths".into(),
            ));
        }
        if let Some(s) = &self.sigma_s {
            for (i, t) in s.terms.iter().enumerate() {
                if t.powers.len() != m.extent.len() {
                    return Err(CliError::Config(format!(
                        "[sigma_s] term {i} lists {} powers, macro domain has {} axes",
                        t.powers.len(),
                        m.extent.len()
                    )));
                }
            }
        }
        if self.micro.r_values.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(CliError::Config(
                "[micro] r_values must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Resolved dimensionless parameter set. With a `[physical]` block the
    /// values are derived from the raw constants and the cell's interface
    /// measure; otherwise the direct values are used.
    pub fn dimensionless_for(&self, interface_measure: f64) -> CliResult<DimensionlessConfig> {
        if let Some(d) = &self.dimensionless {
            return Ok(d.clone());
        }
        let nd = self.physical.as_ref().expect("one block present after validation");
        let derived = nd
            .derive(interface_measure)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(DimensionlessConfig {
            lambda_sq: derived.lambda * derived.lambda,
            gamma: derived.gamma,
            beta_oxygen_bar: derived.beta_oxygen_bar,
            beta_proton_bar: derived.beta_proton_bar,
        })
    }

    /// Builds the unit cell. The permittivity contrast needs lambda_sq and
    /// gamma, which for a physical block do not depend on the geometry.
    pub fn build_cell(&self, base_dir: &Path) -> CliResult<UnitCell> {
        let d = match (&self.dimensionless, &self.physical) {
            (Some(d), _) => d.clone(),
            (None, Some(nd)) => {
                let lambda = nd.lambda().map_err(|e| CliError::Config(e.to_string()))?;
                let gamma = nd.gamma().map_err(|e| CliError::Config(e.to_string()))?;
                DimensionlessConfig {
                    lambda_sq: lambda * lambda,
                    gamma,
                    beta_oxygen_bar: 0.0,
                    beta_proton_bar: 0.0,
                }
            }
            (None, None) => unreachable!("validation materializes one block"),
        };
        let g = &self.geometry;
        let spec = match g.kind {
            GeometryKind::Channel => GeometrySpec::Channel {
                dim: g.dim,
                n: g.n,
                pore_fraction: g.pore_fraction.expect("validated"),
                normal_axis: g.normal_axis,
            },
            GeometryKind::Inclusion => GeometrySpec::Inclusion {
                dim: g.dim,
                n: g.n,
                sides: g.sides.clone().expect("validated"),
            },
            GeometryKind::Bitmap => {
                let path = resolve_path(base_dir, g.path.as_ref().expect("validated"));
                let text = std::fs::read_to_string(&path)?;
                homogcl_core::cell::parse_bitmap(&text)
                    .map_err(|e| CliError::Config(e.to_string()))?
            }
        };
        UnitCell::from_spec(&spec, d.lambda_sq, d.gamma).map_err(|e| CliError::Config(e.to_string()))
    }
}

pub fn resolve_path(base_dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read `{}`: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    RunConfig::from_toml(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<RunConfig> {
        RunConfig::from_toml(text, Path::new("."))
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse(
            "[geometry]\nkind = \"channel\"\npore_fraction = 0.6\n\n[macro]\ncells = [16, 16]\n",
        )
        .unwrap();
        assert_eq!(cfg.solver.tol_nl, 1e-8);
        assert_eq!(cfg.macro_domain.alpha_c, 0.5);
        assert_eq!(cfg.macro_domain.n_proton, 1.0);
        assert_eq!(cfg.macro_domain.n_oxygen, 1.0);
        let d = cfg.dimensionless.as_ref().unwrap();
        assert_eq!(d.lambda_sq, 1.0);
        assert_eq!(d.beta_oxygen_bar, 0.0);
    }

    #[test]
    fn both_parameter_blocks_rejected() {
        let err = parse(
            "[geometry]\nkind = \"channel\"\npore_fraction = 0.5\n\
             [dimensionless]\nlambda_sq = 1.0\n\
             [physical]\nexchange_current = 1.0\nlayer_length = 1.0\n\
             diffusivity_oxygen = 1.0\ndiffusivity_proton = 1.0\n\
             eps_pore = 1.0\neps_solid = 1.0\nreference_concentration = 1.0\ntemperature = 300.0\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dimensionless") && msg.contains("physical"), "{msg}");
    }

    #[test]
    fn missing_geometry_rejected() {
        let err = parse("[macro]\ncells = [4, 4]\n").unwrap_err();
        assert!(err.to_string().contains("geometry"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_by_name() {
        let err = parse(
            "[geometry]\nkind = \"channel\"\npore_fraction = 0.5\nwibble = 3\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("wibble"), "{err}");
    }

    #[test]
    fn channel_requires_pore_fraction() {
        assert!(parse("[geometry]\nkind = \"channel\"\n").is_err());
        assert!(parse("[geometry]\nkind = \"inclusion\"\n").is_err());
        assert!(parse("[geometry]\nkind = \"bitmap\"\n").is_err());
    }

    #[test]
    fn roundtrip_is_identity() {
        let cfg = parse(
            "[geometry]\nkind = \"inclusion\"\nn = 16\nsides = [0.5, 0.5]\n\n\
             [dimensionless]\nlambda_sq = 0.01\ngamma = 0.0\nbeta_oxygen_bar = 0.4\n\n\
             [macro]\nextent = [1.0, 1.0]\ncells = [12, 12]\nc_proton_left = 0.3\n\n\
             [sigma_s]\nconstant = -0.05\n\n\
             [solver]\ntol_nl = 1e-9\n",
        )
        .unwrap();
        let text = cfg.to_toml().unwrap();
        let back = parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sigma_polynomial_evaluates() {
        let s = SigmaConfig {
            constant: -0.1,
            terms: vec![SigmaTerm {
                coef: 2.0,
                powers: vec![1, 0],
            }],
        };
        assert_eq!(s.evaluate(&[0.5, 3.0]), -0.1 + 1.0);
        assert!(!s.is_zero());
        assert!(SigmaConfig::default().is_zero());
    }

    #[test]
    fn sigma_powers_must_match_dim() {
        let err = parse(
            "[geometry]\nkind = \"channel\"\npore_fraction = 0.5\n\n\
             [sigma_s]\nterms = [{ coef = 1.0, powers = [1] }]\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("powers"), "{err}");
    }

    #[test]
    fn physical_block_derives_dimensionless() {
        let cfg = parse(
            "[geometry]\nkind = \"channel\"\npore_fraction = 0.5\n\n\
             [physical]\nexchange_current = 1e-3\nlayer_length = 1e-6\n\
             diffusivity_oxygen = 1e-9\ndiffusivity_proton = 5e-9\n\
             eps_pore = 7e-10\neps_solid = 3.5e-10\n\
             reference_concentration = 1e3\ntemperature = 300.0\n",
        )
        .unwrap();
        let d = cfg.dimensionless_for(2.0).unwrap();
        assert!((d.gamma - 0.5).abs() < 1e-12);
        assert!(d.lambda_sq > 0.0);
        assert!(d.beta_oxygen_bar > 0.0);
        // Couplings scale with the interface measure.
        let d2 = cfg.dimensionless_for(4.0).unwrap();
        assert!((d2.beta_oxygen_bar - 2.0 * d.beta_oxygen_bar).abs() < 1e-12);
    }
}
