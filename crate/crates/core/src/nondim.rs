//! Physical constants and scales producing the dimensionless groups that
//! drive the upscaled model: lambda (Debye length over device length),
//! gamma (solid/pore permittivity ratio) and the reaction couplings.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Raw physical inputs. All quantities in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nondimensionalization {
    /// Exchange current density i0.
    pub exchange_current: f64,
    /// Catalyst-layer length L.
    pub layer_length: f64,
    /// Molecular diffusivity of oxygen.
    pub diffusivity_oxygen: f64,
    /// Molecular diffusivity of protons.
    pub diffusivity_proton: f64,
    /// Electric permittivity of the pore (water) phase.
    pub eps_pore: f64,
    /// Electric permittivity of the solid phase.
    pub eps_solid: f64,
    /// Reference concentration c̄.
    pub reference_concentration: f64,
    /// Temperature T.
    pub temperature: f64,
    /// Proton charge number.
    #[serde(default = "default_charge_number")]
    pub charge_number: f64,
    /// Elementary charge e.
    #[serde(default = "default_elementary_charge")]
    pub elementary_charge: f64,
    /// Faraday constant F.
    #[serde(default = "default_faraday")]
    pub faraday: f64,
    /// Gas constant R.
    #[serde(default = "default_gas_constant")]
    pub gas_constant: f64,
    /// Boltzmann constant k_B.
    #[serde(default = "default_boltzmann")]
    pub boltzmann: f64,
}

fn default_charge_number() -> f64 {
    1.0
}
fn default_elementary_charge() -> f64 {
    1.602_176_634e-19
}
fn default_faraday() -> f64 {
    96_485.332_12
}
fn default_gas_constant() -> f64 {
    8.314_462_618
}
fn default_boltzmann() -> f64 {
    1.380_649e-23
}

/// Dimensionless parameter set consumed by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dimensionless {
    pub lambda: f64,
    pub gamma: f64,
    pub beta_oxygen_bar: f64,
    pub beta_proton_bar: f64,
}

impl Nondimensionalization {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("exchange_current", self.exchange_current),
            ("layer_length", self.layer_length),
            ("diffusivity_oxygen", self.diffusivity_oxygen),
            ("diffusivity_proton", self.diffusivity_proton),
            ("eps_pore", self.eps_pore),
            ("reference_concentration", self.reference_concentration),
            ("temperature", self.temperature),
            ("charge_number", self.charge_number),
            ("elementary_charge", self.elementary_charge),
            ("faraday", self.faraday),
            ("gas_constant", self.gas_constant),
            ("boltzmann", self.boltzmann),
        ];
        for (name, v) in positive {
            if !(v > 0.0) && !(name == "exchange_current" && v == 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.eps_solid >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eps_solid must be non-negative, got {}",
                self.eps_solid
            )));
        }
        Ok(())
    }

    /// Debye length lambda_D = sqrt(eps_pore R T / (2 z^2 e F c̄)).
    pub fn debye_length(&self) -> Result<f64> {
        self.validate()?;
        let z2 = self.charge_number * self.charge_number;
        Ok((self.eps_pore * self.gas_constant * self.temperature
            / (2.0 * z2 * self.elementary_charge * self.faraday * self.reference_concentration))
            .sqrt())
    }

    /// lambda = lambda_D / L.
    pub fn lambda(&self) -> Result<f64> {
        Ok(self.debye_length()? / self.layer_length)
    }

    /// gamma = eps_solid / eps_pore.
    pub fn gamma(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.eps_solid / self.eps_pore)
    }

    /// beta_O = i0 L / (4 e D_O), before scaling by the interface measure.
    pub fn beta_oxygen(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.exchange_current * self.layer_length
            / (4.0 * self.elementary_charge * self.diffusivity_oxygen))
    }

    /// beta_+ = i0 L / (e D_+), before scaling by the interface measure.
    pub fn beta_proton(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.exchange_current * self.layer_length
            / (self.elementary_charge * self.diffusivity_proton))
    }

    /// Full dimensionless set for a cell with interface measure Lambda:
    /// the reaction couplings are beta_bar = Lambda * beta.
    pub fn derive(&self, interface_measure: f64) -> Result<Dimensionless> {
        if !(interface_measure >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "interface measure must be non-negative, got {interface_measure}"
            )));
        }
        Ok(Dimensionless {
            lambda: self.lambda()?,
            gamma: self.gamma()?,
            beta_oxygen_bar: interface_measure * self.beta_oxygen()?,
            beta_proton_bar: interface_measure * self.beta_proton()?,
        })
    }
}
