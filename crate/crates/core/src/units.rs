//! Physical constants, trap and species descriptions, and the single place
//! where SI quantities are converted to the dimensionless crystal units.
//!
//! Crystal positions are measured in the length scale
//! `ℓ = (e² / (4πε₀ M ω_z²))^(1/3)` and energies in `M ω_z² ℓ²`, so that the
//! axial trap curvature is one and the Coulomb pair energy is `1/r`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementary charge (C).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Vacuum permittivity (F/m).
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
/// Boltzmann constant (J/K).
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Atomic mass unit (kg).
pub const AMU: f64 = 1.660_539_066_60e-27;
/// Electron mass (kg).
pub const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;

/// Angular frequency in rad/s for a frequency given in kHz.
pub fn khz(f: f64) -> f64 {
    2.0 * PI * f * 1e3
}

/// Angular frequency in rad/s for a frequency given in MHz.
pub fn mhz(f: f64) -> f64 {
    2.0 * PI * f * 1e6
}

/// Angular frequency in rad/s for a frequency given in THz.
pub fn thz(f: f64) -> f64 {
    2.0 * PI * f * 1e12
}

/// Linear Paul trap in the pseudopotential approximation plus the rf drive
/// parameters needed for micromotion estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapParameters {
    /// Axial secular angular frequency (rad/s).
    pub omega_z: f64,
    /// Radial secular angular frequency along x (rad/s).
    pub omega_x: f64,
    /// Radial secular angular frequency along y (rad/s).
    pub omega_y: f64,
    /// rf drive angular frequency (rad/s).
    pub omega_rf: f64,
    /// Radial Mathieu q.
    pub q_rad: f64,
    /// Axial Mathieu q (residual, from imperfections).
    pub q_z: f64,
}

impl TrapParameters {
    pub const DEFAULT_RF_MHZ: f64 = 3.98;
    pub const DEFAULT_Q_RAD: f64 = 0.14;
    pub const DEFAULT_Q_Z: f64 = 5e-4;
    /// Relative radial split used to break the azimuthal degeneracy.
    pub const DEFAULT_RADIAL_SPLIT: f64 = 0.05;

    /// Trap from axial/radial frequencies in kHz with a relative radial
    /// split that lowers one axis: `ω_x = ω_r`, `ω_y = ω_r (1 − s)`.
    pub fn from_khz(axial_khz: f64, radial_khz: f64, radial_split: f64) -> Self {
        let radial = khz(radial_khz);
        Self {
            omega_z: khz(axial_khz),
            omega_x: radial,
            omega_y: radial * (1.0 - radial_split),
            omega_rf: mhz(Self::DEFAULT_RF_MHZ),
            q_rad: Self::DEFAULT_Q_RAD,
            q_z: Self::DEFAULT_Q_Z,
        }
    }

    /// `(ω_x/ω_z)²`.
    pub fn alpha(&self) -> f64 {
        (self.omega_x / self.omega_z).powi(2)
    }

    /// `(ω_y/ω_z)²`.
    pub fn beta(&self) -> f64 {
        (self.omega_y / self.omega_z).powi(2)
    }

    /// Nominal radial angular frequency (the unlowered axis, `ω_x`).
    pub fn omega_radial(&self) -> f64 {
        self.omega_x
    }

    /// Relative radial split `1 − ω_y/ω_x`.
    pub fn radial_split(&self) -> f64 {
        1.0 - self.omega_y / self.omega_x
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("omega_z", self.omega_z),
            ("omega_x", self.omega_x),
            ("omega_y", self.omega_y),
            ("omega_rf", self.omega_rf),
        ] {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::invalid(name, format!("must be > 0, got {w}")));
            }
            if name != "omega_rf" && w >= 0.5 * self.omega_rf {
                return Err(Error::invalid(name, "must be below half the rf frequency"));
            }
        }
        for (name, q) in [("q_rad", self.q_rad), ("q_z", self.q_z)] {
            if !(0.0..0.9).contains(&q) {
                return Err(Error::invalid(name, format!("must lie in [0, 0.9), got {q}")));
            }
        }
        Ok(())
    }
}

/// Atomic and detection properties of the trapped species.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    /// Ion mass (kg).
    pub mass: f64,
    /// Standing-wave wavelength (m).
    pub lattice_wavelength: f64,
    /// Fluorescence detection wavelength (m).
    pub detection_wavelength: f64,
    /// P1/2–P3/2 fine-structure splitting (rad/s).
    pub p12_p32_splitting: f64,
    /// P1/2 decay rate (1/s).
    pub p12_linewidth: f64,
    /// P3/2 decay rate (1/s).
    pub p32_linewidth: f64,
    /// Decay probability from P to S1/2, the detected channel.
    pub branch_to_s: f64,
    /// Probability that one excitation removes the ion from the pinned state.
    pub branch_leave_pinned_state: f64,
    /// Optical pumping efficiency into the lattice-coupled sublevel.
    pub pump_efficiency: f64,
    /// Probability that an emitted detection photon is counted.
    pub detector_efficiency: f64,
    /// Line strength of the P3/2 coupling relative to P1/2.
    pub relative_p32_line_strength: f64,
}

impl IonSpecies {
    /// ⁴⁰Ca⁺ with an 866 nm lattice on D3/2 → P1/2.
    pub fn calcium40() -> Self {
        Self {
            mass: 39.962_590_86 * AMU - ELECTRON_MASS,
            lattice_wavelength: 866.0e-9,
            detection_wavelength: 397.0e-9,
            p12_p32_splitting: thz(6.7),
            p12_linewidth: 1.0 / 7.098e-9,
            p32_linewidth: 1.0 / 6.924e-9,
            branch_to_s: 0.94,
            branch_leave_pinned_state: 0.97,
            pump_efficiency: 0.98,
            detector_efficiency: 1.7e-4,
            relative_p32_line_strength: 0.5,
        }
    }

    /// Lattice wavevector `k = 2π/λ` (1/m).
    pub fn wavevector(&self) -> f64 {
        2.0 * PI / self.lattice_wavelength
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(Error::invalid("mass", "must be > 0"));
        }
        for (name, w) in [
            ("lattice_wavelength", self.lattice_wavelength),
            ("detection_wavelength", self.detection_wavelength),
            ("p12_p32_splitting", self.p12_p32_splitting),
            ("p12_linewidth", self.p12_linewidth),
            ("p32_linewidth", self.p32_linewidth),
        ] {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::invalid(name, "must be > 0"));
            }
        }
        for (name, p) in [
            ("branch_to_s", self.branch_to_s),
            ("branch_leave_pinned_state", self.branch_leave_pinned_state),
            ("pump_efficiency", self.pump_efficiency),
            ("detector_efficiency", self.detector_efficiency),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("probability out of [0,1]: {p}")));
            }
        }
        if !(self.relative_p32_line_strength >= 0.0) {
            return Err(Error::invalid("relative_p32_line_strength", "must be >= 0"));
        }
        Ok(())
    }
}

impl Default for IonSpecies {
    fn default() -> Self {
        Self::calcium40()
    }
}

/// Crystal length scale `ℓ = (e²/(4πε₀ M ω_z²))^(1/3)` in metres.
pub fn length_scale(species: &IonSpecies, omega_z: f64) -> f64 {
    let coulomb = ELEMENTARY_CHARGE * ELEMENTARY_CHARGE / (4.0 * PI * VACUUM_PERMITTIVITY);
    (coulomb / (species.mass * omega_z * omega_z)).cbrt()
}

/// Conversion between dimensionless crystal units and SI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrystalScale {
    pub length: f64,
    pub omega_z: f64,
    pub mass: f64,
}

impl CrystalScale {
    pub fn new(species: &IonSpecies, omega_z: f64) -> Self {
        Self {
            length: length_scale(species, omega_z),
            omega_z,
            mass: species.mass,
        }
    }

    pub fn to_metres(&self, x: f64) -> f64 {
        x * self.length
    }

    pub fn to_dimensionless(&self, metres: f64) -> f64 {
        metres / self.length
    }

    /// Energy unit `M ω_z² ℓ²` in joules.
    pub fn energy_unit(&self) -> f64 {
        self.mass * self.omega_z * self.omega_z * self.length * self.length
    }

    /// Thermal length `√(k_B T / (M ω_z²))` in metres.
    pub fn thermal_length(&self, temperature: f64) -> f64 {
        (BOLTZMANN * temperature / (self.mass * self.omega_z * self.omega_z)).sqrt()
    }
}
