//! Excess micromotion amplitudes and energies, and the systematic error
//! budget of image thermometry.

use serde::{Deserialize, Serialize};

use crate::crystal::{CrystalConfiguration, Structure};
use crate::error::{Error, Result};
use crate::modes::ModeSpectrum;
use crate::units::{length_scale, IonSpecies, TrapParameters, BOLTZMANN};

/// Relative temperature error from Doppler-cooling damping of the modes.
pub const DOPPLER_DAMPING_BOUND: f64 = 6e-3;
/// Conservative broadening error for a 20 nm excess amplitude against a
/// 1 µm thermal width.
pub const BROADENING_BOUND: f64 = 4e-2;
pub const BROADENING_REFERENCE_RATIO: f64 = 20e-9 / 1e-6;
/// Relative mode-frequency shift assumed for crystals off the rf node.
pub const DEFAULT_MODE_SHIFT: f64 = 3e-2;
/// Quoted upper bound on the excess axial amplitude of the string's
/// outermost ions (m).
pub const STRING_AXIAL_AMPLITUDE_BOUND: f64 = 20e-9;
/// Quoted micromotion energy bound for the string's outermost ions (K).
pub const STRING_QUOTED_TEMPERATURE: f64 = 0.4e-3;

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be >= 0, got {v}")))
    }
}

/// `A = r₀ q/2`.
pub fn excess_amplitude(r0: f64, q: f64) -> Result<f64> {
    non_negative("r0", r0)?;
    non_negative("q", q)?;
    Ok(r0 * q / 2.0)
}

/// `E = ¼ M Ω² A²` (J) and `T_µ = 2E/k_B` (K).
pub fn micromotion_kinetic_temperature(amplitude: f64, omega_rf: f64, species: &IonSpecies) -> Result<(f64, f64)> {
    non_negative("amplitude", amplitude)?;
    non_negative("omega_rf", omega_rf)?;
    let e = 0.25 * species.mass * omega_rf * omega_rf * amplitude * amplitude;
    Ok((e, 2.0 * e / BOLTZMANN))
}

/// Effective axial Mathieu parameter of a crystal with off-axis ions,
/// `q′_z = (q_rad/4)²`.
pub fn effective_axial_q(q_rad: f64) -> Result<f64> {
    non_negative("q_rad", q_rad)?;
    Ok((q_rad / 4.0).powi(2))
}

/// Variance factor `1 + q²/8` and the relative temperature error `q²/8`.
pub fn variance_correction_factor(q: f64) -> Result<(f64, f64)> {
    non_negative("q", q)?;
    let e = q * q / 8.0;
    Ok((1.0 + e, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    X,
    Y,
    Z,
}

impl Direction {
    fn block(self) -> usize {
        match self {
            Direction::X => 0,
            Direction::Y => 1,
            Direction::Z => 2,
        }
    }
}

/// Kinetic energy of one ion along one direction (J).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticEnergy {
    /// Secular part `(k_B T/2) Σ_p b²`.
    pub secular: f64,
    /// Ordinary micromotion `(k_B T/2) Σ_p b² q²Ω²/(8ω_p²)`.
    pub correction: f64,
    /// Driven excess micromotion.
    pub excess: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticBudget {
    pub direction: Direction,
    pub per_ion: Vec<KineticEnergy>,
    /// Zero modes left out of the sums.
    pub excluded_modes: Vec<usize>,
}

/// Thermal kinetic energy along `direction` including ordinary micromotion,
/// plus the excess energies `e_mu` (J, one per ion).
pub fn kinetic_energy_budget(
    spectrum: &ModeSpectrum,
    temperature: f64,
    direction: Direction,
    q: f64,
    omega_rf: f64,
    e_mu: &[f64],
) -> Result<KineticBudget> {
    non_negative("temperature", temperature)?;
    non_negative("q", q)?;
    non_negative("omega_rf", omega_rf)?;
    let n = spectrum.n_ions;
    if e_mu.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: e_mu.len(),
        });
    }
    if let Some(p) = spectrum.eigenvalues.iter().position(|&l| l < 0.0) {
        if !spectrum.zero_modes.contains(&p) {
            return Err(Error::UnstableModes(vec![p]));
        }
    }
    let half_kt = 0.5 * BOLTZMANN * temperature;
    let per_ion = (0..n)
        .map(|m| {
            let row = direction.block() * n + m;
            let (mut secular, mut correction) = (0.0, 0.0);
            for (p, &l) in spectrum.eigenvalues.iter().enumerate() {
                if spectrum.zero_modes.contains(&p) {
                    continue;
                }
                let b2 = spectrum.b(row, p).powi(2);
                let w2 = spectrum.omega_z_ref.powi(2) * l;
                secular += half_kt * b2;
                correction += half_kt * b2 * q * q * omega_rf * omega_rf / (8.0 * w2);
            }
            KineticEnergy {
                secular,
                correction,
                excess: e_mu[m],
                total: secular + correction + e_mu[m],
            }
        })
        .collect();
    Ok(KineticBudget {
        direction,
        per_ion,
        excluded_modes: spectrum.zero_modes.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub label: String,
    /// Relative temperature error.
    pub value: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicromotionReport {
    /// Per-ion excess amplitudes `[x, y, z]` (m).
    pub amplitudes: Vec<[f64; 3]>,
    /// Per-ion excess kinetic energy summed over directions (J).
    pub kinetic_energy: Vec<f64>,
    /// `2E/k_B` per ion (K).
    pub equivalent_temperature: Vec<f64>,
    /// Axial q used for the variance correction.
    pub effective_qz: f64,
    /// `1 + q²/8` for `effective_qz`.
    pub variance_correction: f64,
    pub relative_temp_errors: Vec<ErrorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetOptions {
    /// Temperature setting the thermal width for the broadening entry (K).
    pub temperature: f64,
    /// Relative mode-frequency shift bound for off-axis crystals.
    pub mode_shift: f64,
}

impl Default for BudgetOptions {
    fn default() -> Self {
        Self {
            temperature: 3.6e-3,
            mode_shift: DEFAULT_MODE_SHIFT,
        }
    }
}

/// Micromotion amplitudes of every ion and the labelled relative error
/// entries of the temperature measurement.
pub fn systematic_error_report(
    trap: &TrapParameters,
    config: &CrystalConfiguration,
    spectrum: &ModeSpectrum,
    species: &IonSpecies,
    opts: &BudgetOptions,
) -> Result<MicromotionReport> {
    trap.validate()?;
    non_negative("temperature", opts.temperature)?;
    non_negative("mode_shift", opts.mode_shift)?;
    if spectrum.n_ions != config.n_ions {
        return Err(Error::DimensionMismatch {
            expected: config.n_ions,
            got: spectrum.n_ions,
        });
    }
    let ell = length_scale(species, trap.omega_z);
    let off_axis = config.structure != Structure::Linear;
    let q_eff = if off_axis {
        trap.q_z.max(effective_axial_q(trap.q_rad)?)
    } else {
        trap.q_z
    };
    let mut amplitudes = Vec::with_capacity(config.n_ions);
    let mut kinetic_energy = Vec::with_capacity(config.n_ions);
    let mut equivalent_temperature = Vec::with_capacity(config.n_ions);
    for p in &config.positions {
        let a = [
            excess_amplitude((p[0] * ell).abs(), trap.q_rad)?,
            excess_amplitude((p[1] * ell).abs(), trap.q_rad)?,
            excess_amplitude((p[2] * ell).abs(), q_eff)?,
        ];
        let e: f64 = a
            .iter()
            .map(|&x| micromotion_kinetic_temperature(x, trap.omega_rf, species).map(|v| v.0))
            .sum::<Result<f64>>()?;
        amplitudes.push(a);
        kinetic_energy.push(e);
        equivalent_temperature.push(2.0 * e / BOLTZMANN);
    }

    let mut entries = vec![ErrorEntry {
        label: "doppler_damping".into(),
        value: DOPPLER_DAMPING_BOUND,
        note: "mode shifts from laser-cooling damping".into(),
    }];
    entries.push(ErrorEntry {
        label: "variance_correction_qz".into(),
        value: variance_correction_factor(trap.q_z)?.1,
        note: format!("q_z = {:.3e}", trap.q_z),
    });
    if off_axis {
        let qp = effective_axial_q(trap.q_rad)?;
        entries.push(ErrorEntry {
            label: "variance_correction_qz_effective".into(),
            value: variance_correction_factor(qp)?.1,
            note: format!("q'_z = (q_rad/4)^2 = {qp:.3e}"),
        });
    }
    let gamma_min = crate::modes::gamma_factors(spectrum)?
        .gamma_z
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let sigma = (BOLTZMANN * opts.temperature / (species.mass * trap.omega_z * trap.omega_z)).sqrt() * gamma_min;
    let a_max = amplitudes.iter().map(|a| a[2]).fold(0.0, f64::max);
    let broadening = if sigma > 0.0 {
        BROADENING_BOUND * (a_max / sigma) / BROADENING_REFERENCE_RATIO
    } else {
        0.0
    };
    entries.push(ErrorEntry {
        label: "excess_axial_broadening".into(),
        value: broadening,
        note: format!("max axial amplitude {:.3e} m, thermal width {:.3e} m", a_max, sigma),
    });
    let mode_shift = if off_axis && trap.q_rad > 0.0 {
        2.0 * opts.mode_shift
    } else {
        0.0
    };
    entries.push(ErrorEntry {
        label: "mode_frequency_shift".into(),
        value: mode_shift,
        note: format!("relative frequency shift {:.1e}", if mode_shift > 0.0 { opts.mode_shift } else { 0.0 }),
    });

    Ok(MicromotionReport {
        amplitudes,
        kinetic_energy,
        equivalent_temperature,
        effective_qz: q_eff,
        variance_correction: variance_correction_factor(q_eff)?.0,
        relative_temp_errors: entries,
    })
}
