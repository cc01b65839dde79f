//! Standing-wave dipole potential, adiabatic ramp simulation and per-ion
//! pinning and scattering probabilities.
//!
//! Both detunings use `U(z) = U₀ sin²(kz)` with the intensity pattern
//! `sin²(kz)`: blue light has `U₀ > 0` and minima at the nodes, red light
//! has `U₀ < 0` and minima at the antinodes. The harmonic trap is treated
//! as flat across the few lattice periods an ion explores during the pulse.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::golden_section;
use crate::stats::secondary_fraction;
use crate::units::{thz, IonSpecies, BOLTZMANN, HBAR};

/// Samples per independently seeded block of an ensemble.
pub const ENSEMBLE_BLOCK: usize = 4096;
/// Automatic timestep in units of the full-depth lattice period.
pub const STEPS_PER_PERIOD: f64 = 100.0;
/// Coarsest accepted timestep in units of the full-depth lattice period.
pub const MIN_STEPS_PER_PERIOD: f64 = 50.0;
/// Minimum `|δ|/Γ` for the far-detuned light-shift formulas.
pub const MIN_DETUNING_LINEWIDTHS: f64 = 100.0;

/// Standing-wave field and pulse sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    /// Wavelength (m).
    pub wavelength: f64,
    /// Signed detuning from D3/2 → P1/2 (rad/s); positive is blue.
    pub detuning_p12: f64,
    /// Depth `|U₀|/k_B` on the beam axis (K).
    pub depth: f64,
    /// Beam waist radius (m).
    pub waist: f64,
    /// Linear ramp duration (s).
    pub ramp_time: f64,
    /// Hold duration at full depth (s).
    pub hold_time: f64,
    /// Integration timestep (s); `None` picks `1/(100 ν_latt)`.
    #[serde(default)]
    pub timestep: Option<f64>,
}

impl LatticeSpec {
    pub const DEFAULT_DETUNING_THZ: f64 = 0.76;

    pub fn blue(depth: f64) -> Self {
        Self {
            wavelength: 866e-9,
            detuning_p12: thz(Self::DEFAULT_DETUNING_THZ),
            depth,
            waist: 37e-6,
            ramp_time: 2e-6,
            hold_time: 1e-6,
            timestep: None,
        }
    }

    pub fn red(depth: f64) -> Self {
        Self {
            detuning_p12: -thz(Self::DEFAULT_DETUNING_THZ),
            ..Self::blue(depth)
        }
    }

    pub fn with_depth(&self, depth: f64) -> Self {
        Self { depth, ..*self }
    }

    pub fn is_blue(&self) -> bool {
        self.detuning_p12 > 0.0
    }

    pub fn wavevector(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Signed `U₀` on the beam axis (J).
    pub fn u0(&self) -> f64 {
        self.detuning_p12.signum() * BOLTZMANN * self.depth
    }

    pub fn validate(&self, species: &IonSpecies) -> Result<()> {
        for (name, v) in [("wavelength", self.wavelength), ("waist", self.waist)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [("depth", self.depth), ("ramp_time", self.ramp_time), ("hold_time", self.hold_time)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("must be >= 0, got {v}")));
            }
        }
        if let Some(dt) = self.timestep {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::invalid("timestep", format!("must be > 0, got {dt}")));
            }
        }
        for (name, d, gamma) in [
            ("detuning_p12", self.detuning_p12, species.p12_linewidth),
            ("detuning_p32", self.detuning_p12 - species.p12_p32_splitting, species.p32_linewidth),
        ] {
            if !(d.is_finite() && d.abs() >= MIN_DETUNING_LINEWIDTHS * gamma) {
                return Err(Error::invalid(
                    name,
                    format!("|δ| = {:.3e} rad/s is not far from resonance (Γ = {gamma:.3e})", d.abs()),
                ));
            }
        }
        Ok(())
    }
}

/// Vibrational frequency (Hz) at the bottom of a lattice well of the given
/// depth (K): `ν = (k/2π) √(2 k_B T_latt / M)`.
pub fn lattice_frequency(depth: f64, species: &IonSpecies, wavelength: f64) -> Result<f64> {
    if !(depth.is_finite() && depth >= 0.0) {
        return Err(Error::invalid("depth", format!("must be >= 0, got {depth}")));
    }
    Ok((2.0 * BOLTZMANN * depth / species.mass).sqrt() / wavelength)
}

/// Light shift and scattering rate at the intensity maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipoleResponse {
    /// Signed `U₀/k_B` (K).
    pub u0: f64,
    /// Photon scattering rate at the intensity maximum (1/s).
    pub gamma_sc: f64,
}

/// Two-level light shifts from P1/2 (detuning `δ`) and P3/2 (detuning
/// `δ − Δ_fs`, relative strength `r`) at saturation parameter
/// `intensity_scale` on the P1/2 line.
pub fn dipole_response(intensity_scale: f64, spec: &LatticeSpec, species: &IonSpecies) -> Result<DipoleResponse> {
    spec.validate(species)?;
    if !(intensity_scale.is_finite() && intensity_scale >= 0.0) {
        return Err(Error::invalid("intensity_scale", "must be >= 0"));
    }
    let lines = [
        (spec.detuning_p12, species.p12_linewidth, 1.0),
        (spec.detuning_p12 - species.p12_p32_splitting, species.p32_linewidth, species.relative_p32_line_strength),
    ];
    let (mut u, mut rate) = (0.0, 0.0);
    for (delta, gamma, strength) in lines {
        let ui = intensity_scale * strength * HBAR * gamma * gamma / (8.0 * delta);
        u += ui;
        rate += gamma * ui / (HBAR * delta);
    }
    Ok(DipoleResponse {
        u0: u / BOLTZMANN,
        gamma_sc: rate,
    })
}

/// Intensity scale giving `|U₀| = k_B · spec.depth`.
pub fn intensity_for_depth(spec: &LatticeSpec, species: &IonSpecies) -> Result<f64> {
    let unit = dipole_response(1.0, spec, species)?;
    if unit.u0 == 0.0 {
        return Err(Error::DegenerateInput("light shifts cancel at this detuning".into()));
    }
    if unit.u0.signum() != spec.detuning_p12.signum() {
        return Err(Error::invalid("detuning_p12", "P3/2 shift outweighs P1/2; potential sign flips"));
    }
    Ok(spec.depth / unit.u0.abs())
}

/// Peak response of the calibrated field.
pub fn calibrated_response(spec: &LatticeSpec, species: &IonSpecies) -> Result<DipoleResponse> {
    dipole_response(intensity_for_depth(spec, species)?, spec, species)
}

/// Relative Gaussian-beam intensity at radial offset `r`: `exp(−2r²/w²)`.
pub fn beam_intensity_factor(radial_offset: f64, waist: f64) -> Result<f64> {
    if !(waist.is_finite() && waist > 0.0) {
        return Err(Error::invalid("waist", "must be > 0"));
    }
    Ok((-2.0 * radial_offset * radial_offset / (waist * waist)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSample {
    /// Position along the lattice axis (m).
    pub z: f64,
    /// Axial velocity (m/s).
    pub v: f64,
    /// Distance from the beam axis (m).
    pub radial_offset: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpaceEnsemble {
    pub samples: Vec<PhaseSample>,
    pub temperature: f64,
    pub seed: u64,
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Thermal ensemble before the lattice is switched on: positions uniform
/// over `span_periods` lattice periods, velocities Maxwell at `temperature`.
///
/// The same seed gives the same uniform and standard-normal draws for any
/// temperature, so ensembles at different temperatures share random
/// numbers.
pub fn sample_initial_ensemble(
    temperature: f64,
    n_samples: usize,
    span_periods: f64,
    radial_offset: f64,
    species: &IonSpecies,
    wavelength: f64,
    seed: u64,
) -> Result<PhaseSpaceEnsemble> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("temperature", format!("must be > 0, got {temperature}")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be >= 1"));
    }
    if !(span_periods >= 4.0) {
        return Err(Error::invalid("span_periods", "must cover at least 4 lattice periods"));
    }
    let span = span_periods * wavelength / 2.0;
    let v_scale = (BOLTZMANN * temperature / species.mass).sqrt();
    let weight = 1.0 / n_samples as f64;
    let blocks = n_samples.div_ceil(ENSEMBLE_BLOCK);
    let samples = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = block_rng(seed, b);
            let len = ENSEMBLE_BLOCK.min(n_samples - b * ENSEMBLE_BLOCK);
            (0..len)
                .map(|_| {
                    let z = span * rng.gen::<f64>();
                    let g: f64 = rng.sample(StandardNormal);
                    PhaseSample {
                        z,
                        v: v_scale * g,
                        radial_offset,
                        weight,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(PhaseSpaceEnsemble {
        samples,
        temperature,
        seed,
    })
}

/// Thermal ensemble inside a static lattice well at full depth: Boltzmann
/// positions within one period (by rejection) and Maxwell velocities.
pub fn sample_lattice_equilibrium(
    temperature: f64,
    n_samples: usize,
    spec: &LatticeSpec,
    species: &IonSpecies,
    seed: u64,
) -> Result<PhaseSpaceEnsemble> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("temperature", format!("must be > 0, got {temperature}")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be >= 1"));
    }
    let k = spec.wavevector();
    let u0 = spec.u0();
    let u_min = u0.min(0.0);
    let kt = BOLTZMANN * temperature;
    let v_scale = (kt / species.mass).sqrt();
    let weight = 1.0 / n_samples as f64;
    let blocks = n_samples.div_ceil(ENSEMBLE_BLOCK);
    let samples = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = block_rng(seed, b);
            let len = ENSEMBLE_BLOCK.min(n_samples - b * ENSEMBLE_BLOCK);
            (0..len)
                .map(|_| {
                    let z = loop {
                        let z = spec.wavelength / 2.0 * rng.gen::<f64>();
                        let u = u0 * (k * z).sin().powi(2) - u_min;
                        if rng.gen::<f64>() < (-u / kt).exp() {
                            break z;
                        }
                    };
                    let g: f64 = rng.sample(StandardNormal);
                    PhaseSample {
                        z,
                        v: v_scale * g,
                        radial_offset: 0.0,
                        weight,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(PhaseSpaceEnsemble {
        samples,
        temperature,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalSample {
    pub z: f64,
    pub v: f64,
    pub radial_offset: f64,
    pub weight: f64,
    /// Total energy at the end of the hold, measured from the well bottom (J).
    pub energy: f64,
    /// Local well depth `k_B · depth · I(r)` (J).
    pub well_depth: f64,
    /// Time average of `sin²(kz)` over the hold.
    pub mean_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampOutcome {
    pub samples: Vec<FinalSample>,
    /// Timestep used (s); zero for field-free flight.
    pub timestep: f64,
    pub steps: usize,
}

/// Timestep for `spec`: the configured one, checked against
/// `1/(50 ν_latt)`, or `1/(100 ν_latt)` at full depth.
pub fn lattice_timestep(spec: &LatticeSpec, species: &IonSpecies) -> Result<f64> {
    let nu = lattice_frequency(spec.depth, species, spec.wavelength)?;
    match spec.timestep {
        Some(dt) if nu > 0.0 && dt * nu > 1.0 / MIN_STEPS_PER_PERIOD => Err(Error::invalid(
            "timestep",
            format!("{dt:e} s exceeds 1/(50 ν_latt) = {:e} s", 1.0 / (MIN_STEPS_PER_PERIOD * nu)),
        )),
        Some(dt) => Ok(dt),
        None if nu > 0.0 => Ok(1.0 / (STEPS_PER_PERIOD * nu)),
        None => Ok(0.0),
    }
}

/// Velocity-Verlet integration of each sample through the linear ramp and
/// the hold in `U = λ(t) U₀ I(r) sin²(kz)`.
pub fn simulate_ramp_hold(ensemble: &PhaseSpaceEnsemble, spec: &LatticeSpec, species: &IonSpecies) -> Result<RampOutcome> {
    spec.validate(species)?;
    let dt = lattice_timestep(spec, species)?;
    let k = spec.wavevector();
    let u0 = spec.u0();
    let ramp_steps = if dt > 0.0 { (spec.ramp_time / dt).ceil() as usize } else { 0 };
    let hold_steps = if dt > 0.0 { (spec.hold_time / dt).ceil() as usize } else { 0 };
    let samples = ensemble
        .samples
        .par_iter()
        .map(|s| {
            let factor = beam_intensity_factor(s.radial_offset, spec.waist)?;
            let u = u0 * factor;
            Ok(if u == 0.0 {
                free_flight(s, k, spec)
            } else {
                integrate_sample(s, k, u, species.mass, spec, ramp_steps, hold_steps)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RampOutcome {
        samples,
        timestep: dt,
        steps: ramp_steps + hold_steps,
    })
}

fn free_flight(s: &PhaseSample, k: f64, spec: &LatticeSpec) -> FinalSample {
    let z_hold = s.z + s.v * spec.ramp_time;
    let z = z_hold + s.v * spec.hold_time;
    let phase = k * s.v * spec.hold_time;
    // Mean of sin²(k z(t)) along a straight line.
    let mean_intensity = if phase.abs() < 1e-9 {
        (k * z_hold).sin().powi(2)
    } else {
        0.5 - ((2.0 * k * z).sin() - (2.0 * k * z_hold).sin()) / (4.0 * phase)
    };
    FinalSample {
        z,
        v: s.v,
        radial_offset: s.radial_offset,
        weight: s.weight,
        energy: 0.0,
        well_depth: 0.0,
        mean_intensity,
    }
}

fn integrate_sample(
    s: &PhaseSample,
    k: f64,
    u: f64,
    mass: f64,
    spec: &LatticeSpec,
    ramp_steps: usize,
    hold_steps: usize,
) -> FinalSample {
    // a(z) = −λ U k sin(2kz) / M
    let a0 = u * k / mass;
    let accel = |z: f64, lambda: f64| -lambda * a0 * (2.0 * k * z).sin();
    let (mut z, mut v) = (s.z, s.v);
    if ramp_steps > 0 {
        let h = spec.ramp_time / ramp_steps as f64;
        let mut a = accel(z, 0.0);
        for n in 0..ramp_steps {
            v += 0.5 * h * a;
            z += h * v;
            a = accel(z, (n + 1) as f64 / ramp_steps as f64);
            v += 0.5 * h * a;
        }
    }
    let mean_intensity = if hold_steps > 0 {
        let h = spec.hold_time / hold_steps as f64;
        // One sin_cos per step gives both sin(2kz) = 2 sin cos and sin².
        let (sn, cs) = (k * z).sin_cos();
        let mut a = -2.0 * a0 * sn * cs;
        let mut prev = sn * sn;
        let mut acc = 0.0;
        for _ in 0..hold_steps {
            v += 0.5 * h * a;
            z += h * v;
            let (sn, cs) = (k * z).sin_cos();
            a = -2.0 * a0 * sn * cs;
            v += 0.5 * h * a;
            acc += 0.5 * (prev + sn * sn);
            prev = sn * sn;
        }
        acc / hold_steps as f64
    } else {
        (k * z).sin().powi(2)
    };
    let energy = 0.5 * mass * v * v + u * (k * z).sin().powi(2) - u.min(0.0);
    FinalSample {
        z,
        v,
        radial_offset: s.radial_offset,
        weight: s.weight,
        energy,
        well_depth: u.abs(),
        mean_intensity,
    }
}

/// Weighted fraction of samples whose final energy lies below their local
/// well depth.
pub fn pinning_probability(outcome: &RampOutcome) -> f64 {
    outcome
        .samples
        .iter()
        .filter(|s| s.well_depth > 0.0 && s.energy < s.well_depth)
        .map(|s| s.weight)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatteringProbability {
    /// Probability per ion of leaving the lattice-coupled state.
    pub excitation: f64,
    /// Expected detected photons per ion and sequence.
    pub detected: f64,
}

/// Effective exposure time: the hold plus `∫λ dt = ramp/2` for the linear ramp.
pub fn effective_time(spec: &LatticeSpec) -> f64 {
    spec.hold_time + 0.5 * spec.ramp_time
}

/// `p = η_pump (1 − exp(−Γ_sc I(r) ⟨sin²⟩ t_eff))`, averaged over samples.
pub fn scattering_probability(outcome: &RampOutcome, spec: &LatticeSpec, species: &IonSpecies) -> Result<ScatteringProbability> {
    let gamma = calibrated_response(spec, species)?.gamma_sc;
    let t_eff = effective_time(spec);
    let mut raw = 0.0;
    for s in &outcome.samples {
        let factor = beam_intensity_factor(s.radial_offset, spec.waist)?;
        raw += s.weight * -(-gamma * factor * s.mean_intensity * t_eff).exp_m1();
    }
    let raw = raw.clamp(0.0, 1.0);
    Ok(ScatteringProbability {
        excitation: species.pump_efficiency * raw,
        detected: raw * species.pump_efficiency * species.branch_to_s * species.detector_efficiency,
    })
}

/// Red and blue predictions at one depth, averaged over the crystal's ions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatteringPrediction {
    /// On-axis depth (K).
    pub depth: f64,
    pub p_red: f64,
    pub p_blue: f64,
    pub pinning_red: f64,
    pub pinning_blue: f64,
    pub secondary_fraction_red: f64,
    pub secondary_fraction_blue: f64,
}

impl ScatteringPrediction {
    pub const CSV_HEADER: [&'static str; 7] =
        ["depth_mK", "p_red", "p_blue", "pinning_red", "pinning_blue", "sec_frac_red", "sec_frac_blue"];

    pub fn csv_row(&self) -> Vec<f64> {
        vec![
            self.depth * 1e3,
            self.p_red,
            self.p_blue,
            self.pinning_red,
            self.pinning_blue,
            self.secondary_fraction_red,
            self.secondary_fraction_blue,
        ]
    }
}

/// Monte Carlo sizes for the scattering model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleOptions {
    pub n_samples: usize,
    pub span_periods: f64,
    pub seed: u64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            span_periods: 8.0,
            seed: 1,
        }
    }
}

/// Ions sharing a radial offset (to 1 nm) are simulated once.
fn group_offsets(offsets: &[f64]) -> Result<Vec<(f64, usize)>> {
    if offsets.is_empty() {
        return Err(Error::invalid("radial_offsets", "need at least one ion"));
    }
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for &r in offsets {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::invalid("radial_offsets", format!("must be >= 0, got {r}")));
        }
        match groups.iter_mut().find(|(g, _)| (g - r).abs() < 1e-9) {
            Some(g) => g.1 += 1,
            None => groups.push((r, 1)),
        }
    }
    Ok(groups)
}

/// Crystal-averaged `(p, pinning)` for one colour and depth.
fn crystal_response(
    temperature: f64,
    spec: &LatticeSpec,
    groups: &[(f64, usize)],
    n_ions: usize,
    species: &IonSpecies,
    opts: &EnsembleOptions,
) -> Result<(f64, f64)> {
    let (mut p, mut pin) = (0.0, 0.0);
    for (g, &(r, count)) in groups.iter().enumerate() {
        let ens = sample_initial_ensemble(
            temperature,
            opts.n_samples,
            opts.span_periods,
            r,
            species,
            spec.wavelength,
            opts.seed.wrapping_add(g as u64),
        )?;
        let out = simulate_ramp_hold(&ens, spec, species)?;
        let w = count as f64 / n_ions as f64;
        p += w * scattering_probability(&out, spec, species)?.excitation;
        pin += w * pinning_probability(&out);
    }
    Ok((p, pin))
}

/// Scattering probability per ion against depth for both colours.
pub fn predict_scattering_curve(
    temperature: f64,
    depths: &[f64],
    spec_red: &LatticeSpec,
    spec_blue: &LatticeSpec,
    radial_offsets: &[f64],
    species: &IonSpecies,
    opts: &EnsembleOptions,
) -> Result<Vec<ScatteringPrediction>> {
    if spec_red.is_blue() || !spec_blue.is_blue() {
        return Err(Error::invalid("detuning_p12", "red spec needs δ < 0 and blue spec δ > 0"));
    }
    if depths.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("depths", "must be ascending"));
    }
    let groups = group_offsets(radial_offsets)?;
    let n = radial_offsets.len();
    depths
        .iter()
        .map(|&d| {
            let (p_red, pinning_red) = crystal_response(temperature, &spec_red.with_depth(d), &groups, n, species, opts)?;
            let (p_blue, pinning_blue) = crystal_response(temperature, &spec_blue.with_depth(d), &groups, n, species, opts)?;
            Ok(ScatteringPrediction {
                depth: d,
                p_red,
                p_blue,
                pinning_red,
                pinning_blue,
                secondary_fraction_red: secondary_fraction(n, p_red)?,
                secondary_fraction_blue: secondary_fraction(n, p_blue)?,
            })
        })
        .collect()
}

/// Scattering probability per ion for ions spread uniformly over the
/// lattice (`⟨sin²⟩ = 1/2`), averaged over the crystal.
pub fn delocalized_probability(spec: &LatticeSpec, radial_offsets: &[f64], species: &IonSpecies) -> Result<f64> {
    let gamma = calibrated_response(spec, species)?.gamma_sc;
    let t_eff = effective_time(spec);
    let mut p = 0.0;
    for &r in radial_offsets {
        let f = beam_intensity_factor(r, spec.waist)?;
        p += -(-gamma * f * 0.5 * t_eff).exp_m1();
    }
    Ok(species.pump_efficiency * p / radial_offsets.len().max(1) as f64)
}

/// Measured scattering probabilities per ion at on-axis depths (K).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScatteringData {
    /// `(depth, p)` pairs with the red-detuned lattice.
    pub red: Vec<(f64, f64)>,
    /// `(depth, p)` pairs with the blue-detuned lattice.
    pub blue: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub stderr: f64,
    /// Residual sum of squares at the optimum.
    pub ssr: f64,
    /// Optimum within 2% (in log T) of the search bound.
    pub at_bound: bool,
    /// Objective curvature not positive at the optimum.
    pub flat: bool,
}

/// Search bounds for the temperature fit (K).
pub const FIT_T_MIN: f64 = 1e-4;
pub const FIT_T_MAX: f64 = 1.0;

/// Least-squares temperature from scattering data.
///
/// The model is evaluated with the same random numbers at every
/// temperature, so the objective is smooth in `T`. The standard error comes
/// from the curvature in `ln T` and the residual variance.
pub fn fit_temperature_from_scattering(
    data: &ScatteringData,
    spec_red: &LatticeSpec,
    spec_blue: &LatticeSpec,
    radial_offsets: &[f64],
    species: &IonSpecies,
    opts: &EnsembleOptions,
) -> Result<TemperatureFit> {
    let n_points = data.red.len() + data.blue.len();
    if n_points < 3 {
        return Err(Error::invalid("data", format!("need at least 3 points, got {n_points}")));
    }
    for &(d, p) in data.red.iter().chain(&data.blue) {
        if !(d.is_finite() && d >= 0.0 && (0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("data", format!("bad point ({d}, {p})")));
        }
    }
    let groups = group_offsets(radial_offsets)?;
    let n = radial_offsets.len();
    let ssr = |log_t: f64| -> Result<f64> {
        let t = log_t.exp();
        let mut s = 0.0;
        for (points, spec) in [(&data.red, spec_red), (&data.blue, spec_blue)] {
            for &(d, p) in points.iter() {
                let (model, _) = crystal_response(t, &spec.with_depth(d), &groups, n, species, opts)?;
                s += (model - p).powi(2);
            }
        }
        Ok(s)
    };
    let (lo, hi) = (FIT_T_MIN.ln(), FIT_T_MAX.ln());
    let (x, f) = golden_section(&ssr, lo, hi, 1e-3, 60)?;
    let at_bound = (x - lo) < 0.02 * (hi - lo) || (hi - x) < 0.02 * (hi - lo);
    let h = 0.05;
    let curvature = (ssr(x + h)? - 2.0 * f + ssr(x - h)?) / (h * h);
    let flat = !(curvature > 0.0);
    let dof = (n_points - 1).max(1) as f64;
    let t = x.exp();
    let stderr = if flat {
        f64::INFINITY
    } else {
        t * (2.0 * (f / dof) / curvature).sqrt()
    };
    Ok(TemperatureFit {
        temperature: t,
        stderr,
        ssr: f,
        at_bound,
        flat,
    })
}

/// Energy conservation of the integrator in a static full-depth lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyDrift {
    /// Least-squares slope of the ensemble-mean relative energy (1/µs).
    pub slope_per_us: f64,
    /// Largest `|⟨E(t)⟩/⟨E(0)⟩ − 1|` seen.
    pub max_deviation: f64,
    /// Same slope for the modified energy
    /// `H̃ = H + h²/12 · V''v² − h²/24 · V'²/M` that velocity Verlet conserves
    /// to `O(h⁴)`; its bounded oscillation is small enough to expose
    /// secular drift.
    pub shadow_slope_per_us: f64,
    pub timestep: f64,
}

/// Integrate a Boltzmann ensemble at fixed depth for `duration` with the
/// timestep of `spec` and report the secular energy drift.
pub fn static_energy_drift(ensemble: &PhaseSpaceEnsemble, spec: &LatticeSpec, species: &IonSpecies, duration: f64) -> Result<EnergyDrift> {
    spec.validate(species)?;
    let dt = lattice_timestep(spec, species)?;
    if dt <= 0.0 {
        return Err(Error::invalid("depth", "static drift needs a nonzero depth"));
    }
    let steps = (duration / dt).round() as usize;
    let k = spec.wavevector();
    let u = spec.u0();
    let m = species.mass;
    let energy = |z: f64, v: f64| 0.5 * m * v * v + u * (k * z).sin().powi(2) - u.min(0.0);
    let shadow = |z: f64, v: f64| {
        let d1 = u * k * (2.0 * k * z).sin();
        let d2 = 2.0 * u * k * k * (2.0 * k * z).cos();
        energy(z, v) + dt * dt * (d2 * v * v / 12.0 - d1 * d1 / (24.0 * m))
    };
    let a0 = u * k / m;
    let mut mean = vec![0.0; steps + 1];
    let mut mean_shadow = vec![0.0; steps + 1];
    for s in &ensemble.samples {
        let (mut z, mut v) = (s.z, s.v);
        let mut a = -a0 * (2.0 * k * z).sin();
        mean[0] += s.weight * energy(z, v);
        mean_shadow[0] += s.weight * shadow(z, v);
        for i in 1..=steps {
            v += 0.5 * dt * a;
            z += dt * v;
            a = -a0 * (2.0 * k * z).sin();
            v += 0.5 * dt * a;
            mean[i] += s.weight * energy(z, v);
            mean_shadow[i] += s.weight * shadow(z, v);
        }
    }
    let rel: Vec<f64> = mean.iter().map(|e| e / mean[0] - 1.0).collect();
    let rel_shadow: Vec<f64> = mean_shadow.iter().map(|e| e / mean_shadow[0] - 1.0).collect();
    let ts: Vec<f64> = (0..=steps).map(|i| i as f64 * dt * 1e6).collect();
    Ok(EnergyDrift {
        slope_per_us: ls_slope(&ts, &rel),
        max_deviation: rel.iter().fold(0.0f64, |acc, r| acc.max(r.abs())),
        shadow_slope_per_us: ls_slope(&ts, &rel_shadow),
        timestep: dt,
    })
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - xm) * (b - ym);
        sxx += (a - xm) * (a - xm);
    }
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ca() -> IonSpecies {
        IonSpecies::calcium40()
    }

    fn small() -> EnsembleOptions {
        EnsembleOptions {
            n_samples: 20_000,
            span_periods: 8.0,
            seed: 5,
        }
    }

    #[test]
    fn lattice_frequency_values() {
        let s = ca();
        let nu = lattice_frequency(25e-3, &s, 866e-9).unwrap();
        let direct = (2.0 * 1.380649e-23 * 25e-3 / s.mass).sqrt() / 866e-9;
        assert!((nu - direct).abs() < 1e-6 * direct);
        assert!((nu / 1e6 - 3.72).abs() < 0.01, "{nu}");
        assert_eq!(lattice_frequency(0.0, &s, 866e-9).unwrap(), 0.0);
        let n4 = lattice_frequency(100e-3, &s, 866e-9).unwrap();
        assert!((n4 / nu - 2.0).abs() < 1e-12);
        assert!(lattice_frequency(-1.0, &s, 866e-9).is_err());
    }

    #[test]
    fn two_level_symmetry_without_p32() {
        let mut s = ca();
        s.relative_p32_line_strength = 0.0;
        let b = dipole_response(1e3, &LatticeSpec::blue(0.0), &s).unwrap();
        let r = dipole_response(1e3, &LatticeSpec::red(0.0), &s).unwrap();
        assert!((b.u0 + r.u0).abs() < 1e-12 * b.u0.abs());
        assert!((b.gamma_sc - r.gamma_sc).abs() < 1e-12 * b.gamma_sc);
        assert!(b.u0 > 0.0 && r.u0 < 0.0);
    }

    #[test]
    fn dipole_formula_matches_hand_evaluation() {
        let mut s = ca();
        s.relative_p32_line_strength = 0.0;
        let spec = LatticeSpec::blue(0.0);
        let d = dipole_response(2.0, &spec, &s).unwrap();
        let g = s.p12_linewidth;
        let u = 2.0 * HBAR * g * g / (8.0 * spec.detuning_p12);
        assert!((d.u0 * BOLTZMANN - u).abs() < 1e-12 * u);
        assert!((d.gamma_sc - g * u / (HBAR * spec.detuning_p12)).abs() < 1e-9 * d.gamma_sc);
    }

    #[test]
    fn p32_makes_blue_scatter_more_at_equal_depth() {
        let s = ca();
        let b = calibrated_response(&LatticeSpec::blue(24e-3), &s).unwrap();
        let r = calibrated_response(&LatticeSpec::red(24e-3), &s).unwrap();
        assert!((b.u0 - 24e-3).abs() < 1e-9 * 24e-3);
        assert!((r.u0 + 24e-3).abs() < 1e-9 * 24e-3);
        assert!(b.gamma_sc > r.gamma_sc);
    }

    #[test]
    fn calibration_round_trip() {
        let s = ca();
        for spec in [LatticeSpec::blue(24e-3), LatticeSpec::red(24e-3)] {
            let i = intensity_for_depth(&spec, &s).unwrap();
            let d = dipole_response(i, &spec, &s).unwrap();
            assert!((d.u0.abs() - 24e-3).abs() < 1e-9 * 24e-3);
        }
    }

    #[test]
    fn resonant_p32_rejected() {
        let s = ca();
        let mut spec = LatticeSpec::blue(1e-3);
        spec.detuning_p12 = s.p12_p32_splitting;
        assert!(dipole_response(1.0, &spec, &s).is_err());
        spec.detuning_p12 = 0.0;
        assert!(dipole_response(1.0, &spec, &s).is_err());
    }

    #[test]
    fn beam_factor_values() {
        assert_eq!(beam_intensity_factor(0.0, 37e-6).unwrap(), 1.0);
        assert!((beam_intensity_factor(37e-6, 37e-6).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        assert!((beam_intensity_factor(10.4e-6, 37e-6).unwrap() - 0.854).abs() < 1e-3);
        assert!(beam_intensity_factor(1e-6, 0.0).is_err());
    }

    #[test]
    fn initial_ensemble_statistics() {
        let s = ca();
        let t = 3.6e-3;
        let ens = sample_initial_ensemble(t, 100_000, 8.0, 0.0, &s, 866e-9, 9).unwrap();
        let var: f64 = ens.samples.iter().map(|p| p.weight * p.v * p.v).sum();
        let expect = BOLTZMANN * t / s.mass;
        assert!((var / expect - 1.0).abs() < 0.02, "{}", var / expect);
        let w: f64 = ens.samples.iter().map(|p| p.weight).sum();
        assert!((w - 1.0).abs() < 1e-9);
        // χ² over 20 bins; 1% critical value at 19 dof is 36.19.
        let span = 8.0 * 866e-9 / 2.0;
        let mut bins = [0usize; 20];
        for p in &ens.samples {
            bins[((p.z / span) * 20.0) as usize] += 1;
        }
        let e = ens.samples.len() as f64 / 20.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 36.19, "{chi2}");
    }

    #[test]
    fn ensemble_is_deterministic_and_shares_draws() {
        let s = ca();
        let a = sample_initial_ensemble(1e-3, 10_000, 4.0, 0.0, &s, 866e-9, 3).unwrap();
        let b = sample_initial_ensemble(1e-3, 10_000, 4.0, 0.0, &s, 866e-9, 3).unwrap();
        assert_eq!(a, b);
        let c = sample_initial_ensemble(4e-3, 10_000, 4.0, 0.0, &s, 866e-9, 3).unwrap();
        for (x, y) in a.samples.iter().zip(&c.samples) {
            assert_eq!(x.z, y.z);
            assert!((y.v - 2.0 * x.v).abs() <= 1e-12 * x.v.abs());
        }
        assert!(sample_initial_ensemble(1e-3, 10, 3.0, 0.0, &s, 866e-9, 3).is_err());
    }

    #[test]
    fn free_flight_without_field() {
        let s = ca();
        let ens = sample_initial_ensemble(3e-3, 1000, 8.0, 0.0, &s, 866e-9, 1).unwrap();
        let out = simulate_ramp_hold(&ens, &LatticeSpec::blue(0.0), &s).unwrap();
        for (a, b) in ens.samples.iter().zip(&out.samples) {
            assert_eq!(a.v, b.v);
            assert!((b.z - (a.z + a.v * 3e-6)).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&b.mean_intensity));
        }
        assert_eq!(pinning_probability(&out), 0.0);
        let p = scattering_probability(&out, &LatticeSpec::blue(0.0), &s).unwrap();
        assert_eq!(p.excitation, 0.0);
    }

    #[test]
    fn ion_at_rest_in_minimum_stays() {
        let s = ca();
        let spec = LatticeSpec::blue(24e-3);
        let ens = PhaseSpaceEnsemble {
            samples: vec![PhaseSample {
                z: 866e-9,
                v: 0.0,
                radial_offset: 0.0,
                weight: 1.0,
            }],
            temperature: 0.0,
            seed: 0,
        };
        let out = simulate_ramp_hold(&ens, &spec, &s).unwrap();
        let f = out.samples[0];
        assert!((f.z - 866e-9).abs() < 1e-9);
        assert!(f.mean_intensity < 1e-18);
        assert_eq!(pinning_probability(&out), 1.0);
    }

    #[test]
    fn timestep_limit() {
        let s = ca();
        let mut spec = LatticeSpec::blue(25e-3);
        let nu = lattice_frequency(25e-3, &s, spec.wavelength).unwrap();
        assert!((lattice_timestep(&spec, &s).unwrap() * nu - 0.01).abs() < 1e-12);
        spec.timestep = Some(1.0 / (40.0 * nu));
        let ens = sample_initial_ensemble(1e-3, 10, 4.0, 0.0, &s, 866e-9, 1).unwrap();
        assert!(matches!(simulate_ramp_hold(&ens, &spec, &s), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn static_drift_small_and_second_order() {
        let s = ca();
        let spec = LatticeSpec::blue(25e-3);
        let ens = sample_lattice_equilibrium(3.6e-3, 20_000, &spec, &s, 2).unwrap();
        let coarse = static_energy_drift(&ens, &spec, &s, 1e-6).unwrap();
        let nu = lattice_frequency(25e-3, &s, spec.wavelength).unwrap();
        let fine_spec = LatticeSpec {
            timestep: Some(1.0 / (200.0 * nu)),
            ..spec
        };
        let fine = static_energy_drift(&ens, &fine_spec, &s, 1e-6).unwrap();
        assert!(coarse.slope_per_us.abs() < 1e-6, "{coarse:?}");
        assert!(coarse.max_deviation < 1e-4);
        // Bounded error is second order; the secular part falls faster.
        assert!(coarse.max_deviation / fine.max_deviation > 3.5, "{coarse:?} {fine:?}");
        assert!(coarse.shadow_slope_per_us.abs() >= 4.0 * fine.shadow_slope_per_us.abs(), "{coarse:?} {fine:?}");
        assert!(coarse.shadow_slope_per_us.abs() < 1e-8);
    }

    #[test]
    fn pinning_limits_and_reference_point() {
        let s = ca();
        let opts = small();
        let pin = |t: f64, d: f64| {
            let ens = sample_initial_ensemble(t, opts.n_samples, 8.0, 0.0, &s, 866e-9, opts.seed).unwrap();
            pinning_probability(&simulate_ramp_hold(&ens, &LatticeSpec::blue(d), &s).unwrap())
        };
        assert_eq!(pin(3.6e-3, 0.0), 0.0);
        assert!(pin(3.6e-3, 10.0) > 0.999);
        let p24 = pin(3.6e-3, 24e-3);
        assert!(p24 >= 0.9, "{p24}");
        assert!(pin(3.6e-3, 12e-3) <= p24);
        assert!(pin(7.2e-3, 24e-3) <= p24);
    }

    #[test]
    fn delocalized_ratio_at_vanishing_depth() {
        let s = ca();
        let (b, r) = (LatticeSpec::blue(1e-6), LatticeSpec::red(1e-6));
        let gb = calibrated_response(&b, &s).unwrap().gamma_sc;
        let gr = calibrated_response(&r, &s).unwrap().gamma_sc;
        let pb = delocalized_probability(&b, &[0.0], &s).unwrap();
        let pr = delocalized_probability(&r, &[0.0], &s).unwrap();
        assert!((pr / pb - gr / gb).abs() < 1e-6);
        let opts = small();
        let curve = predict_scattering_curve(1e-3, &[1e-6], &r, &b, &[0.0], &s, &opts).unwrap();
        assert!((curve[0].p_blue / pb - 1.0).abs() < 0.02, "{curve:?} {pb}");
        assert!((curve[0].p_red / pr - 1.0).abs() < 0.02);
    }

    #[test]
    fn curve_ordering_and_reproducibility() {
        let s = ca();
        let opts = small();
        let depths = [0.0, 5e-3, 10e-3, 15e-3, 20e-3, 25e-3];
        let (r, b) = (LatticeSpec::red(0.0), LatticeSpec::blue(0.0));
        let curve = predict_scattering_curve(3.6e-3, &depths, &r, &b, &[0.0], &s, &opts).unwrap();
        for c in &curve {
            assert!(c.p_red >= c.p_blue, "{c:?}");
            assert!((0.0..=1.0).contains(&c.p_red) && (0.0..=1.0).contains(&c.pinning_blue));
        }
        assert!(curve[5].p_blue > 0.0);
        let again = predict_scattering_curve(3.6e-3, &depths, &r, &b, &[0.0], &s, &opts).unwrap();
        assert_eq!(curve, again);
        assert!(predict_scattering_curve(3.6e-3, &[2e-3, 1e-3], &r, &b, &[0.0], &s, &opts).is_err());
    }

    #[test]
    fn hot_ions_are_delocalized() {
        let s = ca();
        let opts = small();
        let (r, b) = (LatticeSpec::red(0.0), LatticeSpec::blue(0.0));
        let curve = predict_scattering_curve(1.0, &[10e-3, 25e-3], &r, &b, &[0.0], &s, &opts).unwrap();
        for c in &curve {
            let pb = delocalized_probability(&b.with_depth(c.depth), &[0.0], &s).unwrap();
            let pr = delocalized_probability(&r.with_depth(c.depth), &[0.0], &s).unwrap();
            assert!((c.p_blue / pb - 1.0).abs() < 0.03, "{c:?} {pb}");
            assert!((c.p_red / pr - 1.0).abs() < 0.03, "{c:?} {pr}");
        }
    }

    #[test]
    fn fit_recovers_temperature_with_shared_draws() {
        let s = ca();
        let opts = EnsembleOptions {
            n_samples: 4000,
            span_periods: 8.0,
            seed: 21,
        };
        let (r, b) = (LatticeSpec::red(0.0), LatticeSpec::blue(0.0));
        let depths = [12.5e-3, 25e-3];
        let curve = predict_scattering_curve(3.9e-3, &depths, &r, &b, &[0.0], &s, &opts).unwrap();
        let data = ScatteringData {
            red: curve.iter().map(|c| (c.depth, c.p_red)).collect(),
            blue: curve.iter().map(|c| (c.depth, c.p_blue)).collect(),
        };
        let fit = fit_temperature_from_scattering(&data, &r, &b, &[0.0], &s, &opts).unwrap();
        assert!((fit.temperature / 3.9e-3 - 1.0).abs() < 0.01, "{fit:?}");
        assert!(!fit.at_bound && !fit.flat);
    }

    #[test]
    fn fit_flags_delocalized_data() {
        let s = ca();
        let opts = EnsembleOptions {
            n_samples: 2000,
            span_periods: 8.0,
            seed: 4,
        };
        let (r, b) = (LatticeSpec::red(0.0), LatticeSpec::blue(0.0));
        let depths = [10e-3, 25e-3];
        let data = ScatteringData {
            red: depths.iter().map(|&d| (d, delocalized_probability(&r.with_depth(d), &[0.0], &s).unwrap())).collect(),
            blue: depths.iter().map(|&d| (d, delocalized_probability(&b.with_depth(d), &[0.0], &s).unwrap())).collect(),
        };
        let fit = fit_temperature_from_scattering(&data, &r, &b, &[0.0], &s, &opts).unwrap();
        assert!(fit.at_bound && fit.temperature > 0.5, "{fit:?}");
    }

    #[test]
    fn fit_needs_three_points() {
        let s = ca();
        let data = ScatteringData {
            red: vec![(25e-3, 0.1)],
            blue: vec![(25e-3, 0.05)],
        };
        let r = fit_temperature_from_scattering(&data, &LatticeSpec::red(0.0), &LatticeSpec::blue(0.0), &[0.0], &s, &small());
        assert!(matches!(r, Err(Error::InvalidParameter { .. })));
    }
}
