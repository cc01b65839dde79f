//! Run configuration: TOML sections with defaults, validated before any
//! command runs. Errors report the line of the offending key.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageParams;
use crate::lattice::{EnsembleOptions, LatticeSpec};
use crate::units::{khz, mhz, thz, IonSpecies, TrapParameters, AMU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapSection {
    pub omega_z_khz: f64,
    pub omega_r_khz: f64,
    /// Relative lowering of the y radial frequency.
    pub radial_split: f64,
    pub rf_mhz: f64,
    pub q_rad: f64,
    pub q_z: f64,
}

impl Default for TrapSection {
    fn default() -> Self {
        Self {
            omega_z_khz: 71.0,
            omega_r_khz: 350.0,
            radial_split: 0.0,
            rf_mhz: TrapParameters::DEFAULT_RF_MHZ,
            q_rad: TrapParameters::DEFAULT_Q_RAD,
            q_z: TrapParameters::DEFAULT_Q_Z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrystalSection {
    pub n_ions: usize,
}

impl Default for CrystalSection {
    fn default() -> Self {
        Self { n_ions: 8 }
    }
}

/// Overrides of the ⁴⁰Ca⁺ defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeciesSection {
    pub mass_amu: Option<f64>,
    pub relative_p32_line_strength: Option<f64>,
    pub pump_efficiency: Option<f64>,
    pub detector_efficiency: Option<f64>,
    pub branch_to_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeSection {
    pub wavelength_nm: f64,
    /// Magnitude of the red and blue detunings from P1/2.
    pub detuning_thz: f64,
    /// Deepest on-axis depth of a curve, or the depth of a single run.
    pub depth_mk: f64,
    /// Points on the depth grid `0..=depth_mk`.
    pub depth_points: usize,
    pub waist_um: f64,
    pub ramp_us: f64,
    pub hold_us: f64,
    pub timestep_ns: Option<f64>,
    /// Initial temperature for predictions.
    pub temperature_mk: f64,
}

impl Default for LatticeSection {
    fn default() -> Self {
        Self {
            wavelength_nm: 866.0,
            detuning_thz: LatticeSpec::DEFAULT_DETUNING_THZ,
            depth_mk: 25.0,
            depth_points: 11,
            waist_um: 37.0,
            ramp_us: 2.0,
            hold_us: 1.0,
            timestep_ns: None,
            temperature_mk: 3.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub n_samples: usize,
    pub span_periods: f64,
    pub trials: u64,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            span_periods: 8.0,
            trials: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImagingSection {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_um: f64,
    pub psf_ax_um: f64,
    pub psf_rad_um: f64,
    pub photons_per_ion: f64,
    pub background: f64,
    /// Temperature of synthetic images.
    pub temperature_mk: f64,
    /// Add Poisson noise to synthetic images.
    pub noise: bool,
}

impl Default for ImagingSection {
    fn default() -> Self {
        let p = ImageParams::default();
        Self {
            width: p.width,
            height: p.height,
            pixel_pitch_um: p.pixel_pitch * 1e6,
            psf_ax_um: p.psf_sigma_ax * 1e6,
            psf_rad_um: p.psf_sigma_rad * 1e6,
            photons_per_ion: p.photons_per_ion,
            background: p.background,
            temperature_mk: 3.6,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThermometrySection {
    pub image: Option<PathBuf>,
    /// Ion count when it differs from the number of resolved spots.
    pub n_ions: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSection {
    pub n_ions: usize,
    pub p: f64,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self { n_ions: 8, p: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicromotionSection {
    pub temperature_mk: f64,
    pub mode_shift: f64,
}

impl Default for MicromotionSection {
    fn default() -> Self {
        Self {
            temperature_mk: 3.6,
            mode_shift: crate::micromotion::DEFAULT_MODE_SHIFT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub trap: TrapSection,
    pub crystal: CrystalSection,
    pub species: SpeciesSection,
    pub lattice: LatticeSection,
    pub monte_carlo: MonteCarloSection,
    pub imaging: ImagingSection,
    pub thermometry: ThermometrySection,
    pub stats: StatsSection,
    pub micromotion: MicromotionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: None,
            trap: TrapSection::default(),
            crystal: CrystalSection::default(),
            species: SpeciesSection::default(),
            lattice: LatticeSection::default(),
            monte_carlo: MonteCarloSection::default(),
            imaging: ImagingSection::default(),
            thermometry: ThermometrySection::default(),
            stats: StatsSection::default(),
            micromotion: MicromotionSection::default(),
        }
    }
}

/// 1-based line of byte offset `pos`.
fn line_at(text: &str, pos: usize) -> usize {
    text[..pos.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line where `section.key` is assigned, if present.
fn line_of_key(text: &str, path: &str) -> Option<usize> {
    let (section, key) = path.rsplit_once('.').unwrap_or(("", path));
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            if current == section && k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Parse and validate a TOML configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
        line: e.span().map(|s| line_at(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    config.validate().map_err(|e| match e {
        Error::InvalidParameter { name, reason } => Error::Config {
            line: line_of_key(text, &name).unwrap_or(0),
            message: format!("`{name}` {reason}"),
        },
        other => other,
    })?;
    Ok(config)
}

impl RunConfig {
    /// Check every physical value; errors name the key as `section.key`.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be > 0, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be >= 0, got {v}")))
            }
        };
        let t = &self.trap;
        positive("trap.omega_z_khz", t.omega_z_khz)?;
        positive("trap.omega_r_khz", t.omega_r_khz)?;
        positive("trap.rf_mhz", t.rf_mhz)?;
        if !(0.0..1.0).contains(&t.radial_split) {
            return Err(Error::invalid("trap.radial_split", format!("must lie in [0, 1), got {}", t.radial_split)));
        }
        for (name, q) in [("trap.q_rad", t.q_rad), ("trap.q_z", t.q_z)] {
            if !(0.0..0.9).contains(&q) {
                return Err(Error::invalid(name, format!("must lie in [0, 0.9), got {q}")));
            }
        }
        self.trap_parameters().validate().map_err(|e| match e {
            Error::InvalidParameter { reason, .. } => Error::invalid("trap.omega_r_khz", reason),
            other => other,
        })?;
        if self.crystal.n_ions == 0 {
            return Err(Error::invalid("crystal.n_ions", "must be >= 1"));
        }
        let s = &self.species;
        if let Some(m) = s.mass_amu {
            positive("species.mass_amu", m)?;
        }
        for (name, v) in [
            ("species.pump_efficiency", s.pump_efficiency),
            ("species.detector_efficiency", s.detector_efficiency),
            ("species.branch_to_s", s.branch_to_s),
        ] {
            if let Some(p) = v {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::invalid(name, format!("probability out of [0,1]: {p}")));
                }
            }
        }
        if let Some(r) = s.relative_p32_line_strength {
            non_negative("species.relative_p32_line_strength", r)?;
        }
        let l = &self.lattice;
        positive("lattice.wavelength_nm", l.wavelength_nm)?;
        positive("lattice.detuning_thz", l.detuning_thz)?;
        non_negative("lattice.depth_mk", l.depth_mk)?;
        positive("lattice.waist_um", l.waist_um)?;
        non_negative("lattice.ramp_us", l.ramp_us)?;
        non_negative("lattice.hold_us", l.hold_us)?;
        positive("lattice.temperature_mk", l.temperature_mk)?;
        if let Some(dt) = l.timestep_ns {
            positive("lattice.timestep_ns", dt)?;
        }
        if l.depth_points == 0 {
            return Err(Error::invalid("lattice.depth_points", "must be >= 1"));
        }
        let species = self.species();
        for spec in [self.lattice_spec(false), self.lattice_spec(true)] {
            spec.validate(&species).map_err(|e| match e {
                Error::InvalidParameter { reason, .. } => Error::invalid("lattice.detuning_thz", reason),
                other => other,
            })?;
        }
        let mc = &self.monte_carlo;
        if mc.n_samples == 0 {
            return Err(Error::invalid("monte_carlo.n_samples", "must be >= 1"));
        }
        if !(mc.span_periods >= 4.0) {
            return Err(Error::invalid("monte_carlo.span_periods", "must be >= 4"));
        }
        if mc.trials == 0 {
            return Err(Error::invalid("monte_carlo.trials", "must be >= 1"));
        }
        let im = &self.imaging;
        if im.width < 8 || im.height < 8 {
            return Err(Error::invalid("imaging.width", "image must be at least 8x8 pixels"));
        }
        positive("imaging.pixel_pitch_um", im.pixel_pitch_um)?;
        positive("imaging.psf_ax_um", im.psf_ax_um)?;
        positive("imaging.psf_rad_um", im.psf_rad_um)?;
        non_negative("imaging.photons_per_ion", im.photons_per_ion)?;
        non_negative("imaging.background", im.background)?;
        non_negative("imaging.temperature_mk", im.temperature_mk)?;
        if self.thermometry.n_ions == Some(0) {
            return Err(Error::invalid("thermometry.n_ions", "must be >= 1"));
        }
        if self.stats.n_ions == 0 {
            return Err(Error::invalid("stats.n_ions", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.stats.p) {
            return Err(Error::invalid("stats.p", format!("probability out of [0,1]: {}", self.stats.p)));
        }
        non_negative("micromotion.temperature_mk", self.micromotion.temperature_mk)?;
        non_negative("micromotion.mode_shift", self.micromotion.mode_shift)?;
        Ok(())
    }

    pub fn trap_parameters(&self) -> TrapParameters {
        let t = &self.trap;
        TrapParameters {
            omega_z: khz(t.omega_z_khz),
            omega_x: khz(t.omega_r_khz),
            omega_y: khz(t.omega_r_khz) * (1.0 - t.radial_split),
            omega_rf: mhz(t.rf_mhz),
            q_rad: t.q_rad,
            q_z: t.q_z,
        }
    }

    pub fn species(&self) -> IonSpecies {
        let mut s = IonSpecies::calcium40();
        let o = &self.species;
        if let Some(m) = o.mass_amu {
            s.mass = m * AMU;
        }
        if let Some(r) = o.relative_p32_line_strength {
            s.relative_p32_line_strength = r;
        }
        if let Some(p) = o.pump_efficiency {
            s.pump_efficiency = p;
        }
        if let Some(p) = o.detector_efficiency {
            s.detector_efficiency = p;
        }
        if let Some(p) = o.branch_to_s {
            s.branch_to_s = p;
        }
        s.lattice_wavelength = self.lattice.wavelength_nm * 1e-9;
        s
    }

    pub fn lattice_spec(&self, blue: bool) -> LatticeSpec {
        let l = &self.lattice;
        let d = thz(l.detuning_thz);
        LatticeSpec {
            wavelength: l.wavelength_nm * 1e-9,
            detuning_p12: if blue { d } else { -d },
            depth: l.depth_mk * 1e-3,
            waist: l.waist_um * 1e-6,
            ramp_time: l.ramp_us * 1e-6,
            hold_time: l.hold_us * 1e-6,
            timestep: l.timestep_ns.map(|t| t * 1e-9),
        }
    }

    /// Evenly spaced depths `0..=depth_mk` (K).
    pub fn depth_grid(&self) -> Vec<f64> {
        let l = &self.lattice;
        if l.depth_points == 1 {
            return vec![l.depth_mk * 1e-3];
        }
        (0..l.depth_points)
            .map(|i| l.depth_mk * 1e-3 * i as f64 / (l.depth_points - 1) as f64)
            .collect()
    }

    pub fn ensemble_options(&self) -> EnsembleOptions {
        EnsembleOptions {
            n_samples: self.monte_carlo.n_samples,
            span_periods: self.monte_carlo.span_periods,
            seed: self.seed,
        }
    }

    pub fn image_params(&self) -> ImageParams {
        let im = &self.imaging;
        ImageParams {
            width: im.width,
            height: im.height,
            pixel_pitch: im.pixel_pitch_um * 1e-6,
            psf_sigma_ax: im.psf_ax_um * 1e-6,
            psf_sigma_rad: im.psf_rad_um * 1e-6,
            photons_per_ion: im.photons_per_ion,
            background: im.background,
            offset: [0.0, 0.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.lattice.wavelength_nm, 866.0);
        assert_eq!(c.lattice.ramp_us, 2.0);
        let s = c.species();
        assert_eq!(s, IonSpecies::calcium40());
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let c = parse_config("[crystal]\nn_ions = 6\n\n[trap]\nomega_z_khz = 105\nomega_r_khz = 192\nradial_split = 0.05\n").unwrap();
        assert_eq!(c.crystal.n_ions, 6);
        assert_eq!(c.lattice, LatticeSection::default());
        let t = c.trap_parameters();
        assert!((t.radial_split() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn negative_frequency_names_key_and_line() {
        let text = "seed = 3\n[trap]\nomega_r_khz = 300\nomega_z_khz = -5\n";
        match parse_config(text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("omega_z_khz"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        match parse_config("[lattice]\ndepth_mk = 20\ndepth_mK = 21\n") {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("depth_mK"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("[nonsense]\n"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn type_mismatch_rejected() {
        match parse_config("[crystal]\nn_ions = \"eight\"\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn depth_grid_spans_range() {
        let c = RunConfig::default();
        let g = c.depth_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert!((g[10] - 25e-3).abs() < 1e-15);
        assert!((g[1] - 2.5e-3).abs() < 1e-15);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.lattice.timestep_ns = Some(1.5);
        c.thermometry.image = Some("a.pgm".into());
        let text = toml::to_string(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }
}
