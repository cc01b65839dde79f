//! Command-line front end. Every command writes JSON and/or CSV into the
//! output directory, each with a provenance sidecar; files written by a
//! failing run are removed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_config, RunConfig};
use crate::crystal::{s4_symmetry_residual, solve_for_trap, CrystalConfiguration};
use crate::error::{Error, Result};
use crate::imaging::{synthesize_image, write_image};
use crate::lattice::{delocalized_probability, lattice_frequency, predict_scattering_curve, ScatteringPrediction};
use crate::micromotion::{systematic_error_report, BudgetOptions};
use crate::modes::{analyze, gamma_factors, mode_frequencies};
use crate::output::{csv_string, sidecar_path, write_atomic, write_json, Provenance};
use crate::stats::{detection_yield, monte_carlo_oracle, scatter_stats};
use crate::thermometry::{thermometry_from_file, thermometry_pipeline, PipelineOptions};
use crate::units::length_scale;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "IONLATTICE_OUT";

#[derive(Debug, Parser)]
#[command(name = "ionlattice", version, about = "Ion Coulomb crystals in optical lattices")]
pub struct Cli {
    /// TOML configuration, or a provenance sidecar to rerun.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: $IONLATTICE_OUT or .]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Lattice depth (mK): the deepest point of a curve.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub depth_mk: Option<f64>,
    /// Temperature (mK) for synthesis, prediction or the error budget.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub temperature_mk: Option<f64>,
    /// Monte Carlo samples per ensemble.
    #[arg(long, global = true)]
    pub n_samples: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CrystalArgs {
    #[arg(long)]
    pub n_ions: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub omega_z_khz: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub omega_r_khz: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub radial_split: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CrystalPreset {
    /// 8 ions at (71, 350) kHz.
    String8,
    /// 4 ions at (87, 185) kHz with a 5% radial split.
    Zigzag4,
    /// 6 ions at (105, 192) kHz with a 5% radial split.
    Octahedron6,
}

impl CrystalPreset {
    /// `(n, ω_z kHz, ω_r kHz, split, temperature mK)`.
    pub fn parameters(self) -> (usize, f64, f64, f64, f64) {
        match self {
            CrystalPreset::String8 => (8, 71.0, 350.0, 0.0, 3.6),
            CrystalPreset::Zigzag4 => (4, 87.0, 185.0, 0.05, 3.5),
            CrystalPreset::Octahedron6 => (6, 105.0, 192.0, 0.05, 3.1),
        }
    }

    fn name(self) -> &'static str {
        match self {
            CrystalPreset::String8 => "string8",
            CrystalPreset::Zigzag4 => "zigzag4",
            CrystalPreset::Octahedron6 => "octahedron6",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Equilibrium positions and structure class.
    Equilibrium(CrystalArgs),
    /// Normal modes, frequencies and γ factors.
    Modes(CrystalArgs),
    /// Render a fluorescence image (16-bit PGM).
    SynthImage(CrystalArgs),
    /// Temperature from a fluorescence image.
    Thermometry {
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        crystal: CrystalArgs,
    },
    /// Red/blue scattering and pinning probabilities against depth.
    LatticePredict(CrystalArgs),
    /// Micromotion amplitudes and the thermometry error budget.
    Micromotion(CrystalArgs),
    /// Binomial photon statistics.
    Stats {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        p: Option<f64>,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Image → temperature → scattering curve for a reference crystal.
    ReproduceFig2 {
        #[arg(long, value_enum)]
        crystal: CrystalPreset,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Equilibrium(_) => "equilibrium",
            Command::Modes(_) => "modes",
            Command::SynthImage(_) => "synth-image",
            Command::Thermometry { .. } => "thermometry",
            Command::LatticePredict(_) => "lattice-predict",
            Command::Micromotion(_) => "micromotion",
            Command::Stats { .. } => "stats",
            Command::ReproduceFig2 { .. } => "reproduce-fig2",
        }
    }
}

/// Read a configuration file: TOML, or the `config` object of a
/// provenance sidecar.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(c) = map.get("config") {
            let config: RunConfig = serde_json::from_value(c.clone())?;
            config.validate()?;
            return Ok(config);
        }
    }
    parse_config(&text)
}

fn apply_crystal(config: &mut RunConfig, a: &CrystalArgs) {
    if let Some(n) = a.n_ions {
        config.crystal.n_ions = n;
    }
    if let Some(v) = a.omega_z_khz {
        config.trap.omega_z_khz = v;
    }
    if let Some(v) = a.omega_r_khz {
        config.trap.omega_r_khz = v;
    }
    if let Some(v) = a.radial_split {
        config.trap.radial_split = v;
    }
}

fn apply_preset(config: &mut RunConfig, preset: CrystalPreset) {
    let (n, z, r, s, t) = preset.parameters();
    config.crystal.n_ions = n;
    config.trap.omega_z_khz = z;
    config.trap.omega_r_khz = r;
    config.trap.radial_split = s;
    config.imaging.temperature_mk = t;
}

/// Effective configuration: file values, then command-line flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.output_dir = Some(o.clone());
    }
    if let Some(d) = cli.depth_mk {
        c.lattice.depth_mk = d;
    }
    if let Some(n) = cli.n_samples {
        c.monte_carlo.n_samples = n;
    }
    match &cli.command {
        Command::Equilibrium(a) | Command::Modes(a) | Command::LatticePredict(a) => apply_crystal(&mut c, a),
        Command::SynthImage(a) => apply_crystal(&mut c, a),
        Command::Micromotion(a) => apply_crystal(&mut c, a),
        Command::Thermometry { image, crystal } => {
            apply_crystal(&mut c, crystal);
            if let Some(n) = crystal.n_ions {
                c.thermometry.n_ions = Some(n);
            }
            if let Some(i) = image {
                c.thermometry.image = Some(i.clone());
            }
        }
        Command::Stats { n, p, trials } => {
            if let Some(n) = n {
                c.stats.n_ions = *n;
            }
            if let Some(p) = p {
                c.stats.p = *p;
            }
            if let Some(t) = trials {
                c.monte_carlo.trials = *t;
            }
        }
        Command::ReproduceFig2 { crystal } => apply_preset(&mut c, *crystal),
    }
    if let Some(t) = cli.temperature_mk {
        match &cli.command {
            Command::SynthImage(_) | Command::ReproduceFig2 { .. } => c.imaging.temperature_mk = t,
            Command::LatticePredict(_) => c.lattice.temperature_mk = t,
            Command::Micromotion(_) => c.micromotion.temperature_mk = t,
            _ => {}
        }
    }
    c.validate()?;
    Ok(c)
}

fn output_dir(config: &RunConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Tracks written files so a failed run can remove them.
struct Outputs {
    dir: PathBuf,
    provenance: Provenance,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, path: PathBuf) -> Result<()> {
        let mut prov = self.provenance.clone();
        prov.outputs = vec![path.file_name().unwrap_or_default().to_string_lossy().into_owned()];
        let side = sidecar_path(&path);
        self.written.push(side.clone());
        write_json(&side, &prov)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(name);
        self.written.push(p.clone());
        write_json(&p, value)?;
        self.record(p.clone())?;
        Ok(p)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<PathBuf> {
        let p = self.path(name);
        self.written.push(p.clone());
        write_atomic(&p, csv_string(header, rows).as_bytes())?;
        self.record(p.clone())?;
        Ok(p)
    }

    fn cleanup(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

fn solve(config: &RunConfig) -> Result<CrystalConfiguration> {
    solve_for_trap(config.crystal.n_ions, &config.trap_parameters(), config.seed).map_err(|e| e.in_stage("equilibrium"))
}

fn radial_offsets(config: &RunConfig, crystal: &CrystalConfiguration) -> Vec<f64> {
    let l = length_scale(&config.species(), config.trap.omega_z_khz * 2e3 * std::f64::consts::PI);
    crystal.radial_distances().iter().map(|r| r * l).collect()
}

fn scattering_curve(
    config: &RunConfig,
    temperature: f64,
    offsets: &[f64],
) -> Result<(Vec<ScatteringPrediction>, Vec<[f64; 3]>)> {
    let species = config.species();
    let (red, blue) = (config.lattice_spec(false), config.lattice_spec(true));
    let depths = config.depth_grid();
    let curve = predict_scattering_curve(temperature, &depths, &red, &blue, offsets, &species, &config.ensemble_options())
        .map_err(|e| e.in_stage("lattice_predict"))?;
    let deloc = depths
        .iter()
        .map(|&d| {
            Ok([
                d * 1e3,
                delocalized_probability(&red.with_depth(d), offsets, &species)?,
                delocalized_probability(&blue.with_depth(d), offsets, &species)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((curve, deloc))
}

fn curve_rows(curve: &[ScatteringPrediction]) -> Vec<Vec<f64>> {
    curve.iter().map(|c| c.csv_row()).collect()
}

fn run_command(command: &Command, config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let species = config.species();
    let trap = config.trap_parameters();
    match command {
        Command::Equilibrium(_) => {
            let c = solve(config)?;
            let l = length_scale(&species, trap.omega_z);
            let positions_um: Vec<[f64; 3]> = c.scaled(l * 1e6);
            out.json(
                "equilibrium.json",
                &json!({
                    "n_ions": c.n_ions,
                    "structure": c.structure,
                    "length_scale_um": l * 1e6,
                    "energy": c.energy,
                    "positions": c.positions,
                    "positions_um": positions_um,
                    "radial_distances_um": c.radial_distances().iter().map(|r| r * l * 1e6).collect::<Vec<_>>(),
                    "gradient_norm": c.gradient_norm()?,
                    "s4_residual": s4_symmetry_residual(&c),
                }),
            )?;
        }
        Command::Modes(_) => {
            let c = solve(config)?;
            let spec = analyze(&c, trap.omega_z).map_err(|e| e.in_stage("normal_modes"))?;
            let freqs = mode_frequencies(&spec, trap.omega_z)?;
            let gammas = gamma_factors(&spec)?;
            let rows: Vec<Vec<f64>> = spec
                .eigenvalues
                .iter()
                .zip(&freqs.omega)
                .enumerate()
                .map(|(p, (l, w))| vec![p as f64, *l, w / (2e3 * std::f64::consts::PI)])
                .collect();
            out.csv("modes.csv", &["mode", "lambda", "frequency_khz"], &rows)?;
            out.json(
                "modes.json",
                &json!({
                    "structure": c.structure,
                    "spectrum": spec,
                    "frequencies_khz": freqs.omega.iter().map(|w| w / (2e3 * std::f64::consts::PI)).collect::<Vec<_>>(),
                    "gammas": gammas,
                    "row_completeness_error": spec.row_completeness_error(),
                }),
            )?;
        }
        Command::SynthImage(_) => {
            let c = solve(config)?;
            let spec = analyze(&c, trap.omega_z).map_err(|e| e.in_stage("normal_modes"))?;
            let noise = config.imaging.noise.then_some(config.seed);
            let t = config.imaging.temperature_mk * 1e-3;
            let syn = synthesize_image(&c, &spec, &species, t, &config.image_params(), noise)?;
            let p = out.path("image.pgm");
            out.written.push(p.clone());
            write_image(&syn.image, &p)?;
            out.record(p)?;
            out.json(
                "synth.json",
                &json!({
                    "temperature_mk": config.imaging.temperature_mk,
                    "structure": c.structure,
                    "spots": syn.spots,
                    "overlapping": syn.overlapping,
                }),
            )?;
        }
        Command::Thermometry { .. } => {
            let path = config.thermometry.image.as_ref().ok_or_else(|| {
                Error::invalid("thermometry.image", "required: pass --image PATH or set [thermometry] image")
            })?;
            let opts = PipelineOptions {
                n_ions: config.thermometry.n_ions,
                ..PipelineOptions::default()
            };
            let r = thermometry_from_file(path, &trap, &species, &opts)?;
            out.json("thermometry.json", &r)?;
        }
        Command::LatticePredict(_) => {
            let c = solve(config)?;
            let offsets = radial_offsets(config, &c);
            let t = config.lattice.temperature_mk * 1e-3;
            let (curve, deloc) = scattering_curve(config, t, &offsets)?;
            out.csv("lattice_curve.csv", &ScatteringPrediction::CSV_HEADER, &curve_rows(&curve))?;
            out.json(
                "lattice_predict.json",
                &json!({
                    "temperature_mk": config.lattice.temperature_mk,
                    "radial_offsets_um": offsets.iter().map(|r| r * 1e6).collect::<Vec<_>>(),
                    "lattice_frequency_mhz": lattice_frequency(config.lattice.depth_mk * 1e-3, &species, config.lattice.wavelength_nm * 1e-9)? / 1e6,
                    "curve": curve,
                    "delocalized": deloc,
                }),
            )?;
        }
        Command::Micromotion(_) => {
            let c = solve(config)?;
            let spec = analyze(&c, trap.omega_z).map_err(|e| e.in_stage("normal_modes"))?;
            let opts = BudgetOptions {
                temperature: config.micromotion.temperature_mk * 1e-3,
                mode_shift: config.micromotion.mode_shift,
            };
            let r = systematic_error_report(&trap, &c, &spec, &species, &opts)?;
            out.json("micromotion.json", &r)?;
        }
        Command::Stats { .. } => {
            let (n, p) = (config.stats.n_ions, config.stats.p);
            let s = scatter_stats(n, p)?;
            let mc = monte_carlo_oracle(n, p, config.monte_carlo.trials, config.seed)?;
            out.json(
                "stats.json",
                &json!({
                    "n_ions": n,
                    "p": p,
                    "distribution": s.distribution,
                    "secondary_fraction": s.secondary_fraction,
                    "p_at_least_one": s.p_at_least_one,
                    "detection_yield": detection_yield(p, &species)?,
                    "monte_carlo": mc,
                }),
            )?;
        }
        Command::ReproduceFig2 { crystal } => {
            let c = solve(config)?;
            let spec = analyze(&c, trap.omega_z).map_err(|e| e.in_stage("normal_modes"))?;
            let t_true = config.imaging.temperature_mk * 1e-3;
            let syn = synthesize_image(&c, &spec, &species, t_true, &config.image_params(), Some(config.seed))
                .map_err(|e| e.in_stage("synth_image"))?;
            let thermo = thermometry_pipeline(&syn.image, &trap, &species, &PipelineOptions {
                n_ions: Some(c.n_ions),
                ..PipelineOptions::default()
            })?;
            let t = thermo.estimate.value;
            let offsets = radial_offsets(config, &c);
            let (curve, deloc) = scattering_curve(config, t, &offsets)?;
            let name = crystal.name();
            out.csv(&format!("fig2_{name}.csv"), &ScatteringPrediction::CSV_HEADER, &curve_rows(&curve))?;
            out.json(
                &format!("fig2_{name}.json"),
                &json!({
                    "crystal": name,
                    "structure": c.structure,
                    "image_temperature_mk": config.imaging.temperature_mk,
                    "inferred_temperature_mk": t * 1e3,
                    "inferred_temperature_stderr_mk": thermo.estimate.stderr * 1e3,
                    "radial_offsets_um": offsets.iter().map(|r| r * 1e6).collect::<Vec<_>>(),
                    "curve": curve,
                    "delocalized": deloc,
                }),
            )?;
        }
    }
    Ok(())
}

/// Exit code for a result: 0 success, 1 invalid input, 2 numerical failure.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_numerical() => 2,
        Err(_) => 1,
    }
}

/// Execute a parsed command line.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let config = effective_config(cli)?;
    let dir = output_dir(&config);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let argv: Vec<String> = std::env::args().collect();
    let mut prov = Provenance::new(cli.command.name(), config.seed, serde_json::to_value(&config)?);
    prov.command = format!("{} ({})", cli.command.name(), argv.join(" "));
    let mut out = Outputs {
        dir,
        provenance: prov,
        written: Vec::new(),
    };
    match run_command(&cli.command, &config, &mut out) {
        Ok(()) => Ok(out.written),
        Err(e) => {
            out.cleanup();
            Err(e)
        }
    }
}

/// Parse `args`, run, report errors on stderr and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = execute(&cli).map(|written| {
        for p in written.iter().filter(|p| !p.to_string_lossy().ends_with(".provenance.json")) {
            println!("{}", p.display());
        }
    });
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("ionlattice").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Ok(())), 0);
        assert_eq!(exit_code(&Err(Error::invalid("x", "bad"))), 1);
        assert_eq!(exit_code(&Err(Error::NonConvergence("stuck".into()))), 2);
        assert_eq!(exit_code(&Err(Error::BelowResolution.in_stage("fit"))), 2);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\n[lattice]\ndepth_mk = 10.0\ntemperature_mk = 2.0\n").unwrap();
        let p = path.to_str().unwrap();
        let c = effective_config(&parse(&["--config", p, "lattice-predict"])).unwrap();
        assert_eq!((c.seed, c.lattice.depth_mk, c.lattice.temperature_mk), (4, 10.0, 2.0));
        let c = effective_config(&parse(&["--config", p, "--seed", "7", "--depth-mk", "20", "--temperature-mk", "5", "lattice-predict"])).unwrap();
        assert_eq!((c.seed, c.lattice.depth_mk, c.lattice.temperature_mk), (7, 20.0, 5.0));
    }

    #[test]
    fn temperature_flag_targets_command() {
        let c = effective_config(&parse(&["--temperature-mk", "1.5", "synth-image"])).unwrap();
        assert_eq!(c.imaging.temperature_mk, 1.5);
        assert_eq!(c.lattice.temperature_mk, RunConfig::default().lattice.temperature_mk);
        let c = effective_config(&parse(&["--temperature-mk", "1.5", "micromotion"])).unwrap();
        assert_eq!(c.micromotion.temperature_mk, 1.5);
    }

    #[test]
    fn presets_set_trap_and_temperature() {
        let c = effective_config(&parse(&["reproduce-fig2", "--crystal", "octahedron6"])).unwrap();
        assert_eq!(c.crystal.n_ions, 6);
        assert_eq!((c.trap.omega_z_khz, c.trap.omega_r_khz, c.trap.radial_split), (105.0, 192.0, 0.05));
        assert_eq!(c.imaging.temperature_mk, 3.1);
    }

    #[test]
    fn provenance_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.seed = 11;
        config.stats.p = 0.25;
        let prov = Provenance::new("stats", 11, serde_json::to_value(&config).unwrap());
        let path = dir.path().join("x.json.provenance.json");
        write_json(&path, &prov).unwrap();
        assert_eq!(load_config(&path).unwrap(), config);
    }
}
