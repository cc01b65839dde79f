//! Image thermometry feeding the scattering curve of the 8-ion string.

use ionlattice::crystal::solve_for_trap;
use ionlattice::imaging::{synthesize_image, ImageParams};
use ionlattice::lattice::{predict_scattering_curve, EnsembleOptions, LatticeSpec, ScatteringPrediction};
use ionlattice::modes::analyze;
use ionlattice::thermometry::{thermometry_pipeline, PipelineOptions};
use ionlattice::units::{length_scale, IonSpecies, TrapParameters};

fn main() -> ionlattice::error::Result<()> {
    let species = IonSpecies::calcium40();
    let trap = TrapParameters::from_khz(71.0, 350.0, 0.0);
    let crystal = solve_for_trap(8, &trap, 1)?;
    let spectrum = analyze(&crystal, trap.omega_z)?;
    let syn = synthesize_image(&crystal, &spectrum, &species, 3.6e-3, &ImageParams::default(), Some(1))?;
    let t = thermometry_pipeline(&syn.image, &trap, &species, &PipelineOptions::default())?.estimate.value;
    println!("inferred temperature {:.2} mK", t * 1e3);

    let l = length_scale(&species, trap.omega_z);
    let offsets: Vec<f64> = crystal.radial_distances().iter().map(|r| r * l).collect();
    let depths: Vec<f64> = (0..=5).map(|i| 5e-3 * i as f64).collect();
    let opts = EnsembleOptions { n_samples: 20_000, ..EnsembleOptions::default() };
    let curve = predict_scattering_curve(t, &depths, &LatticeSpec::red(25e-3), &LatticeSpec::blue(25e-3), &offsets, &species, &opts)?;
    println!("{}", ScatteringPrediction::CSV_HEADER.join(","));
    for c in &curve {
        let row: Vec<String> = c.csv_row().iter().map(|v| format!("{v:.4}")).collect();
        println!("{}", row.join(","));
    }
    Ok(())
}
