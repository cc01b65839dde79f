//! Render a noisy image at a known temperature and recover it.

use ionlattice::crystal::solve_for_trap;
use ionlattice::imaging::{synthesize_image, ImageParams};
use ionlattice::modes::analyze;
use ionlattice::thermometry::{thermometry_pipeline, PipelineOptions};
use ionlattice::units::{IonSpecies, TrapParameters};

fn main() -> ionlattice::error::Result<()> {
    let species = IonSpecies::calcium40();
    let trap = TrapParameters::from_khz(71.0, 350.0, 0.0);
    let crystal = solve_for_trap(8, &trap, 1)?;
    let spectrum = analyze(&crystal, trap.omega_z)?;
    for t in [1e-3, 3.6e-3, 10e-3] {
        let syn = synthesize_image(&crystal, &spectrum, &species, t, &ImageParams::default(), Some(7))?;
        let r = thermometry_pipeline(&syn.image, &trap, &species, &PipelineOptions::default())?;
        println!(
            "true {:.2} mK -> {:.2} +/- {:.2} mK from {} spots",
            t * 1e3,
            r.estimate.value * 1e3,
            r.estimate.stderr * 1e3,
            r.spots.len()
        );
    }
    Ok(())
}
