//! Systematic error budget for an off-axis octahedron.

use ionlattice::crystal::solve_for_trap;
use ionlattice::micromotion::{excess_amplitude, micromotion_kinetic_temperature, systematic_error_report, BudgetOptions};
use ionlattice::modes::analyze;
use ionlattice::units::{IonSpecies, TrapParameters};

fn main() -> ionlattice::error::Result<()> {
    let species = IonSpecies::calcium40();
    let trap = TrapParameters::from_khz(105.0, 192.0, 0.05);
    let a = excess_amplitude(10.4e-6, trap.q_rad)?;
    let (_, t) = micromotion_kinetic_temperature(a, trap.omega_rf, &species)?;
    println!("10.4 um off axis: amplitude {:.2} um, {:.2} K", a * 1e6, t);

    let crystal = solve_for_trap(6, &trap, 1)?;
    let spectrum = analyze(&crystal, trap.omega_z)?;
    let report = systematic_error_report(&trap, &crystal, &spectrum, &species, &BudgetOptions::default())?;
    println!("effective axial q {:.3e}", report.effective_qz);
    for e in &report.relative_temp_errors {
        println!("  {:<34} {:.3e}  {}", e.label, e.value, e.note);
    }
    Ok(())
}
