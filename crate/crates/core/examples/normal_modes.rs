//! Mode frequencies and thermal-spread factors of a planar zigzag.

use ionlattice::crystal::solve_for_trap;
use ionlattice::modes::{analyze, gamma_factors, mode_frequencies};
use ionlattice::units::TrapParameters;

fn main() -> ionlattice::error::Result<()> {
    let trap = TrapParameters::from_khz(87.0, 185.0, 0.05);
    let crystal = solve_for_trap(4, &trap, 1)?;
    let spectrum = analyze(&crystal, trap.omega_z)?;
    let freqs = mode_frequencies(&spectrum, trap.omega_z)?;
    println!("{} modes, zero modes {:?}", spectrum.dim(), spectrum.zero_modes);
    for (p, w) in freqs.omega.iter().enumerate() {
        println!("  mode {p:>2}: lambda {:>8.4}  {:>7.2} kHz", spectrum.eigenvalues[p], w / (2e3 * std::f64::consts::PI));
    }
    let g = gamma_factors(&spectrum)?;
    for i in 0..crystal.n_ions {
        println!("  ion {i}: gamma_z {:.4}  gamma_rad {:.4}", g.gamma_z[i], g.gamma_rad[i]);
    }
    Ok(())
}
