//! Equilibrium structures of the three reference crystals.

use ionlattice::crystal::{s4_symmetry_residual, solve_for_trap};
use ionlattice::units::{length_scale, IonSpecies, TrapParameters};

fn main() -> ionlattice::error::Result<()> {
    let species = IonSpecies::calcium40();
    for (n, axial, radial, split) in [(8, 71.0, 350.0, 0.0), (4, 87.0, 185.0, 0.05), (6, 105.0, 192.0, 0.05)] {
        let trap = TrapParameters::from_khz(axial, radial, split);
        let crystal = solve_for_trap(n, &trap, 1)?;
        let l = length_scale(&species, trap.omega_z);
        println!("{n} ions at ({axial}, {radial}) kHz: {}", crystal.structure);
        println!("  energy {:.6}, |grad| {:.1e}, S4 residual {:.1e}", crystal.energy, crystal.gradient_norm()?, s4_symmetry_residual(&crystal));
        for p in crystal.scaled(l * 1e6) {
            println!("  x {:>7.2}  y {:>7.2}  z {:>7.2} um", p[0], p[1], p[2]);
        }
    }
    Ok(())
}
