//! Pinning and scattering of a thermal ensemble in red and blue lattices.

use ionlattice::lattice::{
    lattice_frequency, pinning_probability, sample_initial_ensemble, scattering_probability, simulate_ramp_hold,
    LatticeSpec,
};
use ionlattice::units::IonSpecies;

fn main() -> ionlattice::error::Result<()> {
    let species = IonSpecies::calcium40();
    let t = 3.6e-3;
    let ens = sample_initial_ensemble(t, 20_000, 8.0, 0.0, &species, species.lattice_wavelength, 1)?;
    for depth in [5e-3, 12.5e-3, 25e-3] {
        let nu = lattice_frequency(depth, &species, species.lattice_wavelength)?;
        print!("{:>5.1} mK ({:.2} MHz):", depth * 1e3, nu / 1e6);
        for spec in [LatticeSpec::red(depth), LatticeSpec::blue(depth)] {
            let out = simulate_ramp_hold(&ens, &spec, &species)?;
            let p = scattering_probability(&out, &spec, &species)?;
            let colour = if spec.is_blue() { "blue" } else { "red" };
            print!("  {colour}: pinned {:.3} p {:.4}", pinning_probability(&out), p.excitation);
        }
        println!();
    }
    Ok(())
}
