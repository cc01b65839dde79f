//! Photon-count statistics for a crystal of independent scatterers.

use ionlattice::stats::{monte_carlo_oracle, scatter_stats};

fn main() -> ionlattice::error::Result<()> {
    let s = scatter_stats(8, 0.1)?;
    for (k, pk) in s.distribution.iter().enumerate().take(4) {
        println!("P({k}) = {pk:.4}");
    }
    println!("at least one: {:.4}", s.p_at_least_one);
    println!("secondary fraction: {:.4}", s.secondary_fraction);
    let mc = monte_carlo_oracle(8, 0.1, 1_000_000, 1)?;
    println!("Monte Carlo: {:.4} +/- {:.4}", mc.secondary_fraction, mc.secondary_fraction_stderr);
    Ok(())
}
