//! Binomial photon statistics linking the per-ion excitation probability to
//! crystal-level signals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};

use crate::error::{Error, Result};
use crate::units::IonSpecies;

/// Below this probability the secondary fraction is evaluated from its
/// series expansion.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// Trials per independently seeded Monte Carlo block.
pub const MC_BLOCK: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterStats {
    pub n_ions: usize,
    pub p: f64,
    /// `P(N_p = k)` for `k = 0..=n_ions`.
    pub distribution: Vec<f64>,
    pub secondary_fraction: f64,
    pub p_at_least_one: f64,
}

fn check(n: usize, p: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("n_ions", "must be >= 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p", format!("probability out of [0,1]: {p}")));
    }
    Ok(())
}

/// Binomial probabilities of `0..=n` photons.
pub fn photon_count_distribution(n: usize, p: f64) -> Result<Vec<f64>> {
    check(n, p)?;
    let b = Binomial::new(p, n as u64).map_err(|e| Error::invalid("p", e.to_string()))?;
    Ok((0..=n as u64).map(|k| b.pmf(k)).collect())
}

/// `1 − (1−p)^n`.
pub fn p_at_least_one(n: usize, p: f64) -> Result<f64> {
    check(n, p)?;
    Ok(-(n as f64 * (-p).ln_1p()).exp_m1())
}

/// Share of the signal carried by photons after the first in a sequence,
/// `f = 1 − (1 − (1−p)^n)/(n p)`.
pub fn secondary_fraction(n: usize, p: f64) -> Result<f64> {
    check(n, p)?;
    let nf = n as f64;
    if p < SERIES_THRESHOLD {
        return Ok((nf - 1.0) * p / 2.0);
    }
    Ok(1.0 - p_at_least_one(n, p)? / (nf * p))
}

pub fn scatter_stats(n: usize, p: f64) -> Result<ScatterStats> {
    Ok(ScatterStats {
        n_ions: n,
        p,
        distribution: photon_count_distribution(n, p)?,
        secondary_fraction: secondary_fraction(n, p)?,
        p_at_least_one: p_at_least_one(n, p)?,
    })
}

/// Expected detected photons per sequence and ion.
pub fn detection_yield(p_excite: f64, species: &IonSpecies) -> Result<f64> {
    check(1, p_excite)?;
    Ok(p_excite * species.branch_to_s * species.detector_efficiency * species.pump_efficiency)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloStats {
    pub trials: u64,
    pub distribution: Vec<f64>,
    pub secondary_fraction: f64,
    /// Delta-method standard error of the ratio estimator.
    pub secondary_fraction_stderr: f64,
}

/// Seeded simulation of `trials` sequences of `n` independent ions.
///
/// Trials are split into blocks of [`MC_BLOCK`], each drawing from its own
/// stream of the seed, so results do not depend on the worker count.
pub fn monte_carlo_oracle(n: usize, p: f64, trials: u64, seed: u64) -> Result<MonteCarloStats> {
    check(n, p)?;
    if trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let blocks = trials.div_ceil(MC_BLOCK);
    let counts = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let len = MC_BLOCK.min(trials - b * MC_BLOCK);
            let mut hist = vec![0u64; n + 1];
            for _ in 0..len {
                let k = (0..n).filter(|_| rng.gen::<f64>() < p).count();
                hist[k] += 1;
            }
            hist
        })
        .reduce(
            || vec![0u64; n + 1],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let t = trials as f64;
    let distribution: Vec<f64> = counts.iter().map(|&c| c as f64 / t).collect();
    // f̂ = Σ max(k−1, 0) / Σ k, with per-trial pairs (a_i, b_i) = (max(k−1,0), k).
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, &c) in counts.iter().enumerate() {
        let (a, b, c) = (k.saturating_sub(1) as f64, k as f64, c as f64);
        sa += c * a;
        sb += c * b;
        saa += c * a * a;
        sbb += c * b * b;
        sab += c * a * b;
    }
    if sb == 0.0 {
        return Ok(MonteCarloStats {
            trials,
            distribution,
            secondary_fraction: 0.0,
            secondary_fraction_stderr: 0.0,
        });
    }
    let (ma, mb) = (sa / t, sb / t);
    let f = ma / mb;
    let (va, vb, cab) = (saa / t - ma * ma, sbb / t - mb * mb, sab / t - ma * mb);
    let var = (va - 2.0 * f * cab + f * f * vb) / (mb * mb * t);
    Ok(MonteCarloStats {
        trials,
        distribution,
        secondary_fraction: f,
        secondary_fraction_stderr: var.max(0.0).sqrt(),
    })
}
