//! Equilibrium configurations of N ions in an anisotropic harmonic
//! pseudopotential with Coulomb repulsion.
//!
//! Everything here works in the dimensionless units of [`crate::units`]:
//!
//! ```text
//! V = Σ_m ½(α x_m² + β y_m² + z_m²) + Σ_{m<n} 1/|r_m − r_n|
//! ```
//!
//! Flat coordinate vectors use the block layout `[x_1..x_N, y_1..y_N,
//! z_1..z_N]`, the same ordering the normal-mode eigenvectors use.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::jacobi_eigen;
use crate::optimize::{levenberg_marquardt, LmOptions};
use crate::units::{length_scale, IonSpecies, TrapParameters};

/// Smallest pair separation accepted before the input counts as coincident.
const MIN_SEPARATION: f64 = 1e-12;

/// Shape class of an equilibrium crystal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Linear,
    PlanarZigzag,
    ThreeDimensional,
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Structure::Linear => "linear",
            Structure::PlanarZigzag => "planar_zigzag",
            Structure::ThreeDimensional => "three_dimensional",
        })
    }
}

/// An equilibrium (or candidate) crystal in dimensionless units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalConfiguration {
    pub n_ions: usize,
    /// Per-ion `[x, y, z]` in units of ℓ.
    pub positions: Vec<[f64; 3]>,
    pub alpha: f64,
    pub beta: f64,
    pub energy: f64,
    pub structure: Structure,
}

impl CrystalConfiguration {
    /// Wrap raw positions, evaluating energy and structure.
    pub fn from_positions(positions: Vec<[f64; 3]>, alpha: f64, beta: f64) -> Result<Self> {
        let energy = total_potential(&positions, alpha, beta)?;
        let mut config = Self {
            n_ions: positions.len(),
            positions,
            alpha,
            beta,
            energy,
            structure: Structure::Linear,
        };
        config.structure = classify_structure(&config);
        Ok(config)
    }

    pub fn flat(&self) -> Vec<f64> {
        to_flat(&self.positions)
    }

    pub fn gradient(&self) -> Result<Vec<f64>> {
        potential_gradient(&self.positions, self.alpha, self.beta)
    }

    pub fn gradient_norm(&self) -> Result<f64> {
        Ok(norm(&self.gradient()?))
    }

    /// Distance of each ion from the trap axis.
    pub fn radial_distances(&self) -> Vec<f64> {
        self.positions.iter().map(|p| p[0].hypot(p[1])).collect()
    }

    /// Positions in metres for the given length scale.
    pub fn scaled(&self, length: f64) -> Vec<[f64; 3]> {
        self.positions
            .iter()
            .map(|p| [p[0] * length, p[1] * length, p[2] * length])
            .collect()
    }
}

pub(crate) fn to_flat(positions: &[[f64; 3]]) -> Vec<f64> {
    let n = positions.len();
    let mut flat = vec![0.0; 3 * n];
    for (m, p) in positions.iter().enumerate() {
        flat[m] = p[0];
        flat[n + m] = p[1];
        flat[2 * n + m] = p[2];
    }
    flat
}

pub(crate) fn from_flat(flat: &[f64]) -> Vec<[f64; 3]> {
    let n = flat.len() / 3;
    (0..n).map(|m| [flat[m], flat[n + m], flat[2 * n + m]]).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_separation(positions: &[[f64; 3]]) -> Result<()> {
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            if dist(&positions[i], &positions[j]) < MIN_SEPARATION {
                return Err(Error::DegenerateInput(format!("ions {i} and {j} coincide")));
            }
        }
    }
    Ok(())
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Total dimensionless potential energy.
pub fn total_potential(positions: &[[f64; 3]], alpha: f64, beta: f64) -> Result<f64> {
    check_separation(positions)?;
    let mut v = 0.0;
    for p in positions {
        v += 0.5 * (alpha * p[0] * p[0] + beta * p[1] * p[1] + p[2] * p[2]);
    }
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            v += 1.0 / dist(&positions[i], &positions[j]);
        }
    }
    Ok(v)
}

/// Analytic gradient of [`total_potential`] in block layout.
pub fn potential_gradient(positions: &[[f64; 3]], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_separation(positions)?;
    let n = positions.len();
    let curv = [alpha, beta, 1.0];
    let mut g = vec![0.0; 3 * n];
    for (m, p) in positions.iter().enumerate() {
        for a in 0..3 {
            g[a * n + m] = curv[a] * p[a];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist(&positions[i], &positions[j]);
            let inv3 = 1.0 / (d * d * d);
            for a in 0..3 {
                let f = (positions[i][a] - positions[j][a]) * inv3;
                g[a * n + i] -= f;
                g[a * n + j] += f;
            }
        }
    }
    Ok(g)
}

/// Analytic Hessian of [`total_potential`] in block layout.
pub fn potential_hessian(positions: &[[f64; 3]], alpha: f64, beta: f64) -> Result<DMatrix<f64>> {
    check_separation(positions)?;
    let n = positions.len();
    let curv = [alpha, beta, 1.0];
    let mut h = DMatrix::zeros(3 * n, 3 * n);
    for m in 0..n {
        for a in 0..3 {
            h[(a * n + m, a * n + m)] = curv[a];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let r = [
                positions[i][0] - positions[j][0],
                positions[i][1] - positions[j][1],
                positions[i][2] - positions[j][2],
            ];
            let d2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
            let d5 = d2 * d2 * d2.sqrt();
            for a in 0..3 {
                for b in 0..3 {
                    let delta = if a == b { d2 } else { 0.0 };
                    // ∂²(1/d)/∂r_a∂r_b
                    let k = (3.0 * r[a] * r[b] - delta) / d5;
                    h[(a * n + i, b * n + i)] += k;
                    h[(a * n + j, b * n + j)] += k;
                    h[(a * n + i, b * n + j)] -= k;
                    h[(a * n + j, b * n + i)] -= k;
                }
            }
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverOptions {
    pub restarts: usize,
    /// Gaussian jitter applied to every starting coordinate (units of ℓ).
    pub jitter: f64,
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Hessian eigenvalues below `-saddle_tolerance` mark a saddle point.
    pub saddle_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            restarts: 16,
            jitter: 0.05,
            gradient_tolerance: 1e-10,
            max_iterations: 20_000,
            saddle_tolerance: 1e-8,
        }
    }
}

/// Lowest-energy equilibrium from a seeded multistart.
pub fn solve_equilibrium(n: usize, alpha: f64, beta: f64, seed: u64) -> Result<CrystalConfiguration> {
    solve_equilibrium_with(n, alpha, beta, seed, &SolverOptions::default())
}

/// Equilibrium of the trap given in SI units.
pub fn solve_for_trap(n: usize, trap: &TrapParameters, seed: u64) -> Result<CrystalConfiguration> {
    trap.validate()?;
    solve_equilibrium(n, trap.alpha(), trap.beta(), seed)
}

/// Outcome of one multistart run, kept for inspection and tests.
#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub index: usize,
    pub result: std::result::Result<CrystalConfiguration, String>,
}

pub fn solve_equilibrium_with(
    n: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
    opts: &SolverOptions,
) -> Result<CrystalConfiguration> {
    let outcomes = multistart(n, alpha, beta, seed, opts)?;
    select_lowest(&outcomes).ok_or_else(|| {
        let reasons: Vec<String> = outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().err().cloned())
            .collect();
        Error::NonConvergence(format!(
            "all {} restarts failed: {}",
            outcomes.len(),
            reasons.join("; ")
        ))
    })
}

/// Run every restart and return the individual outcomes in index order.
pub fn multistart(
    n: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
    opts: &SolverOptions,
) -> Result<Vec<RestartOutcome>> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one ion"));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::invalid("alpha/beta", "must be finite and > 0"));
    }
    let restarts = opts.restarts.max(1);
    Ok((0..restarts)
        .into_par_iter()
        .map(|k| {
            let start = starting_guess(n, alpha, beta, seed, k, opts.jitter);
            let result = relax(start, alpha, beta, opts)
                .and_then(|flat| finish(from_flat(&flat), alpha, beta))
                .map_err(|e| e.to_string());
            RestartOutcome { index: k, result }
        })
        .collect())
}

/// Lowest energy; exact or near-exact ties go to the smaller index.
pub fn select_lowest(outcomes: &[RestartOutcome]) -> Option<CrystalConfiguration> {
    let mut best: Option<&CrystalConfiguration> = None;
    for o in outcomes {
        if let Ok(c) = &o.result {
            match best {
                None => best = Some(c),
                Some(b) if c.energy < b.energy - 1e-12 * b.energy.abs().max(1.0) => best = Some(c),
                _ => {}
            }
        }
    }
    best.cloned()
}

fn finish(mut positions: Vec<[f64; 3]>, alpha: f64, beta: f64) -> Result<CrystalConfiguration> {
    // Canonical ion order: ascending z, then x, then y.
    positions.sort_by(|a, b| {
        let key = |p: &[f64; 3]| [round9(p[2]), round9(p[0]), round9(p[1])];
        let (ka, kb) = (key(a), key(b));
        ka.iter()
            .zip(kb.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    CrystalConfiguration::from_positions(positions, alpha, beta)
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Starting point for restart `k`, cycling through string, two zigzag
/// orientations and a spherical shell, then jittered.
fn starting_guess(n: usize, alpha: f64, beta: f64, seed: u64, k: usize, jitter: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let spacing = 2.0 * (n as f64).powf(-0.56);
    let mid = 0.5 * (n as f64 - 1.0);
    let mut pos: Vec<[f64; 3]> = match k % 4 {
        0 => (0..n).map(|m| [0.0, 0.0, (m as f64 - mid) * spacing]).collect(),
        1 | 2 => {
            let amp = 0.4 / alpha.min(beta).sqrt().max(0.5);
            (0..n)
                .map(|m| {
                    let s = if m % 2 == 0 { amp } else { -amp };
                    let z = 0.8 * (m as f64 - mid) * spacing;
                    if k % 4 == 1 {
                        [s, 0.0, z]
                    } else {
                        [0.0, s, z]
                    }
                })
                .collect()
        }
        _ => {
            // Fibonacci sphere squeezed by the radial curvatures.
            let radius = 0.8 * (0.5 * n as f64).cbrt();
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|m| {
                    let z = if n == 1 { 0.0 } else { 1.0 - 2.0 * m as f64 / (n as f64 - 1.0) };
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let th = golden * m as f64;
                    [
                        radius * r * th.cos() / alpha.sqrt().max(1.0).sqrt(),
                        radius * r * th.sin() / beta.sqrt().max(1.0).sqrt(),
                        radius * z,
                    ]
                })
                .collect()
        }
    };
    let normal = Normal::new(0.0, jitter.max(0.0)).expect("jitter is finite");
    for p in pos.iter_mut() {
        for c in p.iter_mut() {
            *c += normal.sample(&mut rng);
        }
    }
    to_flat(&pos)
}

/// Local minimization from `start` (block layout) with saddle escape.
///
/// Quasi-Newton (BFGS, backtracking) brings the gradient down to
/// `1e-6`; Newton steps on the analytic Hessian, restricted to its
/// non-null eigenspace, polish it below `gradient_tolerance`. A negative
/// Hessian eigenvalue at the end triggers a kick along that mode and a
/// retry.
pub fn relax(start: Vec<f64>, alpha: f64, beta: f64, opts: &SolverOptions) -> Result<Vec<f64>> {
    let mut x = start;
    for _attempt in 0..6 {
        x = bfgs(x, alpha, beta, opts)?;
        x = newton_polish(x, alpha, beta, opts)?;
        let pos = from_flat(&x);
        let h = potential_hessian(&pos, alpha, beta)?;
        let eig = jacobi_eigen(&h)?;
        let lowest = eig.values[0];
        if lowest >= -opts.saddle_tolerance {
            return Ok(x);
        }
        let negative = eig.values.iter().filter(|&&l| l < -opts.saddle_tolerance).count();
        if _attempt == 5 {
            return Err(Error::SaddlePoint {
                negative,
                smallest: lowest,
            });
        }
        let mode = eig.vectors.column(0);
        for (xi, mi) in x.iter_mut().zip(mode.iter()) {
            *xi += 0.1 * mi;
        }
    }
    unreachable!("loop returns on its last attempt")
}

fn energy_and_gradient(x: &[f64], alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    let pos = from_flat(x);
    Ok((total_potential(&pos, alpha, beta)?, potential_gradient(&pos, alpha, beta)?))
}

fn bfgs(mut x: Vec<f64>, alpha: f64, beta: f64, opts: &SolverOptions) -> Result<Vec<f64>> {
    const SWITCH: f64 = 1e-6;
    const MAX_STEP: f64 = 0.3;
    let dim = x.len();
    let (mut f, mut g) = energy_and_gradient(&x, alpha, beta)?;
    let mut hinv = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..opts.max_iterations {
        let gnorm = norm(&g);
        if gnorm < SWITCH {
            return Ok(x);
        }
        let gv = DVector::from_column_slice(&g);
        let mut p = -(&hinv * &gv);
        let mut slope = p.dot(&gv);
        if slope >= 0.0 {
            hinv.fill_with_identity();
            p = -gv.clone();
            slope = p.dot(&gv);
        }
        let pn = p.norm();
        if pn > MAX_STEP {
            p *= MAX_STEP / pn;
            slope *= MAX_STEP / pn;
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a + t * b).collect();
            if let Ok((ft, gt)) = energy_and_gradient(&trial, alpha, beta) {
                if ft <= f + 1e-4 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            // Line search stalled in roundoff; Newton polish takes over.
            return Ok(x);
        };
        let s = DVector::from_iterator(dim, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(dim, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-14 {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            hinv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = xn;
        f = fnew;
        g = gn;
    }
    Err(Error::NonConvergence(format!(
        "quasi-Newton stalled after {} iterations, |grad| = {:e}",
        opts.max_iterations,
        norm(&g)
    )))
}

fn newton_polish(mut x: Vec<f64>, alpha: f64, beta: f64, opts: &SolverOptions) -> Result<Vec<f64>> {
    let mut g = potential_gradient(&from_flat(&x), alpha, beta)?;
    for _ in 0..200 {
        let gnorm = norm(&g);
        if gnorm < opts.gradient_tolerance {
            return Ok(x);
        }
        let h = potential_hessian(&from_flat(&x), alpha, beta)?;
        let eig = jacobi_eigen(&h)?;
        let scale = eig.values.iter().fold(0.0_f64, |m, l| m.max(l.abs())).max(1.0);
        let gv = DVector::from_column_slice(&g);
        let mut step = DVector::zeros(x.len());
        for (k, &l) in eig.values.iter().enumerate() {
            if l.abs() > 1e-10 * scale {
                let v = eig.vectors.column(k);
                // |λ| keeps the step downhill near saddles.
                step -= v * (v.dot(&gv) / l.abs());
            }
        }
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-6 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            if let Ok(gt) = potential_gradient(&from_flat(&trial), alpha, beta) {
                if norm(&gt) < gnorm {
                    x = trial;
                    g = gt;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let gnorm = norm(&g);
    if gnorm < opts.gradient_tolerance {
        Ok(x)
    } else {
        Err(Error::NonConvergence(format!(
            "Newton polish stopped at |grad| = {gnorm:e}"
        )))
    }
}

/// Principal-axis spreads (standard deviations, descending) of the ion
/// positions about their centroid.
pub fn principal_spreads(positions: &[[f64; 3]]) -> [f64; 3] {
    let n = positions.len() as f64;
    let mut c = [0.0; 3];
    for p in positions {
        for a in 0..3 {
            c[a] += p[a] / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(3, 3);
    for p in positions {
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += (p[a] - c[a]) * (p[b] - c[b]) / n;
            }
        }
    }
    let eig = jacobi_eigen(&cov).expect("3x3 covariance is symmetric");
    let mut s = [0.0; 3];
    for (k, l) in eig.values.iter().rev().enumerate() {
        s[k] = l.max(0.0).sqrt();
    }
    s
}

/// Shape class: `Linear` when every radial excursion is below `1e-6` of
/// the axial extent, `PlanarZigzag` when the smallest principal spread is
/// below `1e-6` of the largest, otherwise `ThreeDimensional`.
pub fn classify_structure(config: &CrystalConfiguration) -> Structure {
    if config.n_ions <= 1 {
        return Structure::Linear;
    }
    let (zmin, zmax) = config
        .positions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[2]), hi.max(p[2])));
    let axial_extent = zmax - zmin;
    let max_radial = config.radial_distances().into_iter().fold(0.0, f64::max);
    if max_radial < 1e-6 * axial_extent {
        return Structure::Linear;
    }
    let s = principal_spreads(&config.positions);
    if s[2] < 1e-6 * s[0] {
        Structure::PlanarZigzag
    } else {
        Structure::ThreeDimensional
    }
}

/// Largest position mismatch under the improper rotation S4 about the axis
/// joining the two most distant ions (90° rotation about that axis through
/// the centroid, then reflection through the perpendicular plane).
///
/// Zero for an exactly S4-symmetric crystal. Independent of the azimuthal
/// orientation, so it also applies to solutions of a degenerate trap.
pub fn s4_symmetry_residual(config: &CrystalConfiguration) -> f64 {
    let pos = &config.positions;
    let n = pos.len();
    if n < 2 {
        return 0.0;
    }
    let (mut bi, mut bj, mut bd) = (0, 1, -1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist(&pos[i], &pos[j]);
            if d > bd {
                (bi, bj, bd) = (i, j, d);
            }
        }
    }
    let centroid = {
        let mut c = [0.0; 3];
        for p in pos {
            for a in 0..3 {
                c[a] += p[a] / n as f64;
            }
        }
        c
    };
    let axis = {
        let v = [pos[bi][0] - pos[bj][0], pos[bi][1] - pos[bj][1], pos[bi][2] - pos[bj][2]];
        [v[0] / bd, v[1] / bd, v[2] / bd]
    };
    // Any unit vector orthogonal to the axis completes the frame.
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(sub(helper, scale3(axis, dot(helper, axis))));
    let e2 = cross(axis, e1);

    let mapped: Vec<[f64; 3]> = pos
        .iter()
        .map(|p| {
            let r = sub(*p, centroid);
            let (u, v, w) = (dot(r, e1), dot(r, e2), dot(r, axis));
            // 90° rotation (u, v) → (−v, u), then w → −w.
            let out = add(add(scale3(e1, -v), scale3(e2, u)), scale3(axis, -w));
            add(out, centroid)
        })
        .collect();

    // Greedy one-to-one matching; exact symmetries match trivially.
    let mut used = vec![false; n];
    let mut worst = 0.0_f64;
    for m in &mapped {
        let (k, d) = pos
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, p)| (k, dist(m, p)))
            .fold((usize::MAX, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        used[k] = true;
        worst = worst.max(d);
    }
    worst
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale3(a, 1.0 / dot(a, a).sqrt())
}

/// Measured ion positions in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservedPositions {
    /// Full `[x, y, z]` per ion.
    Spatial(Vec<[f64; 3]>),
    /// Image-plane `[axial, radial]` spots, radial at 45° between the trap
    /// axes: `r = (x + y)/√2`. Overlapping ions may appear as one spot.
    Imaged(Vec<[f64; 2]>),
}

impl ObservedPositions {
    pub fn len(&self) -> usize {
        match self {
            ObservedPositions::Spatial(v) => v.len(),
            ObservedPositions::Imaged(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedTrap {
    pub trap: TrapParameters,
    /// Root-mean-square position residual (m).
    pub rms_residual: f64,
    /// Set when the crystal is a string and radial frequencies are unconstrained.
    pub radial_ambiguous: bool,
    /// Fitted image-plane offset `[axial, radial]` (m), imaged input only.
    pub offset: [f64; 2],
    pub structure: Structure,
    pub iterations: usize,
}

/// Adjust trap frequencies so the computed equilibrium reproduces the
/// measured ion positions.
///
/// Fits `ω_z` and the nominal radial frequency, holding the guess's relative
/// radial split. Ion correspondence uses a symmetric nearest-neighbour
/// residual minimized over the trap's mirror symmetries, so measured spots
/// need no labels and overlapped spots are allowed. For strings the radial
/// frequencies carry no signal: only `ω_z` is fitted and the result is
/// flagged.
pub fn refine_trap_frequencies(
    observed: &ObservedPositions,
    n_ions: usize,
    guess: &TrapParameters,
    species: &IonSpecies,
) -> Result<RefinedTrap> {
    refine_trap_frequencies_with(observed, n_ions, guess, species, &RefineOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Imaged input only: predicted spots closer than this (m) are merged
    /// into their centroid, as unresolved ions are in the image.
    pub merge_radius: f64,
    pub max_iterations: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            merge_radius: 0.0,
            max_iterations: 200,
        }
    }
}

pub fn refine_trap_frequencies_with(
    observed: &ObservedPositions,
    n_ions: usize,
    guess: &TrapParameters,
    species: &IonSpecies,
    opts_refine: &RefineOptions,
) -> Result<RefinedTrap> {
    guess.validate()?;
    species.validate()?;
    if observed.is_empty() {
        return Err(Error::invalid("measured_positions", "no positions given"));
    }
    if let ObservedPositions::Spatial(v) = observed {
        if v.len() != n_ions {
            return Err(Error::DimensionMismatch {
                expected: n_ions,
                got: v.len(),
            });
        }
    }
    let split = guess.radial_split();
    let opts = SolverOptions::default();
    let start = solve_equilibrium(n_ions, guess.alpha(), guess.beta(), 0)?;
    let ambiguous = start.structure == Structure::Linear;
    let warm = start.flat();
    let imaged = matches!(observed, ObservedPositions::Imaged(_));

    let measured_centered: Vec<Vec<f64>> = match observed {
        ObservedPositions::Spatial(v) => {
            let n = v.len() as f64;
            let mut c = [0.0; 3];
            for p in v {
                for a in 0..3 {
                    c[a] += p[a] / n;
                }
            }
            v.iter().map(|p| vec![p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect()
        }
        ObservedPositions::Imaged(v) => v.iter().map(|p| vec![p[0], p[1]]).collect(),
    };
    // Offsets are fitted in micrometres for sensible scaling. The midrange
    // is insensitive to spots that hold several ions.
    let initial_offset = if imaged {
        let mid = |k: usize| {
            let (lo, hi) = measured_centered
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])));
            0.5 * (lo + hi)
        };
        Some([mid(0) * 1e6, mid(1) * 1e6])
    } else {
        None
    };

    let unpack = |p: &DVector<f64>| -> (TrapParameters, [f64; 2]) {
        let omega_z = p[0].exp();
        let mut trap = *guess;
        trap.omega_z = omega_z;
        let mut k = 1;
        if !ambiguous {
            let radial = p[1].exp();
            trap.omega_x = radial;
            trap.omega_y = radial * (1.0 - split);
            k = 2;
        }
        let offset = if imaged { [p[k] * 1e-6, p[k + 1] * 1e-6] } else { [0.0; 2] };
        (trap, offset)
    };

    let predict = |trap: &TrapParameters| -> Result<Vec<[f64; 3]>> {
        trap.validate()?;
        let flat = relax(warm.clone(), trap.alpha(), trap.beta(), &opts)?;
        // A structural transition makes the residual flat in the radial
        // frequency; such trial steps are rejected.
        let shape = CrystalConfiguration::from_positions(from_flat(&flat), trap.alpha(), trap.beta())?.structure;
        if shape != start.structure {
            return Err(Error::DegenerateInput(format!("trial trap gives a {shape} crystal")));
        }
        let l = length_scale(species, trap.omega_z);
        Ok(from_flat(&flat)
            .into_iter()
            .map(|p| [p[0] * l, p[1] * l, p[2] * l])
            .collect())
    };

    let residual = |p: &DVector<f64>| -> Result<DVector<f64>> {
        let (trap, offset) = unpack(p);
        let predicted = predict(&trap)?;
        Ok(DVector::from_vec(chamfer_residual(
            &measured_centered,
            &predicted,
            imaged,
            offset,
            opts_refine.merge_radius,
        )))
    };

    let mut x0 = vec![guess.omega_z.ln()];
    if !ambiguous {
        x0.push(guess.omega_radial().ln());
    }
    if let Some(o) = initial_offset {
        x0.extend_from_slice(&o);
    }
    let lm = levenberg_marquardt(
        residual,
        None::<fn(&DVector<f64>) -> Result<DMatrix<f64>>>,
        DVector::from_vec(x0),
        &LmOptions {
            max_iterations: opts_refine.max_iterations,
            step_tolerance: 1e-13,
            cost_tolerance: 1e-14,
            fd_step: 1e-7,
            max_step: 0.05,
            ..LmOptions::default()
        },
    )?;
    if !lm.converged {
        return Err(Error::NonConvergence(format!(
            "trap refinement did not converge in {} iterations",
            lm.iterations
        )));
    }
    let (trap, offset) = unpack(&lm.params);
    let final_config = solve_relaxed(&warm, &trap, &opts)?;
    Ok(RefinedTrap {
        trap,
        rms_residual: (lm.cost / lm.residuals.len() as f64).sqrt(),
        radial_ambiguous: ambiguous,
        offset,
        structure: final_config.structure,
        iterations: lm.iterations,
    })
}

fn solve_relaxed(warm: &[f64], trap: &TrapParameters, opts: &SolverOptions) -> Result<CrystalConfiguration> {
    let flat = relax(warm.to_vec(), trap.alpha(), trap.beta(), opts)?;
    CrystalConfiguration::from_positions(from_flat(&flat), trap.alpha(), trap.beta())
}

/// Project a 3D position onto the image plane `[axial, (x+y)/√2]`.
pub fn image_plane(p: &[f64; 3]) -> [f64; 2] {
    [p[2], (p[0] + p[1]) / std::f64::consts::SQRT_2]
}

fn chamfer_residual(
    measured: &[Vec<f64>],
    predicted: &[[f64; 3]],
    imaged: bool,
    offset: [f64; 2],
    merge_radius: f64,
) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mirror in 0..8u8 {
        let sx = if mirror & 1 == 0 { 1.0 } else { -1.0 };
        let sy = if mirror & 2 == 0 { 1.0 } else { -1.0 };
        let sz = if mirror & 4 == 0 { 1.0 } else { -1.0 };
        let pts: Vec<Vec<f64>> = predicted
            .iter()
            .map(|p| {
                let q = [sx * p[0], sy * p[1], sz * p[2]];
                if imaged {
                    let ip = image_plane(&q);
                    vec![ip[0] + offset[0], ip[1] + offset[1]]
                } else {
                    q.to_vec()
                }
            })
            .collect();
        let pts = if imaged && merge_radius > 0.0 { merge_close(pts, merge_radius) } else { pts };
        let mut res = Vec::with_capacity((measured.len() + pts.len()) * measured[0].len());
        for (_, d) in nearest_differences(measured, &pts) {
            res.extend(d);
        }
        // Keyed by the matched measured spot so that mirror-equivalent
        // predictions yield the same residual ordering.
        let mut back = nearest_differences(&pts, measured);
        back.sort_by(|(ja, da), (jb, db)| {
            ja.cmp(jb).then_with(|| {
                da.iter()
                    .zip(db)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        for (_, d) in back {
            res.extend(d);
        }
        let cost: f64 = res.iter().map(|r| r * r).sum();
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, res));
        }
    }
    best.expect("eight mirror images").1
}

/// Replace groups of points linked by distances below `radius` with their
/// centroids, keeping first-member order.
fn merge_close(pts: Vec<Vec<f64>>, radius: f64) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut label: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if sq_dist(&pts[i], &pts[j]) < radius * radius {
                let (a, b) = (label[i], label[j]);
                if a != b {
                    let (keep, drop) = (a.min(b), a.max(b));
                    label.iter_mut().filter(|l| **l == drop).for_each(|l| *l = keep);
                }
            }
        }
    }
    let mut out = Vec::new();
    for root in 0..n {
        let members: Vec<&Vec<f64>> = (0..n).filter(|&i| label[i] == root).map(|i| &pts[i]).collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        out.push((0..pts[0].len()).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / k).collect());
    }
    out
}

fn nearest_differences(from: &[Vec<f64>], to: &[Vec<f64>]) -> Vec<(usize, Vec<f64>)> {
    from.iter()
        .map(|a| {
            let (j, b) = to
                .iter()
                .enumerate()
                .min_by(|(_, u), (_, v)| sq_dist(a, u).total_cmp(&sq_dist(a, v)))
                .expect("non-empty");
            (j, a.iter().zip(b).map(|(x, y)| x - y).collect())
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}
