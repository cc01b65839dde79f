//! Temperature from fluorescence spot widths.
//!
//! Each spot's axial profile is fitted with a pixel-integrated Gaussian on
//! a constant offset. The fitted width combines the thermal spread and the
//! imaging resolution, `σ² = (k_B T / M ω_z²) γ² + σ_res²`, which is
//! inverted per spot and combined across the crystal.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::crystal::{image_plane, refine_trap_frequencies_with, solve_for_trap, ObservedPositions, RefineOptions, RefinedTrap};
use crate::error::{Error, Result};
use crate::imaging::{detect_spots, gaussian_bin, integrate_profile, read_image, Axis, FluorescenceImage, Profile, Roi};
use crate::modes::{analyze, gamma_factors};
use crate::optimize::{levenberg_marquardt, LmOptions};
use crate::units::{length_scale, IonSpecies, TrapParameters, BOLTZMANN};

/// Minimum number of profile samples for a fit.
pub const MIN_PROFILE_SAMPLES: usize = 8;

/// Result of a Gaussian profile fit. Lengths in metres, counts in
/// integrated counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotFit {
    pub center: f64,
    pub sigma: f64,
    /// Total counts under the Gaussian.
    pub amplitude: f64,
    /// Background per profile sample.
    pub offset: f64,
    /// 95% half-widths of `[center, sigma, amplitude, offset]`.
    pub ci95: [f64; 4],
    /// Standard errors in the same order.
    pub stderr: [f64; 4],
    /// Set when σ ran into 0.1 px or the profile length.
    pub sigma_at_bound: bool,
}

/// Fit a single Gaussian plus offset.
pub fn fit_gaussian_profile(profile: &Profile) -> Result<SpotFit> {
    let (b0, c0, s0) = moment_guess(profile)?;
    let fits = fit_components(profile, &[c0], s0, Some(b0))?;
    Ok(fits[0])
}

/// Fit several Gaussians sharing one offset, initialized at `centers`
/// (m) with common width `sigma_guess` (m). Results follow `centers`.
pub fn fit_gaussian_components(profile: &Profile, centers: &[f64], sigma_guess: f64) -> Result<Vec<SpotFit>> {
    check_profile(profile)?;
    let cols: Vec<f64> = centers.iter().map(|c| (c - profile.start) / profile.pitch).collect();
    fit_components(profile, &cols, sigma_guess / profile.pitch, None)
}

fn check_profile(profile: &Profile) -> Result<()> {
    if profile.len() < MIN_PROFILE_SAMPLES {
        return Err(Error::invalid(
            "profile",
            format!("need at least {MIN_PROFILE_SAMPLES} samples, got {}", profile.len()),
        ));
    }
    let (lo, hi) = profile
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    if !(hi > lo) {
        return Err(Error::NonConvergence("flat profile: no dynamic range to fit".into()));
    }
    Ok(())
}

/// Offset, centre and width (pixel units) from background-subtracted moments.
fn moment_guess(profile: &Profile) -> Result<(f64, f64, f64)> {
    check_profile(profile)?;
    let b0 = profile.values.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let w: Vec<f64> = profile.values.iter().map(|v| v - b0).collect();
    let total: f64 = w.iter().sum();
    let c = w.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>() / total;
    let var = w.iter().enumerate().map(|(k, v)| (k as f64 - c).powi(2) * v).sum::<f64>() / total;
    Ok((b0, c, var.sqrt().clamp(0.5, profile.len() as f64 / 4.0)))
}

/// Parameters: per component `[A, c, σ]` (counts, px, px), then offset.
fn fit_components(profile: &Profile, cols: &[f64], sigma_px: f64, offset: Option<f64>) -> Result<Vec<SpotFit>> {
    let n = profile.len();
    let k = cols.len();
    let y = &profile.values;
    let b0 = offset.unwrap_or_else(|| {
        let mut v = y.clone();
        v.sort_by(f64::total_cmp);
        v[n / 10]
    });
    let mut x0 = Vec::with_capacity(3 * k + 1);
    for &c in cols {
        let ci = (c.round().max(0.0) as usize).min(n - 1);
        let peak = (y[ci] - b0).max(1.0);
        x0.extend_from_slice(&[peak * (2.0 * std::f64::consts::PI).sqrt() * sigma_px, c, sigma_px]);
    }
    x0.push(b0);
    // Poisson-style weights from the data.
    let wt: Vec<f64> = y.iter().map(|v| 1.0 / v.max(1.0).sqrt()).collect();

    let model = |p: &DVector<f64>, i: usize| -> f64 {
        let x = i as f64;
        let mut m = p[3 * k];
        for j in 0..k {
            m += p[3 * j] * gaussian_bin(x - 0.5, x + 0.5, p[3 * j + 1], p[3 * j + 2].abs());
        }
        m
    };
    let residual = |p: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(DVector::from_iterator(n, (0..n).map(|i| (model(p, i) - y[i]) * wt[i])))
    };
    let jacobian = |p: &DVector<f64>| -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(n, 3 * k + 1);
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        for i in 0..n {
            let (a, b) = (i as f64 - 0.5, i as f64 + 0.5);
            for j in 0..k {
                let (amp, c, s) = (p[3 * j], p[3 * j + 1], p[3 * j + 2]);
                let sa = s.abs().max(1e-12);
                let phi = |u: f64| norm / sa * (-(u - c).powi(2) / (2.0 * sa * sa)).exp();
                jac[(i, 3 * j)] = gaussian_bin(a, b, c, sa) * wt[i];
                jac[(i, 3 * j + 1)] = -amp * (phi(b) - phi(a)) * wt[i];
                jac[(i, 3 * j + 2)] = -amp * ((b - c) * phi(b) - (a - c) * phi(a)) / sa * s.signum() * wt[i];
            }
            jac[(i, 3 * k)] = wt[i];
        }
        Ok(jac)
    };
    let lm = levenberg_marquardt(
        residual,
        Some(jacobian),
        DVector::from_vec(x0),
        &LmOptions {
            max_iterations: 300,
            ..LmOptions::default()
        },
    )?;
    if !lm.converged {
        return Err(Error::NonConvergence(format!(
            "Gaussian fit did not converge in {} iterations",
            lm.iterations
        )));
    }
    let np = 3 * k + 1;
    let dof = n.saturating_sub(np);
    if dof == 0 {
        return Err(Error::invalid("profile", "more parameters than samples"));
    }
    let s2 = lm.cost / dof as f64;
    let cov = (lm.jacobian.transpose() * &lm.jacobian)
        .try_inverse()
        .ok_or_else(|| Error::NonConvergence("singular fit covariance".into()))?
        * s2;
    let t = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::NonConvergence(e.to_string()))?
        .inverse_cdf(0.975);
    let p = &lm.params;
    let h = profile.pitch;
    let se = |i: usize| cov[(i, i)].max(0.0).sqrt();
    let fits = (0..k)
        .map(|j| {
            let sigma_px = p[3 * j + 2].abs();
            let stderr = [se(3 * j + 1) * h, se(3 * j + 2) * h, se(3 * j), se(3 * k)];
            SpotFit {
                center: profile.start + p[3 * j + 1] * h,
                sigma: sigma_px * h,
                amplitude: p[3 * j],
                offset: p[3 * k],
                ci95: stderr.map(|s| t * s),
                stderr,
                sigma_at_bound: sigma_px <= 0.1 || sigma_px >= n as f64,
            }
        })
        .collect::<Vec<_>>();
    if fits.iter().any(|f| !f.sigma.is_finite() || f.sigma == 0.0) {
        return Err(Error::NonConvergence("fit collapsed to zero width".into()));
    }
    Ok(fits)
}

/// Imaging resolution σ_res (a standard deviation, m) with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionCalibration {
    pub sigma: f64,
    pub stderr: f64,
}

impl ResolutionCalibration {
    pub const AXIAL: Self = Self {
        sigma: 2.23e-6,
        stderr: 0.02e-6,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureEstimate {
    /// K.
    pub value: f64,
    /// K; statistical (scaled by the Birge ratio) and σ_res in quadrature.
    pub stderr: f64,
    /// Fitted axial spot widths (m), one per input fit.
    pub per_ion_sigmas: Vec<f64>,
    /// Per-spot temperatures (K); `None` when below resolution.
    pub per_ion_temperatures: Vec<Option<f64>>,
    pub gammas_used: Vec<f64>,
    pub n_ions_used: usize,
    /// Indices of fits with σ ≤ σ_res.
    pub below_resolution: Vec<usize>,
}

/// Invert `σ_m² = (k_B T / M ω_z²) γ_m² + σ_res²` per fit and take the
/// inverse-variance weighted mean.
pub fn infer_temperature(
    fits: &[SpotFit],
    gammas: &[f64],
    resolution: &ResolutionCalibration,
    omega_z: f64,
    species: &IonSpecies,
) -> Result<TemperatureEstimate> {
    if fits.is_empty() {
        return Err(Error::invalid("fits", "need at least one spot fit"));
    }
    if gammas.len() != fits.len() {
        return Err(Error::DimensionMismatch {
            expected: fits.len(),
            got: gammas.len(),
        });
    }
    if !(resolution.sigma >= 0.0 && resolution.stderr >= 0.0) {
        return Err(Error::invalid("sigma_res", "must be >= 0"));
    }
    let k = species.mass * omega_z * omega_z / BOLTZMANN;
    let sr = resolution.sigma;
    let mut temps = Vec::with_capacity(fits.len());
    let mut below = Vec::new();
    let (mut sw, mut swt, mut sdt) = (0.0, 0.0, 0.0);
    let mut used = Vec::new();
    for (m, (f, g)) in fits.iter().zip(gammas).enumerate() {
        if f.sigma <= sr {
            below.push(m);
            temps.push(None);
            continue;
        }
        let t = k * (f.sigma * f.sigma - sr * sr) / (g * g);
        let dt = (k * 2.0 * f.sigma * f.stderr[1] / (g * g)).max(1e-300);
        let w = 1.0 / (dt * dt);
        sw += w;
        swt += w * t;
        // Shift of this spot's T per unit change of σ_res.
        sdt += w * (-2.0 * k * sr / (g * g));
        temps.push(Some(t));
        used.push((t, w));
    }
    if used.is_empty() {
        return Err(Error::BelowResolution);
    }
    let mean = swt / sw;
    let internal = 1.0 / sw.sqrt();
    let birge = if used.len() > 1 {
        let chi2: f64 = used.iter().map(|(t, w)| w * (t - mean).powi(2)).sum();
        (chi2 / (used.len() - 1) as f64).sqrt().max(1.0)
    } else {
        1.0
    };
    let systematic = (sdt / sw).abs() * resolution.stderr;
    Ok(TemperatureEstimate {
        value: mean,
        stderr: ((internal * birge).powi(2) + systematic.powi(2)).sqrt(),
        per_ion_sigmas: fits.iter().map(|f| f.sigma).collect(),
        per_ion_temperatures: temps,
        gammas_used: gammas.to_vec(),
        n_ions_used: used.len(),
        below_resolution: below,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// Number of ions; detected spots are counted when absent.
    pub n_ions: Option<usize>,
    /// Axial resolution; taken from the image calibration when absent.
    pub resolution: Option<ResolutionCalibration>,
    /// Expected spot width relative to the PSF, sets the ROI size.
    pub sigma_guess_factor: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            n_ions: None,
            resolution: None,
            sigma_guess_factor: 1.3,
        }
    }
}

/// One image spot with its fits and the ions it contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotRecord {
    /// Image-plane `[axial, radial]` (m).
    pub position: [f64; 2],
    pub roi: Roi,
    pub ions: Vec<usize>,
    /// RMS axial γ of the member ions.
    pub gamma_z: f64,
    pub axial: SpotFit,
    /// Reported only; radial γ spread too widely across off-axis ions.
    pub radial: Option<SpotFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineProvenance {
    pub image_size: [usize; 2],
    pub pixel_pitch: f64,
    pub n_ions: usize,
    pub n_spots: usize,
    pub resolution: ResolutionCalibration,
    pub guess: TrapParameters,
    pub stages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermometryResult {
    pub estimate: TemperatureEstimate,
    pub refined: RefinedTrap,
    pub spots: Vec<SpotRecord>,
    pub provenance: PipelineProvenance,
}

/// Read an image file and run [`thermometry_pipeline`].
pub fn thermometry_from_file(
    path: &Path,
    guess: &TrapParameters,
    species: &IonSpecies,
    opts: &PipelineOptions,
) -> Result<ThermometryResult> {
    let image = read_image(path).map_err(|e| e.in_stage("read_image"))?;
    thermometry_pipeline(&image, guess, species, opts)
}

/// Spots → per-spot fits → trap refinement → modes → γ → temperature.
pub fn thermometry_pipeline(
    image: &FluorescenceImage,
    guess: &TrapParameters,
    species: &IonSpecies,
    opts: &PipelineOptions,
) -> Result<ThermometryResult> {
    let mut stages = Vec::new();
    image.validate().map_err(|e| e.in_stage("read_image"))?;
    let detected = detect_spots(image);
    if detected.is_empty() {
        return Err(Error::DegenerateInput("no spots found".into()).in_stage("detect_spots"));
    }
    let n_ions = opts.n_ions.unwrap_or(detected.len());
    if detected.len() > n_ions {
        return Err(Error::DegenerateInput(format!(
            "{} spots detected for {n_ions} ions",
            detected.len()
        ))
        .in_stage("detect_spots"));
    }
    stages.push(format!("detect_spots: {} spots", detected.len()));

    let pitch = image.pixel_pitch;
    let sg_ax = opts.sigma_guess_factor * image.psf_sigma_ax;
    let sg_rad = opts.sigma_guess_factor * image.psf_sigma_rad;
    let (hc, hr) = (4.0 * sg_ax / pitch, 4.0 * sg_rad / pitch);
    let mut fitted = Vec::with_capacity(detected.len());
    for (s, d) in detected.iter().enumerate() {
        // Neighbours whose light reaches this ROI enter the fit as extra
        // components so that their tails do not bias the width.
        let near = |ax_reach: f64, rad_reach: f64| -> Vec<usize> {
            let mut v = vec![s];
            v.extend((0..detected.len()).filter(|&j| {
                j != s
                    && (detected[j].pixel[0] - d.pixel[0]).abs() < ax_reach
                    && (detected[j].pixel[1] - d.pixel[1]).abs() < rad_reach
            }));
            v
        };
        let fit_axis = |axis: Axis, roi: &Roi, comps: &[usize], sg: f64| -> Result<SpotFit> {
            let profile = integrate_profile(image, axis, roi)?;
            let k = if axis == Axis::Axial { 0 } else { 1 };
            let centers: Vec<f64> = comps.iter().map(|&j| detected[j].position[k]).collect();
            Ok(fit_gaussian_components(&profile, &centers, sg)?[0])
        };
        let axial_comps = near(hc + 3.0 * sg_ax / pitch, hr + 3.0 * sg_rad / pitch);
        // Widened so every included neighbour lies wholly inside.
        let (lo, hi) = axial_comps.iter().fold((d.pixel[0], d.pixel[0]), |(lo, hi), &j| {
            (lo.min(detected[j].pixel[0]), hi.max(detected[j].pixel[0]))
        });
        let roi = Roi::around(image, 0.5 * (lo + hi), d.pixel[1], 0.5 * (hi - lo) + hc, hr);
        let axial = fit_axis(Axis::Axial, &roi, &axial_comps, sg_ax).map_err(|e| e.in_stage("profile_fit"))?;
        let narrow = Roi::around(image, d.pixel[0], d.pixel[1], 1.5 * sg_ax / pitch, hr);
        let radial_comps = near(4.5 * sg_ax / pitch, hr + 3.0 * sg_rad / pitch);
        let radial = fit_axis(Axis::Radial, &narrow, &radial_comps, sg_rad).ok();
        let position = [axial.center, radial.map_or(d.position[1], |r| r.center)];
        fitted.push((position, roi, axial, radial));
    }
    stages.push(format!("profile_fit: {} spots fitted", fitted.len()));

    let centres: Vec<[f64; 2]> = fitted.iter().map(|f| f.0).collect();
    let observed = ObservedPositions::Imaged(centres.clone());
    // Ions closer than about two spot widths blend into one maximum.
    let refine_opts = RefineOptions {
        merge_radius: 2.0 * sg_ax,
        ..RefineOptions::default()
    };
    let refined = refine_trap_frequencies_with(&observed, n_ions, guess, species, &refine_opts)
        .map_err(|e| e.in_stage("refine_trap"))?;
    stages.push(format!(
        "refine_trap: omega_z = 2pi x {:.3} kHz, rms {:.3e} m",
        refined.trap.omega_z / (2e3 * std::f64::consts::PI),
        refined.rms_residual
    ));

    let omega_z = refined.trap.omega_z;
    let config = solve_for_trap(n_ions, &refined.trap, 0).map_err(|e| e.in_stage("normal_modes"))?;
    let spectrum = analyze(&config, omega_z).map_err(|e| e.in_stage("normal_modes"))?;
    let gammas = gamma_factors(&spectrum).map_err(|e| e.in_stage("normal_modes"))?;
    stages.push(format!("normal_modes: {} modes", spectrum.dim()));

    let l = length_scale(species, omega_z);
    let predicted: Vec<[f64; 2]> = config
        .positions
        .iter()
        .map(|p| image_plane(&[p[0] * l, p[1] * l, p[2] * l]))
        .collect();
    let members = assign_ions(&predicted, &centres, refined.offset);
    let spots: Vec<SpotRecord> = fitted
        .into_iter()
        .zip(members)
        .filter(|(_, ions)| !ions.is_empty())
        .map(|((position, roi, axial, radial), ions)| {
            let g2 = ions.iter().map(|&m| gammas.gamma_z[m].powi(2)).sum::<f64>() / ions.len() as f64;
            SpotRecord {
                position,
                roi,
                ions,
                gamma_z: g2.sqrt(),
                axial,
                radial,
            }
        })
        .collect();

    let resolution = opts.resolution.unwrap_or(ResolutionCalibration {
        sigma: image.psf_sigma_ax,
        stderr: ResolutionCalibration::AXIAL.stderr,
    });
    let fits: Vec<SpotFit> = spots.iter().map(|s| s.axial).collect();
    let g: Vec<f64> = spots.iter().map(|s| s.gamma_z).collect();
    let estimate = infer_temperature(&fits, &g, &resolution, omega_z, species).map_err(|e| e.in_stage("temperature"))?;
    stages.push(format!("temperature: {:.4e} K from {} spots", estimate.value, estimate.n_ions_used));

    Ok(ThermometryResult {
        estimate,
        provenance: PipelineProvenance {
            image_size: [image.width, image.height],
            pixel_pitch: pitch,
            n_ions,
            n_spots: detected.len(),
            resolution,
            guess: *guess,
            stages,
        },
        refined,
        spots,
    })
}

/// Group ions by nearest detected spot, using the mirror image of the
/// prediction that best matches the spots.
fn assign_ions(predicted: &[[f64; 2]], spots: &[[f64; 2]], offset: [f64; 2]) -> Vec<Vec<usize>> {
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let nearest = |p: [f64; 2], set: &[[f64; 2]]| {
        set.iter()
            .enumerate()
            .map(|(j, q)| (j, d2(p, *q)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
    };
    let mut best: Option<(f64, Vec<[f64; 2]>)> = None;
    for (sa, sr) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let pts: Vec<[f64; 2]> = predicted
            .iter()
            .map(|p| [sa * p[0] + offset[0], sr * p[1] + offset[1]])
            .collect();
        let cost = pts.iter().map(|p| nearest(*p, spots).1).sum::<f64>()
            + spots.iter().map(|s| nearest(*s, &pts).1).sum::<f64>();
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, pts));
        }
    }
    let pts = best.expect("four mirror images").1;
    let mut members = vec![Vec::new(); spots.len()];
    for (m, p) in pts.iter().enumerate() {
        members[nearest(*p, spots).0].push(m);
    }
    members
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{encode_pgm, gaussian_bin, synthesize_image, ImageParams};
    use crate::units::khz;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn gaussian_profile(n: usize, amp: f64, c: f64, s: f64, b: f64) -> Profile {
        Profile {
            start: 0.0,
            pitch: 1.0,
            values: (0..n)
                .map(|i| b + amp * gaussian_bin(i as f64 - 0.5, i as f64 + 0.5, c, s))
                .collect(),
        }
    }

    #[test]
    fn noiseless_gaussian_recovered_exactly() {
        let f = fit_gaussian_profile(&gaussian_profile(40, 5e4, 18.3, 3.0, 12.0)).unwrap();
        assert!((f.center / 18.3 - 1.0).abs() < 1e-6);
        assert!((f.sigma / 3.0 - 1.0).abs() < 1e-6);
        assert!((f.amplitude / 5e4 - 1.0).abs() < 1e-6);
        assert!((f.offset / 12.0 - 1.0).abs() < 1e-6);
        assert!(!f.sigma_at_bound);
        assert!(f.ci95.iter().all(|c| *c >= 0.0));
    }

    #[test]
    fn flat_and_short_profiles_rejected() {
        let flat = Profile {
            start: 0.0,
            pitch: 1.0,
            values: vec![5.0; 20],
        };
        assert!(matches!(fit_gaussian_profile(&flat), Err(Error::NonConvergence(_))));
        let short = gaussian_profile(6, 100.0, 3.0, 1.0, 0.0);
        assert!(fit_gaussian_profile(&short).is_err());
    }

    #[test]
    fn ci_coverage_under_poisson_noise() {
        let truth = 3.0;
        let clean = gaussian_profile(40, 1e4, 19.7, truth, 2.0);
        let mut covered = 0;
        let trials = 1000;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = Profile {
                values: clean
                    .values
                    .iter()
                    .map(|&mu| Poisson::new(mu).unwrap().sample(&mut rng))
                    .collect(),
                ..clean.clone()
            };
            let f = fit_gaussian_profile(&noisy).unwrap();
            if (f.sigma - truth).abs() <= 3.0 * f.ci95[1] {
                covered += 1;
            }
        }
        assert!(covered as f64 >= 0.95 * trials as f64, "{covered}");
    }

    #[test]
    fn pixelization_bias_small() {
        for s in [2.0, 2.5, 4.0] {
            let f = fit_gaussian_profile(&gaussian_profile(48, 1e5, 23.4, s, 1.0)).unwrap();
            assert!((f.sigma / s - 1.0).abs() < 0.02);
        }
    }

    fn fit_with_sigma(sigma: f64) -> SpotFit {
        SpotFit {
            center: 0.0,
            sigma,
            amplitude: 1e5,
            offset: 0.0,
            ci95: [0.0, 0.02e-6, 0.0, 0.0],
            stderr: [0.0, 0.01e-6, 0.0, 0.0],
            sigma_at_bound: false,
        }
    }

    #[test]
    fn inversion_of_quadrature_width() {
        let e = infer_temperature(
            &[fit_with_sigma(2.95e-6)],
            &[1.0],
            &ResolutionCalibration::AXIAL,
            khz(71.0),
            &IonSpecies::calcium40(),
        )
        .unwrap();
        assert!((e.value * 1e3 - 3.6).abs() < 0.05, "{}", e.value);
        assert!(e.stderr > 0.0);
    }

    #[test]
    fn below_resolution_flagged() {
        let res = ResolutionCalibration::AXIAL;
        let sp = IonSpecies::calcium40();
        let e = infer_temperature(&[fit_with_sigma(2.23e-6), fit_with_sigma(2.9e-6)], &[1.0, 1.0], &res, khz(71.0), &sp).unwrap();
        assert_eq!(e.below_resolution, vec![0]);
        assert_eq!(e.n_ions_used, 1);
        assert!(matches!(
            infer_temperature(&[fit_with_sigma(2.23e-6)], &[1.0], &res, khz(71.0), &sp),
            Err(Error::BelowResolution)
        ));
    }

    #[test]
    fn temperature_monotone_in_sigma() {
        let sp = IonSpecies::calcium40();
        let mut last = 0.0;
        for k in 1..30 {
            let s = 2.23e-6 + k as f64 * 0.05e-6;
            let t = infer_temperature(&[fit_with_sigma(s)], &[0.8], &ResolutionCalibration::AXIAL, khz(71.0), &sp)
                .unwrap()
                .value;
            assert!(t > last);
            last = t;
        }
    }

    fn roundtrip(n: usize, trap: TrapParameters, temperature: f64, seed: u64) -> ThermometryResult {
        let sp = IonSpecies::calcium40();
        let c = solve_for_trap(n, &trap, 0).unwrap();
        let s = analyze(&c, trap.omega_z).unwrap();
        let syn = synthesize_image(&c, &s, &sp, temperature, &ImageParams::default(), Some(seed)).unwrap();
        let mut guess = trap;
        guess.omega_z *= 1.02;
        guess.omega_x *= 0.98;
        guess.omega_y *= 0.98;
        let opts = PipelineOptions {
            n_ions: Some(n),
            ..PipelineOptions::default()
        };
        thermometry_pipeline(&syn.image, &guess, &sp, &opts).unwrap()
    }

    #[test]
    fn single_ion_roundtrip() {
        let r = roundtrip(1, TrapParameters::from_khz(71.0, 350.0, 0.0), 3.1e-3, 11);
        assert!((r.estimate.value / 3.1e-3 - 1.0).abs() < 0.2, "{}", r.estimate.value);
    }

    #[test]
    fn zigzag_uses_axial_fits_and_reports_radial() {
        let r = roundtrip(4, TrapParameters::from_khz(87.0, 185.0, 0.05), 3.5e-3, 5);
        assert!((r.estimate.value / 3.5e-3 - 1.0).abs() < 0.2, "{}", r.estimate.value);
        assert_eq!(r.spots.len(), 4);
        assert!(r.spots.iter().all(|s| s.radial.is_some()));
        assert!(!r.refined.radial_ambiguous);
    }

    #[test]
    fn corrupted_file_reports_stage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        let img = FluorescenceImage::new(16, 16, 0.92e-6, 2.23e-6, 2.09e-6).unwrap();
        let mut bytes = encode_pgm(&img).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, bytes).unwrap();
        let err = thermometry_from_file(&path, &TrapParameters::from_khz(71.0, 350.0, 0.0), &IonSpecies::calcium40(), &PipelineOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "read_image", .. }), "{err}");
    }
}
