//! Normal modes of an equilibrium crystal and the per-ion γ factors that
//! relate thermal position spread to temperature.
//!
//! Eigenvector coordinates follow the block layout of [`crate::crystal`]:
//! row `m` is ion `m` along x, row `N+m` along y, row `2N+m` along z.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::crystal::{potential_hessian, CrystalConfiguration};
use crate::error::{Error, Result};
use crate::linalg::jacobi_eigen;
use crate::units::{IonSpecies, BOLTZMANN};

/// Eigenvalues below this are treated as zero modes.
pub const ZERO_MODE_THRESHOLD: f64 = 1e-8;
/// Eigenvalues below `-STABILITY_TOLERANCE` mark an unstable equilibrium.
pub const STABILITY_TOLERANCE: f64 = 1e-10;
/// Largest gradient norm accepted as an equilibrium.
pub const EQUILIBRIUM_TOLERANCE: f64 = 1e-6;

/// The 3N normal modes of a crystal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpectrum {
    pub n_ions: usize,
    /// Dimensionless λ_p, ascending.
    pub eigenvalues: Vec<f64>,
    /// Column-major 3N×3N matrix; column p is the eigenvector b^p.
    pub eigenvectors: Vec<f64>,
    /// Axial frequency setting the unit of λ (rad/s).
    pub omega_z_ref: f64,
    /// Indices of modes with λ below the zero-mode threshold.
    pub zero_modes: Vec<usize>,
}

impl ModeSpectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Coordinate `b^p_l`.
    pub fn b(&self, l: usize, p: usize) -> f64 {
        self.eigenvectors[p * self.dim() + l]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim(), self.dim(), &self.eigenvectors)
    }

    /// Largest deviation of `Σ_p (b_l^p)²` from one over all rows.
    pub fn row_completeness_error(&self) -> f64 {
        let d = self.dim();
        (0..d)
            .map(|l| ((0..d).map(|p| self.b(l, p).powi(2)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest eigenvector weight that couples radial and axial blocks.
    pub fn cross_block_coupling(&self) -> f64 {
        let n = self.n_ions;
        let mut worst = 0.0_f64;
        for p in 0..self.dim() {
            let radial: f64 = (0..2 * n).map(|l| self.b(l, p).powi(2)).sum();
            let axial: f64 = (2 * n..3 * n).map(|l| self.b(l, p).powi(2)).sum();
            worst = worst.max(radial.min(axial));
        }
        worst
    }

    /// Indices of the modes living in the z block.
    pub fn axial_modes(&self) -> Vec<usize> {
        let n = self.n_ions;
        (0..self.dim())
            .filter(|&p| (2 * n..3 * n).map(|l| self.b(l, p).powi(2)).sum::<f64>() > 0.5)
            .collect()
    }
}

/// Per-ion projection constants. `gamma_rad` is along `(x + y)/√2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaFactors {
    pub gamma_x: Vec<f64>,
    pub gamma_y: Vec<f64>,
    pub gamma_z: Vec<f64>,
    pub gamma_rad: Vec<f64>,
    /// Zero modes left out of the sums.
    pub excluded_modes: Vec<usize>,
}

/// Mode angular frequencies with the zero modes flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFrequencies {
    /// rad/s, one per mode.
    pub omega: Vec<f64>,
    pub zero_modes: Vec<usize>,
}

/// Per-ion position variances (m²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionVariances {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub rad: Vec<f64>,
}

/// Per-ion temperatures along each axis (K).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalTemperatures {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

/// Second derivatives of the potential at an equilibrium.
pub fn build_hessian(config: &CrystalConfiguration) -> Result<DMatrix<f64>> {
    let g = config.gradient_norm()?;
    if g > EQUILIBRIUM_TOLERANCE {
        return Err(Error::DegenerateInput(format!(
            "configuration is not an equilibrium: gradient norm {g:e}"
        )));
    }
    potential_hessian(&config.positions, config.alpha, config.beta)
}

/// Diagonalize a Hessian in units of `ω_z²`.
pub fn eigenmodes(hessian: &DMatrix<f64>, omega_z: f64) -> Result<ModeSpectrum> {
    if hessian.nrows() % 3 != 0 {
        return Err(Error::DimensionMismatch {
            expected: 3 * (hessian.nrows() / 3 + 1),
            got: hessian.nrows(),
        });
    }
    let eig = jacobi_eigen(hessian)?;
    let zero_modes = eig
        .values
        .iter()
        .enumerate()
        .filter(|(_, l)| l.abs() < ZERO_MODE_THRESHOLD)
        .map(|(p, _)| p)
        .collect();
    Ok(ModeSpectrum {
        n_ions: hessian.nrows() / 3,
        eigenvalues: eig.values,
        eigenvectors: eig.vectors.as_slice().to_vec(),
        omega_z_ref: omega_z,
        zero_modes,
    })
}

/// Hessian and modes of an equilibrium in one call.
pub fn analyze(config: &CrystalConfiguration, omega_z: f64) -> Result<ModeSpectrum> {
    eigenmodes(&build_hessian(config)?, omega_z)
}

fn unstable(spectrum: &ModeSpectrum) -> Result<()> {
    let bad: Vec<usize> = spectrum
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(p, l)| **l < -STABILITY_TOLERANCE && !spectrum.zero_modes.contains(p))
        .map(|(p, _)| p)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::UnstableModes(bad))
    }
}

/// `ω_p = ω_z √λ_p`; zero modes give 0.
pub fn mode_frequencies(spectrum: &ModeSpectrum, omega_z: f64) -> Result<ModeFrequencies> {
    unstable(spectrum)?;
    let omega = spectrum
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(p, &l)| {
            if spectrum.zero_modes.contains(&p) {
                0.0
            } else {
                omega_z * l.sqrt()
            }
        })
        .collect();
    Ok(ModeFrequencies {
        omega,
        zero_modes: spectrum.zero_modes.clone(),
    })
}

/// `γ²_{m,u} = Σ_p (b^p_{u,m})²/λ_p` and the 45° radial projection
/// `γ²_{m,rad} = Σ_p (b^p_m + b^p_{N+m})²/(2λ_p)`, zero modes excluded.
pub fn gamma_factors(spectrum: &ModeSpectrum) -> Result<GammaFactors> {
    unstable(spectrum)?;
    let n = spectrum.n_ions;
    let mut g2 = vec![[0.0; 4]; n];
    for (p, &l) in spectrum.eigenvalues.iter().enumerate() {
        if spectrum.zero_modes.contains(&p) {
            continue;
        }
        for (m, acc) in g2.iter_mut().enumerate() {
            let (bx, by, bz) = (spectrum.b(m, p), spectrum.b(n + m, p), spectrum.b(2 * n + m, p));
            acc[0] += bx * bx / l;
            acc[1] += by * by / l;
            acc[2] += bz * bz / l;
            acc[3] += (bx + by).powi(2) / (2.0 * l);
        }
    }
    let col = |k: usize| g2.iter().map(|v| v[k].sqrt()).collect();
    Ok(GammaFactors {
        gamma_x: col(0),
        gamma_y: col(1),
        gamma_z: col(2),
        gamma_rad: col(3),
        excluded_modes: spectrum.zero_modes.clone(),
    })
}

/// `⟨δu²⟩ = (k_B T / M ω_z²) γ²`.
pub fn position_variances(
    temperature: f64,
    gammas: &GammaFactors,
    omega_z: f64,
    species: &IonSpecies,
) -> Result<PositionVariances> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature", format!("must be >= 0, got {temperature}")));
    }
    let s = BOLTZMANN * temperature / (species.mass * omega_z * omega_z);
    let v = |g: &[f64]| g.iter().map(|g| s * g * g).collect();
    Ok(PositionVariances {
        x: v(&gammas.gamma_x),
        y: v(&gammas.gamma_y),
        z: v(&gammas.gamma_z),
        rad: v(&gammas.gamma_rad),
    })
}

/// `T_{m,u} = Σ_p (b^p_{u,m})² T_p`.
pub fn project_mode_temperatures(spectrum: &ModeSpectrum, mode_temps: &[f64]) -> Result<DirectionalTemperatures> {
    let d = spectrum.dim();
    if mode_temps.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mode_temps.len(),
        });
    }
    if let Some(t) = mode_temps.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::invalid("mode_temps", format!("must be >= 0, got {t}")));
    }
    let n = spectrum.n_ions;
    let row = |l: usize| (0..d).map(|p| spectrum.b(l, p).powi(2) * mode_temps[p]).sum::<f64>();
    Ok(DirectionalTemperatures {
        x: (0..n).map(row).collect(),
        y: (0..n).map(|m| row(n + m)).collect(),
        z: (0..n).map(|m| row(2 * n + m)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{solve_equilibrium, solve_for_trap, total_potential};
    use crate::units::{khz, TrapParameters};
    use proptest::prelude::*;

    fn spectrum_of(n: usize, alpha: f64, beta: f64) -> ModeSpectrum {
        let c = solve_equilibrium(n, alpha, beta, 0).unwrap();
        analyze(&c, khz(71.0)).unwrap()
    }

    fn axial_values(s: &ModeSpectrum) -> Vec<f64> {
        s.axial_modes().into_iter().map(|p| s.eigenvalues[p]).collect()
    }

    fn fd_hessian(c: &CrystalConfiguration, h: f64) -> DMatrix<f64> {
        let n = c.n_ions;
        let d = 3 * n;
        let f = |flat: &[f64]| {
            let pos: Vec<[f64; 3]> = (0..n).map(|m| [flat[m], flat[n + m], flat[2 * n + m]]).collect();
            total_potential(&pos, c.alpha, c.beta).unwrap()
        };
        let x = c.flat();
        DMatrix::from_fn(d, d, |i, j| {
            let e = |si: f64, sj: f64| {
                let mut y = x.clone();
                y[i] += si * h;
                y[j] += sj * h;
                f(&y)
            };
            (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h)
        })
    }

    #[test]
    fn single_ion_hessian_is_diagonal() {
        let c = solve_equilibrium(1, 4.0, 9.0, 0).unwrap();
        let h = build_hessian(&c).unwrap();
        assert_eq!(h, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0, 1.0])));
        let g = gamma_factors(&eigenmodes(&h, 1.0).unwrap()).unwrap();
        assert!((g.gamma_z[0] - 1.0).abs() < 1e-15);
        assert!((g.gamma_x[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_ion_spectrum() {
        let alpha = (350.0f64 / 71.0).powi(2);
        let s = spectrum_of(2, alpha, alpha);
        let ax = axial_values(&s);
        assert!((ax[0] - 1.0).abs() < 1e-9 && (ax[1] - 3.0).abs() < 1e-9, "{ax:?}");
        let mut radial: Vec<f64> = (0..6).filter(|p| !s.axial_modes().contains(p)).map(|p| s.eigenvalues[p]).collect();
        radial.sort_by(f64::total_cmp);
        let want = [alpha - 1.0, alpha - 1.0, alpha, alpha];
        for (a, b) in radial.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{radial:?}");
        }
        let g = gamma_factors(&s).unwrap();
        for gz in &g.gamma_z {
            assert!((gz - (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn three_ion_axial_spectrum() {
        let s = spectrum_of(3, 30.0, 30.0);
        let ax = axial_values(&s);
        for (a, b) in ax.iter().zip([1.0, 3.0, 29.0 / 5.0]) {
            assert!((a - b).abs() < 1e-9, "{ax:?}");
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let t = TrapParameters::from_khz(105.0, 192.0, 0.05);
        let c = solve_for_trap(6, &t, 0).unwrap();
        let h = build_hessian(&c).unwrap();
        let fd = fd_hessian(&c, 1e-4);
        let scale = h.amax();
        assert!((&h - &fd).amax() < 1e-5 * scale, "{}", (&h - &fd).amax());
    }

    #[test]
    fn non_equilibrium_rejected() {
        let mut c = solve_equilibrium(3, 20.0, 20.0, 0).unwrap();
        c.positions[0][2] += 0.1;
        assert!(build_hessian(&c).is_err());
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let s = eigenmodes(&DMatrix::identity(6, 6), 1.0).unwrap();
        assert!(s.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-15));
        assert!(s.zero_modes.is_empty());
    }

    #[test]
    fn asymmetric_hessian_rejected() {
        let mut h = DMatrix::<f64>::identity(3, 3);
        h[(0, 1)] = 0.3;
        assert!(eigenmodes(&h, 1.0).is_err());
    }

    #[test]
    fn frequencies_from_eigenvalues() {
        let w = khz(71.0);
        let mut s = eigenmodes(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 3.0, 0.0])), w).unwrap();
        let f = mode_frequencies(&s, w).unwrap();
        assert_eq!(f.zero_modes, vec![0]);
        assert_eq!(f.omega[0], 0.0);
        assert!((f.omega[1] - w).abs() < 1e-9);
        assert!((f.omega[2] / khz(1.0) - 122.98).abs() < 0.01);
        s.eigenvalues[0] = -0.5;
        s.zero_modes.clear();
        assert!(matches!(mode_frequencies(&s, w), Err(Error::UnstableModes(v)) if v == vec![0]));
    }

    #[test]
    fn zero_modes_excluded_from_gamma() {
        let s = eigenmodes(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 4.0, 1.0])), 1.0).unwrap();
        let g = gamma_factors(&s).unwrap();
        assert_eq!(g.excluded_modes, vec![0]);
        assert_eq!(g.gamma_x[0], 0.0);
        assert!((g.gamma_y[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_ion_thermal_spread() {
        let species = IonSpecies::calcium40();
        let s = eigenmodes(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![24.0, 24.0, 1.0])), khz(71.0)).unwrap();
        let g = gamma_factors(&s).unwrap();
        let v = position_variances(3.6e-3, &g, khz(71.0), &species).unwrap();
        assert!((v.z[0].sqrt() * 1e6 - 1.94).abs() < 0.005, "{}", v.z[0].sqrt());
        let v2 = position_variances(7.2e-3, &g, khz(71.0), &species).unwrap();
        assert_eq!(v2.z[0], 2.0 * v.z[0]);
        assert_eq!(position_variances(0.0, &g, khz(71.0), &species).unwrap().z[0], 0.0);
        assert!(position_variances(-1.0, &g, khz(71.0), &species).is_err());
    }

    #[test]
    fn mode_temperature_projection() {
        let s = spectrum_of(2, 24.3, 24.3);
        let t = project_mode_temperatures(&s, &[5e-3; 6]).unwrap();
        for v in t.x.iter().chain(&t.y).chain(&t.z) {
            assert!((v - 5e-3).abs() < 1e-15);
        }
        let com = s.axial_modes()[0];
        let mut temps = vec![0.0; 6];
        temps[com] = 2e-3;
        let t = project_mode_temperatures(&s, &temps).unwrap();
        assert!(t.z.iter().all(|v| (v - 1e-3).abs() < 1e-15));
        assert!(t.x.iter().all(|v| *v < 1e-30));
        assert!(project_mode_temperatures(&s, &[0.0; 5]).is_err());
    }

    #[test]
    fn reference_crystals_row_completeness() {
        for (n, ax, rad) in [(8, 71.0, 350.0), (4, 87.0, 185.0), (6, 105.0, 192.0)] {
            let t = TrapParameters::from_khz(ax, rad, 0.05);
            let c = solve_for_trap(n, &t, 0).unwrap();
            let s = analyze(&c, t.omega_z).unwrap();
            assert!(s.row_completeness_error() < 1e-10);
            let b = s.matrix();
            assert!((b.transpose() * &b - DMatrix::<f64>::identity(3 * n, 3 * n)).amax() < 1e-10);
            let g = gamma_factors(&s).unwrap();
            assert!(g.gamma_z.iter().chain(&g.gamma_rad).all(|v| *v > 0.0));
        }
    }

    #[test]
    fn spectrum_serializes() {
        let s = spectrum_of(2, 24.3, 24.3);
        let json = serde_json::to_string(&s).unwrap();
        let back: ModeSpectrum = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn string_eight_gamma_below_one() {
        let t = TrapParameters::from_khz(71.0, 350.0, 0.0);
        let c = solve_for_trap(8, &t, 0).unwrap();
        let g = gamma_factors(&analyze(&c, t.omega_z).unwrap()).unwrap();
        assert!(g.gamma_z.iter().all(|v| *v < 1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn string_modes_invariants(n in 1usize..9, extra in 1.2f64..3.0) {
            // Radial confinement safely above the zigzag threshold.
            let alpha = extra * (0.8 * (n as f64).powf(1.8) + 2.0);
            let s = spectrum_of(n, alpha, alpha * 1.05);
            prop_assert!(s.cross_block_coupling() < 1e-10);
            prop_assert!(s.row_completeness_error() < 1e-10);
            let ax = axial_values(&s);
            prop_assert!((ax[0] - 1.0).abs() < 1e-9);
            let g = gamma_factors(&s).unwrap();
            for gz in &g.gamma_z {
                prop_assert!(*gz <= 1.0 + 1e-12);
                if n >= 2 { prop_assert!(*gz < 1.0); }
            }
        }
    }
}
