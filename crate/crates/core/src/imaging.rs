//! Fluorescence images: synthesis of thermal crystals, 16-bit PGM I/O,
//! spot detection and profile integration.
//!
//! Columns run along the trap axis and rows along the radial direction at
//! 45° between the radial trap axes. Pixel `(col, row)` has its centre at
//! `((col + ½ − W/2)·pitch, (row + ½ − H/2)·pitch)`.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::crystal::{image_plane, CrystalConfiguration};
use crate::error::{Error, Result};
use crate::modes::{gamma_factors, position_variances, ModeSpectrum};
use crate::units::{length_scale, IonSpecies};

pub const DEFAULT_PIXEL_PITCH: f64 = 0.92e-6;
pub const DEFAULT_PSF_SIGMA_AX: f64 = 2.23e-6;
pub const DEFAULT_PSF_SIGMA_RAD: f64 = 2.09e-6;

/// A grayscale image with its imaging calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluorescenceImage {
    pub width: usize,
    pub height: usize,
    /// Metres per pixel.
    pub pixel_pitch: f64,
    pub psf_sigma_ax: f64,
    pub psf_sigma_rad: f64,
    /// Row-major counts, `intensities[row * width + col]`.
    pub intensities: Vec<f64>,
}

impl FluorescenceImage {
    pub fn new(width: usize, height: usize, pixel_pitch: f64, psf_sigma_ax: f64, psf_sigma_rad: f64) -> Result<Self> {
        let img = Self {
            width,
            height,
            pixel_pitch,
            psf_sigma_ax,
            psf_sigma_rad,
            intensities: vec![0.0; width * height],
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Image("image has zero size".into()));
        }
        if self.intensities.len() != self.width * self.height {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                got: self.intensities.len(),
            });
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(Error::invalid("pixel_pitch", "must be > 0"));
        }
        if !(self.psf_sigma_ax >= 0.0 && self.psf_sigma_rad >= 0.0) {
            return Err(Error::invalid("psf_sigma", "must be >= 0"));
        }
        if self.intensities.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Image("negative or NaN intensity".into()));
        }
        Ok(())
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.intensities[row * self.width + col]
    }

    /// Axial coordinate (m) of a column centre.
    pub fn axial_of(&self, col: f64) -> f64 {
        (col + 0.5 - self.width as f64 / 2.0) * self.pixel_pitch
    }

    /// Radial coordinate (m) of a row centre.
    pub fn radial_of(&self, row: f64) -> f64 {
        (row + 0.5 - self.height as f64 / 2.0) * self.pixel_pitch
    }

    /// Fractional column of an axial coordinate.
    pub fn col_of(&self, axial: f64) -> f64 {
        axial / self.pixel_pitch + self.width as f64 / 2.0 - 0.5
    }

    /// Fractional row of a radial coordinate.
    pub fn row_of(&self, radial: f64) -> f64 {
        radial / self.pixel_pitch + self.height as f64 / 2.0 - 0.5
    }

    /// Median pixel value, a robust background estimate.
    pub fn median(&self) -> f64 {
        let mut v = self.intensities.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }
}

/// Rendering parameters for synthetic images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageParams {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch: f64,
    pub psf_sigma_ax: f64,
    pub psf_sigma_rad: f64,
    pub photons_per_ion: f64,
    /// Mean background counts per pixel.
    pub background: f64,
    /// Image-plane position of the crystal centre `[axial, radial]` (m).
    pub offset: [f64; 2],
}

impl Default for ImageParams {
    fn default() -> Self {
        Self {
            width: 256,
            height: 96,
            pixel_pitch: DEFAULT_PIXEL_PITCH,
            psf_sigma_ax: DEFAULT_PSF_SIGMA_AX,
            psf_sigma_rad: DEFAULT_PSF_SIGMA_RAD,
            photons_per_ion: 1e5,
            background: 1.0,
            offset: [0.0, 0.0],
        }
    }
}

/// A rendered spot: one ion's image-plane centre and widths (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderedSpot {
    pub ion: usize,
    pub center: [f64; 2],
    pub sigma_ax: f64,
    pub sigma_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub image: FluorescenceImage,
    pub spots: Vec<RenderedSpot>,
    /// Ion pairs whose spots lie closer than two pixels.
    pub overlapping: Vec<(usize, usize)>,
}

/// Expected counts of a unit-normalized Gaussian integrated over `[a, b]`.
pub fn gaussian_bin(a: f64, b: f64, center: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if center >= a && center < b { 1.0 } else { 0.0 };
    }
    let s = sigma * std::f64::consts::SQRT_2;
    0.5 * (erf((b - center) / s) - erf((a - center) / s))
}

/// Render each ion as a pixel-integrated 2D Gaussian whose variance is the
/// thermal variance (axial `γ_z`, radial `γ_rad`) plus the PSF variance.
/// With `noise_seed` the counts are Poisson samples, otherwise expectations.
pub fn synthesize_image(
    config: &CrystalConfiguration,
    spectrum: &ModeSpectrum,
    species: &IonSpecies,
    temperature: f64,
    params: &ImageParams,
    noise_seed: Option<u64>,
) -> Result<Synthesis> {
    if spectrum.n_ions != config.n_ions {
        return Err(Error::DimensionMismatch {
            expected: config.n_ions,
            got: spectrum.n_ions,
        });
    }
    if !(params.photons_per_ion >= 0.0 && params.background >= 0.0) {
        return Err(Error::invalid("photons_per_ion/background", "must be >= 0"));
    }
    let mut image = FluorescenceImage::new(
        params.width,
        params.height,
        params.pixel_pitch,
        params.psf_sigma_ax,
        params.psf_sigma_rad,
    )?;
    let omega_z = spectrum.omega_z_ref;
    let gammas = gamma_factors(spectrum)?;
    let var = position_variances(temperature, &gammas, omega_z, species)?;
    let l = length_scale(species, omega_z);

    let spots: Vec<RenderedSpot> = config
        .positions
        .iter()
        .enumerate()
        .map(|(m, p)| {
            let ip = image_plane(&[p[0] * l, p[1] * l, p[2] * l]);
            RenderedSpot {
                ion: m,
                center: [ip[0] + params.offset[0], ip[1] + params.offset[1]],
                sigma_ax: (var.z[m] + params.psf_sigma_ax.powi(2)).sqrt(),
                sigma_rad: (var.rad[m] + params.psf_sigma_rad.powi(2)).sqrt(),
            }
        })
        .collect();

    let pitch = params.pixel_pitch;
    let col_edges: Vec<f64> = (0..=params.width).map(|i| image.axial_of(i as f64 - 0.5)).collect();
    let row_edges: Vec<f64> = (0..=params.height).map(|j| image.radial_of(j as f64 - 0.5)).collect();
    let mut expected = vec![params.background; params.width * params.height];
    for s in &spots {
        let cols: Vec<f64> = col_edges
            .windows(2)
            .map(|e| gaussian_bin(e[0], e[1], s.center[0], s.sigma_ax))
            .collect();
        let rows: Vec<f64> = row_edges
            .windows(2)
            .map(|e| gaussian_bin(e[0], e[1], s.center[1], s.sigma_rad))
            .collect();
        for (j, ry) in rows.iter().enumerate() {
            if *ry == 0.0 {
                continue;
            }
            for (i, cx) in cols.iter().enumerate() {
                expected[j * params.width + i] += params.photons_per_ion * ry * cx;
            }
        }
    }
    image.intensities = match noise_seed {
        None => expected,
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            expected
                .into_iter()
                .map(|mu| {
                    if mu > 0.0 {
                        Poisson::new(mu).expect("positive mean").sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };

    let mut overlapping = Vec::new();
    for a in 0..spots.len() {
        for b in (a + 1)..spots.len() {
            let d = (spots[a].center[0] - spots[b].center[0]).hypot(spots[a].center[1] - spots[b].center[1]);
            if d < 2.0 * pitch {
                overlapping.push((a, b));
            }
        }
    }
    Ok(Synthesis {
        image,
        spots,
        overlapping,
    })
}

/// Profile direction: `Axial` sums over rows, `Radial` over columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Axial,
    Radial,
}

/// Pixel rectangle `[col0, col0 + cols) × [row0, row0 + rows)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub col0: usize,
    pub row0: usize,
    pub cols: usize,
    pub rows: usize,
}

impl Roi {
    pub fn full(image: &FluorescenceImage) -> Self {
        Self {
            col0: 0,
            row0: 0,
            cols: image.width,
            rows: image.height,
        }
    }

    /// Box of half-widths `(half_cols, half_rows)` around a fractional
    /// pixel position, clipped to the image.
    pub fn around(image: &FluorescenceImage, col: f64, row: f64, half_cols: f64, half_rows: f64) -> Self {
        let clip = |lo: f64, hi: f64, n: usize| {
            let a = lo.round().max(0.0) as usize;
            let b = (hi.round() as isize + 1).clamp(0, n as isize) as usize;
            (a.min(n), b.max(a.min(n)))
        };
        let (c0, c1) = clip(col - half_cols, col + half_cols, image.width);
        let (r0, r1) = clip(row - half_rows, row + half_rows, image.height);
        Self {
            col0: c0,
            row0: r0,
            cols: c1 - c0,
            rows: r1 - r0,
        }
    }
}

/// Counts summed across the orthogonal direction, with sample coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    /// Coordinate (m) of the first sample's pixel centre.
    pub start: f64,
    pub pitch: f64,
    pub values: Vec<f64>,
}

impl Profile {
    pub fn coordinate(&self, k: usize) -> f64 {
        self.start + k as f64 * self.pitch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn integrate_profile(image: &FluorescenceImage, axis: Axis, roi: &Roi) -> Result<Profile> {
    if roi.cols == 0 || roi.rows == 0 {
        return Err(Error::invalid("roi", "empty region"));
    }
    if roi.col0 + roi.cols > image.width || roi.row0 + roi.rows > image.height {
        return Err(Error::invalid("roi", "extends beyond the image"));
    }
    let (values, start) = match axis {
        Axis::Axial => (
            (roi.col0..roi.col0 + roi.cols)
                .map(|i| (roi.row0..roi.row0 + roi.rows).map(|j| image.get(i, j)).sum())
                .collect(),
            image.axial_of(roi.col0 as f64),
        ),
        Axis::Radial => (
            (roi.row0..roi.row0 + roi.rows)
                .map(|j| (roi.col0..roi.col0 + roi.cols).map(|i| image.get(i, j)).sum())
                .collect(),
            image.radial_of(roi.row0 as f64),
        ),
    };
    Ok(Profile {
        start,
        pitch: image.pixel_pitch,
        values,
    })
}

/// A bright local maximum with a background-subtracted centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedSpot {
    /// Fractional `[col, row]`.
    pub pixel: [f64; 2],
    /// Image-plane `[axial, radial]` (m).
    pub position: [f64; 2],
    pub peak: f64,
}

/// Local maxima of the lightly smoothed image above a quarter of the
/// brightest peak, in column order.
pub fn detect_spots(image: &FluorescenceImage) -> Vec<DetectedSpot> {
    let (w, h) = (image.width, image.height);
    let bg = image.median();
    let smooth = smooth_image(image);
    let top = smooth.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let threshold = bg + 0.25 * (top - bg);
    let r = 2isize;
    let mut spots = Vec::new();
    for j in 0..h {
        for i in 0..w {
            let v = smooth[j * w + i];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'scan: for dj in -r..=r {
                for di in -r..=r {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if ii < 0 || jj < 0 || ii >= w as isize || jj >= h as isize {
                        continue;
                    }
                    let u = smooth[jj as usize * w + ii as usize];
                    // Plateaus resolve to their first pixel in scan order.
                    if u > v || (u == v && (dj < 0 || (dj == 0 && di < 0))) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let (mut sw, mut sc, mut sr) = (0.0, 0.0, 0.0);
            for jj in j.saturating_sub(3)..(j + 4).min(h) {
                for ii in i.saturating_sub(3)..(i + 4).min(w) {
                    let v = (image.get(ii, jj) - bg).max(0.0);
                    sw += v;
                    sc += v * ii as f64;
                    sr += v * jj as f64;
                }
            }
            let pixel = if sw > 0.0 { [sc / sw, sr / sw] } else { [i as f64, j as f64] };
            spots.push(DetectedSpot {
                pixel,
                position: [image.axial_of(pixel[0]), image.radial_of(pixel[1])],
                peak: v - bg,
            });
        }
    }
    spots.sort_by(|a, b| a.pixel[0].total_cmp(&b.pixel[0]));
    spots
}

fn smooth_image(image: &FluorescenceImage) -> Vec<f64> {
    let k = [0.054, 0.244, 0.403, 0.244, 0.054];
    let (w, h) = (image.width, image.height);
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for j in 0..h {
            for i in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for (t, kt) in k.iter().enumerate() {
                    let d = t as isize - 2;
                    let (ii, jj) = if horizontal { (i as isize + d, j as isize) } else { (i as isize, j as isize + d) };
                    if ii >= 0 && jj >= 0 && ii < w as isize && jj < h as isize {
                        s += kt * src[jj as usize * w + ii as usize];
                        n += kt;
                    }
                }
                out[j * w + i] = s / n;
            }
        }
        out
    };
    blur(&blur(&image.intensities, true), false)
}

/// Encode as binary PGM, 16-bit big-endian, calibration in comments.
pub fn encode_pgm(image: &FluorescenceImage) -> Result<Vec<u8>> {
    image.validate()?;
    let mut out = Vec::with_capacity(64 + 2 * image.intensities.len());
    write!(
        out,
        "P5\n# pitch_um={}\n# psf_ax_um={}\n# psf_rad_um={}\n{} {}\n65535\n",
        image.pixel_pitch * 1e6,
        image.psf_sigma_ax * 1e6,
        image.psf_sigma_rad * 1e6,
        image.width,
        image.height
    )
    .expect("writing to a Vec");
    for v in &image.intensities {
        let r = v.round();
        if r > 65535.0 {
            return Err(Error::Image(format!("pixel value {v} exceeds 16-bit range")));
        }
        out.extend_from_slice(&(r as u16).to_be_bytes());
    }
    Ok(out)
}

/// Decode a binary 16-bit PGM written by [`encode_pgm`] or compatible.
pub fn decode_pgm(bytes: &[u8]) -> Result<FluorescenceImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Image("not a binary PGM: magic \"P5\" missing".into()));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    let mut comments = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::Image("truncated header".into()));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        let v: usize = tok
            .parse()
            .map_err(|_| Error::Image(format!("bad header field {tok:?}")))?;
        fields.push(v);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval < 256 {
        return Err(Error::Image(format!(
            "unsupported bit depth: maxval {maxval} is 8-bit; convert to 16-bit (maxval 65535)"
        )));
    }
    if maxval > 65535 {
        return Err(Error::Image(format!("invalid maxval {maxval}")));
    }
    let need = 2 * width * height;
    if bytes.len() < pos + need {
        return Err(Error::Image(format!(
            "truncated payload: {} of {need} bytes",
            bytes.len().saturating_sub(pos)
        )));
    }
    let key = |name: &str| -> Option<f64> {
        comments
            .iter()
            .find_map(|c| c.strip_prefix(name).and_then(|v| v.trim().parse().ok()))
    };
    let pitch = key("pitch_um=").ok_or_else(|| {
        Error::Image("missing \"# pitch_um=<value>\" header comment; add the pixel pitch in micrometres".into())
    })?;
    let intensities = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
        .collect();
    let image = FluorescenceImage {
        width,
        height,
        pixel_pitch: pitch * 1e-6,
        psf_sigma_ax: key("psf_ax_um=").unwrap_or(DEFAULT_PSF_SIGMA_AX * 1e6) * 1e-6,
        psf_sigma_rad: key("psf_rad_um=").unwrap_or(DEFAULT_PSF_SIGMA_RAD * 1e6) * 1e-6,
        intensities,
    };
    image.validate()?;
    Ok(image)
}

pub fn read_image(path: &Path) -> Result<FluorescenceImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Write atomically through a temporary file in the target directory.
pub fn write_image(image: &FluorescenceImage, path: &Path) -> Result<()> {
    crate::output::write_atomic(path, &encode_pgm(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::solve_for_trap;
    use crate::modes::analyze;
    use crate::units::TrapParameters;

    fn single_ion(temperature: f64, params: &ImageParams, seed: Option<u64>) -> Synthesis {
        let t = TrapParameters::from_khz(71.0, 350.0, 0.0);
        let c = solve_for_trap(1, &t, 0).unwrap();
        let s = analyze(&c, t.omega_z).unwrap();
        synthesize_image(&c, &s, &IonSpecies::calcium40(), temperature, params, seed).unwrap()
    }

    fn moments(p: &Profile) -> (f64, f64) {
        let w: f64 = p.values.iter().sum();
        let m = p.values.iter().enumerate().map(|(k, v)| v * p.coordinate(k)).sum::<f64>() / w;
        let v = p.values.iter().enumerate().map(|(k, v)| v * (p.coordinate(k) - m).powi(2)).sum::<f64>() / w;
        (m, v.sqrt())
    }

    #[test]
    fn zero_temperature_spot_is_psf() {
        let params = ImageParams {
            pixel_pitch: 0.1e-6,
            width: 400,
            height: 400,
            background: 0.0,
            ..ImageParams::default()
        };
        let s = single_ion(0.0, &params, None);
        let p = integrate_profile(&s.image, Axis::Axial, &Roi::full(&s.image)).unwrap();
        let (_, sd) = moments(&p);
        // Pixel integration adds pitch²/12 to the moment variance.
        let sd = (sd * sd - params.pixel_pitch.powi(2) / 12.0).sqrt();
        assert!((sd / DEFAULT_PSF_SIGMA_AX - 1.0).abs() < 1e-3, "{sd}");
    }

    #[test]
    fn thermal_spot_width_in_quadrature() {
        let s = single_ion(3.6e-3, &ImageParams::default(), None);
        let sigma = s.spots[0].sigma_ax * 1e6;
        assert!((sigma - 2.95).abs() < 0.01, "{sigma}");
        let oracle = (1.94f64.powi(2) + 2.23f64.powi(2)).sqrt();
        assert!((sigma - oracle).abs() < 0.01);
    }

    #[test]
    fn profile_moments_match_input() {
        let params = ImageParams {
            background: 0.0,
            offset: [3.1e-6, -1.7e-6],
            ..ImageParams::default()
        };
        let s = single_ion(2e-3, &params, None);
        let p = integrate_profile(&s.image, Axis::Axial, &Roi::full(&s.image)).unwrap();
        let (m, sd) = moments(&p);
        let sd = (sd * sd - params.pixel_pitch.powi(2) / 12.0).sqrt();
        assert!((m - 3.1e-6).abs() < 0.01 * s.spots[0].sigma_ax);
        assert!((sd / s.spots[0].sigma_ax - 1.0).abs() < 0.01);
        let q = integrate_profile(&s.image, Axis::Radial, &Roi::full(&s.image)).unwrap();
        let (mr, _) = moments(&q);
        assert!((mr + 1.7e-6).abs() < 0.01 * s.spots[0].sigma_rad);
    }

    #[test]
    fn uniform_image_gives_constant_profile() {
        let mut img = FluorescenceImage::new(10, 6, 1e-6, 1e-6, 1e-6).unwrap();
        img.intensities.iter_mut().for_each(|v| *v = 3.0);
        let p = integrate_profile(&img, Axis::Axial, &Roi::full(&img)).unwrap();
        assert_eq!(p.values, vec![18.0; 10]);
        let roi = Roi {
            col0: 0,
            row0: 0,
            cols: 0,
            rows: 3,
        };
        assert!(integrate_profile(&img, Axis::Axial, &roi).is_err());
    }

    #[test]
    fn split_roi_gives_single_peaks() {
        let t = TrapParameters::from_khz(71.0, 350.0, 0.0);
        let c = solve_for_trap(2, &t, 0).unwrap();
        let s = analyze(&c, t.omega_z).unwrap();
        let syn = synthesize_image(&c, &s, &IonSpecies::calcium40(), 1e-3, &ImageParams::default(), None).unwrap();
        let img = &syn.image;
        let mid = img.width / 2;
        for roi in [
            Roi { col0: 0, row0: 0, cols: mid, rows: img.height },
            Roi { col0: mid, row0: 0, cols: img.width - mid, rows: img.height },
        ] {
            let p = integrate_profile(img, Axis::Axial, &roi).unwrap();
            let peaks = (1..p.len() - 1)
                .filter(|&k| p.values[k] > p.values[k - 1] && p.values[k] >= p.values[k + 1])
                .count();
            assert_eq!(peaks, 1);
        }
    }

    #[test]
    fn noisy_synthesis_is_seeded() {
        let a = single_ion(3e-3, &ImageParams::default(), Some(7));
        let b = single_ion(3e-3, &ImageParams::default(), Some(7));
        let c = single_ion(3e-3, &ImageParams::default(), Some(8));
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, c.image);
        assert!(a.image.intensities.iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn pgm_roundtrip_bitwise() {
        let a = single_ion(3e-3, &ImageParams::default(), Some(1)).image;
        let bytes = encode_pgm(&a).unwrap();
        let b = decode_pgm(&bytes).unwrap();
        assert_eq!(a.intensities, b.intensities);
        assert_eq!(encode_pgm(&b).unwrap(), bytes);
        assert!((b.pixel_pitch - a.pixel_pitch).abs() < 1e-18);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Image(m)) if m.contains("magic")));
        let eight = b"P5\n# pitch_um=0.92\n2 1\n255\n\x01\x02";
        assert!(matches!(decode_pgm(eight), Err(Error::Image(m)) if m.contains("8-bit")));
        let short = b"P5\n# pitch_um=0.92\n2 2\n65535\n\x00\x01";
        assert!(matches!(decode_pgm(short), Err(Error::Image(m)) if m.contains("truncated")));
        let nopitch = b"P5\n1 1\n65535\n\x00\x01";
        assert!(matches!(decode_pgm(nopitch), Err(Error::Image(m)) if m.contains("pitch_um")));
    }

    #[test]
    fn octahedron_shows_overlapped_spot() {
        let t = TrapParameters::from_khz(105.0, 192.0, 0.05);
        let c = solve_for_trap(6, &t, 0).unwrap();
        let s = analyze(&c, t.omega_z).unwrap();
        let syn = synthesize_image(&c, &s, &IonSpecies::calcium40(), 3.1e-3, &ImageParams::default(), Some(3)).unwrap();
        assert_eq!(detect_spots(&syn.image).len(), 5);
    }

    #[test]
    fn string_spots_all_detected() {
        let t = TrapParameters::from_khz(71.0, 350.0, 0.0);
        let c = solve_for_trap(8, &t, 0).unwrap();
        let s = analyze(&c, t.omega_z).unwrap();
        let syn = synthesize_image(&c, &s, &IonSpecies::calcium40(), 3.6e-3, &ImageParams::default(), Some(3)).unwrap();
        let spots = detect_spots(&syn.image);
        assert_eq!(spots.len(), 8);
        for (d, r) in spots.iter().zip(&syn.spots) {
            assert!((d.position[0] - r.center[0]).abs() < 0.5e-6);
        }
        assert!(syn.overlapping.is_empty());
    }
}
