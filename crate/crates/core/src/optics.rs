//! Scalar defocus point spread function of a circular-pupil objective.
//!
//! The PSF is evaluated as the squared modulus of the pupil integral
//!
//! ```text
//! h(r, z) = | C ∫₀¹ J₀(k·NA/n · r · ρ) · exp(-i·z·ρ²) · ρ dρ |²
//! ```
//!
//! where `r` is a physical lateral distance in meters and `z` is the axial
//! defocus in depth units: one unit is the physical offset for which
//! `k·(NA/n)²·z/2` equals one radian, i.e. `z` is the defocus phase at the
//! pupil rim.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width, in samples, of the discrete profile fed to the DTFT.
pub const PROFILE_HALF_WIDTH: usize = 64;

/// Smallest frequency grid accepted by [`psf_spectrum`].
pub const MIN_SPECTRUM_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfModel {
    pub numerical_aperture: f64,
    pub refractive_index: f64,
    /// Wavelength in meters.
    pub wavelength: f64,
    pub normalization: f64,
    pub quadrature_nodes: usize,
}

impl Default for PsfModel {
    fn default() -> Self {
        Self {
            numerical_aperture: 0.75,
            refractive_index: 1.0,
            wavelength: 550e-9,
            normalization: 2.0,
            quadrature_nodes: 128,
        }
    }
}

impl PsfModel {
    pub fn new(numerical_aperture: f64, refractive_index: f64, wavelength: f64) -> Result<Self> {
        let model = Self {
            numerical_aperture,
            refractive_index,
            wavelength,
            ..Self::default()
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_quadrature_nodes(mut self, nodes: usize) -> Result<Self> {
        self.quadrature_nodes = nodes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let na = self.numerical_aperture;
        let n = self.refractive_index;
        if !(na.is_finite() && na > 0.0) {
            return Err(Error::param("numerical_aperture", "must be positive"));
        }
        if !(n.is_finite() && na <= n) {
            return Err(Error::param(
                "numerical_aperture",
                format!("must not exceed the refractive index ({na} > {n})"),
            ));
        }
        if !(self.wavelength.is_finite() && self.wavelength > 0.0) {
            return Err(Error::param("wavelength", "must be positive"));
        }
        if !self.normalization.is_finite() {
            return Err(Error::param("normalization", "must be finite"));
        }
        if self.quadrature_nodes < 16 {
            return Err(Error::param("quadrature_nodes", "must be at least 16"));
        }
        Ok(())
    }

    /// Angular wavenumber `k = 2π/λ`.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Lateral scale `k·NA/n` in radians per meter.
    pub fn lateral_scale(&self) -> f64 {
        self.wavenumber() * self.numerical_aperture / self.refractive_index
    }

    /// Physical defocus in meters corresponding to one depth unit.
    pub fn depth_unit(&self) -> f64 {
        let s = self.numerical_aperture / self.refractive_index;
        2.0 / (self.wavenumber() * s * s)
    }
}

/// Zero-order Bessel function of the first kind.
///
/// Power series below |x| = 12, Hankel asymptotic expansion above. At the
/// crossover both branches are accurate to about 1e-12 absolute.
pub fn bessel_j0(x: f64) -> f64 {
    let x = x.abs();
    if x < 12.0 {
        j0_series(x)
    } else {
        j0_asymptotic(x)
    }
}

fn j0_series(x: f64) -> f64 {
    let q = -0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs().max(1e-300) && k > 2.0 {
            break;
        }
        k += 1.0;
        if k > 200.0 {
            break;
        }
    }
    sum
}

fn j0_asymptotic(x: f64) -> f64 {
    // |a_k| = ((2k-1)!!)² / (k! 8^k); P = Σ (-1)^j |a_2j| x^-2j and
    // Q = -Σ (-1)^j |a_2j+1| x^-(2j+1).
    let mut p = 0.0;
    let mut q = 0.0;
    let mut a = 1.0;
    let mut prev = f64::INFINITY;
    let inv = 1.0 / x;
    let mut pow = 1.0;
    for k in 0..60usize {
        if k > 0 {
            let odd = (2 * k - 1) as f64;
            a *= odd * odd / (k as f64 * 8.0);
            pow *= inv;
        }
        let t = a * pow;
        if t > prev {
            break;
        }
        prev = t;
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        if k % 2 == 0 {
            p += sign * t;
        } else {
            q -= sign * t;
        }
        if t < 1e-17 {
            break;
        }
    }
    let chi = x - 0.25 * PI;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Gauss–Legendre nodes and weights mapped onto `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    let nf = n as f64;
    for i in 0..n {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Evaluates the PSF at lateral distance `r` (meters) and defocus `z`
/// (optical units).
pub fn psf_value(model: &PsfModel, r: f64, z: f64) -> f64 {
    let nodes = gauss_legendre_unit(model.quadrature_nodes);
    psf_value_with(model, &nodes, r, z)
}

/// [`psf_value`] at each of `radii`, sharing one quadrature rule.
pub fn psf_values(model: &PsfModel, radii: &[f64], z: f64) -> Vec<f64> {
    let nodes = gauss_legendre_unit(model.quadrature_nodes);
    radii
        .iter()
        .map(|&r| psf_value_with(model, &nodes, r, z))
        .collect()
}

fn psf_value_with(model: &PsfModel, nodes: &[(f64, f64)], r: f64, z: f64) -> f64 {
    let v = model.lateral_scale() * r;
    let mut re = 0.0;
    let mut im = 0.0;
    for &(rho, w) in nodes {
        let amp = bessel_j0(v * rho) * rho * w;
        let phase = -z * rho * rho;
        re += amp * phase.cos();
        im += amp * phase.sin();
    }
    let c = model.normalization;
    c * c * (re * re + im * im)
}

/// Samples the PSF on `samples` uniformly spaced points over
/// `[-r_max, r_max]`. `samples` must be odd so that `r = 0` is included.
pub fn psf_radial_profile(
    model: &PsfModel,
    z: f64,
    r_max: f64,
    samples: usize,
) -> Result<Vec<(f64, f64)>> {
    model.validate()?;
    if !(r_max.is_finite() && r_max > 0.0) {
        return Err(Error::param("r_max", "must be positive"));
    }
    if samples < 3 || samples % 2 == 0 {
        return Err(Error::param(
            "samples",
            format!("must be odd and at least 3, got {samples}"),
        ));
    }
    let nodes = gauss_legendre_unit(model.quadrature_nodes);
    let half = samples / 2;
    let step = r_max / half as f64;
    let positive: Vec<f64> = (0..=half)
        .map(|j| psf_value_with(model, &nodes, j as f64 * step, z))
        .collect();
    let mut out = Vec::with_capacity(samples);
    for j in (1..=half).rev() {
        out.push((-(j as f64) * step, positive[j]));
    }
    for (j, &v) in positive.iter().enumerate() {
        out.push((j as f64 * step, v));
    }
    Ok(out)
}

/// A real spectrum sampled on an ascending, non-negative frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSpectrum {
    frequencies: Vec<f64>,
    values: Vec<f64>,
}

impl SampledSpectrum {
    pub fn new(frequencies: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if frequencies.len() != values.len() {
            return Err(Error::param(
                "values",
                format!(
                    "length {} does not match {} frequencies",
                    values.len(),
                    frequencies.len()
                ),
            ));
        }
        if frequencies.first().is_some_and(|&w| !(w >= 0.0)) {
            return Err(Error::param("frequencies", "must start at or above 0"));
        }
        if frequencies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("frequencies", "must be strictly increasing"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSpectrum {
                omega: frequencies[i],
            });
        }
        Ok(Self {
            frequencies,
            values,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.frequencies.iter().copied().zip(self.values.iter().copied())
    }
}

/// `grid` uniformly spaced frequencies covering `[0, π]` inclusive.
pub fn uniform_frequencies(grid: usize) -> Vec<f64> {
    let last = (grid - 1) as f64;
    (0..grid).map(|i| PI * i as f64 / last).collect()
}

/// Magnitude of the DTFT of an even sequence given by its non-negative half
/// (`half[0]` is the center tap), normalized so the value at ω = 0 is 1.
pub fn even_profile_spectrum(half: &[f64], grid: usize) -> Result<SampledSpectrum> {
    if grid < 2 {
        return Err(Error::param("grid", "needs at least two points"));
    }
    let dc: f64 = half[0] + 2.0 * half[1..].iter().sum::<f64>();
    if !(dc.is_finite() && dc != 0.0) {
        return Err(Error::Degenerate("profile has zero DC gain".into()));
    }
    let frequencies = uniform_frequencies(grid);
    let values = frequencies
        .iter()
        .map(|&w| {
            let acc: f64 = half[1..]
                .iter()
                .enumerate()
                .map(|(j, &h)| h * ((j + 1) as f64 * w).cos())
                .sum();
            ((half[0] + 2.0 * acc) / dc).abs()
        })
        .collect();
    SampledSpectrum::new(frequencies, values)
}

/// Spectrum of the PSF slice at defocus `z`, sampled at `pixel_pitch`
/// meters per sample, on `grid` frequencies over `[0, π]` rad/sample.
pub fn psf_spectrum(
    model: &PsfModel,
    z: f64,
    pixel_pitch: f64,
    grid: usize,
) -> Result<SampledSpectrum> {
    model.validate()?;
    if !(pixel_pitch.is_finite() && pixel_pitch > 0.0) {
        return Err(Error::param("pixel_pitch", "must be positive"));
    }
    if grid < MIN_SPECTRUM_GRID {
        return Err(Error::param(
            "grid",
            format!("{grid} frequency points is too coarse (minimum {MIN_SPECTRUM_GRID})"),
        ));
    }
    let nodes = gauss_legendre_unit(model.quadrature_nodes);
    let half: Vec<f64> = (0..=PROFILE_HALF_WIDTH)
        .map(|j| psf_value_with(model, &nodes, j as f64 * pixel_pitch, z))
        .collect();
    even_profile_spectrum(&half, grid)
}
