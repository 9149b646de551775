//! Synthesis of the HVS-like deblurring kernel.
//!
//! The inverse PSF spectrum is fitted by an even polynomial
//! `Σ c_n (-1)^n ω^{2n}` on the band where it stays numerically tame, and
//! the kernel is assembled as the same linear combination of low-pass
//! derivative filters.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{Error, Result};
use crate::filters::{self, DerivativeFilter};
use crate::json;
use crate::optics::{self, PsfModel, SampledSpectrum};

pub const SCHEMA_VERSION: u64 = 1;
pub const DEFAULT_ORDER_COUNT: usize = 7;
pub const DEFAULT_CUTOFF: f64 = 2.0;
pub const DEFAULT_Z_STAR: f64 = 4.0;
pub const DEFAULT_INSTABILITY_CAP: f64 = 30.0;
pub const DEFAULT_SPECTRUM_GRID: usize = 1024;
pub const DEFAULT_PIXEL_PITCH: f64 = 0.25e-6;

/// Everything needed to synthesize a kernel besides the optics.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDesign {
    pub z_star: f64,
    pub order_count: usize,
    pub cutoff: f64,
    pub half_length: usize,
    pub grid_points: usize,
    pub pixel_pitch: f64,
    pub spectrum_grid: usize,
    pub instability_cap: f64,
}

impl Default for KernelDesign {
    fn default() -> Self {
        Self {
            z_star: DEFAULT_Z_STAR,
            order_count: DEFAULT_ORDER_COUNT,
            cutoff: DEFAULT_CUTOFF,
            half_length: filters::DEFAULT_HALF_LENGTH,
            grid_points: filters::DEFAULT_GRID_POINTS,
            pixel_pitch: DEFAULT_PIXEL_PITCH,
            spectrum_grid: DEFAULT_SPECTRUM_GRID,
            instability_cap: DEFAULT_INSTABILITY_CAP,
        }
    }
}

/// Optical settings recorded alongside a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticsRecord {
    pub na: f64,
    pub wavelength_m: f64,
    pub refractive_index: f64,
    pub pixel_pitch_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HvsmKernel {
    pub coefficients: Vec<f64>,
    pub taps: Vec<f64>,
    pub fit_band_limit: f64,
    pub cutoff: f64,
    pub z_star: f64,
    pub fit_residual: f64,
    pub optics: OpticsRecord,
}

impl HvsmKernel {
    pub fn half_length(&self) -> usize {
        self.taps.len() / 2
    }

    /// Taps for offsets `0..=L`.
    pub fn half_taps(&self) -> &[f64] {
        &self.taps[self.half_length()..]
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn response_at(&self, omega: f64) -> f64 {
        filters::symmetric_response(&self.taps, omega)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.len() % 2 == 0 {
            return Err(Error::Invariant(format!(
                "taps must have odd length, got {}",
                self.taps.len()
            )));
        }
        if self.taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invariant("taps must be finite".into()));
        }
        let n = self.taps.len();
        if (0..n / 2).any(|k| self.taps[k] != self.taps[n - 1 - k]) {
            return Err(Error::Invariant("taps are not symmetric".into()));
        }
        if !(self.fit_residual >= 0.0) {
            return Err(Error::Invariant("fit_residual must be non-negative".into()));
        }
        if self.coefficients.is_empty() {
            return Err(Error::Invariant("coefficients must not be empty".into()));
        }
        Ok(())
    }
}

/// Result of the polynomial fit to the inverse spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFit {
    pub coefficients: Vec<f64>,
    pub band_limit: f64,
    pub residual: f64,
}

/// Pointwise reciprocal of a spectrum; zeros are reported with their
/// frequency.
pub fn invert_spectrum(spectrum: &SampledSpectrum) -> Result<SampledSpectrum> {
    let mut values = Vec::with_capacity(spectrum.len());
    for (w, v) in spectrum.iter() {
        let inv = 1.0 / v;
        if !inv.is_finite() {
            return Err(Error::NonFiniteSpectrum { omega: w });
        }
        values.push(inv);
    }
    SampledSpectrum::new(spectrum.frequencies().to_vec(), values)
}

/// Largest grid frequency up to which the inverse spectrum stays at or
/// below `instability_cap`, further limited to `band_limit_cap`.
pub fn select_band_limit(
    inverse: &SampledSpectrum,
    instability_cap: f64,
    band_limit_cap: f64,
) -> Option<(usize, f64)> {
    let mut last = None;
    for (i, (w, v)) in inverse.iter().enumerate() {
        if v > instability_cap || w > band_limit_cap {
            break;
        }
        last = Some((i, w));
    }
    last
}

/// Fits `Σ c_n (-1)^n ω^{2n}`, `n = 1..=order_count`, to the inverse
/// spectrum on `[0, ω_t]`.
pub fn fit_coefficients(
    inverse: &SampledSpectrum,
    order_count: usize,
    band_limit_cap: f64,
    instability_cap: f64,
) -> Result<CoefficientFit> {
    if order_count == 0 {
        return Err(Error::param("order_count", "must be at least 1"));
    }
    if let Some((w, _)) = inverse.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteSpectrum { omega: w });
    }
    let (last, band_limit) = select_band_limit(inverse, instability_cap, band_limit_cap)
        .filter(|&(_, w)| w > 0.0)
        .ok_or_else(|| {
            Error::Degenerate("inverse spectrum exceeds the instability cap at ω = 0".into())
        })?;
    let rows = last + 1;
    if rows < order_count + 1 {
        return Err(Error::Degenerate(format!(
            "fit band holds {rows} samples, need more than {order_count}"
        )));
    }
    let freqs = &inverse.frequencies()[..rows];
    let target = DVector::from_row_slice(&inverse.values()[..rows]);

    // Columns are evaluated at ω/ω_t so the Vandermonde block stays O(1).
    let design = DMatrix::from_fn(rows, order_count, |i, j| {
        filters::ideal_response(2 * (j + 1), freqs[i] / band_limit)
    });
    let scaled = design
        .clone()
        .svd(true, true)
        .solve(&target, 0.0)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let fitted = &design * &scaled;
    let norm = target.norm();
    let residual = if norm > 0.0 {
        (&target - fitted).norm() / norm
    } else {
        0.0
    };
    let coefficients = scaled
        .iter()
        .enumerate()
        .map(|(j, &b)| b / band_limit.powi(2 * (j as i32 + 1)))
        .collect();
    Ok(CoefficientFit {
        coefficients,
        band_limit,
        residual,
    })
}

/// Elementwise `Σ coefficients[n] · basis[n].taps`.
pub fn combine_basis(basis: &[DerivativeFilter], coefficients: &[f64]) -> Result<Vec<f64>> {
    if basis.len() != coefficients.len() || basis.is_empty() {
        return Err(Error::param(
            "coefficients",
            format!("{} coefficients for {} basis filters", coefficients.len(), basis.len()),
        ));
    }
    let len = basis[0].taps.len();
    if basis.iter().any(|b| b.taps.len() != len) {
        return Err(Error::param("basis", "filters differ in length"));
    }
    let mut taps = vec![0.0; len];
    for (b, &c) in basis.iter().zip(coefficients) {
        for (t, &d) in taps.iter_mut().zip(&b.taps) {
            *t += c * d;
        }
    }
    Ok(taps)
}

/// Designs the `order_count` even-derivative basis filters.
pub fn design_basis(design: &KernelDesign) -> Result<Vec<DerivativeFilter>> {
    (1..=design.order_count)
        .map(|n| {
            filters::design_derivative_filter(
                2 * n,
                design.cutoff,
                design.half_length,
                design.grid_points,
            )
        })
        .collect()
}

pub fn synthesize_kernel(model: &PsfModel, design: &KernelDesign) -> Result<HvsmKernel> {
    model.validate()?;
    if !design.z_star.is_finite() {
        return Err(Error::param("z_star", "must be finite"));
    }
    let spectrum = optics::psf_spectrum(
        model,
        design.z_star,
        design.pixel_pitch,
        design.spectrum_grid,
    )?;
    let inverse = invert_spectrum(&spectrum)?;
    let fit = fit_coefficients(
        &inverse,
        design.order_count,
        design.cutoff,
        design.instability_cap,
    )?;
    let basis = design_basis(design)?;
    let taps = combine_basis(&basis, &fit.coefficients)?;
    Ok(HvsmKernel {
        coefficients: fit.coefficients,
        taps,
        fit_band_limit: fit.band_limit,
        cutoff: design.cutoff,
        z_star: design.z_star,
        fit_residual: fit.residual,
        optics: OpticsRecord {
            na: model.numerical_aperture,
            wavelength_m: model.wavelength,
            refractive_index: model.refractive_index,
            pixel_pitch_m: design.pixel_pitch,
        },
    })
}

pub fn kernel_to_json(kernel: &HvsmKernel) -> String {
    let v = json!({
        "schema_version": SCHEMA_VERSION,
        "coefficients": kernel.coefficients,
        "taps": kernel.taps,
        "cutoff": kernel.cutoff,
        "fit_band_limit": kernel.fit_band_limit,
        "z_star": kernel.z_star,
        "optics": {
            "na": kernel.optics.na,
            "wavelength_m": kernel.optics.wavelength_m,
            "refractive_index": kernel.optics.refractive_index,
            "pixel_pitch_m": kernel.optics.pixel_pitch_m,
        },
        "fit_residual": kernel.fit_residual,
    });
    serde_json::to_string_pretty(&v).expect("kernel JSON serialization")
}

pub fn kernel_from_json(text: &str) -> Result<HvsmKernel> {
    let obj = json::parse_object(text)?;
    let version = json::u64_field(&obj, "schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::Parse {
            field: "schema_version".into(),
            message: format!("unsupported version {version}"),
        });
    }
    let optics = json::object_field(&obj, "optics")?;
    let kernel = HvsmKernel {
        coefficients: json::f64_array(&obj, "coefficients")?,
        taps: json::f64_array(&obj, "taps")?,
        cutoff: json::f64_field(&obj, "cutoff")?,
        fit_band_limit: json::f64_field(&obj, "fit_band_limit")?,
        z_star: json::f64_field(&obj, "z_star")?,
        fit_residual: json::f64_field(&obj, "fit_residual")?,
        optics: OpticsRecord {
            na: json::f64_field(optics, "na")?,
            wavelength_m: json::f64_field(optics, "wavelength_m")?,
            refractive_index: json::f64_field(optics, "refractive_index")?,
            pixel_pitch_m: json::f64_field(optics, "pixel_pitch_m")?,
        },
    };
    kernel.validate()?;
    Ok(kernel)
}

pub fn save_kernel(kernel: &HvsmKernel, path: &Path) -> Result<()> {
    json::write_atomic(path, kernel_to_json(kernel).as_bytes())
}

pub fn load_kernel(path: &Path) -> Result<HvsmKernel> {
    kernel_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_spectrum(f: impl Fn(f64) -> f64, upto: f64, points: usize) -> SampledSpectrum {
        let freqs: Vec<f64> = (0..points)
            .map(|i| upto * i as f64 / (points - 1) as f64)
            .collect();
        let vals = freqs.iter().map(|&w| f(w)).collect();
        SampledSpectrum::new(freqs, vals).unwrap()
    }

    #[test]
    fn in_span_target_is_recovered_exactly() {
        let s = grid_spectrum(|w| w * w, 2.0, 200);
        let fit = fit_coefficients(&s, 1, 10.0, 30.0).unwrap();
        assert!((fit.coefficients[0] + 1.0).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn out_of_span_target_leaves_residual() {
        let s = grid_spectrum(|w| 1.0 + w * w, 2.0, 200);
        let fit = fit_coefficients(&s, 1, 10.0, 30.0).unwrap();
        assert!(fit.residual > 1e-3);
    }

    #[test]
    fn three_term_recovery() {
        let a = [-2.0, 0.5, -0.01];
        let s = grid_spectrum(
            |w| {
                a.iter()
                    .enumerate()
                    .map(|(j, c)| c * filters::ideal_response(2 * (j + 1), w))
                    .sum()
            },
            std::f64::consts::PI,
            1024,
        );
        let fit = fit_coefficients(&s, 3, 10.0, 1e9).unwrap();
        for (got, want) in fit.coefficients.iter().zip(a) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn band_limit_respects_instability_cap() {
        let s = grid_spectrum(|w| (3.0 * w).exp(), std::f64::consts::PI, 1024);
        let fit = fit_coefficients(&s, 2, 10.0, 30.0).unwrap();
        assert!(fit.band_limit <= 30f64.ln() / 3.0 + 1e-12);
        let next = s.frequencies().iter().find(|&&w| w > fit.band_limit).unwrap();
        assert!((3.0 * next).exp() > 30.0);
        let capped = fit_coefficients(&s, 2, 0.5, 30.0).unwrap();
        assert!(capped.band_limit <= 0.5);
    }

    #[test]
    fn zero_in_spectrum_names_frequency() {
        let s = SampledSpectrum::new(vec![0.0, 0.5, 1.0], vec![1.0, 0.0, 0.5]).unwrap();
        match invert_spectrum(&s) {
            Err(Error::NonFiniteSpectrum { omega }) => assert_eq!(omega, 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_basis_identity_combination() {
        let b = filters::design_derivative_filter(4, 2.0, 12, 512).unwrap();
        let taps = combine_basis(std::slice::from_ref(&b), &[1.0]).unwrap();
        assert_eq!(taps, b.taps);
    }

    #[test]
    fn load_reports_missing_taps() {
        let k = synthesize_kernel(&PsfModel::default(), &KernelDesign::default()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&kernel_to_json(&k)).unwrap();
        v.as_object_mut().unwrap().remove("taps");
        match kernel_from_json(&v.to_string()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "taps"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_asymmetric_taps() {
        let k = synthesize_kernel(&PsfModel::default(), &KernelDesign::default()).unwrap();
        let mut bad = k.clone();
        bad.taps[0] += 1e-3;
        assert!(matches!(
            kernel_from_json(&kernel_to_json(&bad)),
            Err(Error::Invariant(_))
        ));
    }
}
