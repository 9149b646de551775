//! Single-patch focus score.
//!
//! The patch is filtered along rows and columns with the HVS kernel, the
//! positive responses are pooled per pixel as `(√a + √b)²`, an adaptive
//! fraction of the strongest pooled features is retained, and the score is
//! the negative log of their central moment. Lower is sharper.
//!
//! Filtering runs in `f32` with the zero-DC form of the convolution, so flat
//! regions produce exactly zero response. Per-pixel arithmetic is identical
//! along both axes and the retained features are summed in sorted order,
//! which makes the score exactly invariant under transposition and flips.

use crate::convolve;
use crate::error::{Error, Result};
use crate::hvsm::HvsmKernel;
use crate::image::{self, GrayImage, PixelBuffer};

pub const MIN_PATCH_SIDE: usize = 64;

/// Constants of `P = α(1 − tanh(β(σ − γ))) + δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retention {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for Retention {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 60.0,
            gamma: 0.095,
            delta: 0.09,
        }
    }
}

impl Retention {
    /// Fraction of pooled features kept for a given upper quantile.
    pub fn proportion(&self, sigma: f64) -> f64 {
        self.alpha * (1.0 - (self.beta * (sigma - self.gamma)).tanh()) + self.delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringParams {
    pub moment_order: u32,
    pub retention: Retention,
    pub percentile: f64,
    pub log_floor: f64,
}

impl Default for ScoringParams {
    fn default() -> Self {
        Self {
            moment_order: 2,
            retention: Retention::default(),
            percentile: 0.95,
            log_floor: 1e-12,
        }
    }
}

impl ScoringParams {
    pub fn validate(&self) -> Result<()> {
        if self.moment_order < 2 || self.moment_order % 2 != 0 {
            return Err(Error::param(
                "moment_order",
                format!("must be even and at least 2, got {}", self.moment_order),
            ));
        }
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(Error::param("percentile", "must lie in (0, 1)"));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::param("log_floor", "must be a small positive number"));
        }
        let r = self.retention;
        if !(r.alpha > 0.0 && r.delta > 0.0 && r.beta.is_finite() && r.gamma.is_finite()) {
            return Err(Error::param("retention", "alpha and delta must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchScore {
    pub raw: f64,
    pub n_retained: usize,
    pub sigma95: f64,
    /// No strictly positive feature was found (e.g. a flat patch).
    pub degenerate: bool,
}

/// Row-wise and column-wise kernel responses of `image`.
pub fn decompose(image: &GrayImage, kernel: &HvsmKernel) -> Result<(GrayImage, GrayImage)> {
    check_support(image.width, image.height, kernel)?;
    let (w, h) = (image.width, image.height);
    let src: Vec<f32> = image.data.iter().map(|&v| v as f32).collect();
    let half = kernel_taps_f32(kernel);
    let mut fx = vec![0.0f32; w * h];
    let mut fy = vec![0.0f32; w * h];
    convolve::derivative_rows(&src, w, h, &half, &mut fx);
    convolve::derivative_cols(&src, w, h, &half, &mut fy);
    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect();
    Ok((GrayImage::new(w, h, widen(fx))?, GrayImage::new(w, h, widen(fy))?))
}

fn kernel_taps_f32(kernel: &HvsmKernel) -> Vec<f32> {
    kernel.half_taps().iter().map(|&t| t as f32).collect()
}

fn check_support(width: usize, height: usize, kernel: &HvsmKernel) -> Result<()> {
    let l = kernel.half_length();
    if width < l || height < l {
        return Err(Error::param(
            "image",
            format!(
                "{width}x{height} patch is smaller than the kernel half-support ({l} samples)"
            ),
        ));
    }
    Ok(())
}

/// Empirical quantile with linear interpolation between order statistics.
/// Reorders `values`.
pub fn quantile_in_place<T: Copy + Into<f64> + PartialOrd>(values: &mut [T], level: f64) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let pos = level * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let cmp = |a: &T, b: &T| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal);
    let (_, lo_val, rest) = values.select_nth_unstable_by(lo, cmp);
    let lo_val: f64 = (*lo_val).into();
    if frac == 0.0 || rest.is_empty() {
        return lo_val;
    }
    let hi_val = rest
        .iter()
        .map(|&v| v.into())
        .fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// [`quantile_in_place`] for positive finite f32 values, which order like
/// their bit patterns.
fn positive_quantile(values: &mut [f32], level: f64) -> f64 {
    let n = values.len();
    let pos = level * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_val, rest) = values.select_nth_unstable_by_key(lo, |v| v.to_bits());
    let lo_val = f64::from(*lo_val);
    match rest.iter().map(|v| v.to_bits()).min() {
        Some(hi) if frac != 0.0 => lo_val + frac * (f64::from(f32::from_bits(hi)) - lo_val),
        _ => lo_val,
    }
}

/// LSD radix sort of non-negative f32 bit patterns, ascending.
fn radix_sort(keys: &mut [u32], scratch: &mut Vec<u32>) {
    const BITS: u32 = 11;
    const MASK: u32 = (1 << BITS) - 1;
    scratch.clear();
    scratch.resize(keys.len(), 0);
    let mut counts = vec![0usize; 1 << BITS];
    let mut in_scratch = false;
    for pass in 0..3 {
        let shift = pass * BITS;
        let (src, dst): (&[u32], &mut [u32]) = if in_scratch {
            (scratch.as_slice(), &mut *keys)
        } else {
            (&*keys, scratch.as_mut_slice())
        };
        counts.iter_mut().for_each(|c| *c = 0);
        for &k in src {
            counts[((k >> shift) & MASK) as usize] += 1;
        }
        if counts.iter().any(|&c| c == src.len()) {
            continue;
        }
        let mut total = 0;
        for c in counts.iter_mut() {
            let here = *c;
            *c = total;
            total += here;
        }
        for &k in src {
            let d = ((k >> shift) & MASK) as usize;
            dst[counts[d]] = k;
            counts[d] += 1;
        }
        in_scratch = !in_scratch;
    }
    if in_scratch {
        keys.copy_from_slice(scratch);
    }
}

/// Reusable buffers for scoring many patches of similar size.
#[derive(Debug, Default)]
pub struct Workspace {
    gray: Vec<f32>,
    maps: Vec<f32>,
    keys: Vec<u32>,
    scratch: Vec<u32>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn score_pixels(
        &mut self,
        image: &PixelBuffer,
        kernel: &HvsmKernel,
        params: &ScoringParams,
    ) -> Result<PatchScore> {
        if !matches!(image.channels, 1 | 3) {
            return Err(Error::param(
                "channels",
                format!("expected 1 or 3 channels, got {}", image.channels),
            ));
        }
        self.score_with(image.width, image.height, kernel, params, |g| {
            if image.channels == 3 {
                g.extend(
                    image
                        .data
                        .chunks_exact(3)
                        .map(|p| image::luma_rgb(p[0], p[1], p[2]) as f32),
                );
            } else {
                g.extend(image.data.iter().map(|&v| image::luma_gray(v) as f32));
            }
        })
    }

    /// Scores the `width × height` window at column `x0` of a row-major
    /// single-precision luma band `stride` samples wide. Gives the same
    /// result as scoring the window as a [`GrayImage`].
    pub fn score_band(
        &mut self,
        band: &[f32],
        stride: usize,
        x0: usize,
        width: usize,
        height: usize,
        kernel: &HvsmKernel,
        params: &ScoringParams,
    ) -> Result<PatchScore> {
        if x0 + width > stride || band.len() < stride * height {
            return Err(Error::param("band", "window lies outside the band"));
        }
        self.score_with(width, height, kernel, params, |g| {
            for y in 0..height {
                g.extend_from_slice(&band[y * stride + x0..y * stride + x0 + width]);
            }
        })
    }

    pub fn score_gray(
        &mut self,
        image: &GrayImage,
        kernel: &HvsmKernel,
        params: &ScoringParams,
    ) -> Result<PatchScore> {
        self.score_with(image.width, image.height, kernel, params, |g| {
            g.extend(image.data.iter().map(|&v| v as f32))
        })
    }

    fn score_with(
        &mut self,
        width: usize,
        height: usize,
        kernel: &HvsmKernel,
        params: &ScoringParams,
        fill: impl FnOnce(&mut Vec<f32>),
    ) -> Result<PatchScore> {
        params.validate()?;
        if width.min(height) < MIN_PATCH_SIDE {
            return Err(Error::param(
                "image",
                format!("{width}x{height} patch is below the {MIN_PATCH_SIDE}px minimum"),
            ));
        }
        check_support(width, height, kernel)?;
        let npix = width * height;
        let half = kernel_taps_f32(kernel);
        self.gray.clear();
        fill(&mut self.gray);
        debug_assert_eq!(self.gray.len(), npix);

        // maps = [F_x | F_y]
        self.maps.clear();
        self.maps.resize(2 * npix, 0.0);
        {
            let (fx, fy) = self.maps.split_at_mut(npix);
            convolve::derivative_rows(&self.gray, width, height, &half, fx);
            convolve::derivative_cols(&self.gray, width, height, &half, fy);
        }

        // Pooled feature per pixel, stored as sortable bit patterns.
        self.keys.clear();
        self.keys.reserve(npix);
        {
            let (fx, fy) = self.maps.split_at(npix);
            self.keys.extend(fx.iter().zip(fy).map(|(&a, &b)| {
                let s = a.max(0.0).sqrt() + b.max(0.0).sqrt();
                (s * s).to_bits()
            }));
        }

        // Compact the strictly positive responses of both axes in place.
        let mut n_pos = 0;
        for i in 0..2 * npix {
            let v = self.maps[i];
            if v > 0.0 {
                self.maps[n_pos] = v;
                n_pos += 1;
            }
        }
        let degenerate = n_pos == 0;
        let sigma95 = if degenerate {
            0.0
        } else {
            positive_quantile(&mut self.maps[..n_pos], params.percentile)
        };

        let p = params.retention.proportion(sigma95);
        let n_retained = ((p * npix as f64).round() as usize).clamp(1, npix);

        if degenerate {
            return Ok(PatchScore {
                raw: -params.log_floor.ln(),
                n_retained,
                sigma95,
                degenerate,
            });
        }

        // Only the retained features need ordering; sorting them fixes the
        // summation order regardless of pixel layout.
        let cut = npix - n_retained;
        if cut > 0 {
            self.keys.select_nth_unstable(cut);
        }
        let top = &mut self.keys[cut..];
        radix_sort(top, &mut self.scratch);
        let top = &*top;
        let count = n_retained as f64;
        let value = |k: &u32| f64::from(f32::from_bits(*k));
        let mean = top.iter().rev().map(value).sum::<f64>() / count;
        let moment = top
            .iter()
            .rev()
            .map(|k| (value(k) - mean).powi(params.moment_order as i32))
            .sum::<f64>()
            / count;
        Ok(PatchScore {
            raw: -moment.max(params.log_floor).ln(),
            n_retained,
            sigma95,
            degenerate,
        })
    }
}

pub fn score_patch(
    image: &PixelBuffer,
    kernel: &HvsmKernel,
    params: &ScoringParams,
) -> Result<PatchScore> {
    Workspace::new().score_pixels(image, kernel, params)
}

pub fn score_gray(
    image: &GrayImage,
    kernel: &HvsmKernel,
    params: &ScoringParams,
) -> Result<PatchScore> {
    Workspace::new().score_gray(image, kernel, params)
}
