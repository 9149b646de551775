//! Symmetric FIR approximations of even-order derivatives that roll off to
//! zero above a cutoff frequency.
//!
//! A filter of half-length `L` has taps `t[-L..=L]` with `t[k] = t[-k]`, so
//! its frequency response is real: `D(ω) = t[0] + 2 Σ t[k] cos(kω)`. The
//! target is
//!
//! ```text
//! (-1)^n ω^{2n}   on [0, ω_c]
//! 0               on [ω_c + Δ, π]
//! ```
//!
//! with `(ω_c, ω_c + Δ)` left unconstrained. Two methods are provided.
//!
//! [`DesignMethod::LeastSquares`] fits the taps by least squares on a
//! uniform grid. The center tap is eliminated through `D(0) = 0` and the
//! curvature at the origin is pinned to the target's (`D''(0) = -2` for the
//! second derivative, `0` above), eliminating `t[1]`. The map from target to
//! taps is the same linear operator for every order, so a linear combination
//! of basis filters is the least-squares fit of the combined target. This is
//! the method kernel synthesis uses.
//!
//! [`DesignMethod::SignPreserving`] builds the taps as the `n`-fold central
//! second difference `[1, -2, 1]` convolved with a symmetric low-pass factor
//! `g` of half-length `L - n`, so `D(ω) = (-1)^n (2 sin(ω/2))^{2n} G(ω)`,
//! with `G(0) = 1` pinned. `G` is fitted by iteratively reweighted least
//! squares (Lawson) toward the smallest peak of the weighted band errors:
//! passband error relative to `max(ω, 0.9 ω_c)^{2n}`, floored by a relative
//! error on `G`, and stop-band magnitude relative to `ω_c^{2n}`. Keeping `G`
//! near its ideal value makes the response carry the target's sign all the
//! way to the origin, which plain least squares does not do for orders
//! above 2.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::SampledSpectrum;

pub const DEFAULT_HALF_LENGTH: usize = 50;
pub const DEFAULT_GRID_POINTS: usize = 4096;
pub const TRANSITION_WIDTH: f64 = 0.2;
pub const MAX_ORDER: usize = 14;
const MAX_CONDITION: f64 = 1e12;
const BAND_TOLERANCE: f64 = 1e-2;
/// Passband errors are measured against the target at `max(ω, 0.9 ω_c)`.
const PASSBAND_EDGE: f64 = 0.9;
/// Relative error floor on the low-pass factor, as a fraction of the band
/// tolerance: `G` stays within 1/4 of its ideal value across the passband.
const SIGN_FLOOR: f64 = BAND_TOLERANCE / 0.25;
const LAWSON_ITERATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeFilter {
    pub order: usize,
    pub cutoff: f64,
    /// Full tap vector of length `2L + 1`, center at index `L`.
    pub taps: Vec<f64>,
}

impl DerivativeFilter {
    pub fn half_length(&self) -> usize {
        self.taps.len() / 2
    }

    /// Taps for `k = 0..=L`.
    pub fn half_taps(&self) -> &[f64] {
        &self.taps[self.half_length()..]
    }

    pub fn response_at(&self, omega: f64) -> f64 {
        symmetric_response(&self.taps, omega)
    }
}

/// Real frequency response of an odd-length symmetric tap vector.
pub fn symmetric_response(taps: &[f64], omega: f64) -> f64 {
    let l = taps.len() / 2;
    let half = &taps[l..];
    let mut acc = 0.0;
    for (k, &t) in half.iter().enumerate().skip(1) {
        acc += t * (k as f64 * omega).cos();
    }
    half[0] + 2.0 * acc
}

pub fn filter_response(filter: &DerivativeFilter, frequencies: &[f64]) -> Result<SampledSpectrum> {
    if let Some(&w) = frequencies
        .iter()
        .find(|&&w| !(0.0..=std::f64::consts::PI).contains(&w))
    {
        return Err(Error::param(
            "frequencies",
            format!("{w} lies outside [0, π]"),
        ));
    }
    let values = frequencies.iter().map(|&w| filter.response_at(w)).collect();
    SampledSpectrum::new(frequencies.to_vec(), values)
}

/// Target response of the ideal `order`-th derivative, `(-1)^n ω^{2n}`.
pub fn ideal_response(order: usize, omega: f64) -> f64 {
    let n = order / 2;
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    sign * omega.powi(order as i32)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMethod {
    #[default]
    LeastSquares,
    SignPreserving,
}

/// Outcome of a filter design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignReport {
    /// Least squares: sum of squared residuals of the normalized system.
    /// Sign preserving: peak weighted band error, where 1 is the `1e-2`
    /// tolerance on each band.
    pub residual: f64,
    /// Condition number of the (first) design matrix.
    pub condition: f64,
}

/// Least-squares design of a low-pass `order`-th derivative filter.
pub fn design_derivative_filter(
    order: usize,
    cutoff: f64,
    half_length: usize,
    grid_points: usize,
) -> Result<DerivativeFilter> {
    design_with_report(DesignMethod::LeastSquares, order, cutoff, half_length, grid_points)
        .map(|(f, _)| f)
}

pub fn design_with_report(
    method: DesignMethod,
    order: usize,
    cutoff: f64,
    half_length: usize,
    grid_points: usize,
) -> Result<(DerivativeFilter, DesignReport)> {
    validate_design(order, cutoff, half_length, grid_points)?;
    match method {
        DesignMethod::LeastSquares => least_squares(order, cutoff, half_length, grid_points),
        DesignMethod::SignPreserving => sign_preserving(order, cutoff, half_length, grid_points),
    }
}

/// Plain least-squares system in the free taps `t[2..=L]`.
struct LsSystem {
    matrix: DMatrix<f64>,
    target: DVector<f64>,
}

fn ls_system(order: usize, cutoff: f64, half_length: usize, grid_points: usize) -> LsSystem {
    let omegas = design_grid(cutoff, grid_points);
    // Target normalized by ω_c^{2n} so entries stay O(1) for high orders.
    // t[1] = curvature - Σ k² t[k].
    let curvature = curvature_moment(order, cutoff);
    let basis = |k: usize, w: f64| 2.0 * ((k as f64 * w).cos() - 1.0);
    let matrix = DMatrix::from_fn(omegas.len(), half_length - 1, |i, j| {
        let k = j + 2;
        basis(k, omegas[i]) - (k * k) as f64 * basis(1, omegas[i])
    });
    let target = DVector::from_iterator(
        omegas.len(),
        omegas.iter().map(|&w| {
            let ideal = if w <= cutoff {
                ideal_response(order, w / cutoff)
            } else {
                0.0
            };
            ideal - curvature * basis(1, w)
        }),
    );
    LsSystem { matrix, target }
}

/// Required `Σ k² t[k]` of the normalized filter: `D''(0) = -2 Σ k² t[k]`
/// must equal the second derivative of `-(ω/ω_c)²` for order 2, else 0.
fn curvature_moment(order: usize, cutoff: f64) -> f64 {
    if order == 2 {
        1.0 / (cutoff * cutoff)
    } else {
        0.0
    }
}

fn design_grid(cutoff: f64, grid_points: usize) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    let stop = cutoff + TRANSITION_WIDTH;
    (0..grid_points)
        .map(|i| pi * i as f64 / (grid_points - 1) as f64)
        .filter(|&w| w <= cutoff || w >= stop)
        .collect()
}

fn least_squares(
    order: usize,
    cutoff: f64,
    half_length: usize,
    grid_points: usize,
) -> Result<(DerivativeFilter, DesignReport)> {
    let LsSystem { matrix, target } = ls_system(order, cutoff, half_length, grid_points);
    let svd = matrix.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { order, condition });
    }
    let free = svd
        .solve(&target, 0.0)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let residual = (&matrix * &free - &target).norm_squared();

    let scale = cutoff.powi(order as i32);
    let mut normalized = vec![0.0; half_length + 1];
    for k in 2..=half_length {
        normalized[k] = free[k - 2];
    }
    normalized[1] = curvature_moment(order, cutoff)
        - (2..=half_length)
            .map(|k| (k * k) as f64 * normalized[k])
            .sum::<f64>();
    let half: Vec<f64> = normalized.iter().map(|t| t * scale).collect();
    Ok((
        from_half(order, cutoff, half),
        DesignReport {
            residual,
            condition,
        },
    ))
}

/// Mirrors `t[0..=L]` into a full tap vector, resetting the center so
/// `D(0) = t0 + 2Σ t_k = 0` holds to rounding.
fn from_half(order: usize, cutoff: f64, mut half: Vec<f64>) -> DerivativeFilter {
    half[0] = -2.0 * half[1..].iter().sum::<f64>();
    let mut taps = Vec::with_capacity(2 * half.len() - 1);
    taps.extend(half[1..].iter().rev());
    taps.extend_from_slice(&half);
    DerivativeFilter {
        order,
        cutoff,
        taps,
    }
}

/// Weighted design system in the free low-pass taps `g[1..=M]`, with
/// `g[0] = 1 - 2 Σ g[j]` eliminated.
struct FactoredSystem {
    matrix: DMatrix<f64>,
    target: DVector<f64>,
    weights: Vec<f64>,
}

fn factored_system(order: usize, cutoff: f64, half_length: usize, grid_points: usize) -> FactoredSystem {
    let m = half_length - order / 2;
    let p = order as i32;
    let edge = PASSBAND_EDGE * cutoff;
    let omegas = design_grid(cutoff, grid_points);
    let matrix = DMatrix::from_fn(omegas.len(), m, |i, j| {
        2.0 * (((j + 1) as f64 * omegas[i]).cos() - 1.0)
    });
    let mut target = DVector::zeros(omegas.len());
    let mut weights = Vec::with_capacity(omegas.len());
    for (i, &w) in omegas.iter().enumerate() {
        let s = 2.0 * (w / 2.0).sin();
        if w <= cutoff {
            let ideal = if w > 0.0 { (w / s).powi(p) } else { 1.0 };
            target[i] = ideal - 1.0;
            weights.push((s / w.max(edge)).powi(p).max(SIGN_FLOOR));
        } else {
            target[i] = -1.0;
            weights.push((s / cutoff).powi(p));
        }
    }
    FactoredSystem {
        matrix,
        target,
        weights,
    }
}

fn sign_preserving(
    order: usize,
    cutoff: f64,
    half_length: usize,
    grid_points: usize,
) -> Result<(DerivativeFilter, DesignReport)> {
    let FactoredSystem {
        matrix,
        target,
        weights,
    } = factored_system(order, cutoff, half_length, grid_points);
    let rows = weights.len();

    let mut lawson = vec![1.0 / rows as f64; rows];
    let mut free = DVector::zeros(matrix.ncols());
    let mut condition = f64::NAN;
    let mut peak = f64::INFINITY;
    for pass in 0..=LAWSON_ITERATIONS {
        let scale: Vec<f64> = weights
            .iter()
            .zip(&lawson)
            .map(|(w, l)| w * l.sqrt())
            .collect();
        let mut a = matrix.clone();
        for (i, &s) in scale.iter().enumerate() {
            a.row_mut(i).scale_mut(s);
        }
        let b = DVector::from_iterator(rows, target.iter().zip(&scale).map(|(t, s)| t * s));
        if pass == 0 {
            let sv = a.clone().singular_values();
            let (smax, smin) = (sv.max(), sv.min());
            condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            if !(condition <= MAX_CONDITION) {
                return Err(Error::IllConditioned { order, condition });
            }
        }
        free = solve_least_squares(a, b)?;
        let errors: Vec<f64> = (&matrix * &free - &target)
            .iter()
            .zip(&weights)
            .map(|(r, w)| (r * w).abs() / BAND_TOLERANCE)
            .collect();
        peak = errors.iter().copied().fold(0.0, f64::max);
        let total: f64 = lawson.iter().zip(&errors).map(|(l, e)| l * e).sum();
        if !(total > 0.0) {
            break;
        }
        for (l, e) in lawson.iter_mut().zip(&errors) {
            *l *= e / total;
        }
    }

    let n = order / 2;
    let m = half_length - n;
    let mut lowpass = vec![0.0; 2 * m + 1];
    lowpass[m] = 1.0 - 2.0 * free.iter().sum::<f64>();
    for j in 1..=m {
        lowpass[m + j] = free[j - 1];
        lowpass[m - j] = free[j - 1];
    }
    let mut full = lowpass;
    for _ in 0..n {
        full = convolve(&full, &[1.0, -2.0, 1.0]);
    }

    Ok((
        from_half(order, cutoff, full[half_length..].to_vec()),
        DesignReport {
            residual: peak,
            condition,
        },
    ))
}

fn validate_design(order: usize, cutoff: f64, half_length: usize, grid_points: usize) -> Result<()> {
    if order < 2 || order > MAX_ORDER || order % 2 != 0 {
        return Err(Error::param(
            "order",
            format!("must be even and within 2..={MAX_ORDER}, got {order}"),
        ));
    }
    let pi = std::f64::consts::PI;
    if !(cutoff > 0.0 && cutoff < pi) {
        return Err(Error::param("cutoff", format!("must lie in (0, π), got {cutoff}")));
    }
    if half_length < order.max(2) {
        return Err(Error::param(
            "half_length",
            format!("must be at least the order ({order}), got {half_length}"),
        ));
    }
    if grid_points < 8 * half_length {
        return Err(Error::param(
            "grid_points",
            format!("must be at least 8·L = {}", 8 * half_length),
        ));
    }
    Ok(())
}

/// Householder QR solve of an overdetermined full-rank system.
fn solve_least_squares(a: DMatrix<f64>, mut b: DVector<f64>) -> Result<DVector<f64>> {
    let cols = a.ncols();
    let qr = a.qr();
    qr.q_tr_mul(&mut b);
    let r = qr.r();
    r.solve_upper_triangular(&b.rows(0, cols).into_owned())
        .ok_or_else(|| Error::Degenerate("singular least-squares system".into()))
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}
