//! Separable convolution with a symmetric kernel and half-sample mirror
//! boundaries (`x[-1] = x[0]`).
//!
//! Every output sample is accumulated as
//! `t[0]·x[i] + Σ_k t[k]·(x[i-k] + x[i+k])` in increasing `k`, identically
//! along rows and columns, so transposing the input transposes the output
//! bit for bit.
//!
//! The `derivative_*` variants assume the taps sum to zero and evaluate
//! `Σ_k t[k]·(x[i-k] + x[i+k] - 2·x[i])` instead, which maps constant input
//! to exactly zero at any precision. `t[0]` is not read.

use std::ops::{Add, Mul, Sub};

/// Sample type the convolution routines operate on.
pub trait Sample:
    Copy + Default + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self>
{
}

impl Sample for f32 {}
impl Sample for f64 {}

/// Maps an out-of-range index onto `[0, n)` by half-sample reflection.
/// Valid for `-n <= i < 2n`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    j as usize
}

/// `out = Σ_k t[k]·(a_k + b_k [- 2c])`, accumulated in increasing `k` for
/// every element.
#[inline(always)]
fn accumulate<'a, T: Sample + 'a, const ZERO_DC: bool>(
    half: &[T],
    center: &[T],
    twice: &mut [T],
    mut taps: impl FnMut(usize) -> (&'a [T], &'a [T]),
    out: &mut [T],
) {
    let n = out.len();
    let center = &center[..n];
    if ZERO_DC {
        let twice = &mut twice[..n];
        for (t, &c) in twice.iter_mut().zip(center) {
            *t = c + c;
        }
        out.iter_mut().for_each(|o| *o = T::default());
    } else {
        let t0 = half[0];
        for (o, &c) in out.iter_mut().zip(center) {
            *o = t0 * c;
        }
    }
    for (k, &t) in half.iter().enumerate().skip(1) {
        let (a, b) = taps(k);
        let a = &a[..n];
        let b = &b[..n];
        if ZERO_DC {
            let twice = &twice[..n];
            for i in 0..n {
                out[i] = out[i] + t * (a[i] + b[i] - twice[i]);
            }
        } else {
            for i in 0..n {
                out[i] = out[i] + t * (a[i] + b[i]);
            }
        }
    }
}

/// Row-wise convolution of a `width × height` image.
///
/// `half` holds taps for offsets `0..=L`; requires `L <= width`.
pub fn convolve_rows<T: Sample>(src: &[T], width: usize, height: usize, half: &[T], dst: &mut [T]) {
    rows::<T, false>(src, width, height, half, dst)
}

/// Column-wise convolution; requires `L <= height`.
pub fn convolve_cols<T: Sample>(src: &[T], width: usize, height: usize, half: &[T], dst: &mut [T]) {
    cols::<T, false>(src, width, height, half, dst)
}

/// Zero-DC row filtering, see the module docs.
pub fn derivative_rows<T: Sample>(src: &[T], width: usize, height: usize, half: &[T], dst: &mut [T]) {
    rows::<T, true>(src, width, height, half, dst)
}

/// Zero-DC column filtering, see the module docs.
pub fn derivative_cols<T: Sample>(src: &[T], width: usize, height: usize, half: &[T], dst: &mut [T]) {
    cols::<T, true>(src, width, height, half, dst)
}

fn rows<T: Sample, const ZERO_DC: bool>(
    src: &[T],
    width: usize,
    height: usize,
    half: &[T],
    dst: &mut [T],
) {
    let l = half.len() - 1;
    debug_assert!(l <= width);
    let mut padded = vec![T::default(); width + 2 * l];
    let mut twice = vec![T::default(); width];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for (j, p) in padded.iter_mut().enumerate() {
            *p = row[reflect(j as isize - l as isize, width)];
        }
        let out = &mut dst[y * width..(y + 1) * width];
        let p = &padded[..];
        accumulate::<T, ZERO_DC>(half, row, &mut twice, |k| (&p[l - k..], &p[l + k..]), out);
    }
}

fn cols<T: Sample, const ZERO_DC: bool>(
    src: &[T],
    width: usize,
    height: usize,
    half: &[T],
    dst: &mut [T],
) {
    let l = half.len() - 1;
    debug_assert!(l <= height);
    // Column strips keep the 2L+1 contributing row segments cache resident.
    const STRIP: usize = 256;
    let mut twice = vec![T::default(); STRIP.min(width)];
    let mut x0 = 0;
    while x0 < width {
        let x1 = (x0 + STRIP).min(width);
        for y in 0..height {
            let base = y * width;
            let out = &mut dst[base + x0..base + x1];
            accumulate::<T, ZERO_DC>(
                half,
                &src[base + x0..base + x1],
                &mut twice,
                |k| {
                    let up = reflect(y as isize - k as isize, height) * width;
                    let down = reflect((y + k) as isize, height) * width;
                    (&src[up + x0..up + x1], &src[down + x0..down + x1])
                },
                out,
            );
        }
        x0 = x1;
    }
}

/// Direct 1-D convolution of `signal` with the full symmetric `taps`, using
/// the same reflection rule. Reference implementation for tests.
pub fn convolve_1d(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let l = taps.len() / 2;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &t) in taps.iter().enumerate() {
                let offset = j as isize - l as isize;
                acc += t * signal[reflect(i as isize - offset, n)];
            }
            acc
        })
        .collect()
}
