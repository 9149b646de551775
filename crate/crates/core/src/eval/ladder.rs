//! Seeded synthetic focus ladders: periodic multi-octave textures blurred
//! at a sequence of defocus levels.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::{write_png, PixelBuffer};
use crate::optics::{psf_values, PsfModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlurModel {
    /// Defocused PSF at `phase_per_level · level` optical units, sampled
    /// at `pixel_pitch` meters.
    Psf {
        model: PsfModel,
        phase_per_level: f64,
        pixel_pitch: f64,
    },
    /// Gaussian with standard deviation `sigma_per_level · |level|` pixels.
    Gaussian { sigma_per_level: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderConfig {
    /// Side of the square patches in pixels.
    pub size: usize,
    pub blur: BlurModel,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            size: 256,
            blur: BlurModel::Psf {
                model: PsfModel::default(),
                phase_per_level: 1.0,
                pixel_pitch: 0.25e-6,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderPatch {
    pub texture: usize,
    pub level: f64,
    pub image: PixelBuffer,
}

const OCTAVES: usize = 6;
const TEXTURE_MEAN: f64 = 0.5;
const TEXTURE_STD: f64 = 0.14;

/// `count` textures, each rendered at every entry of `levels`; level 0 is
/// the unblurred texture. Output is ordered texture-major.
pub fn make_blur_ladder(
    seed: u64,
    count: usize,
    levels: &[f64],
    config: &LadderConfig,
) -> Result<Vec<LadderPatch>> {
    if count == 0 {
        return Err(Error::param("count", "must be at least 1"));
    }
    if levels.iter().any(|l| !l.is_finite()) {
        return Err(Error::param("levels", "must be finite"));
    }
    let n = config.size;
    if n < 8 {
        return Err(Error::param("size", "must be at least 8"));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let fft2 = |buf: &mut [Complex64], inverse: bool| {
        let plan = if inverse { &inv } else { &fwd };
        for row in buf.chunks_exact_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex64::default(); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            plan.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
    };

    let otfs: Vec<Option<Vec<Complex64>>> = levels
        .iter()
        .map(|&level| {
            if level == 0.0 {
                return Ok(None);
            }
            let mut k = blur_kernel(n, level, &config.blur)?;
            fft2(&mut k, false);
            Ok(Some(k))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(count * levels.len());
    for t in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let mut spectrum = texture_spectrum(n, &mut rng);
        fft2(&mut spectrum, true);
        let field = normalize(spectrum.iter().map(|c| c.re).collect());
        let mut freq: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut freq, false);
        for (&level, otf) in levels.iter().zip(&otfs) {
            let values = match otf {
                None => field.clone(),
                Some(otf) => {
                    let mut buf: Vec<Complex64> =
                        freq.iter().zip(otf).map(|(a, b)| a * b).collect();
                    fft2(&mut buf, true);
                    let scale = 1.0 / (n * n) as f64;
                    buf.iter().map(|c| c.re * scale).collect()
                }
            };
            out.push(LadderPatch {
                texture: t,
                level,
                image: quantize(n, &values)?,
            });
        }
    }
    Ok(out)
}

/// Random-phase spectrum with a few smooth octave bands of random weight.
fn texture_spectrum(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let weights: [f64; OCTAVES] =
        std::array::from_fn(|o| rng.random_range(0.4..1.6) * 0.75f64.powi(o as i32));
    let freq = |i: usize| {
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        k / n as f64
    };
    let mut spec = vec![Complex64::default(); n * n];
    for y in 0..n {
        for x in 0..n {
            let f = freq(x).hypot(freq(y));
            // Two uniforms per bin keep the stream layout simple.
            let (u1, u2): (f64, f64) = (rng.random(), rng.random());
            if f == 0.0 {
                continue;
            }
            let mut amp = 0.0;
            for (o, w) in weights.iter().enumerate() {
                let center = 0.35 / (1u32 << o) as f64;
                let octaves = (f / center).log2();
                amp += w * (-octaves * octaves / (2.0 * 0.35 * 0.35)).exp();
            }
            // Box–Muller magnitude with uniform phase.
            let r = (-2.0 * (1.0 - u1).ln()).sqrt() * amp;
            let phi = std::f64::consts::TAU * u2;
            spec[y * n + x] = Complex64::from_polar(r, phi);
        }
    }
    spec
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let s = if std > 0.0 { TEXTURE_STD / std } else { 0.0 };
    for x in &mut v {
        *x = TEXTURE_MEAN + (*x - mean) * s;
    }
    v
}

fn quantize(n: usize, values: &[f64]) -> Result<PixelBuffer> {
    let data = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    PixelBuffer::new(n, n, 1, data)
}

/// Periodic, unit-sum blur kernel centered at the origin.
fn blur_kernel(n: usize, level: f64, blur: &BlurModel) -> Result<Vec<Complex64>> {
    let wrap = |i: usize| i.min(n - i) as u64;
    let mut kernel = vec![0.0; n * n];
    match *blur {
        BlurModel::Gaussian { sigma_per_level } => {
            let sigma = sigma_per_level * level.abs();
            if !(sigma > 0.0) {
                return Err(Error::param("sigma_per_level", "must be positive"));
            }
            for y in 0..n {
                for x in 0..n {
                    let d2 = (wrap(x).pow(2) + wrap(y).pow(2)) as f64;
                    kernel[y * n + x] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        BlurModel::Psf {
            model,
            phase_per_level,
            pixel_pitch,
        } => {
            model.validate()?;
            if !(pixel_pitch > 0.0) {
                return Err(Error::param("pixel_pitch", "must be positive"));
            }
            // The PSF is radial: evaluate once per distinct squared distance.
            let mut keys: Vec<u64> = (0..=n as u64 / 2)
                .flat_map(|a| (a..=n as u64 / 2).map(move |b| a * a + b * b))
                .collect();
            keys.sort_unstable();
            keys.dedup();
            let radii: Vec<f64> = keys.iter().map(|&k| (k as f64).sqrt() * pixel_pitch).collect();
            let values = psf_values(&model, &radii, phase_per_level * level);
            let lookup: HashMap<u64, f64> = keys.into_iter().zip(values).collect();
            for y in 0..n {
                for x in 0..n {
                    kernel[y * n + x] = lookup[&(wrap(x).pow(2) + wrap(y).pow(2))];
                }
            }
        }
    }
    let sum: f64 = kernel.iter().sum();
    Ok(kernel.iter().map(|&v| Complex64::new(v / sum, 0.0)).collect())
}

/// Writes `tex{T}_z{L}.png` per patch and `labels.csv` (`path, z`) to `dir`.
pub fn write_ladder(dir: &Path, patches: &[LadderPatch]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["path", "z"])?;
    for p in patches {
        let name = format!("tex{:04}_z{}.png", p.texture, p.level);
        write_png(&dir.join(&name), &p.image)?;
        csv.write_record([name, p.level.to_string()])?;
    }
    let bytes = csv
        .into_inner()
        .map_err(|e| Error::Invariant(format!("csv buffer: {e}")))?;
    crate::write_atomic(&dir.join("labels.csv"), &bytes)
}
