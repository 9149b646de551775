//! Accuracy measures, significance testing and threshold sweeps.

mod ladder;

pub use ladder::{make_blur_ladder, write_ladder, BlurModel, LadderConfig, LadderPatch};

use nalgebra::{Matrix4, Vector4};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::wsi::acceptance_ratio;

/// Predictions paired with ground truth, item by item.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    predictions: Vec<f64>,
    truths: Vec<f64>,
}

impl PairedSamples {
    pub fn new(predictions: Vec<f64>, truths: Vec<f64>) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::param(
                "samples",
                format!(
                    "{} predictions for {} truths",
                    predictions.len(),
                    truths.len()
                ),
            ));
        }
        if predictions.is_empty() {
            return Err(Error::param("samples", "empty"));
        }
        if predictions.iter().chain(&truths).any(|v| !v.is_finite()) {
            return Err(Error::param("samples", "values must be finite"));
        }
        Ok(Self {
            predictions,
            truths,
        })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn truths(&self) -> &[f64] {
        &self.truths
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    fn require(&self, n: usize) -> Result<()> {
        if self.len() < n {
            return Err(Error::param(
                "samples",
                format!("need at least {n} pairs, got {}", self.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationReport {
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub rmse: f64,
    pub n: usize,
    pub logistic_fitted: bool,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn plcc(s: &PairedSamples) -> Result<f64> {
    s.require(3)?;
    pearson(&s.predictions, &s.truths)
        .ok_or_else(|| Error::Degenerate("zero variance in a correlated sequence".into()))
}

/// 1-based ranks; tied values share their average rank.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

pub fn srcc(s: &PairedSamples) -> Result<f64> {
    s.require(3)?;
    pearson(
        &fractional_ranks(&s.predictions),
        &fractional_ranks(&s.truths),
    )
    .ok_or_else(|| Error::Degenerate("all values tied".into()))
}

/// Kendall tau-b via merge-sort inversion counting.
pub fn krcc(s: &PairedSamples) -> Result<f64> {
    s.require(3)?;
    let n = s.len();
    let mut pairs: Vec<(f64, f64)> = s
        .predictions
        .iter()
        .copied()
        .zip(s.truths.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let tie_pairs = |eq: &dyn Fn(usize, usize) -> bool| {
        let mut total = 0u64;
        let mut run = 1u64;
        for i in 1..n {
            if eq(i - 1, i) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let ties_x = tie_pairs(&|a, b| pairs[a].0 == pairs[b].0);
    let ties_xy = tie_pairs(&|a, b| pairs[a] == pairs[b]);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);
    let ties_y = {
        let mut total = 0u64;
        let mut run = 1u64;
        for i in 1..n {
            if ys[i - 1] == ys[i] {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let denom = ((n0 - ties_x) as f64) * ((n0 - ties_y) as f64);
    if denom == 0.0 {
        return Err(Error::Degenerate("all values tied".into()));
    }
    let num = n0 as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    Ok((num / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Monotone logistic `m + k·(2/c)·tanh(c·(x - x0)/2)`.
///
/// The same four-parameter family as `b2 + (b1 - b2)/(1 + exp(-(x - b3)/b4))`,
/// parameterized by the value `m` and slope `k` at the midpoint `x0` and the
/// curvature `c = 1/b4`, so the affine limit `c → 0` stays well conditioned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic {
    pub m: f64,
    pub k: f64,
    pub x0: f64,
    pub c: f64,
}

impl Logistic {
    pub fn eval(&self, x: f64) -> f64 {
        self.m + self.k * shape(self.c, x - self.x0)
    }

    fn gradient(&self, x: f64) -> Vector4<f64> {
        let d = x - self.x0;
        let g = shape(self.c, d);
        let h = 0.5 * self.c * d;
        let sech2 = 1.0 - h.tanh().powi(2);
        let dg_dc = if h.abs() < 1e-4 {
            -self.c * d * d * d / 6.0
        } else {
            (d * sech2 - g) / self.c
        };
        Vector4::new(1.0, g, -self.k * sech2, self.k * dg_dc)
    }
}

fn shape(c: f64, d: f64) -> f64 {
    let h = 0.5 * c * d;
    if h.abs() < 1e-4 {
        d * (1.0 - h * h / 3.0)
    } else {
        2.0 * h.tanh() / c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOutcome {
    pub rmse: f64,
    /// Correlation of the (possibly mapped) predictions; `None` when the
    /// predictions are constant.
    pub plcc: Option<f64>,
    pub logistic: Option<Logistic>,
    /// A logistic fit was requested but failed; raw values were used.
    pub fallback: bool,
}

const LOGISTIC_ITERATIONS: usize = 500;

/// Least-squares logistic from predictions to truths (Levenberg–Marquardt).
pub fn fit_logistic(x: &[f64], y: &[f64]) -> Result<Logistic> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("constant predictions".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut p = Logistic {
        m: my,
        k: sxy / sxx,
        x0: mx,
        c: 2.0 / (hi - lo),
    };
    let cost = |p: &Logistic| x.iter().zip(y).map(|(&a, &b)| (b - p.eval(a)).powi(2)).sum::<f64>();
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    let mut current = cost(&p);
    let mut lambda = 1e-3;
    for iter in 0..LOGISTIC_ITERATIONS {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for (&a, &b) in x.iter().zip(y) {
            let g = p.gradient(a);
            jtj += g * g.transpose();
            jtr += g * (b - p.eval(a));
        }
        if jtr.norm() <= 1e-15 * scale.sqrt() || current <= 1e-28 * scale {
            return Ok(p);
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut damped = jtj;
            for d in 0..4 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            if let Some(step) = damped.lu().solve(&jtr) {
                let trial = Logistic {
                    m: p.m + step[0],
                    k: p.k + step[1],
                    x0: p.x0 + step[2],
                    c: p.c + step[3],
                };
                let c = cost(&trial);
                if c.is_finite() && c <= current {
                    let rel_drop = (current - c) / current.max(1e-300);
                    p = trial;
                    current = c;
                    lambda = (lambda * 0.3).max(1e-15);
                    improved = true;
                    if rel_drop < 1e-14 && iter > 0 {
                        return Ok(p);
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            return Ok(p);
        }
    }
    Err(Error::NonConvergence {
        iterations: LOGISTIC_ITERATIONS,
        residual: current.sqrt(),
    })
}

fn rmse(x: &[f64], y: &[f64]) -> f64 {
    (x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn rmse_after_fit(s: &PairedSamples, use_logistic: bool) -> Result<FitOutcome> {
    let raw = |fallback| FitOutcome {
        rmse: rmse(&s.predictions, &s.truths),
        plcc: pearson(&s.predictions, &s.truths),
        logistic: None,
        fallback,
    };
    if !use_logistic {
        return Ok(raw(false));
    }
    s.require(5)?;
    match fit_logistic(&s.predictions, &s.truths) {
        Ok(f) => {
            let mapped: Vec<f64> = s.predictions.iter().map(|&v| f.eval(v)).collect();
            Ok(FitOutcome {
                rmse: rmse(&mapped, &s.truths),
                plcc: pearson(&mapped, &s.truths),
                logistic: Some(f),
                fallback: false,
            })
        }
        Err(_) => Ok(raw(true)),
    }
}

/// The full accuracy report. Rank correlations use raw predictions; PLCC
/// and RMSE use the logistic mapping when requested.
pub fn correlation_report(s: &PairedSamples, use_logistic: bool) -> Result<CorrelationReport> {
    let fit = rmse_after_fit(s, use_logistic)?;
    Ok(CorrelationReport {
        plcc: fit
            .plcc
            .ok_or_else(|| Error::Degenerate("zero variance in predictions".into()))?,
        srcc: srcc(s)?,
        krcc: krcc(s)?,
        rmse: fit.rmse,
        n: s.len(),
        logistic_fitted: fit.logistic.is_some(),
    })
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Significance {
    /// +1 when A has significantly smaller squared errors, −1 when larger.
    pub verdict: i8,
    pub t: f64,
    /// The per-item differences have zero variance.
    pub degenerate: bool,
}

/// Paired one-sided t-tests on `a_i² − b_i²` in both directions.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<Significance> {
    if a.len() != b.len() {
        return Err(Error::param("residuals", "sequences differ in length"));
    }
    if a.len() < 10 {
        return Err(Error::param("residuals", "need at least 10 items"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::param("residuals", "values must be finite"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * x - y * y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let verdict = if mean < 0.0 {
            1
        } else if mean > 0.0 {
            -1
        } else {
            0
        };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(Significance {
            verdict,
            t,
            degenerate: true,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Invariant(e.to_string()))?;
    let verdict = if dist.cdf(t) < SIGNIFICANCE_LEVEL {
        1
    } else if dist.sf(t) < SIGNIFICANCE_LEVEL {
        -1
    } else {
        0
    };
    Ok(Significance {
        verdict,
        t,
        degenerate: false,
    })
}

/// Evenly spaced thresholds `lo, lo + step, …` up to `hi` inclusive.
pub fn threshold_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(Error::param("grid", "need lo <= hi and a positive step"));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best_threshold: f64,
    pub best_plcc: f64,
    /// PLCC per threshold; `None` where the objective ratios are constant.
    pub curve: Vec<(f64, Option<f64>)>,
}

/// Threshold whose objective acceptance ratios best correlate with the
/// subjective ones. Ties go to the smallest threshold.
pub fn threshold_sweep(
    slide_scores: &[Vec<f64>],
    subjective: &[f64],
    grid: &[f64],
) -> Result<SweepResult> {
    if slide_scores.len() != subjective.len() {
        return Err(Error::param("slides", "one subjective ratio per slide"));
    }
    if slide_scores.len() < 10 {
        return Err(Error::param("slides", "need at least 10 slides"));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("grid", "must be non-empty and increasing"));
    }
    if subjective.iter().all(|&v| v == subjective[0]) {
        return Err(Error::Degenerate("subjective ratios have zero variance".into()));
    }
    let at = |t: f64| {
        let objective: Vec<f64> = slide_scores.iter().map(|s| acceptance_ratio(s, t)).collect();
        (t, pearson(&objective, subjective))
    };
    #[cfg(feature = "parallel")]
    let curve: Vec<(f64, Option<f64>)> = {
        use rayon::prelude::*;
        grid.par_iter().map(|&t| at(t)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let curve: Vec<(f64, Option<f64>)> = grid.iter().map(|&t| at(t)).collect();

    let mut best: Option<(f64, f64)> = None;
    for &(t, r) in &curve {
        if let Some(r) = r {
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((t, r));
            }
        }
    }
    let (best_threshold, best_plcc) = best.ok_or_else(|| {
        Error::Degenerate("objective ratios are constant at every threshold".into())
    })?;
    Ok(SweepResult {
        best_threshold,
        best_plcc,
        curve,
    })
}
